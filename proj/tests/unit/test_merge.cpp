// SPDX-License-Identifier: Apache-2.0

#include "core/error.hpp"
#include "core/log.hpp"
#include "core/merge.hpp"
#include "core/philox.hpp"

#include "merge_oracle.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

namespace {

using namespace wsmerge;
using testsupport::bit_equal;
using testsupport::f32_checkpoint;
using testsupport::f32_values;

using Vec = std::vector<float>;

TaskVector delta_of(const Checkpoint & base, const std::string & id, const Vec & v, const std::string & name = "t") {
    TaskVector tv;
    tv.base_id = content_hash(base);
    tv.source_id = id;
    tv.deltas[name] = DeltaTensor{{v.size()}, v};
    return tv;
}

Vec run(MergeParams params, const Vec & base, const std::vector<Vec> & deltas) {
    const Checkpoint b = f32_checkpoint({{"t", base}});
    std::vector<TaskVector> tvs;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        tvs.push_back(delta_of(b, "m" + std::to_string(i), deltas[i]));
    }
    return f32_values(merge(b, tvs, params), "t");
}

MergeParams params_for(MergeMethod m) {
    MergeParams p;
    p.method = m;
    return p;
}

TEST(Philox, KnownAnswers) {
    EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}),
              (PhiloxCounter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (PhiloxCounter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (PhiloxCounter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
    EXPECT_EQ(oracle::philox({0, 0, 0, 0}, {0, 0}), (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du,
                                                                                   0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, UniformMatchesOracle) {
    for (std::uint64_t seed : {0ull, 1ull, 0xdeadbeefcafef00dull}) {
        for (std::uint64_t i = 0; i < 100; ++i) {
            const double u = philox_uniform(seed, fnv1a64("layer.0.weight"), i);
            EXPECT_EQ(u, oracle::uniform01(seed, "layer.0.weight", i));
            EXPECT_GE(u, 0.0);
            EXPECT_LT(u, 1.0);
        }
    }
}

TEST(Trim, Examples) {
    const Vec d = {1, 2, 3};
    EXPECT_EQ(trim_topk_values(d, 1.0), d);
    EXPECT_EQ(trim_topk_values(Vec{0.1f, -2, 3}, 2.0 / 3.0), (Vec{0, -2, 3}));
    EXPECT_EQ(trim_topk_values(Vec{1, -1, 1, -1}, 0.5), (Vec{1, -1, 0, 0}));
    EXPECT_EQ(trim_topk_values(Vec{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.7), (Vec{0, 0, 0, 4, 5, 6, 7, 8, 9, 10}));
    EXPECT_THROW(trim_topk_values(d, 0.0), Error);
    EXPECT_THROW(trim_topk_values(d, 1.5), Error);
}

TEST(ElectSign, Examples) {
    const Checkpoint base = f32_checkpoint({{"t", {0, 0, 0}}});
    const std::vector<TaskVector> two = {delta_of(base, "a", {0, -2, 3}), delta_of(base, "b", {2, 1, 0})};
    EXPECT_EQ(elect_sign(two).at("t"), (std::vector<std::int8_t>{1, -1, 1}));
    const std::vector<TaskVector> one = {delta_of(base, "a", {0, -2, 3})};
    EXPECT_EQ(elect_sign(one).at("t"), (std::vector<std::int8_t>{0, -1, 1}));
    const Checkpoint b1 = f32_checkpoint({{"t", {0}}});
    const std::vector<TaskVector> cancel = {delta_of(b1, "a", {1}), delta_of(b1, "b", {-1})};
    EXPECT_EQ(elect_sign(cancel).at("t"), std::vector<std::int8_t>{0});
}

TEST(Ties, HandTrace) {
    MergeParams p = params_for(MergeMethod::Ties);
    p.k = 2.0 / 3.0;
    EXPECT_EQ(run(p, {0, 0, 0}, {{0.1f, -2, 3}, {2, 1, -0.2f}}), (Vec{2, -2, 3}));
}

TEST(Ties, DuplicatesActLikeOne) {
    MergeParams p = params_for(MergeMethod::Ties);
    p.k = 0.5;
    p.lambda = 0.3;
    const Vec d = {0.5f, -1.25f, 2, 0.125f};
    EXPECT_TRUE(bit_equal(run(p, {1, 1, 1, 1}, {d, d}), run(p, {1, 1, 1, 1}, {d})));
}

TEST(Dare, ZeroRateIsIdentity) {
    const Vec d = {0.5f, -1, 2};
    for (std::uint64_t seed : {0u, 1u, 99u}) {
        EXPECT_EQ(dare_sparsify_values(d, 0.0, seed, "t"), d);
    }
    EXPECT_THROW(dare_sparsify_values(d, 1.0, 0, "t"), Error);
}

TEST(Dare, Deterministic) {
    std::mt19937_64 rng(1);
    const Vec d = testsupport::random_delta(rng, 1000);
    EXPECT_TRUE(bit_equal(dare_sparsify_values(d, 0.5, 42, "x"), dare_sparsify_values(d, 0.5, 42, "x")));
    EXPECT_FALSE(bit_equal(dare_sparsify_values(d, 0.5, 42, "x"), dare_sparsify_values(d, 0.5, 43, "x")));
    EXPECT_FALSE(bit_equal(dare_sparsify_values(d, 0.5, 42, "x"), dare_sparsify_values(d, 0.5, 42, "y")));
}

TEST(Dare, SurvivalRateWithinBinomialInterval) {
    const std::size_t n = 100000;
    const Vec d(n, 1.0f);
    const Vec out = dare_sparsify_values(d, 0.9, 2024, "big");
    const auto kept = std::count_if(out.begin(), out.end(), [](float v) { return v != 0.0f; });
    // 99% interval for Binomial(1e5, 0.1): 10000 +/- 2.576 * sqrt(9000)
    EXPECT_NEAR(double(kept), 10000.0, 2.576 * std::sqrt(9000.0));
    for (float v : out) {
        if (v != 0.0f) {
            ASSERT_EQ(v, float(1.0 / (1.0 - 0.9)));
        }
    }
}

TEST(Dare, ZeroRateEqualsTaskArithmetic) {
    std::mt19937_64 rng(8);
    const Vec base = testsupport::random_delta(rng, 30);
    const std::vector<Vec> ds = {testsupport::random_delta(rng, 30), testsupport::random_delta(rng, 30)};
    MergeParams ta = params_for(MergeMethod::TaskArithmetic);
    ta.alphas = {0.3, 0.7};
    MergeParams dare = ta;
    dare.method = MergeMethod::Dare;
    dare.seed = 17;
    EXPECT_TRUE(bit_equal(run(ta, base, ds), run(dare, base, ds)));
}

TEST(Sce, Examples) {
    MergeParams p = params_for(MergeMethod::Sce);
    EXPECT_EQ(run(p, {1, 1}, {{2, 0}, {0, 0}}), (Vec{3, 1}));
    EXPECT_EQ(run(p, {5}, {{1}, {-1}}), Vec{5});
    const Vec d = {0.5f, -0.25f, 3};
    EXPECT_EQ(run(p, {0, 0, 0}, {d, d}), d);
}

TEST(Sce, ZeroMassCopiesBaseWithWarning) {
    std::vector<std::string> warnings;
    set_log_sink([&](const std::string & m) { warnings.push_back(m); });
    const Vec out = run(params_for(MergeMethod::Sce), {1, 2}, {{0, 0}, {0, 0}});
    set_log_sink({});
    EXPECT_EQ(out, (Vec{1, 2}));
    ASSERT_FALSE(warnings.empty());
    EXPECT_NE(warnings[0].find("zero"), std::string::npos);
}

TEST(Merge, NeutralSingleDeltaReproducesApplyDelta) {
    std::mt19937_64 rng(21);
    const Vec base = testsupport::random_delta(rng, 50);
    const Vec d = testsupport::random_delta(rng, 50);
    const Checkpoint b = f32_checkpoint({{"t", base}});
    const std::vector<TaskVector> tv = {delta_of(b, "m", d)};
    const Checkpoint expect = apply_delta(b, tv[0], 1.0);
    for (MergeMethod m : {MergeMethod::TaskArithmetic, MergeMethod::Ties, MergeMethod::Dare, MergeMethod::Sce}) {
        const Checkpoint out = merge(b, tv, params_for(m));
        EXPECT_EQ(out.at("t"), expect.at("t")) << merge_method_name(m);
    }
}

TEST(Merge, MatchesOracleOnRandomInstances) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng() % 64;
        const std::size_t m = 2 + rng() % 3;
        const Vec base = testsupport::random_delta(rng, n);
        std::vector<Vec> ds;
        std::vector<oracle::Model> models;
        MergeParams p;
        for (std::size_t i = 0; i < m; ++i) {
            ds.push_back(testsupport::random_delta(rng, n));
            p.alphas.push_back(0.1 * double(1 + rng() % 10));
            models.push_back({"m" + std::to_string(i), p.alphas.back(), ds.back()});
        }
        p.k = 0.1 * double(1 + rng() % 10);
        p.p = 0.1 * double(rng() % 10);
        p.lambda = 0.1 * double(1 + rng() % 10);
        p.topk = 0.1 * double(1 + rng() % 10);
        p.seed = rng();

        p.method = MergeMethod::TaskArithmetic;
        EXPECT_TRUE(bit_equal(run(p, base, ds), oracle::task_arithmetic(base, models)));
        p.method = MergeMethod::Ties;
        EXPECT_TRUE(bit_equal(run(p, base, ds), oracle::ties(base, models, p.k, p.lambda)));
        p.method = MergeMethod::Dare;
        EXPECT_TRUE(bit_equal(run(p, base, ds), oracle::dare(base, models, p.p, p.seed, "t")));
        p.method = MergeMethod::Sce;
        EXPECT_TRUE(bit_equal(run(p, base, ds), oracle::sce(base, models, p.topk)));
    }
}

TEST(Merge, PermutationAndThreadInvariance) {
    std::mt19937_64 rng(4);
    Checkpoint b;
    std::vector<std::pair<std::string, Vec>> tensors;
    for (int t = 0; t < 12; ++t) {
        tensors.emplace_back("layer." + std::to_string(t), testsupport::random_delta(rng, 33));
    }
    b = f32_checkpoint(tensors);
    std::vector<TaskVector> tvs;
    for (int i = 0; i < 4; ++i) {
        TaskVector tv;
        tv.base_id = content_hash(b);
        tv.source_id = "model-" + std::to_string(i);
        for (const auto & [name, v] : tensors) {
            tv.deltas[name] = DeltaTensor{{v.size()}, testsupport::random_delta(rng, v.size())};
        }
        tvs.push_back(std::move(tv));
    }
    for (MergeMethod m : {MergeMethod::TaskArithmetic, MergeMethod::Ties, MergeMethod::Dare, MergeMethod::Sce}) {
        MergeParams p = params_for(m);
        p.k = 0.4;
        p.p = 0.6;
        p.topk = 0.3;
        p.lambda = 0.5;
        p.alphas = {0.2, 0.4, 0.6, 0.8};
        p.seed = 5;
        p.threads = 1;
        const auto ser = serialize_checkpoint(merge(b, tvs, p));
        for (unsigned threads : {2u, 4u, 8u}) {
            p.threads = threads;
            EXPECT_EQ(serialize_checkpoint(merge(b, tvs, p)), ser) << merge_method_name(m) << threads;
        }
        std::vector<TaskVector> rev(tvs.rbegin(), tvs.rend());
        MergeParams pr = p;
        pr.alphas.assign(p.alphas.rbegin(), p.alphas.rend());
        EXPECT_EQ(serialize_checkpoint(merge(b, rev, pr)), ser) << merge_method_name(m);
    }
}

TEST(Merge, ParameterValidation) {
    const Vec base = {0};
    const std::vector<Vec> ds = {{1}, {2}};
    MergeParams p = params_for(MergeMethod::Ties);
    p.k = 0.0;
    EXPECT_THROW(run(p, base, ds), Error);
    p = params_for(MergeMethod::Dare);
    p.p = 1.0;
    EXPECT_THROW(run(p, base, ds), Error);
    p = params_for(MergeMethod::TaskArithmetic);
    p.alphas = {1.0};
    EXPECT_THROW(run(p, base, ds), Error);
    EXPECT_THROW(run(params_for(MergeMethod::Ties), base, {}), Error);
    try {
        parse_merge_method("fisher");
        FAIL();
    } catch (const Error & e) {
        EXPECT_NE(std::string(e.what()).find("method"), std::string::npos);
    }
}

TEST(Merge, NoNonFiniteOutputs) {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 20; ++i) {
        const Vec base = testsupport::random_delta(rng, 20);
        const std::vector<Vec> ds = {testsupport::random_delta(rng, 20), testsupport::random_delta(rng, 20)};
        for (MergeMethod m : {MergeMethod::TaskArithmetic, MergeMethod::Ties, MergeMethod::Dare, MergeMethod::Sce}) {
            MergeParams p = params_for(m);
            p.p = 0.5;
            p.k = 0.5;
            p.topk = 0.5;
            for (float v : run(p, base, ds)) {
                ASSERT_TRUE(std::isfinite(v));
            }
        }
    }
}

} // namespace
