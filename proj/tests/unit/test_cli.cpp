// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include "core/activation_stats.hpp"
#include "core/alignment.hpp"
#include "core/checkpoint.hpp"

#include "test_support.hpp"

#include "json.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testsupport::read_text;
using testsupport::TempDir;
using testsupport::write_text;

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    Result r;
    r.code = wsmerge::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

json error_of(const Result & r) {
    std::istringstream lines(r.err);
    std::string line, last;
    while (std::getline(lines, line)) {
        if (!line.empty()) last = line;
    }
    return json::parse(last);
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        // Fine-tuned values within a factor of two of the base, so f - b is
        // exact in F32 and base + delta reproduces f bit for bit.
        std::mt19937_64 rng(77);
        std::uniform_real_distribution<float> ratio(0.5f, 2.0f);
        const auto near = [&](const std::vector<float> & b) {
            std::vector<float> out(b);
            for (auto & x : out) x *= ratio(rng);
            return out;
        };
        const auto a = testsupport::random_delta(rng, 24);
        const auto b = testsupport::random_delta(rng, 7);
        base_ = testsupport::f32_checkpoint({{"a", a}, {"b", b}});
        base_.set_metadata("format", "pt");
        wsmerge::write_checkpoint(base_, dir_ / "base.safetensors");
        for (int i = 0; i < 3; ++i) {
            auto m = testsupport::f32_checkpoint({{"a", near(a)}, {"b", near(b)}});
            wsmerge::write_checkpoint(m, dir_ / ("ft" + std::to_string(i) + ".safetensors"));
            models_.push_back(std::move(m));
        }
    }

    std::string wd() const { return dir_.path().string(); }

    void recipe(const std::string & name, const json & j) const { write_text(dir_ / name, j.dump()); }

    TempDir dir_;
    wsmerge::Checkpoint base_;
    std::vector<wsmerge::Checkpoint> models_;
};

TEST_F(CliTest, TaskArithmeticSingleModelReproducesFineTuned) {
    recipe("r.json", {{"method", "task_arithmetic"}, {"base", "base.safetensors"},
                      {"models", {"ft0.safetensors"}}, {"alphas", {1.0}}, {"output", "out.safetensors"}});
    const Result r = cli({"merge", "--workdir", wd(), "--recipe", "r.json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto out = wsmerge::read_checkpoint(dir_ / "out.safetensors");
    EXPECT_EQ(out.tensors(), models_[0].tensors());
    EXPECT_EQ(out.metadata_value("format"), "pt");
    const json manifest = json::parse(read_text(dir_ / "out.safetensors.manifest.json"));
    EXPECT_EQ(manifest["resolved"]["method"], "task_arithmetic");
    EXPECT_EQ(manifest["inputs"]["models"].size(), 1u);
    EXPECT_EQ(manifest["outputs"][0]["path"], "out.safetensors");
}

TEST_F(CliTest, UnknownMethodIsSchemaError) {
    recipe("r.json", {{"method", "fisher"}, {"base", "base.safetensors"}, {"models", {"ft0.safetensors"}}});
    const Result r = cli({"merge", "--workdir", wd(), "--recipe", "r.json"});
    EXPECT_EQ(r.code, 2);
    const json e = error_of(r);
    EXPECT_EQ(e["error"]["exit_code"], 2);
    EXPECT_NE(e["error"]["message"].get<std::string>().find("'method'"), std::string::npos);
}

TEST_F(CliTest, RecipeSchemaViolations) {
    const json good = {{"method", "ties"}, {"base", "base.safetensors"}, {"models", {"ft0.safetensors"}}};
    for (const auto & [key, value] : std::vector<std::pair<std::string, json>>{
             {"alphas", {1, 2}}, {"seed", -1}, {"k", "big"}, {"colour", 1}, {"sweep", {{"p", {0.1}}}}}) {
        json j = good;
        j[key] = value;
        recipe("r.json", j);
        const Result r = cli({"merge", "--workdir", wd(), "--recipe", "r.json"});
        EXPECT_EQ(r.code, 2) << key;
        EXPECT_NE(error_of(r)["error"]["message"].get<std::string>().find(key), std::string::npos) << r.err;
    }
    write_text(dir_ / "broken.json", "{");
    EXPECT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "broken.json"}).code, 2);
}

TEST_F(CliTest, OutOfRangeHyperparameterIsValidationError) {
    recipe("r.json", {{"method", "dare"}, {"base", "base.safetensors"}, {"models", {"ft0.safetensors"}}, {"p", 1.0}});
    EXPECT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json"}).code, 2);
}

TEST_F(CliTest, MissingInputIsIoError) {
    recipe("r.json", {{"method", "ties"}, {"base", "nope.safetensors"}, {"models", {"ft0.safetensors"}}});
    EXPECT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json"}).code, 4);
}

TEST_F(CliTest, SweepGridSizes) {
    const std::vector<std::pair<std::string, std::size_t>> expected = {
        {"ties", 30}, {"dare", 20}, {"task_arithmetic", 5}, {"sce", 5}};
    for (const auto & [method, cells] : expected) {
        const std::string out = method + ".safetensors";
        recipe("r.json", {{"method", method}, {"base", "base.safetensors"},
                          {"models", {"ft0.safetensors", "ft1.safetensors"}}, {"output", out}, {"seed", 3}});
        const Result r = cli({"merge", "--workdir", wd(), "--recipe", "r.json", "--sweep"});
        ASSERT_EQ(r.code, 0) << r.err;
        const json index = json::parse(read_text(dir_ / method / "sweep_index.json"));
        EXPECT_EQ(index["cell_count"], cells) << method;
        std::size_t dirs = 0;
        for (const auto & e : fs::directory_iterator(dir_ / method)) {
            if (e.is_directory()) {
                ++dirs;
                EXPECT_TRUE(fs::exists(e.path() / out));
                EXPECT_TRUE(fs::exists(e.path() / "manifest.json"));
            }
        }
        EXPECT_EQ(dirs, cells) << method;
    }
}

TEST_F(CliTest, CustomSweepAxes) {
    recipe("r.json", {{"method", "ties"}, {"base", "base.safetensors"},
                      {"models", {"ft0.safetensors", "ft1.safetensors"}},
                      {"sweep", {{"k", {0.5, 1.0}}, {"lambda", {1.0}}}}});
    ASSERT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json"}).code, 0);
    const json index = json::parse(read_text(dir_ / "merged" / "sweep_index.json"));
    EXPECT_EQ(index["cell_count"], 2);
}

json without_clock(json j) {
    j.erase("wall_clock");
    return j;
}

TEST_F(CliTest, RunsAreByteIdentical) {
    for (const std::string method : {"task_arithmetic", "ties", "dare", "sce"}) {
        recipe("r.json", {{"method", method}, {"base", "base.safetensors"},
                          {"models", {"ft2.safetensors", "ft0.safetensors", "ft1.safetensors"}},
                          {"alphas", {0.3, 0.5, 0.2}}, {"k", 0.5}, {"p", 0.7}, {"topk", 0.4}, {"lambda", 0.8},
                          {"seed", 12345}, {"output", "det.safetensors"}});
        ASSERT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json", "--threads", "1"}).code, 0);
        const std::string first = read_text(dir_ / "det.safetensors");
        const json m1 = json::parse(read_text(dir_ / "det.safetensors.manifest.json"));
        ASSERT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json", "--threads", "4"}).code, 0);
        EXPECT_EQ(read_text(dir_ / "det.safetensors"), first) << method;
        const json m2 = json::parse(read_text(dir_ / "det.safetensors.manifest.json"));
        EXPECT_EQ(without_clock(m1), without_clock(m2)) << method;
        EXPECT_TRUE(m1.contains("wall_clock"));
    }
}

TEST_F(CliTest, EveryOutputHasAManifest) {
    recipe("r.json", {{"method", "dare"}, {"base", "base.safetensors"},
                      {"models", {"ft0.safetensors", "ft1.safetensors"}}, {"output", "sw/d.safetensors"}});
    ASSERT_EQ(cli({"merge", "--workdir", wd(), "--recipe", "r.json", "--sweep"}).code, 0);
    std::set<std::string> listed;
    for (const auto & e : fs::recursive_directory_iterator(dir_ / "sw")) {
        if (e.path().filename() == "manifest.json") {
            listed.insert(e.path().string());
            const json manifest = json::parse(read_text(e.path()));
            for (const auto & o : manifest["outputs"]) {
                listed.insert((dir_ / o["path"].get<std::string>()).string());
            }
        }
    }
    listed.insert((dir_ / "sw" / "d" / "sweep_index.json").string());
    for (const auto & e : fs::recursive_directory_iterator(dir_ / "sw")) {
        if (e.is_regular_file()) {
            EXPECT_TRUE(listed.count(e.path().string())) << "orphan " << e.path();
        }
    }
}

TEST_F(CliTest, DeltaCommand) {
    const Result r = cli({"delta", "--workdir", wd(), "--base", "base.safetensors", "--model", "ft0.safetensors",
                          "--out", "d0.safetensors"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir_ / "d0.safetensors.json"));
    EXPECT_TRUE(fs::exists(dir_ / "d0.safetensors.manifest.json"));
}

TEST_F(CliTest, Inspect) {
    Result r = cli({"inspect", "--workdir", wd(), "base.safetensors"});
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("2 tensors"), std::string::npos);
    EXPECT_NE(r.out.find("  a  F32  [24]"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("  b  F32  [7]"), std::string::npos);
    EXPECT_NE(r.out.find("header: valid"), std::string::npos);

    wsmerge::write_checkpoint({}, dir_ / "empty.safetensors");
    r = cli({"inspect", "--workdir", wd(), "empty.safetensors"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("0 tensors"), std::string::npos);

    std::string bytes = read_text(dir_ / "base.safetensors");
    write_text(dir_ / "cut.safetensors", bytes.substr(0, 40));
    r = cli({"inspect", "--workdir", wd(), "cut.safetensors"});
    EXPECT_EQ(r.code, 4);
    const std::string msg = error_of(r)["error"]["message"];
    EXPECT_NE(msg.find("expects"), std::string::npos) << msg;
    EXPECT_NE(msg.find("only 32 available"), std::string::npos) << msg;
}

TEST_F(CliTest, UsageErrors) {
    EXPECT_EQ(cli({}).code, 2);
    EXPECT_EQ(cli({"bogus"}).code, 2);
    const Result r = cli({"diag", "nua", "--workdir", wd(), "--a", "x.safetensors"});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_of(r)["error"]["status"], "usage_error");
    EXPECT_EQ(cli({"--help"}).code, 0);
    EXPECT_EQ(cli({"--version"}).code, 0);
}

wsmerge::ActivationCountTable counts(std::mt19937_64 & rng, const std::string & lang, wsmerge::Span span) {
    wsmerge::ActivationCountTable t;
    t.model_id = "toy";
    t.language = lang;
    t.span = span;
    t.layers = 4;
    t.width = 8;
    t.token_total = 50;
    for (int i = 0; i < 32; ++i) t.counts.push_back(rng() % 51);
    return t;
}

TEST_F(CliTest, DiagSelectivityAndNua) {
    std::mt19937_64 rng(5);
    std::vector<std::string> args = {"diag", "selectivity", "--workdir", wd(), "--rho", "0.1", "--tau-percentile",
                                     "0.8", "--out", "sel", "--tables"};
    for (const std::string lang : {"de", "hi", "ja", "zh"}) {
        const std::vector<wsmerge::ActivationCountTable> t = {counts(rng, lang, wsmerge::Span::Src),
                                                              counts(rng, lang, wsmerge::Span::Tgt)};
        wsmerge::write_count_tables(t, dir_ / (lang + ".counts"));
        args.push_back(lang + ".counts");
    }
    Result r = cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
    const json report = json::parse(read_text(dir_ / "sel.json"));
    EXPECT_EQ(report["report"], "selectivity");
    EXPECT_EQ(report["spans"].size(), 2u);
    for (const char * f : {"sel.layers.csv", "sel.totals.csv", "sel.manifest.json"}) {
        EXPECT_TRUE(fs::exists(dir_ / f)) << f;
    }
    EXPECT_EQ(read_text(dir_ / "sel.totals.csv").substr(0, 17), "language,src,tgt\n");

    r = cli({"diag", "nua", "--workdir", wd(), "--a", "de.counts", "--b", "hi.counts", "--span", "src"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_text(dir_ / "nua.csv").substr(0, 20), "layer,nua,zero_norm\n");
}

wsmerge::RepresentationDump rep(std::mt19937_64 & rng, std::size_t layers, const std::string & fp) {
    wsmerge::RepresentationDump d;
    d.model_id = "toy";
    d.language = "hi";
    d.dataset_fingerprint = fp;
    d.n = 12;
    d.d = 6;
    std::normal_distribution<float> dist;
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd m(12, 6);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
        d.hidden.push_back(m);
    }
    return d;
}

TEST_F(CliTest, DiagCkaAndAngles) {
    std::mt19937_64 rng(6);
    wsmerge::write_representation_dump(rep(rng, 37, "fp1"), dir_ / "a.dump");
    wsmerge::write_representation_dump(rep(rng, 37, "fp1"), dir_ / "b.dump");
    wsmerge::write_representation_dump(rep(rng, 37, "fp2"), dir_ / "c.dump");

    Result r = cli({"diag", "cka", "--workdir", wd(), "--a", "a.dump", "--b", "b.dump", "--bands", "0-11,12-27,28-36"});
    ASSERT_EQ(r.code, 0) << r.err;
    const json cka = json::parse(read_text(dir_ / "cka.json"));
    EXPECT_EQ(cka["per_layer"].size(), 37u);
    EXPECT_EQ(cka["bands"].size(), 3u);

    r = cli({"diag", "cka", "--workdir", wd(), "--a", "a.dump", "--b", "c.dump"});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_of(r)["error"]["status"], "fingerprint_mismatch");

    r = cli({"diag", "angles", "--workdir", wd(), "--a", "a.dump", "--b", "b.dump", "--rank", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir_ / "angles.manifest.json"));
    EXPECT_EQ(cli({"diag", "angles", "--workdir", wd(), "--a", "a.dump", "--b", "b.dump", "--rank", "12"}).code, 2);

    wsmerge::RepresentationDump low = rep(rng, 37, "fp1");
    for (auto & m : low.hidden) m.col(1) = m.col(0);
    for (auto & m : low.hidden) m.rightCols(5).setZero();
    wsmerge::write_representation_dump(low, dir_ / "low.dump");
    r = cli({"diag", "angles", "--workdir", wd(), "--a", "a.dump", "--b", "low.dump", "--rank", "2"});
    EXPECT_EQ(r.code, 3) << r.err;
}

} // namespace
