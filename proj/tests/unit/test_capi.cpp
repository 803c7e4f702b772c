// SPDX-License-Identifier: Apache-2.0

#include "wsmerge/wsmerge.h"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <string>
#include <vector>

namespace {

std::string take(char * s) {
    std::string out = s ? s : "";
    wsm_string_free(s);
    return out;
}

wsm_checkpoint * f32_checkpoint(const std::vector<std::pair<std::string, std::vector<float>>> & tensors) {
    wsm_checkpoint * c = nullptr;
    EXPECT_EQ(wsm_checkpoint_create(&c), WSM_OK);
    for (const auto & [name, v] : tensors) {
        const std::uint64_t shape[] = {v.size()};
        EXPECT_EQ(wsm_checkpoint_add_tensor(c, name.c_str(), "F32", shape, 1, v.data(), v.size() * 4), WSM_OK);
    }
    return c;
}

std::vector<float> values(const wsm_checkpoint * c, const char * name, std::size_t n) {
    std::vector<float> out(n);
    EXPECT_EQ(wsm_checkpoint_tensor_to_f32(c, name, out.data(), n), WSM_OK);
    return out;
}

TEST(CApi, VersionAndStatusNames) {
    EXPECT_STREQ(wsm_version(), "wsmerge 0.3.0");
    EXPECT_STREQ(wsm_status_name(WSM_OK), "ok");
    EXPECT_STRNE(wsm_status_name(WSM_ERR_TRUNCATED), wsm_status_name(WSM_ERR_MALFORMED_HEADER));
}

TEST(CApi, ParseErrorsCarryStatusAndMessage) {
    const std::uint8_t bytes[] = {1, 2, 3};
    wsm_checkpoint * c = nullptr;
    EXPECT_EQ(wsm_checkpoint_parse(bytes, sizeof(bytes), &c), WSM_ERR_TRUNCATED);
    EXPECT_EQ(c, nullptr);
    EXPECT_NE(std::string(wsm_last_error_message()).find("only 3 available"), std::string::npos);
    EXPECT_EQ(wsm_checkpoint_parse(nullptr, 0, nullptr), WSM_ERR_INVALID_ARGUMENT);
}

TEST(CApi, SerializeParseRoundTrip) {
    wsm_checkpoint * c = f32_checkpoint({{"b", {1, 2}}, {"a", {3}}});
    EXPECT_EQ(wsm_checkpoint_set_metadata(c, "format", "pt"), WSM_OK);
    std::uint8_t * buf = nullptr;
    std::size_t size = 0;
    ASSERT_EQ(wsm_checkpoint_serialize(c, &buf, &size), WSM_OK);
    wsm_checkpoint * back = nullptr;
    ASSERT_EQ(wsm_checkpoint_parse(buf, size, &back), WSM_OK);
    EXPECT_EQ(wsm_checkpoint_tensor_count(back), 2u);
    wsm_tensor_info info{};
    ASSERT_EQ(wsm_checkpoint_tensor_info(back, 0, &info), WSM_OK);
    EXPECT_STREQ(info.name, "a");
    EXPECT_STREQ(info.dtype, "F32");
    EXPECT_EQ(info.ndim, 1u);
    EXPECT_EQ(info.nbytes, 4u);
    EXPECT_EQ(wsm_checkpoint_tensor_info(back, 2, &info), WSM_ERR_INVALID_ARGUMENT);
    char * meta = nullptr;
    ASSERT_EQ(wsm_checkpoint_get_metadata(back, "format", &meta), WSM_OK);
    EXPECT_EQ(take(meta), "pt");
    ASSERT_EQ(wsm_checkpoint_get_metadata(back, "absent", &meta), WSM_OK);
    EXPECT_EQ(meta, nullptr);

    char * h1 = nullptr;
    char * h2 = nullptr;
    wsm_checkpoint_content_hash(c, &h1);
    wsm_checkpoint_content_hash(back, &h2);
    EXPECT_EQ(take(h1), take(h2));
    wsm_buffer_free(buf);
    wsm_checkpoint_free(back);
    wsm_checkpoint_free(c);
}

TEST(CApi, DuplicateTensorRejected) {
    wsm_checkpoint * c = f32_checkpoint({{"w", {1}}});
    const std::uint64_t shape[] = {1};
    const float v = 2;
    EXPECT_EQ(wsm_checkpoint_add_tensor(c, "w", "F32", shape, 1, &v, 4), WSM_ERR_DUPLICATE_TENSOR);
    EXPECT_EQ(wsm_checkpoint_add_tensor(c, "x", "F64", shape, 1, &v, 4), WSM_ERR_UNSUPPORTED_DTYPE);
    EXPECT_EQ(wsm_checkpoint_add_tensor(c, "y", "F32", shape, 1, &v, 8), WSM_ERR_INVALID_ARGUMENT);
    wsm_checkpoint_free(c);
}

TEST(CApi, Compatibility) {
    wsm_checkpoint * a = f32_checkpoint({{"w", {1, 2, 3, 4}}});
    wsm_checkpoint * b = nullptr;
    wsm_checkpoint_create(&b);
    const std::uint64_t shape[] = {2, 2};
    const float v[] = {1, 2, 3, 4};
    wsm_checkpoint_add_tensor(b, "w", "F32", shape, 2, v, 16);
    int ok = 1;
    char * json = nullptr;
    ASSERT_EQ(wsm_checkpoint_compatibility_json(a, b, &ok, &json), WSM_OK);
    EXPECT_EQ(ok, 0);
    EXPECT_NE(take(json).find("shape_mismatches"), std::string::npos);
    wsm_checkpoint_free(a);
    wsm_checkpoint_free(b);
}

TEST(CApi, DeltaApplyAndMerge) {
    wsm_checkpoint * base = f32_checkpoint({{"w", {0, 0, 0}}});
    wsm_checkpoint * m1 = f32_checkpoint({{"w", {0.1f, -2, 3}}});
    wsm_checkpoint * m2 = f32_checkpoint({{"w", {2, 1, -0.2f}}});
    wsm_task_vector * d1 = nullptr;
    wsm_task_vector * d2 = nullptr;
    ASSERT_EQ(wsm_task_vector_compute(m1, base, nullptr, &d1), WSM_OK);
    ASSERT_EQ(wsm_task_vector_compute(m2, base, nullptr, &d2), WSM_OK);
    EXPECT_EQ(wsm_task_vector_tensor_count(d1), 1u);
    EXPECT_EQ(std::strlen(wsm_task_vector_base_id(d1)), 64u);

    wsm_checkpoint * applied = nullptr;
    ASSERT_EQ(wsm_apply_delta(base, d1, 1.0, 0, nullptr, &applied), WSM_OK);
    EXPECT_EQ(values(applied, "w", 3), (std::vector<float>{0.1f, -2, 3}));

    wsm_merge_params p;
    wsm_merge_params_init(&p);
    p.method = "ties";
    p.k = 2.0 / 3.0;
    const wsm_task_vector * ds[] = {d1, d2};
    wsm_checkpoint * merged = nullptr;
    ASSERT_EQ(wsm_merge(base, ds, 2, &p, &merged), WSM_OK);
    EXPECT_EQ(values(merged, "w", 3), (std::vector<float>{2, -2, 3}));
    char * prov = nullptr;
    wsm_checkpoint_get_metadata(merged, "merge_provenance", &prov);
    EXPECT_NE(take(prov).find("ties"), std::string::npos);

    p.method = "fisher";
    wsm_checkpoint * bad = nullptr;
    EXPECT_EQ(wsm_merge(base, ds, 2, &p, &bad), WSM_ERR_INVALID_ARGUMENT);
    EXPECT_NE(std::string(wsm_last_error_message()).find("method"), std::string::npos);

    for (auto * c : {base, m1, m2, applied, merged}) wsm_checkpoint_free(c);
    wsm_task_vector_free(d1);
    wsm_task_vector_free(d2);
}

TEST(CApi, NumericalEntryPoints) {
    const double ha[] = {1, 0, 0, -1, 0, 0};
    const double s = 1.0 / std::sqrt(2.0);
    const double hb[] = {s, s, 0, -s, -s, 0};
    double angle = 0, median = 0;
    ASSERT_EQ(wsm_principal_angles(ha, hb, 2, 3, 1, &angle, &median), WSM_OK);
    EXPECT_NEAR(angle, std::numbers::pi / 4, 1e-9);
    EXPECT_EQ(angle, median);

    const double a[] = {1, -1};
    const double b[] = {2, -2};
    const double flat[] = {3, 3};
    double cka = 0;
    ASSERT_EQ(wsm_linear_cka(a, 2, 1, b, 1, &cka), WSM_OK);
    EXPECT_NEAR(cka, 1.0, 1e-15);
    EXPECT_EQ(wsm_linear_cka(a, 2, 1, flat, 1, &cka), WSM_ERR_ZERO_VARIANCE);
    EXPECT_EQ(wsm_principal_angles(ha, ha, 2, 3, 2, &angle, &median), WSM_ERR_INVALID_ARGUMENT);
}

TEST(CApi, LogCallbackReceivesWarnings) {
    std::vector<std::string> got;
    wsm_set_log_callback([](const char * m, void * u) { static_cast<std::vector<std::string> *>(u)->push_back(m); },
                         &got);
    wsm_checkpoint * base = f32_checkpoint({{"w", {0}}, {"v", {0}}});
    wsm_checkpoint * ft = f32_checkpoint({{"w", {1}}});
    wsm_task_vector * d = nullptr;
    ASSERT_EQ(wsm_task_vector_compute(ft, base, nullptr, &d), WSM_OK);
    wsm_set_log_callback(nullptr, nullptr);
    EXPECT_FALSE(got.empty());
    wsm_task_vector_free(d);
    wsm_checkpoint_free(base);
    wsm_checkpoint_free(ft);
}

TEST(CApi, FreeingNullIsHarmless) {
    wsm_checkpoint_free(nullptr);
    wsm_task_vector_free(nullptr);
    wsm_dump_free(nullptr);
    wsm_string_free(nullptr);
    wsm_buffer_free(nullptr);
}

} // namespace
