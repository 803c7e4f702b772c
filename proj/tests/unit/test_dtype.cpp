// SPDX-License-Identifier: Apache-2.0

#include "core/dtype.hpp"
#include "core/error.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>

namespace {

struct HalfCase {
    std::uint32_t f32;
    std::uint16_t f16;
    std::uint16_t bf16;
};

struct WidenCase {
    std::uint16_t h;
    std::uint32_t f16_f32;
    std::uint32_t bf16_f32;
};

#include "half_reference.inc"

using namespace wsmerge;

TEST(Dtype, NamesAndSizes) {
    EXPECT_EQ(dtype_size(DType::F32), 4u);
    EXPECT_EQ(dtype_size(DType::F16), 2u);
    EXPECT_EQ(dtype_size(DType::BF16), 2u);
    EXPECT_EQ(dtype_size(DType::U32), 4u);
    EXPECT_EQ(dtype_size(DType::I64), 8u);
    for (DType d : {DType::F32, DType::F16, DType::BF16, DType::U32, DType::I64}) {
        EXPECT_EQ(parse_dtype(dtype_name(d)), d);
    }
}

TEST(Dtype, UnknownNameIsUnsupported) {
    for (const char * name : {"F64", "I8", "f32", "", "Q4_0"}) {
        try {
            parse_dtype(name);
            FAIL() << name;
        } catch (const Error & e) {
            EXPECT_EQ(e.code(), ErrorCode::UnsupportedDtype);
        }
    }
}

TEST(Dtype, NarrowingMatchesReference) {
    for (const HalfCase & c : kNarrowCases) {
        const float f = std::bit_cast<float>(c.f32);
        EXPECT_EQ(f32_to_f16_bits(f), c.f16) << std::hex << c.f32;
        EXPECT_EQ(f32_to_bf16_bits(f), c.bf16) << std::hex << c.f32;
    }
}

TEST(Dtype, WideningMatchesReference) {
    for (const WidenCase & c : kWidenCases) {
        const float a = f16_bits_to_f32(c.h);
        const float b = bf16_bits_to_f32(c.h);
        if (std::isnan(a)) {
            EXPECT_TRUE(std::isnan(std::bit_cast<float>(c.f16_f32)));
        } else {
            EXPECT_EQ(std::bit_cast<std::uint32_t>(a), c.f16_f32) << std::hex << c.h;
        }
        if (std::isnan(b)) {
            EXPECT_TRUE(std::isnan(std::bit_cast<float>(c.bf16_f32)));
        } else {
            EXPECT_EQ(std::bit_cast<std::uint32_t>(b), c.bf16_f32) << std::hex << c.h;
        }
    }
}

TEST(Dtype, EveryFiniteHalfRoundTrips) {
    for (std::uint32_t h = 0; h <= 0xffff; ++h) {
        const auto bits = static_cast<std::uint16_t>(h);
        const float f = f16_bits_to_f32(bits);
        if (!std::isnan(f)) {
            ASSERT_EQ(f32_to_f16_bits(f), bits) << std::hex << h;
        }
        const float g = bf16_bits_to_f32(bits);
        if (!std::isnan(g)) {
            ASSERT_EQ(f32_to_bf16_bits(g), bits) << std::hex << h;
        }
    }
}

TEST(Dtype, BulkCodecRoundTrip) {
    const std::vector<float> v = {1.0f, -0.5f, 0.0f, 65504.0f, 3.140625f};
    for (DType d : {DType::F32, DType::F16, DType::BF16}) {
        const auto bytes = encode_f32(v, d);
        EXPECT_EQ(bytes.size(), v.size() * dtype_size(d));
        EXPECT_EQ(decode_f32(bytes, d)[0], 1.0f);
        EXPECT_EQ(decode_f32(bytes, d)[1], -0.5f);
    }
    EXPECT_THROW(encode_f32(v, DType::U32), Error);
}

} // namespace
