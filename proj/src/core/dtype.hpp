// SPDX-License-Identifier: Apache-2.0
//
// Element types understood by the tensor container and the explicit
// conversions between them. Nothing else in the library converts dtypes.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wsmerge {

static_assert(std::endian::native == std::endian::little,
              "tensor buffers are stored little-endian and copied verbatim");

// F32/F16/BF16 hold model weights. U32/I64 only appear in activation count
// tables, which share the container format.
enum class DType { F32, F16, BF16, U32, I64 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);
// Throws UnsupportedDtype for anything outside the five names above.
DType parse_dtype(std::string_view name);

constexpr bool is_float_dtype(DType dtype) {
    return dtype == DType::F32 || dtype == DType::F16 || dtype == DType::BF16;
}

// Scalar conversions, round-to-nearest-even on narrowing.
std::uint16_t f32_to_f16_bits(float value);
float f16_bits_to_f32(std::uint16_t bits);
std::uint16_t f32_to_bf16_bits(float value);
float bf16_bits_to_f32(std::uint16_t bits);

// Bulk conversions between a raw little-endian buffer and F32 values.
// Only float dtypes are accepted.
std::vector<float> decode_f32(std::span<const std::byte> bytes, DType dtype);
std::vector<std::byte> encode_f32(std::span<const float> values, DType dtype);

} // namespace wsmerge
