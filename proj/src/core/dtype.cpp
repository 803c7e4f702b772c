// SPDX-License-Identifier: Apache-2.0

#include "core/dtype.hpp"

#include "core/error.hpp"

#include <cstring>

namespace wsmerge {

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F32:  return 4;
        case DType::F16:  return 2;
        case DType::BF16: return 2;
        case DType::U32:  return 4;
        case DType::I64:  return 8;
    }
    return 0;
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
        case DType::F32:  return "F32";
        case DType::F16:  return "F16";
        case DType::BF16: return "BF16";
        case DType::U32:  return "U32";
        case DType::I64:  return "I64";
    }
    return "?";
}

DType parse_dtype(std::string_view name) {
    if (name == "F32")  return DType::F32;
    if (name == "F16")  return DType::F16;
    if (name == "BF16") return DType::BF16;
    if (name == "U32")  return DType::U32;
    if (name == "I64")  return DType::I64;
    fail(ErrorCode::UnsupportedDtype, "unsupported dtype '" + std::string(name) + "'");
}

std::uint16_t f32_to_f16_bits(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t x = bits & 0x7fffffffu;

    if (x >= 0x7f800000u) {
        if (x == 0x7f800000u) {
            return sign | 0x7c00u;
        }
        // keep the top payload bits, force quiet
        return static_cast<std::uint16_t>(sign | 0x7e00u | ((x >> 13) & 0x3ffu));
    }
    // 65520 and above round to infinity
    if (x >= 0x477ff000u) {
        return sign | 0x7c00u;
    }
    if (x < 0x38800000u) {
        // result is subnormal or zero; below 2^-25 everything rounds to zero
        if (x < 0x33000000u) {
            return sign;
        }
        const std::uint32_t exponent = x >> 23;
        const std::uint32_t mantissa = (x & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126u - exponent;
        std::uint32_t r = mantissa >> shift;
        const std::uint32_t rem = mantissa & ((1u << shift) - 1u);
        const std::uint32_t half = 1u << (shift - 1u);
        if (rem > half || (rem == half && (r & 1u))) {
            ++r;
        }
        return static_cast<std::uint16_t>(sign | r);
    }
    std::uint32_t r = (x - 0x38000000u) >> 13;
    const std::uint32_t rem = x & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) {
        ++r;
    }
    return static_cast<std::uint16_t>(sign | r);
}

float f16_bits_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;

    std::uint32_t bits;
    if (exponent == 0) {
        if (mantissa == 0) {
            bits = sign;
        } else {
            exponent = 113;
            while ((mantissa & 0x400u) == 0) {
                mantissa <<= 1;
                --exponent;
            }
            mantissa &= 0x3ffu;
            bits = sign | (exponent << 23) | (mantissa << 13);
        }
    } else if (exponent == 31) {
        bits = sign | 0x7f800000u | (mantissa << 13);
    } else {
        bits = sign | ((exponent + 112u) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t f32_to_bf16_bits(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((bits >> 16) | 0x40u);
    }
    const std::uint32_t rounding = 0x7fffu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

float bf16_bits_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::vector<float> decode_f32(std::span<const std::byte> bytes, DType dtype) {
    if (!is_float_dtype(dtype)) {
        fail(ErrorCode::UnsupportedDtype,
             "dtype " + std::string(dtype_name(dtype)) + " cannot be used for weight arithmetic");
    }
    const std::size_t width = dtype_size(dtype);
    if (bytes.size() % width != 0) {
        fail(ErrorCode::InvalidArgument, "buffer length is not a multiple of the element size");
    }
    std::vector<float> out(bytes.size() / width);
    if (dtype == DType::F32) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t raw;
        std::memcpy(&raw, bytes.data() + i * 2, 2);
        out[i] = dtype == DType::F16 ? f16_bits_to_f32(raw) : bf16_bits_to_f32(raw);
    }
    return out;
}

std::vector<std::byte> encode_f32(std::span<const float> values, DType dtype) {
    if (!is_float_dtype(dtype)) {
        fail(ErrorCode::UnsupportedDtype,
             "cannot encode weights as " + std::string(dtype_name(dtype)));
    }
    std::vector<std::byte> out(values.size() * dtype_size(dtype));
    if (dtype == DType::F32) {
        std::memcpy(out.data(), values.data(), out.size());
        return out;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t raw =
            dtype == DType::F16 ? f32_to_f16_bits(values[i]) : f32_to_bf16_bits(values[i]);
        std::memcpy(out.data() + i * 2, &raw, 2);
    }
    return out;
}

} // namespace wsmerge
