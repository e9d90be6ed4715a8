// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/tensor.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

namespace ckptmerge {

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
    }
    return 0;
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

std::string_view dtype_torch_name(DType dtype) {
    switch (dtype) {
    case DType::F32: return "float32";
    case DType::F16: return "float16";
    case DType::BF16: return "bfloat16";
    }
    return "?";
}

std::optional<DType> parse_torch_dtype(std::string_view name) {
    if (name == "float32" || name == "fp32") return DType::F32;
    if (name == "float16" || name == "fp16") return DType::F16;
    if (name == "bfloat16" || name == "bf16") return DType::BF16;
    return std::nullopt;
}

float bf16_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f32_to_bf16(float value) {
    auto bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7fffffffu) > 0x7f800000u) {
        // quiet the NaN, keep sign
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    const std::uint32_t rounding = 0x7fffu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while ((mant & 0x400u) == 0);
            mant &= 0x3ffu;
            bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + (127 - 15)) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t f32_to_f16(float value) {
    const auto bits = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t abs = bits & 0x7fffffffu;

    if (abs > 0x7f800000u) return static_cast<std::uint16_t>(sign | 0x7e00u);
    if (abs >= 0x477ff000u) return static_cast<std::uint16_t>(sign | 0x7c00u); // rounds to inf

    const int exp = static_cast<int>(abs >> 23) - 127;
    if (exp < -25) return sign; // below half the smallest subnormal

    std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
    int shift;
    std::uint32_t base_exp;
    if (exp < -14) {
        shift = -exp - 1; // subnormal: value = mant * 2^(exp-23), unit 2^-24
        base_exp = 0;
    } else {
        shift = 13;
        base_exp = static_cast<std::uint32_t>(exp + 15);
        mant &= 0x7fffffu;
    }
    std::uint32_t truncated = mant >> shift;
    const std::uint32_t remainder = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (remainder > half || (remainder == half && (truncated & 1u))) ++truncated;
    // a carry out of the mantissa bumps the exponent, which is the right result
    return static_cast<std::uint16_t>(sign | ((base_exp << 10) + truncated));
}

void decode_to_f32(DType dtype, std::span<const std::byte> bytes, std::span<float> out) {
    if (bytes.size() != out.size() * dtype_size(dtype)) {
        throw std::invalid_argument("decode_to_f32: byte count does not match element count");
    }
    switch (dtype) {
    case DType::F32:
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return;
    case DType::BF16:
    case DType::F16:
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint16_t h;
            std::memcpy(&h, bytes.data() + 2 * i, 2);
            out[i] = dtype == DType::BF16 ? bf16_to_f32(h) : f16_to_f32(h);
        }
        return;
    }
}

void encode_from_f32(DType dtype, std::span<const float> values, std::span<std::byte> out) {
    if (out.size() != values.size() * dtype_size(dtype)) {
        throw std::invalid_argument("encode_from_f32: byte count does not match element count");
    }
    switch (dtype) {
    case DType::F32:
        std::memcpy(out.data(), values.data(), out.size());
        return;
    case DType::BF16:
    case DType::F16:
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::uint16_t h = dtype == DType::BF16 ? f32_to_bf16(values[i]) : f32_to_f16(values[i]);
            std::memcpy(out.data() + 2 * i, &h, 2);
        }
        return;
    }
}

std::uint64_t element_count(const Shape& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    return fmt::format("[{}]", fmt::join(shape, ","));
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (element_count(shape_) != values_.size()) {
        throw std::invalid_argument(fmt::format("tensor shape {} does not match {} values",
                                                shape_to_string(shape_), values_.size()));
    }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(element_count(shape_), 0.0f) {}

bool Tensor::bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (values_.empty() || std::memcmp(values_.data(), other.values_.data(), byte_size()) == 0);
}

} // namespace ckptmerge
