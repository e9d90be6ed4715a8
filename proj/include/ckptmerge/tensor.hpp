// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ckptmerge {

/// Storage dtypes understood by the checkpoint reader and writer.
enum class DType { F32, F16, BF16 };

std::size_t dtype_size(DType dtype);
/// safetensors spelling: "F32", "F16", "BF16".
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);
/// Recipe / model-config spelling: "float32", "float16", "bfloat16".
std::string_view dtype_torch_name(DType dtype);
std::optional<DType> parse_torch_dtype(std::string_view name);

float bf16_to_f32(std::uint16_t bits);
float f16_to_f32(std::uint16_t bits);
/// Round-to-nearest-even narrowing. NaN stays NaN.
std::uint16_t f32_to_bf16(float value);
std::uint16_t f32_to_f16(float value);

/// Widen raw little-endian storage bytes to F32 values.
void decode_to_f32(DType dtype, std::span<const std::byte> bytes, std::span<float> out);
/// Narrow F32 values to raw little-endian storage bytes.
void encode_from_f32(DType dtype, std::span<const float> values, std::span<std::byte> out);

using Shape = std::vector<std::uint64_t>;

std::uint64_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor. Computation always happens on F32 values; storage
/// dtypes only exist at the file boundary.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values);
    /// Zero-filled tensor of the given shape.
    explicit Tensor(Shape shape);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return values_.size(); }
    std::uint64_t byte_size() const noexcept { return values_.size() * sizeof(float); }

    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values() noexcept { return values_; }

    float operator[](std::size_t i) const { return values_[i]; }
    float& operator[](std::size_t i) { return values_[i]; }

    /// Bitwise comparison of shape and values (distinguishes -0.0 and NaN payloads).
    bool bit_equal(const Tensor& other) const;

private:
    Shape shape_;
    std::vector<float> values_;
};

} // namespace ckptmerge
