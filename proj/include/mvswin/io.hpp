#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvswin/tensor.hpp"

// MVST binary tensor files:
//   "MVST" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | ndim u8 |
//   ndim x u64 LE extents | row-major LE payload
namespace mvswin::io {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

inline constexpr std::uint8_t kFormatVersion = 1;

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

/// Serializes in the tensor's own precision.
template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t);

/// Parses an MVST buffer, converting the payload to T. Throws IoError on bad
/// magic, unsupported version or dtype, or a payload length mismatch.
template <typename T>
Tensor<T> decode(const std::vector<std::uint8_t>& bytes);

/// File dtype without decoding the payload.
DType peek_dtype(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode(t));
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  return decode<T>(read_file(path));
}

}  // namespace mvswin::io
