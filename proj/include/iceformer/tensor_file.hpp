#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iceformer/core.hpp"

namespace iceformer {

// ICEA tensor container, little-endian throughout:
//
//   "ICEA" | u32 version (1) | u32 dtype | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank] | payload
//
// The header dtype (0 = f32, 1 = f64) applies to every tensor except "mask", whose
// payload is always u8 (dtype code 2). A rank-2 mask holds explicit n x m bits; a
// rank-0 mask is a single flag byte where 1 selects the causal mask.

enum class DType : std::uint32_t { Float32 = 0, Float64 = 1, UInt8 = 2 };

inline constexpr std::uint32_t kTensorFileVersion = 1;

std::size_t dtype_size(DType dtype);

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == sizeof(float) ? DType::Float32 : DType::Float64;
}

/// Malformed container. Carries the byte offset and, when known, the tensor name.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset, std::string tensor = {});
  std::size_t offset() const { return offset_; }
  const std::string& tensor() const { return tensor_; }

 private:
  std::size_t offset_;
  std::string tensor_;
};

/// Filesystem failure while reading or writing.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<std::byte> payload;
};

struct TensorFile {
  DType dtype = DType::Float32;
  std::vector<Tensor> tensors;

  const Tensor* find(std::string_view name) const;
};

TensorFile parse_tensor_file(std::span<const std::byte> bytes);
std::vector<std::byte> serialize_tensor_file(const TensorFile& file);

TensorFile read_tensor_file(const std::filesystem::path& path);
void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);

/// Q, K, V and an optional mask, in that order.
template <typename T>
TensorFile problem_to_file(const AttentionProblem<T>& problem);

/// Converts to T when the file was written at the other precision. Throws
/// ValidationError for missing or misshapen tensors and invalid problems.
template <typename T>
AttentionProblem<T> problem_from_file(const TensorFile& file);

template <typename T>
void save_problem(const std::filesystem::path& path, const AttentionProblem<T>& problem);

template <typename T>
AttentionProblem<T> load_problem(const std::filesystem::path& path);

template <typename T>
TensorFile matrix_to_file(const std::string& name, const Matrix<T>& matrix);

template <typename T>
Matrix<T> matrix_from_file(const TensorFile& file, const std::string& name);

}  // namespace iceformer
