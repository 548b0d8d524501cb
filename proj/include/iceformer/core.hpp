#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace iceformer {

using PointId = std::uint64_t;

/// Raised when an input violates a shape, mask or value contract.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-sum tolerance for softmax outputs at a given storage precision.
template <typename T>
constexpr double precision_tolerance() {
  return sizeof(T) == sizeof(float) ? 1e-6 : 1e-12;
}

/// Dense row-major matrix. Owns its storage.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  /// Wraps external data. Rejects a length mismatch or any non-finite entry.
  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<T> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }

  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }

  /// Copy of rows [begin, end).
  Matrix slice_rows(std::size_t begin, std::size_t end) const;

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

enum class MaskKind : std::uint8_t { None, Causal, Explicit };

/// Visibility pattern s_{i,j}. Explicit masks carry a dense n x m bit grid.
class Mask {
 public:
  Mask() = default;

  static Mask none() { return Mask{}; }
  static Mask causal();
  static Mask explicit_bits(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits);

  MaskKind kind() const { return kind_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::span<const std::uint8_t> bits() const { return bits_; }

  bool visible(std::size_t i, std::size_t j) const {
    switch (kind_) {
      case MaskKind::None: return true;
      case MaskKind::Causal: return j <= i;
      case MaskKind::Explicit: return bits_[i * cols_ + j] != 0;
    }
    return false;
  }

  /// Number of keys row i may attend to, out of m.
  std::size_t visible_count(std::size_t i, std::size_t m) const;

  /// True when key j is masked out for every row.
  bool column_excluded(std::size_t j) const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  MaskKind kind_ = MaskKind::None;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Single-head attention input: queries (n x d), keys (m x d), values (m x d').
template <typename T>
struct AttentionProblem {
  Matrix<T> queries;
  Matrix<T> keys;
  Matrix<T> values;
  Mask mask;
  std::optional<double> scale;  // unset means 1/sqrt(d)

  std::size_t n() const { return queries.rows(); }
  std::size_t m() const { return keys.rows(); }
  std::size_t d() const { return queries.cols(); }
  std::size_t dv() const { return values.cols(); }

  T effective_scale() const {
    return static_cast<T>(scale ? *scale : 1.0 / std::sqrt(static_cast<double>(d())));
  }

  /// Throws ValidationError on any shape, mask or scale violation, including fully masked rows.
  void validate() const;
};

/// Row i of the attention weight matrix. Masked entries are exactly zero.
template <typename T>
std::vector<T> attention_row_weights(const AttentionProblem<T>& problem, std::size_t i);

/// Exact O = A V. Works one row at a time; never holds more than one row of A per thread.
template <typename T>
Matrix<T> vanilla_attention(const AttentionProblem<T>& problem, int threads = 1);

/// The min(k, #visible) visible keys with the largest q_i . k_j, ties to the smaller id.
template <typename T>
std::vector<std::size_t> brute_force_topk(const AttentionProblem<T>& problem, std::size_t i, std::size_t k);

}  // namespace iceformer
