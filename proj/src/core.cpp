#include "iceformer/core.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "iceformer/kernels.hpp"

namespace iceformer {

template <typename T>
Matrix<T> Matrix<T>::from_data(std::size_t rows, std::size_t cols, std::vector<T> data) {
  if (data.size() != rows * cols) {
    throw ValidationError("matrix data length " + std::to_string(data.size()) + " does not match " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw ValidationError("non-finite matrix entry at flat index " + std::to_string(i));
    }
  }
  Matrix out;
  out.rows_ = rows;
  out.cols_ = cols;
  out.data_ = std::move(data);
  return out;
}

template <typename T>
Matrix<T> Matrix<T>::slice_rows(std::size_t begin, std::size_t end) const {
  Matrix out(end - begin, cols_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
            data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
  return out;
}

Mask Mask::causal() {
  Mask m;
  m.kind_ = MaskKind::Causal;
  return m;
}

Mask Mask::explicit_bits(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits) {
  if (bits.size() != rows * cols) {
    throw ValidationError("explicit mask has " + std::to_string(bits.size()) + " bits, expected " +
                          std::to_string(rows * cols));
  }
  Mask m;
  m.kind_ = MaskKind::Explicit;
  m.rows_ = rows;
  m.cols_ = cols;
  m.bits_ = std::move(bits);
  for (auto& b : m.bits_) b = b ? 1 : 0;
  return m;
}

std::size_t Mask::visible_count(std::size_t i, std::size_t m) const {
  switch (kind_) {
    case MaskKind::None: return m;
    case MaskKind::Causal: return std::min(i + 1, m);
    case MaskKind::Explicit: {
      auto row = bits_.begin() + static_cast<std::ptrdiff_t>(i * cols_);
      return static_cast<std::size_t>(std::count(row, row + static_cast<std::ptrdiff_t>(cols_), 1));
    }
  }
  return 0;
}

bool Mask::column_excluded(std::size_t j) const {
  if (kind_ != MaskKind::Explicit) return false;
  for (std::size_t i = 0; i < rows_; ++i) {
    if (bits_[i * cols_ + j]) return false;
  }
  return true;
}

template <typename T>
void AttentionProblem<T>::validate() const {
  if (queries.cols() != keys.cols()) {
    throw ValidationError("queries have dimension " + std::to_string(queries.cols()) + " but keys have " +
                          std::to_string(keys.cols()));
  }
  if (keys.rows() != values.rows()) {
    throw ValidationError(std::to_string(keys.rows()) + " keys but " + std::to_string(values.rows()) + " values");
  }
  if (d() == 0) throw ValidationError("zero key dimension");
  if (scale && !(std::isfinite(*scale) && *scale > 0.0)) throw ValidationError("scale must be finite and positive");
  switch (mask.kind()) {
    case MaskKind::None:
      if (n() > 0 && m() == 0) throw ValidationError("queries present but no keys to attend to");
      break;
    case MaskKind::Causal:
      if (n() != m()) throw ValidationError("causal mask requires n == m");
      break;
    case MaskKind::Explicit:
      if (mask.rows() != n() || mask.cols() != m()) {
        throw ValidationError("explicit mask shape " + std::to_string(mask.rows()) + "x" +
                              std::to_string(mask.cols()) + " does not match problem " + std::to_string(n()) + "x" +
                              std::to_string(m()));
      }
      for (std::size_t i = 0; i < n(); ++i) {
        if (mask.visible_count(i, m()) == 0) throw ValidationError("row " + std::to_string(i) + " is fully masked");
      }
      break;
  }
}

namespace {

// Fills weights[j] with the normalized masked softmax of row i. `weights` has length m.
template <typename T>
void fill_row_weights(const AttentionProblem<T>& problem, std::size_t i, std::span<T> weights) {
  const std::size_t m = problem.m();
  const std::size_t d = problem.d();
  const T scale = problem.effective_scale();
  const T* q = problem.queries.row(i).data();
  const bool dense = problem.mask.kind() == MaskKind::None;
  const std::size_t limit = problem.mask.kind() == MaskKind::Causal ? std::min(i + 1, m) : m;

  T max_logit = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < limit; ++j) {
    if (!dense && !problem.mask.visible(i, j)) continue;
    T logit = scale * dot(q, problem.keys.row(j).data(), d);
    weights[j] = logit;
    max_logit = std::max(max_logit, logit);
  }
  if (max_logit == -std::numeric_limits<T>::infinity()) {
    throw ValidationError("row " + std::to_string(i) + " is fully masked");
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (j >= limit || (!dense && !problem.mask.visible(i, j))) {
      weights[j] = 0;
      continue;
    }
    weights[j] = std::exp(weights[j] - max_logit);
    sum += weights[j];
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (std::size_t j = 0; j < limit; ++j) weights[j] *= inv;
}

}  // namespace

template <typename T>
std::vector<T> attention_row_weights(const AttentionProblem<T>& problem, std::size_t i) {
  if (i >= problem.n()) throw std::out_of_range("row index out of range");
  std::vector<T> weights(problem.m());
  fill_row_weights(problem, i, std::span<T>(weights));
  return weights;
}

template <typename T>
Matrix<T> vanilla_attention(const AttentionProblem<T>& problem, int threads) {
  problem.validate();
  const std::size_t n = problem.n();
  const std::size_t m = problem.m();
  const std::size_t dv = problem.dv();
  Matrix<T> out(n, dv);

#pragma omp parallel num_threads(std::max(threads, 1))
  {
    std::vector<T> weights(m);
#pragma omp for schedule(dynamic, 16)
    for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
      const auto i = static_cast<std::size_t>(si);
      fill_row_weights(problem, i, std::span<T>(weights));
      const std::size_t limit = problem.mask.kind() == MaskKind::Causal ? std::min(i + 1, m) : m;
      T* o = out.row(i).data();
      for (std::size_t j = 0; j < limit; ++j) {
        if (weights[j] != T(0)) axpy(weights[j], problem.values.row(j).data(), o, dv);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::size_t> brute_force_topk(const AttentionProblem<T>& problem, std::size_t i, std::size_t k) {
  if (i >= problem.n()) throw std::out_of_range("row index out of range");
  const std::size_t m = problem.m();
  const T* q = problem.queries.row(i).data();
  std::vector<std::pair<T, std::size_t>> scored;
  scored.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    if (!problem.mask.visible(i, j)) continue;
    scored.emplace_back(dot(q, problem.keys.row(j).data(), problem.d()), j);
  }
  const std::size_t take = std::min(k, scored.size());
  auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  std::vector<std::size_t> ids(take);
  for (std::size_t r = 0; r < take; ++r) ids[r] = scored[r].second;
  return ids;
}

template class Matrix<float>;
template class Matrix<double>;
template struct AttentionProblem<float>;
template struct AttentionProblem<double>;
template std::vector<float> attention_row_weights(const AttentionProblem<float>&, std::size_t);
template std::vector<double> attention_row_weights(const AttentionProblem<double>&, std::size_t);
template Matrix<float> vanilla_attention(const AttentionProblem<float>&, int);
template Matrix<double> vanilla_attention(const AttentionProblem<double>&, int);
template std::vector<std::size_t> brute_force_topk(const AttentionProblem<float>&, std::size_t, std::size_t);
template std::vector<std::size_t> brute_force_topk(const AttentionProblem<double>&, std::size_t, std::size_t);

}  // namespace iceformer
