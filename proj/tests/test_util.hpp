#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "iceformer/core.hpp"
#include "iceformer/embed.hpp"

namespace iceformer::testing {

using Rng = std::mt19937_64;

template <typename T>
Matrix<T> gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix<T> out(rows, cols);
  for (auto& x : out.data()) x = static_cast<T>(dist(rng));
  return out;
}

inline std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Explicit mask with random bits; every row keeps at least one visible key.
inline Mask random_explicit_mask(Rng& rng, std::size_t n, std::size_t m, double keep = 0.7) {
  std::bernoulli_distribution coin(keep);
  std::vector<std::uint8_t> bits(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      bits[i * m + j] = coin(rng) ? 1 : 0;
      any = any || bits[i * m + j];
    }
    if (!any) bits[i * m + uniform_size(rng, 0, m - 1)] = 1;
  }
  return Mask::explicit_bits(n, m, std::move(bits));
}

template <typename T>
AttentionProblem<T> random_problem(Rng& rng, std::size_t n, std::size_t m, std::size_t d, std::size_t dv,
                                   MaskKind kind = MaskKind::None) {
  AttentionProblem<T> p;
  p.queries = gaussian_matrix<T>(rng, n, d);
  p.keys = gaussian_matrix<T>(rng, m, d);
  p.values = gaussian_matrix<T>(rng, m, dv);
  if (kind == MaskKind::Causal) p.mask = Mask::causal();
  if (kind == MaskKind::Explicit) p.mask = random_explicit_mask(rng, n, m);
  return p;
}

/// Masked softmax attention evaluated independently in long double, one row at a time.
template <typename T>
std::vector<long double> reference_row_weights(const AttentionProblem<T>& p, std::size_t i) {
  const long double scale = p.scale ? static_cast<long double>(*p.scale) : 1.0L / std::sqrt((long double)p.d());
  std::vector<long double> logits(p.m(), 0.0L);
  long double best = -INFINITY;
  for (std::size_t j = 0; j < p.m(); ++j) {
    if (!p.mask.visible(i, j)) continue;
    long double s = 0.0L;
    for (std::size_t t = 0; t < p.d(); ++t) s += (long double)p.queries(i, t) * (long double)p.keys(j, t);
    logits[j] = s * scale;
    best = std::max(best, logits[j]);
  }
  std::vector<long double> w(p.m(), 0.0L);
  long double total = 0.0L;
  for (std::size_t j = 0; j < p.m(); ++j) {
    if (!p.mask.visible(i, j)) continue;
    w[j] = std::exp(logits[j] - best);
    total += w[j];
  }
  for (auto& x : w) x /= total;
  return w;
}

template <typename T>
std::vector<long double> reference_output_row(const AttentionProblem<T>& p, std::size_t i) {
  const auto w = reference_row_weights(p, i);
  std::vector<long double> o(p.dv(), 0.0L);
  for (std::size_t j = 0; j < p.m(); ++j) {
    if (w[j] == 0.0L) continue;
    for (std::size_t t = 0; t < p.dv(); ++t) o[t] += w[j] * (long double)p.values(j, t);
  }
  return o;
}

template <typename A, typename U>
double row_l2(const A& a, const std::vector<U>& b) {
  long double s = 0.0L;
  for (std::size_t t = 0; t < a.size(); ++t) {
    const long double diff = (long double)a[t] - (long double)b[t];
    s += diff * diff;
  }
  return static_cast<double>(std::sqrt(s));
}

template <typename T>
double max_row_l2(const Matrix<T>& a, const Matrix<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    long double s = 0.0L;
    for (std::size_t t = 0; t < a.cols(); ++t) {
      const long double diff = (long double)a(i, t) - (long double)b(i, t);
      s += diff * diff;
    }
    worst = std::max(worst, static_cast<double>(std::sqrt(s)));
  }
  return worst;
}

/// Embedded keys for every row of `keys`, ids = row index.
template <typename T>
std::vector<EmbeddedPoint<T>> embed_all(const Matrix<T>& keys, const EmbeddingContext& ctx) {
  std::vector<EmbeddedPoint<T>> out;
  out.reserve(keys.rows());
  for (std::size_t j = 0; j < keys.rows(); ++j) out.push_back(embed_key(keys.row(j), j, ctx));
  return out;
}

/// Unit vectors in R^dim, ids 0..count-1.
template <typename T>
std::vector<EmbeddedPoint<T>> random_unit_points(Rng& rng, std::size_t count, std::size_t dim) {
  std::normal_distribution<double> dist;
  std::vector<EmbeddedPoint<T>> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    double n2 = 0.0;
    for (auto& x : v) {
      x = dist(rng);
      n2 += x * x;
    }
    out[i].coords.resize(dim);
    for (std::size_t t = 0; t < dim; ++t) out[i].coords[t] = static_cast<T>(v[t] / std::sqrt(n2));
    out[i].source_id = i;
  }
  return out;
}

}  // namespace iceformer::testing
