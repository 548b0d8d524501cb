#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include "iceformer/core.hpp"

namespace iceformer {

// Keys and queries are lifted from R^d onto the unit sphere in R^{d+1}:
//
//   key   k -> [k / c, sqrt(1 - |k|^2 / c^2)]
//   query q -> [q / |q|, 0]
//
// With c at least the largest key norm, |T_Q(q) - T_K(k)|^2 = 2 - 2 q.k / (c |q|),
// so Euclidean nearest neighbours of an embedded query are exactly the keys with
// the largest inner product, in the same order.

/// A key was larger than the norm bound of its context.
class NormBoundError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class PointKind : std::uint8_t { Key, Query };

template <typename T>
struct EmbeddedPoint {
  std::vector<T> coords;  // d + 1 entries, unit norm
  PointId source_id = 0;
  PointKind kind = PointKind::Key;
};

/// Norm bound c plus the source dimension. Immutable once built.
class EmbeddingContext {
 public:
  EmbeddingContext(double norm_bound, std::size_t dim, double epsilon_norm = 1e-12);

  double norm_bound() const { return c_; }
  std::size_t dim() const { return dim_; }
  std::size_t embedded_dim() const { return dim_ + 1; }
  double epsilon_norm() const { return epsilon_norm_; }

 private:
  double c_;
  std::size_t dim_;
  double epsilon_norm_;
};

/// Relative slack allowed when a key norm sits right at the bound.
inline constexpr double kNormBoundSlack = 1e-9;
/// Headroom choose_c adds above the observed maximum norm.
inline constexpr double kNormHeadroom = 1e-6;

/// Writes T_K(k) into `out` (length d + 1). Throws NormBoundError if |k| > c.
template <typename T>
void embed_key_into(std::span<const T> key, const EmbeddingContext& ctx, std::span<T> out);

/// Writes T_Q(q) into `out`. Returns false, leaving `out` untouched, for a degenerate query.
template <typename T>
bool embed_query_into(std::span<const T> query, const EmbeddingContext& ctx, std::span<T> out);

template <typename T>
EmbeddedPoint<T> embed_key(std::span<const T> key, PointId id, const EmbeddingContext& ctx);

/// nullopt when |q| <= epsilon_norm; the caller picks a fallback.
template <typename T>
std::optional<EmbeddedPoint<T>> embed_query(std::span<const T> query, PointId id, const EmbeddingContext& ctx);

// Overloads for rows of non-const matrices.
template <typename T>
void embed_key_into(std::span<T> key, const EmbeddingContext& ctx, std::span<T> out)
  requires(!std::is_const_v<T>)
{
  embed_key_into(std::span<const T>(key), ctx, out);
}

template <typename T>
bool embed_query_into(std::span<T> query, const EmbeddingContext& ctx, std::span<T> out)
  requires(!std::is_const_v<T>)
{
  return embed_query_into(std::span<const T>(query), ctx, out);
}

template <typename T>
EmbeddedPoint<T> embed_key(std::span<T> key, PointId id, const EmbeddingContext& ctx)
  requires(!std::is_const_v<T>)
{
  return embed_key(std::span<const T>(key), id, ctx);
}

template <typename T>
std::optional<EmbeddedPoint<T>> embed_query(std::span<T> query, PointId id, const EmbeddingContext& ctx)
  requires(!std::is_const_v<T>)
{
  return embed_query(std::span<const T>(query), id, ctx);
}

/// max_j |k_j| * (1 + 1e-6), floored at 1e-12.
template <typename T>
double choose_c(const Matrix<T>& keys);

}  // namespace iceformer
