#include "iceformer/embed.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iceformer/kernels.hpp"

namespace iceformer {

EmbeddingContext::EmbeddingContext(double norm_bound, std::size_t dim, double epsilon_norm)
    : c_(norm_bound), dim_(dim), epsilon_norm_(epsilon_norm) {
  if (!(std::isfinite(norm_bound) && norm_bound > 0.0)) {
    throw ValidationError("norm bound must be finite and positive");
  }
  if (dim == 0) throw ValidationError("embedding dimension must be positive");
  if (!(epsilon_norm >= 0.0)) throw ValidationError("epsilon_norm must be non-negative");
}

template <typename T>
void embed_key_into(std::span<const T> key, const EmbeddingContext& ctx, std::span<T> out) {
  if (key.size() != ctx.dim() || out.size() != ctx.embedded_dim()) {
    throw ValidationError("key dimension " + std::to_string(key.size()) + " does not match context dimension " +
                          std::to_string(ctx.dim()));
  }
  const double c = ctx.norm_bound();
  const double norm = norm2(key);
  if (norm > c * (1.0 + kNormBoundSlack)) {
    throw NormBoundError("key norm " + std::to_string(norm) + " exceeds bound " + std::to_string(c));
  }
  const double inv_c = 1.0 / c;
  for (std::size_t i = 0; i < key.size(); ++i) out[i] = static_cast<T>(static_cast<double>(key[i]) * inv_c);
  const double ratio = norm * inv_c;
  out[key.size()] = static_cast<T>(std::sqrt(std::max(0.0, 1.0 - ratio * ratio)));
}

template <typename T>
bool embed_query_into(std::span<const T> query, const EmbeddingContext& ctx, std::span<T> out) {
  if (query.size() != ctx.dim() || out.size() != ctx.embedded_dim()) {
    throw ValidationError("query dimension " + std::to_string(query.size()) +
                          " does not match context dimension " + std::to_string(ctx.dim()));
  }
  const double norm = norm2(query);
  if (!(norm > ctx.epsilon_norm())) return false;
  const double inv = 1.0 / norm;
  for (std::size_t i = 0; i < query.size(); ++i) out[i] = static_cast<T>(static_cast<double>(query[i]) * inv);
  out[query.size()] = T(0);
  return true;
}

template <typename T>
EmbeddedPoint<T> embed_key(std::span<const T> key, PointId id, const EmbeddingContext& ctx) {
  EmbeddedPoint<T> p{std::vector<T>(ctx.embedded_dim()), id, PointKind::Key};
  embed_key_into(key, ctx, std::span<T>(p.coords));
  return p;
}

template <typename T>
std::optional<EmbeddedPoint<T>> embed_query(std::span<const T> query, PointId id, const EmbeddingContext& ctx) {
  EmbeddedPoint<T> p{std::vector<T>(ctx.embedded_dim()), id, PointKind::Query};
  if (!embed_query_into(query, ctx, std::span<T>(p.coords))) return std::nullopt;
  return p;
}

template <typename T>
double choose_c(const Matrix<T>& keys) {
  if (keys.rows() == 0) throw ValidationError("cannot choose a norm bound for an empty key set");
  double max_norm = 0.0;
  for (std::size_t j = 0; j < keys.rows(); ++j) max_norm = std::max(max_norm, norm2(keys.row(j)));
  return std::max(max_norm * (1.0 + kNormHeadroom), 1e-12);
}

template void embed_key_into(std::span<const float>, const EmbeddingContext&, std::span<float>);
template void embed_key_into(std::span<const double>, const EmbeddingContext&, std::span<double>);
template bool embed_query_into(std::span<const float>, const EmbeddingContext&, std::span<float>);
template bool embed_query_into(std::span<const double>, const EmbeddingContext&, std::span<double>);
template EmbeddedPoint<float> embed_key(std::span<const float>, PointId, const EmbeddingContext&);
template EmbeddedPoint<double> embed_key(std::span<const double>, PointId, const EmbeddingContext&);
template std::optional<EmbeddedPoint<float>> embed_query(std::span<const float>, PointId, const EmbeddingContext&);
template std::optional<EmbeddedPoint<double>> embed_query(std::span<const double>, PointId, const EmbeddingContext&);
template double choose_c(const Matrix<float>&);
template double choose_c(const Matrix<double>&);

}  // namespace iceformer
