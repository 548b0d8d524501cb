#include "iceformer/sparse_attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <string>

#include "iceformer/kernels.hpp"

namespace iceformer {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

template <typename T>
struct KeySource {
  const T* keys;
  const T* values;
  std::size_t d;
  std::size_t dv;

  const T* key(PointId j) const { return keys + j * d; }
  const T* value(PointId j) const { return values + j * dv; }
};

// Scratch bytes that do not depend on how rows were scheduled: hit counters and
// union flags sized to the key count.
std::size_t fixed_scratch_bytes(std::size_t num_composite, std::size_t m) {
  return num_composite * m * sizeof(std::uint32_t) + m;
}

template <typename T>
bool ranks_before(const std::pair<T, PointId>& a, const std::pair<T, PointId>& b) {
  return a.first > b.first || (a.first == b.first && a.second < b.second);
}

// Rethrows the first exception raised inside an OpenMP region.
class ExceptionSlot {
 public:
  template <typename F>
  void run(F&& f) {
    try {
      f();
    } catch (...) {
#pragma omp critical(iceformer_exception_slot)
      if (!error_) error_ = std::current_exception();
    }
  }
  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::exception_ptr error_;
};

}  // namespace

template <typename T>
struct RowWorkspace {
  QueryScratch<T> dci;
  std::vector<T> embedded_query;
  std::vector<std::pair<T, PointId>> scored;
  std::vector<PointId> selected;
  std::vector<T> weights;
};

namespace {

// One row of top-k attention. `visible(j)` filters ids below `key_limit`;
// `visible_count` is how many pass. Rows with at most `exact_limit` visible keys skip retrieval.
template <typename T, typename Visible>
void attend_row(std::span<const T> q, const KeySource<T>& src, std::size_t key_limit, Visible&& visible,
                std::size_t visible_count, T scale, const EmbeddingContext& ctx, const DciIndex<T>& index,
                const QuerySpec& spec, std::size_t exact_limit, std::size_t fallback, RowWorkspace<T>& ws, std::span<T> out,
                std::vector<PointId>& selected, std::vector<T>& weights, SparseStats& stats) {
  auto& scored = ws.scored;
  scored.clear();
  auto score = [&](PointId j) { return dot(q.data(), src.key(j), src.d); };
  auto by_rank = [](const auto& a, const auto& b) { return ranks_before<T>(a, b); };

  std::size_t take = 0;
  if (visible_count <= exact_limit) {
    for (PointId j = 0; j < key_limit; ++j) {
      if (visible(j)) scored.emplace_back(score(j), j);
    }
    std::sort(scored.begin(), scored.end(), by_rank);
    take = scored.size();
    ++stats.exact_rows;
  } else if (!embed_query_into(q, ctx, std::span<T>(ws.embedded_query))) {
    for (PointId j = 0; j < key_limit && scored.size() < fallback; ++j) {
      if (visible(j)) scored.emplace_back(score(j), j);
    }
    take = scored.size();
    ++stats.fallback_rows;
  } else {
    QueryStats qs;
    const auto pool = index.candidates(ws.embedded_query, spec, ws.dci, &qs);
    stats.visited += qs.visited;
    stats.pooled += qs.candidates;
    stats.workspace_bytes += pool.size() * sizeof(PointId);
    for (PointId j : pool) {
      if (visible(j)) scored.emplace_back(score(j), j);
    }
    if (scored.empty()) {
      for (PointId j = 0; j < key_limit; ++j) {
        if (visible(j)) scored.emplace_back(score(j), j);
      }
      ++stats.rescued_rows;
    }
    take = std::min(spec.k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), by_rank);
  }

  selected.resize(take);
  weights.resize(take);
  T max_logit = -std::numeric_limits<T>::infinity();
  for (std::size_t r = 0; r < take; ++r) {
    selected[r] = scored[r].second;
    weights[r] = scale * scored[r].first;
    max_logit = std::max(max_logit, weights[r]);
  }
  double sum = 0.0;
  for (auto& w : weights) {
    w = std::exp(w - max_logit);
    sum += w;
  }
  const T inv = static_cast<T>(1.0 / sum);
  std::fill(out.begin(), out.end(), T(0));
  for (std::size_t r = 0; r < take; ++r) {
    weights[r] *= inv;
    axpy(weights[r], src.value(selected[r]), out.data(), src.dv);
  }
  stats.workspace_bytes += take * (sizeof(PointId) + sizeof(T));
}

}  // namespace

SparseStats& SparseStats::operator+=(const SparseStats& o) {
  visited += o.visited;
  pooled += o.pooled;
  exact_rows += o.exact_rows;
  fallback_rows += o.fallback_rows;
  rescued_rows += o.rescued_rows;
  rebuilds += o.rebuilds;
  workspace_bytes += o.workspace_bytes;
  construct_ms += o.construct_ms;
  return *this;
}

void AdaptiveK::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("adaptive alpha must lie in (0, 1)");
  if (floor > cap) throw ValidationError("adaptive floor must not exceed cap");
}

std::size_t resolve_k(const AdaptiveK& adaptive, std::size_t n) {
  adaptive.validate();
  const auto scaled = static_cast<std::size_t>(std::floor(static_cast<double>(n) * adaptive.alpha));
  return std::max(std::min(scaled, adaptive.cap), adaptive.floor);
}

void SparseAttentionConfig::validate() const {
  spec.validate();
  if (num_simple == 0 || num_composite == 0) throw ValidationError("num_simple and num_composite must be >= 1");
  if (adaptive) adaptive->validate();
  if (threads < 1) throw ValidationError("threads must be >= 1");
  if (fallback_uniform_topk && *fallback_uniform_topk == 0) throw ValidationError("fallback count must be >= 1");
  if (norm_bound && !(std::isfinite(*norm_bound) && *norm_bound > 0.0)) {
    throw ValidationError("norm bound must be finite and positive");
  }
}

QuerySpec SparseAttentionConfig::resolved_spec(std::size_t n) const {
  QuerySpec s = spec;
  if (adaptive) {
    s.k = resolve_k(*adaptive, std::max<std::size_t>(n, 1));
    s.k0 = std::max(s.k0, s.k);
    s.k1 = std::max(s.k1, s.k0);
  }
  return s;
}

template <typename T>
SparseResult<T> sparse_attention(const AttentionProblem<T>& problem, const SparseAttentionConfig& config) {
  problem.validate();
  config.validate();
  if (problem.mask.kind() == MaskKind::Causal) return causal_attention(problem, config);
  if (problem.m() == 0) throw ValidationError("sparse attention needs at least one key");

  const std::size_t n = problem.n();
  const std::size_t m = problem.m();
  const std::size_t d = problem.d();
  const QuerySpec spec = config.resolved_spec(n);
  const std::size_t fallback = config.fallback_uniform_topk.value_or(spec.k);
  const std::size_t exact_limit = config.exact_short_rows ? spec.k : 0;
  const T scale = problem.effective_scale();
  const int threads = std::max(config.threads, 1);

  SparseResult<T> result;
  result.output = Matrix<T>(n, problem.dv());
  result.selected.resize(n);
  result.weights.resize(n);

  const auto start = Clock::now();
  const EmbeddingContext ctx(config.norm_bound.value_or(choose_c(problem.keys)), d);
  std::vector<std::uint8_t> indexed(m, 1);
  if (problem.mask.kind() == MaskKind::Explicit) {
    std::fill(indexed.begin(), indexed.end(), 0);
    const auto bits = problem.mask.bits();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) indexed[j] |= bits[i * m + j];
    }
  }
  std::vector<EmbeddedPoint<T>> points;
  points.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    if (indexed[j]) points.push_back(embed_key(problem.keys.row(j), j, ctx));
  }
  const auto index = DciIndex<T>::construct(points, d + 1, config.num_simple, config.num_composite, config.seed,
                                            threads);
  points.clear();
  points.shrink_to_fit();
  result.stats.construct_ms = elapsed_ms(start);

  const KeySource<T> src{problem.keys.data().data(), problem.values.data().data(), d, problem.dv()};
  const bool unmasked = problem.mask.kind() == MaskKind::None;
  ExceptionSlot errors;

#pragma omp parallel num_threads(threads)
  {
    RowWorkspace<T> ws;
    ws.embedded_query.resize(d + 1);
    SparseStats local;
#pragma omp for schedule(dynamic, 16)
    for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
      errors.run([&] {
        const auto i = static_cast<std::size_t>(si);
        auto visible = [&](PointId j) { return unmasked || problem.mask.visible(i, j); };
        attend_row<T>(problem.queries.row(i), src, m, visible, problem.mask.visible_count(i, m), scale, ctx, index,
                      spec, exact_limit, fallback, ws, result.output.row(i), result.selected[i], result.weights[i], local);
      });
    }
#pragma omp critical(iceformer_sparse_stats)
    {
      const double construct_ms = result.stats.construct_ms;
      result.stats += local;
      result.stats.construct_ms = construct_ms;
    }
  }
  errors.rethrow();
  result.stats.workspace_bytes += static_cast<std::size_t>(threads) * fixed_scratch_bytes(config.num_composite, m);
  return result;
}

// ---- CausalStream ------------------------------------------------------------

template <typename T>
CausalStream<T>::CausalStream(std::size_t d, std::size_t dv, T scale, const SparseAttentionConfig& config,
                              std::size_t expected_tokens, std::optional<double> norm_bound)
    : d_(d),
      dv_(dv),
      scale_(scale),
      config_(config),
      spec_(config.resolved_spec(expected_tokens)),
      fallback_(config.fallback_uniform_topk.value_or(spec_.k)),
      index_(d + 1, config.num_simple, config.num_composite, config.seed),
      embedded_(d + 1),
      ws_(std::make_unique<RowWorkspace<T>>()) {
  config.validate();
  if (dv == 0) throw ValidationError("value dimension must be positive");
  if (norm_bound) ctx_.emplace(*norm_bound, d);
  ws_->embedded_query.resize(d + 1);
}

template <typename T>
CausalStream<T>::~CausalStream() = default;
template <typename T>
CausalStream<T>::CausalStream(CausalStream&&) noexcept = default;
template <typename T>
CausalStream<T>& CausalStream<T>::operator=(CausalStream&&) noexcept = default;

template <typename T>
double CausalStream<T>::norm_bound() const {
  return ctx_ ? ctx_->norm_bound() : 0.0;
}

template <typename T>
std::size_t CausalStream<T>::workspace_bytes() const {
  return stats_.workspace_bytes + fixed_scratch_bytes(config_.num_composite, count_);
}

template <typename T>
void CausalStream<T>::rebuild(double norm_bound) {
  ctx_.emplace(norm_bound, d_);
  std::vector<EmbeddedPoint<T>> points;
  points.reserve(count_);
  for (std::size_t j = 0; j < count_; ++j) {
    points.push_back(embed_key(std::span<const T>(keys_.data() + j * d_, d_), j, *ctx_));
  }
  index_ = DciIndex<T>::construct(points, d_ + 1, config_.num_simple, config_.num_composite, config_.seed);
  ++stats_.rebuilds;
}

template <typename T>
void CausalStream<T>::step(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                           std::vector<PointId>* selected, std::vector<T>* weights) {
  if (q.size() != d_ || k.size() != d_ || v.size() != dv_ || out.size() != dv_) {
    throw ValidationError("causal step dimensions do not match the stream");
  }
  const auto start = Clock::now();
  const double key_norm = norm2(k);
  if (!ctx_) {
    ctx_.emplace(std::max(key_norm * (1.0 + kNormHeadroom), 1e-12), d_);
  } else if (key_norm > ctx_->norm_bound() * (1.0 + kNormBoundSlack)) {
    rebuild(std::max(2.0 * ctx_->norm_bound(), key_norm * (1.0 + kNormHeadroom)));
  }
  keys_.insert(keys_.end(), k.begin(), k.end());
  values_.insert(values_.end(), v.begin(), v.end());
  embed_key_into(k, *ctx_, std::span<T>(embedded_));
  index_.insert(count_, embedded_);
  ++count_;
  stats_.construct_ms += elapsed_ms(start);

  auto& sel = selected ? *selected : ws_->selected;
  auto& w = weights ? *weights : ws_->weights;
  const KeySource<T> src{keys_.data(), values_.data(), d_, dv_};
  attend_row<T>(q, src, count_, [](PointId) { return true; }, count_, scale_, *ctx_, index_, spec_,
                config_.exact_short_rows ? spec_.k : 0, fallback_, *ws_,
                out, sel, w, stats_);
}

template <typename T>
SparseResult<T> causal_attention(const AttentionProblem<T>& problem, const SparseAttentionConfig& config) {
  problem.validate();
  config.validate();
  if (problem.mask.kind() != MaskKind::Causal) throw ValidationError("causal_attention requires a causal mask");
  const std::size_t n = problem.n();
  SparseResult<T> result;
  result.output = Matrix<T>(n, problem.dv());
  result.selected.resize(n);
  result.weights.resize(n);
  if (n == 0) return result;

  CausalStream<T> stream(problem.d(), problem.dv(), problem.effective_scale(), config, n,
                         config.norm_bound.value_or(choose_c(problem.keys)));
  for (std::size_t i = 0; i < n; ++i) {
    stream.step(problem.queries.row(i), problem.keys.row(i), problem.values.row(i), result.output.row(i),
                &result.selected[i], &result.weights[i]);
  }
  result.stats = stream.stats();
  result.stats.workspace_bytes = stream.workspace_bytes();
  return result;
}

template <typename T>
std::vector<SparseResult<T>> sparse_attention_heads(std::span<const AttentionProblem<T>> heads,
                                                    const SparseAttentionConfig& config) {
  std::vector<SparseResult<T>> results(heads.size());
  const bool all_causal = std::all_of(heads.begin(), heads.end(),
                                      [](const auto& h) { return h.mask.kind() == MaskKind::Causal; });
  if (!all_causal) {
    for (std::size_t h = 0; h < heads.size(); ++h) results[h] = sparse_attention(heads[h], config);
    return results;
  }
  SparseAttentionConfig per_head = config;
  per_head.threads = 1;
  ExceptionSlot errors;
#pragma omp parallel for num_threads(std::max(config.threads, 1)) schedule(dynamic, 1)
  for (std::ptrdiff_t h = 0; h < static_cast<std::ptrdiff_t>(heads.size()); ++h) {
    errors.run([&] {
      const auto hh = static_cast<std::size_t>(h);
      results[hh] = causal_attention(heads[hh], per_head);
    });
  }
  errors.rethrow();
  return results;
}

template <typename T>
ErrorSummary approximation_error(const Matrix<T>& oracle, const Matrix<T>& approx) {
  if (oracle.rows() != approx.rows() || oracle.cols() != approx.cols()) {
    throw ValidationError("approximation_error needs matrices of equal shape");
  }
  ErrorSummary summary;
  summary.per_row.resize(oracle.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < oracle.rows(); ++i) {
    double sq = 0.0;
    const auto a = oracle.row(i);
    const auto b = approx.row(i);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
      sq += diff * diff;
    }
    summary.per_row[i] = std::sqrt(sq);
    total += summary.per_row[i];
  }
  summary.mean = oracle.rows() ? total / static_cast<double>(oracle.rows()) : 0.0;
  return summary;
}

template struct RowWorkspace<float>;
template struct RowWorkspace<double>;
template class CausalStream<float>;
template class CausalStream<double>;
template SparseResult<float> sparse_attention(const AttentionProblem<float>&, const SparseAttentionConfig&);
template SparseResult<double> sparse_attention(const AttentionProblem<double>&, const SparseAttentionConfig&);
template SparseResult<float> causal_attention(const AttentionProblem<float>&, const SparseAttentionConfig&);
template SparseResult<double> causal_attention(const AttentionProblem<double>&, const SparseAttentionConfig&);
template std::vector<SparseResult<float>> sparse_attention_heads(std::span<const AttentionProblem<float>>,
                                                                 const SparseAttentionConfig&);
template std::vector<SparseResult<double>> sparse_attention_heads(std::span<const AttentionProblem<double>>,
                                                                  const SparseAttentionConfig&);
template ErrorSummary approximation_error(const Matrix<float>&, const Matrix<float>&);
template ErrorSummary approximation_error(const Matrix<double>&, const Matrix<double>&);

}  // namespace iceformer
