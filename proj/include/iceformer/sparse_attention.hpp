#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "iceformer/core.hpp"
#include "iceformer/dci.hpp"
#include "iceformer/embed.hpp"

namespace iceformer {

/// k = max(min(floor(n * alpha), cap), floor), with n the number of input tokens.
struct AdaptiveK {
  double alpha = 5e-3;
  std::size_t floor = 30;
  std::size_t cap = 50;

  void validate() const;
};

std::size_t resolve_k(const AdaptiveK& adaptive, std::size_t n);

struct SparseAttentionConfig {
  QuerySpec spec{10, 100, 1000};
  std::size_t num_simple = 10;
  std::size_t num_composite = 2;
  std::uint64_t seed = 0;
  std::optional<AdaptiveK> adaptive;
  /// Keys used for a zero-norm query; unset means k.
  std::optional<std::size_t> fallback_uniform_topk;
  /// Overrides the norm bound that would otherwise be derived from the keys.
  std::optional<double> norm_bound;
  int threads = 1;
  /// Rows with at most k visible keys attend to all of them without querying the index.
  bool exact_short_rows = true;

  void validate() const;

  /// The query budget for an n-token input. With adaptive k, k0 and k1 are raised
  /// as needed to keep k <= k0 <= k1.
  QuerySpec resolved_spec(std::size_t n) const;
};

struct SparseStats {
  std::size_t visited = 0;        // DCI queue pops, summed over rows
  std::size_t pooled = 0;         // candidate-union sizes, summed over rows
  std::size_t exact_rows = 0;     // rows with at most k visible keys, attended exactly
  std::size_t fallback_rows = 0;  // degenerate queries
  std::size_t rescued_rows = 0;   // rows whose candidates were all masked out
  std::size_t rebuilds = 0;       // streaming norm-bound rebuilds
  /// Allocation proxy: bytes of per-row selection buffers plus query scratch.
  std::size_t workspace_bytes = 0;
  double construct_ms = 0.0;

  SparseStats& operator+=(const SparseStats& o);
};

template <typename T>
struct SparseResult {
  Matrix<T> output;
  std::vector<std::vector<PointId>> selected;  // per row, descending inner product
  std::vector<std::vector<T>> weights;         // aligned with selected, each sums to 1
  SparseStats stats;
};

/// Top-k attention over keys retrieved from a DCI index. Keys masked for every row
/// are never indexed; other explicit-mask exclusions are filtered per row. A causal
/// mask is delegated to causal_attention.
template <typename T>
SparseResult<T> sparse_attention(const AttentionProblem<T>& problem, const SparseAttentionConfig& config);

/// Streams rows in order: key i is inserted, then query i is answered against keys 0..i.
template <typename T>
SparseResult<T> causal_attention(const AttentionProblem<T>& problem, const SparseAttentionConfig& config);

/// Runs each head independently with its own index. Causal heads run concurrently
/// across config.threads; batch heads use the threads within each head.
template <typename T>
std::vector<SparseResult<T>> sparse_attention_heads(std::span<const AttentionProblem<T>> heads,
                                                    const SparseAttentionConfig& config);

template <typename T>
struct RowWorkspace;

/// Incremental decoder state for one head. The norm bound comes from the
/// constructor or the first key; a later key above it re-embeds everything with
/// a bound at least twice as large.
template <typename T>
class CausalStream {
 public:
  CausalStream(std::size_t d, std::size_t dv, T scale, const SparseAttentionConfig& config,
               std::size_t expected_tokens, std::optional<double> norm_bound = std::nullopt);
  ~CausalStream();
  CausalStream(CausalStream&&) noexcept;
  CausalStream& operator=(CausalStream&&) noexcept;

  /// Appends (k, v) at position size(), then writes the attention output of q into `out`.
  void step(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
            std::vector<PointId>* selected = nullptr, std::vector<T>* weights = nullptr);

  std::size_t size() const { return count_; }
  double norm_bound() const;
  const QuerySpec& spec() const { return spec_; }
  const SparseStats& stats() const { return stats_; }
  std::size_t workspace_bytes() const;

 private:
  void rebuild(double norm_bound);

  std::size_t d_;
  std::size_t dv_;
  T scale_;
  SparseAttentionConfig config_;
  QuerySpec spec_;
  std::size_t fallback_;
  std::optional<EmbeddingContext> ctx_;
  DciIndex<T> index_;
  std::vector<T> keys_;
  std::vector<T> values_;
  std::vector<T> embedded_;
  std::size_t count_ = 0;
  SparseStats stats_;
  std::unique_ptr<RowWorkspace<T>> ws_;
};

struct ErrorSummary {
  std::vector<double> per_row;  // |o_i - o~_i|_2
  double mean = 0.0;
};

template <typename T>
ErrorSummary approximation_error(const Matrix<T>& oracle, const Matrix<T>& approx);

}  // namespace iceformer
