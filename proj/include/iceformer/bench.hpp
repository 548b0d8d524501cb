#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iceformer/core.hpp"
#include "iceformer/dci.hpp"
#include "iceformer/sparse_attention.hpp"

namespace iceformer {

enum class WorkloadKind { GaussianIID, ClusteredMixture, FileBacked };

struct Workload {
  WorkloadKind kind = WorkloadKind::GaussianIID;
  std::size_t n = 512;
  std::size_t m = 512;
  std::size_t d = 64;
  std::size_t dv = 64;
  std::size_t heads = 1;
  MaskKind mask = MaskKind::None;
  double padding = 0.0;  // trailing fraction of keys masked for every row (Explicit only)
  std::uint64_t seed = 0;
  std::size_t cluster_count = 16;
  double spread = 0.1;
  std::string path;  // FileBacked only

  void validate() const;
};

WorkloadKind parse_workload_kind(const std::string& name);
std::string to_string(WorkloadKind kind);
nlohmann::json to_json(const Workload& w);

/// Deterministic in (seed, head). Each head draws from its own stream.
template <typename T>
AttentionProblem<T> gen_workload(const Workload& w, std::size_t head = 0);

template <typename T>
std::vector<AttentionProblem<T>> gen_heads(const Workload& w);

/// |returned intersect truth| / |truth|.
double recall_at_k(std::span<const PointId> returned, std::span<const PointId> truth);

/// Median wall-clock over `repetitions` runs of f, in milliseconds.
template <typename F>
double median_ms(int repetitions, F&& f) {
  std::vector<double> samples;
  for (int r = 0; r < std::max(repetitions, 1); ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    samples.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(samples.begin(), samples.end());
  return samples[samples.size() / 2];
}

// ---- k-NN recall / latency ------------------------------------------------------

struct KnnSetting {
  std::size_t num_simple = 10;
  std::size_t num_composite = 2;
  QuerySpec spec{10, 100, 1000};
};

struct KnnOptions {
  std::size_t points = 10000;
  std::size_t queries = 1000;
  std::size_t d = 64;
  std::size_t k = 10;
  std::uint64_t seed = 0;
  int threads = 1;
  int repetitions = 3;
  std::vector<KnnSetting> grid;
};

struct KnnResult {
  KnnSetting setting;
  double recall = 0.0;
  double construct_ms = 0.0;  // key embedding plus index construction
  double query_ms = 0.0;      // query embedding plus retrieval for every query
  double total_ms = 0.0;
  std::size_t visited = 0;
  std::size_t candidates = 0;
};

struct KnnReport {
  KnnOptions options;
  double brute_force_ms = 0.0;
  std::vector<KnnResult> results;
};

/// Maximum inner product search over Gaussian keys: each grid setting is timed
/// end to end (construction and all queries) against an exhaustive scan.
KnnReport run_knn_bench(const KnnOptions& options);

nlohmann::json to_json(const KnnReport& report, const KnnResult& result);

// ---- attention sweep --------------------------------------------------------------

struct BenchReport {
  nlohmann::json config;  // full echo, so each line stands alone
  std::size_t k = 0;
  double recall_at_k = 0.0;
  double mean_l2_error = 0.0;
  double vanilla_ms = 0.0;
  double sparse_ms = 0.0;
  double construct_ms = 0.0;
  double speedup = 0.0;
  std::size_t candidates_visited = 0;
  std::size_t candidates_pooled = 0;
  std::size_t workspace_bytes = 0;
  int threads = 1;
};

struct AttnSweepOptions {
  std::vector<std::size_t> ks{3, 5, 8, 10};
  SparseAttentionConfig base;
  int repetitions = 3;
  bool compute_recall = true;
};

/// One report per k. Timings cover the attention phase only; the oracle outputs
/// are computed once and shared by every k.
template <typename T>
std::vector<BenchReport> run_attn_sweep(std::span<const AttentionProblem<T>> heads, const AttnSweepOptions& options,
                                        const nlohmann::json& config_echo = {});

nlohmann::json to_json(const SparseAttentionConfig& config);
nlohmann::json to_json(const BenchReport& report);
std::string csv_header();
std::string to_csv(const BenchReport& report);

/// Keys whose values depend on wall-clock time; everything else in a report is reproducible.
const std::vector<std::string>& timing_fields();

}  // namespace iceformer
