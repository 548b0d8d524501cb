#include "iceformer/bench.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

#include "iceformer/embed.hpp"
#include "iceformer/kernels.hpp"
#include "iceformer/tensor_file.hpp"

namespace iceformer {

namespace {

std::mt19937_64 stream_for(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
void fill_normal(Matrix<T>& m, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& x : m.data()) x = static_cast<T>(normal(rng));
}

template <typename T>
std::vector<PointId> exact_topk(std::span<const T> q, const Matrix<T>& keys, std::size_t k,
                                std::vector<std::pair<T, PointId>>& scored) {
  scored.clear();
  for (std::size_t j = 0; j < keys.rows(); ++j) scored.emplace_back(dot(q.data(), keys.row(j).data(), q.size()), j);
  const std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<PointId> ids(take);
  for (std::size_t r = 0; r < take; ++r) ids[r] = scored[r].second;
  return ids;
}

}  // namespace

void Workload::validate() const {
  if (kind == WorkloadKind::FileBacked) {
    if (path.empty()) throw ValidationError("file-backed workload needs a path");
    return;
  }
  if (n == 0 || m == 0 || d == 0 || dv == 0 || heads == 0) throw ValidationError("workload dimensions must be positive");
  if (mask == MaskKind::Causal && n != m) throw ValidationError("causal workload requires n == m");
  if (!(padding >= 0.0 && padding < 1.0)) throw ValidationError("padding fraction must lie in [0, 1)");
  if (kind == WorkloadKind::ClusteredMixture && (cluster_count == 0 || !(spread >= 0.0))) {
    throw ValidationError("clustered workload needs cluster_count >= 1 and spread >= 0");
  }
}

WorkloadKind parse_workload_kind(const std::string& name) {
  if (name == "gaussian") return WorkloadKind::GaussianIID;
  if (name == "clustered") return WorkloadKind::ClusteredMixture;
  if (name == "file") return WorkloadKind::FileBacked;
  throw ValidationError("unknown workload kind '" + name + "'");
}

std::string to_string(WorkloadKind kind) {
  switch (kind) {
    case WorkloadKind::GaussianIID: return "gaussian";
    case WorkloadKind::ClusteredMixture: return "clustered";
    case WorkloadKind::FileBacked: return "file";
  }
  return "unknown";
}

nlohmann::json to_json(const Workload& w) {
  static const char* mask_names[] = {"none", "causal", "explicit"};
  nlohmann::json j{{"kind", to_string(w.kind)},
                   {"n", w.n},
                   {"m", w.m},
                   {"d", w.d},
                   {"dv", w.dv},
                   {"heads", w.heads},
                   {"mask", mask_names[static_cast<int>(w.mask)]},
                   {"seed", w.seed}};
  if (w.mask == MaskKind::Explicit) j["padding"] = w.padding;
  if (w.kind == WorkloadKind::ClusteredMixture) {
    j["cluster_count"] = w.cluster_count;
    j["spread"] = w.spread;
  }
  if (w.kind == WorkloadKind::FileBacked) j["path"] = w.path;
  return j;
}

template <typename T>
AttentionProblem<T> gen_workload(const Workload& w, std::size_t head) {
  w.validate();
  if (w.kind == WorkloadKind::FileBacked) return load_problem<T>(w.path);

  auto rng = stream_for(w.seed, head);
  AttentionProblem<T> p;
  p.queries = Matrix<T>(w.n, w.d);
  p.keys = Matrix<T>(w.m, w.d);
  p.values = Matrix<T>(w.m, w.dv);

  if (w.kind == WorkloadKind::GaussianIID) {
    fill_normal(p.queries, rng);
    fill_normal(p.keys, rng);
  } else {
    Matrix<double> centers(w.cluster_count, w.d);
    fill_normal(centers, rng);
    std::uniform_int_distribution<std::size_t> pick(0, w.cluster_count - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto around_center = [&](Matrix<T>& target) {
      for (std::size_t r = 0; r < target.rows(); ++r) {
        const auto c = centers.row(pick(rng));
        auto row = target.row(r);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<T>(c[i] + w.spread * normal(rng));
      }
    };
    around_center(p.queries);
    around_center(p.keys);
  }
  fill_normal(p.values, rng);

  switch (w.mask) {
    case MaskKind::None: break;
    case MaskKind::Causal: p.mask = Mask::causal(); break;
    case MaskKind::Explicit: {
      const auto padded = std::min(static_cast<std::size_t>(std::floor(w.padding * static_cast<double>(w.m))), w.m - 1);
      std::vector<std::uint8_t> bits(w.n * w.m, 1);
      for (std::size_t i = 0; i < w.n; ++i) {
        for (std::size_t j = w.m - padded; j < w.m; ++j) bits[i * w.m + j] = 0;
      }
      p.mask = Mask::explicit_bits(w.n, w.m, std::move(bits));
      break;
    }
  }
  return p;
}

template <typename T>
std::vector<AttentionProblem<T>> gen_heads(const Workload& w) {
  std::vector<AttentionProblem<T>> heads;
  heads.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) heads.push_back(gen_workload<T>(w, h));
  return heads;
}

double recall_at_k(std::span<const PointId> returned, std::span<const PointId> truth) {
  if (truth.empty()) throw ValidationError("recall needs a non-empty ground truth");
  std::unordered_set<PointId> want(truth.begin(), truth.end());
  std::size_t hits = 0;
  for (PointId id : returned) hits += want.erase(id);
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

KnnReport run_knn_bench(const KnnOptions& options) {
  if (options.grid.empty()) throw ValidationError("k-NN bench needs at least one grid setting");
  if (options.points == 0 || options.queries == 0 || options.d == 0 || options.k == 0) {
    throw ValidationError("k-NN bench sizes must be positive");
  }
  const int threads = std::max(options.threads, 1);
  auto rng = stream_for(options.seed, 0);
  Matrix<float> keys(options.points, options.d);
  Matrix<float> queries(options.queries, options.d);
  fill_normal(keys, rng);
  fill_normal(queries, rng);
  const auto nq = static_cast<std::ptrdiff_t>(options.queries);

  KnnReport report;
  report.options = options;
  std::vector<std::vector<PointId>> truth(options.queries);
  report.brute_force_ms = median_ms(options.repetitions, [&] {
#pragma omp parallel num_threads(threads)
    {
      std::vector<std::pair<float, PointId>> scored;
      scored.reserve(options.points);
#pragma omp for schedule(static)
      for (std::ptrdiff_t q = 0; q < nq; ++q) {
        truth[static_cast<std::size_t>(q)] = exact_topk<float>(queries.row(static_cast<std::size_t>(q)), keys, options.k, scored);
      }
    }
  });

  for (const auto& setting : options.grid) {
    KnnResult result;
    result.setting = setting;
    result.setting.spec.k = options.k;
    result.setting.spec.k0 = std::max(setting.spec.k0, options.k);
    result.setting.spec.k1 = std::max(setting.spec.k1, result.setting.spec.k0);
    const QuerySpec spec = result.setting.spec;

    std::vector<double> construct_samples, query_samples, total_samples;
    std::vector<std::vector<PointId>> found(options.queries);
    for (int rep = 0; rep < std::max(options.repetitions, 1); ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const EmbeddingContext ctx(choose_c(keys), options.d);
      std::vector<EmbeddedPoint<float>> points;
      points.reserve(options.points);
      for (std::size_t j = 0; j < options.points; ++j) points.push_back(embed_key(keys.row(j), j, ctx));
      const auto index = DciIndex<float>::construct(points, options.d + 1, setting.num_simple,
                                                    setting.num_composite, options.seed, threads);
      const auto t1 = std::chrono::steady_clock::now();

      std::size_t visited = 0, candidates = 0;
#pragma omp parallel num_threads(threads)
      {
        QueryScratch<float> scratch;
        std::vector<float> eq(options.d + 1);
        QueryStats local;
#pragma omp for schedule(static)
        for (std::ptrdiff_t q = 0; q < nq; ++q) {
          const auto qi = static_cast<std::size_t>(q);
          auto& ids = found[qi];
          ids.clear();
          if (!embed_query_into(queries.row(qi), ctx, std::span<float>(eq))) continue;
          for (const auto& nb : index.query(eq, spec, scratch, &local)) ids.push_back(nb.id);
        }
#pragma omp critical(iceformer_knn_stats)
        {
          visited += local.visited;
          candidates += local.candidates;
        }
      }
      const auto t2 = std::chrono::steady_clock::now();
      construct_samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      query_samples.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
      total_samples.push_back(std::chrono::duration<double, std::milli>(t2 - t0).count());
      result.visited = visited;
      result.candidates = candidates;
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    result.construct_ms = median(construct_samples);
    result.query_ms = median(query_samples);
    result.total_ms = median(total_samples);
    double recall = 0.0;
    for (std::size_t q = 0; q < options.queries; ++q) recall += recall_at_k(found[q], truth[q]);
    result.recall = recall / static_cast<double>(options.queries);
    report.results.push_back(result);
  }
  return report;
}

nlohmann::json to_json(const KnnReport& report, const KnnResult& result) {
  const auto& o = report.options;
  return nlohmann::json{{"config",
                         {{"points", o.points},
                          {"queries", o.queries},
                          {"d", o.d},
                          {"k", o.k},
                          {"seed", o.seed},
                          {"threads", o.threads},
                          {"repetitions", o.repetitions},
                          {"num_simple", result.setting.num_simple},
                          {"num_composite", result.setting.num_composite},
                          {"k0", result.setting.spec.k0},
                          {"k1", result.setting.spec.k1}}},
                        {"recall_at_k", result.recall},
                        {"construct_ms", result.construct_ms},
                        {"query_ms", result.query_ms},
                        {"total_ms", result.total_ms},
                        {"brute_force_ms", report.brute_force_ms},
                        {"candidates_visited", result.visited},
                        {"candidates_pooled", result.candidates}};
}

nlohmann::json to_json(const SparseAttentionConfig& c) {
  nlohmann::json j{{"k", c.spec.k},
                   {"k0", c.spec.k0},
                   {"k1", c.spec.k1},
                   {"num_simple", c.num_simple},
                   {"num_composite", c.num_composite},
                   {"seed", c.seed},
                   {"threads", c.threads}};
  if (c.adaptive) {
    j["alpha"] = c.adaptive->alpha;
    j["adaptive_floor"] = c.adaptive->floor;
    j["adaptive_cap"] = c.adaptive->cap;
  }
  return j;
}

template <typename T>
std::vector<BenchReport> run_attn_sweep(std::span<const AttentionProblem<T>> heads, const AttnSweepOptions& options,
                                        const nlohmann::json& config_echo) {
  if (heads.empty()) throw ValidationError("attention sweep needs at least one head");
  if (options.ks.empty()) throw ValidationError("attention sweep needs at least one k");
  for (auto k : options.ks) {
    if (k == 0) throw ValidationError("k values must be positive");
  }
  const int threads = std::max(options.base.threads, 1);

  std::vector<Matrix<T>> oracle(heads.size());
  const double vanilla_ms = median_ms(options.repetitions, [&] {
    for (std::size_t h = 0; h < heads.size(); ++h) oracle[h] = vanilla_attention(heads[h], threads);
  });

  const std::size_t k_max = *std::max_element(options.ks.begin(), options.ks.end());
  std::vector<std::vector<std::vector<std::size_t>>> truth(heads.size());
  if (options.compute_recall) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      truth[h].resize(heads[h].n());
      const auto n = static_cast<std::ptrdiff_t>(heads[h].n());
#pragma omp parallel for num_threads(threads) schedule(dynamic, 32)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        truth[h][static_cast<std::size_t>(i)] = brute_force_topk(heads[h], static_cast<std::size_t>(i), k_max);
      }
    }
  }

  std::vector<BenchReport> reports;
  for (std::size_t k : options.ks) {
    SparseAttentionConfig cfg = options.base;
    cfg.adaptive.reset();
    cfg.spec.k = k;
    cfg.spec.k0 = std::max(cfg.spec.k0, k);
    cfg.spec.k1 = std::max(cfg.spec.k1, cfg.spec.k0);

    std::vector<SparseResult<T>> results;
    BenchReport report;
    report.sparse_ms = median_ms(options.repetitions, [&] { results = sparse_attention_heads(heads, cfg); });
    report.vanilla_ms = vanilla_ms;
    report.speedup = report.sparse_ms > 0.0 ? vanilla_ms / report.sparse_ms : 0.0;
    report.k = k;
    report.threads = threads;

    double error_sum = 0.0, recall_sum = 0.0;
    std::size_t rows = 0;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto err = approximation_error(oracle[h], results[h].output);
      for (double e : err.per_row) error_sum += e;
      rows += err.per_row.size();
      report.construct_ms += results[h].stats.construct_ms;
      report.candidates_visited += results[h].stats.visited;
      report.candidates_pooled += results[h].stats.pooled;
      report.workspace_bytes += results[h].stats.workspace_bytes;
      if (options.compute_recall) {
        for (std::size_t i = 0; i < heads[h].n(); ++i) {
          const auto& t = truth[h][i];
          std::vector<PointId> want(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(k, t.size())));
          recall_sum += recall_at_k(results[h].selected[i], want);
        }
      }
    }
    report.mean_l2_error = rows ? error_sum / static_cast<double>(rows) : 0.0;
    report.recall_at_k = options.compute_recall && rows ? recall_sum / static_cast<double>(rows) : 0.0;

    report.config = config_echo.is_object() ? config_echo : nlohmann::json::object();
    report.config["sparse"] = to_json(cfg);
    report.config["repetitions"] = options.repetitions;
    reports.push_back(std::move(report));
  }
  return reports;
}

nlohmann::json to_json(const BenchReport& r) {
  return nlohmann::json{{"config", r.config},
                        {"k", r.k},
                        {"recall_at_k", r.recall_at_k},
                        {"mean_l2_error", r.mean_l2_error},
                        {"vanilla_ms", r.vanilla_ms},
                        {"sparse_ms", r.sparse_ms},
                        {"construct_ms", r.construct_ms},
                        {"speedup", r.speedup},
                        {"candidates_visited", r.candidates_visited},
                        {"candidates_pooled", r.candidates_pooled},
                        {"workspace_bytes", r.workspace_bytes},
                        {"threads", r.threads}};
}

std::string csv_header() {
  return "k,recall_at_k,mean_l2_error,vanilla_ms,sparse_ms,construct_ms,speedup,candidates_visited,"
         "candidates_pooled,workspace_bytes,threads";
}

std::string to_csv(const BenchReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << r.k << ',' << r.recall_at_k << ',' << r.mean_l2_error << ',' << r.vanilla_ms << ',' << r.sparse_ms << ','
      << r.construct_ms << ',' << r.speedup << ',' << r.candidates_visited << ',' << r.candidates_pooled << ','
      << r.workspace_bytes << ',' << r.threads;
  return out.str();
}

const std::vector<std::string>& timing_fields() {
  static const std::vector<std::string> fields{"vanilla_ms", "sparse_ms",  "construct_ms",  "speedup",
                                               "query_ms",   "total_ms",   "brute_force_ms", "elapsed_ms"};
  return fields;
}

template AttentionProblem<float> gen_workload(const Workload&, std::size_t);
template AttentionProblem<double> gen_workload(const Workload&, std::size_t);
template std::vector<AttentionProblem<float>> gen_heads(const Workload&);
template std::vector<AttentionProblem<double>> gen_heads(const Workload&);
template std::vector<BenchReport> run_attn_sweep(std::span<const AttentionProblem<float>>, const AttnSweepOptions&,
                                                 const nlohmann::json&);
template std::vector<BenchReport> run_attn_sweep(std::span<const AttentionProblem<double>>, const AttnSweepOptions&,
                                                 const nlohmann::json&);

}  // namespace iceformer
