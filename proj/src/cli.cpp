#include "iceformer/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iceformer/bench.hpp"
#include "iceformer/core.hpp"
#include "iceformer/dci.hpp"
#include "iceformer/embed.hpp"
#include "iceformer/sparse_attention.hpp"
#include "iceformer/tensor_file.hpp"

namespace iceformer {

namespace {

struct Options {
  std::string input;
  std::string out;
  std::string index_path;
  std::string format = "jsonl";
  std::string precision = "f32";
  std::string workload = "gaussian";
  std::string preset = "desk";

  std::vector<std::size_t> k;
  std::vector<std::size_t> k0{32};
  std::vector<std::size_t> k1{64};
  std::vector<std::size_t> num_simple{1};
  std::vector<std::size_t> num_composite{4};
  std::uint64_t seed = 0;
  bool causal = false;
  int threads = 4;
  std::optional<double> alpha;
  int repetitions = 3;
  bool vanilla = false;

  std::size_t n = 512;
  std::size_t m = 512;
  std::size_t d = 64;
  std::size_t dv = 64;
  std::size_t heads = 1;
  std::size_t clusters = 16;
  double spread = 0.1;
  double padding = 0.0;

  std::size_t points = 10000;
  std::size_t queries = 1000;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t single(const std::vector<std::size_t>& values, const char* flag) {
  if (values.size() != 1) throw UsageError(std::string(flag) + " takes a single value for this subcommand");
  return values.front();
}

void add_retrieval_flags(CLI::App* cmd, Options& o, bool lists) {
  auto positive = CLI::PositiveNumber;
  cmd->add_option("--k", o.k, lists ? "Top-k values (comma separated)" : "Keys retained per query")
      ->delimiter(',')
      ->check(positive);
  cmd->add_option("--k0", o.k0, "Candidates retrieved per composite index")->delimiter(',')->check(positive);
  cmd->add_option("--k1", o.k1, "Visiting rounds per composite index")->delimiter(',')->check(positive);
  cmd->add_option("--num-simple", o.num_simple, "Simple indices per composite")->delimiter(',')->check(positive);
  cmd->add_option("--num-composite", o.num_composite, "Composite indices")->delimiter(',')->check(positive);
  cmd->add_option("--seed", o.seed, "Seed for workloads and index directions");
  cmd->add_option("--threads", o.threads, "Kernel thread budget")->check(positive);
}

void add_problem_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--input", o.input, "ICEA tensor file with Q, K, V and optional mask")
      ->check(CLI::ExistingFile);
  cmd->add_flag("--causal", o.causal, "Apply a causal mask");
  cmd->add_option("--precision", o.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--alpha", o.alpha, "Enable adaptive k = max(min(floor(n*alpha), 50), 30)");
  cmd->add_option("--workload", o.workload, "Generated workload kind")
      ->check(CLI::IsMember({"gaussian", "clustered"}));
  cmd->add_option("--n", o.n, "Queries")->check(CLI::PositiveNumber);
  cmd->add_option("--m", o.m, "Keys")->check(CLI::PositiveNumber);
  cmd->add_option("--d", o.d, "Key dimension")->check(CLI::PositiveNumber);
  cmd->add_option("--dv", o.dv, "Value dimension")->check(CLI::PositiveNumber);
  cmd->add_option("--heads", o.heads, "Independent heads")->check(CLI::PositiveNumber);
  cmd->add_option("--clusters", o.clusters, "Cluster count for clustered workloads")->check(CLI::PositiveNumber);
  cmd->add_option("--spread", o.spread, "Cluster spread for clustered workloads")->check(CLI::NonNegativeNumber);
  cmd->add_option("--padding", o.padding, "Fraction of trailing keys masked out for every row")
      ->check(CLI::Range(0.0, 0.999));
}

void add_report_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--out", o.out, "Append reports to this file instead of stdout");
  cmd->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"jsonl", "csv"}));
  cmd->add_option("--repetitions", o.repetitions, "Timed repetitions; the median is reported")
      ->check(CLI::PositiveNumber);
}

// Writes report lines to --out (appending) or to the given stream.
class ReportSink {
 public:
  ReportSink(const Options& o, std::ostream& fallback) : csv_(o.format == "csv"), stream_(&fallback) {
    if (!o.out.empty()) {
      const bool fresh = !std::filesystem::exists(o.out) || std::filesystem::file_size(o.out) == 0;
      file_.open(o.out, std::ios::app);
      if (!file_) throw IoError("cannot open '" + o.out + "' for appending");
      stream_ = &file_;
      need_header_ = fresh;
    }
  }

  bool csv() const { return csv_; }

  void line(const std::string& header, const std::string& csv_row, const nlohmann::json& json) {
    if (csv_) {
      if (need_header_) *stream_ << header << '\n';
      need_header_ = false;
      *stream_ << csv_row << '\n';
    } else {
      *stream_ << json.dump() << '\n';
    }
    if (!*stream_) throw IoError("failed writing report");
  }

 private:
  bool csv_;
  bool need_header_ = true;
  std::ofstream file_;
  std::ostream* stream_;
};

SparseAttentionConfig sparse_config(const Options& o) {
  SparseAttentionConfig c;
  c.spec.k = o.k.empty() ? 10 : single(o.k, "--k");
  c.spec.k0 = std::max(single(o.k0, "--k0"), c.spec.k);
  c.spec.k1 = std::max(single(o.k1, "--k1"), c.spec.k0);
  c.num_simple = single(o.num_simple, "--num-simple");
  c.num_composite = single(o.num_composite, "--num-composite");
  c.seed = o.seed;
  c.threads = o.threads;
  if (o.alpha) c.adaptive = AdaptiveK{*o.alpha};
  return c;
}

Workload workload_of(const Options& o) {
  Workload w;
  w.kind = parse_workload_kind(o.workload);
  w.n = o.n;
  w.m = o.causal ? o.n : o.m;
  w.d = o.d;
  w.dv = o.dv;
  w.heads = o.heads;
  w.seed = o.seed;
  w.cluster_count = o.clusters;
  w.spread = o.spread;
  w.padding = o.padding;
  w.mask = o.causal ? MaskKind::Causal : (o.padding > 0.0 ? MaskKind::Explicit : MaskKind::None);
  return w;
}

nlohmann::json problem_echo(const Options& o) {
  nlohmann::json j;
  if (!o.input.empty()) {
    j["input"] = o.input;
    j["causal"] = o.causal;
  } else {
    j["workload"] = to_json(workload_of(o));
  }
  j["precision"] = o.precision;
  return j;
}

template <typename T>
std::vector<AttentionProblem<T>> make_heads(const Options& o) {
  if (o.input.empty()) return gen_heads<T>(workload_of(o));
  auto problem = load_problem<T>(o.input);
  if (o.causal) {
    problem.mask = Mask::causal();
    problem.validate();
  }
  std::vector<AttentionProblem<T>> heads;
  heads.push_back(std::move(problem));
  return heads;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
int cmd_run(const Options& o, std::ostream& out) {
  auto heads = make_heads<T>(o);
  const auto& problem = heads.front();
  const auto config = sparse_config(o);
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json summary{{"command", "run"}, {"config", problem_echo(o)}};
  Matrix<T> output;
  if (o.vanilla) {
    output = vanilla_attention(problem, o.threads);
    summary["mode"] = "vanilla";
  } else {
    auto result = sparse_attention(problem, config);
    output = std::move(result.output);
    summary["mode"] = "sparse";
    summary["config"]["sparse"] = to_json(config);
    summary["candidates_visited"] = result.stats.visited;
    summary["candidates_pooled"] = result.stats.pooled;
    summary["workspace_bytes"] = result.stats.workspace_bytes;
    summary["fallback_rows"] = result.stats.fallback_rows;
  }
  summary["elapsed_ms"] = ms_since(t0);
  summary["rows"] = output.rows();
  write_tensor_file(o.out, matrix_to_file("O", output));
  summary["output"] = o.out;
  out << summary.dump() << '\n';
  return kExitOk;
}

template <typename T>
int cmd_sweep(const Options& o, std::ostream& out, std::vector<std::size_t> ks, const char* command) {
  auto heads = make_heads<T>(o);
  AttnSweepOptions opts;
  opts.ks = std::move(ks);
  Options single_k = o;
  single_k.k = {opts.ks.front()};
  opts.base = sparse_config(single_k);
  opts.repetitions = o.repetitions;
  if (o.alpha) {
    const auto k = resolve_k(AdaptiveK{*o.alpha}, heads.front().n());
    opts.ks = {k};
  }
  auto echo = problem_echo(o);
  echo["command"] = command;
  ReportSink sink(o, out);
  for (const auto& report : run_attn_sweep<T>(heads, opts, echo)) {
    sink.line(csv_header(), to_csv(report), to_json(report));
  }
  return kExitOk;
}

int cmd_bench_knn(const Options& o, std::ostream& out) {
  KnnOptions opts;
  opts.points = o.points;
  opts.queries = o.queries;
  opts.d = o.d;
  if (o.preset == "fashion-mnist-scale") {
    opts.points = 60000;
    opts.queries = 10000;
    opts.d = 784;
  }
  opts.k = o.k.empty() ? 10 : single(o.k, "--k");
  opts.seed = o.seed;
  opts.threads = o.threads;
  opts.repetitions = o.repetitions;
  for (auto p : o.num_simple) {
    for (auto l : o.num_composite) {
      for (auto k0 : o.k0) {
        for (auto k1 : o.k1) {
          KnnSetting s;
          s.num_simple = p;
          s.num_composite = l;
          s.spec = QuerySpec{opts.k, std::max(k0, opts.k), std::max({k1, k0, opts.k})};
          opts.grid.push_back(s);
        }
      }
    }
  }
  const auto report = run_knn_bench(opts);
  ReportSink sink(o, out);
  for (const auto& r : report.results) {
    std::ostringstream row;
    row.precision(17);
    row << r.setting.num_simple << ',' << r.setting.num_composite << ',' << r.setting.spec.k0 << ','
        << r.setting.spec.k1 << ',' << r.recall << ',' << r.construct_ms << ',' << r.query_ms << ',' << r.total_ms
        << ',' << report.brute_force_ms << ',' << r.visited;
    auto json = to_json(report, r);
    json["config"]["command"] = "bench-knn";
    json["config"]["preset"] = o.preset;
    sink.line("num_simple,num_composite,k0,k1,recall_at_k,construct_ms,query_ms,total_ms,brute_force_ms,"
              "candidates_visited",
              row.str(), json);
  }
  return kExitOk;
}

template <typename T>
std::vector<EmbeddedPoint<T>> embedded_keys(const AttentionProblem<T>& problem, const EmbeddingContext& ctx) {
  std::vector<EmbeddedPoint<T>> points;
  points.reserve(problem.m());
  for (std::size_t j = 0; j < problem.m(); ++j) points.push_back(embed_key(problem.keys.row(j), j, ctx));
  return points;
}

template <typename T>
int cmd_index_dump(const Options& o, std::ostream& out) {
  const auto heads = make_heads<T>(o);
  const auto& problem = heads.front();
  const auto config = sparse_config(o);
  const EmbeddingContext ctx(choose_c(problem.keys), problem.d());
  const auto points = embedded_keys(problem, ctx);
  const auto index = DciIndex<T>::construct(points, problem.d() + 1, config.num_simple, config.num_composite,
                                            config.seed, o.threads);
  std::ofstream file(o.out, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open '" + o.out + "' for writing");
  index.save(file);
  if (!file) throw IoError("failed writing '" + o.out + "'");
  out << nlohmann::json{{"command", "index-dump"},
                        {"config", problem_echo(o)},
                        {"points", index.size()},
                        {"dim", index.dim()},
                        {"num_simple", index.num_simple()},
                        {"num_composite", index.num_composite()},
                        {"norm_bound", ctx.norm_bound()},
                        {"output", o.out}}
             .dump()
      << '\n';
  return kExitOk;
}

template <typename T>
int cmd_index_load(const Options& o, std::ostream& out) {
  const auto heads = make_heads<T>(o);
  const auto& problem = heads.front();
  const auto config = sparse_config(o);
  const EmbeddingContext ctx(choose_c(problem.keys), problem.d());
  const auto points = embedded_keys(problem, ctx);
  std::ifstream file(o.index_path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + o.index_path + "' for reading");
  const auto index = DciIndex<T>::load(file, points);

  QueryScratch<T> scratch;
  QueryStats stats;
  std::vector<T> eq(problem.d() + 1);
  double recall = 0.0;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < problem.n(); ++i) {
    if (!embed_query_into(problem.queries.row(i), ctx, std::span<T>(eq))) continue;
    std::vector<PointId> got;
    for (const auto& nb : index.query(eq, config.spec, scratch, &stats)) got.push_back(nb.id);
    const auto truth = brute_force_topk(problem, i, config.spec.k);
    if (truth.empty()) continue;
    const std::vector<PointId> want(truth.begin(), truth.end());
    recall += recall_at_k(got, want);
    ++rows;
  }
  out << nlohmann::json{{"command", "index-load"},
                        {"config", problem_echo(o)},
                        {"index", o.index_path},
                        {"points", index.size()},
                        {"num_simple", index.num_simple()},
                        {"num_composite", index.num_composite()},
                        {"k", config.spec.k},
                        {"k0", config.spec.k0},
                        {"k1", config.spec.k1},
                        {"rows", rows},
                        {"recall_at_k", rows ? recall / static_cast<double>(rows) : 0.0},
                        {"candidates_visited", stats.visited}}
             .dump()
      << '\n';
  return kExitOk;
}

template <typename T>
int dispatch(const std::string& command, const Options& o, std::ostream& out) {
  if (command == "run") return cmd_run<T>(o, out);
  if (command == "compare") {
    return cmd_sweep<T>(o, out, {o.k.empty() ? std::size_t{10} : single(o.k, "--k")}, "compare");
  }
  if (command == "bench-attn") {
    return cmd_sweep<T>(o, out, o.k.empty() ? std::vector<std::size_t>{3, 5, 8, 10} : o.k, "bench-attn");
  }
  if (command == "bench-knn") return cmd_bench_knn(o, out);
  if (command == "index-dump") return cmd_index_dump<T>(o, out);
  if (command == "index-load") return cmd_index_load<T>(o, out);
  throw UsageError("unknown subcommand " + command);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Top-k sparse attention with a Prioritized DCI key index", "iceformer"};
  app.require_subcommand(1);
  Options o;

  auto* run = app.add_subcommand("run", "Compute sparse (or --vanilla) attention from a tensor file");
  add_problem_flags(run, o);
  add_retrieval_flags(run, o, false);
  run->add_flag("--vanilla", o.vanilla, "Compute exact attention instead");
  run->add_option("--out", o.out, "Output tensor file (tensor 'O')")->required();
  run->get_option("--input")->required();

  auto* compare = app.add_subcommand("compare", "Run both paths and report error, recall and timing");
  add_problem_flags(compare, o);
  add_retrieval_flags(compare, o, false);
  add_report_flags(compare, o);

  auto* bench_attn = app.add_subcommand("bench-attn", "Sweep k and report speed against accuracy");
  add_problem_flags(bench_attn, o);
  add_retrieval_flags(bench_attn, o, true);
  add_report_flags(bench_attn, o);

  auto* bench_knn = app.add_subcommand("bench-knn", "Recall/latency of DCI against exhaustive search");
  add_retrieval_flags(bench_knn, o, true);
  add_report_flags(bench_knn, o);
  bench_knn->add_option("--points", o.points, "Database size")->check(CLI::PositiveNumber);
  bench_knn->add_option("--queries", o.queries, "Query count")->check(CLI::PositiveNumber);
  bench_knn->add_option("--d", o.d, "Dimension")->check(CLI::PositiveNumber);
  bench_knn->add_option("--precision", o.precision, "Arithmetic precision (f32 only)")
      ->check(CLI::IsMember({"f32"}));
  bench_knn->add_option("--preset", o.preset, "desk (flags) or fashion-mnist-scale (60000 x 784, 10000 queries)")
      ->check(CLI::IsMember({"desk", "fashion-mnist-scale"}));

  auto* dump = app.add_subcommand("index-dump", "Build a DCI index over embedded keys and write a snapshot");
  add_problem_flags(dump, o);
  add_retrieval_flags(dump, o, false);
  dump->add_option("--out", o.out, "Snapshot path")->required();

  auto* load = app.add_subcommand("index-load", "Load a DCI snapshot and query it with the problem's queries");
  add_problem_flags(load, o);
  add_retrieval_flags(load, o, false);
  load->add_option("--index", o.index_path, "Snapshot path")->required()->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (o.precision == "f64") return dispatch<double>(command, o, out);
    return dispatch<float>(command, o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NormBoundError& e) {
    err << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const iceformer::ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitIo;
  } catch (const SnapshotError& e) {
    err << "snapshot error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace iceformer
