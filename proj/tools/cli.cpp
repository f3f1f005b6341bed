#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <optional>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqcal/core.hpp"
#include "seqcal/features.hpp"
#include "seqcal/metrics.hpp"
#include "seqcal/parallel.hpp"
#include "seqcal/recalibrate.hpp"
#include "seqcal/sequence.hpp"
#include "seqcal/toybench.hpp"

namespace seqcal::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string num(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

struct Global {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = ".";
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

// Explicit output paths may point into directories that do not exist yet.
const std::string& ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return path;
}

fs::path out_file(const Global& g, const std::string& name) {
  fs::create_directories(g.out);
  return fs::path(g.out) / name;
}

// Fills features on steps that lack them, grouping by sequence so
// cumulative attention can be rebuilt.
std::vector<TokenRecord> with_features(std::vector<TokenRecord> records, double delta) {
  const bool complete = std::all_of(records.begin(), records.end(),
                                    [](const TokenRecord& r) { return r.features.has_value(); });
  if (complete) return records;
  FeatureConfig cfg{delta};
  auto seqs = group_sequences(std::move(records));
  for (auto& s : seqs) s = enrich(std::move(s), cfg);
  return flatten(seqs);
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad number '" + item + "' in " + what);
    }
  }
  if (out.empty()) throw UsageError(what + " is empty");
  return out;
}

struct StatsArgs {
  std::string logs;
  int bins = 20;
  bool weighted = false;
  std::string partition;
  double delta = 0.35;
};

// A parsed --partition: head/tail thresholds or a grouping for partition.json.
struct PartitionChoice {
  std::vector<double> headtail;
  std::optional<PartitionSpec> spec;
  bool needs_features = false;
};

PartitionChoice parse_partition(const std::string& p) {
  PartitionChoice c;
  if (p.rfind("headtail:", 0) == 0) {
    c.headtail = parse_list(p.substr(9), "headtail thresholds");
  } else if (p == "eos") {
    c.spec = TokenClass{};
  } else if (p.rfind("entropy:", 0) == 0) {
    c.spec = EntropySplit{parse_list(p.substr(8), "entropy threshold").front()};
    c.needs_features = true;
  } else if (p.rfind("token:", 0) == 0) {
    int id = 0;
    const std::string s = p.substr(6);
    auto res = std::from_chars(s.data(), s.data() + s.size(), id);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw UsageError("bad token id in --partition " + p);
    }
    c.spec = TokenClass{id};
  } else {
    throw UsageError("unknown --partition " + p + " (expected eos|entropy:H|token:ID|headtail:T1,...)");
  }
  return c;
}

int run_stats(const Global& g, const StatsArgs& a, std::ostream& out) {
  const BinningConfig bins{a.bins};
  bins.validate();
  // Usage errors surface before any report is written.
  const PartitionChoice part = a.partition.empty() ? PartitionChoice{} : parse_partition(a.partition);
  auto records = read_log_file(a.logs);
  std::string summary = "stats: n=" + std::to_string(records.size());

  const auto top1 = ece(records, bins);
  write_text(out_file(g, "ece.json"), reliability_json("ece", top1.score, top1.histogram));
  write_text(out_file(g, "ece.csv"), reliability_csv(top1.histogram));
  summary += " ece=" + num(top1.score);

  if (a.weighted) {
    const auto w = weighted_ece(records, bins);
    write_text(out_file(g, "weighted_ece.json"), reliability_json("weighted_ece", w.score, w.histogram));
    write_text(out_file(g, "weighted_ece.csv"), reliability_csv(w.histogram));
    summary += " weighted_ece=" + num(w.score);
  }

  if (!part.headtail.empty()) {
    std::ostringstream csv;
    csv << "threshold,tail_conf_sum,tail_acc_sum,head_conf_sum,head_acc_sum\n";
    for (const auto& row : head_tail_curve(records, part.headtail)) {
      csv << num(row.threshold) << ',' << num(row.tail_conf_sum) << ',' << num(row.tail_acc_sum)
          << ',' << num(row.head_conf_sum) << ',' << num(row.head_acc_sum) << '\n';
    }
    write_text(out_file(g, "headtail.csv"), csv.str());
    summary += " headtail=" + std::to_string(part.headtail.size());
  } else if (part.spec) {
    if (part.needs_features) records = with_features(std::move(records), a.delta);
    nlohmann::ordered_json groups = nlohmann::ordered_json::object();
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    for (const auto& [label, m] : partitioned_metric(records, *part.spec, bins)) {
      groups[label] = {{"count", m.count},
                       {"mass", m.mass},
                       {"ece", opt(m.ece)},
                       {"weighted_ece", opt(m.weighted_ece)}};
    }
    nlohmann::ordered_json report{{"partition", a.partition}, {"groups", groups}};
    write_text(out_file(g, "partition.json"), report.dump(2) + "\n");
    summary += " partition=" + a.partition;
  }
  out << summary << '\n';
  return kExitOk;
}

struct FitArgs {
  std::string logs;
  std::string mode;
  bool plus_one = false;
  double delta = 0.35;
  std::string params_out;
  double learning_rate = TrainConfig{}.learning_rate;
  int epochs = TrainConfig{}.max_epochs;
  double init_scale = TrainConfig{}.init_scale;
  std::string optimizer = "adam";
};

int run_fit(const Global& g, const FitArgs& a, std::ostream& out) {
  auto records = read_log_file(a.logs);
  if (a.mode == "single") {
    const double t = fit_single_temperature(records);
    save_params(ensure_parent(a.params_out), SingleTemperature{t});
    out << "fit: mode=single temperature=" << num(t)
        << " nll_before=" << num(single_temperature_nll(records, 1.0))
        << " nll_after=" << num(single_temperature_nll(records, t)) << '\n';
    return kExitOk;
  }
  FeatureConfig{a.delta}.validate();
  records = with_features(std::move(records), a.delta);
  TrainConfig cfg;
  cfg.seed = g.seed;
  cfg.plus_one = a.plus_one;
  cfg.learning_rate = a.learning_rate;
  cfg.max_epochs = a.epochs;
  cfg.init_scale = a.init_scale;
  cfg.optimizer = a.optimizer == "gd" ? Optimizer::kGradientDescent : Optimizer::kAdam;
  const FitReport report = fit(records, cfg);
  save_params(ensure_parent(a.params_out), report.params);
  out << "fit: mode=variable epochs=" << report.epochs << " nll_init=" << num(report.initial_nll)
      << " nll_final=" << num(report.final_nll) << '\n';
  return kExitOk;
}

struct ApplyArgs {
  std::string logs;
  std::string params;
  std::string logs_out;
  double delta = 0.35;
};

int run_apply(const Global&, const ApplyArgs& a, std::ostream& out) {
  auto records = read_log_file(a.logs);
  const Recalibrator model = load_params(a.params);
  if (std::holds_alternative<CalibratorParams>(model)) {
    records = with_features(std::move(records), a.delta);
  }
  const FeatureConfig cfg{a.delta};
  std::vector<TokenRecord> recal(records.size());
  parallel_for_chunks(records.size(), 1024, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      TokenRecord r = records[i];
      const auto dense = apply_recalibrator(r, model, cfg);
      r.entries.clear();
      for (std::size_t y = 0; y < dense.size(); ++y) {
        if (dense[y] > 0.0) r.entries.push_back({static_cast<int>(y), dense[y]});
      }
      r.rest_mass = 0.0;
      validate(r);
      recal[i] = std::move(r);
    }
  });
  write_log_file(ensure_parent(a.logs_out), recal);
  out << "apply: n=" << recal.size() << " logs_out=" << a.logs_out << '\n';
  return kExitOk;
}

std::shared_ptr<const ScoringModel> toy_model(const ToyTaskSpec& task, const std::string& distort_path,
                                              const std::string& params_path, double delta) {
  auto model = build_true_model(task);
  if (!distort_path.empty() && distort_path != "true") model = distort(model, load_distortion(distort_path));
  if (!params_path.empty()) model = recalibrate_model(model, load_params(params_path), FeatureConfig{delta});
  return model;
}

struct SeqcalArgs {
  std::string task;
  std::string model = "true";
  std::string params;
  int samples = 100;
  std::size_t n = 200;
  int bins = 20;
  int beam = 4;
  double delta = 0.35;
};

int run_seqcal(const Global& g, const SeqcalArgs& a, std::ostream& out) {
  const ToyTaskSpec task = load_task(a.task);
  const auto model = toy_model(task, a.model, a.params, a.delta);
  BeamConfig beam;
  beam.beam_width = a.beam;
  const auto result =
      sequence_calibration_experiment(*model, task, a.n, a.samples, BinningConfig{a.bins}, beam, g.seed);
  write_text(out_file(g, "seqcal.json"), sequence_report_json(result.points));
  write_text(out_file(g, "structured_ece.json"),
             reliability_json("structured_ece", result.score, result.histogram));
  write_text(out_file(g, "structured_ece.csv"), reliability_csv(result.histogram));
  out << "seqcal: n=" << a.n << " structured_ece=" << num(result.score) << '\n';
  return kExitOk;
}

struct ToyGenArgs {
  std::string spec;
  std::size_t n = 1000;
  std::string distort;
  std::string logs_out;
  double delta = 0.35;
};

int run_toy_gen(const Global& g, const ToyGenArgs& a, std::ostream& out) {
  const ToyTaskSpec task = load_task(a.spec);
  const auto model = toy_model(task, a.distort, "", a.delta);
  const auto seqs = emit_logs(*model, task, a.n, g.seed, FeatureConfig{a.delta});
  const auto records = flatten(seqs);
  write_log_file(ensure_parent(a.logs_out), records);
  out << "toy gen: sequences=" << seqs.size() << " records=" << records.size() << '\n';
  return kExitOk;
}

struct BeamSweepArgs {
  std::string spec;
  std::string distort;
  std::string params;
  std::string beams = "1,2,4,8,16";
  std::size_t n = 500;
  int max_len = 100;
  bool length_norm = false;
  double delta = 0.35;
};

int run_beamsweep(const Global& g, const BeamSweepArgs& a, std::ostream& out) {
  const ToyTaskSpec task = load_task(a.spec);
  const auto model = toy_model(task, a.distort, a.params, a.delta);
  std::vector<int> beams;
  for (double b : parse_list(a.beams, "--beams")) {
    if (b < 1 || b != std::floor(b)) throw UsageError("beam widths must be positive integers");
    beams.push_back(static_cast<int>(b));
  }
  BeamConfig cfg;
  cfg.max_len = a.max_len;
  cfg.length_normalize = a.length_norm;
  const auto rows = beam_sweep(*model, task, beams, a.n, cfg, g.seed);
  std::ostringstream csv;
  csv << "beam,corpus_bleu,mean_log_score\n";
  for (const auto& r : rows) csv << r.beam << ',' << num(r.corpus_bleu) << ',' << num(r.mean_log_score) << '\n';
  write_text(out_file(g, "beamsweep.csv"), csv.str());
  out << "toy beamsweep:";
  for (const auto& r : rows) out << " B" << r.beam << "=" << num(r.corpus_bleu);
  out << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Token- and sequence-level calibration toolkit", "seqcal"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  Global g;
  if (const char* env = std::getenv("SEQCAL_SEED")) {
    try {
      g.seed = std::stoull(env);
    } catch (const std::exception&) {
      err << "seqcal: SEQCAL_SEED is not an unsigned integer\n";
      return kExitUsage;
    }
  }
  app.add_option("--seed", g.seed, "Random seed (falls back to SEQCAL_SEED)");
  app.add_option("--threads", g.threads, "Worker threads for parallel reductions")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Directory for report files");

  StatsArgs stats;
  auto* stats_cmd = app.add_subcommand("stats", "ECE / weighted ECE reports for a log file");
  stats_cmd->add_option("--logs", stats.logs, "JSONL log file")->required();
  stats_cmd->add_option("--bins", stats.bins, "Number of confidence bins");
  stats_cmd->add_flag("--weighted", stats.weighted, "Also report weighted ECE");
  stats_cmd->add_option("--partition", stats.partition, "eos | entropy:H | token:ID | headtail:T1,T2,...");
  stats_cmd->add_option("--delta", stats.delta, "Coverage threshold when features must be computed");

  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a recalibrator on validation logs");
  fit_cmd->add_option("--logs", fit_args.logs, "JSONL log file")->required();
  fit_cmd->add_option("--mode", fit_args.mode, "variable | single")
      ->required()
      ->check(CLI::IsMember({"variable", "single"}));
  fit_cmd->add_flag("--plus-one", fit_args.plus_one, "Add 1 to both sigmoid outputs");
  fit_cmd->add_option("--delta", fit_args.delta, "Coverage threshold");
  fit_cmd->add_option("--params-out", fit_args.params_out, "Output params file")->required();
  fit_cmd->add_option("--lr", fit_args.learning_rate, "Learning rate");
  fit_cmd->add_option("--epochs", fit_args.epochs, "Maximum epochs");
  fit_cmd->add_option("--init-scale", fit_args.init_scale, "Uniform init half-width");
  fit_cmd->add_option("--optimizer", fit_args.optimizer, "Full-batch optimizer: adam | gd")
      ->check(CLI::IsMember({"adam", "gd"}));

  ApplyArgs apply_args;
  auto* apply_cmd = app.add_subcommand("apply", "Write recalibrated logs");
  apply_cmd->add_option("--logs", apply_args.logs, "JSONL log file")->required();
  apply_cmd->add_option("--params", apply_args.params, "Params file")->required();
  apply_cmd->add_option("--logs-out", apply_args.logs_out, "Output log file")->required();
  apply_cmd->add_option("--delta", apply_args.delta, "Coverage threshold");

  SeqcalArgs seq;
  auto* seq_cmd = app.add_subcommand("seqcal", "Sequence-level calibration (Structured ECE) on a toy task");
  seq_cmd->add_option("--task", seq.task, "Toy task spec JSON")->required();
  seq_cmd->add_option("--model", seq.model, "'true' or a distortion spec JSON");
  seq_cmd->add_option("--params", seq.params, "Recalibrator applied on top of the model");
  seq_cmd->add_option("--samples", seq.samples, "Samples per expected-BLEU estimate")->check(CLI::PositiveNumber);
  seq_cmd->add_option("--n", seq.n, "Evaluation sources")->check(CLI::PositiveNumber);
  seq_cmd->add_option("--bins", seq.bins, "Number of bins");
  seq_cmd->add_option("--beam", seq.beam, "Beam width for the prediction")->check(CLI::PositiveNumber);
  seq_cmd->add_option("--delta", seq.delta, "Coverage threshold");

  auto* toy_cmd = app.add_subcommand("toy", "Synthetic translation bench");
  toy_cmd->require_subcommand(1, 1);
  ToyGenArgs gen;
  auto* gen_cmd = toy_cmd->add_subcommand("gen", "Emit teacher-forced logs");
  gen_cmd->add_option("--spec", gen.spec, "Toy task spec JSON")->required();
  gen_cmd->add_option("--n", gen.n, "Number of sequences");
  gen_cmd->add_option("--distort", gen.distort, "Distortion spec JSON");
  gen_cmd->add_option("--logs-out", gen.logs_out, "Output log file")->required();
  gen_cmd->add_option("--delta", gen.delta, "Coverage threshold");
  BeamSweepArgs sweep;
  auto* sweep_cmd = toy_cmd->add_subcommand("beamsweep", "Corpus BLEU across beam widths");
  sweep_cmd->add_option("--spec", sweep.spec, "Toy task spec JSON")->required();
  sweep_cmd->add_option("--distort", sweep.distort, "Distortion spec JSON");
  sweep_cmd->add_option("--params", sweep.params, "Recalibrator applied on top of the model");
  sweep_cmd->add_option("--beams", sweep.beams, "Comma-separated beam widths");
  sweep_cmd->add_option("--n", sweep.n, "Evaluation sources")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--max-len", sweep.max_len, "Maximum decode length")->check(CLI::PositiveNumber);
  sweep_cmd->add_flag("--length-norm", sweep.length_norm, "Length-normalize final scores");
  sweep_cmd->add_option("--delta", sweep.delta, "Coverage threshold");

  std::vector<std::string> argv_storage{"seqcal"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_num_threads(g.threads);
  try {
    if (stats_cmd->parsed()) return run_stats(g, stats, out);
    if (fit_cmd->parsed()) return run_fit(g, fit_args, out);
    if (apply_cmd->parsed()) return run_apply(g, apply_args, out);
    if (seq_cmd->parsed()) return run_seqcal(g, seq, out);
    if (gen_cmd->parsed()) return run_toy_gen(g, gen, out);
    if (sweep_cmd->parsed()) return run_beamsweep(g, sweep, out);
  } catch (const UsageError& e) {
    err << "seqcal: " << e.what() << '\n' << app.help();
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "seqcal: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "seqcal: " << e.what() << '\n';
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace seqcal::cli
