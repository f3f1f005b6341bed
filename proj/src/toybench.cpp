#include "seqcal/toybench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "seqcal/parallel.hpp"

namespace seqcal {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr std::size_t kSeqChunk = 32;

class ToyModel final : public ScoringModel {
 public:
  explicit ToyModel(ToyTaskSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto v = static_cast<std::size_t>(spec_.target_vocab);
    rows_.assign(spec_.emissions.size(), std::vector<double>(v, spec_.noise / static_cast<double>(v)));
    for (std::size_t s = 0; s < spec_.emissions.size(); ++s) {
      for (const auto& e : spec_.emissions[s]) {
        rows_[s][static_cast<std::size_t>(e.id)] += (1.0 - spec_.noise) * e.prob;
      }
    }
  }

  int vocab_size() const override { return spec_.target_vocab; }
  int eos_id() const override { return spec_.eos_id(); }

  DecoderState start(std::span<const int> source) const override {
    if (source.empty()) throw ModelError("toy model: empty source");
    for (int x : source) {
      if (x < 0 || x >= spec_.source_vocab) throw ModelError("toy model: source token out of range");
    }
    DecoderState s;
    s.source.assign(source.begin(), source.end());
    s.cum_attention.assign(source.size(), 0.0);
    return s;
  }

  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    const std::size_t k = state.source.size();
    const std::size_t t = prefix.size() + 1;
    StepOutput out;
    if (t <= k) {
      out.probs = rows_[static_cast<std::size_t>(state.source[t - 1])];
    } else {
      out.probs.assign(static_cast<std::size_t>(spec_.target_vocab), 0.0);
      out.probs[static_cast<std::size_t>(eos_id())] = 1.0;
    }
    const std::size_t aligned = std::min(t, k) - 1;
    const double spread = spec_.gamma / static_cast<double>(k);
    out.attention.assign(k, spread);
    out.attention[aligned] += 1.0 - spec_.gamma;
    out.next.source = state.source;
    out.next.cum_attention = state.cum_attention;
    for (std::size_t j = 0; j < k; ++j) out.next.cum_attention[j] += out.attention[j];
    out.next.steps = state.steps + 1;
    return out;
  }

 private:
  ToyTaskSpec spec_;
  std::vector<std::vector<double>> rows_;
};

std::vector<double> softmax_of_positive(std::span<const double> probs,
                                        const std::vector<double>& logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < probs.size(); ++y) {
    if (probs[y] > 0.0) m = std::max(m, logits[y]);
  }
  std::vector<double> out(probs.size(), 0.0);
  double total = 0.0;
  for (std::size_t y = 0; y < probs.size(); ++y) {
    if (probs[y] > 0.0) {
      out[y] = std::exp(logits[y] - m);
      total += out[y];
    }
  }
  for (double& q : out) q /= total;
  return out;
}

class DistortedModel final : public ScoringModel {
 public:
  DistortedModel(std::shared_ptr<const ScoringModel> inner, DistortionSpec spec)
      : inner_(std::move(inner)), spec_(spec) {
    spec_.validate();
  }

  int vocab_size() const override { return inner_->vocab_size(); }
  int eos_id() const override { return inner_->eos_id(); }
  DecoderState start(std::span<const int> source) const override { return inner_->start(source); }

  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    StepOutput out = inner_->step(state, prefix);
    if (spec_.temperature == 1.0 && spec_.eos_bias == 0.0) return out;
    const double c = coverage(out.next.cum_attention, spec_.coverage_threshold);
    std::vector<double> logits(out.probs.size(), 0.0);
    for (std::size_t y = 0; y < out.probs.size(); ++y) {
      if (out.probs[y] <= 0.0) continue;
      logits[y] = std::log(out.probs[y]) / spec_.temperature;
      if (static_cast<int>(y) == eos_id()) logits[y] += spec_.eos_bias * (1.0 - c);
    }
    out.probs = softmax_of_positive(out.probs, logits);
    return out;
  }

 private:
  std::shared_ptr<const ScoringModel> inner_;
  DistortionSpec spec_;
};

class RecalibratedModel final : public ScoringModel {
 public:
  RecalibratedModel(std::shared_ptr<const ScoringModel> inner, Recalibrator recalibrator,
                    FeatureConfig cfg)
      : inner_(std::move(inner)), recalibrator_(std::move(recalibrator)), cfg_(cfg) {
    cfg_.validate();
  }

  int vocab_size() const override { return inner_->vocab_size(); }
  int eos_id() const override { return inner_->eos_id(); }
  DecoderState start(std::span<const int> source) const override { return inner_->start(source); }

  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    StepOutput out = inner_->step(state, prefix);
    if (const auto* single = std::get_if<SingleTemperature>(&recalibrator_)) {
      out.probs = apply_single_temperature(out.probs, single->temperature);
    } else {
      const StepFeatures f{attention_entropy(out.attention),
                           coverage(out.next.cum_attention, cfg_.coverage_threshold)};
      out.probs = apply_to_distribution(out.probs, eos_id(), f,
                                        std::get<CalibratorParams>(recalibrator_));
    }
    return out;
  }

 private:
  std::shared_ptr<const ScoringModel> inner_;
  Recalibrator recalibrator_;
  FeatureConfig cfg_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json parse_object(const std::string& text, const char* what) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string(what) + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw DataError(std::string(what) + ": expected a JSON object");
  return j;
}

template <typename T>
T field_or(const json& j, const char* key, T fallback, const char* what) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(std::string(what) + ": bad value for " + key);
  }
}

// Source token s emits perm[s] with probability `primary` and perm[s + 1]
// otherwise, for a seed-dependent permutation of the non-EOS target tokens.
std::vector<std::vector<TokenProb>> default_emissions(int source_vocab, int target_vocab,
                                                      std::uint64_t seed, double primary) {
  const int tokens = target_vocab - 1;
  if (source_vocab < 1 || tokens < 1) throw DataError("toy task: vocabularies too small");
  std::vector<int> perm(static_cast<std::size_t>(tokens));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0, 0));
  for (std::size_t i = perm.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  std::vector<std::vector<TokenProb>> rows;
  for (int s = 0; s < source_vocab; ++s) {
    const int a = perm[static_cast<std::size_t>(s % tokens)];
    const int b = perm[static_cast<std::size_t>((s + 1) % tokens)];
    if (a == b) {
      rows.push_back({{a, 1.0}});
    } else {
      rows.push_back({{a, primary}, {b, 1.0 - primary}});
    }
  }
  return rows;
}

}  // namespace

void ToyTaskSpec::validate() const {
  if (source_vocab < 1) throw DataError("toy task: source_vocab must be positive");
  if (target_vocab < 2) throw DataError("toy task: target_vocab must include EOS and one token");
  if (min_len < 1 || max_len < min_len) throw DataError("toy task: empty length range");
  if (emissions.size() != static_cast<std::size_t>(source_vocab)) {
    throw DataError("toy task: need one emission row per source token");
  }
  for (const auto& row : emissions) {
    double total = 0.0;
    for (const auto& e : row) {
      if (e.id < 0 || e.id >= eos_id()) throw DataError("toy task: emission token out of range");
      if (!(e.prob >= 0.0 && e.prob <= 1.0)) throw DataError("toy task: emission probability outside [0, 1]");
      total += e.prob;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw DataError("toy task: emission row does not sum to 1");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw DataError("toy task: gamma outside [0, 1]");
  if (!(noise >= 0.0 && noise < 1.0)) throw DataError("toy task: noise outside [0, 1)");
}

ToyTaskSpec default_task(std::uint64_t seed, double noise, double primary) {
  ToyTaskSpec spec;
  spec.seed = seed;
  spec.noise = noise;
  spec.emissions = default_emissions(spec.source_vocab, spec.target_vocab, seed, primary);
  return spec;
}

void DistortionSpec::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DataError("distortion: temperature must be positive");
  }
  if (!(eos_bias >= 0.0) || !std::isfinite(eos_bias)) throw DataError("distortion: eos_bias must be >= 0");
  if (!(coverage_threshold > 0.0 && coverage_threshold < 1.0)) {
    throw DataError("distortion: coverage_threshold must lie in (0, 1)");
  }
}

std::string task_to_json(const ToyTaskSpec& spec) {
  ordered_json rows = ordered_json::array();
  for (const auto& row : spec.emissions) {
    ordered_json r = ordered_json::array();
    for (const auto& e : row) r.push_back(ordered_json::array({e.id, e.prob}));
    rows.push_back(std::move(r));
  }
  ordered_json j{{"source_vocab", spec.source_vocab}, {"target_vocab", spec.target_vocab},
                 {"min_len", spec.min_len},           {"max_len", spec.max_len},
                 {"gamma", spec.gamma},               {"noise", spec.noise},
                 {"seed", spec.seed},                 {"emissions", std::move(rows)}};
  return j.dump(2) + "\n";
}

ToyTaskSpec task_from_json(const std::string& text) {
  const json j = parse_object(text, "toy task");
  const auto seed = field_or<std::uint64_t>(j, "seed", 0, "toy task");
  ToyTaskSpec spec;
  spec.seed = seed;
  spec.noise = field_or<double>(j, "noise", 0.0, "toy task");
  spec.source_vocab = field_or<int>(j, "source_vocab", spec.source_vocab, "toy task");
  spec.target_vocab = field_or<int>(j, "target_vocab", spec.target_vocab, "toy task");
  spec.min_len = field_or<int>(j, "min_len", spec.min_len, "toy task");
  spec.max_len = field_or<int>(j, "max_len", spec.max_len, "toy task");
  spec.gamma = field_or<double>(j, "gamma", spec.gamma, "toy task");
  if (auto it = j.find("emissions"); it != j.end()) {
    spec.emissions.clear();
    if (!it->is_array()) throw DataError("toy task: emissions must be an array");
    for (const auto& row : *it) {
      std::vector<TokenProb> r;
      if (!row.is_array()) throw DataError("toy task: emission rows must be arrays");
      for (const auto& e : row) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
          throw DataError("toy task: emission entries must be [id, prob]");
        }
        r.push_back({e[0].get<int>(), e[1].get<double>()});
      }
      spec.emissions.push_back(std::move(r));
    }
  } else {
    spec.emissions = default_emissions(spec.source_vocab, spec.target_vocab, seed, 0.7);
  }
  spec.validate();
  return spec;
}

ToyTaskSpec load_task(const std::string& path) { return task_from_json(read_file(path)); }

std::string distortion_to_json(const DistortionSpec& spec) {
  ordered_json j{{"temperature", spec.temperature},
                 {"eos_bias", spec.eos_bias},
                 {"coverage_threshold", spec.coverage_threshold}};
  return j.dump(2) + "\n";
}

DistortionSpec distortion_from_json(const std::string& text) {
  const json j = parse_object(text, "distortion");
  DistortionSpec spec;
  spec.temperature = field_or<double>(j, "temperature", spec.temperature, "distortion");
  spec.eos_bias = field_or<double>(j, "eos_bias", spec.eos_bias, "distortion");
  spec.coverage_threshold =
      field_or<double>(j, "coverage_threshold", spec.coverage_threshold, "distortion");
  spec.validate();
  return spec;
}

DistortionSpec load_distortion(const std::string& path) {
  return distortion_from_json(read_file(path));
}

std::shared_ptr<const ScoringModel> build_true_model(const ToyTaskSpec& spec) {
  return std::make_shared<ToyModel>(spec);
}

std::shared_ptr<const ScoringModel> distort(std::shared_ptr<const ScoringModel> model,
                                            const DistortionSpec& spec) {
  return std::make_shared<DistortedModel>(std::move(model), spec);
}

std::shared_ptr<const ScoringModel> recalibrate_model(std::shared_ptr<const ScoringModel> model,
                                                      Recalibrator recalibrator,
                                                      const FeatureConfig& cfg) {
  return std::make_shared<RecalibratedModel>(std::move(model), std::move(recalibrator), cfg);
}

ToyExample sample_example(const ToyTaskSpec& task, std::uint64_t seed, std::uint64_t index,
                          std::uint64_t stream) {
  static thread_local std::shared_ptr<const ScoringModel> cached;
  static thread_local std::string cached_key;
  const std::string key = task_to_json(task);
  if (!cached || cached_key != key) {
    cached = build_true_model(task);
    cached_key = key;
  }

  Rng rng(derive_seed(seed, index, stream));
  const int span = task.max_len - task.min_len + 1;
  const int k = task.min_len + std::min(span - 1, static_cast<int>(uniform01(rng) * span));
  ToyExample ex;
  ex.source.resize(static_cast<std::size_t>(k));
  for (int& x : ex.source) {
    x = std::min(task.source_vocab - 1, static_cast<int>(uniform01(rng) * task.source_vocab));
  }
  ex.reference = sample_sequence(*cached, ex.source, rng, k + 1);
  return ex;
}

std::vector<SequenceRecord> emit_logs(const ScoringModel& model, const ToyTaskSpec& task,
                                      std::size_t n, std::uint64_t seed,
                                      const FeatureConfig& cfg) {
  task.validate();
  std::vector<SequenceRecord> out(n);
  parallel_for_chunks(n, kSeqChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const ToyExample ex = sample_example(task, seed, i, kLogStream);
      SequenceRecord seq;
      seq.seq_id = std::to_string(i);
      seq.source_len = ex.source.size();
      seq.source = ex.source;
      seq.reference = ex.reference;
      DecoderState state = model.start(ex.source);
      for (std::size_t t = 0; t < ex.reference.size(); ++t) {
        StepOutput step = model.step(state, std::span<const int>(ex.reference).first(t));
        check_step(model, step);
        TokenRecord r;
        r.seq_id = seq.seq_id;
        r.t = static_cast<int>(t) + 1;
        r.vocab_size = model.vocab_size();
        r.eos_id = model.eos_id();
        r.gold_id = ex.reference[t];
        for (std::size_t y = 0; y < step.probs.size(); ++y) {
          if (step.probs[y] > 0.0) r.entries.push_back({static_cast<int>(y), step.probs[y]});
        }
        r.rest_mass = 0.0;
        r.attention = step.attention;
        r.cum_attention = step.next.cum_attention;
        seq.steps.push_back(std::move(r));
        state = std::move(step.next);
      }
      out[i] = enrich(std::move(seq), cfg);
    }
  });
  return out;
}

std::vector<BeamSweepRow> beam_sweep(const ScoringModel& model, const ToyTaskSpec& task,
                                     std::span<const int> beams, std::size_t n_eval,
                                     const BeamConfig& cfg, std::uint64_t seed) {
  if (beams.empty()) throw std::invalid_argument("beam_sweep: no beam widths");
  if (n_eval == 0) throw std::invalid_argument("beam_sweep: n_eval must be positive");
  std::vector<ToyExample> examples(n_eval);
  for (std::size_t i = 0; i < n_eval; ++i) examples[i] = sample_example(task, seed, i, kEvalStream);

  const int eos = model.eos_id();
  std::vector<BeamSweepRow> rows;
  for (int b : beams) {
    BeamConfig c = cfg;
    c.beam_width = b;
    c.validate();
    std::vector<SentencePair> pairs(n_eval);
    std::vector<double> scores(n_eval);
    parallel_for_chunks(n_eval, kSeqChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const auto hyps = beam_search(model, examples[i].source, c);
        pairs[i] = {strip_eos(hyps.front().tokens, eos), strip_eos(examples[i].reference, eos)};
        scores[i] = hyps.front().score;
      }
    });
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) /
                        static_cast<double>(n_eval);
    rows.push_back({b, corpus_bleu(pairs), mean});
  }
  return rows;
}

SequenceCalibration sequence_calibration_experiment(const ScoringModel& model,
                                                    const ToyTaskSpec& task, std::size_t n_eval,
                                                    int samples, const BinningConfig& bins,
                                                    const BeamConfig& beam, std::uint64_t seed) {
  if (n_eval == 0) throw std::invalid_argument("sequence calibration: n_eval must be positive");
  constexpr std::uint64_t kSampleStream = 3;
  const int eos = model.eos_id();
  std::vector<SequencePoint> points(n_eval);
  parallel_for_chunks(n_eval, kSeqChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const ToyExample ex = sample_example(task, seed, i, kEvalStream);
      const auto hyps = beam_search(model, ex.source, beam);
      Rng rng(derive_seed(seed, i, kSampleStream));
      SequencePoint& p = points[i];
      p.seq_id = std::to_string(i);
      p.expected_bleu = expected_bleu(model, ex.source, hyps.front().tokens, samples, rng, beam.max_len);
      p.actual_bleu = sentence_bleu(strip_eos(hyps.front().tokens, eos), strip_eos(ex.reference, eos));
    }
  });
  auto result = structured_ece(points, bins);
  return {result.score, std::move(result.histogram), std::move(points)};
}

}  // namespace seqcal
