#ifndef SEQCAL_TOYBENCH_HPP
#define SEQCAL_TOYBENCH_HPP

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "seqcal/core.hpp"
#include "seqcal/features.hpp"
#include "seqcal/metrics.hpp"
#include "seqcal/recalibrate.hpp"
#include "seqcal/sequence.hpp"

namespace seqcal {

// Synthetic translation task with exactly known conditionals. Output step t
// (1-based) is aligned to source position t: it emits from the source token's
// emission row, mixed with `noise` spread uniformly over all V target tokens
// (EOS included, so sequences can end early). Step k+1 emits EOS with
// probability 1. Attention at step t is (1 - gamma) * onehot(min(t, k)) +
// gamma * uniform.
struct ToyTaskSpec {
  int source_vocab = 20;
  int target_vocab = 21;  // last id is EOS
  int min_len = 4;
  int max_len = 8;
  std::vector<std::vector<TokenProb>> emissions;  // one row per source token
  double gamma = 0.3;
  double noise = 0.0;
  std::uint64_t seed = 0;

  int eos_id() const { return target_vocab - 1; }
  void validate() const;
};

// Two-way ambiguous emissions (`primary` / 1 - `primary`) over the non-EOS
// target tokens, wired from `seed`.
ToyTaskSpec default_task(std::uint64_t seed = 0, double noise = 0.05, double primary = 0.7);

// Known miscalibration: step distributions become
// softmax(ln p / temperature + eos_bias * (1 - c_t) * [y == eos]).
struct DistortionSpec {
  double temperature = 1.0;
  double eos_bias = 0.0;
  double coverage_threshold = 0.35;

  void validate() const;
};

std::string task_to_json(const ToyTaskSpec& spec);
ToyTaskSpec task_from_json(const std::string& text);
ToyTaskSpec load_task(const std::string& path);
std::string distortion_to_json(const DistortionSpec& spec);
DistortionSpec distortion_from_json(const std::string& text);
DistortionSpec load_distortion(const std::string& path);

std::shared_ptr<const ScoringModel> build_true_model(const ToyTaskSpec& spec);
std::shared_ptr<const ScoringModel> distort(std::shared_ptr<const ScoringModel> model,
                                            const DistortionSpec& spec);
// Wraps a model so that every step distribution passes through `recalibrator`,
// with features computed from the step's attention and coverage.
std::shared_ptr<const ScoringModel> recalibrate_model(std::shared_ptr<const ScoringModel> model,
                                                      Recalibrator recalibrator,
                                                      const FeatureConfig& cfg = {});

struct ToyExample {
  std::vector<int> source;
  std::vector<int> reference;  // ends with EOS
};

// Streams separating training-log draws from evaluation draws.
inline constexpr std::uint64_t kLogStream = 1;
inline constexpr std::uint64_t kEvalStream = 2;

// (source, reference) pair `index` drawn from the true task distribution.
ToyExample sample_example(const ToyTaskSpec& task, std::uint64_t seed, std::uint64_t index,
                          std::uint64_t stream = kLogStream);

// Teacher-forced logs of `model` on `n` pairs sampled from the true task.
std::vector<SequenceRecord> emit_logs(const ScoringModel& model, const ToyTaskSpec& task,
                                      std::size_t n, std::uint64_t seed,
                                      const FeatureConfig& cfg = {});

struct BeamSweepRow {
  int beam = 1;
  double corpus_bleu = 0.0;
  double mean_log_score = 0.0;
};

std::vector<BeamSweepRow> beam_sweep(const ScoringModel& model, const ToyTaskSpec& task,
                                     std::span<const int> beams, std::size_t n_eval,
                                     const BeamConfig& cfg, std::uint64_t seed);

struct SequenceCalibration {
  double score = 0.0;
  ReliabilityHistogram histogram;
  std::vector<SequencePoint> points;
};

// Per evaluation source: top beam hypothesis, its expected BLEU under the
// model (T samples) and its BLEU against the true reference.
SequenceCalibration sequence_calibration_experiment(const ScoringModel& model,
                                                    const ToyTaskSpec& task, std::size_t n_eval,
                                                    int samples, const BinningConfig& bins,
                                                    const BeamConfig& beam, std::uint64_t seed);

}  // namespace seqcal

#endif  // SEQCAL_TOYBENCH_HPP
