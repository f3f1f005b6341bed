#ifndef SEQCAL_SEQUENCE_HPP
#define SEQCAL_SEQUENCE_HPP

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqcal/core.hpp"
#include "seqcal/metrics.hpp"

namespace seqcal {

// Decoder state threaded through ScoringModel::step. Models keep the running
// cumulative attention (including the step just taken) in `cum_attention` so
// that wrappers can read coverage without knowing the model.
struct DecoderState {
  std::vector<int> source;
  std::vector<double> cum_attention;
  int steps = 0;
};

struct StepOutput {
  std::vector<double> probs;      // next-token distribution over V
  std::vector<double> attention;  // over source positions
  DecoderState next;
};

// Autoregressive model P(y_t | y_<t, x). Implementations must be
// deterministic in (source, prefix) and safe for concurrent const use.
class ScoringModel {
 public:
  virtual ~ScoringModel() = default;

  virtual int vocab_size() const = 0;
  virtual int eos_id() const = 0;
  virtual DecoderState start(std::span<const int> source) const = 0;
  virtual StepOutput step(const DecoderState& state, std::span<const int> prefix) const = 0;
};

class ModelError : public DataError {
 public:
  using DataError::DataError;
};

// Throws ModelError unless `out.probs` is a distribution over the model's
// vocabulary.
void check_step(const ScoringModel& model, const StepOutput& out);

struct BeamConfig {
  int beam_width = 4;
  int max_len = 100;
  bool length_normalize = false;

  void validate() const;
};

struct Hypothesis {
  std::vector<int> tokens;  // ends with EOS unless cut at max_len
  double log_prob = 0.0;
  double score = 0.0;  // log_prob, or log_prob / tokens.size() when normalized
  bool finished = false;
};

// Each live prefix is expanded with its B most probable tokens and the global
// top B candidates survive. Candidates ending in EOS retire to a finished pool
// and are never expanded again; the result merges that pool with any prefixes
// cut at max_len, best score first. Ties break towards the lexicographically
// smaller token sequence.
std::vector<Hypothesis> beam_search(const ScoringModel& model, std::span<const int> source,
                                    const BeamConfig& cfg);

using Rng = std::mt19937_64;

// Uniform double in [0, 1) with 53 random bits; portable across standard
// libraries, unlike std::uniform_real_distribution.
double uniform01(Rng& rng);
int sample_index(std::span<const double> probs, Rng& rng);

// Derives an independent stream seed from (seed, index, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0);

// Ancestral sample until EOS (included) or max_len tokens.
std::vector<int> sample_sequence(const ScoringModel& model, std::span<const int> source, Rng& rng,
                                 int max_len);

// Drops a trailing EOS, if present.
std::vector<int> strip_eos(std::span<const int> tokens, int eos_id);

// BLEU-4 with add-one smoothing of the n >= 2 precisions and brevity penalty
// exp(min(0, 1 - |ref| / |cand|)). An empty candidate scores 0.
double sentence_bleu(std::span<const int> candidate, std::span<const int> reference);

using SentencePair = std::pair<std::vector<int>, std::vector<int>>;  // (candidate, reference)

// Unsmoothed corpus BLEU-4 from pooled n-gram statistics.
double corpus_bleu(std::span<const SentencePair> pairs);

// Monte Carlo estimate of E_{y ~ model}[BLEU(hypothesis, y)] from `samples`
// ancestral samples (EOS stripped on both sides).
double expected_bleu(const ScoringModel& model, std::span<const int> source,
                     std::span<const int> hypothesis, int samples, Rng& rng, int max_len = 100);

struct SequencePoint {
  std::string seq_id;
  double expected_bleu = 0.0;
  double actual_bleu = 0.0;
};

// ECE-style gap between mean actual and mean expected BLEU, binned by
// expected BLEU.
CalibrationResult structured_ece(std::span<const SequencePoint> points,
                                 const BinningConfig& bins = {});

// [{seq_id, expected_bleu, actual_bleu}, ...]
std::string sequence_report_json(std::span<const SequencePoint> points);

}  // namespace seqcal

#endif  // SEQCAL_SEQUENCE_HPP
