#ifndef SEQCAL_RECALIBRATE_HPP
#define SEQCAL_RECALIBRATE_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "seqcal/core.hpp"
#include "seqcal/features.hpp"

namespace seqcal {

// Scalar-to-scalar net: 1 -> 3 (ReLU) -> 3 (ReLU) -> 1. `forward` returns the
// pre-sigmoid output; the squashing happens in CalibratorParams.
struct FeedForwardNet {
  static constexpr int kHidden = 3;
  static constexpr std::size_t kParamCount = kHidden + kHidden + kHidden * kHidden + kHidden +
                                             kHidden + 1;

  std::array<double, kHidden> in_weight{};
  std::array<double, kHidden> in_bias{};
  std::array<std::array<double, kHidden>, kHidden> hidden_weight{};
  std::array<double, kHidden> hidden_bias{};
  std::array<double, kHidden> out_weight{};
  double out_bias = 0.0;

  double forward(double x) const;

  void write_to(std::span<double> out) const;
  static FeedForwardNet read_from(std::span<const double> in);

  bool operator==(const FeedForwardNet&) const = default;
};

// Coverage-gated EOS correction plus variable inverse temperature
//   l'_y   = l_y + [y == eos] * ln sigmoid(eos_gain * (c - eos_shift))
//   1/T_y  = g(a) * h(l'_y),  g = sq(entropy_net), h = sq(logit_net)
// where sq is the sigmoid, or 1 + sigmoid when plus_one is set.
struct CalibratorParams {
  static constexpr std::size_t kParamCount = 2 + 2 * FeedForwardNet::kParamCount;

  double eos_gain = 1.0;    // serialized as w1
  double eos_shift = 0.35;  // serialized as w2
  FeedForwardNet entropy_net;  // g_net
  FeedForwardNet logit_net;    // h_net
  bool plus_one = false;

  // Flat parameter vector: eos_gain, eos_shift, entropy_net, logit_net.
  std::vector<double> flatten() const;
  static CalibratorParams unflatten(std::span<const double> flat, bool plus_one);

  bool operator==(const CalibratorParams&) const = default;
};

enum class Optimizer { kGradientDescent, kAdam };

struct TrainConfig {
  // Both optimizers take full-batch steps; Adam rescales them per parameter.
  Optimizer optimizer = Optimizer::kAdam;
  double learning_rate = 0.01;
  int max_epochs = 2000;
  // Stop once validation NLL improves by less than this over `patience` epochs.
  double tolerance = 1e-7;
  int patience = 50;
  std::uint64_t seed = 0;
  double init_scale = 0.1;
  bool plus_one = false;

  void validate() const;
};

// Numerically stable ln(sigmoid(z)).
double log_sigmoid(double z);

std::vector<double> eos_correction(std::span<const double> logits, double coverage, int eos_id,
                                   const CalibratorParams& params);

double inverse_temperature(double entropy, double corrected_logit,
                           const CalibratorParams& params);

// Recalibrated dense distribution. Tokens with zero probability have logit
// -inf and stay at zero. Features come from the record, or are computed from
// its attention/cum_attention with `cfg` when absent.
std::vector<double> apply(const TokenRecord& record, const CalibratorParams& params,
                          const FeatureConfig& cfg = {});

// Same transform on a raw distribution, for wrapping scoring models.
std::vector<double> apply_to_distribution(std::span<const double> probs, int eos_id,
                                          const StepFeatures& features,
                                          const CalibratorParams& params);

struct LossAndGradient {
  double loss = 0.0;  // mean NLL per token
  std::vector<double> gradient;  // d loss / d CalibratorParams::flatten()
};

// Mean NLL of the recalibrated distributions and its exact gradient.
LossAndGradient loss_and_gradient(const CalibratorParams& params,
                                  std::span<const TokenRecord> records);
double recalibrated_nll(const CalibratorParams& params, std::span<const TokenRecord> records);

inline std::vector<double> gradient(const CalibratorParams& params,
                                    std::span<const TokenRecord> records) {
  return loss_and_gradient(params, records).gradient;
}

CalibratorParams initial_params(const TrainConfig& cfg);

struct FitReport {
  CalibratorParams params;
  double initial_nll = 0.0;
  double final_nll = 0.0;
  int epochs = 0;
};

// Full-batch descent on validation NLL from initial_params(cfg), returning the
// best parameters seen. Throws DataError on an empty dataset, on records
// without features, on zero gold probability, or on a non-finite loss.
FitReport fit(std::span<const TokenRecord> records, const TrainConfig& cfg = {});

// Softmax(ln P / T) over the tokens with P > 0.
std::vector<double> apply_single_temperature(std::span<const double> probs, double temperature);
std::vector<double> apply_single_temperature(const TokenRecord& record, double temperature);

double single_temperature_nll(std::span<const TokenRecord> records, double temperature);

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

// NLL-minimizing temperature in [kMinTemperature, kMaxTemperature]:
// golden-section search on log T, then safeguarded Newton steps on 1/T (the
// objective is convex in 1/T). Returns a range end when the objective is
// monotone or flat towards it.
double fit_single_temperature(std::span<const TokenRecord> records);

// What a params file holds: either the variable-temperature calibrator or a
// single global temperature.
struct SingleTemperature {
  double temperature = 1.0;
  bool operator==(const SingleTemperature&) const = default;
};
using Recalibrator = std::variant<SingleTemperature, CalibratorParams>;

std::vector<double> apply_recalibrator(const TokenRecord& record, const Recalibrator& model,
                                       const FeatureConfig& cfg = {});

inline constexpr const char* kParamsVersion = "seqcal-params-v1";

std::string params_to_json(const Recalibrator& model);
Recalibrator params_from_json(const std::string& text);
void save_params(const std::string& path, const Recalibrator& model);
Recalibrator load_params(const std::string& path);

}  // namespace seqcal

#endif  // SEQCAL_RECALIBRATE_HPP
