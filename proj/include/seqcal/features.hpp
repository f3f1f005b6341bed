#ifndef SEQCAL_FEATURES_HPP
#define SEQCAL_FEATURES_HPP

#include <span>

#include "seqcal/core.hpp"

namespace seqcal {

struct FeatureConfig {
  // A source position counts as covered once its cumulative attention
  // exceeds this threshold.
  double coverage_threshold = 0.35;

  void validate() const;
};

// Shannon entropy in nats, 0 ln 0 := 0. Throws DataError unless `attention` is
// non-negative and sums to 1 within kMassTolerance.
double attention_entropy(std::span<const double> attention);

// Fraction of source positions whose cumulative attention exceeds `threshold`.
double coverage(std::span<const double> cum_attention, double threshold);

// Fills (entropy, coverage) on every step that lacks them. Cumulative
// attention at step t includes step t itself; when only per-step attention is
// logged it is rebuilt as a running sum, and when only cumulative attention is
// logged the per-step vector is recovered as a difference of consecutive
// cumulative vectors. Steps that already carry features are left untouched,
// so enrich is idempotent.
SequenceRecord enrich(SequenceRecord seq, const FeatureConfig& cfg = {});

}  // namespace seqcal

#endif  // SEQCAL_FEATURES_HPP
