#include "seqcal/features.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace seqcal {

void FeatureConfig::validate() const {
  if (!(coverage_threshold > 0.0 && coverage_threshold < 1.0)) {
    throw std::invalid_argument("coverage threshold must lie in (0, 1)");
  }
}

double attention_entropy(std::span<const double> attention) {
  if (attention.empty()) throw DataError("attention entropy: empty attention vector");
  ExactSum total;
  ExactSum entropy;
  for (double a : attention) {
    if (!std::isfinite(a) || a < 0.0) throw DataError("attention entropy: negative weight");
    total.add(a);
    if (a > 0.0) entropy.add(-a * std::log(a));
  }
  if (std::fabs(total.value() - 1.0) > kMassTolerance) {
    throw DataError("attention entropy: attention does not sum to 1");
  }
  return std::max(0.0, entropy.value());
}

double coverage(std::span<const double> cum_attention, double threshold) {
  if (cum_attention.empty()) throw DataError("coverage: empty cumulative attention");
  std::size_t covered = 0;
  for (double a : cum_attention) {
    if (!std::isfinite(a) || a < 0.0) throw DataError("coverage: negative cumulative attention");
    if (a > threshold) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(cum_attention.size());
}

SequenceRecord enrich(SequenceRecord seq, const FeatureConfig& cfg) {
  cfg.validate();
  // Running cumulative attention through the previous step; empty when it
  // cannot be known (no step yet, or a previous step carried features only).
  std::optional<std::vector<double>> running;
  bool first = true;
  for (auto& step : seq.steps) {
    auto where = [&] { return " (seq_id=" + step.seq_id + " t=" + std::to_string(step.t) + ")"; };
    std::optional<std::vector<double>> prev = first ? std::optional<std::vector<double>>{} : running;
    const bool at_start = first;
    first = false;

    if (step.cum_attention) {
      running = step.cum_attention;
    } else if (step.attention) {
      if (at_start) {
        running = step.attention;
      } else if (prev && prev->size() == step.attention->size()) {
        for (std::size_t j = 0; j < prev->size(); ++j) (*prev)[j] += (*step.attention)[j];
        running = prev;
      } else {
        running.reset();
      }
    } else {
      running.reset();
    }

    if (step.features) continue;

    if (!step.attention && !step.cum_attention) {
      throw DataError("enrich: step has no attention, cum_attention or features" + where());
    }
    if (!step.cum_attention) {
      if (!running) {
        throw DataError("enrich: cannot rebuild cumulative attention after a features-only step" +
                        where());
      }
      step.cum_attention = running;
    }
    if (!step.attention) {
      std::vector<double> alpha = *step.cum_attention;
      if (!at_start) {
        if (!prev || prev->size() != alpha.size()) {
          throw DataError("enrich: cannot recover attention from cum_attention" + where());
        }
        for (std::size_t j = 0; j < alpha.size(); ++j) alpha[j] = std::max(0.0, alpha[j] - (*prev)[j]);
      }
      step.attention = std::move(alpha);
    }
    step.features = StepFeatures{attention_entropy(*step.attention),
                                 coverage(*step.cum_attention, cfg.coverage_threshold)};
  }
  if (seq.source_len == 0 && !seq.steps.empty() && seq.steps.front().attention) {
    seq.source_len = seq.steps.front().attention->size();
  }
  return seq;
}

}  // namespace seqcal
