#ifndef SEQCAL_METRICS_HPP
#define SEQCAL_METRICS_HPP

#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "seqcal/core.hpp"

namespace seqcal {

struct CalibrationResult {
  double score = 0.0;
  ReliabilityHistogram histogram;
};

// Top-1 ECE: one point per record at the argmax confidence (ties go to the
// smaller token id).
CalibrationResult ece(std::span<const TokenRecord> records, const BinningConfig& bins = {});

// Weighted ECE: every densified token y with P(y) > 0 enters bin I(P(y)) with
// weight P(y) and correctness [y == gold]; normalized by the record count.
CalibrationResult weighted_ece(std::span<const TokenRecord> records,
                               const BinningConfig& bins = {});

// Mean -ln P(gold) in nats per token. Throws DataError naming the record when
// a gold probability is zero.
double nll(std::span<const TokenRecord> records);

// Partition kinds. TokenClass splits by token identity: a record joins the
// class for top-1 ECE when its predicted token is in the class, and every
// densified token contributes to weighted ECE of its own class (normalized by
// the class's probability mass). EntropySplit and ConfidenceSplit assign whole
// records.
struct TokenClass {
  std::optional<int> token;  // nullopt selects each record's EOS id
};
struct EntropySplit {
  double threshold = 1.0;  // "high" is entropy >= threshold
};
struct ConfidenceSplit {
  double threshold = 0.8;  // "high" is top-1 confidence >= threshold
};
using PartitionSpec = std::variant<TokenClass, EntropySplit, ConfidenceSplit>;

struct GroupMetrics {
  std::size_t count = 0;      // records in the top-1 group
  double mass = 0.0;          // normalizer of the weighted histogram
  std::optional<double> ece;  // nullopt for an empty group
  std::optional<double> weighted_ece;
};

std::map<std::string, GroupMetrics> partitioned_metric(std::span<const TokenRecord> records,
                                                       const PartitionSpec& spec,
                                                       const BinningConfig& bins = {});

struct HeadTailRow {
  double threshold = 0.0;
  double tail_conf_sum = 0.0;
  double tail_acc_sum = 0.0;
  double head_conf_sum = 0.0;
  double head_acc_sum = 0.0;
};

// Per threshold T, totals of predicted probability and of gold indicators over
// every densified token with P < T (tail) and P >= T (head).
std::vector<HeadTailRow> head_tail_curve(std::span<const TokenRecord> records,
                                         std::span<const double> thresholds);

struct ReliabilityRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  double mass = 0.0;
  std::optional<double> avg_confidence;
  std::optional<double> avg_accuracy;
};

std::vector<ReliabilityRow> export_reliability(const ReliabilityHistogram& hist);

// {"metric", "score", "bins": [{bin_lo, bin_hi, mass, avg_confidence, avg_accuracy}]}
std::string reliability_json(const std::string& metric, double score,
                             const ReliabilityHistogram& hist);
// Header bin_lo,bin_hi,mass,avg_confidence,avg_accuracy; null averages are empty fields.
std::string reliability_csv(const ReliabilityHistogram& hist);

}  // namespace seqcal

#endif  // SEQCAL_METRICS_HPP
