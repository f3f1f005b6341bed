#ifndef SEQCAL_CORE_HPP
#define SEQCAL_CORE_HPP

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "seqcal/exact_sum.hpp"

namespace seqcal {

// Base class for every error caused by input data (as opposed to misuse of
// the API). The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : DataError(what), line_(line), column_(column) {}

  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

class ValidationError : public DataError {
 public:
  ValidationError(std::string field, const std::string& what)
      : DataError(what), field_(std::move(field)) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct TokenProb {
  int id = 0;
  double prob = 0.0;

  bool operator==(const TokenProb&) const = default;
};

// Attention entropy a_t (nats) and input coverage c_t for one step.
struct StepFeatures {
  double entropy = 0.0;
  double coverage = 0.0;

  bool operator==(const StepFeatures&) const = default;
};

// One decoding step of one sequence: a sparse next-token distribution (top-K
// entries plus the mass left over for the other V-K tokens), the gold token,
// and whatever attention-derived information the producer logged.
struct TokenRecord {
  std::string seq_id;
  int t = 1;  // 1-based step index
  int vocab_size = 0;
  int eos_id = 0;
  int gold_id = 0;
  std::vector<TokenProb> entries;
  double rest_mass = 0.0;
  std::optional<std::vector<double>> attention;
  std::optional<std::vector<double>> cum_attention;
  std::optional<StepFeatures> features;

  bool operator==(const TokenRecord&) const = default;
};

struct SequenceRecord {
  std::string seq_id;
  std::size_t source_len = 0;  // 0 when no step carries attention
  std::vector<TokenRecord> steps;
  std::optional<std::vector<int>> source;
  std::optional<std::vector<int>> reference;
};

inline constexpr double kMassTolerance = 1e-6;

// Throws ValidationError naming the first offending field.
void validate(const TokenRecord& record);
void validate(const SequenceRecord& seq);

// Parses one line of the JSONL log format and validates it. `line_no` is only
// used to give errors file context.
TokenRecord parse_log_line(std::string_view line, std::size_t line_no = 0);
std::string serialize_log_line(const TokenRecord& record);

// Dense length-V distribution: listed entries keep their probabilities, the
// V-K unlisted tokens share rest_mass uniformly.
std::vector<double> densify(const TokenRecord& record);

// Densified probability of the gold token, without materializing V entries.
double gold_probability(const TokenRecord& record);

// Reads a whole log; throws ParseError/ValidationError carrying the line
// number of the first bad record. Blank lines are skipped.
std::vector<TokenRecord> read_log(std::istream& in);
std::vector<TokenRecord> read_log_file(const std::string& path);
void write_log(std::ostream& out, std::span<const TokenRecord> records);
void write_log_file(const std::string& path,
                    std::span<const TokenRecord> records);

// Groups consecutive records by seq_id and checks that each group's steps run
// t = 1, 2, ... without gaps.
std::vector<SequenceRecord> group_sequences(std::vector<TokenRecord> records);
std::vector<TokenRecord> flatten(std::span<const SequenceRecord> sequences);

struct DatasetSummary {
  std::size_t count = 0;  // valid records
  std::size_t parse_errors = 0;
  std::size_t validation_errors = 0;
  std::map<std::string, std::size_t> field_errors;
  // Valid records whose gold token is not among the listed entries, so its
  // probability comes from the uniform rest_mass split.
  std::size_t tail_gold = 0;
  std::vector<std::string> messages;  // first few diagnostics, with line numbers
};

// Never throws on bad records: they are tallied and skipped.
DatasetSummary validate_dataset(std::istream& in);

// M equal-width bins over [0, 1], left-closed right-open except the last one,
// which is closed so that confidence 1.0 lands in the top bin.
struct BinningConfig {
  int num_bins = 20;

  void validate() const;
  int bin_of(double p) const;
  double lower(int b) const { return static_cast<double>(b) / num_bins; }
  double upper(int b) const { return static_cast<double>(b + 1) / num_bins; }
};

// Per-bin weight, weighted-confidence and weighted-correctness sums plus the
// normalizer L. Plain ECE adds one unit-weight point per record; weighted ECE
// adds every token with weight P(y). All sums are exact, so histograms are
// independent of insertion and merge order.
class ReliabilityHistogram {
 public:
  explicit ReliabilityHistogram(BinningConfig bins = {});

  void add(double confidence, double correctness, double weight = 1.0);
  void add_total(double amount) { total_.add(amount); }
  void merge(const ReliabilityHistogram& other);

  const BinningConfig& binning() const { return bins_; }
  int num_bins() const { return bins_.num_bins; }
  double weight(int b) const { return weight_[b].value(); }
  double confidence_sum(int b) const { return confidence_[b].value(); }
  double accuracy_sum(int b) const { return accuracy_[b].value(); }
  double total() const { return total_.value(); }
  double mass(int b) const { return weight(b) / total(); }
  bool empty() const { return total() == 0.0; }

  // (1/L) * sum_b |accuracy_sum_b - confidence_sum_b|
  double calibration_error() const;

 private:
  BinningConfig bins_;
  std::vector<ExactSum> weight_;
  std::vector<ExactSum> confidence_;
  std::vector<ExactSum> accuracy_;
  ExactSum total_;
};

}  // namespace seqcal

#endif  // SEQCAL_CORE_HPP
