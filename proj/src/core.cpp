#include "seqcal/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace seqcal {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string record_context(const TokenRecord& r) {
  return "seq_id=" + r.seq_id + " t=" + std::to_string(r.t);
}

[[noreturn]] void invalid(const std::string& field, const TokenRecord& r,
                          const std::string& msg) {
  throw ValidationError(field, field + ": " + msg + " (" + record_context(r) + ")");
}

bool finite_in(double x, double lo, double hi) {
  return std::isfinite(x) && x >= lo && x <= hi;
}

const json& require(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw ValidationError(field, std::string(field) + ": missing");
  return *it;
}

long long as_integer(const json& v, const char* field) {
  if (!v.is_number_integer()) {
    throw ValidationError(field, std::string(field) + ": expected an integer");
  }
  return v.get<long long>();
}

int as_int(const json& v, const char* field) {
  const long long x = as_integer(v, field);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw ValidationError(field, std::string(field) + ": out of range");
  }
  return static_cast<int>(x);
}

double as_number(const json& v, const char* field) {
  if (!v.is_number()) {
    throw ValidationError(field, std::string(field) + ": expected a number");
  }
  return v.get<double>();
}

std::vector<double> as_vector(const json& v, const char* field) {
  if (!v.is_array()) {
    throw ValidationError(field, std::string(field) + ": expected an array");
  }
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(as_number(x, field));
  return out;
}

TokenRecord from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("record", "record: expected a JSON object");
  TokenRecord r;
  const json& sid = require(j, "seq_id");
  if (sid.is_string()) {
    r.seq_id = sid.get<std::string>();
  } else if (sid.is_number_integer()) {
    r.seq_id = sid.dump();
  } else {
    throw ValidationError("seq_id", "seq_id: expected a string or integer");
  }
  r.t = as_int(require(j, "t"), "t");
  r.vocab_size = as_int(require(j, "vocab_size"), "vocab_size");
  r.eos_id = as_int(require(j, "eos_id"), "eos_id");
  r.gold_id = as_int(require(j, "gold_id"), "gold_id");

  const json& entries = require(j, "entries");
  if (!entries.is_array()) throw ValidationError("entries", "entries: expected an array");
  r.entries.reserve(entries.size());
  for (const auto& e : entries) {
    if (!e.is_array() || e.size() != 2) {
      throw ValidationError("entries", "entries: each entry must be [id, prob]");
    }
    r.entries.push_back({as_int(e[0], "entries"), as_number(e[1], "entries")});
  }
  r.rest_mass = as_number(require(j, "rest_mass"), "rest_mass");

  if (auto it = j.find("attention"); it != j.end() && !it->is_null()) {
    r.attention = as_vector(*it, "attention");
  }
  if (auto it = j.find("cum_attention"); it != j.end() && !it->is_null()) {
    r.cum_attention = as_vector(*it, "cum_attention");
  }
  if (auto it = j.find("features"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw ValidationError("features", "features: expected an object");
    r.features = StepFeatures{as_number(require(*it, "entropy"), "features"),
                              as_number(require(*it, "coverage"), "features")};
  }
  return r;
}

}  // namespace

void validate(const TokenRecord& r) {
  if (r.t < 1) invalid("t", r, "step index must be >= 1");
  if (r.vocab_size < 1) invalid("vocab_size", r, "must be positive");
  if (r.eos_id < 0 || r.eos_id >= r.vocab_size) invalid("eos_id", r, "outside [0, vocab_size)");
  if (r.gold_id < 0 || r.gold_id >= r.vocab_size) invalid("gold_id", r, "outside [0, vocab_size)");

  std::unordered_set<int> seen;
  ExactSum mass;
  for (const auto& e : r.entries) {
    if (e.id < 0 || e.id >= r.vocab_size) invalid("entries", r, "token id outside [0, vocab_size)");
    if (!seen.insert(e.id).second) invalid("entries", r, "duplicate token id " + std::to_string(e.id));
    if (!finite_in(e.prob, 0.0, 1.0)) invalid("entries", r, "probability outside [0, 1]");
    mass.add(e.prob);
  }
  if (!finite_in(r.rest_mass, 0.0, 1.0)) invalid("rest_mass", r, "outside [0, 1]");
  mass.add(r.rest_mass);
  if (std::fabs(mass.value() - 1.0) > kMassTolerance) {
    invalid("entries", r, "entries + rest_mass sum to " + std::to_string(mass.value()));
  }

  if (r.attention) {
    if (r.attention->empty()) invalid("attention", r, "empty");
    ExactSum total;
    for (double a : *r.attention) {
      if (!std::isfinite(a) || a < 0.0) invalid("attention", r, "negative or non-finite weight");
      total.add(a);
    }
    if (std::fabs(total.value() - 1.0) > kMassTolerance) invalid("attention", r, "does not sum to 1");
  }
  if (r.cum_attention) {
    if (r.cum_attention->empty()) invalid("cum_attention", r, "empty");
    for (double a : *r.cum_attention) {
      if (!std::isfinite(a) || a < 0.0) invalid("cum_attention", r, "negative or non-finite weight");
    }
    if (r.attention) {
      if (r.attention->size() != r.cum_attention->size()) {
        invalid("cum_attention", r, "length differs from attention");
      }
      for (std::size_t j = 0; j < r.attention->size(); ++j) {
        if ((*r.cum_attention)[j] < (*r.attention)[j]) {
          invalid("cum_attention", r, "smaller than attention at position " + std::to_string(j));
        }
      }
    }
  }
  if (r.features) {
    if (!std::isfinite(r.features->entropy) || r.features->entropy < 0.0) {
      invalid("features", r, "entropy must be finite and non-negative");
    }
    if (!finite_in(r.features->coverage, 0.0, 1.0)) invalid("features", r, "coverage outside [0, 1]");
  }
}

void validate(const SequenceRecord& seq) {
  for (std::size_t i = 0; i < seq.steps.size(); ++i) {
    const auto& step = seq.steps[i];
    validate(step);
    if (step.seq_id != seq.seq_id) invalid("seq_id", step, "does not match sequence " + seq.seq_id);
    if (step.t != static_cast<int>(i) + 1) invalid("t", step, "steps out of order or with gaps");
  }
  if (seq.reference) {
    if (seq.reference->size() != seq.steps.size()) {
      throw ValidationError("reference", "reference: length differs from step count (seq_id=" +
                                             seq.seq_id + ")");
    }
    if (!seq.steps.empty() && seq.reference->back() != seq.steps.back().eos_id) {
      throw ValidationError("reference", "reference: last token is not EOS (seq_id=" +
                                             seq.seq_id + ")");
    }
  }
}

TokenRecord parse_log_line(std::string_view line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    throw ParseError("line " + std::to_string(line_no) + ", byte " + std::to_string(e.byte) +
                         ": malformed JSON",
                     line_no, e.byte);
  }
  try {
    TokenRecord r = from_json(j);
    validate(r);
    return r;
  } catch (const ValidationError& e) {
    throw ValidationError(e.field(), "line " + std::to_string(line_no) + ": " + e.what());
  }
}

std::string serialize_log_line(const TokenRecord& r) {
  ordered_json j;
  j["seq_id"] = r.seq_id;
  j["t"] = r.t;
  j["vocab_size"] = r.vocab_size;
  j["eos_id"] = r.eos_id;
  j["gold_id"] = r.gold_id;
  auto entries = ordered_json::array();
  for (const auto& e : r.entries) entries.push_back(ordered_json::array({e.id, e.prob}));
  j["entries"] = std::move(entries);
  j["rest_mass"] = r.rest_mass;
  if (r.attention) j["attention"] = *r.attention;
  if (r.cum_attention) j["cum_attention"] = *r.cum_attention;
  if (r.features) {
    j["features"] = ordered_json{{"entropy", r.features->entropy},
                                 {"coverage", r.features->coverage}};
  }
  return j.dump();
}

std::vector<double> densify(const TokenRecord& r) {
  const std::size_t v = static_cast<std::size_t>(r.vocab_size);
  const std::size_t k = r.entries.size();
  if (k == v && r.rest_mass > 0.0) {
    throw DataError("densify: rest_mass > 0 but every token is listed (" + record_context(r) + ")");
  }
  const double fill = k < v ? r.rest_mass / static_cast<double>(v - k) : 0.0;
  std::vector<double> dense(v, fill);
  for (const auto& e : r.entries) dense[static_cast<std::size_t>(e.id)] = e.prob;

  // Inputs are only normalized to kMassTolerance; pull the output onto the
  // simplex so downstream sums are tight.
  ExactSum total;
  for (double p : dense) total.add(p);
  const double s = total.value();
  if (std::fabs(s - 1.0) > 1e-12) {
    for (double& p : dense) p /= s;
  }
  return dense;
}

double gold_probability(const TokenRecord& r) {
  const std::size_t v = static_cast<std::size_t>(r.vocab_size);
  const std::size_t k = r.entries.size();
  ExactSum total;
  double gold = -1.0;
  for (const auto& e : r.entries) {
    total.add(e.prob);
    if (e.id == r.gold_id) gold = e.prob;
  }
  if (k == v && r.rest_mass > 0.0) {
    throw DataError("densify: rest_mass > 0 but every token is listed (" + record_context(r) + ")");
  }
  const double fill = k < v ? r.rest_mass / static_cast<double>(v - k) : 0.0;
  if (k < v) {
    // v - k copies of fill, added exactly as densify would see them.
    for (std::size_t i = 0; i < v - k; ++i) total.add(fill);
  }
  if (gold < 0.0) gold = fill;
  const double s = total.value();
  return std::fabs(s - 1.0) > 1e-12 ? gold / s : gold;
}

std::vector<TokenRecord> read_log(std::istream& in) {
  std::vector<TokenRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_log_line(line, line_no));
  }
  return out;
}

std::vector<TokenRecord> read_log_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open log file " + path);
  try {
    return read_log(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.line(), e.column());
  } catch (const ValidationError& e) {
    throw ValidationError(e.field(), path + ": " + e.what());
  }
}

void write_log(std::ostream& out, std::span<const TokenRecord> records) {
  for (const auto& r : records) out << serialize_log_line(r) << '\n';
}

void write_log_file(const std::string& path, std::span<const TokenRecord> records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write log file " + path);
  write_log(out, records);
}

std::vector<SequenceRecord> group_sequences(std::vector<TokenRecord> records) {
  std::vector<SequenceRecord> out;
  for (auto& r : records) {
    if (out.empty() || out.back().seq_id != r.seq_id) {
      out.emplace_back();
      out.back().seq_id = r.seq_id;
    }
    auto& seq = out.back();
    if (r.t != static_cast<int>(seq.steps.size()) + 1) {
      invalid("t", r, "steps out of order or with gaps");
    }
    if (seq.source_len == 0) {
      if (r.attention) seq.source_len = r.attention->size();
      else if (r.cum_attention) seq.source_len = r.cum_attention->size();
    }
    seq.steps.push_back(std::move(r));
  }
  return out;
}

std::vector<TokenRecord> flatten(std::span<const SequenceRecord> sequences) {
  std::vector<TokenRecord> out;
  for (const auto& s : sequences) out.insert(out.end(), s.steps.begin(), s.steps.end());
  return out;
}

DatasetSummary validate_dataset(std::istream& in) {
  constexpr std::size_t kMaxMessages = 20;
  DatasetSummary summary;
  std::string line;
  std::size_t line_no = 0;
  auto note = [&](const std::string& msg) {
    if (summary.messages.size() < kMaxMessages) summary.messages.push_back(msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const TokenRecord r = parse_log_line(line, line_no);
      ++summary.count;
      const bool listed = std::any_of(r.entries.begin(), r.entries.end(),
                                      [&](const TokenProb& e) { return e.id == r.gold_id; });
      if (!listed) ++summary.tail_gold;
    } catch (const ParseError& e) {
      ++summary.parse_errors;
      note(e.what());
    } catch (const ValidationError& e) {
      ++summary.validation_errors;
      ++summary.field_errors[e.field()];
      note(e.what());
    }
  }
  return summary;
}

void BinningConfig::validate() const {
  if (num_bins < 1) throw std::invalid_argument("num_bins must be >= 1");
}

int BinningConfig::bin_of(double p) const {
  const double scaled = std::floor(p * num_bins);
  if (!(scaled > 0.0)) return 0;
  return std::min(num_bins - 1, static_cast<int>(scaled));
}

ReliabilityHistogram::ReliabilityHistogram(BinningConfig bins)
    : bins_(bins) {
  bins_.validate();
  weight_.resize(static_cast<std::size_t>(bins_.num_bins));
  confidence_.resize(static_cast<std::size_t>(bins_.num_bins));
  accuracy_.resize(static_cast<std::size_t>(bins_.num_bins));
}

void ReliabilityHistogram::add(double confidence, double correctness, double weight) {
  const auto b = static_cast<std::size_t>(bins_.bin_of(confidence));
  weight_[b].add(weight);
  confidence_[b].add(weight * confidence);
  accuracy_[b].add(weight * correctness);
}

void ReliabilityHistogram::merge(const ReliabilityHistogram& other) {
  if (other.bins_.num_bins != bins_.num_bins) {
    throw std::invalid_argument("cannot merge histograms with different binning");
  }
  for (std::size_t b = 0; b < weight_.size(); ++b) {
    weight_[b].merge(other.weight_[b]);
    confidence_[b].merge(other.confidence_[b]);
    accuracy_[b].merge(other.accuracy_[b]);
  }
  total_.merge(other.total_);
}

double ReliabilityHistogram::calibration_error() const {
  const double l = total();
  if (l <= 0.0) throw DataError("calibration error of an empty histogram");
  double gap = 0.0;
  for (int b = 0; b < num_bins(); ++b) gap += std::fabs(accuracy_sum(b) - confidence_sum(b));
  return gap / l;
}

}  // namespace seqcal
