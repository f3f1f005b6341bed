#include "seqcal/metrics.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "seqcal/parallel.hpp"

namespace seqcal {

namespace {

constexpr std::size_t kChunk = 2048;

struct Top1 {
  int id = 0;
  double confidence = 0.0;
};

Top1 argmax(const std::vector<double>& dense) {
  Top1 best{0, dense[0]};
  for (std::size_t y = 1; y < dense.size(); ++y) {
    if (dense[y] > best.confidence) best = {static_cast<int>(y), dense[y]};
  }
  return best;
}

// Reduces per-chunk histograms; the result does not depend on the chunking
// because every sum inside is exact.
template <typename Fill>
ReliabilityHistogram reduce_histograms(std::span<const TokenRecord> records,
                                       const BinningConfig& bins, Fill fill) {
  bins.validate();
  std::vector<ReliabilityHistogram> parts(chunk_count(records.size(), kChunk),
                                          ReliabilityHistogram(bins));
  parallel_for_chunks(records.size(), kChunk,
                      [&](std::size_t c, std::size_t begin, std::size_t end) {
                        for (std::size_t i = begin; i < end; ++i) fill(parts[c], records[i]);
                      });
  ReliabilityHistogram out(bins);
  for (const auto& p : parts) out.merge(p);
  return out;
}

void require_nonempty(std::span<const TokenRecord> records, const char* what) {
  if (records.empty()) throw DataError(std::string(what) + ": no records");
}

void fill_top1(ReliabilityHistogram& h, const TokenRecord& r) {
  const auto dense = densify(r);
  const Top1 top = argmax(dense);
  h.add(top.confidence, top.id == r.gold_id ? 1.0 : 0.0);
  h.add_total(1.0);
}

void fill_weighted(ReliabilityHistogram& h, const TokenRecord& r) {
  const auto dense = densify(r);
  for (std::size_t y = 0; y < dense.size(); ++y) {
    const double p = dense[y];
    if (p > 0.0) h.add(p, static_cast<int>(y) == r.gold_id ? 1.0 : 0.0, p);
  }
  h.add_total(1.0);
}

std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace

CalibrationResult ece(std::span<const TokenRecord> records, const BinningConfig& bins) {
  require_nonempty(records, "ece");
  auto hist = reduce_histograms(records, bins, fill_top1);
  const double score = hist.calibration_error();
  return {score, std::move(hist)};
}

CalibrationResult weighted_ece(std::span<const TokenRecord> records, const BinningConfig& bins) {
  require_nonempty(records, "weighted_ece");
  auto hist = reduce_histograms(records, bins, fill_weighted);
  const double score = hist.calibration_error();
  return {score, std::move(hist)};
}

double nll(std::span<const TokenRecord> records) {
  require_nonempty(records, "nll");
  std::vector<ExactSum> parts(chunk_count(records.size(), kChunk));
  parallel_for_chunks(records.size(), kChunk,
                      [&](std::size_t c, std::size_t begin, std::size_t end) {
                        for (std::size_t i = begin; i < end; ++i) {
                          const auto& r = records[i];
                          const double p = gold_probability(r);
                          if (!(p > 0.0)) {
                            throw DataError("nll: gold probability is zero (infinite NLL) at seq_id=" +
                                            r.seq_id + " t=" + std::to_string(r.t));
                          }
                          parts[c].add(-std::log(p));
                        }
                      });
  ExactSum total;
  for (const auto& p : parts) total.merge(p);
  return total.value() / static_cast<double>(records.size());
}

std::map<std::string, GroupMetrics> partitioned_metric(std::span<const TokenRecord> records,
                                                       const PartitionSpec& spec,
                                                       const BinningConfig& bins) {
  bins.validate();
  struct Group {
    ReliabilityHistogram top1;
    ReliabilityHistogram weighted;
    std::size_t count = 0;
  };
  std::map<std::string, Group> groups;
  auto group = [&](const std::string& label) -> Group& {
    auto it = groups.find(label);
    if (it == groups.end()) {
      it = groups.emplace(label, Group{ReliabilityHistogram(bins), ReliabilityHistogram(bins), 0})
               .first;
    }
    return it->second;
  };

  if (const auto* tc = std::get_if<TokenClass>(&spec)) {
    const std::string in_label = tc->token ? "token:" + std::to_string(*tc->token) : "eos";
    group(in_label);
    group("rest");
    for (const auto& r : records) {
      const int cls = tc->token ? *tc->token : r.eos_id;
      const auto dense = densify(r);
      const Top1 top = argmax(dense);
      Group& g = group(top.id == cls ? in_label : "rest");
      g.top1.add(top.confidence, top.id == r.gold_id ? 1.0 : 0.0);
      g.top1.add_total(1.0);
      ++g.count;
      for (std::size_t y = 0; y < dense.size(); ++y) {
        const double p = dense[y];
        if (p <= 0.0) continue;
        Group& w = group(static_cast<int>(y) == cls ? in_label : "rest");
        w.weighted.add(p, static_cast<int>(y) == r.gold_id ? 1.0 : 0.0, p);
        w.weighted.add_total(p);
      }
    }
  } else {
    const bool by_entropy = std::holds_alternative<EntropySplit>(spec);
    const double threshold = by_entropy ? std::get<EntropySplit>(spec).threshold
                                        : std::get<ConfidenceSplit>(spec).threshold;
    if (by_entropy && !(threshold >= 0.0)) throw std::invalid_argument("entropy threshold must be >= 0");
    if (!by_entropy && !(threshold > 0.0 && threshold <= 1.0)) {
      throw std::invalid_argument("confidence threshold must lie in (0, 1]");
    }
    group("low");
    group("high");
    for (const auto& r : records) {
      const auto dense = densify(r);
      const Top1 top = argmax(dense);
      double key = top.confidence;
      if (by_entropy) {
        if (!r.features) {
          throw DataError("entropy partition needs features (seq_id=" + r.seq_id +
                          " t=" + std::to_string(r.t) + ")");
        }
        key = r.features->entropy;
      }
      Group& g = group(key >= threshold ? "high" : "low");
      fill_top1(g.top1, r);
      fill_weighted(g.weighted, r);
      ++g.count;
    }
  }

  std::map<std::string, GroupMetrics> out;
  for (const auto& [label, g] : groups) {
    GroupMetrics m;
    m.count = g.count;
    m.mass = g.weighted.total();
    if (!g.top1.empty()) m.ece = g.top1.calibration_error();
    if (!g.weighted.empty()) m.weighted_ece = g.weighted.calibration_error();
    out.emplace(label, m);
  }
  return out;
}

std::vector<HeadTailRow> head_tail_curve(std::span<const TokenRecord> records,
                                         std::span<const double> thresholds) {
  require_nonempty(records, "head_tail_curve");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("head/tail thresholds must lie in (0, 1]");
  }
  const std::size_t n = thresholds.size();
  std::vector<ExactSum> tc(n), ta(n), hc(n), ha(n);
  for (const auto& r : records) {
    const auto dense = densify(r);
    for (std::size_t y = 0; y < dense.size(); ++y) {
      const double p = dense[y];
      const double correct = static_cast<int>(y) == r.gold_id ? 1.0 : 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (p < thresholds[k]) {
          tc[k].add(p);
          ta[k].add(correct);
        } else {
          hc[k].add(p);
          ha[k].add(correct);
        }
      }
    }
  }
  std::vector<HeadTailRow> rows;
  rows.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    rows.push_back({thresholds[k], tc[k].value(), ta[k].value(), hc[k].value(), ha[k].value()});
  }
  return rows;
}

std::vector<ReliabilityRow> export_reliability(const ReliabilityHistogram& hist) {
  const double total = hist.total();
  std::vector<ReliabilityRow> rows;
  rows.reserve(static_cast<std::size_t>(hist.num_bins()));
  for (int b = 0; b < hist.num_bins(); ++b) {
    ReliabilityRow row;
    row.bin_lo = hist.binning().lower(b);
    row.bin_hi = hist.binning().upper(b);
    const double w = hist.weight(b);
    row.mass = total > 0.0 ? w / total : 0.0;
    if (w > 0.0) {
      row.avg_confidence = hist.confidence_sum(b) / w;
      row.avg_accuracy = hist.accuracy_sum(b) / w;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string reliability_json(const std::string& metric, double score,
                             const ReliabilityHistogram& hist) {
  using ordered_json = nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json bins = ordered_json::array();
  for (const auto& row : export_reliability(hist)) {
    bins.push_back(ordered_json{{"bin_lo", row.bin_lo},
                                {"bin_hi", row.bin_hi},
                                {"mass", row.mass},
                                {"avg_confidence", opt(row.avg_confidence)},
                                {"avg_accuracy", opt(row.avg_accuracy)}});
  }
  ordered_json report{{"metric", metric}, {"score", score}, {"bins", std::move(bins)}};
  return report.dump(2) + "\n";
}

std::string reliability_csv(const ReliabilityHistogram& hist) {
  std::ostringstream out;
  out << "bin_lo,bin_hi,mass,avg_confidence,avg_accuracy\n";
  for (const auto& row : export_reliability(hist)) {
    out << format_double(row.bin_lo) << ',' << format_double(row.bin_hi) << ','
        << format_double(row.mass) << ','
        << (row.avg_confidence ? format_double(*row.avg_confidence) : "") << ','
        << (row.avg_accuracy ? format_double(*row.avg_accuracy) : "") << '\n';
  }
  return out.str();
}

}  // namespace seqcal
