#include "seqcal/sequence.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

#include "json.hpp"

namespace seqcal {

void check_step(const ScoringModel& model, const StepOutput& out) {
  if (out.probs.size() != static_cast<std::size_t>(model.vocab_size())) {
    throw ModelError("model returned " + std::to_string(out.probs.size()) +
                     " probabilities for a vocabulary of " + std::to_string(model.vocab_size()));
  }
  double total = 0.0;
  for (double p : out.probs) {
    if (!std::isfinite(p) || p < 0.0) throw ModelError("model returned a negative or non-finite probability");
    total += p;
  }
  if (std::fabs(total - 1.0) > kMassTolerance) {
    throw ModelError("model distribution sums to " + std::to_string(total));
  }
}

void BeamConfig::validate() const {
  if (beam_width < 1) throw std::invalid_argument("beam width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
}

namespace {

double hypothesis_score(double log_prob, std::size_t length, bool normalize) {
  return normalize ? log_prob / static_cast<double>(length) : log_prob;
}

bool better(double score_a, const std::vector<int>& a, double score_b, const std::vector<int>& b) {
  if (score_a != score_b) return score_a > score_b;
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

std::vector<Hypothesis> beam_search(const ScoringModel& model, std::span<const int> source,
                                    const BeamConfig& cfg) {
  cfg.validate();
  const auto width = static_cast<std::size_t>(cfg.beam_width);
  const int eos = model.eos_id();

  struct Live {
    std::vector<int> tokens;
    double log_prob = 0.0;
    DecoderState state;
  };
  struct Candidate {
    std::vector<int> tokens;
    double log_prob;
    std::size_t parent;
  };

  std::vector<Live> live;
  live.push_back({{}, 0.0, model.start(source)});
  std::vector<Hypothesis> finished;

  for (int len = 0; len < cfg.max_len && !live.empty(); ++len) {
    std::vector<StepOutput> outs;
    outs.reserve(live.size());
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      outs.push_back(model.step(live[h].state, live[h].tokens));
      const auto& probs = outs.back().probs;
      check_step(model, outs.back());
      std::vector<int> order;
      for (std::size_t y = 0; y < probs.size(); ++y) {
        if (probs[y] > 0.0) order.push_back(static_cast<int>(y));
      }
      const std::size_t keep = std::min(width, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](int a, int b) {
                          if (probs[a] != probs[b]) return probs[a] > probs[b];
                          return a < b;
                        });
      for (std::size_t k = 0; k < keep; ++k) {
        Candidate c{live[h].tokens, live[h].log_prob + std::log(probs[order[k]]), h};
        c.tokens.push_back(order[k]);
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      return better(a.log_prob, a.tokens, b.log_prob, b.tokens);
    });
    if (candidates.size() > width) candidates.resize(width);

    std::vector<Live> next;
    for (auto& c : candidates) {
      if (c.tokens.back() == eos) {
        const double score = hypothesis_score(c.log_prob, c.tokens.size(), cfg.length_normalize);
        finished.push_back({std::move(c.tokens), c.log_prob, score, true});
      } else {
        next.push_back({std::move(c.tokens), c.log_prob, outs[c.parent].next});
      }
    }
    live = std::move(next);

    // Unnormalized log-probabilities only decrease with length, so once B
    // finished hypotheses beat every live prefix nothing can enter the top B.
    if (!cfg.length_normalize && finished.size() >= width && !live.empty()) {
      std::vector<double> scores;
      for (const auto& f : finished) scores.push_back(f.log_prob);
      std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(width - 1),
                       scores.end(), std::greater<>());
      if (scores[width - 1] > live.front().log_prob) break;
    }
  }

  for (auto& l : live) {
    const double score = hypothesis_score(l.log_prob, l.tokens.size(), cfg.length_normalize);
    finished.push_back({std::move(l.tokens), l.log_prob, score, false});
  }
  std::sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return better(a.score, a.tokens, b.score, b.tokens);
  });
  return finished;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = static_cast<int>(i);
    if (u < acc) return last_positive;
  }
  if (last_positive < 0) throw ModelError("cannot sample from an all-zero distribution");
  return last_positive;  // rounding left u above the running total
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ index) ^ (stream * 0xd1b54a32d192ed03ULL));
}

std::vector<int> sample_sequence(const ScoringModel& model, std::span<const int> source, Rng& rng,
                                 int max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  std::vector<int> tokens;
  DecoderState state = model.start(source);
  const int eos = model.eos_id();
  while (static_cast<int>(tokens.size()) < max_len) {
    StepOutput out = model.step(state, tokens);
    check_step(model, out);
    const int y = sample_index(out.probs, rng);
    tokens.push_back(y);
    if (y == eos) break;
    state = std::move(out.next);
  }
  return tokens;
}

std::vector<int> strip_eos(std::span<const int> tokens, int eos_id) {
  std::vector<int> out(tokens.begin(), tokens.end());
  if (!out.empty() && out.back() == eos_id) out.pop_back();
  return out;
}

namespace {

constexpr int kMaxOrder = 4;

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts count_ngrams(std::span<const int> tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

struct OrderStats {
  long long matches = 0;
  long long total = 0;
};

OrderStats clipped_matches(std::span<const int> candidate, std::span<const int> reference,
                           std::size_t n) {
  const NgramCounts cand = count_ngrams(candidate, n);
  const NgramCounts ref = count_ngrams(reference, n);
  OrderStats s;
  for (const auto& [gram, count] : cand) {
    s.total += count;
    auto it = ref.find(gram);
    if (it != ref.end()) s.matches += std::min(count, it->second);
  }
  return s;
}

double brevity_penalty(double cand_len, double ref_len) {
  return std::exp(std::min(0.0, 1.0 - ref_len / cand_len));
}

}  // namespace

double sentence_bleu(std::span<const int> candidate, std::span<const int> reference) {
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    const OrderStats s = clipped_matches(candidate, reference, static_cast<std::size_t>(n));
    if (n == 1) {
      if (s.matches == 0) return 0.0;
      log_sum += std::log(static_cast<double>(s.matches) / static_cast<double>(s.total));
    } else {
      log_sum += std::log(static_cast<double>(s.matches + 1) / static_cast<double>(s.total + 1));
    }
  }
  return brevity_penalty(static_cast<double>(candidate.size()),
                         static_cast<double>(reference.size())) *
         std::exp(log_sum / kMaxOrder);
}

double corpus_bleu(std::span<const SentencePair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_bleu: no sentence pairs");
  std::array<OrderStats, kMaxOrder> pooled{};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (const auto& [cand, ref] : pairs) {
    cand_len += static_cast<double>(cand.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      const OrderStats s = clipped_matches(cand, ref, static_cast<std::size_t>(n));
      pooled[n - 1].matches += s.matches;
      pooled[n - 1].total += s.total;
    }
  }
  double log_sum = 0.0;
  for (const auto& s : pooled) {
    if (s.matches == 0 || s.total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matches) / static_cast<double>(s.total));
  }
  return brevity_penalty(cand_len, ref_len) * std::exp(log_sum / kMaxOrder);
}

double expected_bleu(const ScoringModel& model, std::span<const int> source,
                     std::span<const int> hypothesis, int samples, Rng& rng, int max_len) {
  if (samples < 1) throw std::invalid_argument("expected_bleu needs at least one sample");
  const int eos = model.eos_id();
  const auto cand = strip_eos(hypothesis, eos);
  double total = 0.0;
  for (int m = 0; m < samples; ++m) {
    const auto sample = sample_sequence(model, source, rng, max_len);
    total += sentence_bleu(cand, strip_eos(sample, eos));
  }
  return total / samples;
}

CalibrationResult structured_ece(std::span<const SequencePoint> points, const BinningConfig& bins) {
  if (points.empty()) throw DataError("structured_ece: no points");
  ReliabilityHistogram hist(bins);
  for (const auto& p : points) {
    if (!(p.expected_bleu >= 0.0 && p.expected_bleu <= 1.0 && p.actual_bleu >= 0.0 &&
          p.actual_bleu <= 1.0)) {
      throw DataError("structured_ece: BLEU values must lie in [0, 1] (seq_id=" + p.seq_id + ")");
    }
    hist.add(p.expected_bleu, p.actual_bleu);
    hist.add_total(1.0);
  }
  const double score = hist.calibration_error();
  return {score, std::move(hist)};
}

std::string sequence_report_json(std::span<const SequencePoint> points) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& p : points) {
    rows.push_back(nlohmann::ordered_json{{"seq_id", p.seq_id},
                                          {"expected_bleu", p.expected_bleu},
                                          {"actual_bleu", p.actual_bleu}});
  }
  return rows.dump(2) + "\n";
}

}  // namespace seqcal
