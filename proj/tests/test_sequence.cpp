#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>
#include <random>

#include "fixtures.hpp"
#include "seqcal/sequence.hpp"

namespace seqcal {
namespace {

using testing::AwesomeModel;

// Random distributions over V=6 (EOS = 5); EOS is forced at depth `depth`.
// Distributions are a pure function of (seed, prefix), or of (seed, length)
// when `length_only` is set.
class RandomTreeModel final : public ScoringModel {
 public:
  RandomTreeModel(std::uint64_t seed, int depth, bool length_only = false)
      : seed_(seed), depth_(depth), length_only_(length_only) {}
  int vocab_size() const override { return 6; }
  int eos_id() const override { return 5; }
  DecoderState start(std::span<const int> source) const override {
    DecoderState s;
    s.source.assign(source.begin(), source.end());
    s.cum_attention.assign(1, 0.0);
    return s;
  }
  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    StepOutput out;
    if (static_cast<int>(prefix.size()) >= depth_) {
      out.probs.assign(6, 0.0);
      out.probs[5] = 1.0;
    } else {
      std::uint64_t h = seed_;
      for (int y : prefix) h = derive_seed(h, length_only_ ? 0 : static_cast<std::uint64_t>(y) + 1);
      std::mt19937_64 rng(h);
      out.probs = testing::random_distribution(rng, 6, 0.02);
    }
    out.attention = {1.0};
    out.next = state;
    out.next.steps = state.steps + 1;
    return out;
  }

 private:
  std::uint64_t seed_;
  int depth_;
  bool length_only_;
};

std::vector<int> greedy(const ScoringModel& m, int max_len) {
  std::vector<int> out;
  DecoderState s = m.start(std::vector<int>{0});
  while (static_cast<int>(out.size()) < max_len) {
    auto step = m.step(s, out);
    const int y = static_cast<int>(std::max_element(step.probs.begin(), step.probs.end()) -
                                   step.probs.begin());
    out.push_back(y);
    if (y == m.eos_id()) break;
    s = step.next;
  }
  return out;
}

double recompute_log_prob(const ScoringModel& m, const std::vector<int>& tokens) {
  DecoderState s = m.start(std::vector<int>{0});
  double lp = 0.0;
  std::vector<int> prefix;
  for (int y : tokens) {
    auto step = m.step(s, prefix);
    lp += std::log(step.probs[static_cast<std::size_t>(y)]);
    prefix.push_back(y);
    s = step.next;
  }
  return lp;
}

const std::vector<int> kSource{0};

TEST(BeamSearch, GreedyFindsThatsAwesome) {
  AwesomeModel m;
  const auto hyps = beam_search(m, kSource, BeamConfig{1, 10, false});
  const std::vector<int> expect{AwesomeModel::kThats, AwesomeModel::kAwesome, AwesomeModel::kEos};
  EXPECT_EQ(hyps.front().tokens, expect);
  EXPECT_NEAR(std::exp(hyps.front().log_prob), 0.36, 1e-12);
  EXPECT_TRUE(hyps.front().finished);
}

TEST(BeamSearch, WidthTwoFindsItsOk) {
  AwesomeModel m;
  const auto hyps = beam_search(m, kSource, BeamConfig{2, 10, false});
  const std::vector<int> expect{AwesomeModel::kIts, AwesomeModel::kOk, AwesomeModel::kEos};
  EXPECT_EQ(hyps.front().tokens, expect);
  EXPECT_NEAR(std::exp(hyps.front().log_prob), 0.364, 1e-12);
  ASSERT_GE(hyps.size(), 2u);
  EXPECT_NEAR(std::exp(hyps[1].log_prob), 0.36, 1e-12);
}

TEST(BeamSearch, WidthOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RandomTreeModel m(seed, 5);
    EXPECT_EQ(beam_search(m, kSource, BeamConfig{1, 20, false}).front().tokens, greedy(m, 20));
  }
}

TEST(BeamSearch, LogProbabilitiesRecompute) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomTreeModel m(seed, 4);
    for (const auto& h : beam_search(m, kSource, BeamConfig{4, 20, false})) {
      EXPECT_NEAR(h.log_prob, recompute_log_prob(m, h.tokens), 1e-12);
      EXPECT_TRUE(std::isfinite(h.log_prob));
    }
  }
}

// When step distributions depend on length only, the top-B prefixes of each
// length are exactly what a width-B beam keeps, so pools nest as B grows.
TEST(BeamSearch, TopScoreMonotoneInWidthForLengthOnlyModels) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    RandomTreeModel m(seed, 4, true);
    double prev = -std::numeric_limits<double>::infinity();
    for (int b = 1; b <= 16; ++b) {
      const double top = beam_search(m, kSource, BeamConfig{b, 20, false}).front().score;
      EXPECT_GE(top, prev - 1e-12) << "seed " << seed << " B=" << b;
      prev = top;
    }
  }
}

// With prefix-dependent distributions a wider beam can prune the greedy path.
TEST(BeamSearch, WiderBeamCanLoseGreedyPath) {
  RandomTreeModel m(8, 4);
  const double b1 = beam_search(m, kSource, BeamConfig{1, 20, false}).front().score;
  const double b2 = beam_search(m, kSource, BeamConfig{2, 20, false}).front().score;
  EXPECT_LT(b2, b1);
}

TEST(BeamSearch, ResultsSortedAndLengthNormalized) {
  RandomTreeModel m(3, 4);
  const auto hyps = beam_search(m, kSource, BeamConfig{5, 20, true});
  for (std::size_t i = 1; i < hyps.size(); ++i) EXPECT_GE(hyps[i - 1].score, hyps[i].score);
  for (const auto& h : hyps) {
    EXPECT_NEAR(h.score, h.log_prob / static_cast<double>(h.tokens.size()), 1e-15);
  }
}

TEST(BeamSearch, CutAtMaxLen) {
  testing::EndlessModel m;
  const auto hyps = beam_search(m, kSource, BeamConfig{2, 3, false});
  EXPECT_EQ(hyps.front().tokens, (std::vector<int>{0, 0, 0}));
  EXPECT_FALSE(hyps.front().finished);
}

TEST(BeamSearch, InvalidConfigAndModel) {
  AwesomeModel m;
  EXPECT_THROW(beam_search(m, kSource, BeamConfig{0, 10, false}), std::invalid_argument);
  EXPECT_THROW(beam_search(m, kSource, BeamConfig{1, 0, false}), std::invalid_argument);
  testing::FixedStepModel bad({0.5, 0.4});
  EXPECT_THROW(beam_search(bad, kSource, BeamConfig{1, 10, false}), ModelError);
}

TEST(Sampling, DeterministicModel) {
  testing::FixedStepModel m({0.0, 1.0, 0.0});
  Rng rng(1);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_sequence(m, kSource, rng, 10), (std::vector<int>{1, 2}));
}

TEST(Sampling, Truncation) {
  testing::EndlessModel m;
  Rng rng(1);
  EXPECT_EQ(sample_sequence(m, kSource, rng, 3).size(), 3u);
}

TEST(Sampling, ThatsAwesomeFrequency) {
  AwesomeModel m;
  Rng rng(derive_seed(42, 0));
  const std::vector<int> target{AwesomeModel::kThats, AwesomeModel::kAwesome, AwesomeModel::kEos};
  int hits = 0;
  for (int i = 0; i < 20000; ++i) hits += sample_sequence(m, kSource, rng, 10) == target;
  EXPECT_NEAR(hits / 20000.0, 0.36, 0.01);
}

TEST(Sampling, ChiSquareGoodnessOfFit) {
  const std::vector<double> p{0.05, 0.1, 0.15, 0.2, 0.3, 0.2};
  testing::FixedStepModel m(p);
  Rng rng(derive_seed(7, 3));
  std::vector<double> counts(p.size(), 0.0);
  const int n = 50000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample_sequence(m, kSource, rng, 1)[0])] += 1;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = n * p[i];
    chi2 += (counts[i] - e) * (counts[i] - e) / e;
  }
  const boost::math::chi_squared dist(static_cast<double>(p.size() - 1));
  EXPECT_LT(chi2, boost::math::quantile(boost::math::complement(dist, 0.001)));
}

TEST(Sampling, Uniform01Range) {
  Rng rng(0);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(rng);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}

TEST(Bleu, IdenticalIsOne) {
  const std::vector<int> x{1, 2, 3, 4, 5};
  EXPECT_NEAR(sentence_bleu(x, x), 1.0, 1e-15);
  const std::vector<int> single{7};
  EXPECT_NEAR(sentence_bleu(single, single), 1.0, 1e-15);
}

TEST(Bleu, NoUnigramOverlap) {
  const std::vector<int> a{1, 2, 3, 4}, b{5, 6, 7, 8};
  EXPECT_EQ(sentence_bleu(a, b), 0.0);
  EXPECT_EQ(sentence_bleu(std::vector<int>{}, b), 0.0);
}

TEST(Bleu, HandComputedPrecisions) {
  const std::vector<int> cand{1, 2, 3, 4}, ref{1, 2, 3, 5};
  EXPECT_NEAR(sentence_bleu(cand, ref), 0.6580370064762462, 1e-12);
  EXPECT_NEAR(sentence_bleu(cand, ref), std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25), 1e-15);
}

TEST(Bleu, BrevityPenalty) {
  const std::vector<int> cand{1, 2}, ref{1, 2, 3, 4};
  // p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1 after smoothing; BP = e^{1-2}.
  EXPECT_NEAR(sentence_bleu(cand, ref), std::exp(-1.0), 1e-15);
}

TEST(Bleu, ClippedCounts) {
  const std::vector<int> cand{1, 1, 1, 1}, ref{1, 2, 3, 4};
  // p1 = 1/4 (clipped), p2 = 1/4, p3 = 1/3, p4 = 1/2.
  EXPECT_NEAR(sentence_bleu(cand, ref), std::pow(0.25 * 0.25 * (1.0 / 3.0) * 0.5, 0.25), 1e-15);
}

TEST(CorpusBleu, Examples) {
  std::vector<SentencePair> same{{{1, 2, 3, 4}, {1, 2, 3, 4}}, {{5, 6, 7, 8, 9}, {5, 6, 7, 8, 9}}};
  EXPECT_NEAR(corpus_bleu(same), 1.0, 1e-15);
  std::vector<SentencePair> disjoint{{{1, 2, 3, 4}, {5, 6, 7, 8}}};
  EXPECT_EQ(corpus_bleu(disjoint), 0.0);
  // Unsmoothed single pair: p = 5/6, 3/5, 2/4, 1/3 (lengths 6 vs 6).
  std::vector<SentencePair> one{{{1, 2, 3, 9, 4, 5}, {1, 2, 3, 4, 4, 5}}};
  std::vector<SentencePair> one_b{{{1, 2, 3, 4, 5, 6}, {1, 2, 3, 4, 5, 7}}};
  EXPECT_NEAR(corpus_bleu(one_b), std::pow(5.0 / 6 * 4.0 / 5 * 3.0 / 4 * 2.0 / 3, 0.25), 1e-15);
  EXPECT_EQ(corpus_bleu(one), 0.0);  // no matching 4-gram
  EXPECT_THROW(corpus_bleu(std::vector<SentencePair>{}), std::invalid_argument);
}

TEST(CorpusBleu, PoolsCounts) {
  std::vector<SentencePair> pairs{{{1, 2, 3, 4}, {1, 2, 3, 4}}, {{5, 6}, {5, 7, 8, 9}}};
  // Pooled: p1 = 5/6, p2 = 3/4, p3 = 2/2, p4 = 1/1; BP = exp(1 - 8/6).
  const double expect =
      std::exp(1.0 - 8.0 / 6.0) * std::pow(5.0 / 6.0 * 3.0 / 4.0 * 2.0 / 2.0 * 1.0, 0.25);
  EXPECT_NEAR(corpus_bleu(pairs), expect, 1e-15);
}

TEST(ExpectedBleu, DeterministicModel) {
  testing::FixedStepModel m({0.0, 1.0, 0.0});
  Rng rng(3);
  EXPECT_EQ(expected_bleu(m, kSource, std::vector<int>{1, 2}, 10, rng), 1.0);
  EXPECT_EQ(expected_bleu(m, kSource, std::vector<int>{0, 2}, 10, rng), 0.0);
  EXPECT_THROW(expected_bleu(m, kSource, std::vector<int>{1}, 0, rng), std::invalid_argument);
}

TEST(ExpectedBleu, MatchesEnumeration) {
  AwesomeModel m;
  using M = AwesomeModel;
  const std::vector<int> hyp{M::kThats, M::kAwesome};
  const std::vector<std::pair<std::vector<int>, double>> support{
      {{M::kIts, M::kOk}, 0.4 * 0.91},
      {{M::kIts, M::kAwesome}, 0.4 * 0.09},
      {{M::kThats, M::kAwesome}, 0.6 * 0.6},
      {{M::kThats, M::kOk}, 0.6 * 0.4}};
  double exact = 0.0;
  for (const auto& [seq, p] : support) exact += p * sentence_bleu(hyp, seq);
  Rng rng(derive_seed(9, 1));
  const double est = expected_bleu(m, kSource, std::vector<int>{M::kThats, M::kAwesome, M::kEos},
                                   4000, rng);
  EXPECT_NEAR(est, exact, 0.02);
}

TEST(StructuredEce, Examples) {
  std::vector<SequencePoint> diag;
  for (int i = 0; i <= 10; ++i) diag.push_back({std::to_string(i), i / 10.0, i / 10.0});
  EXPECT_NEAR(structured_ece(diag).score, 0.0, 1e-15);

  std::vector<SequencePoint> off(5, SequencePoint{"x", 0.8, 0.6});
  EXPECT_NEAR(structured_ece(off).score, 0.2, 1e-12);

  std::vector<SequencePoint> two{{"a", 0.12, 0.22}, {"b", 0.62, 0.32}};
  EXPECT_NEAR(structured_ece(two, BinningConfig{10}).score, 0.2, 1e-12);

  EXPECT_THROW(structured_ece(std::vector<SequencePoint>{}), DataError);
  std::vector<SequencePoint> bad{{"z", 1.2, 0.0}};
  EXPECT_THROW(structured_ece(bad), DataError);
}

}  // namespace
}  // namespace seqcal
