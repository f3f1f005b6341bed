#ifndef SEQCAL_TESTS_FIXTURES_HPP
#define SEQCAL_TESTS_FIXTURES_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "seqcal/core.hpp"
#include "seqcal/sequence.hpp"

namespace seqcal::testing {

// Two-step model with tokens It's=0, That's=1, ok=2, awesome=3, EOS=4.
// Step 1: It's 0.4, That's 0.6. Step 2: ok 0.91 / awesome 0.09 after It's,
// awesome 0.6 / ok 0.4 after That's. Step 3: EOS with probability 1.
class AwesomeModel final : public ScoringModel {
 public:
  static constexpr int kIts = 0, kThats = 1, kOk = 2, kAwesome = 3, kEos = 4;

  int vocab_size() const override { return 5; }
  int eos_id() const override { return kEos; }
  DecoderState start(std::span<const int> source) const override {
    DecoderState s;
    s.source.assign(source.begin(), source.end());
    s.cum_attention.assign(1, 0.0);
    return s;
  }
  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    StepOutput out;
    out.probs.assign(5, 0.0);
    if (prefix.empty()) {
      out.probs[kIts] = 0.4;
      out.probs[kThats] = 0.6;
    } else if (prefix.size() == 1 && prefix[0] == kIts) {
      out.probs[kOk] = 0.91;
      out.probs[kAwesome] = 0.09;
    } else if (prefix.size() == 1) {
      out.probs[kAwesome] = 0.6;
      out.probs[kOk] = 0.4;
    } else {
      out.probs[kEos] = 1.0;
    }
    out.attention = {1.0};
    out.next = state;
    out.next.cum_attention[0] += 1.0;
    out.next.steps = state.steps + 1;
    return out;
  }
};

// One step over a fixed distribution (EOS is the last id), then EOS.
class FixedStepModel final : public ScoringModel {
 public:
  explicit FixedStepModel(std::vector<double> probs) : probs_(std::move(probs)) {}
  int vocab_size() const override { return static_cast<int>(probs_.size()); }
  int eos_id() const override { return vocab_size() - 1; }
  DecoderState start(std::span<const int> source) const override {
    DecoderState s;
    s.source.assign(source.begin(), source.end());
    s.cum_attention.assign(1, 0.0);
    return s;
  }
  StepOutput step(const DecoderState& state, std::span<const int> prefix) const override {
    StepOutput out;
    if (prefix.empty()) {
      out.probs = probs_;
    } else {
      out.probs.assign(probs_.size(), 0.0);
      out.probs.back() = 1.0;
    }
    out.attention = {1.0};
    out.next = state;
    out.next.cum_attention[0] += 1.0;
    out.next.steps = state.steps + 1;
    return out;
  }

 private:
  std::vector<double> probs_;
};

// Never emits EOS: token 0 with probability 1 at every step.
class EndlessModel final : public ScoringModel {
 public:
  int vocab_size() const override { return 3; }
  int eos_id() const override { return 2; }
  DecoderState start(std::span<const int> source) const override {
    DecoderState s;
    s.source.assign(source.begin(), source.end());
    s.cum_attention.assign(1, 0.0);
    return s;
  }
  StepOutput step(const DecoderState& state, std::span<const int>) const override {
    StepOutput out;
    out.probs = {1.0, 0.0, 0.0};
    out.attention = {1.0};
    out.next = state;
    out.next.steps = state.steps + 1;
    return out;
  }
};

inline TokenRecord dense_record(const std::vector<double>& probs, int gold, int eos = -1,
                                std::string seq_id = "0", int t = 1) {
  TokenRecord r;
  r.seq_id = std::move(seq_id);
  r.t = t;
  r.vocab_size = static_cast<int>(probs.size());
  r.eos_id = eos < 0 ? r.vocab_size - 1 : eos;
  r.gold_id = gold;
  for (std::size_t y = 0; y < probs.size(); ++y) {
    if (probs[y] > 0.0) r.entries.push_back({static_cast<int>(y), probs[y]});
  }
  return r;
}

inline std::vector<double> random_distribution(std::mt19937_64& rng, int v, double floor = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(static_cast<std::size_t>(v));
  double total = 0.0;
  for (auto& x : p) {
    x = floor + u(rng);
    total += x;
  }
  for (auto& x : p) x /= total;
  return p;
}

// Records whose gold tokens are drawn from their own distributions.
inline std::vector<TokenRecord> self_sampled_records(std::size_t n, int v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = random_distribution(rng, v);
    const int gold = sample_index(p, rng);
    out.push_back(dense_record(p, gold, v - 1, std::to_string(i)));
  }
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("seqcal_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
}

}  // namespace seqcal::testing

#endif  // SEQCAL_TESTS_FIXTURES_HPP
