#include "seqcal/recalibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"
#include "seqcal/parallel.hpp"

namespace seqcal {

namespace {

constexpr int kH = FeedForwardNet::kHidden;
constexpr std::size_t kChunk = 512;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct NetTape {
  double x = 0.0;
  std::array<double, kH> z1{}, h1{}, z2{}, h2{};
};

double forward_tape(const FeedForwardNet& net, double x, NetTape& tape) {
  tape.x = x;
  for (int i = 0; i < kH; ++i) {
    tape.z1[i] = net.in_weight[i] * x + net.in_bias[i];
    tape.h1[i] = std::max(0.0, tape.z1[i]);
  }
  double out = net.out_bias;
  for (int j = 0; j < kH; ++j) {
    double z = net.hidden_bias[j];
    for (int i = 0; i < kH; ++i) z += net.hidden_weight[j][i] * tape.h1[i];
    tape.z2[j] = z;
    tape.h2[j] = std::max(0.0, z);
    out += net.out_weight[j] * tape.h2[j];
  }
  return out;
}

// Accumulates d loss / d net-params into `grad` (layout of write_to) given
// d loss / d output; returns d loss / d input.
double backward_tape(const FeedForwardNet& net, const NetTape& tape, double d_out,
                     std::span<double> grad) {
  double* g_in_w = grad.data();
  double* g_in_b = g_in_w + kH;
  double* g_hid_w = g_in_b + kH;
  double* g_hid_b = g_hid_w + kH * kH;
  double* g_out_w = g_hid_b + kH;
  double* g_out_b = g_out_w + kH;

  *g_out_b += d_out;
  std::array<double, kH> dz2{};
  for (int j = 0; j < kH; ++j) {
    g_out_w[j] += d_out * tape.h2[j];
    dz2[j] = tape.z2[j] > 0.0 ? d_out * net.out_weight[j] : 0.0;
    g_hid_b[j] += dz2[j];
    for (int i = 0; i < kH; ++i) g_hid_w[j * kH + i] += dz2[j] * tape.h1[i];
  }
  double dx = 0.0;
  for (int i = 0; i < kH; ++i) {
    double dh1 = 0.0;
    for (int j = 0; j < kH; ++j) dh1 += dz2[j] * net.hidden_weight[j][i];
    const double dz1 = tape.z1[i] > 0.0 ? dh1 : 0.0;
    g_in_w[i] += dz1 * tape.x;
    g_in_b[i] += dz1;
    dx += dz1 * net.in_weight[i];
  }
  return dx;
}

double squash(double z, bool plus_one) { return sigmoid(z) + (plus_one ? 1.0 : 0.0); }

// Finite logits of the tokens with non-zero probability plus the positions of
// the gold and EOS tokens among them. Tokens other than gold and EOS that share
// a logit are merged into one entry with a multiplicity.
struct Prepared {
  std::vector<double> logits;
  std::vector<double> counts;
  int gold = -1;
  int eos = -1;
  double entropy = 0.0;
  double coverage = 0.0;
};

std::string where(const TokenRecord& r) {
  return "seq_id=" + r.seq_id + " t=" + std::to_string(r.t);
}

Prepared prepare(const TokenRecord& r, bool need_features) {
  Prepared p;
  const auto dense = densify(r);
  std::vector<double> others;
  for (std::size_t y = 0; y < dense.size(); ++y) {
    if (dense[y] <= 0.0) continue;
    const int id = static_cast<int>(y);
    if (id != r.gold_id && id != r.eos_id) {
      others.push_back(std::log(dense[y]));
      continue;
    }
    if (id == r.gold_id) p.gold = static_cast<int>(p.logits.size());
    if (id == r.eos_id) p.eos = static_cast<int>(p.logits.size());
    p.logits.push_back(std::log(dense[y]));
    p.counts.push_back(1.0);
  }
  if (p.gold < 0) throw DataError("gold probability is zero (infinite loss) at " + where(r));
  std::sort(others.begin(), others.end());
  for (std::size_t i = 0; i < others.size();) {
    std::size_t j = i;
    while (j < others.size() && others[j] == others[i]) ++j;
    p.logits.push_back(others[i]);
    p.counts.push_back(static_cast<double>(j - i));
    i = j;
  }
  if (need_features) {
    if (!r.features) throw DataError("record lacks features at " + where(r));
    p.entropy = r.features->entropy;
    p.coverage = r.features->coverage;
  }
  return p;
}

std::vector<Prepared> prepare_all(std::span<const TokenRecord> records, bool need_features) {
  std::vector<Prepared> out(records.size());
  parallel_for_chunks(records.size(), kChunk, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = prepare(records[i], need_features);
  });
  return out;
}

double log_sum_exp(std::span<const double> s) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : s) m = std::max(m, x);
  double acc = 0.0;
  for (double x : s) acc += std::exp(x - m);
  return m + std::log(acc);
}

// ln sum_i counts_i exp(s_i)
double log_sum_exp(std::span<const double> s, std::span<const double> counts) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : s) m = std::max(m, x);
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += counts[i] * std::exp(s[i] - m);
  return m + std::log(acc);
}

// Per-record loss; when `grad` is non-empty also accumulates its gradient.
double record_loss(const CalibratorParams& params, const Prepared& p, std::span<double> grad) {
  const bool po = params.plus_one;
  const double z = params.eos_gain * (p.coverage - params.eos_shift);
  const double correction = log_sigmoid(z);

  NetTape g_tape;
  const double g_out = forward_tape(params.entropy_net, p.entropy, g_tape);
  const double g_sig = sigmoid(g_out);
  const double g_val = g_sig + (po ? 1.0 : 0.0);

  const std::size_t n = p.logits.size();
  // Per-thread scratch; record_loss runs once per record per epoch.
  thread_local std::vector<double> corrected, h_sig, h_val, scaled;
  thread_local std::vector<NetTape> h_tapes;
  corrected.resize(n);
  h_sig.resize(n);
  h_val.resize(n);
  scaled.resize(n);
  if (!grad.empty()) h_tapes.resize(n);
  NetTape scratch;
  for (std::size_t i = 0; i < n; ++i) {
    corrected[i] = p.logits[i] + (static_cast<int>(i) == p.eos ? correction : 0.0);
    NetTape& tape = grad.empty() ? scratch : h_tapes[i];
    h_sig[i] = sigmoid(forward_tape(params.logit_net, corrected[i], tape));
    h_val[i] = h_sig[i] + (po ? 1.0 : 0.0);
    scaled[i] = corrected[i] * g_val * h_val[i];
  }
  const double lse = log_sum_exp(scaled, p.counts);
  const double loss = lse - scaled[static_cast<std::size_t>(p.gold)];
  if (grad.empty()) return loss;

  std::span<double> g_eos = grad.subspan(0, 2);
  std::span<double> g_entropy = grad.subspan(2, FeedForwardNet::kParamCount);
  std::span<double> g_logit = grad.subspan(2 + FeedForwardNet::kParamCount,
                                           FeedForwardNet::kParamCount);
  double d_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r =
        p.counts[i] * std::exp(scaled[i] - lse) - (static_cast<int>(i) == p.gold ? 1.0 : 0.0);
    d_g += r * corrected[i] * h_val[i];
    const double d_h = r * corrected[i] * g_val;
    const double d_h_out = d_h * h_sig[i] * (1.0 - h_sig[i]);
    const double dx = backward_tape(params.logit_net, h_tapes[i], d_h_out, g_logit);
    if (static_cast<int>(i) == p.eos) {
      const double d_corrected = r * g_val * h_val[i] + dx;
      const double d_z = d_corrected * sigmoid(-z);
      g_eos[0] += d_z * (p.coverage - params.eos_shift);
      g_eos[1] -= d_z * params.eos_gain;
    }
  }
  backward_tape(params.entropy_net, g_tape, d_g * g_sig * (1.0 - g_sig), g_entropy);
  return loss;
}

class NonFiniteLoss : public DataError {
 public:
  NonFiniteLoss(std::size_t index, const std::string& msg) : DataError(msg), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

LossAndGradient prepared_loss(const CalibratorParams& params, std::span<const Prepared> data,
                              bool with_gradient) {
  const std::size_t chunks = chunk_count(data.size(), kChunk);
  const std::size_t np = CalibratorParams::kParamCount;
  std::vector<double> chunk_loss(chunks, 0.0);
  std::vector<double> chunk_grad(with_gradient ? chunks * np : 0, 0.0);
  parallel_for_chunks(data.size(), kChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
    std::span<double> g = with_gradient ? std::span<double>(chunk_grad).subspan(c * np, np)
                                        : std::span<double>();
    for (std::size_t i = b; i < e; ++i) {
      const double l = record_loss(params, data[i], g);
      if (!std::isfinite(l)) {
        throw NonFiniteLoss(i, "non-finite loss at record " + std::to_string(i));
      }
      chunk_loss[c] += l;
    }
  });
  LossAndGradient out;
  out.gradient.assign(with_gradient ? np : 0, 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += chunk_loss[c];
    if (with_gradient) {
      for (std::size_t k = 0; k < np; ++k) out.gradient[k] += chunk_grad[c * np + k];
    }
  }
  const double n = static_cast<double>(data.size());
  out.loss = total / n;
  for (double& g : out.gradient) g /= n;
  return out;
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::vector<double> softmax_nonzero(std::span<const double> probs,
                                    const std::vector<double>& scaled,
                                    const std::vector<std::size_t>& index) {
  std::vector<double> out(probs.size(), 0.0);
  const double lse = log_sum_exp(scaled);
  double total = 0.0;
  for (std::size_t k = 0; k < index.size(); ++k) {
    out[index[k]] = std::exp(scaled[k] - lse);
    total += out[index[k]];
  }
  for (double& q : out) q /= total;
  return out;
}

}  // namespace

double FeedForwardNet::forward(double x) const {
  NetTape tape;
  return forward_tape(*this, x, tape);
}

void FeedForwardNet::write_to(std::span<double> out) const {
  std::size_t k = 0;
  for (double w : in_weight) out[k++] = w;
  for (double b : in_bias) out[k++] = b;
  for (const auto& row : hidden_weight)
    for (double w : row) out[k++] = w;
  for (double b : hidden_bias) out[k++] = b;
  for (double w : out_weight) out[k++] = w;
  out[k] = out_bias;
}

FeedForwardNet FeedForwardNet::read_from(std::span<const double> in) {
  FeedForwardNet net;
  std::size_t k = 0;
  for (double& w : net.in_weight) w = in[k++];
  for (double& b : net.in_bias) b = in[k++];
  for (auto& row : net.hidden_weight)
    for (double& w : row) w = in[k++];
  for (double& b : net.hidden_bias) b = in[k++];
  for (double& w : net.out_weight) w = in[k++];
  net.out_bias = in[k];
  return net;
}

std::vector<double> CalibratorParams::flatten() const {
  std::vector<double> flat(kParamCount);
  flat[0] = eos_gain;
  flat[1] = eos_shift;
  entropy_net.write_to(std::span<double>(flat).subspan(2, FeedForwardNet::kParamCount));
  logit_net.write_to(
      std::span<double>(flat).subspan(2 + FeedForwardNet::kParamCount, FeedForwardNet::kParamCount));
  return flat;
}

CalibratorParams CalibratorParams::unflatten(std::span<const double> flat, bool plus_one) {
  if (flat.size() != kParamCount) throw std::invalid_argument("wrong calibrator parameter count");
  CalibratorParams p;
  p.eos_gain = flat[0];
  p.eos_shift = flat[1];
  p.entropy_net = FeedForwardNet::read_from(flat.subspan(2, FeedForwardNet::kParamCount));
  p.logit_net = FeedForwardNet::read_from(
      flat.subspan(2 + FeedForwardNet::kParamCount, FeedForwardNet::kParamCount));
  p.plus_one = plus_one;
  return p;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be positive");
  if (!(tolerance > 0.0)) throw std::invalid_argument("tolerance must be positive");
  if (patience < 1) throw std::invalid_argument("patience must be positive");
  if (!(init_scale >= 0.0)) throw std::invalid_argument("init_scale must be non-negative");
}

double log_sigmoid(double z) {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

std::vector<double> eos_correction(std::span<const double> logits, double coverage, int eos_id,
                                   const CalibratorParams& params) {
  std::vector<double> out(logits.begin(), logits.end());
  if (eos_id >= 0 && static_cast<std::size_t>(eos_id) < out.size()) {
    out[static_cast<std::size_t>(eos_id)] +=
        log_sigmoid(params.eos_gain * (coverage - params.eos_shift));
  }
  return out;
}

double inverse_temperature(double entropy, double corrected_logit,
                           const CalibratorParams& params) {
  return squash(params.entropy_net.forward(entropy), params.plus_one) *
         squash(params.logit_net.forward(corrected_logit), params.plus_one);
}

std::vector<double> apply_to_distribution(std::span<const double> probs, int eos_id,
                                          const StepFeatures& features,
                                          const CalibratorParams& params) {
  const double correction = log_sigmoid(params.eos_gain * (features.coverage - params.eos_shift));
  const double g = squash(params.entropy_net.forward(features.entropy), params.plus_one);
  std::vector<double> scaled;
  std::vector<std::size_t> index;
  for (std::size_t y = 0; y < probs.size(); ++y) {
    if (probs[y] <= 0.0) continue;
    const double l = std::log(probs[y]) + (static_cast<int>(y) == eos_id ? correction : 0.0);
    scaled.push_back(l * g * squash(params.logit_net.forward(l), params.plus_one));
    index.push_back(y);
  }
  if (index.empty()) throw DataError("recalibration of an all-zero distribution");
  return softmax_nonzero(probs, scaled, index);
}

namespace {
StepFeatures features_of(const TokenRecord& r, const FeatureConfig& cfg) {
  if (r.features) return *r.features;
  if (r.attention && r.cum_attention) {
    return {attention_entropy(*r.attention), coverage(*r.cum_attention, cfg.coverage_threshold)};
  }
  throw DataError("record lacks features at " + where(r));
}
}  // namespace

std::vector<double> apply(const TokenRecord& record, const CalibratorParams& params,
                          const FeatureConfig& cfg) {
  const StepFeatures f = features_of(record, cfg);
  return apply_to_distribution(densify(record), record.eos_id, f, params);
}

LossAndGradient loss_and_gradient(const CalibratorParams& params,
                                  std::span<const TokenRecord> records) {
  if (records.empty()) throw DataError("gradient: no records");
  const auto data = prepare_all(records, true);
  return prepared_loss(params, data, true);
}

double recalibrated_nll(const CalibratorParams& params, std::span<const TokenRecord> records) {
  if (records.empty()) throw DataError("nll: no records");
  const auto data = prepare_all(records, true);
  return prepared_loss(params, data, false).loss;
}

CalibratorParams initial_params(const TrainConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> flat(CalibratorParams::kParamCount);
  flat[0] = 1.0;
  flat[1] = 0.35;
  for (std::size_t k = 2; k < flat.size(); ++k) {
    flat[k] = (2.0 * uniform01(rng) - 1.0) * cfg.init_scale;
  }
  return CalibratorParams::unflatten(flat, cfg.plus_one);
}

FitReport fit(std::span<const TokenRecord> records, const TrainConfig& cfg) {
  cfg.validate();
  if (records.empty()) throw DataError("fit: no records");
  const auto data = prepare_all(records, true);

  CalibratorParams params = initial_params(cfg);
  std::vector<double> flat = params.flatten();
  std::vector<double> m(flat.size(), 0.0);  // Adam moments
  std::vector<double> v(flat.size(), 0.0);
  FitReport report;
  report.params = params;

  double best = std::numeric_limits<double>::infinity();
  double last_checkpoint = best;
  int since_checkpoint = 0;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    LossAndGradient lg;
    try {
      lg = prepared_loss(params, data, true);
    } catch (const NonFiniteLoss& e) {
      const auto& r = records[e.index()];
      throw DataError("fit: non-finite loss at iteration " + std::to_string(epoch) + ", " +
                      where(r));
    }
    if (epoch == 0) report.initial_nll = lg.loss;
    if (lg.loss < best) {
      best = lg.loss;
      report.params = params;
    }
    if (++since_checkpoint >= cfg.patience) {
      if (last_checkpoint - best < cfg.tolerance) break;
      last_checkpoint = best;
      since_checkpoint = 0;
    }
    if (cfg.optimizer == Optimizer::kAdam) {
      constexpr double kBeta1 = 0.9;
      constexpr double kBeta2 = 0.999;
      constexpr double kEps = 1e-8;
      const double c1 = 1.0 - std::pow(kBeta1, epoch + 1);
      const double c2 = 1.0 - std::pow(kBeta2, epoch + 1);
      for (std::size_t k = 0; k < flat.size(); ++k) {
        m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * lg.gradient[k];
        v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * lg.gradient[k] * lg.gradient[k];
        flat[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + kEps);
      }
    } else {
      for (std::size_t k = 0; k < flat.size(); ++k) flat[k] -= cfg.learning_rate * lg.gradient[k];
    }
    params = CalibratorParams::unflatten(flat, cfg.plus_one);
  }
  if (epoch == cfg.max_epochs) {
    // Score the last update too.
    const double l = prepared_loss(params, data, false).loss;
    if (l < best) {
      best = l;
      report.params = params;
    }
  }
  report.final_nll = best;
  report.epochs = epoch;
  return report;
}

std::vector<double> apply_single_temperature(std::span<const double> probs, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  std::vector<double> scaled;
  std::vector<std::size_t> index;
  for (std::size_t y = 0; y < probs.size(); ++y) {
    if (probs[y] <= 0.0) continue;
    scaled.push_back(std::log(probs[y]) / temperature);
    index.push_back(y);
  }
  if (index.empty()) throw DataError("temperature scaling of an all-zero distribution");
  return softmax_nonzero(probs, scaled, index);
}

std::vector<double> apply_single_temperature(const TokenRecord& record, double temperature) {
  return apply_single_temperature(densify(record), temperature);
}

namespace {

struct TemperatureObjective {
  std::vector<Prepared> data;

  // Mean NLL at inverse temperature beta, with first and second derivatives.
  void eval(double beta, double& f, double* df, double* d2f) const {
    double sf = 0.0, sd = 0.0, sd2 = 0.0;
    std::vector<double> s;
    for (const auto& p : data) {
      s.resize(p.logits.size());
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = beta * p.logits[i];
      const double lse = log_sum_exp(s, p.counts);
      const double gold = p.logits[static_cast<std::size_t>(p.gold)];
      sf += lse - beta * gold;
      if (df) {
        double mean = 0.0, second = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
          const double q = p.counts[i] * std::exp(s[i] - lse);
          mean += q * p.logits[i];
          second += q * p.logits[i] * p.logits[i];
        }
        sd += mean - gold;
        sd2 += std::max(0.0, second - mean * mean);
      }
    }
    const double n = static_cast<double>(data.size());
    f = sf / n;
    if (df) *df = sd / n;
    if (d2f) *d2f = sd2 / n;
  }

  double at_temperature(double t) const {
    double f;
    eval(1.0 / t, f, nullptr, nullptr);
    return f;
  }
};

}  // namespace

double single_temperature_nll(std::span<const TokenRecord> records, double temperature) {
  if (records.empty()) throw DataError("single temperature: no records");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  TemperatureObjective obj{prepare_all(records, false)};
  return obj.at_temperature(temperature);
}

double fit_single_temperature(std::span<const TokenRecord> records) {
  if (records.empty()) throw DataError("single temperature: no records");
  TemperatureObjective obj{prepare_all(records, false)};
  auto f_log = [&](double u) { return obj.at_temperature(std::exp(u)); };

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(kMinTemperature);
  double b = std::log(kMaxTemperature);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f_log(c);
  double fd = f_log(d);
  while (b - a > 1e-10) {
    // Ties move towards the lower end, so a flat objective returns the minimum T.
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f_log(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f_log(d);
    }
  }
  double t_best = std::exp(0.5 * (a + b));
  double f_best = obj.at_temperature(t_best);

  // Newton refinement on beta = 1/T.
  double beta = 1.0 / t_best;
  for (int it = 0; it < 20; ++it) {
    double f, df, d2f;
    obj.eval(beta, f, &df, &d2f);
    if (!(d2f > 0.0)) break;
    const double next = beta - df / d2f;
    if (!(next >= 1.0 / kMaxTemperature && next <= 1.0 / kMinTemperature)) break;
    double f_next;
    obj.eval(next, f_next, nullptr, nullptr);
    if (!(f_next < f_best)) break;
    const bool done = std::fabs(next - beta) <= 1e-15 * beta;
    beta = next;
    f_best = f_next;
    t_best = 1.0 / beta;
    if (done) break;
  }

  // Range ends win ties at the low end only, as in the search above.
  if (const double f = obj.at_temperature(kMinTemperature); f <= f_best) {
    t_best = kMinTemperature;
    f_best = f;
  }
  if (obj.at_temperature(kMaxTemperature) < f_best) t_best = kMaxTemperature;
  return t_best;
}

std::vector<double> apply_recalibrator(const TokenRecord& record, const Recalibrator& model,
                                       const FeatureConfig& cfg) {
  if (const auto* single = std::get_if<SingleTemperature>(&model)) {
    return apply_single_temperature(record, single->temperature);
  }
  return apply(record, std::get<CalibratorParams>(model), cfg);
}

namespace {

using ordered_json = nlohmann::ordered_json;
using json = nlohmann::json;

ordered_json net_to_json(const FeedForwardNet& net) {
  ordered_json in_w = ordered_json::array();
  for (double w : net.in_weight) in_w.push_back(ordered_json::array({w}));
  ordered_json hid_w = ordered_json::array();
  for (const auto& row : net.hidden_weight) hid_w.push_back(row);
  ordered_json out_w = ordered_json::array({net.out_weight});
  return ordered_json{
      {"weights", ordered_json::array({in_w, hid_w, out_w})},
      {"biases", ordered_json::array({net.in_bias, net.hidden_bias, ordered_json::array({net.out_bias})})}};
}

double number_at(const json& j, const std::string& what) {
  if (!j.is_number()) throw DataError("params: expected a number at " + what);
  return j.get<double>();
}

const json& array_of(const json& j, std::size_t n, const std::string& what) {
  if (!j.is_array() || j.size() != n) {
    throw DataError("params: expected an array of " + std::to_string(n) + " at " + what);
  }
  return j;
}

FeedForwardNet net_from_json(const json& j, const std::string& name) {
  if (!j.is_object() || !j.contains("weights") || !j.contains("biases")) {
    throw DataError("params: " + name + " needs weights and biases");
  }
  const json& w = array_of(j["weights"], 3, name + ".weights");
  const json& b = array_of(j["biases"], 3, name + ".biases");
  FeedForwardNet net;
  array_of(w[0], kH, name + ".weights[0]");
  array_of(w[1], kH, name + ".weights[1]");
  array_of(w[2], 1, name + ".weights[2]");
  array_of(w[2][0], kH, name + ".weights[2][0]");
  array_of(b[0], kH, name + ".biases[0]");
  array_of(b[1], kH, name + ".biases[1]");
  array_of(b[2], 1, name + ".biases[2]");
  for (int i = 0; i < kH; ++i) {
    net.in_weight[i] = number_at(array_of(w[0][i], 1, name + ".weights[0][i]")[0], name);
    net.in_bias[i] = number_at(b[0][i], name);
    array_of(w[1][i], kH, name + ".weights[1][i]");
    for (int k = 0; k < kH; ++k) net.hidden_weight[i][k] = number_at(w[1][i][k], name);
    net.hidden_bias[i] = number_at(b[1][i], name);
    net.out_weight[i] = number_at(w[2][0][i], name);
  }
  net.out_bias = number_at(b[2][0], name);
  return net;
}

}  // namespace

std::string params_to_json(const Recalibrator& model) {
  ordered_json j;
  j["version"] = kParamsVersion;
  if (const auto* single = std::get_if<SingleTemperature>(&model)) {
    j["mode"] = "single";
    j["temperature"] = single->temperature;
  } else {
    const auto& p = std::get<CalibratorParams>(model);
    j["mode"] = "variable";
    j["w1"] = p.eos_gain;
    j["w2"] = p.eos_shift;
    j["plus_one"] = p.plus_one;
    j["g_net"] = net_to_json(p.entropy_net);
    j["h_net"] = net_to_json(p.logit_net);
  }
  return j.dump(2) + "\n";
}

Recalibrator params_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("params: malformed JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("version", std::string()) != kParamsVersion) {
    throw DataError(std::string("params: missing or unsupported version (expected ") +
                    kParamsVersion + ")");
  }
  const std::string mode = j.value("mode", std::string("variable"));
  if (mode == "single") {
    const double t = number_at(j.value("temperature", json()), "temperature");
    if (!(t > 0.0) || !std::isfinite(t)) throw DataError("params: temperature must be positive");
    return SingleTemperature{t};
  }
  if (mode != "variable") throw DataError("params: unknown mode " + mode);
  CalibratorParams p;
  p.eos_gain = number_at(j.value("w1", json()), "w1");
  p.eos_shift = number_at(j.value("w2", json()), "w2");
  if (!j.contains("plus_one") || !j["plus_one"].is_boolean()) {
    throw DataError("params: plus_one must be a boolean");
  }
  p.plus_one = j["plus_one"].get<bool>();
  p.entropy_net = net_from_json(j.value("g_net", json()), "g_net");
  p.logit_net = net_from_json(j.value("h_net", json()), "h_net");
  for (double x : p.flatten()) {
    if (!std::isfinite(x)) throw DataError("params: non-finite weight");
  }
  return p;
}

void save_params(const std::string& path, const Recalibrator& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write params file " + path);
  out << params_to_json(model);
}

Recalibrator load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open params file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return params_from_json(buf.str());
}

}  // namespace seqcal
