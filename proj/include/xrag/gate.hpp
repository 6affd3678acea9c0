#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xrag/errors.hpp"
#include "xrag/rng.hpp"
#include "xrag/tensor.hpp"

namespace xrag {

enum class GateMode { Threshold, Sample };

inline GateMode gate_mode_from(const std::string& s) {
  if (s == "threshold") return GateMode::Threshold;
  if (s == "sample") return GateMode::Sample;
  throw ConfigError("gate mode must be 'threshold' or 'sample', got '" + s +
                    "'");
}

struct GateDecision {
  double p_ret = 0.0;
  int z_ret = 0;
  GateMode mode = GateMode::Threshold;
  double draw = -1.0;  // the uniform variate, only meaningful when sampled
};

// Mean over sequence positions, as a graph op so gradients can flow.
inline Tensor pool_rows(const Tensor& h, Tape* tape = nullptr) {
  if (h.rows() < 1) throw ContractError("pooling an empty sequence");
  Tensor ones = Tensor::filled(1, h.rows(), 1.0 / h.rows());
  return matmul(ones, h, tape);
}

// The retrieve-or-not classifier: p_ret = sigmoid(w . h_q + b).
class RetrievalGate {
 public:
  RetrievalGate(int d_model, double threshold)
      : w_(Tensor::param(d_model, 1, std::vector<double>(d_model, 0.0))),
        b_(Tensor::param(1, 1, {0.0})),
        threshold_(threshold) {
    if (threshold < 0.0 || threshold > 1.0)
      throw ConfigError("gate threshold must lie in [0, 1]");
  }

  // Probability node for training graphs; h_q is a 1 x d row.
  Tensor score(const Tensor& h_q, Tape* tape = nullptr) const {
    return sigmoid(add(matmul(h_q, w_, tape), b_, tape), tape);
  }

  double score_value(const std::vector<double>& h_q) const {
    if (static_cast<int>(h_q.size()) != w_.rows())
      throw ShapeError("gate input width " + std::to_string(h_q.size()) +
                       ", expected " + std::to_string(w_.rows()));
    double u = b_.item();
    for (std::size_t i = 0; i < h_q.size(); ++i)
      u += h_q[i] * w_.at(static_cast<int>(i), 0);
    return 1.0 / (1.0 + std::exp(-u));
  }

  GateDecision decide(double p_ret, GateMode mode, Rng* rng = nullptr) const {
    if (p_ret < 0.0 || p_ret > 1.0)
      throw ContractError("p_ret outside [0, 1]");
    GateDecision d;
    d.p_ret = p_ret;
    d.mode = mode;
    if (mode == GateMode::Threshold) {
      d.z_ret = p_ret >= threshold_ ? 1 : 0;
    } else {
      if (!rng)
        throw ContractError("sample-mode decision needs a generator");
      d.draw = rng->next_double();
      d.z_ret = d.draw < p_ret ? 1 : 0;
    }
    return d;
  }

  double threshold() const { return threshold_; }
  Tensor weight() const { return w_; }
  Tensor bias() const { return b_; }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    return {{"gate.w", w_}, {"gate.b", b_}};
  }

  void zero_grad() const {
    for (auto& [name, t] : named_params()) t.zero_grad();
  }

 private:
  Tensor w_, b_;
  double threshold_;
};

// Straight-through surrogate outside a tape: the gradient w.r.t. p_ret is
// the downstream gradient w.r.t. z_ret, unchanged. Only sampled decisions
// are trainable; a thresholded decision has no surrogate.
inline double ste_gradient(const GateDecision& decision,
                           double downstream_grad) {
  if (decision.mode != GateMode::Sample)
    throw ContractError(
        "straight-through gradient requires a sample-mode decision");
  return downstream_grad;
}

// ---------------------------------------------------------------------------
// REINFORCE estimator for the gate: the decision is an action, the adjusted
// reward is r' = reward - lambda_ret * z, and the score-function gradient
// w.r.t. the gate logit is (r' - baseline) * (z - p). The baseline is an
// exponential moving average of r', read before each update (decay 0.99).
// ---------------------------------------------------------------------------

struct ReinforceBaseline {
  double value = 0.0;
  static constexpr double kDecay = 0.99;
  void update(double adjusted_reward) {
    value = kDecay * value + (1.0 - kDecay) * adjusted_reward;
  }
};

struct GateEpisode {
  int z_ret = 0;
  double p_ret = 0.0;
  double reward = 0.0;
  std::vector<double> h_q;
};

struct GateGradient {
  std::vector<double> w;
  double b = 0.0;
};

// Accumulated reward-ascent gradient over the episodes, in order; the
// baseline state advances one EMA step per episode. p is clamped away from
// {0,1} so log-probabilities stay finite.
inline GateGradient reinforce_update(const std::vector<GateEpisode>& episodes,
                                     ReinforceBaseline& baseline,
                                     double lambda_ret) {
  if (episodes.empty())
    throw ContractError("reinforce update with no episodes");
  GateGradient g;
  g.w.assign(episodes.front().h_q.size(), 0.0);
  for (const auto& ep : episodes) {
    if (ep.h_q.size() != g.w.size())
      throw ShapeError("episode pooled-query widths differ");
    const double p = std::clamp(ep.p_ret, 1e-6, 1.0 - 1e-6);
    const double adjusted = ep.reward - lambda_ret * ep.z_ret;
    const double advantage = adjusted - baseline.value;
    const double dlogit = advantage * (ep.z_ret - p);
    g.b += dlogit;
    for (std::size_t i = 0; i < g.w.size(); ++i)
      g.w[i] += dlogit * ep.h_q[i];
    baseline.update(adjusted);
  }
  return g;
}

}  // namespace xrag
