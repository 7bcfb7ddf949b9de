#pragma once

// Inner-loop Meta-SGD update and the AdamW outer/baseline optimizer with
// decoupled weight decay.

#include <functional>
#include <vector>

#include "metabias/nn.hpp"
#include "metabias/tensor.hpp"

namespace metabias {

struct AdamWConfig {
  double lr = 0.001;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment state over a flat parameter vector.
class AdamWState {
 public:
  AdamWState() = default;
  AdamWState(AdamWConfig cfg, size_t n)
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  const AdamWConfig& config() const { return cfg_; }
  int64_t steps() const { return t_; }
  std::span<const double> m() const { return m_; }
  std::span<const double> v() const { return v_; }

  // Decoupled update: decay acts on the parameter directly, the moment
  // estimates see only the gradient.
  void step(std::vector<double>& params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ShapeError("adamw: parameter/gradient size mismatch (" +
                       std::to_string(params.size()) + ", " +
                       std::to_string(grads.size()) + ", state " +
                       std::to_string(m_.size()) + ")");
    for (double g : grads)
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params[i] -= cfg_.lr * cfg_.weight_decay * params[i];
      params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  void restore(int64_t t, std::vector<double> m, std::vector<double> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  int64_t t_ = 0;
};

// One AdamW step at the ParamSet level (used by the R-k baselines).
inline ParamSet adamw_step(AdamWState& state, const ParamSet& params,
                           const std::vector<Tensor>& grads) {
  if (grads.size() != params.size())
    throw ShapeError("adamw_step: " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(params.size()) +
                     " parameters");
  std::vector<double> flat = params.flatten_values();
  std::vector<double> gflat;
  gflat.reserve(flat.size());
  for (size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.items()[i].second.shape())
      throw ShapeError("adamw_step: gradient shape " +
                       shape_str(grads[i].shape()) + " for parameter " +
                       params.items()[i].first + " " +
                       shape_str(params.items()[i].second.shape()));
    gflat.insert(gflat.end(), grads[i].data().begin(), grads[i].data().end());
  }
  state.step(flat, gflat);
  return params.unflatten(flat);
}

// Per-parameter learning rates, same shapes as theta, elementwise uniform
// in [lo, hi). Sign is unconstrained thereafter: the outer loop may learn
// descent or ascent directions.
inline ParamSet make_alpha(const ParamSet& theta, uint64_t seed,
                           double lo = 0.005, double hi = 0.1) {
  Rng rng(derive_seed(seed, "alpha_init"));
  ParamSet alpha;
  for (const auto& [name, t] : theta.items()) {
    std::vector<double> v(static_cast<size_t>(t.numel()));
    for (double& x : v) x = uniform_real(rng, lo, hi);
    alpha.add(name, Tensor(t.shape(), std::move(v)));
  }
  return alpha;
}

// One elementwise Meta-SGD step: adapted = theta - alpha (*) grad(loss).
// theta/alpha must be tracked leaves when create_graph is set; the result
// then stays differentiable with respect to both.
inline ParamSet inner_adapt(const ParamSet& theta, const ParamSet& alpha,
                            const std::function<Tensor(const ParamSet&)>&
                                support_loss,
                            bool create_graph) {
  if (!theta.same_structure(alpha))
    throw ShapeError("inner_adapt: alpha does not mirror theta");
  Tensor loss = support_loss(theta);
  if (!loss.all_finite())
    throw NumericError("inner_adapt: non-finite support loss");
  std::vector<Tensor> tensors;
  tensors.reserve(theta.size());
  for (const auto& [name, t] : theta.items()) tensors.push_back(t);
  std::vector<Tensor> grads = grad(loss, tensors, create_graph);
  ParamSet adapted;
  for (size_t i = 0; i < tensors.size(); ++i) {
    Tensor g = create_graph ? grads[i] : grads[i].detached();
    adapted.add(theta.items()[i].first,
                sub(tensors[i], mul(alpha.items()[i].second, g)));
  }
  return adapted;
}

}  // namespace metabias
