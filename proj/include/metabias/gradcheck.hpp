#pragma once

// Central finite-difference checking of first- and second-order gradients.
// The numeric side re-evaluates the function from perturbed inputs with no
// tape attached, so it is independent of the reverse-mode path it verifies.

#include <functional>
#include <string>
#include <vector>

#include "metabias/tensor.hpp"

namespace metabias {

// Builds a scalar from the given inputs using tape ops. The harness decides
// whether the inputs are watched on a tape or plain values.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline Tensor perturbed(const Tensor& t, int64_t index, double delta) {
  std::vector<double> d(t.data().begin(), t.data().end());
  d[static_cast<size_t>(index)] += delta;
  return Tensor(t.shape(), std::move(d));
}

inline double rel_err(const std::vector<Tensor>& analytic,
                      const std::vector<Tensor>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    for (int64_t j = 0; j < analytic[i].numel(); ++j) {
      double a = analytic[i].value(j), n = numeric[i].value(j);
      diff = std::max(diff, std::abs(a - n));
      scale = std::max({scale, std::abs(a), std::abs(n)});
    }
  }
  if (scale < 1e-7) return diff;  // gradient is genuinely ~zero
  return diff / scale;
}

}  // namespace detail

// First order: reverse-mode gradient vs central differences of f itself.
// With max_coords > 0 the comparison samples that many coordinates per
// input (deterministically) instead of sweeping them all.
inline CheckResult check_gradient(std::string name, const ScalarFn& f,
                                  const std::vector<Tensor>& inputs,
                                  double h = 1e-5, double tol = 1e-4,
                                  int64_t max_coords = 0) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> watched;
    watched.reserve(inputs.size());
    for (const Tensor& x : inputs) watched.push_back(tape.watch(x));
    Tensor y = f(watched);
    analytic = grad(y, watched);
  }

  double diff = 0.0, scale = 0.0;
  Rng coord_rng(derive_seed(0x9d2c5680, "gradcheck.coords"));
  for (size_t i = 0; i < inputs.size(); ++i) {
    std::vector<int64_t> coords;
    if (max_coords > 0 && inputs[i].numel() > max_coords) {
      coords = sample_without_replacement(coord_rng, inputs[i].numel(),
                                          max_coords);
    } else {
      coords.resize(static_cast<size_t>(inputs[i].numel()));
      std::iota(coords.begin(), coords.end(), 0);
    }
    for (int64_t j : coords) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i] = detail::perturbed(inputs[i], j, h);
      minus[i] = detail::perturbed(inputs[i], j, -h);
      double fp = f(plus).scalar_value();
      double fm = f(minus).scalar_value();
      double n = (fp - fm) / (2.0 * h);
      double a = analytic[i].value(j);
      diff = std::max(diff, std::abs(a - n));
      scale = std::max({scale, std::abs(a), std::abs(n)});
    }
  }

  CheckResult r{std::move(name), scale < 1e-7 ? diff : diff / scale, tol,
                false};
  r.pass = r.max_rel_err < tol;
  return r;
}

namespace detail {

// grad f at `inputs`, computed on a throwaway tape (plain values out).
inline std::vector<Tensor> eval_gradient(const ScalarFn& f,
                                         const std::vector<Tensor>& inputs) {
  Tape tape;
  Tape::Scope scope(tape);
  std::vector<Tensor> watched;
  watched.reserve(inputs.size());
  for (const Tensor& x : inputs) watched.push_back(tape.watch(x));
  Tensor y = f(watched);
  return grad(y, watched);
}

}  // namespace detail

// Second order: differentiates s = sum_i <grad_i f, v_i> (built with
// create_graph) and compares against central differences of grad f.
inline CheckResult check_second_order(std::string name, const ScalarFn& f,
                                      const std::vector<Tensor>& inputs,
                                      uint64_t direction_seed, double h = 1e-5,
                                      double tol = 1e-3) {
  std::vector<Tensor> dirs;
  {
    Rng rng(derive_seed(direction_seed, "gradcheck.dir"));
    for (const Tensor& x : inputs) {
      std::vector<double> v(static_cast<size_t>(x.numel()));
      for (double& e : v) e = uniform_real(rng, -1.0, 1.0);
      dirs.emplace_back(x.shape(), std::move(v));
    }
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> watched;
    for (const Tensor& x : inputs) watched.push_back(tape.watch(x));
    Tensor y = f(watched);
    std::vector<Tensor> g = grad(y, watched, /*create_graph=*/true);
    Tensor s = Tensor::scalar(0.0);
    for (size_t i = 0; i < g.size(); ++i)
      s = add(s, sum_all(mul(g[i], dirs[i])));
    if (s.tracked_on(&tape)) {
      analytic = grad(s, watched);
    } else {
      // the gradient is constant in the inputs (linear function): the
      // second derivative is structurally zero
      for (const Tensor& x : inputs) analytic.push_back(Tensor::zeros(x.shape()));
    }
  }

  std::vector<Tensor> numeric;
  for (size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> out(static_cast<size_t>(inputs[i].numel()));
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i] = detail::perturbed(inputs[i], j, h);
      minus[i] = detail::perturbed(inputs[i], j, -h);
      auto gp = detail::eval_gradient(f, plus);
      auto gm = detail::eval_gradient(f, minus);
      double sp = 0.0, sm = 0.0;
      for (size_t k = 0; k < gp.size(); ++k)
        for (int64_t e = 0; e < gp[k].numel(); ++e) {
          sp += gp[k].value(e) * dirs[k].value(e);
          sm += gm[k].value(e) * dirs[k].value(e);
        }
      out[static_cast<size_t>(j)] = (sp - sm) / (2.0 * h);
    }
    numeric.emplace_back(inputs[i].shape(), std::move(out));
  }

  CheckResult r{std::move(name), detail::rel_err(analytic, numeric), tol,
                false};
  r.pass = r.max_rel_err < tol;
  return r;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0,
                            double hi = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = uniform_real(rng, lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

}  // namespace metabias
