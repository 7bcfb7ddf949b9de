#include <cmath>

#include "doctest.h"
#include "metabias/gradcheck.hpp"
#include "metabias/optim.hpp"

using namespace metabias;

namespace {

ParamSet scalar_params(double theta) {
  ParamSet p;
  p.add("w", Tensor::scalar(theta));
  return p;
}

}  // namespace

TEST_CASE("inner_adapt applies theta - alpha * grad exactly") {
  // loss = 2 * theta, so grad = 2
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet theta = scalar_params(1.0).watched(tape);
  ParamSet alpha = scalar_params(0.1);
  ParamSet adapted = inner_adapt(
      theta, alpha,
      [](const ParamSet& p) { return mul_scalar(p.at("w"), 2.0); },
      /*create_graph=*/false);
  CHECK(adapted.at("w").scalar_value() == doctest::Approx(0.8));
}

TEST_CASE("inner_adapt with zero alpha is the identity") {
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet theta = scalar_params(0.37).watched(tape);
  ParamSet alpha = scalar_params(0.0);
  ParamSet adapted = inner_adapt(
      theta, alpha,
      [](const ParamSet& p) { return mul(p.at("w"), p.at("w")); }, false);
  CHECK(adapted.at("w").scalar_value() == doctest::Approx(0.37));
}

TEST_CASE("negative alpha ascends the loss") {
  // loss = theta^2 at theta=1: grad 2, alpha=-0.1 moves uphill
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet theta = scalar_params(1.0).watched(tape);
  ParamSet alpha = scalar_params(-0.1);
  auto loss_fn = [](const ParamSet& p) { return mul(p.at("w"), p.at("w")); };
  ParamSet adapted = inner_adapt(theta, alpha, loss_fn, false);
  double before = 1.0;
  double after = adapted.at("w").scalar_value();
  CHECK(after == doctest::Approx(1.2));
  CHECK(after * after > before);
}

TEST_CASE("inner_adapt flags non-finite losses") {
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet theta = scalar_params(0.0).watched(tape);
  ParamSet alpha = scalar_params(0.1);
  CHECK_THROWS_AS(
      inner_adapt(theta, alpha,
                  [](const ParamSet& p) {
                    return pow_scalar(p.at("w"), -1.0);  // 1/0
                  },
                  false),
      NumericError);
}

TEST_CASE("adamw leaves parameters alone with zero grads and zero decay") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamWState state(cfg, 3);
  std::vector<double> params{1.0, -2.0, 0.5};
  std::vector<double> grads{0.0, 0.0, 0.0};
  auto before = params;
  for (int i = 0; i < 5; ++i) state.step(params, grads);
  CHECK(params == before);
}

TEST_CASE("adamw first step magnitude") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamWState state(cfg, 1);
  std::vector<double> params{1.0};
  std::vector<double> grads{1.0};
  state.step(params, grads);
  CHECK(params[0] == doctest::Approx(0.999).epsilon(1e-9));
}

TEST_CASE("decoupled decay shrinks zero-gradient parameters geometrically") {
  AdamWConfig cfg;  // lr 0.001, wd 0.01
  AdamWState state(cfg, 1);
  std::vector<double> params{2.0};
  std::vector<double> grads{0.0};
  double expected = 2.0;
  for (int i = 0; i < 10; ++i) {
    state.step(params, grads);
    expected *= 1.0 - cfg.lr * cfg.weight_decay;
    CHECK(params[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("adamw matches an independent reference recurrence for 10 steps") {
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.02;
  AdamWState state(cfg, 1);
  std::vector<double> params{0.8};

  // hand-coded reference, written directly from the update equations
  double ref = 0.8, m = 0, v = 0;
  Rng rng(60);
  for (int t = 1; t <= 10; ++t) {
    double g = uniform_real(rng, -1.0, 1.0);
    std::vector<double> grads{g};
    state.step(params, grads);

    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.999, t));
    ref = ref - cfg.lr * cfg.weight_decay * ref -
          cfg.lr * mhat / (std::sqrt(vhat) + 1e-8);
    REQUIRE(params[0] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("adamw rejects non-finite gradients") {
  AdamWState state(AdamWConfig{}, 1);
  std::vector<double> params{1.0};
  std::vector<double> grads{std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(state.step(params, grads), NumericError);
}

TEST_CASE("meta-gradient for alpha matches finite differences") {
  // scalar model: support (x=2,y=1), query (x=3,y=2)
  auto objective = [](const std::vector<Tensor>& in) -> Tensor {
    std::optional<Tape> own;
    std::optional<Tape::Scope> scope;
    std::vector<Tensor> vars = in;
    if (Tape::active() == nullptr) {
      own.emplace();
      scope.emplace(*own);
      for (Tensor& t : vars) t = Tape::active()->watch(t);
    }
    ParamSet theta;
    theta.add("w", vars[0]);
    ParamSet alpha;
    alpha.add("w", vars[1]);
    ParamSet adapted = inner_adapt(
        theta, alpha,
        [](const ParamSet& p) {
          return mse_loss(mul_scalar(p.at("w"), 2.0), Tensor::scalar(1.0));
        },
        /*create_graph=*/true);
    return mse_loss(mul_scalar(adapted.at("w"), 3.0), Tensor::scalar(2.0));
  };
  auto res = check_gradient("alpha-meta", objective,
                            {Tensor::scalar(0.6), Tensor::scalar(0.07)},
                            1e-5, 1e-4);
  INFO("rel err ", res.max_rel_err);
  CHECK(res.pass);
}

TEST_CASE("scalar meta-objective converges to the closed-form minimizer") {
  // Single task: support y = 2 x at x = 2, query y = 2 x at x = 3. The
  // meta-objective is minimized when the adapted parameter hits 2 exactly,
  // making the query loss zero.
  double theta = -0.5, alpha = 0.05;
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  AdamWState state(cfg, 2);

  double final_query_loss = 1.0, adapted_value = 0.0;
  for (int step = 0; step < 2000; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor wt = tape.watch(Tensor::scalar(theta));
    Tensor wa = tape.watch(Tensor::scalar(alpha));
    ParamSet th, al;
    th.add("w", wt);
    al.add("w", wa);
    ParamSet adapted = inner_adapt(
        th, al,
        [](const ParamSet& p) {
          return mse_loss(mul_scalar(p.at("w"), 2.0), Tensor::scalar(4.0));
        },
        /*create_graph=*/true);
    Tensor query = mse_loss(mul_scalar(adapted.at("w"), 3.0),
                            Tensor::scalar(6.0));
    std::vector<Tensor> wrt{wt, wa};
    auto g = grad(query, wrt);
    std::vector<double> params{theta, alpha};
    std::vector<double> grads{g[0].scalar_value(), g[1].scalar_value()};
    state.step(params, grads);
    theta = params[0];
    alpha = params[1];
    final_query_loss = query.scalar_value();
    adapted_value = adapted.at("w").scalar_value();
  }
  CHECK(final_query_loss < 1e-6);
  CHECK(adapted_value == doctest::Approx(2.0).epsilon(1e-3));
}
