#include <cstring>

#include "doctest.h"
#include "metabias/gradcheck.hpp"
#include "metabias/ops.hpp"
#include "metabias/tensor.hpp"

using namespace metabias;

namespace {

Tensor t2(std::vector<double> v, int64_t r, int64_t c) {
  return Tensor(Shape{r, c}, std::move(v));
}

}  // namespace

TEST_CASE("matmul values") {
  Tensor eye = t2({1, 0, 0, 1}, 2, 2);
  Tensor a = t2({1, 2, 3, 4}, 2, 2);
  Tensor r = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(r.value(i) == a.value(i));

  Tensor row = t2({1, 2}, 1, 2);
  Tensor col = t2({3, 4}, 2, 1);
  CHECK(matmul(row, col).scalar_value() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("gradient of sum(matmul) wrt A is ones * B^T") {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});

  Tape tape;
  Tape::Scope scope(tape);
  Tensor wa = tape.watch(a);
  Tensor y = sum_all(matmul(wa, b));
  Tensor ga = grad_one(y, wa);

  Tensor expected = matmul(Tensor::full({3, 2}, 1.0), transpose2d(b));
  for (int64_t i = 0; i < ga.numel(); ++i)
    CHECK(ga.value(i) == doctest::Approx(expected.value(i)).epsilon(1e-10));

  auto res = check_gradient(
      "matmul_sum",
      [&](const std::vector<Tensor>& in) {
        return sum_all(matmul(in[0], in[1]));
      },
      {a, b});
  CHECK(res.pass);
}

TEST_CASE("first-order finite differences for every primitive") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {2, 5});
  Tensor y = random_tensor(rng, {2, 5});
  Tensor w = random_tensor(rng, {2, 5});  // fixed mixing weights

  auto weighted = [&](Tensor v) { return sum_all(mul(v, w.detached())); };

  // (name, fn, number of inputs actually consumed)
  std::vector<std::tuple<std::string, ScalarFn, int>> cases;
  cases.emplace_back("add", [&](const std::vector<Tensor>& in) {
    return weighted(add(in[0], in[1]));
  }, 2);
  cases.emplace_back("neg", [&](const std::vector<Tensor>& in) {
    return weighted(neg(in[0]));
  }, 1);
  cases.emplace_back("mul", [&](const std::vector<Tensor>& in) {
    return weighted(mul(in[0], in[1]));
  }, 2);
  cases.emplace_back("add_scalar", [&](const std::vector<Tensor>& in) {
    return weighted(add_scalar(in[0], 0.7));
  }, 1);
  cases.emplace_back("mul_scalar", [&](const std::vector<Tensor>& in) {
    return weighted(mul_scalar(in[0], -1.3));
  }, 1);
  cases.emplace_back("reshape", [&](const std::vector<Tensor>& in) {
    return weighted(reshape(reshape(in[0], {10}), {2, 5}));
  }, 1);
  cases.emplace_back("permute", [&](const std::vector<Tensor>& in) {
    return weighted(permute(permute(in[0], {1, 0}), {1, 0}));
  }, 1);
  cases.emplace_back("slice_concat", [&](const std::vector<Tensor>& in) {
    Tensor left = slice(in[0], 1, 0, 2);
    Tensor right = slice(in[0], 1, 2, 3);
    std::vector<Tensor> parts{right, left};
    return weighted(concat(parts, 1));
  }, 1);
  cases.emplace_back("expand_sum_leading", [&](const std::vector<Tensor>& in) {
    Tensor row = reshape(slice(w.detached(), 0, 0, 1), {5});
    return sum_all(mul(sum_leading(expand_leading(sum_leading(in[0]), 3)),
                       row));
  }, 1);
  cases.emplace_back("sum_broadcast_last", [&](const std::vector<Tensor>& in) {
    return sum_all(mul(broadcast_last(sum_last(in[0]), 5), w.detached()));
  }, 1);
  cases.emplace_back("sum_all", [&](const std::vector<Tensor>& in) {
    return sum_all(in[0]);
  }, 1);
  cases.emplace_back("exp", [&](const std::vector<Tensor>& in) {
    return weighted(exp(in[0]));
  }, 1);
  cases.emplace_back("log", [&](const std::vector<Tensor>& in) {
    return weighted(log(add_scalar(mul(in[0], in[0]), 0.5)));
  }, 1);
  cases.emplace_back("pow_scalar", [&](const std::vector<Tensor>& in) {
    return weighted(pow_scalar(add_scalar(mul(in[0], in[0]), 0.5), -0.5));
  }, 1);
  cases.emplace_back("sigmoid", [&](const std::vector<Tensor>& in) {
    return weighted(sigmoid(in[0]));
  }, 1);
  cases.emplace_back("tanh", [&](const std::vector<Tensor>& in) {
    return weighted(tanh(in[0]));
  }, 1);

  for (auto& [name, fn, nin] : cases) {
    std::vector<Tensor> inputs{x};
    if (nin == 2) inputs.push_back(y);
    auto res = check_gradient(name, fn, inputs);
    INFO(name, " rel err ", res.max_rel_err);
    CHECK(res.pass);
  }

  // relu away from the kink.
  Tensor xr(Shape{2, 5}, {0.5, -0.7, 1.2, -0.3, 0.9, -1.5, 0.4, 0.8, -0.6, 1.1});
  auto relu_res = check_gradient(
      "relu",
      [&](const std::vector<Tensor>& in) {
        return sum_all(mul(relu(in[0]), w.detached()));
      },
      {xr});
  CHECK(relu_res.pass);

  // matmul / bmm / im2col with their natural shapes.
  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
  CHECK(check_gradient(
            "matmul",
            [](const std::vector<Tensor>& in) {
              Tensor y = matmul(in[0], in[1]);
              return sum_all(mul(y, y));
            },
            {a, b})
            .pass);

  Tensor ba = random_tensor(rng, {2, 3, 4}), bb = random_tensor(rng, {2, 4, 2});
  CHECK(check_gradient(
            "bmm",
            [](const std::vector<Tensor>& in) {
              Tensor y = bmm(in[0], in[1]);
              return sum_all(mul(y, y));
            },
            {ba, bb})
            .pass);

  Tensor img = random_tensor(rng, {1, 2, 4, 4});
  CHECK(check_gradient(
            "im2col3x3",
            [](const std::vector<Tensor>& in) {
              Tensor c = im2col3x3(in[0]);
              return sum_all(mul(c, c));
            },
            {img})
            .pass);
  Tensor cols = random_tensor(rng, {16, 18});
  CHECK(check_gradient(
            "col2im3x3",
            [](const std::vector<Tensor>& in) {
              Tensor c = col2im3x3(in[0], 1, 2, 4, 4);
              return sum_all(mul(c, c));
            },
            {cols})
            .pass);
}

TEST_CASE("second-order finite differences for primitives") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {2, 3});
  Tensor y = random_tensor(rng, {2, 3});

  std::vector<std::tuple<std::string, ScalarFn, int>> cases;
  cases.emplace_back("mul2", [](const std::vector<Tensor>& in) {
    return sum_all(mul(mul(in[0], in[1]), in[0]));
  }, 2);
  cases.emplace_back("exp2", [](const std::vector<Tensor>& in) {
    return sum_all(exp(mul_scalar(in[0], 0.5)));
  }, 1);
  cases.emplace_back("log2", [](const std::vector<Tensor>& in) {
    return sum_all(log(add_scalar(mul(in[0], in[0]), 0.7)));
  }, 1);
  cases.emplace_back("pow2", [](const std::vector<Tensor>& in) {
    return sum_all(pow_scalar(add_scalar(mul(in[0], in[0]), 0.7), -0.5));
  }, 1);
  cases.emplace_back("sigmoid2", [](const std::vector<Tensor>& in) {
    return sum_all(mul(sigmoid(in[0]), in[1]));
  }, 2);
  cases.emplace_back("tanh2", [](const std::vector<Tensor>& in) {
    return sum_all(mul(tanh(in[0]), in[1]));
  }, 2);
  cases.emplace_back("structural2", [](const std::vector<Tensor>& in) {
    Tensor p = permute(reshape(in[0], {3, 2}), {1, 0});
    Tensor s = broadcast_last(sum_last(mul(p, in[1])), 3);
    return sum_all(mul(s, s));
  }, 2);

  for (auto& [name, fn, nin] : cases) {
    std::vector<Tensor> inputs{x};
    if (nin == 2) inputs.push_back(y);
    auto res = check_second_order(name, fn, inputs, 99);
    INFO(name, " rel err ", res.max_rel_err);
    CHECK(res.pass);
  }

  Tensor a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {3, 2});
  CHECK(check_second_order(
            "matmul2",
            [](const std::vector<Tensor>& in) {
              Tensor y2 = matmul(in[0], in[1]);
              return sum_all(mul(y2, y2));
            },
            {a, b}, 5)
            .pass);

  Tensor img = random_tensor(rng, {1, 1, 3, 3});
  CHECK(check_second_order(
            "im2col2",
            [](const std::vector<Tensor>& in) {
              Tensor c = im2col3x3(in[0]);
              return sum_all(mul(c, mul(c, c)));
            },
            {img}, 6)
            .pass);
}

TEST_CASE("polynomial grad and grad-of-grad") {
  Tensor x = Tensor::scalar(3.0);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor wx = tape.watch(x);
  Tensor y = mul(wx, wx);
  Tensor g = grad_one(y, wx, /*create_graph=*/true);
  CHECK(g.scalar_value() == doctest::Approx(6.0));
  Tensor gg = grad_one(sum_all(g), wx);
  CHECK(gg.scalar_value() == doctest::Approx(2.0));
}

TEST_CASE("meta-gradient of one adaptation step matches hand chain rule") {
  // Scalar model pred = theta * x; support (x=2, y=1), query (x=3, y=2).
  // L_tr = (2 th - 1)^2, dL = 4 (2 th - 1)
  // th' = th - al * 4 (2 th - 1)
  // L_te = (3 th' - 2)^2
  // dL_te/dth = 2 (3 th' - 2) * 3 * (1 - 8 al)
  // dL_te/dal = 2 (3 th' - 2) * 3 * (-4 (2 th - 1))
  double th = 0.7, al = 0.05;
  Tape tape;
  Tape::Scope scope(tape);
  Tensor wth = tape.watch(Tensor::scalar(th));
  Tensor wal = tape.watch(Tensor::scalar(al));

  Tensor pred_s = mul_scalar(wth, 2.0);
  Tensor loss_s = mse_loss(pred_s, Tensor::scalar(1.0));
  Tensor g = grad_one(loss_s, wth, /*create_graph=*/true);
  Tensor adapted = sub(wth, mul(wal, g));
  Tensor pred_q = mul_scalar(adapted, 3.0);
  Tensor loss_q = mse_loss(pred_q, Tensor::scalar(2.0));

  std::vector<Tensor> wrt{wth, wal};
  auto meta = grad(loss_q, wrt);

  double thp = th - al * 4.0 * (2.0 * th - 1.0);
  double d_th = 2.0 * (3.0 * thp - 2.0) * 3.0 * (1.0 - 8.0 * al);
  double d_al = 2.0 * (3.0 * thp - 2.0) * 3.0 * (-4.0 * (2.0 * th - 1.0));
  CHECK(meta[0].scalar_value() == doctest::Approx(d_th).epsilon(1e-10));
  CHECK(meta[1].scalar_value() == doctest::Approx(d_al).epsilon(1e-10));
}

TEST_CASE("grad rejects non-scalar output and unreachable wrt") {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor a = tape.watch(Tensor::zeros({2, 2}));
  Tensor b = tape.watch(Tensor::zeros({2, 2}));
  Tensor y = mul(a, a);
  CHECK_THROWS_AS((void)grad_one(y, a), StructuralError);  // non-scalar
  Tensor s = sum_all(y);
  CHECK_THROWS_AS((void)grad_one(s, b), StructuralError);  // unreachable
}

TEST_CASE("detached tensors contribute nothing") {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor a = tape.watch(Tensor::full({3}, 2.0));
  Tensor c = Tensor::full({3}, 5.0);  // never watched
  Tensor y = sum_all(mul(a, c));
  Tensor g = grad_one(y, a);
  for (int64_t i = 0; i < 3; ++i)
    CHECK(g.value(i) == doctest::Approx(5.0));
  // Detaching a tracked tensor cuts the graph.
  Tensor y2 = sum_all(mul(a.detached(), a));
  Tensor g2 = grad_one(y2, a);
  for (int64_t i = 0; i < 3; ++i)
    CHECK(g2.value(i) == doctest::Approx(2.0));  // only the tracked factor
}

TEST_CASE("repeated grad without create_graph is identical") {
  Rng rng(3);
  Tensor x = random_tensor(rng, {4, 4});
  Tape tape;
  Tape::Scope scope(tape);
  Tensor wx = tape.watch(x);
  Tensor y = sum_all(mul(sigmoid(wx), wx));
  Tensor g1 = grad_one(y, wx);
  Tensor g2 = grad_one(y, wx);
  CHECK(std::memcmp(g1.data().data(), g2.data().data(),
                    sizeof(double) * g1.numel()) == 0);
}

TEST_CASE("same seed and op sequence give bit-identical gradients") {
  auto run = [] {
    Rng rng(42);
    Tensor x = random_tensor(rng, {5, 5});
    Tensor w = random_tensor(rng, {5, 5});
    Tape tape;
    Tape::Scope scope(tape);
    Tensor wx = tape.watch(x);
    Tensor y = sum_all(tanh(matmul(wx, w)));
    return grad_one(y, wx);
  };
  Tensor a = run(), b = run();
  REQUIRE(a.numel() == b.numel());
  CHECK(std::memcmp(a.data().data(), b.data().data(),
                    sizeof(double) * a.numel()) == 0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor s = Tensor::scalar(2.5);
  CHECK(s.numel() == 1);
  CHECK(s.scalar_value() == 2.5);
}
