#pragma once

// The gradient/oracle self-test battery behind the `check` subcommand:
// first-order finite differences for every primitive, second-order checks
// for everything the inner adaptation step touches, the Meta-SGD
// meta-gradient probe, and the task-generator oracles.

#include <iostream>

#include "metabias/engine.hpp"
#include "metabias/gradcheck.hpp"
#include "metabias/ops.hpp"

namespace metabias {

struct SelfCheck {
  std::string name;
  bool pass = false;
  double detail = 0.0;  // rel err for gradient checks, measured value else
};

inline std::vector<SelfCheck> run_gradient_checks() {
  std::vector<SelfCheck> out;
  auto push = [&](const CheckResult& r) {
    out.push_back({r.name, r.pass, r.max_rel_err});
  };

  Rng rng(derive_seed(2024, "check_suite"));
  Tensor x = random_tensor(rng, {2, 5});
  Tensor y = random_tensor(rng, {2, 5});
  Tensor w = random_tensor(rng, {2, 5});
  auto weighted = [&](Tensor v) { return sum_all(mul(v, w.detached())); };
  auto quad = [&](Tensor v) {
    return sum_all(mul(mul(v, v), w.detached()));
  };

  struct Case {
    const char* name;
    ScalarFn fn;
    int arity;
    bool second_order;  // used inside inner adaptation
  };
  std::vector<Case> cases;
  auto one = [&](const char* name, ScalarFn fn, int arity, bool so = true) {
    cases.push_back({name, std::move(fn), arity, so});
  };
  one("add", [&](const std::vector<Tensor>& in) {
    return quad(add(in[0], in[1]));
  }, 2);
  one("neg", [&](const std::vector<Tensor>& in) {
    return quad(neg(in[0]));
  }, 1);
  one("mul", [&](const std::vector<Tensor>& in) {
    return weighted(mul(mul(in[0], in[1]), in[0]));
  }, 2);
  one("add_scalar", [&](const std::vector<Tensor>& in) {
    return quad(add_scalar(in[0], 0.31));
  }, 1);
  one("mul_scalar", [&](const std::vector<Tensor>& in) {
    return quad(mul_scalar(in[0], -1.7));
  }, 1);
  one("reshape", [&](const std::vector<Tensor>& in) {
    return quad(reshape(reshape(in[0], {10}), {2, 5}));
  }, 1);
  one("permute", [&](const std::vector<Tensor>& in) {
    return quad(permute(permute(in[0], {1, 0}), {1, 0}));
  }, 1);
  one("slice+concat", [&](const std::vector<Tensor>& in) {
    std::vector<Tensor> parts{slice(in[0], 1, 2, 3), slice(in[0], 1, 0, 2)};
    return quad(concat(parts, 1));
  }, 1);
  one("expand/sum_leading", [&](const std::vector<Tensor>& in) {
    Tensor row = reshape(slice(w.detached(), 0, 0, 1), {5});
    Tensor v = sum_leading(expand_leading(sum_leading(in[0]), 3));
    return sum_all(mul(mul(v, v), row));
  }, 1);
  one("sum/broadcast_last", [&](const std::vector<Tensor>& in) {
    Tensor v = broadcast_last(sum_last(in[0]), 5);
    return sum_all(mul(mul(v, v), w.detached()));
  }, 1);
  one("sum_all", [&](const std::vector<Tensor>& in) {
    Tensor s = sum_all(mul(in[0], in[0]));
    return mul(s, s);
  }, 1);
  one("exp", [&](const std::vector<Tensor>& in) {
    return weighted(exp(mul_scalar(in[0], 0.5)));
  }, 1);
  one("log", [&](const std::vector<Tensor>& in) {
    return weighted(log(add_scalar(mul(in[0], in[0]), 0.5)));
  }, 1);
  one("pow_scalar", [&](const std::vector<Tensor>& in) {
    return weighted(pow_scalar(add_scalar(mul(in[0], in[0]), 0.5), -0.5));
  }, 1);
  one("sigmoid", [&](const std::vector<Tensor>& in) {
    return weighted(mul(sigmoid(in[0]), in[1]));
  }, 2);
  one("tanh", [&](const std::vector<Tensor>& in) {
    return weighted(mul(tanh(in[0]), in[1]));
  }, 2);

  for (const Case& c : cases) {
    std::vector<Tensor> inputs{x};
    if (c.arity == 2) inputs.push_back(y);
    push(check_gradient(std::string("grad/") + c.name, c.fn, inputs));
    if (c.second_order)
      push(check_second_order(std::string("grad2/") + c.name, c.fn, inputs,
                             derive_seed(7, c.name)));
  }

  // relu away from its kink
  {
    Tensor xr(Shape{2, 5},
              {0.5, -0.7, 1.2, -0.3, 0.9, -1.5, 0.4, 0.8, -0.6, 1.1});
    ScalarFn fn = [&](const std::vector<Tensor>& in) {
      return sum_all(mul(relu(in[0]), w.detached()));
    };
    push(check_gradient("grad/relu", fn, {xr}));
    push(check_second_order("grad2/relu", fn, {xr}, 11));
  }

  // matmul / bmm / im2col-col2im with natural shapes
  {
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = matmul(in[0], in[1]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/matmul", fn, {a, b}));
    push(check_second_order("grad2/matmul", fn, {a, b}, 13));
  }
  {
    Tensor a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 4, 2});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = bmm(in[0], in[1]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/bmm", fn, {a, b}));
    push(check_second_order("grad2/bmm", fn, {a, b}, 17));
  }
  {
    Tensor img = random_tensor(rng, {1, 2, 4, 4});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor c = im2col3x3(in[0]);
      return sum_all(mul(c, mul(c, c)));
    };
    push(check_gradient("grad/im2col3x3", fn, {img}));
    push(check_second_order("grad2/im2col3x3", fn, {img}, 19));
    Tensor cols = random_tensor(rng, {16, 18});
    ScalarFn fn2 = [](const std::vector<Tensor>& in) {
      Tensor c = col2im3x3(in[0], 1, 2, 4, 4);
      return sum_all(mul(c, mul(c, c)));
    };
    push(check_gradient("grad/col2im3x3", fn2, {cols}));
    push(check_second_order("grad2/col2im3x3", fn2, {cols}, 23));
  }

  // composite operations named by the contracts
  {
    Tensor img = random_tensor(rng, {1, 1, 4, 4});
    Tensor kernel = random_tensor(rng, {2, 1, 3, 3});
    Tensor bias = random_tensor(rng, {2});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = conv2d(in[2], in[0], in[1]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/conv2d", fn, {kernel, bias, img}));
    push(check_second_order("grad2/conv2d", fn, {kernel, bias, img}, 29));
  }
  {
    Tensor img = random_tensor(rng, {1, 1, 4, 4});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = avgpool2d(in[0]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/avgpool2d", fn, {img}));
    push(check_second_order("grad2/avgpool2d", fn, {img}, 31));
  }
  {
    Tensor bx = random_tensor(rng, {4, 3});
    Tensor gamma = random_tensor(rng, {3}, 0.5, 1.5);
    Tensor beta = random_tensor(rng, {3});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = batchnorm(in[0], in[1], in[2]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/batchnorm", fn, {bx, gamma, beta}));
    push(check_second_order("grad2/batchnorm", fn, {bx, gamma, beta}, 37));
    ScalarFn lf = [](const std::vector<Tensor>& in) {
      Tensor v = layernorm(in[0], in[1], in[2]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/layernorm", lf, {bx, gamma, beta}));
    push(check_second_order("grad2/layernorm", lf, {bx, gamma, beta}, 41));
  }
  {
    Tensor logits = random_tensor(rng, {3, 4});
    ScalarFn fn = [](const std::vector<Tensor>& in) {
      Tensor v = softmax(in[0]);
      return sum_all(mul(v, v));
    };
    push(check_gradient("grad/softmax", fn, {logits}));
    push(check_second_order("grad2/softmax", fn, {logits}, 43));

    std::vector<int> labels{0, 2, 3};
    ScalarFn ce = [labels](const std::vector<Tensor>& in) {
      return cross_entropy_loss(in[0], labels);
    };
    push(check_gradient("grad/cross_entropy", ce, {logits}));
    push(check_second_order("grad2/cross_entropy", ce, {logits}, 47));

    Tensor target = random_tensor(rng, {3, 4});
    ScalarFn ms = [target](const std::vector<Tensor>& in) {
      return mse_loss(mul(in[0], in[0]), target.detached());
    };
    push(check_gradient("grad/mse", ms, {logits}));
    push(check_second_order("grad2/mse", ms, {logits}, 53));
  }

  // the full Meta-SGD objective on a 2-layer width-4 MLP
  push(check_meta_gradient_mlp2x4());
  return out;
}

inline std::vector<SelfCheck> run_oracle_checks() {
  std::vector<SelfCheck> out;

  // concept labels vs brute-force truth-table enumeration, 1000 formulas
  {
    Rng rng(derive_seed(99, "oracle_concepts"));
    bool ok = true;
    for (int i = 0; i < 1000 && ok; ++i) {
      ConceptFormula f = sample_concept(rng);
      Episode e = concept_episode(f, 10, rng, Representation::Bits);
      ConceptFormula parsed = ConceptFormula::parse(e.formula);
      for (int q = 0; q < 16 && ok; ++q) {
        int code = 0;
        for (int b = 0; b < 4; ++b)
          code |= static_cast<int>(e.query_x.value(q * 4 + b)) << (3 - b);
        ok = e.query_y[static_cast<size_t>(q)] ==
             (parsed.evaluate(ConceptObject::from_code(code)) ? 1.0 : 0.0);
      }
    }
    out.push_back({"oracle/concept-truth-table", ok, ok ? 0.0 : 1.0});
  }

  // modular noise: std within 0.1 +- 0.005 over 1e5 samples
  {
    Rng rng(derive_seed(99, "oracle_noise"));
    double sum = 0, sumsq = 0;
    int64_t n = 0;
    while (n < 100000) {
      Episode e = mod_episode(static_cast<int>(uniform_int(rng, 1, 40)), 100,
                              rng, Representation::Bits);
      for (int xv = 0; xv < 100; ++xv) {
        double eps = e.query_y[static_cast<size_t>(xv)] - (xv % e.modulus);
        sum += eps;
        sumsq += eps * eps;
        ++n;
      }
    }
    double mean = sum / static_cast<double>(n);
    double sd = std::sqrt(sumsq / static_cast<double>(n) - mean * mean);
    bool ok = std::abs(sd - 0.1) < 0.005;
    out.push_back({"oracle/modular-noise-std", ok, sd});
  }

  // moduli splits exactly {odd}/{even} and {1-20}/{21-40}
  {
    auto [ot, oe] = moduli_split(ModuliScheme::OddEven);
    auto [tt, te] = moduli_split(ModuliScheme::TwentyTwenty);
    bool ok = ot.size() == 20 && oe.size() == 20 && tt.size() == 20 &&
              te.size() == 20;
    for (int m : ot) ok = ok && m % 2 == 1;
    for (int m : oe) ok = ok && m % 2 == 0;
    for (size_t i = 0; i < tt.size(); ++i)
      ok = ok && tt[i] == static_cast<int>(i) + 1;
    for (size_t i = 0; i < te.size(); ++i)
      ok = ok && te[i] == static_cast<int>(i) + 21;
    out.push_back({"oracle/moduli-splits", ok, ok ? 0.0 : 1.0});
  }

  // episode determinism under fixed seeds
  {
    auto gen = [] {
      Rng rng(derive_seed(99, "oracle_determinism"));
      ConceptFormula f = sample_concept(rng);
      Episode c = concept_episode(f, 7, rng, Representation::Image);
      Episode m = mod_episode(9, 40, rng, Representation::Bits);
      return std::make_pair(std::move(c), std::move(m));
    };
    auto [c1, m1] = gen();
    auto [c2, m2] = gen();
    bool ok = c1.formula == c2.formula && m1.support_y == m2.support_y &&
              m1.query_y == m2.query_y;
    for (int64_t i = 0; i < c1.support_x.numel() && ok; ++i)
      ok = c1.support_x.value(i) == c2.support_x.value(i);
    out.push_back({"oracle/episode-determinism", ok, ok ? 0.0 : 1.0});
  }
  return out;
}

// Prints one line per check; returns overall success.
inline bool run_self_checks(std::ostream& os) {
  bool all = true;
  for (const auto& group : {run_gradient_checks(), run_oracle_checks()}) {
    for (const SelfCheck& c : group) {
      os << (c.pass ? "[ok]   " : "[FAIL] ") << c.name << "  ("
         << c.detail << ")\n";
      all = all && c.pass;
    }
  }
  os << (all ? "all checks passed\n" : "CHECK FAILURES PRESENT\n");
  return all;
}

}  // namespace metabias
