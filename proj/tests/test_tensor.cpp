#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "lfm/tensor.hpp"
#include "lfm/tensor_linalg.hpp"
#include "lfm/tensor_nn.hpp"

using namespace lfm;
using ad::Shape;
using ad::Tensor;
using ad::Trace;

namespace {

// deterministic pseudo-random projection so the FD oracle sees the same
// objective on every evaluation
Tensor weighted_sum(Trace& tr, const Tensor& t) {
  Rng rng(0x5eedULL + static_cast<std::uint64_t>(t.size()));
  std::vector<double> w(static_cast<std::size_t>(t.size()));
  for (auto& x : w) x = 2.0 * rng.uniform() - 1.0;
  return ad::sum(ad::mul(t, tr.constant(t.shape(), w)));
}

}  // namespace

TEST_CASE("elementwise op values", "[tensor]") {
  Trace tr;
  CHECK(ad::softplus(tr.scalar(0.0)).scalar() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(ad::elu(tr.scalar(-1.0)).scalar() == Catch::Approx(std::exp(-1.0) - 1.0).epsilon(1e-12));

  Tensor eye = tr.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a = tr.constant({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor prod = ad::matmul(eye, a);
  for (int i = 0; i < 9; ++i) CHECK(prod.val()[i] == a.val()[i]);
}

TEST_CASE("broadcasting add/mul semantics", "[tensor]") {
  Trace tr;
  Tensor a = tr.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = tr.constant({3}, {10, 20, 30});
  Tensor c = ad::add(a, b);
  std::vector<double> expect = {11, 22, 33, 14, 25, 36};
  for (int i = 0; i < 6; ++i) CHECK(c.val()[i] == expect[i]);

  Tensor col = tr.constant({2, 1}, {1, 100});
  Tensor d = ad::mul(a, col);
  std::vector<double> expect2 = {1, 2, 3, 400, 500, 600};
  for (int i = 0; i < 6; ++i) CHECK(d.val()[i] == expect2[i]);

  CHECK_THROWS_AS(ad::add(tr.constant({2}, {1, 2}), tr.constant({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("simple gradients", "[tensor]") {
  Trace tr;
  Tensor x = tr.leaf({}, std::vector<double>{3.0});
  Tensor y = ad::square(x);
  tr.backward(y);
  CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));

  CHECK_THROWS_AS(tr.backward(tr.constant({2}, {1.0, 2.0})), ShapeError);
}

TEST_CASE("gradient of sum(softplus(Wx)) matches finite differences", "[tensor]") {
  Rng rng(71);
  fdtest::Problem p;
  p.name = "softplus(Wx)";
  p.shapes = {{5, 5}, {5, 1}};
  p.build = [](Trace&, const std::vector<Tensor>& in) {
    return ad::sum(ad::softplus(ad::matmul(in[0], in[1])));
  };
  auto rep = fdtest::check(p, rng);
  INFO(rep.where);
  CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("registered op gradients match finite differences", "[tensor][grad]") {
  // the spec-level property: every registered op, random inputs in [-2, 2],
  // 100 trials under a fixed seed, relative error < 1e-4
  Rng rng(2024);
  std::vector<fdtest::Problem> ops;

  auto pos = [](int, double x) { return 2.6 + x; };  // keep inputs in [0.6, 4.6]

  auto add2 = [&](const char* name, std::vector<Shape> shapes,
                  std::function<Tensor(Trace&, const std::vector<Tensor>&)> build,
                  std::function<double(int, double)> warp = nullptr) {
    ops.push_back({name, std::move(shapes), std::move(build), std::move(warp)});
  };

  auto ws = [](Trace& tr, const Tensor& t) { return weighted_sum(tr, t); };

  add2("add", {{3, 4}, {3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::add(in[0], in[1]));
  });
  add2("add_broadcast", {{3, 4}, {4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::add(in[0], in[1]));
  });
  add2("subtract", {{3, 4}, {3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::sub(in[0], in[1]));
  });
  add2("multiply", {{3, 4}, {3, 1}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::mul(in[0], in[1]));
  });
  add2("divide", {{3, 4}, {3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::div(in[0], in[1]));
  }, [](int i, double x) { return i == 1 ? (x < 0 ? x - 0.5 : x + 0.5) : x; });
  add2("negate", {{7}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::neg(in[0]));
  });
  add2("matmul", {{3, 4}, {4, 2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::matmul(in[0], in[1]));
  });
  add2("matmul_batched", {{2, 3, 4}, {4, 2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::matmul(in[0], in[1]));
  });
  add2("transpose", {{3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::transpose(in[0]));
  });
  add2("sum_axis", {{3, 4, 2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::sum(in[0], 1));
  });
  add2("mean", {{3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::mean(in[0], 0, true));
  });
  add2("exp", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::exp(in[0]));
  });
  add2("log", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::log(in[0]));
  }, pos);
  add2("sqrt", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::sqrt(in[0]));
  }, pos);
  add2("square", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::square(in[0]));
  });
  add2("softplus", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::softplus(in[0]));
  });
  add2("elu", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::elu(in[0]));
  });
  add2("sigmoid", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::sigmoid(in[0]));
  });
  add2("sin", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::sin(in[0]));
  });
  add2("cos", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::cos(in[0]));
  });
  add2("concatenate", {{2, 3}, {2, 2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::concat({in[0], in[1]}, 1));
  });
  add2("slice", {{3, 5}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::slice(in[0], 1, 1, 3));
  });
  add2("reshape", {{3, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::reshape(in[0], {2, 6}));
  });
  add2("broadcast", {{1, 4}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::broadcast_to(in[0], {3, 4}));
  });
  add2("diag_part", {{2, 3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::diag_part(in[0]));
  });
  // cholesky-with-jitter through a PSD construction B B^T + 0.5 I
  add2("cholesky_with_jitter", {{3, 3}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    Tensor spd = ad::add(ad::matmul(in[0], ad::transpose(in[0])),
                         tr.constant({3, 3}, {0.5, 0, 0, 0, 0.5, 0, 0, 0, 0.5}));
    return ws(tr, ad::cholesky_jitter(spd));
  });
  add2("tri_lower_solve", {{3, 3}, {3, 2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    Tensor spd = ad::add(ad::matmul(in[0], ad::transpose(in[0])),
                         tr.constant({3, 3}, {0.5, 0, 0, 0, 0.5, 0, 0, 0, 0.5}));
    Tensor l = ad::cholesky_jitter(spd);
    return ws(tr, ad::tri_lower_solve(l, in[1]));
  });
  add2("causal_conv1d", {{2, 6, 2}, {3, 2, 2}, {2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    return ws(tr, ad::causal_conv1d(in[0], in[1], in[2]));
  });
  add2("causal_conv1d_inclusive", {{2, 6, 2}, {3, 2, 2}, {2}},
       [&](Trace& tr, const std::vector<Tensor>& in) {
         return ws(tr, ad::causal_conv1d(in[0], in[1], in[2], true));
       });
  add2("batch_norm_train", {{4, 3, 2}, {2}, {2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    ad::BatchNormState st;
    return ws(tr, ad::batch_norm(in[0], in[1], in[2], st, true));
  });
  add2("batch_norm_eval", {{4, 3, 2}, {2}, {2}}, [&](Trace& tr, const std::vector<Tensor>& in) {
    ad::BatchNormState st;
    st.init(3, 2);
    for (std::size_t i = 0; i < st.running_mean.size(); ++i) {
      st.running_mean[i] = 0.1 * double(i);
      st.running_var[i] = 1.0 + 0.05 * double(i);
    }
    return ws(tr, ad::batch_norm(in[0], in[1], in[2], st, false));
  });

  int trials_per_op = 4;  // ~120 trials across the registry
  for (auto& p : ops) {
    for (int t = 0; t < trials_per_op; ++t) {
      auto rep = fdtest::check(p, rng, 1e-5, 48);
      INFO(rep.where << " trial " << t << " max_rel " << rep.max_rel);
      REQUIRE(rep.max_rel < 1e-4);
    }
  }
}

TEST_CASE("causal conv semantics", "[tensor][conv]") {
  Trace tr;
  // all-ones kernel, width 2, one channel: strictly causal running pair-sums
  Tensor x = tr.constant({3, 1}, {1, 2, 3});
  Tensor k = tr.constant({2, 1, 1}, {1, 1});
  Tensor b = tr.constant({1}, {0});
  Tensor y = ad::causal_conv1d(x, k, b);
  CHECK(y.val()[0] == 0.0);
  CHECK(y.val()[1] == 1.0);
  CHECK(y.val()[2] == 3.0);

  // zero kernel, bias only
  Tensor k0 = tr.constant({2, 1, 1}, {0, 0});
  Tensor b7 = tr.constant({1}, {7});
  Tensor y2 = ad::causal_conv1d(x, k0, b7);
  for (auto v : y2.val()) CHECK(v == 7.0);

  CHECK_THROWS_AS(ad::causal_conv1d(x, tr.constant({0, 1, 1}, {}), b), ConfigError);
}

TEST_CASE("causal conv strict causality under perturbation", "[tensor][conv]") {
  Rng rng(5);
  const int T = 12, Ci = 2, Co = 3, K = 4;
  std::vector<double> xv(T * Ci), kv(K * Ci * Co), bv(Co);
  for (auto& v : xv) v = rng.normal();
  for (auto& v : kv) v = rng.normal();
  for (auto& v : bv) v = rng.normal();

  auto run = [&](const std::vector<double>& x) {
    Trace tr;
    Tensor y = ad::causal_conv1d(tr.constant({T, Ci}, x), tr.constant({K, Ci, Co}, kv),
                                 tr.constant({Co}, bv));
    return y.val();
  };
  auto base = run(xv);
  for (int j = 0; j < T; ++j) {
    auto xp = xv;
    xp[j * Ci] += 1.5;
    xp[j * Ci + 1] -= 0.5;
    auto pert = run(xp);
    for (int t = 0; t <= j; ++t)
      for (int c = 0; c < Co; ++c) REQUIRE(pert[t * Co + c] == base[t * Co + c]);
    // influence is confined to (j, j + K]
    for (int t = j + K + 1; t < T; ++t)
      for (int c = 0; c < Co; ++c) REQUIRE(pert[t * Co + c] == base[t * Co + c]);
  }
}

TEST_CASE("batch norm behavior", "[tensor][bn]") {
  Trace tr;
  // constant batch: variance floor engages, output equals learned offset
  Tensor x = tr.constant({3, 2, 1}, {4, 4, 4, 4, 4, 4});
  Tensor gamma = tr.constant({1}, {2.0});
  Tensor beta = tr.constant({1}, {0.25});
  ad::BatchNormState st;
  Tensor y = ad::batch_norm(x, gamma, beta, st, true);
  for (auto v : y.val()) CHECK(v == Catch::Approx(0.25).margin(1e-9));

  // batch {-a, +a}: unit scale, zero offset -> {-1, +1} up to eps
  Trace tr2;
  double a = 1.7;
  Tensor x2 = tr2.constant({2, 1, 1}, {-a, a});
  ad::BatchNormState st2;
  Tensor y2 = ad::batch_norm(x2, tr2.constant({1}, {1.0}), tr2.constant({1}, {0.0}), st2, true);
  CHECK(y2.val()[0] == Catch::Approx(-1.0).margin(1e-4));
  CHECK(y2.val()[1] == Catch::Approx(1.0).margin(1e-4));

  // eval mode twice: no state mutation, identical outputs
  auto rm = st2.running_mean, rv = st2.running_var;
  Tensor e1 = ad::batch_norm(x2, tr2.constant({1}, {1.0}), tr2.constant({1}, {0.0}), st2, false);
  Tensor e2 = ad::batch_norm(x2, tr2.constant({1}, {1.0}), tr2.constant({1}, {0.0}), st2, false);
  CHECK(e1.val() == e2.val());
  CHECK(st2.running_mean == rm);
  CHECK(st2.running_var == rv);

  // train mode with M = 1 is undefined
  Trace tr3;
  ad::BatchNormState st3;
  CHECK_THROWS_AS(ad::batch_norm(tr3.constant({1, 2, 1}, {1, 2}), tr3.constant({1}, {1.0}),
                                 tr3.constant({1}, {0.0}), st3, true),
                  ConfigError);
}

TEST_CASE("trace replay determinism", "[tensor]") {
  auto run = [](std::uint64_t seed) {
    Trace tr(seed);
    Tensor e = tr.randn({4, 4});
    Tensor w = tr.randn({4, 4});
    Tensor y = ad::sum(ad::softplus(ad::matmul(e, w)));
    return y.scalar();
  };
  CHECK(run(99) == run(99));
  CHECK(run(99) != run(100));
}

TEST_CASE("cholesky jitter ladder reconstructs near-singular input", "[tensor][chol]") {
  // rank-deficient PSD: loading pattern from a 1-channel diffusion embedding
  Trace tr;
  const int n = 4;
  std::vector<double> a(n * n, 0.0);
  a[(n - 1) * n + (n - 1)] = 2.5;  // only the final row carries noise
  a[0] = 1e-14;                    // numerically zero block
  Tensor l = ad::cholesky_jitter(tr.constant({n, n}, a));
  // reconstruct
  double frob = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += l.val()[i * n + p] * l.val()[j * n + p];
      double d = s - a[i * n + j];
      frob += d * d;
    }
  CHECK(std::sqrt(frob) < 1e-8);

  // genuinely indefinite input fails the whole ladder
  std::vector<double> bad = {1.0, 0.0, 0.0, -1.0};
  CHECK_THROWS_AS(ad::cholesky_jitter(tr.constant({2, 2}, bad)), NumericalError);
}

TEST_CASE("trace mixing is rejected", "[tensor]") {
  Trace a, b;
  Tensor ta = a.scalar(1.0);
  Tensor tb = b.scalar(2.0);
  CHECK_THROWS_AS(ad::add(ta, tb), ShapeError);
}
