#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "lfm/flows.hpp"
#include "lfm/models.hpp"
#include "lfm/rng.hpp"

using namespace lfm;
using ad::Tensor;
using ad::Trace;

namespace {

flows::FlowConfig small_cfg(int channels = 6, int n_conv = 2, int r = 2, bool bn = false) {
  flows::FlowConfig cfg;
  cfg.channels = channels;
  cfg.n_conv = n_conv;
  cfg.receptive_field = r;
  cfg.batchnorm = bn;
  return cfg;
}

// nudge every parameter away from the identity initialization
void randomize(flows::FlowStack& stack, Rng rng, double scale = 0.4) {
  for (auto* p : stack.parameters())
    for (auto& v : p->value) v += scale * rng.normal();
}

std::vector<double> run_flat(flows::FlowStack& stack, const flows::Features& feats,
                             const std::vector<double>& eps_v,
                             const std::vector<double>* theta_v = nullptr, int theta_dim = 0) {
  Trace tr;
  Tensor eps = tr.constant({1, stack.flat_len()}, eps_v);
  Tensor th;
  if (theta_dim > 0) th = tr.constant({1, theta_dim}, *theta_v);
  auto res = stack.forward(tr, eps, theta_dim > 0 ? &th : nullptr, feats, false,
                           flows::constant_binder(tr));
  std::vector<double> out = res.f.val();
  out.push_back(res.log_q.val()[0]);
  return out;
}

flows::Features empty_features(const models::ModelSpec& model, std::int64_t t_len) {
  std::vector<double> mesh(static_cast<std::size_t>(t_len));
  for (std::int64_t k = 0; k < t_len; ++k) mesh[static_cast<std::size_t>(k)] = 0.1 * double(k);
  std::vector<std::vector<double>> y(static_cast<std::size_t>(t_len),
                                     std::vector<double>(model.observed_dims.size(), 0.0));
  std::vector<std::vector<int>> mask(static_cast<std::size_t>(t_len),
                                     std::vector<int>(model.observed_dims.size(), 0));
  return flows::build_features(model, mesh, y, mask);
}

}  // namespace

TEST_CASE("flatten layout", "[flows]") {
  // d = 2, T = 2, state rows are dimensions: [[a, c], [b, d]] -> [a, b, c, d]
  std::vector<std::vector<double>> state = {{1.0, 3.0}, {2.0, 4.0}};
  auto flat = flows::flatten(state);
  CHECK(flat == std::vector<double>{1.0, 2.0, 3.0, 4.0});
  auto back = flows::unflatten(flat, 2);
  CHECK(back == state);

  // element 3 with d = 2 sits at time 1, dimension 1
  CHECK(flows::flat_index(1, 1, 2) == 3);
  CHECK_THROWS_AS(flows::unflatten({1.0, 2.0, 3.0}, 2), ShapeError);

  Rng rng(12);
  std::vector<std::vector<double>> big(3, std::vector<double>(7));
  for (auto& r : big)
    for (auto& v : r) v = rng.normal();
  CHECK(flows::unflatten(flows::flatten(big), 3) == big);
}

TEST_CASE("dimension mask alternation", "[flows]") {
  // d = 2: layer 1 updates odd-dimension elements, layer 2 even, layer 3 odd
  for (std::int64_t i = 0; i < 8; ++i) {
    CHECK(flows::dimension_mask(1, i, 2) == (i % 2 == 1 ? 1 : 0));
    CHECK(flows::dimension_mask(2, i, 2) == (i % 2 == 0 ? 1 : 0));
    CHECK(flows::dimension_mask(3, i, 2) == flows::dimension_mask(1, i, 2));
  }
  // union over layers 1..d covers every element exactly once
  for (int d = 1; d <= 4; ++d)
    for (std::int64_t i = 0; i < 4 * d; ++i) {
      int hits = 0;
      for (int l = 1; l <= d; ++l) hits += flows::dimension_mask(l, i, d);
      CHECK(hits == 1);
    }
  // d = 1: every layer updates every element
  for (int l = 1; l <= 5; ++l) CHECK(flows::dimension_mask(l, 3, 1) == 1);
}

TEST_CASE("local features", "[flows]") {
  models::ModelOptions opt;
  opt.matern_order = 2;
  auto model = models::builtin("matern-gp", opt);
  std::vector<double> mesh = {0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<std::vector<double>> y(5, std::vector<double>(1, 0.0));
  std::vector<std::vector<int>> mask(5, std::vector<int>(1, 0));
  mask[2][0] = 1;
  y[2][0] = 3.5;
  auto f = flows::build_features(model, mesh, y, mask);
  REQUIRE(f.t_flat == 10);

  auto raw = [&](std::int64_t k, int s, int c) {
    return f.data[static_cast<std::size_t>((k * 2 + s) * 4 + c)];
  };
  // observed dim at the observation time: mask 1
  CHECK(raw(2, 0, 3) == 1.0);
  // latent dim at the same time: mask 0, zero observation channel
  CHECK(raw(2, 1, 3) == 0.0);
  CHECK(raw(2, 1, 2) == 0.0);
  // observation value is carried on the observed dimension before tau
  CHECK(raw(0, 0, 2) == 3.5);
  CHECK(raw(1, 0, 2) == 3.5);
  // after the final observation everything is zeroed
  CHECK(raw(3, 0, 2) == 0.0);
  CHECK(raw(4, 0, 3) == 0.0);

  // time-to-next shrinks approaching the observation; channel is
  // standardized so compare ordering rather than raw values
  CHECK(raw(0, 0, 1) > raw(1, 0, 1));
  CHECK(raw(2, 0, 1) < raw(1, 0, 1));

  // time channel standardized to zero mean / unit variance
  double mean = 0.0, var = 0.0;
  for (std::int64_t i = 0; i < f.t_flat; ++i) mean += f.data[static_cast<std::size_t>(i * 4)];
  mean /= double(f.t_flat);
  for (std::int64_t i = 0; i < f.t_flat; ++i) {
    double d2 = f.data[static_cast<std::size_t>(i * 4)] - mean;
    var += d2 * d2;
  }
  var /= double(f.t_flat);
  CHECK(mean == Catch::Approx(0.0).margin(1e-12));
  CHECK(var == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("identity initialization gives the base density", "[flows]") {
  models::ModelOptions opt;
  opt.matern_order = 2;
  auto model = models::builtin("matern-gp", opt);
  const std::int64_t t_len = 6;
  flows::FlowStack stack(model, small_cfg(8, 3, 2, false), t_len, 0, Rng(7));
  auto feats = empty_features(model, t_len);

  Trace tr(42);
  Tensor eps = tr.randn({3, stack.flat_len()});
  auto res = stack.forward(tr, eps, nullptr, feats, false, flows::constant_binder(tr));

  const auto& ev = eps.val();
  const auto& fv = res.f.val();
  // sigma = softplus(softplus^{-1}(1)) is one only to rounding, so the pass
  // through the gates drifts by a few ulps
  for (std::size_t i = 0; i < ev.size(); ++i)
    CHECK(fv[i] == Catch::Approx(ev[i]).margin(1e-12));

  for (int m = 0; m < 3; ++m) {
    double expect = 0.0;
    for (std::int64_t i = 0; i < stack.flat_len(); ++i) {
      double e = ev[static_cast<std::size_t>(m * stack.flat_len() + i)];
      expect += -0.5 * e * e - 0.5 * std::log(2.0 * M_PI);
    }
    CHECK(res.log_q.val()[static_cast<std::size_t>(m)] ==
          Catch::Approx(expect).margin(1e-10));
  }
}

TEST_CASE("numerical jacobian is lower triangular and matches log_q", "[flows][jacobian]") {
  models::ModelOptions opt;
  opt.matern_order = 2;
  auto model = models::builtin("matern-gp", opt);
  const std::int64_t t_len = 3;  // T_flat = 6
  auto feats = empty_features(model, t_len);

  Rng seed_rng(555);
  for (int stack_i = 0; stack_i < 10; ++stack_i) {
    flows::FlowStack stack(model, small_cfg(6, 2, 2, false), t_len, 0,
                           Rng(seed_rng.next_u64()));
    randomize(stack, Rng(seed_rng.next_u64()));
    const std::int64_t n = stack.flat_len();

    std::vector<double> eps(static_cast<std::size_t>(n));
    Rng erng(seed_rng.next_u64());
    for (auto& e : eps) e = erng.normal();

    auto fwd = [&](const std::vector<double>& ev) {
      auto out = run_flat(stack, feats, ev);
      out.pop_back();
      return out;
    };
    double log_q;
    {
      auto full = run_flat(stack, feats, eps);
      log_q = full.back();
    }

    const double h = 1e-6;
    Eigen::MatrixXd jac(n, n);
    for (std::int64_t j = 0; j < n; ++j) {
      auto ep = eps, em = eps;
      ep[static_cast<std::size_t>(j)] += h;
      em[static_cast<std::size_t>(j)] -= h;
      auto fp = fwd(ep);
      auto fm = fwd(em);
      // flatten(f) has the same element order as eps
      for (std::int64_t i = 0; i < n; ++i)
        jac(i, j) = (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) / (2.0 * h);
    }

    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = i + 1; j < n; ++j) {
        INFO("stack " << stack_i << " J(" << i << "," << j << ")");
        REQUIRE(std::fabs(jac(i, j)) < 1e-9);
      }

    double logdet = 0.0;
    for (std::int64_t i = 0; i < n; ++i) logdet += std::log(std::fabs(jac(i, i)));
    double base = 0.0;
    for (double e : eps) base += -0.5 * e * e - 0.5 * std::log(2.0 * M_PI);
    double expect = base - logdet;
    CHECK(std::fabs(log_q - expect) / std::fabs(expect) < 1e-6);
  }
}

TEST_CASE("flow receptive window bounds influence", "[flows]") {
  models::ModelOptions opt;
  opt.matern_order = 1;
  auto model = models::builtin("matern-gp", opt);
  const std::int64_t t_len = 16;
  flows::FlowConfig cfg = small_cfg(5, 2, 2, false);
  flows::FlowStack stack(model, cfg, t_len, 0, Rng(3));
  randomize(stack, Rng(4));
  auto feats = empty_features(model, t_len);

  std::vector<double> eps(static_cast<std::size_t>(t_len), 0.3);
  auto base = run_flat(stack, feats, eps);
  // per network: one strict conv of width r*d plus n_conv inclusive convs,
  // each of which extends the window by r*d - 1
  int rd = cfg.receptive_field * model.dim;
  int window = stack.n_layers() * (rd + cfg.n_conv * (rd - 1));
  for (std::int64_t j = 3; j < 6; ++j) {
    auto pert = eps;
    pert[static_cast<std::size_t>(j)] += 1.0;
    auto moved = run_flat(stack, feats, pert);
    for (std::int64_t i = 0; i < t_len; ++i) {
      bool may_change = i >= j && i <= j + window;
      if (!may_change) {
        INFO("perturb " << j << " element " << i);
        REQUIRE(moved[static_cast<std::size_t>(i)] == base[static_cast<std::size_t>(i)]);
      }
    }
  }
}

TEST_CASE("mask coverage over 2d layers", "[flows]") {
  // every flattened element is updated exactly twice across N = 2d layers
  for (int d = 1; d <= 4; ++d) {
    for (std::int64_t i = 0; i < 6 * d; ++i) {
      int hits = 0;
      for (int l = 1; l <= 2 * d; ++l) hits += flows::dimension_mask(l, i, d);
      CHECK(hits == 2);
    }
  }
}

TEST_CASE("softplus bijector enforces positivity with the matching log-det", "[flows]") {
  auto gene = models::builtin("gene");
  const std::int64_t t_len = 3;
  flows::FlowStack stack(gene, small_cfg(6, 2, 1, false), t_len, 0, Rng(8));
  auto feats = empty_features(gene, t_len);

  Trace tr(11);
  Tensor eps = tr.randn({2, stack.flat_len()});
  auto res = stack.forward(tr, eps, nullptr, feats, false, flows::constant_binder(tr));
  // observable gene dimensions are softplus-mapped, force block passes through
  const auto& fv = res.f.val();
  const auto& ev = eps.val();
  for (int m = 0; m < 2; ++m)
    for (std::int64_t k = 0; k < t_len; ++k)
      for (int s = 0; s < 7; ++s) {
        std::size_t idx = static_cast<std::size_t>((m * t_len + k) * 7 + s);
        if (s < 5) {
          CHECK(fv[idx] > 0.0);
          CHECK(fv[idx] == Catch::Approx(ad::softplus_val(ev[idx])).margin(1e-10));
        } else {
          CHECK(fv[idx] == Catch::Approx(ev[idx]).margin(1e-12));
        }
      }

  // spot-check the closed forms
  auto [val, ld] = flows::apply_bijector_softplus(0.0);
  CHECK(val == Catch::Approx(std::log(2.0)));
  CHECK(ld == Catch::Approx(std::log(0.5)));
}

TEST_CASE("flow forward determinism in eval mode", "[flows]") {
  auto model = models::builtin("toy");
  const std::int64_t t_len = 5;
  flows::FlowStack stack(model, small_cfg(6, 3, 2, true), t_len, 3, Rng(21));
  randomize(stack, Rng(22), 0.2);
  auto feats = empty_features(model, t_len);

  std::vector<double> eps(static_cast<std::size_t>(2 * stack.flat_len()));
  Rng erng(1);
  for (auto& e : eps) e = erng.normal();
  std::vector<double> theta = {0.1, -0.2, 0.3, 0.0, 0.15, -0.05};

  auto run = [&]() {
    Trace tr;
    Tensor e = tr.constant({2, stack.flat_len()}, eps);
    Tensor th = tr.constant({2, 3}, theta);
    auto res = stack.forward(tr, e, &th, feats, false, flows::constant_binder(tr));
    auto out = res.f.val();
    auto lq = res.log_q.val();
    out.insert(out.end(), lq.begin(), lq.end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("theta encoding reaches the shift and scale", "[flows]") {
  auto model = models::builtin("toy");
  const std::int64_t t_len = 4;
  flows::FlowStack stack(model, small_cfg(6, 2, 2, false), t_len, 3, Rng(31));
  randomize(stack, Rng(32), 0.3);
  auto feats = empty_features(model, t_len);

  std::vector<double> eps(static_cast<std::size_t>(stack.flat_len()), 0.25);
  std::vector<double> th_a = {0.0, 0.0, 0.0};
  std::vector<double> th_b = {1.0, -1.0, 0.5};
  auto fa = run_flat(stack, feats, eps, &th_a, 3);
  auto fb = run_flat(stack, feats, eps, &th_b, 3);
  double diff = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) diff = std::max(diff, std::fabs(fa[i] - fb[i]));
  CHECK(diff > 1e-8);
}
