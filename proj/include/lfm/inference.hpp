#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/flows.hpp"
#include "lfm/models.hpp"
#include "lfm/rng.hpp"
#include "lfm/tensor.hpp"
#include "lfm/unscented.hpp"

// Mean-field parameter posterior, ELBO assembly from flow samples and
// unscented transition densities, and the Adam training loop.

namespace lfm::vi {

// Mean-field factor per inferred parameter: Gaussian on the unconstrained
// value, mapped through exp when the parameter is positive. The raw scale is
// stored pre-softplus.
struct VariationalPosterior {
  std::vector<std::string> names;
  std::vector<bool> positive;
  std::vector<models::Prior> priors;
  flows::Param mu;
  flows::Param s_raw;

  int dim() const { return static_cast<int>(names.size()); }

  int index_of(const std::string& n) const {
    for (int i = 0; i < dim(); ++i)
      if (names[static_cast<std::size_t>(i)] == n) return i;
    return -1;
  }
};

inline VariationalPosterior make_posterior(const std::vector<std::string>& names,
                                           const std::vector<bool>& positive,
                                           const std::vector<models::Prior>& priors,
                                           const std::vector<double>& init_values,
                                           double init_scale = 0.1) {
  VariationalPosterior vp;
  vp.names = names;
  vp.positive = positive;
  vp.priors = priors;
  const int p = static_cast<int>(names.size());
  vp.mu.name = "theta.mu";
  vp.mu.shape = {p};
  vp.s_raw.name = "theta.s";
  vp.s_raw.shape = {p};
  vp.mu.value.resize(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) {
    double x = init_values[static_cast<std::size_t>(i)];
    if (positive[static_cast<std::size_t>(i)]) {
      if (!(x > 0.0)) throw ConfigError("positive parameter initialized non-positive");
      vp.mu.value[static_cast<std::size_t>(i)] = std::log(x);
    } else {
      vp.mu.value[static_cast<std::size_t>(i)] = x;
    }
  }
  double raw = std::log(std::expm1(init_scale));  // softplus^{-1}
  vp.s_raw.value.assign(static_cast<std::size_t>(p), raw);
  return vp;
}

struct ThetaSample {
  ad::Tensor unconstrained;  // [M, p]
  ad::Tensor constrained;    // [M, p]
  ad::Tensor log_q;          // [M]
  ad::Tensor log_prior;      // [M]
};

// Reparameterized draw: u = mu + softplus(s) * eps; positive parameters map
// through exp with the matching log-density correction.
inline ThetaSample sample_theta(ad::Trace& tr, VariationalPosterior& vp,
                                const ad::Tensor& eps_theta, const flows::Binder& bind) {
  const int p = vp.dim();
  if (eps_theta.rank() != 2 || eps_theta.shape()[1] != p)
    throw ShapeError("sample_theta: eps must be [M, p]");
  const std::int64_t mdim = eps_theta.shape()[0];

  ad::Tensor mu = bind(vp.mu);
  ad::Tensor scale = ad::softplus(bind(vp.s_raw));
  ThetaSample out;
  out.unconstrained = ad::add(mu, ad::mul(scale, eps_theta));  // [M, p]

  std::vector<double> posm(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) posm[static_cast<std::size_t>(i)] = vp.positive[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  ad::Tensor pos = tr.constant({p}, posm);
  out.constrained = ad::add(ad::mul(pos, ad::exp(out.unconstrained)),
                            ad::mul(ad::sub(tr.scalar(1.0), pos), out.unconstrained));

  const double log2pi = std::log(2.0 * M_PI);
  (void)mdim;
  ad::Tensor z = ad::div(ad::sub(out.unconstrained, mu), scale);
  ad::Tensor logq_u =
      ad::sub(ad::mul(ad::sum(ad::square(z), -1), tr.scalar(-0.5)),
              ad::add(ad::sum(ad::log(scale), -1), tr.scalar(0.5 * double(p) * log2pi)));
  // exp map: log q(theta) = log q(u) - sum_{positive} u
  out.log_q = ad::sub(logq_u, ad::sum(ad::mul(pos, out.unconstrained), -1));

  // priors: Normal acts on the unconstrained value, LogNormal on the
  // constrained one (normal on u minus the Jacobian term)
  std::vector<double> pm(static_cast<std::size_t>(p)), ps(static_cast<std::size_t>(p)),
      plogn(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) {
    const auto& pr = vp.priors[static_cast<std::size_t>(i)];
    pm[static_cast<std::size_t>(i)] = pr.loc;
    ps[static_cast<std::size_t>(i)] = pr.scale;
    bool logn = pr.family == models::Prior::Family::LogNormal;
    if (logn && !vp.positive[static_cast<std::size_t>(i)])
      throw ConfigError("log-normal prior requires a positive parameter");
    plogn[static_cast<std::size_t>(i)] = logn ? 1.0 : 0.0;
  }
  ad::Tensor prior_loc = tr.constant({p}, pm);
  ad::Tensor prior_scale = tr.constant({p}, ps);
  ad::Tensor logn_mask = tr.constant({p}, plogn);
  ad::Tensor zp = ad::div(ad::sub(out.unconstrained, prior_loc), prior_scale);
  ad::Tensor lp = ad::sub(ad::mul(ad::sum(ad::square(zp), -1), tr.scalar(-0.5)),
                          tr.scalar(0.5 * double(p) * log2pi));
  double sum_log_prior_scale = 0.0;
  for (int i = 0; i < p; ++i) sum_log_prior_scale += std::log(ps[static_cast<std::size_t>(i)]);
  lp = ad::sub(lp, tr.scalar(sum_log_prior_scale));
  out.log_prior = ad::sub(lp, ad::sum(ad::mul(logn_mask, out.unconstrained), -1));
  return out;
}

// value-level prior evaluator (contract checks / diagnostics)
inline double log_prior_theta(const std::vector<double>& theta_constrained,
                              const std::vector<bool>& positive,
                              const std::vector<models::Prior>& priors) {
  const double log2pi = std::log(2.0 * M_PI);
  double out = 0.0;
  for (std::size_t i = 0; i < theta_constrained.size(); ++i) {
    const auto& pr = priors[i];
    double u = theta_constrained[i];
    double corr = 0.0;
    if (pr.family == models::Prior::Family::LogNormal) {
      if (!positive[i] || !(theta_constrained[i] > 0.0))
        throw ConfigError("log-normal prior requires a positive value");
      u = std::log(theta_constrained[i]);
      corr = -u;
    } else if (positive[i]) {
      u = std::log(theta_constrained[i]);  // normal prior on the unconstrained value
    }
    double z = (u - pr.loc) / pr.scale;
    out += -0.5 * z * z - std::log(pr.scale) - 0.5 * log2pi + corr;
  }
  return out;
}

// fixed-or-inferred parameter wiring for one inference problem
struct ParamBinding {
  std::vector<std::string> fixed_names;
  std::vector<double> fixed_values;
  VariationalPosterior vp;

  double fixed_value(const std::string& n) const {
    for (std::size_t i = 0; i < fixed_names.size(); ++i)
      if (fixed_names[i] == n) return fixed_values[i];
    throw ConfigError("parameter '" + n + "' is not fixed");
  }

  bool is_fixed(const std::string& n) const {
    for (const auto& f : fixed_names)
      if (f == n) return true;
    return false;
  }
};

struct ElboOptions {
  int mc_samples = 8;
  ut::TransitionParams transition;
  double sigma0 = 10.0;
  bool batch_train_mode = true;  // batch-norm mode during the estimate
};

struct InferenceProblem {
  models::ModelSpec model;
  std::vector<double> mesh;
  std::vector<std::vector<double>> y;     // [T][p_obs]
  std::vector<std::vector<int>> mask;     // [T][p_obs]
  flows::Features feats;
  flows::FlowStack stack;
  ParamBinding params;
  ElboOptions opts;

  InferenceProblem(models::ModelSpec m, std::vector<double> mesh_,
                   std::vector<std::vector<double>> y_, std::vector<std::vector<int>> mask_,
                   const flows::FlowConfig& fc, ParamBinding pb, ElboOptions eo, Rng init_rng)
      : model(std::move(m)),
        mesh(std::move(mesh_)),
        y(std::move(y_)),
        mask(std::move(mask_)),
        feats(flows::build_features(model, mesh, y, mask)),
        stack(model, fc, static_cast<std::int64_t>(mesh.size()), pb.vp.dim(), init_rng),
        params(std::move(pb)),
        opts(std::move(eo)) {
    if (mesh.size() < 2) throw ConfigError("mesh needs at least two points");
  }

  double dt() const { return mesh[1] - mesh[0]; }
};

struct ElboEstimate {
  double value = 0.0;
  double se = 0.0;
  int dropped = 0;
  std::vector<double> per_sample_values;
  ad::Tensor objective;                                  // scalar, mean over kept samples
  std::vector<std::pair<flows::Param*, ad::Tensor>> bound;  // leaves for the optimizer
  ad::Tensor f;                                          // [kept, T, d]
  ad::Tensor theta_constrained;                          // [kept, p] (invalid when p = 0)
};

namespace detail {

struct MemoBinder {
  ad::Trace* tr;
  bool leaves;
  std::vector<std::pair<flows::Param*, ad::Tensor>> bound;

  ad::Tensor operator()(flows::Param& p) {
    for (auto& [q, t] : bound)
      if (q == &p) return t;
    ad::Tensor t = leaves ? tr->leaf(p.shape, p.value) : tr->constant(p.shape, p.value);
    bound.emplace_back(&p, t);
    return t;
  }
};

// rows of a value matrix restricted to kept sample indices
inline std::vector<double> keep_rows(const std::vector<double>& all, std::int64_t row_len,
                                     const std::vector<int>& keep) {
  std::vector<double> out;
  out.reserve(keep.size() * static_cast<std::size_t>(row_len));
  for (int m : keep)
    out.insert(out.end(), all.begin() + m * row_len, all.begin() + (m + 1) * row_len);
  return out;
}

}  // namespace detail

// Builds the full per-sample ELBO on one trace for the kept sample subset.
// eps draws are passed in as values so a rebuild that drops samples reuses
// the same randomness.
inline ElboEstimate build_elbo(ad::Trace& tr, InferenceProblem& prob,
                               const std::vector<double>& eps_f_all,
                               const std::vector<double>& eps_th_all,
                               const std::vector<int>& keep, bool train_mode, bool with_grads) {
  const int d = prob.model.dim;
  const std::int64_t t_len = static_cast<std::int64_t>(prob.mesh.size());
  const std::int64_t t_flat = prob.stack.flat_len();
  const int p = prob.params.vp.dim();
  const int n_obs_dims = static_cast<int>(prob.model.observed_dims.size());
  const std::int64_t mk = static_cast<std::int64_t>(keep.size());
  const double log2pi = std::log(2.0 * M_PI);

  detail::MemoBinder bind{&tr, with_grads, {}};
  auto binder = [&bind](flows::Param& pp) { return bind(pp); };

  ad::Tensor eps_f = tr.constant({mk, t_flat}, detail::keep_rows(eps_f_all, t_flat, keep));

  // parameter draws
  ThetaSample theta;
  ad::Tensor log_q_theta = tr.full({mk}, 0.0);
  ad::Tensor log_prior = tr.full({mk}, 0.0);
  if (p > 0) {
    ad::Tensor eps_th = tr.constant({mk, p}, detail::keep_rows(eps_th_all, p, keep));
    theta = sample_theta(tr, prob.params.vp, eps_th, binder);
    log_q_theta = theta.log_q;
    log_prior = theta.log_prior;
  }

  // scalar parameter accessors, shaped for the consumers; inferred parameters
  // are per-sample columns, fixed ones materialize at the requested shape
  auto theta_scalar = [&](const std::string& name, const ad::Shape& shape) -> ad::Tensor {
    int idx = p > 0 ? prob.params.vp.index_of(name) : -1;
    if (idx >= 0) return ad::reshape(ad::slice(theta.constrained, -1, idx, 1), shape);
    return tr.full(shape, prob.params.fixed_value(name));
  };

  // flow sample
  ad::Tensor* theta_in = nullptr;
  ad::Tensor theta_u;
  if (p > 0) {
    theta_u = theta.unconstrained;
    theta_in = &theta_u;
  }
  auto flow = prob.stack.forward(tr, eps_f, theta_in, prob.feats, train_mode, binder);

  // stationary force covariance (per sample when hyperparameters are inferred)
  bool qc_per_sample = (p > 0) && (prob.params.vp.index_of("lambda") >= 0 ||
                                   prob.params.vp.index_of("v") >= 0);
  std::int64_t bq = qc_per_sample ? mk : 1;
  ad::Tensor lam_qc = theta_scalar("lambda", {bq, 1, 1});
  ad::Tensor v_qc = theta_scalar("v", {bq, 1, 1});
  ad::Tensor q_c = models::force_stationary_cov(tr, prob.model.force_order, lam_qc, v_qc);

  // initial state density: force block under N(0, Qc), state rows broad
  ad::Tensor f0 = ad::reshape(ad::slice(flow.f, 1, 0, 1), {mk, d});
  ad::Tensor init_ll = tr.full({mk}, 0.0);
  {
    ad::Tensor fu = ad::slice(f0, -1, prob.model.force_start, prob.model.force_order);
    init_ll = ut::gaussian_log_density(tr, fu, ad::mul(fu, tr.scalar(0.0)), q_c);
    if (prob.model.force_start > 0) {
      ad::Tensor fx = ad::slice(f0, -1, 0, prob.model.force_start);
      double s0 = prob.opts.sigma0;
      ad::Tensor xll = ad::sub(
          ad::mul(ad::sum(ad::square(fx), -1), tr.scalar(-0.5 / (s0 * s0))),
          tr.scalar(double(prob.model.force_start) * (std::log(s0) + 0.5 * log2pi)));
      init_ll = ad::add(init_ll, xll);
    }
  }

  // transition terms
  models::ThetaAccess dyn_theta{[&](const std::string& n) {
    return theta_scalar(n, {p > 0 && prob.params.vp.index_of(n) >= 0 ? mk : 1, 1, 1, 1});
  }};
  ad::Tensor f_head = ad::slice(flow.f, 1, 0, t_len - 1);
  ad::Tensor f_tail = ad::slice(flow.f, 1, 1, t_len - 1);
  auto tm = ut::euler_transition_moments(tr, prob.model, f_head, dyn_theta, q_c, prob.dt(),
                                         prob.opts.transition);
  ad::Tensor trans_ll = ad::sum(ut::gaussian_log_density(tr, f_tail, tm.mean, tm.cov), -1);

  // likelihood over observed dimensions (contiguous from zero by construction)
  for (int o = 0; o < n_obs_dims; ++o)
    if (prob.model.observed_dims[static_cast<std::size_t>(o)] != o)
      throw ConfigError("observed dimensions must be the leading state rows");
  ad::Tensor f_obs = ad::slice(flow.f, -1, 0, n_obs_dims);  // [Mk, T, p_obs]
  std::vector<double> yv, mv;
  yv.reserve(static_cast<std::size_t>(t_len * n_obs_dims));
  for (std::int64_t k = 0; k < t_len; ++k)
    for (int o = 0; o < n_obs_dims; ++o) {
      bool on = prob.mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)] != 0;
      yv.push_back(on ? prob.y[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)] : 0.0);
      mv.push_back(on ? 1.0 : 0.0);
    }
  ad::Tensor y_c = tr.constant({1, t_len, n_obs_dims}, yv);
  ad::Tensor m_c = tr.constant({1, t_len, n_obs_dims}, mv);

  ad::Tensor lik_ll;
  if (prob.model.likelihood.kind == models::LikelihoodSpec::Kind::Gaussian) {
    ad::Tensor sigma2;
    if (prob.model.likelihood.infer_sigma2) {
      sigma2 = theta_scalar("sigma2", {mk, 1, 1});
    } else {
      sigma2 = tr.scalar(prob.model.likelihood.sigma2);
    }
    ad::Tensor resid = ad::mul(ad::sub(y_c, f_obs), m_c);
    ad::Tensor quad = ad::mul(ad::div(ad::square(resid), sigma2), tr.scalar(-0.5));
    ad::Tensor norm =
        ad::mul(m_c, ad::mul(ad::add(ad::log(sigma2), tr.scalar(log2pi)), tr.scalar(-0.5)));
    lik_ll = ad::sum(ad::sum(ad::add(quad, norm), -1), -1);
  } else {
    // Poisson with exp link on the masked elements; exp is evaluated on the
    // masked argument so latent excursions elsewhere cannot overflow
    ad::Tensor fm = ad::mul(f_obs, m_c);
    ad::Tensor rate_term = ad::mul(m_c, ad::exp(fm));
    double lgamma_sum = 0.0;
    for (std::int64_t k = 0; k < t_len; ++k)
      for (int o = 0; o < n_obs_dims; ++o)
        if (prob.mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)] != 0) {
          double yy = prob.y[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)];
          if (yy < 0.0 || std::floor(yy) != yy)
            throw DataError("poisson likelihood requires non-negative integer counts");
          lgamma_sum += std::lgamma(yy + 1.0);
        }
    ad::Tensor raw = ad::sub(ad::mul(y_c, fm), rate_term);
    lik_ll = ad::sub(ad::sum(ad::sum(raw, -1), -1), tr.scalar(lgamma_sum));
  }

  ad::Tensor per_sample = ad::add(
      ad::add(ad::add(log_prior, init_ll), ad::add(trans_ll, lik_ll)),
      ad::neg(ad::add(log_q_theta, flow.log_q)));

  ElboEstimate out;
  out.objective = ad::mean(per_sample);
  out.bound = std::move(bind.bound);
  out.f = flow.f;
  if (p > 0) out.theta_constrained = theta.constrained;
  out.per_sample_values = per_sample.val();

  const auto& ps = out.per_sample_values;
  double mean = 0.0;
  for (double x : ps) mean += x;
  mean /= double(ps.size());
  double var = 0.0;
  for (double x : ps) var += (x - mean) * (x - mean);
  var = ps.size() > 1 ? var / double(ps.size() - 1) : 0.0;
  out.value = mean;
  out.se = std::sqrt(var / double(ps.size()));
  return out;
}

// M-sample estimator with non-finite sample dropping: a bad draw is excluded
// and the trace rebuilt on the same randomness (batch statistics couple
// samples, so masking after the fact would poison shared gradients).
inline ElboEstimate elbo_estimate(InferenceProblem& prob, std::uint64_t seed, bool train_mode,
                                  bool with_grads, ad::Trace& tr) {
  const int m = prob.opts.mc_samples;
  if (m < 1) throw ConfigError("elbo_estimate needs at least one Monte Carlo sample");
  const std::int64_t t_flat = prob.stack.flat_len();
  const int p = prob.params.vp.dim();

  Rng rng = Rng(seed);
  std::vector<double> eps_f(static_cast<std::size_t>(m * t_flat));
  for (auto& x : eps_f) x = rng.normal();
  std::vector<double> eps_th(static_cast<std::size_t>(m * std::max(p, 1)));
  for (auto& x : eps_th) x = rng.normal();

  std::vector<int> keep(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) keep[static_cast<std::size_t>(i)] = i;

  const bool bn = prob.stack.config().batchnorm;

  // per-sample probe with batch statistics off, used when the batched pass
  // cannot attribute a failure to individual draws
  auto probe_finite = [&](const std::vector<int>& cand) {
    std::vector<int> ok;
    for (int mi : cand) {
      ad::Trace probe;
      try {
        auto one = build_elbo(probe, prob, eps_f, eps_th, {mi}, false, false);
        if (std::isfinite(one.value)) ok.push_back(mi);
      } catch (const NumericalError&) {
      }
    }
    return ok;
  };

  for (int attempt = 0; attempt < 4; ++attempt) {
    tr.clear();
    bool mode = train_mode && (!bn || static_cast<int>(keep.size()) >= 2);
    ElboEstimate est;
    bool built = false;
    try {
      est = build_elbo(tr, prob, eps_f, eps_th, keep, mode, with_grads);
      built = true;
    } catch (const NumericalError&) {
    }
    if (built) {
      std::vector<int> ok;
      for (std::size_t i = 0; i < keep.size(); ++i)
        if (std::isfinite(est.per_sample_values[i])) ok.push_back(keep[i]);
      if (ok.size() == keep.size()) {
        est.dropped = m - static_cast<int>(keep.size());
        return est;
      }
      if (!ok.empty() && ok.size() < keep.size()) {
        keep = std::move(ok);
        continue;
      }
    }
    // whole batch failed (batch statistics couple the samples); probe singly
    std::vector<int> ok = probe_finite(keep);
    if (ok.empty()) throw NumericalError("all Monte Carlo samples non-finite");
    if (ok.size() == keep.size() && built)
      throw NumericalError("elbo non-finite despite finite per-sample passes");
    keep = std::move(ok);
  }
  throw NumericalError("elbo estimate stayed non-finite after sample drops");
}

struct AdamOptions {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 10.0;
};

struct AdamState {
  std::vector<std::vector<double>> m1, m2;
  long step = 0;

  void init(const std::vector<flows::Param*>& params) {
    m1.clear();
    m2.clear();
    for (auto* p : params) {
      m1.emplace_back(p->value.size(), 0.0);
      m2.emplace_back(p->value.size(), 0.0);
    }
    step = 0;
  }
};

// scales gradients in place to the clip norm; returns the pre-clip norm
inline double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

struct EpochStats {
  int epoch = 0;
  double elbo = 0.0;
  double se = 0.0;
  double grad_norm = 0.0;
  int dropped = 0;
};

struct TrainOptions {
  AdamOptions adam;
  int epochs = 3000;
  std::uint64_t seed = 0;
  int eval_every = 0;       // 0 disables checkpoint evaluation
  int eval_samples = 256;
};

struct TrainResult {
  std::vector<EpochStats> trace;
  std::vector<EpochStats> eval_trace;  // checkpoint estimates on eval_samples
  int aborted_epoch = -1;
};

inline TrainResult train(InferenceProblem& prob, const TrainOptions& opt,
                         const std::function<void(int, const EpochStats&)>& on_epoch = nullptr) {
  TrainResult result;
  auto params = [&] {
    auto ps = prob.stack.parameters();
    if (prob.params.vp.dim() > 0) {
      ps.push_back(&prob.params.vp.mu);
      ps.push_back(&prob.params.vp.s_raw);
    }
    return ps;
  }();
  AdamState adam;
  adam.init(params);

  Rng base(opt.seed);
  int consecutive_failures = 0;
  ad::Trace tr;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::uint64_t step_seed = base.substream("fit").substream(static_cast<std::uint64_t>(epoch)).seed();
    ElboEstimate est;
    try {
      est = elbo_estimate(prob, step_seed, true, true, tr);
      consecutive_failures = 0;
    } catch (const NumericalError&) {
      if (++consecutive_failures >= 3) {
        result.aborted_epoch = epoch;
        throw NumericalError("training aborted after 3 consecutive all-dropped epochs (epoch " +
                             std::to_string(epoch) + ")");
      }
      EpochStats stats{epoch, result.trace.empty() ? 0.0 : result.trace.back().elbo, 0.0, 0.0,
                       prob.opts.mc_samples};
      result.trace.push_back(stats);
      continue;
    }

    tr.backward(est.objective);
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (auto* p : params) {
      bool found = false;
      for (auto& [q, t] : est.bound)
        if (q == p) {
          grads.push_back(t.grad());
          found = true;
          break;
        }
      if (!found) grads.emplace_back(p->value.size(), 0.0);
    }
    double gnorm = clip_global_norm(grads, opt.adam.clip_norm);

    // ascent on the bound
    adam.step += 1;
    double bc1 = 1.0 - std::pow(opt.adam.beta1, double(adam.step));
    double bc2 = 1.0 - std::pow(opt.adam.beta2, double(adam.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& pv = params[i]->value;
      auto& g = grads[i];
      auto& m1 = adam.m1[i];
      auto& m2 = adam.m2[i];
      for (std::size_t j = 0; j < pv.size(); ++j) {
        m1[j] = opt.adam.beta1 * m1[j] + (1.0 - opt.adam.beta1) * g[j];
        m2[j] = opt.adam.beta2 * m2[j] + (1.0 - opt.adam.beta2) * g[j] * g[j];
        double mhat = m1[j] / bc1;
        double vhat = m2[j] / bc2;
        pv[j] += opt.adam.lr * mhat / (std::sqrt(vhat) + opt.adam.eps);
      }
    }

    EpochStats stats{epoch, est.value, est.se, gnorm, est.dropped};
    result.trace.push_back(stats);
    if (on_epoch) on_epoch(epoch, stats);

    if (opt.eval_every > 0 &&
        (epoch % opt.eval_every == 0 || epoch + 1 == opt.epochs)) {
      ElboOptions saved = prob.opts;
      prob.opts.mc_samples = opt.eval_samples;
      ad::Trace etr;
      auto ev = elbo_estimate(prob, base.substream("eval").substream(static_cast<std::uint64_t>(epoch)).seed(),
                              false, false, etr);
      prob.opts = saved;
      result.eval_trace.push_back(EpochStats{epoch, ev.value, ev.se, 0.0, ev.dropped});
    }
  }
  return result;
}

// posterior path draws from the trained flow (batch-norm in eval mode)
inline std::vector<std::vector<double>> sample_posterior_paths(InferenceProblem& prob,
                                                               int n_samples,
                                                               std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  const std::int64_t t_flat = prob.stack.flat_len();
  const int p = prob.params.vp.dim();
  Rng rng(seed);
  const int chunk = 64;
  for (int s0 = 0; s0 < n_samples; s0 += chunk) {
    int mk = std::min(chunk, n_samples - s0);
    std::vector<double> eps_f(static_cast<std::size_t>(mk) * t_flat);
    for (auto& x : eps_f) x = rng.normal();
    ad::Trace tr;
    ad::Tensor eps = tr.constant({mk, t_flat}, eps_f);
    detail::MemoBinder bind{&tr, false, {}};
    auto binder = [&bind](flows::Param& pp) { return bind(pp); };
    ad::Tensor theta_u;
    ad::Tensor* theta_in = nullptr;
    if (p > 0) {
      std::vector<double> eps_th(static_cast<std::size_t>(mk * p));
      for (auto& x : eps_th) x = rng.normal();
      auto ts = sample_theta(tr, prob.params.vp, tr.constant({mk, p}, eps_th), binder);
      theta_u = ts.unconstrained;
      theta_in = &theta_u;
    }
    auto flow = prob.stack.forward(tr, eps, theta_in, prob.feats, false, binder);
    const auto& fv = flow.f.val();
    std::int64_t path_len = flow.f.size() / mk;
    for (int i = 0; i < mk; ++i)
      out.emplace_back(fv.begin() + i * path_len, fv.begin() + (i + 1) * path_len);
  }
  return out;
}

// constrained parameter draws from the trained mean-field posterior
inline std::vector<std::vector<double>> sample_theta_values(InferenceProblem& prob, int n_samples,
                                                            std::uint64_t seed) {
  const int p = prob.params.vp.dim();
  std::vector<std::vector<double>> out;
  if (p == 0) return out;
  Rng rng(seed);
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    std::vector<double> row(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
      double scale = ad::softplus_val(prob.params.vp.s_raw.value[static_cast<std::size_t>(i)]);
      double u = prob.params.vp.mu.value[static_cast<std::size_t>(i)] + scale * rng.normal();
      row[static_cast<std::size_t>(i)] =
          prob.params.vp.positive[static_cast<std::size_t>(i)] ? std::exp(u) : u;
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace lfm::vi
