#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/models.hpp"
#include "lfm/tensor.hpp"
#include "lfm/tensor_linalg.hpp"

// Sigma points, unscented-transform weights and the Euler-discretized
// transition moments p(f_{k+1} | f_k, theta). The moment construction exists
// twice on purpose: an Eigen value-side API for tests and the linear oracle,
// and a traced batched path shared by the ELBO so gradients flow through the
// sigma points.

namespace lfm::ut {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class EtaConvention { Main, Appendix };

// The literal discrete covariance adds the diffusion both undiscounted and
// inside U; `Dt` is the dimensionally-consistent variant used by the
// oracle-consistency acceptance tests. Both share all other code.
enum class DiffusionScaling { Paper, Dt };

struct UtParams {
  double alpha = 1.0;
  double beta = 0.0;
  double kappa = -1.0;  // negative means "use the state dimension"
  EtaConvention eta_convention = EtaConvention::Main;

  double kappa_of(int d) const { return kappa < 0.0 ? double(d) : kappa; }

  double eta(int d) const {
    double k = kappa_of(d);
    double e = eta_convention == EtaConvention::Main
                   ? alpha * alpha * (double(d) + k) - k
                   : alpha * alpha * (double(d) + k) - double(d);
    if (double(d) + e <= 0.0) throw ConfigError("unscented scaling requires d + eta > 0");
    return e;
  }
};

struct UtWeights {
  VectorXd wm;  // 2d+1 mean weights
  VectorXd wc;  // 2d+1 covariance weights
  MatrixXd w;   // (2d+1)^2 covariance weight matrix
};

inline UtWeights ut_weights(int d, const UtParams& p = {}) {
  if (d < 1) throw ConfigError("ut_weights requires d >= 1");
  double eta = p.eta(d);
  int s = 2 * d + 1;
  UtWeights out;
  out.wm = VectorXd::Constant(s, 1.0 / (2.0 * (double(d) + eta)));
  out.wc = out.wm;
  out.wm(0) = eta / (double(d) + eta);
  out.wc(0) = eta / (double(d) + eta + 1.0 - p.alpha * p.alpha + p.beta);
  MatrixXd om = MatrixXd::Identity(s, s);
  for (int j = 0; j < s; ++j) om.col(j) -= out.wm;
  out.w = om * out.wc.asDiagonal() * om.transpose();
  return out;
}

// chi: d x (2d+1); column 0 is the mean, columns i and i+d symmetric about it
struct SigmaPointSet {
  MatrixXd chi;
  UtWeights weights;
};

inline SigmaPointSet sigma_points(const VectorXd& mean, const MatrixXd& cov,
                                  const UtParams& p = {}) {
  const int d = static_cast<int>(mean.size());
  double eta = p.eta(d);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (cov + cov.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("sigma_points: eigensolve failed");
  if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff()))
    throw NumericalError("sigma_points: covariance is indefinite");
  VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  MatrixXd root = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  root *= std::sqrt(double(d) + eta);

  SigmaPointSet out;
  out.weights = ut_weights(d, p);
  out.chi.resize(d, 2 * d + 1);
  out.chi.col(0) = mean;
  for (int i = 0; i < d; ++i) {
    out.chi.col(1 + i) = mean + root.col(i);
    out.chi.col(1 + d + i) = mean - root.col(i);
  }
  return out;
}

struct Moments {
  VectorXd mean;
  MatrixXd cov;
};

inline Moments unscented_transform(const std::function<VectorXd(const VectorXd&)>& g,
                                   const VectorXd& mean, const MatrixXd& cov,
                                   const UtParams& p = {}) {
  auto sp = sigma_points(mean, cov, p);
  const int s = static_cast<int>(sp.chi.cols());
  std::vector<VectorXd> ys(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i) {
    ys[static_cast<std::size_t>(i)] = g(sp.chi.col(i));
    if (!ys[static_cast<std::size_t>(i)].allFinite())
      throw NumericalError("unscented_transform: non-finite propagated point");
  }
  const int py = static_cast<int>(ys[0].size());
  Moments out;
  out.mean = VectorXd::Zero(py);
  for (int i = 0; i < s; ++i) out.mean += sp.weights.wm(i) * ys[static_cast<std::size_t>(i)];
  out.cov = MatrixXd::Zero(py, py);
  for (int i = 0; i < s; ++i) {
    VectorXd r = out.mean - ys[static_cast<std::size_t>(i)];
    out.cov += sp.weights.wc(i) * r * r.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// traced batched path

struct TransitionParams {
  UtParams ut;
  DiffusionScaling scaling = DiffusionScaling::Paper;
  double var_floor = 1e-8;
};

struct TransitionMoments {
  ad::Tensor mean;  // [M, K, d]
  ad::Tensor cov;   // [M, K, d, d], symmetrized and floored to PSD
};

namespace detail {

// Smallest-eigenvalue floor, computed on values and applied as a constant
// diagonal shift so the Cholesky downstream stays defined. The shift itself
// carries no gradient.
inline ad::Tensor floor_to_psd(ad::Trace& tr, const ad::Tensor& cov, double var_floor) {
  const ad::Shape& sh = cov.shape();
  std::int64_t d = sh[sh.size() - 1];
  std::int64_t batch = cov.size() / (d * d);
  const auto& cv = cov.val();
  std::vector<double> shift(static_cast<std::size_t>(batch * d * d), 0.0);
  Eigen::MatrixXd slice(d, d);
  bool any = false;
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* src = cv.data() + b * d * d;
    for (std::int64_t i = 0; i < d; ++i)
      for (std::int64_t j = 0; j < d; ++j) slice(i, j) = src[i * d + j];
    double lam_min;
    if (d == 1) {
      lam_min = slice(0, 0);
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(slice, Eigen::EigenvaluesOnly);
      if (es.info() != Eigen::Success)
        throw NumericalError("transition covariance eigensolve failed");
      lam_min = es.eigenvalues().minCoeff();
    }
    if (!std::isfinite(lam_min)) continue;  // non-finite sample is dropped upstream
    double c = var_floor - lam_min;
    if (c > 0.0) {
      any = true;
      for (std::int64_t i = 0; i < d; ++i)
        shift[static_cast<std::size_t>(b * d * d + i * d + i)] = c;
    }
  }
  if (!any) return cov;
  return ad::add(cov, tr.constant(sh, std::move(shift)));
}

}  // namespace detail

// One Euler step of the unscented moment dynamics, vectorized over Monte
// Carlo samples and mesh steps.
//   f_k   [M, K, d]  sampled states
//   q_c   [B, q, q]  stationary covariance of the force block, B in {1, M}
//   theta access must broadcast against [M, K, S, 1] state slices
inline TransitionMoments euler_transition_moments(ad::Trace& tr, const models::ModelSpec& model,
                                                  const ad::Tensor& f_k,
                                                  const models::ThetaAccess& theta,
                                                  const ad::Tensor& q_c, double dt,
                                                  const TransitionParams& par) {
  const int d = model.dim;
  const int qo = model.force_order;
  const int s = 2 * d + 1;
  const ad::Shape& fsh = f_k.shape();
  if (fsh.size() != 3 || fsh[2] != d) throw ShapeError("euler_transition_moments: f_k must be [M,K,d]");
  std::int64_t mdim = fsh[0], kdim = fsh[1];

  auto w = ut_weights(d, par.ut);
  double eta = par.ut.eta(d);
  double spread_scale = std::sqrt((double(d) + eta) *
                                  (par.scaling == DiffusionScaling::Dt ? dt : 1.0));

  // loading mask: rows of the force block
  std::vector<double> lt(static_cast<std::size_t>(d * qo), 0.0);
  for (int j = 0; j < qo; ++j)
    lt[static_cast<std::size_t>((model.force_start + j) * qo + j)] = 1.0;
  ad::Tensor l_tilde = tr.constant({d, qo}, lt);

  ad::Tensor chol_qc = ad::cholesky_jitter(q_c);               // [B, q, q]
  ad::Tensor root = ad::matmul(l_tilde, chol_qc);              // [B, d, q]
  ad::Tensor spread = ad::mul(root, tr.scalar(spread_scale));  // scaled columns

  std::int64_t b = spread.shape()[0];
  ad::Tensor zero_col = tr.full({b, d, 1}, 0.0);
  std::vector<ad::Tensor> cols = {zero_col, spread};
  if (d > qo) cols.push_back(tr.full({b, d, d - qo}, 0.0));
  cols.push_back(ad::neg(spread));
  if (d > qo) cols.push_back(tr.full({b, d, d - qo}, 0.0));
  ad::Tensor offsets = ad::concat(cols, -1);  // [B, d, 2d+1]

  ad::Tensor chi = ad::add(ad::reshape(f_k, {mdim, kdim, d, 1}),
                           ad::reshape(offsets, {b, 1, d, s}));  // [M, K, d, S]
  ad::Tensor chi_points = ad::transpose(chi);                    // [M, K, S, d]
  ad::Tensor de = model.dynamics(tr, chi_points, theta);         // [M, K, S, d]
  ad::Tensor de_t = ad::transpose(de);                           // [M, K, d, S]

  std::vector<double> wmv(w.wm.data(), w.wm.data() + s);
  ad::Tensor wm_col = tr.constant({s, 1}, wmv);
  ad::Tensor drift = ad::reshape(ad::matmul(de_t, wm_col), {mdim, kdim, d});
  ad::Tensor mean_next = ad::add(f_k, ad::mul(drift, tr.scalar(dt)));

  std::vector<double> wv(static_cast<std::size_t>(s) * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) wv[static_cast<std::size_t>(i * s + j)] = w.w(i, j);
  ad::Tensor w_mat = tr.constant({s, s}, wv);

  ad::Tensor u1 = ad::matmul(ad::matmul(chi, w_mat), de);  // [M, K, d, d]
  ad::Tensor sigma_embed =
      ad::reshape(ad::matmul(ad::matmul(l_tilde, q_c), ad::transpose(l_tilde)), {b, 1, d, d});
  ad::Tensor u = ad::add(ad::add(u1, ad::transpose(u1)), sigma_embed);

  ad::Tensor cov;
  if (par.scaling == DiffusionScaling::Paper) {
    cov = ad::add(sigma_embed, ad::mul(u, tr.scalar(dt)));
  } else {
    cov = ad::mul(u, tr.scalar(dt));
  }
  cov = ad::mul(ad::add(cov, ad::transpose(cov)), tr.scalar(0.5));
  cov = detail::floor_to_psd(tr, cov, par.var_floor);
  return {mean_next, cov};
}

// log N(x; mean, cov) along the last axis; returns [...]
inline ad::Tensor gaussian_log_density(ad::Trace& tr, const ad::Tensor& x, const ad::Tensor& mean,
                                       const ad::Tensor& cov) {
  const ad::Shape sh = x.shape();
  std::int64_t d = sh.back();
  ad::Shape rsh = sh;
  rsh.push_back(1);
  ad::Tensor r = ad::reshape(ad::sub(x, mean), rsh);
  ad::Tensor l = ad::cholesky_jitter(cov);
  ad::Tensor y = ad::tri_lower_solve(l, r);
  ad::Tensor quad = ad::sum(ad::square(ad::reshape(y, sh)), -1);
  ad::Tensor logdet = ad::sum(ad::log(ad::diag_part(l)), -1);
  double c = 0.5 * double(d) * std::log(2.0 * M_PI);
  return ad::sub(ad::sub(ad::mul(quad, tr.scalar(-0.5)), logdet), tr.scalar(c));
}

// ---------------------------------------------------------------------------
// value-level wrappers matching the per-step operation contracts

inline Moments euler_moment_step(const models::ModelSpec& model, const VectorXd& f_k,
                                 const std::map<std::string, double>& theta_vals, double /*t_k*/,
                                 double dt, const TransitionParams& par) {
  ad::Trace tr;
  const int d = model.dim;
  std::vector<double> fv(f_k.data(), f_k.data() + d);
  ad::Tensor f = tr.constant({1, 1, d}, fv);
  models::ThetaAccess th{[&](const std::string& n) {
    auto it = theta_vals.find(n);
    if (it == theta_vals.end()) throw ConfigError("euler_moment_step: missing parameter " + n);
    return tr.scalar(it->second);
  }};
  double lambda = theta_vals.at("lambda");
  double v = theta_vals.at("v");
  ad::Tensor qc = models::force_stationary_cov(tr, model.force_order,
                                               tr.constant({1, 1, 1}, {lambda}),
                                               tr.constant({1, 1, 1}, {v}));
  auto tm = euler_transition_moments(tr, model, f, th, qc, dt, par);
  Moments out;
  out.mean = VectorXd(d);
  for (int i = 0; i < d; ++i) out.mean(i) = tm.mean.val()[static_cast<std::size_t>(i)];
  out.cov = MatrixXd(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out.cov(i, j) = tm.cov.val()[static_cast<std::size_t>(i * d + j)];
  return out;
}

inline double transition_log_density(const VectorXd& f_next, const VectorXd& mean,
                                     const MatrixXd& cov) {
  ad::Trace tr;
  const int d = static_cast<int>(f_next.size());
  std::vector<double> xv(f_next.data(), f_next.data() + d);
  std::vector<double> mv(mean.data(), mean.data() + d);
  std::vector<double> cv(static_cast<std::size_t>(d) * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) cv[static_cast<std::size_t>(i * d + j)] = cov(i, j);
  ad::Tensor ll = gaussian_log_density(tr, tr.constant({d}, xv), tr.constant({d}, mv),
                                       tr.constant({d, d}, cv));
  return ll.scalar();
}

}  // namespace lfm::ut
