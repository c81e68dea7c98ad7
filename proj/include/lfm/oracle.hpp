#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/models.hpp"
#include "lfm/ssm_gp.hpp"
#include "lfm/unscented.hpp"

// Linear-Gaussian chain assembly for the models whose posterior is exact.
// Euler discretization reproduces the transition moments the variational
// objective uses, so ELBO and evidence refer to the same discrete model;
// exact discretization matches the continuous-time SDE and the closed-form
// GP oracle.

namespace lfm::oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Discretization { Euler, Exact };

inline MatrixXd dynamics_matrix(const models::ModelSpec& model,
                                const std::map<std::string, double>& theta) {
  const int d = model.dim;
  std::vector<double> zero(static_cast<std::size_t>(d), 0.0);
  auto d0 = models::joint_dynamics(model, zero, 0.0, theta);
  for (double x : d0)
    if (std::fabs(x) > 1e-12)
      throw NumericalError("dynamics_matrix: model has a constant drift term");
  MatrixXd dm(d, d);
  for (int j = 0; j < d; ++j) {
    auto e = zero;
    e[static_cast<std::size_t>(j)] = 1.0;
    auto col = models::joint_dynamics(model, e, 0.0, theta);
    for (int i = 0; i < d; ++i) dm(i, j) = col[static_cast<std::size_t>(i)];
  }
  return dm;
}

// initial moments shared by the variational objective and the oracle:
// broad Gaussian on state rows, stationary GP covariance on the force block
inline void initial_moments(const models::ModelSpec& model,
                            const std::map<std::string, double>& theta, double sigma0,
                            VectorXd& m0, MatrixXd& p0) {
  const int d = model.dim;
  m0 = VectorXd::Zero(d);
  p0 = MatrixXd::Zero(d, d);
  for (int i = 0; i < model.force_start; ++i) p0(i, i) = sigma0 * sigma0;
  auto gp = ssm::matern_ssm(model.force_order, theta.at("lambda"), theta.at("v"));
  p0.block(model.force_start, model.force_start, model.force_order, model.force_order) = gp.p_inf;
}

inline ssm::LinearSsm assemble(const models::ModelSpec& model,
                               const std::map<std::string, double>& theta,
                               const std::vector<double>& mesh, Discretization disc,
                               const ut::TransitionParams& tp, double sigma0, double sigma2) {
  if (!model.linear)
    throw ConfigError("exact inference requires linear dynamics; model '" + model.name +
                      "' is non-linear");
  const int d = model.dim;
  const int t_len = static_cast<int>(mesh.size());
  if (t_len < 2) throw ConfigError("assemble: mesh needs at least two points");

  ssm::LinearSsm out;
  initial_moments(model, theta, sigma0, out.m0, out.p0);
  out.h = MatrixXd::Zero(static_cast<int>(model.observed_dims.size()), d);
  for (int o = 0; o < static_cast<int>(model.observed_dims.size()); ++o)
    out.h(o, model.observed_dims[static_cast<std::size_t>(o)]) = 1.0;
  out.r = sigma2;

  MatrixXd dm = dynamics_matrix(model, theta);
  out.a.reserve(static_cast<std::size_t>(t_len - 1));
  out.q.reserve(static_cast<std::size_t>(t_len - 1));

  if (disc == Discretization::Exact) {
    // physical discretization: white-noise loading with spectral density q
    auto gp = ssm::matern_ssm(model.force_order, theta.at("lambda"), theta.at("v"));
    MatrixXd load = MatrixXd::Zero(d, d);
    int noise_row = model.force_start + model.force_order - 1;
    load(noise_row, noise_row) = gp.q;
    MatrixXd p_inf = ssm::lyapunov_solve(dm, load);
    for (int k = 0; k + 1 < t_len; ++k) {
      double dt = mesh[static_cast<std::size_t>(k + 1)] - mesh[static_cast<std::size_t>(k)];
      if (!(dt > 0.0)) throw ConfigError("assemble: mesh must be strictly increasing");
      MatrixXd a = ssm::expm_pade6(dt * dm);
      MatrixXd q = p_inf - a * p_inf * a.transpose();
      out.a.push_back(a);
      out.q.push_back(0.5 * (q + q.transpose()));
    }
  } else {
    // the discrete model the ELBO actually targets
    for (int k = 0; k + 1 < t_len; ++k) {
      double dt = mesh[static_cast<std::size_t>(k + 1)] - mesh[static_cast<std::size_t>(k)];
      if (!(dt > 0.0)) throw ConfigError("assemble: mesh must be strictly increasing");
      VectorXd f0 = VectorXd::Zero(d);
      auto mom = ut::euler_moment_step(model, f0, theta, mesh[static_cast<std::size_t>(k)], dt, tp);
      out.a.push_back(MatrixXd::Identity(d, d) + dt * dm);
      out.q.push_back(mom.cov);
    }
  }
  return out;
}

}  // namespace lfm::oracle
