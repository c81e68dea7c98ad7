#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>

#include "lfm/experiment.hpp"

// Subcommand drivers behind the CLI. Each writes its artifacts under an
// output directory together with the fully-resolved config that reproduces
// them.

namespace lfm::experiment {

namespace fs = std::filesystem;

inline std::map<std::string, double> point_estimates(const Config& c) {
  std::map<std::string, double> theta;
  for (const auto& [name, pc] : c.params) theta[name] = pc.value;
  return theta;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// simulate

struct SimulationResult {
  DataSet data;
  std::vector<double> mesh;
  std::vector<std::vector<double>> truth;  // [T][d], full joint state
};

inline SimulationResult simulate(const Config& c, const SimulateSpec& sim) {
  if (!sim.present) throw ConfigError("simulate requires a 'simulate' block in the config");
  auto model = models::builtin(c.model, c.model_options);
  model.likelihood = c.likelihood;
  auto mesh = c.mesh.times();
  const int t_len = static_cast<int>(mesh.size());
  const int d = model.dim;
  const double dt = mesh[1] - mesh[0];

  std::map<std::string, double> theta = point_estimates(c);
  for (const auto& [k, v] : sim.true_params) {
    if (!theta.count(k)) throw ConfigError("unknown true parameter '" + k + "'");
    theta[k] = v;
  }

  int sub = std::max(1, sim.substeps);
  if (sub % 2 != 0 && model.force_start > 0 && sub != 1)
    throw ConfigError("simulate.substeps must be even so RK4 can read midpoint force values");
  if (model.force_start > 0 && sub == 1) sub = 2;
  const int fine_len = (t_len - 1) * sub + 1;
  const double fdt = dt / double(sub);

  // exact force-block path on the fine mesh
  const int q = model.force_order;
  double lambda = theta.at("lambda");
  double v = theta.at("v");
  std::vector<std::vector<double>> force(static_cast<std::size_t>(fine_len),
                                         std::vector<double>(static_cast<std::size_t>(q), 0.0));
  Rng rng = Rng(c.seed).substream("simulate");
  if (v > 0.0) {
    auto gp = ssm::matern_ssm(q, lambda, v, c.spectral);
    auto disc = ssm::exact_discretize(gp, fdt);
    Eigen::MatrixXd p0_root = ssm::detail::psd_sqrt(gp.p_inf);
    Eigen::MatrixXd q_root = ssm::detail::psd_sqrt(disc.q);
    Eigen::VectorXd g(q), z(q);
    for (int i = 0; i < q; ++i) z(i) = rng.normal();
    g = p0_root * z;
    for (int j = 0; j < fine_len; ++j) {
      for (int i = 0; i < q; ++i) force[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = g(i);
      if (j + 1 < fine_len) {
        for (int i = 0; i < q; ++i) z(i) = rng.normal();
        g = disc.a * g + q_root * z;
      }
    }
  }

  // deterministic x-block via RK4 against the exact force path
  const int nx = model.force_start;
  std::vector<double> x(static_cast<std::size_t>(nx), 0.0);
  for (std::size_t i = 0; i < sim.x0.size() && i < x.size(); ++i) x[i] = sim.x0[i];

  SimulationResult out;
  out.mesh = mesh;
  out.truth.assign(static_cast<std::size_t>(t_len), std::vector<double>(static_cast<std::size_t>(d), 0.0));

  auto xdot = [&](const std::vector<double>& xv, int fine_idx) {
    std::vector<double> f(static_cast<std::size_t>(d));
    for (int i = 0; i < nx; ++i) f[static_cast<std::size_t>(i)] = xv[static_cast<std::size_t>(i)];
    for (int i = 0; i < q; ++i)
      f[static_cast<std::size_t>(nx + i)] =
          force[static_cast<std::size_t>(fine_idx)][static_cast<std::size_t>(i)];
    auto df = models::joint_dynamics(model, f, 0.0, theta);
    return std::vector<double>(df.begin(), df.begin() + nx);
  };

  for (int k = 0; k < t_len; ++k) {
    for (int i = 0; i < nx; ++i)
      out.truth[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)];
    for (int i = 0; i < q; ++i)
      out.truth[static_cast<std::size_t>(k)][static_cast<std::size_t>(nx + i)] =
          force[static_cast<std::size_t>(k * sub)][static_cast<std::size_t>(i)];
    if (k + 1 >= t_len || nx == 0) continue;
    // one RK4 step per mesh interval
    int j0 = k * sub, jh = k * sub + sub / 2, j1 = (k + 1) * sub;
    auto k1 = xdot(x, j0);
    std::vector<double> tmp(static_cast<std::size_t>(nx));
    for (int i = 0; i < nx; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + 0.5 * dt * k1[static_cast<std::size_t>(i)];
    auto k2 = xdot(tmp, jh);
    for (int i = 0; i < nx; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + 0.5 * dt * k2[static_cast<std::size_t>(i)];
    auto k3 = xdot(tmp, jh);
    for (int i = 0; i < nx; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + dt * k3[static_cast<std::size_t>(i)];
    auto k4 = xdot(tmp, j1);
    for (int i = 0; i < nx; ++i) {
      x[static_cast<std::size_t>(i)] +=
          dt / 6.0 *
          (k1[static_cast<std::size_t>(i)] + 2.0 * k2[static_cast<std::size_t>(i)] +
           2.0 * k3[static_cast<std::size_t>(i)] + k4[static_cast<std::size_t>(i)]);
      if (!std::isfinite(x[static_cast<std::size_t>(i)]))
        throw SimulationError("simulated state became non-finite at t = " +
                              std::to_string(mesh[static_cast<std::size_t>(k + 1)]));
    }
  }

  // observations
  const int p = static_cast<int>(model.observed_dims.size());
  out.data.t = mesh;
  out.data.y.assign(static_cast<std::size_t>(t_len), std::vector<double>(static_cast<std::size_t>(p), 0.0));
  out.data.mask.assign(static_cast<std::size_t>(t_len), std::vector<int>(static_cast<std::size_t>(p), 0));
  double noise2 = sim.noise_sigma2 >= 0.0 ? sim.noise_sigma2 : c.likelihood.sigma2;
  for (double tau : sim.obs_times) {
    std::int64_t hit = -1;
    for (int k = 0; k < t_len; ++k)
      if (std::fabs(mesh[static_cast<std::size_t>(k)] - tau) <= 1e-9) {
        hit = k;
        break;
      }
    if (hit < 0)
      throw ConfigError("observation time " + std::to_string(tau) + " is not on the mesh");
    for (int o = 0; o < p; ++o) {
      double f1 = out.truth[static_cast<std::size_t>(hit)]
                           [static_cast<std::size_t>(model.observed_dims[static_cast<std::size_t>(o)])];
      double yv;
      if (model.likelihood.kind == models::LikelihoodSpec::Kind::Poisson) {
        yv = double(rng.poisson(std::exp(f1)));
      } else {
        yv = f1 + std::sqrt(noise2) * rng.normal();
      }
      out.data.y[static_cast<std::size_t>(hit)][static_cast<std::size_t>(o)] = yv;
      out.data.mask[static_cast<std::size_t>(hit)][static_cast<std::size_t>(o)] = 1;
    }
  }
  return out;
}

inline void run_simulate(const Config& c, const SimulateSpec& sim, const std::string& out_dir) {
  auto res = simulate(c, sim);
  fs::create_directories(out_dir);
  write_data(out_dir + "/data.csv", res.data);
  csv::Table truth;
  truth.header.push_back("t");
  const int d = res.truth.empty() ? 0 : static_cast<int>(res.truth[0].size());
  for (int i = 0; i < d; ++i) truth.header.push_back("f" + std::to_string(i));
  for (std::size_t k = 0; k < res.mesh.size(); ++k) {
    std::vector<double> row{res.mesh[k]};
    row.insert(row.end(), res.truth[k].begin(), res.truth[k].end());
    truth.rows.push_back(std::move(row));
  }
  csv::write(out_dir + "/truth.csv", truth);
  write_json(out_dir + "/config_resolved.json", resolve_config(c, sim));
}

// ---------------------------------------------------------------------------
// fit

struct FitArtifacts {
  vi::TrainResult training;
  double nlpd_epoch0 = 0.0;
  double nlpd_final = 0.0;
  double elbo_final_ma50 = 0.0;
  SampleTable posterior;  // all state dimensions on the mesh
  json theta_posterior;
};

namespace detail {

inline vi::InferenceProblem make_problem(const Config& c, const DataSet& aligned) {
  auto model = models::builtin(c.model, c.model_options);
  model.likelihood = c.likelihood;

  vi::ParamBinding pb;
  std::vector<std::string> inf_names;
  std::vector<bool> inf_pos;
  std::vector<models::Prior> inf_priors;
  std::vector<double> inf_init;
  auto classify = [&](const std::string& name, bool positive) {
    auto it = c.params.find(name);
    if (it == c.params.end()) throw ConfigError("missing parameter config for '" + name + "'");
    if (it->second.fixed) {
      pb.fixed_names.push_back(name);
      pb.fixed_values.push_back(it->second.value);
    } else {
      inf_names.push_back(name);
      inf_pos.push_back(positive);
      inf_priors.push_back(it->second.prior);
      inf_init.push_back(it->second.value);
    }
  };
  for (const auto& ps : model.params) classify(ps.name, ps.positive);
  if (c.likelihood.infer_sigma2) classify("sigma2", true);
  pb.vp = vi::make_posterior(inf_names, inf_pos, inf_priors, inf_init, c.vp_init_scale);

  vi::ElboOptions eo;
  eo.mc_samples = c.mc_samples;
  eo.transition = c.transition;
  eo.sigma0 = c.sigma0;

  return vi::InferenceProblem(std::move(model), c.mesh.times(), aligned.y, aligned.mask,
                              c.flows, std::move(pb), eo, Rng(c.seed).substream("init"));
}

inline double nlpd_of_paths(const vi::InferenceProblem& prob,
                            const std::vector<std::vector<double>>& paths,
                            const DataSet& aligned) {
  const int d = prob.model.dim;
  const int p = static_cast<int>(prob.model.observed_dims.size());
  std::vector<criticism::NlpdPoint> pts;
  for (std::size_t k = 0; k < aligned.t.size(); ++k)
    for (int o = 0; o < p; ++o) {
      if (!aligned.mask[k][static_cast<std::size_t>(o)]) continue;
      criticism::NlpdPoint pt;
      pt.y = aligned.y[k][static_cast<std::size_t>(o)];
      int dim = prob.model.observed_dims[static_cast<std::size_t>(o)];
      pt.f_values.reserve(paths.size());
      for (const auto& path : paths)
        pt.f_values.push_back(path[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(dim)]);
      pts.push_back(std::move(pt));
    }
  models::LikelihoodSpec lik = prob.model.likelihood;
  return criticism::nlpd(pts, lik);
}

}  // namespace detail

inline FitArtifacts run_fit(const Config& c, const DataSet& raw, const std::string& out_dir) {
  auto model_probe = models::builtin(c.model, c.model_options);
  const int p = static_cast<int>(model_probe.observed_dims.size());
  DataSet aligned = align_to_mesh(raw, c.mesh.times(), p);
  auto prob = detail::make_problem(c, aligned);

  FitArtifacts art;
  Rng base(c.seed);
  {
    auto paths0 = vi::sample_posterior_paths(prob, c.posterior_draws,
                                             base.substream("nlpd0").seed());
    art.nlpd_epoch0 = detail::nlpd_of_paths(prob, paths0, aligned);
  }

  vi::TrainOptions topt = c.optimizer;
  topt.seed = c.seed;
  art.training = vi::train(prob, topt);

  auto paths = vi::sample_posterior_paths(prob, c.posterior_draws,
                                          base.substream("posterior").seed());
  art.nlpd_final = detail::nlpd_of_paths(prob, paths, aligned);

  int window = std::min<int>(50, static_cast<int>(art.training.trace.size()));
  double acc = 0.0;
  for (int i = 0; i < window; ++i)
    acc += art.training.trace[art.training.trace.size() - 1 - static_cast<std::size_t>(i)].elbo;
  art.elbo_final_ma50 = acc / double(window);

  art.posterior.t = prob.mesh;
  art.posterior.dims.resize(static_cast<std::size_t>(prob.model.dim));
  for (int i = 0; i < prob.model.dim; ++i) art.posterior.dims[static_cast<std::size_t>(i)] = i;
  art.posterior.paths = paths;

  // constrained parameter marginals
  json tj;
  auto draws = vi::sample_theta_values(prob, c.theta_draws, base.substream("theta").seed());
  for (int i = 0; i < prob.params.vp.dim(); ++i) {
    double mean = 0.0, var = 0.0;
    for (const auto& row : draws) mean += row[static_cast<std::size_t>(i)];
    mean /= double(draws.size());
    for (const auto& row : draws) {
      double r = row[static_cast<std::size_t>(i)] - mean;
      var += r * r;
    }
    var /= double(draws.size() - 1);
    tj[prob.params.vp.names[static_cast<std::size_t>(i)]] = {{"mean", mean},
                                                             {"sd", std::sqrt(var)},
                                                             {"fixed", false}};
  }
  for (std::size_t i = 0; i < prob.params.fixed_names.size(); ++i)
    tj[prob.params.fixed_names[i]] = {{"mean", prob.params.fixed_values[i]},
                                      {"sd", 0.0},
                                      {"fixed", true}};
  art.theta_posterior = tj;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    csv::Table trace;
    trace.header = {"epoch", "elbo", "grad_norm", "dropped_samples", "elbo_se"};
    for (const auto& st : art.training.trace)
      trace.rows.push_back({double(st.epoch), st.elbo, st.grad_norm, double(st.dropped), st.se});
    csv::write(out_dir + "/elbo_trace.csv", trace);
    if (!art.training.eval_trace.empty()) {
      csv::Table ev;
      ev.header = {"epoch", "elbo", "elbo_se", "n_samples"};
      for (const auto& st : art.training.eval_trace)
        ev.rows.push_back({double(st.epoch), st.elbo, st.se, double(topt.eval_samples)});
      csv::write(out_dir + "/eval_trace.csv", ev);
    }
    write_samples(out_dir + "/posterior_samples.csv", art.posterior);
    write_json(out_dir + "/theta_posterior.json", art.theta_posterior);
    write_json(out_dir + "/metrics.json",
               json{{"nlpd_epoch0", art.nlpd_epoch0},
                    {"nlpd_final", art.nlpd_final},
                    {"elbo_final_ma50", art.elbo_final_ma50}});
    write_json(out_dir + "/config_resolved.json", resolve_config(c, SimulateSpec{}));
  }
  return art;
}

// ---------------------------------------------------------------------------
// oracle

struct OracleArtifacts {
  double log_evidence = 0.0;
  SampleTable posterior;
  std::vector<Eigen::VectorXd> smoothed_mean;
  std::vector<Eigen::MatrixXd> smoothed_cov;
};

inline OracleArtifacts run_oracle(const Config& c, const DataSet& raw, const std::string& out_dir,
                                  oracle::Discretization disc = oracle::Discretization::Euler) {
  auto model = models::builtin(c.model, c.model_options);
  model.likelihood = c.likelihood;
  if (!model.linear)
    throw ConfigError("oracle requires linear dynamics; model '" + model.name +
                      "' has a non-linear state row");
  if (model.likelihood.kind != models::LikelihoodSpec::Kind::Gaussian)
    throw ConfigError("oracle requires a Gaussian likelihood");

  auto mesh = c.mesh.times();
  const int p = static_cast<int>(model.observed_dims.size());
  DataSet aligned = align_to_mesh(raw, mesh, p);

  auto theta = point_estimates(c);
  auto chain = oracle::assemble(model, theta, mesh, disc, c.transition, c.sigma0,
                                c.likelihood.sigma2);
  ssm::Observations obs;
  const int t_len = static_cast<int>(mesh.size());
  obs.y = Eigen::MatrixXd::Zero(t_len, p);
  obs.mask = Eigen::MatrixXi::Zero(t_len, p);
  for (int k = 0; k < t_len; ++k)
    for (int o = 0; o < p; ++o) {
      obs.y(k, o) = aligned.y[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)];
      obs.mask(k, o) = aligned.mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)];
    }
  auto filt = ssm::kalman_filter(chain, obs);
  auto sm = ssm::rts_smooth(filt, chain);
  auto draws = ssm::ffbs_sample(filt, chain, c.posterior_draws,
                                Rng(c.seed).substream("oracle"));

  OracleArtifacts art;
  art.log_evidence = filt.log_evidence;
  art.smoothed_mean = sm.mean;
  art.smoothed_cov = sm.cov;
  art.posterior.t = mesh;
  art.posterior.dims.resize(static_cast<std::size_t>(model.dim));
  for (int i = 0; i < model.dim; ++i) art.posterior.dims[static_cast<std::size_t>(i)] = i;
  for (const auto& dr : draws) {
    std::vector<double> path(static_cast<std::size_t>(t_len * model.dim));
    for (int k = 0; k < t_len; ++k)
      for (int i = 0; i < model.dim; ++i)
        path[static_cast<std::size_t>(k * model.dim + i)] = dr(k, i);
    art.posterior.paths.push_back(std::move(path));
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_samples(out_dir + "/posterior_samples.csv", art.posterior);
    write_json(out_dir + "/evidence.json", json{{"log_evidence", art.log_evidence}});
    csv::Table smt;
    smt.header = {"t", "dim", "mean", "var"};
    for (int k = 0; k < t_len; ++k)
      for (int i = 0; i < model.dim; ++i)
        smt.rows.push_back({mesh[static_cast<std::size_t>(k)], double(i),
                            sm.mean[static_cast<std::size_t>(k)](i),
                            sm.cov[static_cast<std::size_t>(k)](i, i)});
    csv::write(out_dir + "/smoothed_mean.csv", smt);
    write_json(out_dir + "/config_resolved.json", resolve_config(c, SimulateSpec{}));
  }
  return art;
}

// ---------------------------------------------------------------------------
// criticize

inline criticism::TwoSampleVerdict run_criticize(const std::string& a_path,
                                                 const std::string& b_path, int n_perm,
                                                 std::uint64_t seed, const std::string& out_path,
                                                 std::vector<int> dims = {}) {
  auto a = read_samples(a_path);
  auto b = read_samples(b_path);
  if (a.t.size() != b.t.size())
    throw DataError("criticize: sample files cover different meshes");
  for (std::size_t k = 0; k < a.t.size(); ++k)
    if (std::fabs(a.t[k] - b.t[k]) > 1e-9)
      throw DataError("criticize: sample files cover different meshes");

  if (dims.empty()) {
    for (int da : a.dims)
      for (int db : b.dims)
        if (da == db) dims.push_back(da);
    std::sort(dims.begin(), dims.end());
  }
  if (dims.empty()) throw DataError("criticize: no common dimensions to compare");

  auto restrict_to = [&](const SampleTable& s) {
    criticism::SampleMatrix m;
    std::vector<int> sel;
    for (int want : dims) {
      int found = -1;
      for (std::size_t i = 0; i < s.dims.size(); ++i)
        if (s.dims[i] == want) found = static_cast<int>(i);
      if (found < 0) throw DataError("criticize: dimension " + std::to_string(want) + " missing");
      sel.push_back(found);
    }
    for (const auto& path : s.paths) {
      std::vector<double> row;
      row.reserve(s.t.size() * sel.size());
      for (std::size_t k = 0; k < s.t.size(); ++k)
        for (int si : sel) row.push_back(path[k * s.dims.size() + static_cast<std::size_t>(si)]);
      m.rows.push_back(std::move(row));
    }
    return m;
  };

  auto verdict = criticism::two_sample_test(restrict_to(a), restrict_to(b), n_perm, 0.05,
                                            Rng(seed).substream("criticize"));
  if (!out_path.empty()) {
    write_json(out_path, json{{"mmd2", verdict.mmd2},
                              {"threshold", verdict.threshold},
                              {"reject", verdict.reject},
                              {"bandwidth", verdict.bandwidth}});
  }
  return verdict;
}

}  // namespace lfm::experiment
