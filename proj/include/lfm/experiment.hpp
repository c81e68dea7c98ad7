#pragma once

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lfm/criticism.hpp"
#include "lfm/csv.hpp"
#include "lfm/errors.hpp"
#include "lfm/inference.hpp"
#include "lfm/models.hpp"
#include "lfm/oracle.hpp"
#include "lfm/rng.hpp"
#include "lfm/ssm_gp.hpp"

// Experiment orchestration: reproducible configs, synthetic data simulation,
// fitting, the exact linear oracle and two-sample criticism. Every run
// derives its randomness from the single config seed through named
// substreams and leaves a config_resolved.json sufficient to reproduce all
// other artifacts bit-identically.

namespace lfm::experiment {

using nlohmann::json;

struct MeshSpec {
  double t0 = 0.0;
  double t1 = 1.0;
  int steps = 2;

  std::vector<double> times() const {
    std::vector<double> out(static_cast<std::size_t>(steps));
    double dt = (t1 - t0) / double(steps - 1);
    for (int k = 0; k < steps; ++k) out[static_cast<std::size_t>(k)] = t0 + dt * k;
    return out;
  }
};

struct ParamConfig {
  bool fixed = false;
  double value = 1.0;  // fixed value, or initialization when inferred
  models::Prior prior;
  bool prior_set = false;
};

struct SimulateSpec {
  bool present = false;
  std::map<std::string, double> true_params;
  std::vector<double> obs_times;
  double noise_sigma2 = -1.0;  // negative: use the likelihood noise
  std::vector<double> x0;      // initial state-block values, zero by default
  int substeps = 2;            // force-path refinement for the RK4 integrator
};

struct Config {
  std::string model = "matern-gp";
  models::ModelOptions model_options;
  MeshSpec mesh;
  models::LikelihoodSpec likelihood;
  std::map<std::string, ParamConfig> params;
  flows::FlowConfig flows;
  vi::TrainOptions optimizer;  // epochs/lr/clip/eval cadence; seed filled from config
  int mc_samples = 8;
  ut::TransitionParams transition;
  double sigma0 = 10.0;
  double vp_init_scale = 0.1;
  int posterior_draws = 200;
  int theta_draws = 10000;
  ssm::SpectralConstant spectral = ssm::SpectralConstant::VarianceConsistent;
  std::string lengthscale_convention = "paper";
  std::uint64_t seed = 0;
};

namespace detail {

inline double get_num(const json& j, const char* key, double dflt) {
  if (!j.contains(key)) return dflt;
  if (!j[key].is_number()) throw ConfigError(std::string("config field '") + key + "' must be numeric");
  return j[key].get<double>();
}

inline models::Prior parse_prior(const json& j) {
  models::Prior p;
  std::string fam = j.value("family", "log-normal");
  if (fam == "log-normal") {
    p.family = models::Prior::Family::LogNormal;
  } else if (fam == "normal") {
    p.family = models::Prior::Family::Normal;
  } else {
    throw ConfigError("unsupported prior family '" + fam + "'");
  }
  p.loc = get_num(j, "loc", 0.0);
  p.scale = get_num(j, "scale", 1.0);
  if (!(p.scale > 0.0)) throw ConfigError("prior scale must be positive");
  return p;
}

inline json prior_json(const models::Prior& p) {
  return json{{"family", p.family == models::Prior::Family::LogNormal ? "log-normal" : "normal"},
              {"loc", p.loc},
              {"scale", p.scale}};
}

}  // namespace detail

inline Config parse_config(const json& j) {
  Config c;
  if (!j.contains("model")) throw ConfigError("config requires a 'model' field");
  c.model = j["model"].get<std::string>();

  if (j.contains("model_options")) {
    const auto& mo = j["model_options"];
    c.model_options.matern_order =
        static_cast<int>(detail::get_num(mo, "matern_order", c.model_options.matern_order));
    if (mo.contains("gene_gamma"))
      c.model_options.gene_gamma = mo["gene_gamma"].get<std::vector<double>>();
  }

  if (!j.contains("mesh")) throw ConfigError("config requires a 'mesh' block");
  c.mesh.t0 = detail::get_num(j["mesh"], "t0", 0.0);
  c.mesh.t1 = detail::get_num(j["mesh"], "t1", 1.0);
  c.mesh.steps = static_cast<int>(detail::get_num(j["mesh"], "steps", 0));
  if (c.mesh.steps < 2) throw ConfigError("mesh.steps must be at least 2");
  if (!(c.mesh.t1 > c.mesh.t0)) throw ConfigError("mesh must have t1 > t0");

  // the registry default carries the model's likelihood; config overrides
  models::ModelSpec probe = models::builtin(c.model, c.model_options);
  c.likelihood = probe.likelihood;
  if (j.contains("likelihood")) {
    const auto& lk = j["likelihood"];
    std::string kind =
        lk.value("kind", c.likelihood.kind == models::LikelihoodSpec::Kind::Poisson ? "poisson"
                                                                                    : "gaussian");
    if (kind == "gaussian") {
      c.likelihood.kind = models::LikelihoodSpec::Kind::Gaussian;
    } else if (kind == "poisson") {
      c.likelihood.kind = models::LikelihoodSpec::Kind::Poisson;
    } else {
      throw ConfigError("unsupported likelihood kind '" + kind + "'");
    }
    c.likelihood.sigma2 = detail::get_num(lk, "sigma2", c.likelihood.sigma2);
    if (lk.contains("infer_sigma2")) c.likelihood.infer_sigma2 = lk["infer_sigma2"].get<bool>();
    if (c.likelihood.kind == models::LikelihoodSpec::Kind::Gaussian &&
        !(c.likelihood.sigma2 > 0.0) && !c.likelihood.infer_sigma2)
      throw ConfigError("gaussian likelihood requires sigma2 > 0");
  }

  // parameter table: defaults from the registry, overridden per entry
  for (const auto& ps : probe.params) {
    ParamConfig pc;
    pc.fixed = ps.default_fixed;
    pc.value = ps.default_value;
    pc.prior = ps.prior;
    c.params[ps.name] = pc;
  }
  if (c.likelihood.infer_sigma2) {
    ParamConfig pc;
    pc.fixed = false;
    pc.value = c.likelihood.sigma2 > 0.0 ? c.likelihood.sigma2 : 0.1;
    pc.prior = {models::Prior::Family::LogNormal, 0.0, 1.0};
    c.params["sigma2"] = pc;
  }
  if (j.contains("params")) {
    for (const auto& [name, pj] : j["params"].items()) {
      auto it = c.params.find(name);
      if (it == c.params.end())
        throw ConfigError("unknown parameter '" + name + "' for model '" + c.model + "'");
      if (pj.contains("fixed")) it->second.fixed = pj["fixed"].get<bool>();
      if (pj.contains("value")) it->second.value = pj["value"].get<double>();
      if (pj.contains("init")) it->second.value = pj["init"].get<double>();
      if (pj.contains("lengthscale")) {
        if (name != "lambda") throw ConfigError("lengthscale applies to the 'lambda' parameter");
        double ell = pj["lengthscale"].get<double>();
        if (!(ell > 0.0)) throw ConfigError("lengthscale must be positive");
        int n = probe.force_order;
        double num = c.lengthscale_convention == "standard" ? std::sqrt(2.0 * n - 1.0)
                                                            : std::sqrt(2.0 * n - 2.0);
        if (j.contains("lengthscale_convention"))
          num = j["lengthscale_convention"].get<std::string>() == "standard"
                    ? std::sqrt(2.0 * n - 1.0)
                    : std::sqrt(2.0 * n - 2.0);
        if (!(num > 0.0))
          throw ConfigError(
              "the paper lengthscale convention degenerates for a first-order GP; use "
              "lengthscale_convention = 'standard' or give lambda directly");
        it->second.value = num / ell;
      }
      if (pj.contains("prior")) {
        it->second.prior = detail::parse_prior(pj["prior"]);
        it->second.prior_set = true;
      }
    }
  }
  if (j.contains("lengthscale_convention")) {
    c.lengthscale_convention = j["lengthscale_convention"].get<std::string>();
    if (c.lengthscale_convention != "paper" && c.lengthscale_convention != "standard")
      throw ConfigError("lengthscale_convention must be 'paper' or 'standard'");
  }

  if (j.contains("flows")) {
    const auto& f = j["flows"];
    c.flows.n_layers = static_cast<int>(detail::get_num(f, "n_layers", 0));
    c.flows.receptive_field =
        static_cast<int>(detail::get_num(f, "receptive_field", c.flows.receptive_field));
    c.flows.channels = static_cast<int>(detail::get_num(f, "channels", c.flows.channels));
    c.flows.n_conv = static_cast<int>(detail::get_num(f, "n_conv", c.flows.n_conv));
    if (f.contains("batchnorm")) c.flows.batchnorm = f["batchnorm"].get<bool>();
  }

  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    c.optimizer.adam.lr = detail::get_num(o, "lr", c.optimizer.adam.lr);
    c.optimizer.adam.clip_norm = detail::get_num(o, "clip_norm", c.optimizer.adam.clip_norm);
    c.optimizer.epochs = static_cast<int>(detail::get_num(o, "epochs", c.optimizer.epochs));
    c.mc_samples = static_cast<int>(detail::get_num(o, "mc_samples", c.mc_samples));
    c.optimizer.eval_every = static_cast<int>(detail::get_num(o, "eval_every", 0));
    c.optimizer.eval_samples = static_cast<int>(detail::get_num(o, "eval_samples", 256));
  }
  if (c.optimizer.epochs < 1) throw ConfigError("optimizer.epochs must be positive");
  if (c.mc_samples < 1) throw ConfigError("optimizer.mc_samples must be positive");

  if (j.contains("ut")) {
    const auto& u = j["ut"];
    c.transition.ut.alpha = detail::get_num(u, "alpha", 1.0);
    c.transition.ut.beta = detail::get_num(u, "beta", 0.0);
    c.transition.ut.kappa = detail::get_num(u, "kappa", -1.0);
    std::string conv = u.value("eta_convention", "main");
    if (conv == "main") {
      c.transition.ut.eta_convention = ut::EtaConvention::Main;
    } else if (conv == "appendix") {
      c.transition.ut.eta_convention = ut::EtaConvention::Appendix;
    } else {
      throw ConfigError("ut.eta_convention must be 'main' or 'appendix'");
    }
    std::string sc = u.value("diffusion_scaling", "paper");
    if (sc == "paper") {
      c.transition.scaling = ut::DiffusionScaling::Paper;
    } else if (sc == "dt") {
      c.transition.scaling = ut::DiffusionScaling::Dt;
    } else {
      throw ConfigError("ut.diffusion_scaling must be 'paper' or 'dt'");
    }
    c.transition.var_floor = detail::get_num(u, "var_floor", 1e-8);
  }

  if (j.contains("init")) {
    c.sigma0 = detail::get_num(j["init"], "sigma0", c.sigma0);
    c.vp_init_scale = detail::get_num(j["init"], "vp_scale", c.vp_init_scale);
    if (!(c.sigma0 > 0.0 && std::isfinite(c.sigma0)))
      throw ConfigError("init.sigma0 must be finite and positive");
  }
  if (j.contains("sampling")) {
    c.posterior_draws =
        static_cast<int>(detail::get_num(j["sampling"], "posterior_draws", c.posterior_draws));
    c.theta_draws =
        static_cast<int>(detail::get_num(j["sampling"], "theta_draws", c.theta_draws));
  }
  if (j.contains("spectral_constant")) {
    std::string sc = j["spectral_constant"].get<std::string>();
    if (sc == "variance-consistent") {
      c.spectral = ssm::SpectralConstant::VarianceConsistent;
    } else if (sc == "paper") {
      c.spectral = ssm::SpectralConstant::Literal;
    } else {
      throw ConfigError("spectral_constant must be 'variance-consistent' or 'paper'");
    }
  }
  if (!j.contains("seed")) throw ConfigError("config requires a 'seed'");
  c.seed = j["seed"].get<std::uint64_t>();
  c.optimizer.seed = c.seed;
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
  return parse_config(j);
}

inline SimulateSpec parse_simulate(const json& j) {
  SimulateSpec s;
  if (!j.contains("simulate")) return s;
  const auto& sj = j["simulate"];
  s.present = true;
  if (sj.contains("true_params"))
    for (const auto& [k, v] : sj["true_params"].items()) s.true_params[k] = v.get<double>();
  if (!sj.contains("obs_times")) throw ConfigError("simulate block requires obs_times");
  s.obs_times = sj["obs_times"].get<std::vector<double>>();
  s.noise_sigma2 = detail::get_num(sj, "noise_sigma2", -1.0);
  if (sj.contains("x0")) s.x0 = sj["x0"].get<std::vector<double>>();
  s.substeps = static_cast<int>(detail::get_num(sj, "substeps", 2));
  if (s.substeps < 1) throw ConfigError("simulate.substeps must be >= 1");
  return s;
}

// materialize every default back into a complete document
inline json resolve_config(const Config& c, const SimulateSpec& sim) {
  json j;
  j["model"] = c.model;
  j["model_options"] = {{"matern_order", c.model_options.matern_order},
                        {"gene_gamma", c.model_options.gene_gamma}};
  j["mesh"] = {{"t0", c.mesh.t0}, {"t1", c.mesh.t1}, {"steps", c.mesh.steps}};
  j["likelihood"] = {
      {"kind", c.likelihood.kind == models::LikelihoodSpec::Kind::Poisson ? "poisson" : "gaussian"},
      {"sigma2", c.likelihood.sigma2},
      {"infer_sigma2", c.likelihood.infer_sigma2}};
  json pj;
  for (const auto& [name, pc] : c.params)
    pj[name] = {{"fixed", pc.fixed}, {"value", pc.value}, {"prior", detail::prior_json(pc.prior)}};
  j["params"] = pj;
  j["flows"] = {{"n_layers", c.flows.n_layers},
                {"receptive_field", c.flows.receptive_field},
                {"channels", c.flows.channels},
                {"n_conv", c.flows.n_conv},
                {"batchnorm", c.flows.batchnorm}};
  j["optimizer"] = {{"lr", c.optimizer.adam.lr},
                    {"clip_norm", c.optimizer.adam.clip_norm},
                    {"epochs", c.optimizer.epochs},
                    {"mc_samples", c.mc_samples},
                    {"eval_every", c.optimizer.eval_every},
                    {"eval_samples", c.optimizer.eval_samples}};
  j["ut"] = {{"alpha", c.transition.ut.alpha},
             {"beta", c.transition.ut.beta},
             {"kappa", c.transition.ut.kappa},
             {"eta_convention",
              c.transition.ut.eta_convention == ut::EtaConvention::Main ? "main" : "appendix"},
             {"diffusion_scaling",
              c.transition.scaling == ut::DiffusionScaling::Paper ? "paper" : "dt"},
             {"var_floor", c.transition.var_floor}};
  j["init"] = {{"sigma0", c.sigma0}, {"vp_scale", c.vp_init_scale}};
  j["sampling"] = {{"posterior_draws", c.posterior_draws}, {"theta_draws", c.theta_draws}};
  j["spectral_constant"] =
      c.spectral == ssm::SpectralConstant::VarianceConsistent ? "variance-consistent" : "paper";
  j["lengthscale_convention"] = c.lengthscale_convention;
  j["seed"] = c.seed;
  if (sim.present) {
    json sj;
    sj["true_params"] = sim.true_params;
    sj["obs_times"] = sim.obs_times;
    sj["noise_sigma2"] = sim.noise_sigma2;
    sj["x0"] = sim.x0;
    sj["substeps"] = sim.substeps;
    j["simulate"] = sj;
  }
  return j;
}

// ---------------------------------------------------------------------------
// data files

struct DataSet {
  std::vector<double> t;
  std::vector<std::vector<double>> y;  // [T][p]
  std::vector<std::vector<int>> mask;  // [T][p]
};

inline void write_data(const std::string& path, const DataSet& d) {
  csv::Table t;
  const int p = d.y.empty() ? 0 : static_cast<int>(d.y[0].size());
  t.header.push_back("t");
  for (int o = 0; o < p; ++o) t.header.push_back("y" + std::to_string(o));
  for (int o = 0; o < p; ++o) t.header.push_back("mask" + std::to_string(o));
  for (std::size_t k = 0; k < d.t.size(); ++k) {
    std::vector<double> row;
    row.push_back(d.t[k]);
    for (int o = 0; o < p; ++o) row.push_back(d.y[k][static_cast<std::size_t>(o)]);
    for (int o = 0; o < p; ++o) row.push_back(double(d.mask[k][static_cast<std::size_t>(o)]));
    t.rows.push_back(std::move(row));
  }
  csv::write(path, t);
}

inline DataSet read_data(const std::string& path, int n_outputs) {
  auto t = csv::read(path);
  if (static_cast<int>(t.header.size()) != 1 + 2 * n_outputs)
    throw DataError(path + ": expected 1 + 2*" + std::to_string(n_outputs) + " columns, found " +
                    std::to_string(t.header.size()));
  if (t.header[0] != "t") throw DataError(path + ": first column must be 't'");
  DataSet d;
  double prev = -std::numeric_limits<double>::infinity();
  long line = 1;
  for (const auto& row : t.rows) {
    ++line;
    if (!(row[0] > prev))
      throw DataError(path + ":" + std::to_string(line) + ": time stamps must increase strictly");
    prev = row[0];
    d.t.push_back(row[0]);
    std::vector<double> yr(static_cast<std::size_t>(n_outputs));
    std::vector<int> mr(static_cast<std::size_t>(n_outputs));
    for (int o = 0; o < n_outputs; ++o) {
      yr[static_cast<std::size_t>(o)] = row[static_cast<std::size_t>(1 + o)];
      double mv = row[static_cast<std::size_t>(1 + n_outputs + o)];
      if (mv != 0.0 && mv != 1.0)
        throw DataError(path + ":" + std::to_string(line) + ": mask values must be 0 or 1");
      mr[static_cast<std::size_t>(o)] = static_cast<int>(mv);
    }
    d.y.push_back(std::move(yr));
    d.mask.push_back(std::move(mr));
  }
  return d;
}

// aligns observations onto the configured mesh (within 1e-9)
inline DataSet align_to_mesh(const DataSet& d, const std::vector<double>& mesh, int n_outputs) {
  DataSet out;
  out.t = mesh;
  out.y.assign(mesh.size(), std::vector<double>(static_cast<std::size_t>(n_outputs), 0.0));
  out.mask.assign(mesh.size(), std::vector<int>(static_cast<std::size_t>(n_outputs), 0));
  for (std::size_t i = 0; i < d.t.size(); ++i) {
    bool any = false;
    for (int o = 0; o < n_outputs; ++o) any = any || d.mask[i][static_cast<std::size_t>(o)];
    if (!any) continue;
    std::int64_t hit = -1;
    for (std::size_t k = 0; k < mesh.size(); ++k)
      if (std::fabs(mesh[k] - d.t[i]) <= 1e-9) {
        hit = static_cast<std::int64_t>(k);
        break;
      }
    if (hit < 0)
      throw DataError("observation time " + std::to_string(d.t[i]) + " is not on the mesh");
    for (int o = 0; o < n_outputs; ++o) {
      out.y[static_cast<std::size_t>(hit)][static_cast<std::size_t>(o)] =
          d.y[i][static_cast<std::size_t>(o)];
      out.mask[static_cast<std::size_t>(hit)][static_cast<std::size_t>(o)] =
          d.mask[i][static_cast<std::size_t>(o)];
    }
  }
  return out;
}

// long-format posterior sample table used by fit, oracle and criticize
struct SampleTable {
  std::vector<double> t;
  std::vector<int> dims;
  // paths[sample][time * dims.size() + dim_index]
  std::vector<std::vector<double>> paths;
};

inline void write_samples(const std::string& path, const SampleTable& s) {
  csv::Table t;
  t.header = {"sample_id", "t", "dim", "value"};
  for (std::size_t i = 0; i < s.paths.size(); ++i)
    for (std::size_t k = 0; k < s.t.size(); ++k)
      for (std::size_t di = 0; di < s.dims.size(); ++di)
        t.rows.push_back({double(i), s.t[k], double(s.dims[di]),
                          s.paths[i][k * s.dims.size() + di]});
  csv::write(path, t);
}

inline SampleTable read_samples(const std::string& path) {
  auto t = csv::read(path);
  int ci = t.col("sample_id"), ct = t.col("t"), cd = t.col("dim"), cv = t.col("value");
  if (ci < 0 || ct < 0 || cd < 0 || cv < 0)
    throw DataError(path + ": expected header sample_id,t,dim,value");
  std::vector<double> times;
  std::vector<int> dims;
  std::map<std::pair<long, std::pair<long, long>>, double> cell;  // (sample,(t_idx,d_idx))
  std::map<double, long> t_index;
  std::map<long, long> d_index;
  long n_samples = 0;
  for (const auto& row : t.rows) {
    long sid = static_cast<long>(row[static_cast<std::size_t>(ci)]);
    double tv = row[static_cast<std::size_t>(ct)];
    long dv = static_cast<long>(row[static_cast<std::size_t>(cd)]);
    if (!t_index.count(tv)) {
      t_index[tv] = static_cast<long>(times.size());
      times.push_back(tv);
    }
    if (!d_index.count(dv)) {
      d_index[dv] = static_cast<long>(dims.size());
      dims.push_back(static_cast<int>(dv));
    }
    n_samples = std::max(n_samples, sid + 1);
    cell[{sid, {t_index[tv], d_index[dv]}}] = row[static_cast<std::size_t>(cv)];
  }
  SampleTable out;
  out.t = times;
  out.dims = dims;
  out.paths.assign(static_cast<std::size_t>(n_samples),
                   std::vector<double>(times.size() * dims.size(), 0.0));
  for (const auto& [key, val] : cell) {
    out.paths[static_cast<std::size_t>(key.first)]
             [static_cast<std::size_t>(key.second.first) * dims.size() +
              static_cast<std::size_t>(key.second.second)] = val;
  }
  std::size_t expect = times.size() * dims.size() * static_cast<std::size_t>(n_samples);
  if (cell.size() != expect)
    throw DataError(path + ": incomplete sample grid (" + std::to_string(cell.size()) + " of " +
                    std::to_string(expect) + " cells)");
  return out;
}

}  // namespace lfm::experiment
