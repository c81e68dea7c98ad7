#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/tensor.hpp"

// Model registry: joint companion dynamics D(f, t; theta), noise loading,
// emission and likelihood for each built-in latent force model. Dynamics are
// written against the tensor engine so they can be evaluated on batched sigma
// points with gradients intact; f carries the state on its last axis.

namespace lfm::models {

enum class BlockKind { State, Force };

struct Block {
  BlockKind kind;
  int order;
};

struct Prior {
  enum class Family { Normal, LogNormal };
  Family family = Family::Normal;
  double loc = 0.0;
  double scale = 1.0;
};

struct ParamSpec {
  std::string name;
  bool positive = true;
  Prior prior;
  double default_value = 1.0;
  bool default_fixed = false;
};

struct LikelihoodSpec {
  enum class Kind { Gaussian, Poisson };
  Kind kind = Kind::Gaussian;
  double sigma2 = 0.1;        // Gaussian observation noise when fixed
  bool infer_sigma2 = false;  // optionally promote sigma2 to a positive parameter
};

// name -> tensor already shaped to broadcast against [..., 1] state slices
struct ThetaAccess {
  std::function<ad::Tensor(const std::string&)> get;
  ad::Tensor operator()(const std::string& name) const { return get(name); }
};

using DynamicsFn =
    std::function<ad::Tensor(ad::Trace&, const ad::Tensor&, const ThetaAccess&)>;

struct ModelSpec {
  std::string name;
  std::vector<Block> layout;
  int dim = 0;
  int force_start = 0;  // first row of the GP force block
  int force_order = 0;  // SDE order of the GP prior on the force
  std::vector<int> observed_dims;
  std::vector<bool> positive_dims;  // output bijector flags per state dimension
  LikelihoodSpec likelihood;
  std::vector<ParamSpec> params;
  DynamicsFn dynamics;
  bool linear = false;  // dynamics affine in the state for fixed theta
  std::vector<double> gene_gamma;  // Michaelis constants, gene model only

  const ParamSpec* find_param(const std::string& n) const {
    for (const auto& p : params)
      if (p.name == n) return &p;
    return nullptr;
  }
};

namespace detail {

inline ad::Tensor row(const ad::Tensor& f, int i) { return ad::slice(f, -1, i, 1); }

// derivative-chain rows plus the Matern companion bottom row for a force
// block starting at `start` with the given order
inline void append_gp_rows(std::vector<ad::Tensor>& rows, ad::Trace& tr, const ad::Tensor& f,
                           int start, int order, const ad::Tensor& lambda) {
  for (int j = 0; j + 1 < order; ++j) rows.push_back(row(f, start + j + 1));
  // bottom row: -sum_i binom(order, i) lambda^(order-i) f[start+i]
  ad::Tensor acc = tr.scalar(0.0);
  ad::Tensor lam_pow = lambda;  // lambda^(order-i) built from the top down
  for (int i = order - 1; i >= 0; --i) {
    double b = 1.0;
    for (int k = 1; k <= i; ++k) b = b * double(order - i + k) / double(k);
    ad::Tensor term = ad::mul(ad::mul(lam_pow, tr.scalar(b)), row(f, start + i));
    acc = ad::add(acc, term);
    if (i > 0) lam_pow = ad::mul(lam_pow, lambda);
  }
  rows.push_back(ad::neg(acc));
}

}  // namespace detail

// Stationary covariance of the Matern force block as a traced expression so
// hyperparameter gradients survive; verified against the Lyapunov solve in
// the test suite. lambda and v must arrive shaped [..., 1, 1]; the result has
// shape [..., order, order].
inline ad::Tensor force_stationary_cov(ad::Trace& tr, int order, const ad::Tensor& lambda,
                                       const ad::Tensor& v) {
  ad::Tensor zero = ad::mul(v, tr.scalar(0.0));
  ad::Tensor l2 = ad::square(lambda);
  switch (order) {
    case 1:
      return v;
    case 2: {
      ad::Tensor vl2 = ad::mul(v, l2);
      ad::Tensor r0 = ad::concat({v, zero}, -1);
      ad::Tensor r1 = ad::concat({zero, vl2}, -1);
      return ad::concat({r0, r1}, -2);
    }
    case 3: {
      ad::Tensor k = ad::mul(v, ad::mul(l2, tr.scalar(1.0 / 3.0)));  // v l^2 / 3
      ad::Tensor vl4 = ad::mul(v, ad::square(l2));
      ad::Tensor r0 = ad::concat({v, zero, ad::neg(k)}, -1);
      ad::Tensor r1 = ad::concat({zero, k, zero}, -1);
      ad::Tensor r2 = ad::concat({ad::neg(k), zero, vl4}, -1);
      return ad::concat({r0, r1, r2}, -2);
    }
    default:
      throw ConfigError("force_stationary_cov supports orders 1..3");
  }
}

struct ModelOptions {
  int matern_order = 2;
  std::vector<double> gene_gamma = {1.0, 1.0, 1.0, 1.0, 1.0};
};

inline ModelSpec make_matern_gp(int order, LikelihoodSpec lik) {
  if (order < 1 || order > 3) throw ConfigError("matern-gp order must be in 1..3");
  ModelSpec m;
  m.name = "matern-gp";
  m.linear = true;
  m.layout = {{BlockKind::Force, order}};
  m.dim = order;
  m.force_start = 0;
  m.force_order = order;
  m.observed_dims = {0};
  m.positive_dims.assign(static_cast<std::size_t>(order), false);
  m.likelihood = lik;
  m.params = {
      {"lambda", true, {Prior::Family::LogNormal, 0.0, 1.0}, 1.0, true},
      {"v", true, {Prior::Family::LogNormal, 0.0, 1.0}, 1.0, true},
  };
  m.dynamics = [order](ad::Trace& tr, const ad::Tensor& f, const ThetaAccess& th) {
    std::vector<ad::Tensor> rows;
    detail::append_gp_rows(rows, tr, f, 0, order, th("lambda"));
    return ad::concat(rows, -1);
  };
  return m;
}

inline ModelSpec make_spring() {
  ModelSpec m;
  m.name = "spring";
  m.linear = true;
  m.layout = {{BlockKind::State, 2}, {BlockKind::Force, 2}};
  m.dim = 4;
  m.force_start = 2;
  m.force_order = 2;
  m.observed_dims = {0};
  m.positive_dims.assign(4, false);
  m.likelihood.kind = LikelihoodSpec::Kind::Gaussian;
  m.params = {
      {"alpha0", true, {Prior::Family::LogNormal, 0.0, 1.0}, 2.0, true},
      {"alpha1", true, {Prior::Family::LogNormal, 0.0, 1.0}, 0.5, true},
      {"lambda", true, {Prior::Family::LogNormal, 0.0, 1.0}, 1.0, true},
      {"v", true, {Prior::Family::LogNormal, 0.0, 1.0}, 1.0, true},
  };
  m.dynamics = [](ad::Trace& tr, const ad::Tensor& f, const ThetaAccess& th) {
    std::vector<ad::Tensor> rows;
    rows.push_back(detail::row(f, 1));
    // x'' = -alpha0 x - alpha1 x' + u
    ad::Tensor acc = ad::neg(ad::mul(th("alpha0"), detail::row(f, 0)));
    acc = ad::sub(acc, ad::mul(th("alpha1"), detail::row(f, 1)));
    acc = ad::add(acc, detail::row(f, 2));
    rows.push_back(acc);
    detail::append_gp_rows(rows, tr, f, 2, 2, th("lambda"));
    return ad::concat(rows, -1);
  };
  return m;
}

inline ModelSpec make_toy() {
  ModelSpec m;
  m.name = "toy";
  m.layout = {{BlockKind::State, 1}, {BlockKind::Force, 2}};
  m.dim = 3;
  m.force_start = 1;
  m.force_order = 2;
  m.observed_dims = {0};
  m.positive_dims.assign(3, false);
  m.likelihood.kind = LikelihoodSpec::Kind::Gaussian;
  m.params = {
      {"omega", true, {Prior::Family::LogNormal, 0.0, 0.75}, 2.0, false},
      {"v", true, {Prior::Family::LogNormal, -1.0, 0.75}, 0.25, false},
      {"lambda", true, {Prior::Family::LogNormal, 0.0, 0.75}, 1.0, false},
  };
  m.dynamics = [](ad::Trace& tr, const ad::Tensor& f, const ThetaAccess& th) {
    std::vector<ad::Tensor> rows;
    // x' = -(2/3) sin(omega x) + u
    ad::Tensor sx = ad::sin(ad::mul(th("omega"), detail::row(f, 0)));
    rows.push_back(ad::add(ad::mul(sx, tr.scalar(-2.0 / 3.0)), detail::row(f, 1)));
    detail::append_gp_rows(rows, tr, f, 1, 2, th("lambda"));
    return ad::concat(rows, -1);
  };
  return m;
}

inline ModelSpec make_gene(const std::vector<double>& gamma) {
  const int n_genes = 5;
  if (static_cast<int>(gamma.size()) != n_genes)
    throw ConfigError("gene model expects 5 Michaelis constants");
  for (double g : gamma)
    if (!(g > 0.0)) throw ConfigError("Michaelis constants must be positive");
  ModelSpec m;
  m.name = "gene";
  for (int d = 0; d < n_genes; ++d) m.layout.push_back({BlockKind::State, 1});
  m.layout.push_back({BlockKind::Force, 2});
  m.dim = n_genes + 2;
  m.force_start = n_genes;
  m.force_order = 2;
  for (int d = 0; d < n_genes; ++d) m.observed_dims.push_back(d);
  m.positive_dims.assign(static_cast<std::size_t>(m.dim), false);
  for (int d = 0; d < n_genes; ++d) m.positive_dims[static_cast<std::size_t>(d)] = true;
  m.likelihood.kind = LikelihoodSpec::Kind::Gaussian;
  m.likelihood.sigma2 = 0.25;
  m.gene_gamma = gamma;
  for (int d = 0; d < n_genes; ++d) {
    std::string suffix = std::to_string(d + 1);
    m.params.push_back({"a" + suffix, true, {Prior::Family::LogNormal, 0.0, 0.5}, 1.0, false});
    m.params.push_back({"b" + suffix, true, {Prior::Family::LogNormal, 0.0, 0.5}, 1.0, false});
    m.params.push_back({"s" + suffix, true, {Prior::Family::LogNormal, 0.0, 0.5}, 1.0, false});
  }
  m.params.push_back({"lambda", true, {Prior::Family::LogNormal, 0.0, 0.5}, 1.0, false});
  m.params.push_back({"v", true, {Prior::Family::LogNormal, 0.0, 0.5}, 1.0, false});
  m.dynamics = [gamma, n_genes](ad::Trace& tr, const ad::Tensor& f, const ThetaAccess& th) {
    std::vector<ad::Tensor> rows;
    // the GP rides on g = log u, so the Michaelis-Menten response
    // u/(gamma + u) collapses to sigmoid(g - log gamma), stable for any g
    ad::Tensor g = detail::row(f, n_genes);
    for (int d = 0; d < n_genes; ++d) {
      std::string suffix = std::to_string(d + 1);
      ad::Tensor response =
          ad::sigmoid(ad::sub(g, tr.scalar(std::log(gamma[static_cast<std::size_t>(d)]))));
      ad::Tensor rhs = ad::sub(th("a" + suffix), ad::mul(th("b" + suffix), detail::row(f, d)));
      rhs = ad::add(rhs, ad::mul(th("s" + suffix), response));
      rows.push_back(rhs);
    }
    detail::append_gp_rows(rows, tr, f, n_genes, 2, th("lambda"));
    return ad::concat(rows, -1);
  };
  return m;
}

inline ModelSpec builtin(const std::string& name, const ModelOptions& opt = {}) {
  if (name == "matern-gp") {
    LikelihoodSpec lik;
    lik.kind = LikelihoodSpec::Kind::Gaussian;
    return make_matern_gp(opt.matern_order, lik);
  }
  if (name == "poisson-gp") {
    LikelihoodSpec lik;
    lik.kind = LikelihoodSpec::Kind::Poisson;
    ModelSpec m = make_matern_gp(opt.matern_order, lik);
    m.name = "poisson-gp";
    return m;
  }
  if (name == "spring") {
    ModelSpec m = make_spring();
    m.name = "spring";
    return m;
  }
  if (name == "toy") {
    ModelSpec m = make_toy();
    m.name = "toy";
    return m;
  }
  if (name == "gene") {
    ModelSpec m = make_gene(opt.gene_gamma);
    m.name = "gene";
    return m;
  }
  throw ConfigError("unknown model '" + name + "'");
}

// ---------------------------------------------------------------------------
// value-level wrappers used by tests, simulation and the oracle

inline std::vector<double> joint_dynamics(const ModelSpec& model, const std::vector<double>& f,
                                          double /*t*/, const std::map<std::string, double>& theta) {
  if (static_cast<int>(f.size()) != model.dim)
    throw ShapeError("joint_dynamics: state size mismatch");
  ad::Trace tr;
  ad::Tensor ft = tr.constant({model.dim}, f);
  ThetaAccess th{[&](const std::string& n) {
    auto it = theta.find(n);
    if (it == theta.end()) throw ConfigError("joint_dynamics: missing parameter " + n);
    return tr.scalar(it->second);
  }};
  ad::Tensor out = model.dynamics(tr, ft, th);
  const auto& v = out.val();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NumericalError("joint_dynamics: non-finite derivative at row " + std::to_string(i));
  return v;
}

inline double log_likelihood(const LikelihoodSpec& spec, const std::vector<double>& y,
                             const std::vector<double>& h_of_f, const std::vector<int>& mask) {
  if (y.size() != h_of_f.size() || y.size() != mask.size())
    throw ShapeError("log_likelihood: size mismatch");
  double out = 0.0;
  const double log2pi = std::log(2.0 * 3.14159265358979323846);
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (!mask[j]) continue;
    if (spec.kind == LikelihoodSpec::Kind::Gaussian) {
      double r = y[j] - h_of_f[j];
      out += -0.5 * r * r / spec.sigma2 - 0.5 * std::log(spec.sigma2) - 0.5 * log2pi;
    } else {
      double yy = y[j];
      if (yy < 0.0 || std::floor(yy) != yy)
        throw DataError("poisson likelihood requires non-negative integer counts");
      out += yy * h_of_f[j] - std::exp(h_of_f[j]) - std::lgamma(yy + 1.0);
    }
  }
  return out;
}

// emission: select the observable dimensions
inline std::vector<double> emission(const ModelSpec& model, const std::vector<double>& f) {
  std::vector<double> out;
  out.reserve(model.observed_dims.size());
  for (int d : model.observed_dims) out.push_back(f[static_cast<std::size_t>(d)]);
  return out;
}

}  // namespace lfm::models
