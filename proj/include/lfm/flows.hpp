#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/models.hpp"
#include "lfm/rng.hpp"
#include "lfm/tensor.hpp"
#include "lfm/tensor_linalg.hpp"
#include "lfm/tensor_nn.hpp"

// Multivariate-masked local inverse autoregressive flow. The joint state is
// flattened time-major so one mesh step occupies d consecutive elements;
// successive layers update one state dimension each, and every shift/scale
// network reads a strictly causal window of width r*d, so the map from the
// base sample to the flattened state has a triangular Jacobian.

namespace lfm::flows {

struct FlowConfig {
  int n_layers = 0;         // 0 means 2 * d
  int receptive_field = 3;  // r, in mesh steps
  int channels = 32;
  int n_conv = 3;           // conv blocks per autoregressive network
  bool batchnorm = true;
};

inline std::int64_t flat_index(std::int64_t k, int dim, int d) {
  return k * d + dim;
}

// layer l (1-based) updates exactly the elements whose dimension is l mod d
inline int dimension_mask(int layer, std::int64_t element, int d) {
  if (layer < 1) throw ConfigError("dimension_mask: layers are 1-based");
  return (element % d) == (layer % d) ? 1 : 0;
}

// state rows are dimensions, columns mesh steps
inline std::vector<double> flatten(const std::vector<std::vector<double>>& state) {
  const int d = static_cast<int>(state.size());
  if (d == 0) throw ShapeError("flatten: empty state");
  const std::size_t t_len = state[0].size();
  std::vector<double> out(t_len * static_cast<std::size_t>(d));
  for (std::size_t k = 0; k < t_len; ++k)
    for (int s = 0; s < d; ++s) {
      if (state[static_cast<std::size_t>(s)].size() != t_len)
        throw ShapeError("flatten: ragged state");
      out[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(s)] =
          state[static_cast<std::size_t>(s)][k];
    }
  return out;
}

inline std::vector<std::vector<double>> unflatten(const std::vector<double>& v, int d) {
  if (d <= 0 || v.size() % static_cast<std::size_t>(d) != 0)
    throw ShapeError("unflatten: length not divisible by state dimension");
  const std::size_t t_len = v.size() / static_cast<std::size_t>(d);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(d),
                                       std::vector<double>(t_len));
  for (std::size_t k = 0; k < t_len; ++k)
    for (int s = 0; s < d; ++s)
      out[static_cast<std::size_t>(s)][k] = v[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(s)];
  return out;
}

// Local conditioning features per flattened element: mesh time, time to the
// next observation, the next observation value (zero on latent dimensions)
// and the observation indicator. Time channels are standardized over the
// mesh.
struct Features {
  std::int64_t t_flat = 0;
  static constexpr int n_channels = 4;
  std::vector<double> data;  // [t_flat, 4]
};

inline Features build_features(const models::ModelSpec& model, const std::vector<double>& mesh,
                               const std::vector<std::vector<double>>& y,
                               const std::vector<std::vector<int>>& mask) {
  const int d = model.dim;
  const std::int64_t t_len = static_cast<std::int64_t>(mesh.size());
  const int p = static_cast<int>(model.observed_dims.size());
  if (static_cast<std::int64_t>(y.size()) != t_len || y.size() != mask.size())
    throw DataError("build_features: observation table length mismatch");

  // map state dim -> output column (or -1 for latent)
  std::vector<int> out_col(static_cast<std::size_t>(d), -1);
  for (int o = 0; o < p; ++o)
    out_col[static_cast<std::size_t>(model.observed_dims[static_cast<std::size_t>(o)])] = o;

  Features f;
  f.t_flat = t_len * d;
  f.data.assign(static_cast<std::size_t>(f.t_flat) * Features::n_channels, 0.0);

  // next observation index for each output column, and for any column
  std::vector<std::vector<std::int64_t>> next_obs(
      static_cast<std::size_t>(p), std::vector<std::int64_t>(static_cast<std::size_t>(t_len), -1));
  std::vector<std::int64_t> next_any(static_cast<std::size_t>(t_len), -1);
  for (int o = 0; o < p; ++o) {
    std::int64_t nxt = -1;
    for (std::int64_t k = t_len - 1; k >= 0; --k) {
      if (mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)]) nxt = k;
      next_obs[static_cast<std::size_t>(o)][static_cast<std::size_t>(k)] = nxt;
    }
  }
  {
    std::int64_t nxt = -1;
    for (std::int64_t k = t_len - 1; k >= 0; --k) {
      for (int o = 0; o < p; ++o)
        if (mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)]) nxt = k;
      next_any[static_cast<std::size_t>(k)] = nxt;
    }
  }

  for (std::int64_t k = 0; k < t_len; ++k)
    for (int s = 0; s < d; ++s) {
      std::int64_t i = flat_index(k, s, d);
      double* row = f.data.data() + i * Features::n_channels;
      row[0] = mesh[static_cast<std::size_t>(k)];
      int o = out_col[static_cast<std::size_t>(s)];
      std::int64_t nxt = o >= 0 ? next_obs[static_cast<std::size_t>(o)][static_cast<std::size_t>(k)]
                                : next_any[static_cast<std::size_t>(k)];
      if (nxt >= 0) row[1] = mesh[static_cast<std::size_t>(nxt)] - mesh[static_cast<std::size_t>(k)];
      if (o >= 0 && nxt >= 0) row[2] = y[static_cast<std::size_t>(nxt)][static_cast<std::size_t>(o)];
      if (o >= 0 && mask[static_cast<std::size_t>(k)][static_cast<std::size_t>(o)]) row[3] = 1.0;
    }

  // standardize the two time channels
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < f.t_flat; ++i) mean += f.data[static_cast<std::size_t>(i * 4 + c)];
    mean /= double(f.t_flat);
    double var = 0.0;
    for (std::int64_t i = 0; i < f.t_flat; ++i) {
      double dd = f.data[static_cast<std::size_t>(i * 4 + c)] - mean;
      var += dd * dd;
    }
    var /= double(f.t_flat);
    double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    for (std::int64_t i = 0; i < f.t_flat; ++i)
      f.data[static_cast<std::size_t>(i * 4 + c)] =
          (f.data[static_cast<std::size_t>(i * 4 + c)] - mean) / sd;
  }
  return f;
}

struct Param {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
};

// supplies the trace tensor for a parameter; the trainer binds leaves, plain
// evaluation binds constants
using Binder = std::function<ad::Tensor(Param&)>;

inline Binder constant_binder(ad::Trace& tr) {
  return [&tr](Param& p) { return tr.constant(p.shape, p.value); };
}

struct ForwardResult {
  ad::Tensor f;        // [M, T, d]
  ad::Tensor log_q;    // [M]
  ad::Tensor z_final;  // [M, T_flat], pre-bijector
};

class FlowStack {
 public:
  FlowStack(const models::ModelSpec& model, const FlowConfig& cfg, std::int64_t t_len,
            int theta_dim, Rng rng)
      : d_(model.dim),
        t_len_(t_len),
        t_flat_(t_len * model.dim),
        theta_dim_(theta_dim),
        cfg_(cfg) {
    if (cfg_.n_layers <= 0) cfg_.n_layers = 2 * d_;
    if (cfg_.receptive_field < 1) throw ConfigError("receptive field must be >= 1");
    if (cfg_.n_conv < 1) throw ConfigError("flow networks need at least one conv block");
    if (cfg_.channels < 2) throw ConfigError("flow channel width must be >= 2");
    kernel_ = cfg_.receptive_field * d_;

    positive_flat_.assign(static_cast<std::size_t>(t_flat_), 0.0);
    bool any_pos = false;
    for (std::int64_t i = 0; i < t_flat_; ++i) {
      bool pos = model.positive_dims[static_cast<std::size_t>(i % d_)];
      positive_flat_[static_cast<std::size_t>(i)] = pos ? 1.0 : 0.0;
      any_pos = any_pos || pos;
    }
    has_bijector_ = any_pos;

    const int c = cfg_.channels;
    const double s_bias_init = std::log(std::exp(1.0) - 1.0);  // softplus^{-1}(1)
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Layer& ly = layers_[static_cast<std::size_t>(l)];
      std::string base = "flow" + std::to_string(l + 1) + ".";
      ly.conv0_k = glorot(rng, base + "conv0.kernel", {kernel_, 1 + Features::n_channels, c});
      ly.conv0_b = zeros(base + "conv0.bias", {c});
      if (theta_dim_ > 0) {
        ly.dense_w = glorot(rng, base + "dense.weight", {theta_dim_, c});
        ly.dense_b = zeros(base + "dense.bias", {c});
      }
      for (int i = 2; i <= cfg_.n_conv; ++i) {
        std::string cb = base + "conv" + std::to_string(i) + ".";
        ly.conv_k.push_back(glorot(rng, cb + "kernel", {kernel_, c, c}));
        ly.conv_b.push_back(zeros(cb + "bias", {c}));
        if (cfg_.batchnorm) {
          Param g;
          g.name = cb + "bn.scale";
          g.shape = {c};
          g.value.assign(static_cast<std::size_t>(c), 1.0);
          ly.bn_gamma.push_back(std::move(g));
          ly.bn_beta.push_back(zeros(cb + "bn.offset", {c}));
          ly.bn_state.emplace_back();
        }
      }
      // identity-flow initialization: mu = 0, sigma = 1 everywhere
      ly.out_k = zeros(base + "out.kernel", {kernel_, c, 2});
      ly.out_b = zeros(base + "out.bias", {2});
      ly.out_b.value[1] = s_bias_init;
    }
  }

  int state_dim() const { return d_; }
  std::int64_t mesh_len() const { return t_len_; }
  std::int64_t flat_len() const { return t_flat_; }
  int n_layers() const { return cfg_.n_layers; }
  const FlowConfig& config() const { return cfg_; }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    for (auto& ly : layers_) {
      out.push_back(&ly.conv0_k);
      out.push_back(&ly.conv0_b);
      if (theta_dim_ > 0) {
        out.push_back(&ly.dense_w);
        out.push_back(&ly.dense_b);
      }
      for (auto& p : ly.conv_k) out.push_back(&p);
      for (auto& p : ly.conv_b) out.push_back(&p);
      for (auto& p : ly.bn_gamma) out.push_back(&p);
      for (auto& p : ly.bn_beta) out.push_back(&p);
      out.push_back(&ly.out_k);
      out.push_back(&ly.out_b);
    }
    return out;
  }

  // eps [M, T_flat]; theta_u [M, theta_dim] (ignored when no parameters are
  // inferred); features from build_features on the same mesh/data
  ForwardResult forward(ad::Trace& tr, const ad::Tensor& eps, const ad::Tensor* theta_u,
                        const Features& feats, bool train, const Binder& bind) {
    if (eps.rank() != 2 || eps.shape()[1] != t_flat_)
      throw ShapeError("flow forward: eps must be [M, T_flat]");
    if (feats.t_flat != t_flat_) throw ShapeError("flow forward: feature length mismatch");
    const std::int64_t mdim = eps.shape()[0];
    if (theta_dim_ > 0 && (theta_u == nullptr || theta_u->shape()[0] != mdim ||
                           theta_u->shape()[1] != theta_dim_))
      throw ShapeError("flow forward: theta input shape mismatch");

    ad::Tensor feats_c = tr.constant({1, t_flat_, Features::n_channels}, feats.data);
    ad::Tensor feats_b = ad::broadcast_to(feats_c, {mdim, t_flat_, Features::n_channels});

    ad::Tensor z = eps;
    ad::Tensor logdet_sum = tr.full({mdim}, 0.0);
    for (int l = 1; l <= cfg_.n_layers; ++l) {
      Layer& ly = layers_[static_cast<std::size_t>(l - 1)];
      ad::Tensor x = ad::concat({ad::reshape(z, {mdim, t_flat_, 1}), feats_b}, -1);
      // only the first convolution excludes the current element; the rest
      // include it, so the previous flattened element stays visible to the
      // shift and scale while the map remains strictly autoregressive
      ad::Tensor h = ad::causal_conv1d(x, bind(ly.conv0_k), bind(ly.conv0_b));
      if (theta_dim_ > 0) {
        ad::Tensor enc = ad::add(ad::matmul(*theta_u, bind(ly.dense_w)), bind(ly.dense_b));
        h = ad::add(h, ad::reshape(enc, {mdim, 1, cfg_.channels}));
      }
      h = ad::elu(h);
      for (std::size_t i = 0; i < ly.conv_k.size(); ++i) {
        h = ad::causal_conv1d(ad::elu(h), bind(ly.conv_k[i]), bind(ly.conv_b[i]), true);
        if (cfg_.batchnorm)
          h = ad::batch_norm(h, bind(ly.bn_gamma[i]), bind(ly.bn_beta[i]), ly.bn_state[i], train);
      }
      ad::Tensor out = ad::causal_conv1d(h, bind(ly.out_k), bind(ly.out_b), true);
      ad::Tensor mu = ad::reshape(ad::slice(out, -1, 0, 1), {mdim, t_flat_});
      ad::Tensor sigma = ad::softplus(ad::reshape(ad::slice(out, -1, 1, 1), {mdim, t_flat_}));

      std::vector<double> dmask(static_cast<std::size_t>(t_flat_));
      for (std::int64_t i = 0; i < t_flat_; ++i)
        dmask[static_cast<std::size_t>(i)] = dimension_mask(l, i, d_);
      ad::Tensor delta = tr.constant({t_flat_}, dmask);
      ad::Tensor gate = ad::add(ad::mul(delta, sigma), ad::sub(tr.scalar(1.0), delta));
      z = ad::add(ad::mul(gate, z), ad::mul(delta, mu));
      logdet_sum = ad::add(logdet_sum, ad::sum(ad::mul(delta, ad::log(sigma)), -1));
    }

    ForwardResult res;
    res.z_final = z;
    ad::Tensor f_flat = z;
    ad::Tensor bij_logdet = tr.full({mdim}, 0.0);
    if (has_bijector_) {
      ad::Tensor beta = tr.constant({t_flat_}, positive_flat_);
      f_flat = ad::add(ad::mul(beta, ad::softplus(z)),
                       ad::mul(ad::sub(tr.scalar(1.0), beta), z));
      // log h'(z) = log sigmoid(z) = -softplus(-z)
      bij_logdet = ad::sum(ad::mul(beta, ad::neg(ad::softplus(ad::neg(z)))), -1);
    }

    const double log2pi = std::log(2.0 * M_PI);
    ad::Tensor base = ad::sub(ad::mul(ad::sum(ad::square(eps), -1), tr.scalar(-0.5)),
                              tr.scalar(0.5 * double(t_flat_) * log2pi));
    res.log_q = ad::sub(ad::sub(base, logdet_sum), bij_logdet);
    res.f = ad::reshape(f_flat, {mdim, t_len_, d_});
    for (double vv : res.log_q.val())
      if (std::isinf(vv)) throw NumericalError("flow forward produced an infinite density");
    return res;
  }

 private:
  struct Layer {
    Param conv0_k, conv0_b;
    Param dense_w, dense_b;
    std::vector<Param> conv_k, conv_b;
    std::vector<Param> bn_gamma, bn_beta;
    std::vector<ad::BatchNormState> bn_state;
    Param out_k, out_b;
  };

  static Param zeros(const std::string& name, ad::Shape shape) {
    Param p;
    p.name = name;
    p.shape = std::move(shape);
    p.value.assign(static_cast<std::size_t>(ad::numel(p.shape)), 0.0);
    return p;
  }

  static Param glorot(Rng& rng, const std::string& name, ad::Shape shape) {
    Param p;
    p.name = name;
    p.shape = std::move(shape);
    std::int64_t n = ad::numel(p.shape);
    // fan-in/fan-out for conv kernels [k, cin, cout] and dense [in, out]
    std::int64_t fan_in, fan_out;
    if (p.shape.size() == 3) {
      fan_in = p.shape[0] * p.shape[1];
      fan_out = p.shape[0] * p.shape[2];
    } else {
      fan_in = p.shape[0];
      fan_out = p.shape[1];
    }
    double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    p.value.resize(static_cast<std::size_t>(n));
    for (auto& x : p.value) x = limit * (2.0 * rng.uniform() - 1.0);
    return p;
  }

  int d_;
  std::int64_t t_len_;
  std::int64_t t_flat_;
  int theta_dim_;
  FlowConfig cfg_;
  int kernel_ = 0;
  bool has_bijector_ = false;
  std::vector<double> positive_flat_;
  std::vector<Layer> layers_;
};

// softplus bijector on selected elements; log-det is sum log sigmoid(z)
inline std::pair<double, double> apply_bijector_softplus(double z) {
  return {ad::softplus_val(z), -ad::softplus_val(-z)};
}

}  // namespace lfm::flows
