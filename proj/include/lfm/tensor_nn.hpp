#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lfm/parallel.hpp"
#include "lfm/tensor.hpp"

// Network building blocks for the flow layers: strictly causal 1-D
// convolution and batch normalization over the Monte Carlo sample axis.

namespace lfm::ad {

// Causal convolution with left zero padding.
//   input  [M, T, Cin] (or [T, Cin], treated as M = 1)
//   kernel [k, Cin, Cout]
//   bias   [Cout]
// Strict mode (default) reads positions [t-k, t-1], excluding t itself; the
// inclusive mode reads [t-k+1, t]. A network stays strictly causal overall
// when its first convolution is strict and the rest are inclusive, and the
// most recent element remains visible to the output.
inline Tensor causal_conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                            bool include_current = false) {
  detail::check_same_trace(input, kernel);
  detail::check_same_trace(input, bias);
  const bool batched = input.rank() == 3;
  if (!batched && input.rank() != 2) throw ShapeError("causal_conv1d: input rank must be 2 or 3");
  if (kernel.rank() != 3) throw ShapeError("causal_conv1d: kernel must be [k, Cin, Cout]");
  const Shape& ish = input.shape();
  const Shape& ksh = kernel.shape();
  std::int64_t mdim = batched ? ish[0] : 1;
  std::int64_t tdim = batched ? ish[1] : ish[0];
  std::int64_t cin = batched ? ish[2] : ish[1];
  std::int64_t kw = ksh[0], kcin = ksh[1], cout = ksh[2];
  if (kw <= 0) throw ConfigError("causal_conv1d: kernel width must be positive");
  if (kcin != cin) throw ShapeError("causal_conv1d: channel mismatch");
  if (bias.size() != cout) throw ShapeError("causal_conv1d: bias size mismatch");

  const auto& iv = input.val();
  const auto& kv = kernel.val();
  const auto& bv = bias.val();
  Shape osh = batched ? Shape{mdim, tdim, cout} : Shape{tdim, cout};
  std::vector<double> out(static_cast<std::size_t>(mdim * tdim * cout));
  const std::int64_t shift = include_current ? 0 : 1;  // tap a reads t - k + a + 1 - shift

  auto fwd_one = [&](int m) {
    const double* X = iv.data() + static_cast<std::int64_t>(m) * tdim * cin;
    double* O = out.data() + static_cast<std::int64_t>(m) * tdim * cout;
    for (std::int64_t t = 0; t < tdim; ++t) {
      double* orow = O + t * cout;
      for (std::int64_t co = 0; co < cout; ++co) orow[co] = bv[static_cast<std::size_t>(co)];
      std::int64_t a0 = std::max<std::int64_t>(0, kw - 1 + shift - t);
      for (std::int64_t a = a0; a < kw; ++a) {
        const double* xrow = X + (t - kw + 1 - shift + a) * cin;
        const double* krow = kv.data() + a * cin * cout;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          double x = xrow[ci];
          if (x == 0.0) continue;
          const double* kc = krow + ci * cout;
          for (std::int64_t co = 0; co < cout; ++co) orow[co] += x * kc[co];
        }
      }
    }
  };
  parallel_for(static_cast<int>(mdim), fwd_one);

  Trace* tr = input.tr;
  bool ng = tr->node(input.id).needs_grad || tr->node(kernel.id).needs_grad ||
            tr->node(bias.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int iid = input.id, kid = kernel.id, bid = bias.id, oid = res.id;
    tr->node(oid).vjp = [tr, iid, kid, bid, oid, mdim, tdim, cin, cout, kw, shift]() {
      const auto& g = tr->grad(oid);
      const auto& iv2 = tr->node(iid).v;
      const auto& kv2 = tr->node(kid).v;
      const bool ngi = tr->node(iid).needs_grad;
      const bool ngk = tr->node(kid).needs_grad;
      const bool ngb = tr->node(bid).needs_grad;
      std::vector<double>* gi = ngi ? &tr->grad(iid) : nullptr;
      // per-sample kernel/bias partials, reduced in sample order afterwards so
      // the result is independent of thread count
      std::vector<std::vector<double>> kpart, bpart;
      if (ngk) kpart.assign(static_cast<std::size_t>(mdim),
                            std::vector<double>(static_cast<std::size_t>(kw * cin * cout), 0.0));
      if (ngb) bpart.assign(static_cast<std::size_t>(mdim),
                            std::vector<double>(static_cast<std::size_t>(cout), 0.0));
      auto bwd_one = [&](int m) {
        const double* X = iv2.data() + static_cast<std::int64_t>(m) * tdim * cin;
        const double* G = g.data() + static_cast<std::int64_t>(m) * tdim * cout;
        double* GX = gi ? gi->data() + static_cast<std::int64_t>(m) * tdim * cin : nullptr;
        double* GK = ngk ? kpart[static_cast<std::size_t>(m)].data() : nullptr;
        double* GB = ngb ? bpart[static_cast<std::size_t>(m)].data() : nullptr;
        for (std::int64_t t = 0; t < tdim; ++t) {
          const double* grow = G + t * cout;
          if (GB)
            for (std::int64_t co = 0; co < cout; ++co) GB[co] += grow[co];
          std::int64_t a0 = std::max<std::int64_t>(0, kw - 1 + shift - t);
          for (std::int64_t a = a0; a < kw; ++a) {
            std::int64_t s = t - kw + 1 - shift + a;
            const double* xrow = X + s * cin;
            const double* krow = kv2.data() + a * cin * cout;
            double* gxrow = GX ? GX + s * cin : nullptr;
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* kc = krow + ci * cout;
              double accx = 0.0;
              for (std::int64_t co = 0; co < cout; ++co) accx += grow[co] * kc[co];
              if (gxrow) gxrow[ci] += accx;
              if (GK) {
                double x = xrow[ci];
                if (x != 0.0) {
                  double* gkc = GK + (a * cin + ci) * cout;
                  for (std::int64_t co = 0; co < cout; ++co) gkc[co] += x * grow[co];
                }
              }
            }
          }
        }
      };
      parallel_for(static_cast<int>(mdim), bwd_one);
      if (ngk) {
        auto& gk = tr->grad(kid);
        for (std::int64_t m = 0; m < mdim; ++m) {
          const auto& p = kpart[static_cast<std::size_t>(m)];
          for (std::size_t i = 0; i < p.size(); ++i) gk[i] += p[i];
        }
      }
      if (ngb) {
        auto& gb = tr->grad(bid);
        for (std::int64_t m = 0; m < mdim; ++m) {
          const auto& p = bpart[static_cast<std::size_t>(m)];
          for (std::size_t i = 0; i < p.size(); ++i) gb[i] += p[i];
        }
      }
    };
  }
  return res;
}

// Running moments for batch normalization. Statistics are tracked per
// (position, channel) because the Monte Carlo sample axis is the only batch
// axis in this codebase.
struct BatchNormState {
  std::int64_t t = 0, c = 0;
  std::vector<double> running_mean;  // [T*C]
  std::vector<double> running_var;   // [T*C]
  double momentum = 0.9;

  void init(std::int64_t t_, std::int64_t c_) {
    t = t_;
    c = c_;
    running_mean.assign(static_cast<std::size_t>(t * c), 0.0);
    running_var.assign(static_cast<std::size_t>(t * c), 1.0);
  }
  bool initialized() const { return !running_mean.empty(); }
};

// input [M, T, C]; gamma/beta [C]. Train mode normalizes by batch moments over
// the sample axis and updates the running moments in place (a side effect on
// `state`, not part of the trace). Eval mode normalizes by the stored moments.
inline Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, bool train, double eps = 1e-5) {
  detail::check_same_trace(input, gamma);
  detail::check_same_trace(input, beta);
  if (input.rank() != 3) throw ShapeError("batch_norm: input must be [M, T, C]");
  const Shape& ish = input.shape();
  std::int64_t mdim = ish[0], tdim = ish[1], cdim = ish[2];
  if (gamma.size() != cdim || beta.size() != cdim)
    throw ShapeError("batch_norm: scale/offset size mismatch");
  if (train && mdim < 2)
    throw ConfigError("batch_norm: train mode requires at least 2 samples");
  if (!state.initialized()) state.init(tdim, cdim);
  if (state.t != tdim || state.c != cdim) throw ShapeError("batch_norm: state shape mismatch");

  const auto& iv = input.val();
  const auto& gv = gamma.val();
  const auto& bv = beta.val();
  std::int64_t tc = tdim * cdim;
  std::vector<double> mu(static_cast<std::size_t>(tc), 0.0);
  std::vector<double> var(static_cast<std::size_t>(tc), 0.0);
  if (train) {
    for (std::int64_t m = 0; m < mdim; ++m) {
      const double* X = iv.data() + m * tc;
      for (std::int64_t i = 0; i < tc; ++i) mu[static_cast<std::size_t>(i)] += X[i];
    }
    for (std::int64_t i = 0; i < tc; ++i) mu[static_cast<std::size_t>(i)] /= double(mdim);
    for (std::int64_t m = 0; m < mdim; ++m) {
      const double* X = iv.data() + m * tc;
      for (std::int64_t i = 0; i < tc; ++i) {
        double d = X[i] - mu[static_cast<std::size_t>(i)];
        var[static_cast<std::size_t>(i)] += d * d;
      }
    }
    for (std::int64_t i = 0; i < tc; ++i) var[static_cast<std::size_t>(i)] /= double(mdim);
    for (std::int64_t i = 0; i < tc; ++i) {
      auto iu = static_cast<std::size_t>(i);
      state.running_mean[iu] = state.momentum * state.running_mean[iu] + (1.0 - state.momentum) * mu[iu];
      state.running_var[iu] = state.momentum * state.running_var[iu] + (1.0 - state.momentum) * var[iu];
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }

  std::vector<double> out(iv.size());
  std::vector<double> inv_sd(static_cast<std::size_t>(tc));
  for (std::int64_t i = 0; i < tc; ++i)
    inv_sd[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(i)] + eps);
  for (std::int64_t m = 0; m < mdim; ++m) {
    const double* X = iv.data() + m * tc;
    double* O = out.data() + m * tc;
    for (std::int64_t t = 0; t < tdim; ++t)
      for (std::int64_t c = 0; c < cdim; ++c) {
        std::int64_t i = t * cdim + c;
        double xhat = (X[i] - mu[static_cast<std::size_t>(i)]) * inv_sd[static_cast<std::size_t>(i)];
        O[i] = gv[static_cast<std::size_t>(c)] * xhat + bv[static_cast<std::size_t>(c)];
      }
  }

  Trace* tr = input.tr;
  bool ng = tr->node(input.id).needs_grad || tr->node(gamma.id).needs_grad ||
            tr->node(beta.id).needs_grad;
  Tensor res = tr->make(ish, std::move(out), ng, nullptr);
  if (ng) {
    int iid = input.id, gid = gamma.id, bid = beta.id, oid = res.id;
    // capture the moments actually used in the forward pass
    tr->node(oid).vjp = [tr, iid, gid, bid, oid, mdim, tdim, cdim, mu, inv_sd, train]() {
      const auto& g = tr->grad(oid);
      const auto& iv2 = tr->node(iid).v;
      const auto& gv2 = tr->node(gid).v;
      const bool ngi = tr->node(iid).needs_grad;
      const bool ngg = tr->node(gid).needs_grad;
      const bool ngb = tr->node(bid).needs_grad;
      std::int64_t tc = tdim * cdim;
      std::vector<double> sum_g(static_cast<std::size_t>(tc), 0.0);
      std::vector<double> sum_gx(static_cast<std::size_t>(tc), 0.0);
      for (std::int64_t m = 0; m < mdim; ++m) {
        const double* G = g.data() + m * tc;
        const double* X = iv2.data() + m * tc;
        for (std::int64_t i = 0; i < tc; ++i) {
          auto iu = static_cast<std::size_t>(i);
          double xhat = (X[i] - mu[iu]) * inv_sd[iu];
          sum_g[iu] += G[i];
          sum_gx[iu] += G[i] * xhat;
        }
      }
      if (ngg) {
        auto& gg = tr->grad(gid);
        for (std::int64_t t = 0; t < tdim; ++t)
          for (std::int64_t c = 0; c < cdim; ++c)
            gg[static_cast<std::size_t>(c)] += sum_gx[static_cast<std::size_t>(t * cdim + c)];
      }
      if (ngb) {
        auto& gb = tr->grad(bid);
        for (std::int64_t t = 0; t < tdim; ++t)
          for (std::int64_t c = 0; c < cdim; ++c)
            gb[static_cast<std::size_t>(c)] += sum_g[static_cast<std::size_t>(t * cdim + c)];
      }
      if (ngi) {
        auto& gi = tr->grad(iid);
        for (std::int64_t m = 0; m < mdim; ++m) {
          const double* G = g.data() + m * tc;
          const double* X = iv2.data() + m * tc;
          double* GI = gi.data() + m * tc;
          for (std::int64_t t = 0; t < tdim; ++t)
            for (std::int64_t c = 0; c < cdim; ++c) {
              std::int64_t i = t * cdim + c;
              auto iu = static_cast<std::size_t>(i);
              double gam = gv2[static_cast<std::size_t>(c)];
              if (train) {
                double xhat = (X[i] - mu[iu]) * inv_sd[iu];
                GI[i] += gam * inv_sd[iu] *
                         (G[i] - sum_g[iu] / double(mdim) - xhat * sum_gx[iu] / double(mdim));
              } else {
                GI[i] += gam * inv_sd[iu] * G[i];
              }
            }
        }
      }
    };
  }
  return res;
}

}  // namespace lfm::ad
