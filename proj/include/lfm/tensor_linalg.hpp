#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lfm/tensor.hpp"

// Batched dense linear algebra on trailing matrix dimensions. Matrices here
// are small (joint state dimension <= 8), so plain loops are fine.

namespace lfm::ad {

namespace detail {

struct BatchMap {
  Shape lead;                       // broadcast leading dims
  std::int64_t count = 1;           // number of batch slices
  std::vector<std::int64_t> sa, sb; // per-lead-dim slice strides (in slices)

  static BatchMap build(const Shape& a, int a_tail, const Shape& b, int b_tail) {
    Shape la(a.begin(), a.end() - a_tail);
    Shape lb(b.begin(), b.end() - b_tail);
    BatchMap m;
    m.lead = broadcast_shape(la, lb);
    m.count = numel(m.lead);
    m.sa = broadcast_strides(la, m.lead);
    m.sb = broadcast_strides(lb, m.lead);
    return m;
  }

  template <class F>
  void for_each(F&& f) const {
    int r = static_cast<int>(lead.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t lin = 0; lin < count; ++lin) {
      f(lin, ia, ib);
      for (int d = r - 1; d >= 0; --d) {
        auto du = static_cast<std::size_t>(d);
        if (++idx[du] < lead[du]) {
          ia += sa[du];
          ib += sb[du];
          break;
        }
        ia -= sa[du] * (lead[du] - 1);
        ib -= sb[du] * (lead[du] - 1);
        idx[du] = 0;
      }
    }
  }
};

inline void require_rank_at_least(const Tensor& t, int r, const char* what) {
  if (t.rank() < r) throw ShapeError(std::string(what) + ": rank too small");
}

}  // namespace detail

// a: [..., n, k], b: [..., k, m]; leading dims broadcast
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_same_trace(a, b);
  detail::require_rank_at_least(a, 2, "matmul lhs");
  detail::require_rank_at_least(b, 2, "matmul rhs");
  const Shape& ash = a.shape();
  const Shape& bsh = b.shape();
  std::int64_t n = ash[ash.size() - 2], k = ash[ash.size() - 1];
  std::int64_t k2 = bsh[bsh.size() - 2], m = bsh[bsh.size() - 1];
  if (k != k2)
    throw ShapeError("matmul: inner dims " + shape_str(ash) + " x " + shape_str(bsh));
  auto bm = detail::BatchMap::build(ash, 2, bsh, 2);
  Shape osh = bm.lead;
  osh.push_back(n);
  osh.push_back(m);
  const auto& av = a.val();
  const auto& bv = b.val();
  std::vector<double> out(static_cast<std::size_t>(bm.count * n * m), 0.0);
  bm.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    const double* A = av.data() + ia * n * k;
    const double* B = bv.data() + ib * k * m;
    double* O = out.data() + o * n * m;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* Brow = B + p * m;
        double* Orow = O + i * m;
        for (std::int64_t j = 0; j < m; ++j) Orow[j] += aip * Brow[j];
      }
  });
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad || tr->node(b.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, bid = b.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, bid, oid, bm, n, k, m]() {
      const auto& g = tr->grad(oid);
      const auto& av2 = tr->node(aid).v;
      const auto& bv2 = tr->node(bid).v;
      const bool nga = tr->node(aid).needs_grad;
      const bool ngb = tr->node(bid).needs_grad;
      std::vector<double>* ga = nga ? &tr->grad(aid) : nullptr;
      std::vector<double>* gb = ngb ? &tr->grad(bid) : nullptr;
      bm.for_each([&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        const double* G = g.data() + o * n * m;
        const double* A = av2.data() + ia * n * k;
        const double* B = bv2.data() + ib * k * m;
        if (ga) {
          double* GA = ga->data() + ia * n * k;
          // dA = G * B^T
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* Grow = G + i * m;
              const double* Brow = B + p * m;
              for (std::int64_t j = 0; j < m; ++j) s += Grow[j] * Brow[j];
              GA[i * k + p] += s;
            }
        }
        if (gb) {
          double* GB = gb->data() + ib * k * m;
          // dB = A^T * G
          for (std::int64_t p = 0; p < k; ++p)
            for (std::int64_t i = 0; i < n; ++i) {
              double aip = A[i * k + p];
              if (aip == 0.0) continue;
              const double* Grow = G + i * m;
              double* GBrow = GB + p * m;
              for (std::int64_t j = 0; j < m; ++j) GBrow[j] += aip * Grow[j];
            }
        }
      });
    };
  }
  return res;
}

// swap the last two axes
inline Tensor transpose(const Tensor& a) {
  detail::require_rank_at_least(a, 2, "transpose");
  const Shape& sh = a.shape();
  std::int64_t n = sh[sh.size() - 2], m = sh[sh.size() - 1];
  std::int64_t batch = a.size() / (n * m);
  Shape osh = sh;
  std::swap(osh[osh.size() - 2], osh[osh.size() - 1]);
  const auto& av = a.val();
  std::vector<double> out(av.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* A = av.data() + b * n * m;
    double* O = out.data() + b * n * m;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j) O[j * n + i] = A[i * m + j];
  }
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, batch, n, m]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* G = g.data() + b * n * m;
        double* GA = ga.data() + b * n * m;
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < m; ++j) GA[i * m + j] += G[j * n + i];
      }
    };
  }
  return res;
}

inline Tensor diag_part(const Tensor& a) {
  detail::require_rank_at_least(a, 2, "diag_part");
  const Shape& sh = a.shape();
  std::int64_t n = sh[sh.size() - 1];
  if (sh[sh.size() - 2] != n) throw ShapeError("diag_part: not square");
  std::int64_t batch = a.size() / (n * n);
  Shape osh(sh.begin(), sh.end() - 1);
  osh.back() = n;
  const auto& av = a.val();
  std::vector<double> out(static_cast<std::size_t>(batch * n));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < n; ++i) out[b * n + i] = av[b * n * n + i * n + i];
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, batch, n]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < n; ++i) ga[b * n * n + i * n + i] += g[b * n + i];
    };
  }
  return res;
}

namespace detail {

// Plain Cholesky on a row-major square slice; returns false on a non-positive
// pivot. Only the lower triangle of `a` is read.
inline bool cholesky_in_place(double* a, std::int64_t n) {
  for (std::int64_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::int64_t p = 0; p < j; ++p) d -= a[j * n + p] * a[j * n + p];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    double ld = std::sqrt(d);
    a[j * n + j] = ld;
    for (std::int64_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::int64_t p = 0; p < j; ++p) s -= a[i * n + p] * a[j * n + p];
      a[i * n + j] = s / ld;
    }
    for (std::int64_t i = 0; i < j; ++i) a[i * n + j] = 0.0;
  }
  return true;
}

// x := L^{-1} x (forward substitution), x is n x m row-major
inline void trsm_lower(const double* L, double* x, std::int64_t n, std::int64_t m) {
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p = 0; p < i; ++p) {
      double lip = L[i * n + p];
      if (lip == 0.0) continue;
      for (std::int64_t j = 0; j < m; ++j) x[i * m + j] -= lip * x[p * m + j];
    }
    double d = L[i * n + i];
    for (std::int64_t j = 0; j < m; ++j) x[i * m + j] /= d;
  }
}

// x := L^{-T} x (backward substitution)
inline void trsm_lower_t(const double* L, double* x, std::int64_t n, std::int64_t m) {
  for (std::int64_t i = n - 1; i >= 0; --i) {
    double d = L[i * n + i];
    for (std::int64_t j = 0; j < m; ++j) x[i * m + j] /= d;
    for (std::int64_t p = 0; p < i; ++p) {
      double lip = L[i * n + p];
      if (lip == 0.0) continue;
      for (std::int64_t j = 0; j < m; ++j) x[p * m + j] -= lip * x[i * m + j];
    }
  }
}

}  // namespace detail

// Cholesky factor of a symmetric PSD batch with an escalating diagonal jitter
// ladder (1e-10 .. 1e-4). Reads the lower triangle only. Throws
// NumericalError when the largest rung still fails.
inline Tensor cholesky_jitter(const Tensor& a) {
  detail::require_rank_at_least(a, 2, "cholesky");
  const Shape& sh = a.shape();
  std::int64_t n = sh[sh.size() - 1];
  if (sh[sh.size() - 2] != n) throw ShapeError("cholesky: not square");
  std::int64_t batch = a.size() / (n * n);
  const auto& av = a.val();
  std::vector<double> out(av.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* A = av.data() + b * n * n;
    double* L = out.data() + b * n * n;
    bool ok = false;
    for (int rung = -1; rung <= 6 && !ok; ++rung) {
      std::copy_n(A, n * n, L);
      if (rung >= 0) {
        double jit = 1e-10 * std::pow(10.0, rung);
        for (std::int64_t i = 0; i < n; ++i) L[i * n + i] += jit;
      }
      ok = detail::cholesky_in_place(L, n);
    }
    if (!ok) throw NumericalError("cholesky failed after jitter ladder");
  }
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(sh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, batch, n]() {
      // Murray (2016): Abar = 1/2 L^{-T} (P + P^T) L^{-1}, P = Phi(L^T Lbar)
      // with Phi keeping the lower triangle and halving the diagonal.
      const auto& g = tr->grad(oid);
      const auto& lv = tr->node(oid).v;
      auto& ga = tr->grad(aid);
      std::vector<double> P(static_cast<std::size_t>(n * n));
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* L = lv.data() + b * n * n;
        const double* G = g.data() + b * n * n;
        double* GA = ga.data() + b * n * n;
        // P = L^T G, then Phi
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::int64_t p = 0; p < n; ++p) s += L[p * n + i] * G[p * n + j];
            P[static_cast<std::size_t>(i * n + j)] = s;
          }
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            if (j > i) P[static_cast<std::size_t>(i * n + j)] = 0.0;
            if (j == i) P[static_cast<std::size_t>(i * n + j)] *= 0.5;
          }
        // symmetrize: S = (P + P^T) / ... (factor folded below)
        std::vector<double> S(static_cast<std::size_t>(n * n));
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            S[static_cast<std::size_t>(i * n + j)] =
                P[static_cast<std::size_t>(i * n + j)] + P[static_cast<std::size_t>(j * n + i)];
        // Abar_contrib = 1/2 L^{-T} S L^{-1}: solve L^T X = S, then (L^T Y = X^T)
        detail::trsm_lower_t(L, S.data(), n, n);  // S := L^{-T} S
        // right-multiply by L^{-1}: (S L^{-1})^T = L^{-T} S^T
        std::vector<double> ST(static_cast<std::size_t>(n * n));
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            ST[static_cast<std::size_t>(i * n + j)] = S[static_cast<std::size_t>(j * n + i)];
        detail::trsm_lower_t(L, ST.data(), n, n);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            GA[i * n + j] += 0.5 * ST[static_cast<std::size_t>(j * n + i)];
      }
    };
  }
  return res;
}

// solve L x = b for lower-triangular L; b: [..., n, m]
inline Tensor tri_lower_solve(const Tensor& l, const Tensor& b) {
  detail::check_same_trace(l, b);
  detail::require_rank_at_least(l, 2, "tri_solve lhs");
  detail::require_rank_at_least(b, 2, "tri_solve rhs");
  const Shape& lsh = l.shape();
  const Shape& bsh = b.shape();
  std::int64_t n = lsh[lsh.size() - 1];
  if (lsh[lsh.size() - 2] != n) throw ShapeError("tri_solve: L not square");
  if (bsh[bsh.size() - 2] != n) throw ShapeError("tri_solve: rhs rows mismatch");
  std::int64_t m = bsh[bsh.size() - 1];
  auto bm = detail::BatchMap::build(lsh, 2, bsh, 2);
  Shape osh = bm.lead;
  osh.push_back(n);
  osh.push_back(m);
  const auto& lv = l.val();
  const auto& bv = b.val();
  std::vector<double> out(static_cast<std::size_t>(bm.count * n * m));
  bm.for_each([&](std::int64_t o, std::int64_t il, std::int64_t ib) {
    const double* L = lv.data() + il * n * n;
    double* X = out.data() + o * n * m;
    std::copy_n(bv.data() + ib * n * m, n * m, X);
    detail::trsm_lower(L, X, n, m);
  });
  Trace* tr = l.tr;
  bool ng = tr->node(l.id).needs_grad || tr->node(b.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int lid = l.id, bid = b.id, oid = res.id;
    tr->node(oid).vjp = [tr, lid, bid, oid, bm, n, m]() {
      const auto& g = tr->grad(oid);
      const auto& lv2 = tr->node(lid).v;
      const auto& xv = tr->node(oid).v;
      const bool ngl = tr->node(lid).needs_grad;
      const bool ngb = tr->node(bid).needs_grad;
      std::vector<double>* gl = ngl ? &tr->grad(lid) : nullptr;
      std::vector<double>* gb = ngb ? &tr->grad(bid) : nullptr;
      std::vector<double> w(static_cast<std::size_t>(n * m));
      bm.for_each([&](std::int64_t o, std::int64_t il, std::int64_t ib) {
        const double* L = lv2.data() + il * n * n;
        const double* X = xv.data() + o * n * m;
        std::copy_n(g.data() + o * n * m, n * m, w.data());
        // w := L^{-T} gbar  (this is bbar)
        detail::trsm_lower_t(L, w.data(), n, m);
        if (gb) {
          double* GB = gb->data() + ib * n * m;
          for (std::int64_t i = 0; i < n * m; ++i) GB[i] += w[static_cast<std::size_t>(i)];
        }
        if (gl) {
          // Lbar = -tril(bbar X^T)
          double* GL = gl->data() + il * n * n;
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j <= i; ++j) {
              double s = 0.0;
              for (std::int64_t c = 0; c < m; ++c)
                s += w[static_cast<std::size_t>(i * m + c)] * X[j * m + c];
              GL[i * n + j] -= s;
            }
        }
      });
    };
  }
  return res;
}

}  // namespace lfm::ad
