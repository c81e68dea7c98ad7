#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/rng.hpp"

// Reverse-mode differentiable array engine. A Trace owns an append-only list
// of operation records (values plus an adjoint closure); Tensor is a cheap
// handle into one trace. Everything is double precision: the test suite
// checks every adjoint against central finite differences, which is hopeless
// at single precision.

namespace lfm::ad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class Trace;

struct Tensor {
  Trace* tr = nullptr;
  int id = -1;

  bool valid() const { return tr != nullptr && id >= 0; }
  const Shape& shape() const;
  std::int64_t size() const;
  int rank() const;
  const std::vector<double>& val() const;
  double scalar() const;
  // gradient of the last backward() call; zeros if this node was not reached
  std::vector<double> grad() const;
};

struct Node {
  Shape shape;
  std::vector<double> v;
  bool needs_grad = false;
  std::function<void()> vjp;  // empty for leaves and constants
};

class Trace {
 public:
  explicit Trace(std::uint64_t seed = 0) : rng_(seed) {}

  Trace(const Trace&) = delete;
  Trace& operator=(const Trace&) = delete;

  Tensor make(Shape shape, std::vector<double> values, bool needs_grad,
              std::function<void()> vjp) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("node value count does not match shape " + shape_str(shape));
    nodes_.push_back(Node{std::move(shape), std::move(values), needs_grad, std::move(vjp)});
    return Tensor{this, static_cast<int>(nodes_.size() - 1)};
  }

  Tensor constant(Shape shape, std::vector<double> values) {
    return make(std::move(shape), std::move(values), false, nullptr);
  }

  Tensor scalar(double x) { return constant({}, {x}); }

  Tensor full(Shape shape, double x) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), x);
    return constant(std::move(shape), std::move(v));
  }

  // differentiable input; copies the caller's storage
  Tensor leaf(const Shape& shape, std::span<const double> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("leaf value count does not match shape");
    return make(shape, std::vector<double>(values.begin(), values.end()), true, nullptr);
  }

  // standard-normal constants drawn from the trace stream; replaying a trace
  // with the same seed reproduces them bit-identically
  Tensor randn(const Shape& shape) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = rng_.normal();
    return constant(shape, std::move(v));
  }

  Rng& rng() { return rng_; }

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  bool grad_ready() const { return !grads_.empty(); }

  // lazily-allocated adjoint buffer for a node
  std::vector<double>& grad(int id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(numel(node(id).shape)), 0.0);
    return g;
  }

  bool grad_nonzero(int id) const {
    return !grads_[static_cast<std::size_t>(id)].empty();
  }

  void backward(const Tensor& root) {
    if (root.tr != this) throw ShapeError("backward: root belongs to a different trace");
    if (numel(node(root.id).shape) != 1)
      throw ShapeError("backward: root must be a scalar");
    grads_.assign(nodes_.size(), {});
    grad(root.id)[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.vjp || !n.needs_grad) continue;
      if (!grad_nonzero(id)) continue;
      n.vjp();
    }
  }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  // deque keeps node references stable while ops append, so shape()/val()
  // references held across op calls stay valid
  std::deque<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  Rng rng_;
};

inline const Shape& Tensor::shape() const { return tr->node(id).shape; }
inline std::int64_t Tensor::size() const { return numel(shape()); }
inline int Tensor::rank() const { return static_cast<int>(shape().size()); }
inline const std::vector<double>& Tensor::val() const { return tr->node(id).v; }
inline double Tensor::scalar() const {
  if (size() != 1) throw ShapeError("scalar() on tensor of size " + std::to_string(size()));
  return val()[0];
}
inline std::vector<double> Tensor::grad() const {
  if (!tr->grad_ready()) throw NumericalError("grad() before backward()");
  if (tr->grad_nonzero(id)) return tr->grad(id);
  return std::vector<double>(static_cast<std::size_t>(size()), 0.0);
}

namespace detail {

inline void check_same_trace(const Tensor& a, const Tensor& b) {
  if (a.tr != b.tr) throw ShapeError("tensors belong to different traces");
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  out.resize(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    std::int64_t da = i < ra ? a[static_cast<std::size_t>(ra - 1 - i)] : 1;
    std::int64_t db = i < rb ? b[static_cast<std::size_t>(rb - 1 - i)] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[static_cast<std::size_t>(r - 1 - i)] = std::max(da, db);
  }
  return out;
}

// row-major strides with zeros on broadcast dimensions, right-aligned to the
// output rank
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  int ri = static_cast<int>(in.size()), ro = static_cast<int>(out.size());
  std::vector<std::int64_t> strides(static_cast<std::size_t>(ro), 0);
  std::int64_t acc = 1;
  for (int i = 0; i < ri; ++i) {
    int di = ri - 1 - i;
    int dd = ro - 1 - i;
    strides[static_cast<std::size_t>(dd)] = (in[static_cast<std::size_t>(di)] == 1) ? 0 : acc;
    acc *= in[static_cast<std::size_t>(di)];
  }
  return strides;
}

// odometer pair-iteration over an output shape with two strided inputs
template <class F>
inline void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                               const std::vector<std::int64_t>& sb, F&& f) {
  std::int64_t n = numel(out);
  int r = static_cast<int>(out.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t lin = 0; lin < n; ++lin) {
    f(lin, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      if (++idx[du] < out[du]) {
        ia += sa[du];
        ib += sb[du];
        break;
      }
      ia -= sa[du] * (out[du] - 1);
      ib -= sb[du] * (out[du] - 1);
      idx[du] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with NumPy-style broadcasting

namespace detail {

// dfa/dfb: local partials as functions of (a, b); either may be null for
// linear ops where the partial is constant 1/-1 etc., handled by the caller.
template <class FwdF, class DaF, class DbF>
inline Tensor binary_op(const Tensor& a, const Tensor& b, FwdF fwd, DaF da, DbF db) {
  check_same_trace(a, b);
  Trace* tr = a.tr;
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto& av = a.val();
  const auto& bv = b.val();
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  const bool same = a.shape() == b.shape() && a.shape() == out_shape;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      out[static_cast<std::size_t>(o)] =
          fwd(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
    });
  }
  bool ng = tr->node(a.id).needs_grad || tr->node(b.id).needs_grad;
  Tensor res = tr->make(out_shape, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, bid = b.id, oid = res.id;
    Shape ash = a.shape(), bsh = b.shape(), osh = out_shape;
    tr->node(oid).vjp = [tr, aid, bid, oid, ash, bsh, osh, da, db, same]() {
      const auto& g = tr->grad(oid);
      const auto& av2 = tr->node(aid).v;
      const auto& bv2 = tr->node(bid).v;
      const bool nga = tr->node(aid).needs_grad;
      const bool ngb = tr->node(bid).needs_grad;
      if (same) {
        if (nga) {
          auto& ga = tr->grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av2[i], bv2[i]);
        }
        if (ngb) {
          auto& gb = tr->grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av2[i], bv2[i]);
        }
      } else {
        auto sa = broadcast_strides(ash, osh);
        auto sb = broadcast_strides(bsh, osh);
        std::vector<double>* ga = nga ? &tr->grad(aid) : nullptr;
        std::vector<double>* gb = ngb ? &tr->grad(bid) : nullptr;
        for_each_broadcast(osh, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          double go = g[static_cast<std::size_t>(o)];
          double x = av2[static_cast<std::size_t>(ia)];
          double y = bv2[static_cast<std::size_t>(ib)];
          if (ga) (*ga)[static_cast<std::size_t>(ia)] += go * da(x, y);
          if (gb) (*gb)[static_cast<std::size_t>(ib)] += go * db(x, y);
        });
      }
    };
  }
  return res;
}

template <class FwdF, class DF>
inline Tensor unary_op(const Tensor& a, FwdF fwd, DF dfdx) {
  Trace* tr = a.tr;
  const auto& av = a.val();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(a.shape(), std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, dfdx]() {
      const auto& g = tr->grad(oid);
      const auto& av2 = tr->node(aid).v;
      const auto& ov = tr->node(oid).v;
      auto& ga = tr->grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(av2[i], ov[i]);
    };
  }
  return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}

inline Tensor sin(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sin(x); },
                          [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::cos(x); },
                          [](double x, double) { return -std::sin(x); });
}

inline double softplus_val(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_val(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return sigmoid_val(x); },
                          [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return softplus_val(x); },
                          [](double x, double) { return sigmoid_val(x); });
}

inline Tensor elu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0 ? x : std::expm1(x); },
                          [](double x, double y) { return x > 0 ? 1.0 : y + 1.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  Trace* tr = a.tr;
  const auto& av = a.val();
  double s = 0.0;
  for (double x : av) s += x;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make({}, {s}, ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid]() {
      double g = tr->grad(oid)[0];
      auto& ga = tr->grad(aid);
      for (auto& v : ga) v += g;
    };
  }
  return res;
}

namespace detail {
inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}
}  // namespace detail

inline Tensor sum(const Tensor& a, int axis, bool keepdims = false) {
  Trace* tr = a.tr;
  int ax = detail::normalize_axis(axis, a.rank());
  const Shape& sh = a.shape();
  std::int64_t outer = 1, inner = 1, n = sh[static_cast<std::size_t>(ax)];
  for (int i = 0; i < ax; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  Shape osh;
  for (int i = 0; i < a.rank(); ++i) {
    if (i == ax) {
      if (keepdims) osh.push_back(1);
    } else {
      osh.push_back(sh[static_cast<std::size_t>(i)]);
    }
  }
  const auto& av = a.val();
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < n; ++k) {
      const double* src = av.data() + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, outer, inner, n]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k) {
          double* dst = ga.data() + (o * n + k) * inner;
          const double* src = g.data() + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return res;
}

inline Tensor mean(const Tensor& a) {
  Tensor s = sum(a);
  return mul(s, a.tr->scalar(1.0 / static_cast<double>(a.size())));
}

inline Tensor mean(const Tensor& a, int axis, bool keepdims = false) {
  int ax = detail::normalize_axis(axis, a.rank());
  double n = static_cast<double>(a.shape()[static_cast<std::size_t>(ax)]);
  return mul(sum(a, axis, keepdims), a.tr->scalar(1.0 / n));
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  // a single -1 dimension is inferred
  std::int64_t known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (shape[static_cast<std::size_t>(i)] == -1) {
      if (infer >= 0) throw ShapeError("reshape: multiple -1 dims");
      infer = i;
    } else {
      known *= shape[static_cast<std::size_t>(i)];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.size() % known != 0) throw ShapeError("reshape: cannot infer dim");
    shape[static_cast<std::size_t>(infer)] = a.size() / known;
  }
  if (numel(shape) != a.size())
    throw ShapeError("reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(shape, a.val(), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  }
  return res;
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (detail::broadcast_shape(a.shape(), shape) != shape)
    throw ShapeError("broadcast_to: incompatible " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  Trace* tr = a.tr;
  auto sa = detail::broadcast_strides(a.shape(), shape);
  auto sz = detail::broadcast_strides(shape, shape);  // unused second operand
  const auto& av = a.val();
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  detail::for_each_broadcast(shape, sa, sz, [&](std::int64_t o, std::int64_t ia, std::int64_t) {
    out[static_cast<std::size_t>(o)] = av[static_cast<std::size_t>(ia)];
  });
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(shape, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    Shape osh = shape;
    tr->node(oid).vjp = [tr, aid, oid, sa, sz, osh]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      detail::for_each_broadcast(osh, sa, sz, [&](std::int64_t o, std::int64_t ia, std::int64_t) {
        ga[static_cast<std::size_t>(ia)] += g[static_cast<std::size_t>(o)];
      });
    };
  }
  return res;
}

// contiguous slice along one axis
inline Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  int ax = detail::normalize_axis(axis, a.rank());
  const Shape& sh = a.shape();
  std::int64_t dim = sh[static_cast<std::size_t>(ax)];
  if (start < 0 || len < 0 || start + len > dim) throw ShapeError("slice out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  Shape osh = sh;
  osh[static_cast<std::size_t>(ax)] = len;
  const auto& av = a.val();
  std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * dim + start) * inner, len * inner,
                out.data() + o * len * inner);
  Trace* tr = a.tr;
  bool ng = tr->node(a.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    int aid = a.id, oid = res.id;
    tr->node(oid).vjp = [tr, aid, oid, outer, inner, dim, start, len]() {
      const auto& g = tr->grad(oid);
      auto& ga = tr->grad(aid);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * len * inner;
        double* dst = ga.data() + (o * dim + start) * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return res;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Trace* tr = parts[0].tr;
  int ax = detail::normalize_axis(axis, parts[0].rank());
  Shape osh = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    detail::check_same_trace(parts[0], p);
    if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != ax && p.shape()[static_cast<std::size_t>(i)] != osh[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shape mismatch on non-concat axis");
    total += p.shape()[static_cast<std::size_t>(ax)];
  }
  osh[static_cast<std::size_t>(ax)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= osh[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < static_cast<int>(osh.size()); ++i)
    inner *= osh[static_cast<std::size_t>(i)];
  std::vector<double> out(static_cast<std::size_t>(numel(osh)));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    std::int64_t plen = p.shape()[static_cast<std::size_t>(ax)];
    const auto& pv = p.val();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * plen * inner, plen * inner,
                  out.data() + (o * total + offset) * inner);
    offset += plen;
  }
  bool ng = false;
  for (const auto& p : parts) ng = ng || tr->node(p.id).needs_grad;
  Tensor res = tr->make(osh, std::move(out), ng, nullptr);
  if (ng) {
    std::vector<int> pids;
    std::vector<std::int64_t> plens;
    for (const auto& p : parts) {
      pids.push_back(p.id);
      plens.push_back(p.shape()[static_cast<std::size_t>(ax)]);
    }
    int oid = res.id;
    tr->node(oid).vjp = [tr, pids, plens, oid, outer, inner, total]() {
      const auto& g = tr->grad(oid);
      std::int64_t offset2 = 0;
      for (std::size_t pi = 0; pi < pids.size(); ++pi) {
        std::int64_t plen = plens[pi];
        if (tr->node(pids[pi]).needs_grad) {
          auto& gp = tr->grad(pids[pi]);
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * total + offset2) * inner;
            double* dst = gp.data() + o * plen * inner;
            for (std::int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
          }
        }
        offset2 += plen;
      }
    };
  }
  return res;
}

// convenience: scalar constant operand
inline Tensor operator*(double a, const Tensor& b) { return mul(b.tr->scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, a.tr->scalar(b)); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, a.tr->scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(b.tr->scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, a.tr->scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(b.tr->scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, a.tr->scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(b.tr->scalar(a), b); }

}  // namespace lfm::ad
