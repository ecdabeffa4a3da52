#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive in execution order, so node ids are already a
// topological order: backward() walks ids from the root down and calls each
// node's local rule exactly once. Parameters live outside any tape and are
// bound to a tape with Tape::watch(); after backward() their `grad` holds the
// derivative of the root.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "stg/error.hpp"
#include "stg/tensor.hpp"

namespace stg {

/// Named learnable tensor with its most recent gradient (empty until a
/// backward pass has produced one).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  bool has_grad() const noexcept { return !grad.empty(); }
};

class Tape;

/// Handle to a tensor recorded on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient of the last backward root; zeros when unreachable or untracked.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Local derivative rule: reads grad(self) and accumulates into parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Untracked leaf: never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  /// Tracked leaf.
  Var variable(Tensor value) { return push(std::move(value), {}, nullptr, true, nullptr); }

  /// Tracked leaf bound to a parameter. Watching the same parameter twice on
  /// one tape returns the same node.
  Var watch(Parameter& p) {
    if (auto it = watched_.find(&p); it != watched_.end()) return Var(this, it->second);
    Var v = push(p.value, {}, nullptr, true, &p);
    watched_.emplace(&p, v.id());
    return v;
  }

  /// Records a primitive. The value must be finite; `op` names it in errors.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn, std::string_view op) {
    value.require_finite(op);
    bool tracked = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.tape_ != this) throw ContractError(std::string(op) + ": operand recorded on a different tape");
      tracked = tracked || nodes_[p.id_].tracked;
      ids.push_back(p.id_);
    }
    return push(std::move(value), std::move(ids), tracked ? std::move(fn) : nullptr, tracked, nullptr);
  }

  void backward(const Var& root) {
    if (root.tape_ != this) throw ContractError("backward: root recorded on a different tape");
    for (auto e : root.shape()) {
      if (e != 1) throw ContractError("backward: root must be scalar-shaped, got " + shape_str(root.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(root.id_).data()[0] = 1.0;
    for (std::size_t id = root.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.tracked || n.grad.empty() || !n.fn) continue;
      n.fn(*this, id);
    }
    for (auto& n : nodes_) {
      if (n.param != nullptr) n.param->grad = n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
    }
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator of a node, zero-filled on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn fn;
    bool tracked = false;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool tracked, Parameter* param) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(fn), tracked, param});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> watched_;
};

inline const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

inline Tensor Var::grad() const {
  const Tensor& g = tape_->grad(id_);
  return g.empty() ? Tensor::zeros(value().shape()) : g;
}

namespace detail {

inline Tape& tape_of(const Var& a, std::string_view op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": unbound operand");
  return *a.tape();
}

// Outer/axis/inner decomposition used by every axis-wise primitive.
struct AxisView {
  std::size_t outer = 1, dim = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Shapes are compatible when equal or when one is a trailing suffix of the
// other (implicit leading-1 expansion).
inline Shape binary_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class F, class DA, class DB>
Var binary(const Var& a, const Var& b, std::string_view op, F f, DA da, DB db) {
  Tape& t = tape_of(a, op);
  const Shape out_shape = binary_shape(a.shape(), b.shape(), op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t na = av.size(), nb = bv.size();
  Tensor out(out_shape);
  auto o = out.data();
  const double* A = av.data().data();
  const double* B = bv.data().data();
  for (std::size_t i = 0, ja = 0, jb = 0; i < o.size(); ++i) {
    o[i] = f(A[ja], B[jb]);
    if (++ja == na) ja = 0;
    if (++jb == nb) jb = 0;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b},
                  [ia, ib, na, nb, da, db](Tape& tp, std::size_t self) {
                    const auto g = tp.grad(self).data();
                    const double* x = tp.value(ia).data().data();
                    const double* y = tp.value(ib).data().data();
                    const double* z = tp.value(self).data().data();
                    if (tp.tracked(ia)) {
                      double* gx = tp.grad_buffer(ia).data().data();
                      for (std::size_t i = 0, ja = 0, jb = 0; i < g.size(); ++i) {
                        gx[ja] += g[i] * da(x[ja], y[jb], z[i]);
                        if (++ja == na) ja = 0;
                        if (++jb == nb) jb = 0;
                      }
                    }
                    if (tp.tracked(ib)) {
                      double* gy = tp.grad_buffer(ib).data().data();
                      for (std::size_t i = 0, ja = 0, jb = 0; i < g.size(); ++i) {
                        gy[jb] += g[i] * db(x[ja], y[jb], z[i]);
                        if (++ja == na) ja = 0;
                        if (++jb == nb) jb = 0;
                      }
                    }
                  },
                  op);
}

// f(x) -> y, dydx(x, y)
template <class F, class D>
Var unary(const Var& a, std::string_view op, F f, D dydx) {
  Tape& t = tape_of(a, op);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, dydx](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    const Tensor& x = tp.value(ia);
                    const Tensor& y = tp.value(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dydx(x[i], y[i]);
                  },
                  op);
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class M>
using RowMap = Eigen::Map<M, Eigen::Unaligned>;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline auto view(const double* p, std::size_t r, std::size_t c) {
  return RowMap<const RowMajor>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline auto view(double* p, std::size_t r, std::size_t c) {
  return RowMap<RowMajor>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// C[MxN] += A[MxK] B[KxN]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  view(C, M, N).noalias() += view(A, M, K) * view(B, K, N);
}

// GA[MxK] += G[MxN] B[KxN]^T
inline void gemm_nt(const double* G, const double* B, double* GA, std::size_t M, std::size_t K, std::size_t N) {
  view(GA, M, K).noalias() += view(G, M, N) * view(B, K, N).transpose();
}

// GB[KxN] += A[MxK]^T G[MxN]
inline void gemm_tn(const double* A, const double* G, double* GB, std::size_t M, std::size_t K, std::size_t N) {
  view(GB, K, N).noalias() += view(A, M, K).transpose() * view(G, M, N);
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  for (double v : b.value().data()) {
    if (v == 0.0) throw NumericalError("div: division by zero");
  }
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

inline Var scale(const Var& a, double c) {
  return detail::unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

/// c - a, elementwise.
inline Var rsub_scalar(double c, const Var& a) {
  return detail::unary(a, "rsub_scalar", [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Var tanh(const Var& a) {
  return detail::unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, "sigmoid", detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& a, double slope) {
  return detail::unary(
      a, "leaky_relu", [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (v <= 0.0) throw NumericalError("log: non-positive argument");
  }
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) {
  return detail::unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// 1/x with 1/0 := 0 (degree normalisation of isolated nodes).
inline Var safe_reciprocal(const Var& a) {
  return detail::unary(
      a, "safe_reciprocal", [](double x) { return x == 0.0 ? 0.0 : 1.0 / x; },
      [](double x, double) { return x == 0.0 ? 0.0 : -1.0 / (x * x); });
}

/// x^(-1/2) with 0 -> 0; negative input is a numerical error.
inline Var safe_rsqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw NumericalError("safe_rsqrt: negative argument");
  }
  return detail::unary(
      a, "safe_rsqrt", [](double x) { return x == 0.0 ? 0.0 : 1.0 / std::sqrt(x); },
      [](double x, double y) { return x == 0.0 ? 0.0 : -0.5 * y / x; });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the last two axes. Leading axes must agree,
/// or one operand is a plain matrix shared across the other's batch.
inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t M = sa[sa.size() - 2], K = sa.back(), K2 = sb[sb.size() - 2], N = sb.back();
  if (K != K2) throw DimensionError("matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));
  const Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
  Shape lead;
  if (lead_a.empty()) {
    lead = lead_b;
  } else if (lead_b.empty() || lead_a == lead_b) {
    lead = lead_a;
  } else {
    throw DimensionError("matmul: batch extents differ, " + shape_str(sa) + " x " + shape_str(sb));
  }
  // A batch against a shared right operand is one tall product.
  const bool fold = !lead_a.empty() && lead_b.empty();
  const std::size_t batch = fold ? 1 : shape_volume(lead);
  const std::size_t rows = fold ? shape_volume(lead_a) * M : M;
  const std::size_t step_a = lead_a.empty() ? 0 : rows * K;
  const std::size_t step_b = lead_b.empty() ? 0 : K * N;
  Shape out_shape = lead;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor out(out_shape);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) detail::gemm_nn(A + i * step_a, B + i * step_b, C + i * rows * N, rows, K, N);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b},
                  [=](Tape& tp, std::size_t self) {
                    const double* G = tp.grad(self).data().data();
                    const double* Av = tp.value(ia).data().data();
                    const double* Bv = tp.value(ib).data().data();
                    if (tp.tracked(ia)) {
                      double* GA = tp.grad_buffer(ia).data().data();
                      for (std::size_t i = 0; i < batch; ++i)
                        detail::gemm_nt(G + i * rows * N, Bv + i * step_b, GA + i * step_a, rows, K, N);
                    }
                    if (tp.tracked(ib)) {
                      double* GB = tp.grad_buffer(ib).data().data();
                      for (std::size_t i = 0; i < batch; ++i)
                        detail::gemm_tn(Av + i * step_a, G + i * rows * N, GB + i * step_b, rows, K, N);
                    }
                  },
                  "matmul");
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
  Tape& t = detail::tape_of(a, "reshape");
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  },
                  "reshape");
}

/// Reorders axes: output axis i is input axis perm[i].
inline Var permute(const Var& a, std::vector<std::size_t> perm) {
  Tape& t = detail::tape_of(a, "permute");
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  for (auto p : perm) {
    if (p >= s.size() || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
  const auto in_strides = detail::strides_of(s);
  // source offset for each output position, computed once and reused in backward
  std::vector<std::size_t> src(a.value().size());
  {
    std::vector<std::size_t> idx(s.size(), 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < s.size(); ++d) off += idx[d] * in_strides[perm[d]];
      src[o] = off;
      for (std::size_t d = s.size(); d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  Tensor out(out_shape);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = av[src[o]];
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, src = std::move(src)](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
                  },
                  "permute");
}

/// Swaps two axes (defaults to the last two).
inline Var transpose(const Var& a, std::size_t ax0, std::size_t ax1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (ax0 >= perm.size() || ax1 >= perm.size()) throw DimensionError("transpose: axis out of range");
  std::swap(perm[ax0], perm[ax1]);
  return permute(a, std::move(perm));
}

inline Var transpose(const Var& a) {
  if (a.rank() < 2) throw DimensionError("transpose: rank must be >= 2, got " + shape_str(a.shape()));
  return transpose(a, a.rank() - 2, a.rank() - 1);
}

/// Right-aligned expansion: each input extent equals the target or is 1.
inline Var broadcast(const Var& a, Shape target) {
  Tape& t = detail::tape_of(a, "broadcast");
  const Shape& s = a.shape();
  if (s.size() > target.size()) throw DimensionError("broadcast: cannot reduce rank of " + shape_str(s));
  const std::size_t lead = target.size() - s.size();
  const auto in_strides = detail::strides_of(s);
  std::vector<std::size_t> bstride(target.size(), 0);
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (s[d] != target[lead + d] && s[d] != 1) {
      throw DimensionError("broadcast: " + shape_str(s) + " is not expandable to " + shape_str(target));
    }
    bstride[lead + d] = s[d] == 1 ? 0 : in_strides[d];
  }
  const std::size_t n = shape_volume(target);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(target.size(), 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < target.size(); ++d) off += idx[d] * bstride[d];
    src[o] = off;
    for (std::size_t d = target.size(); d-- > 0;) {
      if (++idx[d] < target[d]) break;
      idx[d] = 0;
    }
  }
  Tensor out(std::move(target));
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < n; ++o) out[o] = av[src[o]];
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, src = std::move(src)](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
                  },
                  "broadcast");
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  Tape& t = detail::tape_of(parts.front(), "concat");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != out_shape[d]) {
        throw DimensionError("concat: shapes " + shape_str(out_shape) + " and " + shape_str(s) + " disagree off-axis");
      }
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto ov = detail::axis_view(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    widths.push_back(w);
    offsets.push_back(off);
    const Tensor& pv = p.value();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(pv.data().begin() + o * w * ov.inner, w * ov.inner,
                  out.data().begin() + (o * total + off) * ov.inner);
    }
    off += w;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return t.record(std::move(out), parts,
                  [ov, total, widths, offsets, ids](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!tp.tracked(ids[k])) continue;
                      auto gx = tp.grad_buffer(ids[k]).data();
                      const std::size_t w = widths[k];
                      for (std::size_t o = 0; o < ov.outer; ++o) {
                        const double* src = g.data().data() + (o * total + offsets[k]) * ov.inner;
                        double* dst = gx.data() + o * w * ov.inner;
                        for (std::size_t i = 0; i < w * ov.inner; ++i) dst[i] += src[i];
                      }
                    }
                  },
                  "concat");
}

/// Half-open range [begin, end) along one axis.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& t = detail::tape_of(a, "slice");
  const Shape& s = a.shape();
  const auto v = detail::axis_view(s, axis, "slice");
  if (begin >= end || end > v.dim) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(s) + " axis " + std::to_string(axis));
  }
  const std::size_t w = end - begin;
  Shape out_shape = s;
  out_shape[axis] = w;
  Tensor out(out_shape);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(av.data().begin() + (o * v.dim + begin) * v.inner, w * v.inner,
                out.data().begin() + o * w * v.inner);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, v, begin, w](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t o = 0; o < v.outer; ++o) {
                      const double* src = g.data().data() + o * w * v.inner;
                      double* dst = gx.data() + (o * v.dim + begin) * v.inner;
                      for (std::size_t i = 0; i < w * v.inner; ++i) dst[i] += src[i];
                    }
                  },
                  "slice");
}

// ---------------------------------------------------------------------------
// Reductions and normalisation

/// Sum over one axis; the axis is removed (a rank-1 input yields shape [1]).
inline Var reduce_sum(const Var& a, std::size_t axis) {
  Tape& t = detail::tape_of(a, "reduce_sum");
  const Shape& s = a.shape();
  const auto v = detail::axis_view(s, axis, "reduce_sum");
  Shape out_shape;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.dim; ++k)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += av[(o * v.dim + k) * v.inner + i];
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, v](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t o = 0; o < v.outer; ++o)
                      for (std::size_t k = 0; k < v.dim; ++k)
                        for (std::size_t i = 0; i < v.inner; ++i) gx[(o * v.dim + k) * v.inner + i] += g[o * v.inner + i];
                  },
                  "reduce_sum");
}

inline Var reduce_mean(const Var& a, std::size_t axis) {
  const double n = static_cast<double>(a.dim(axis));
  return scale(reduce_sum(a, axis), 1.0 / n);
}

/// Sum of every element, shape [1].
inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a, "sum");
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(acc), {a},
                  [ia](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    for (auto& x : tp.grad_buffer(ia).data()) x += g;
                  },
                  "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

namespace detail {

inline Var softmax_impl(const Var& a, std::size_t axis, const Tensor* mask, std::string_view op) {
  Tape& t = tape_of(a, op);
  const auto v = axis_view(a.shape(), axis, op);
  if (mask != nullptr && mask->shape() != a.shape()) {
    throw DimensionError(std::string(op) + ": mask shape " + shape_str(mask->shape()) + " differs from " +
                         shape_str(a.shape()));
  }
  const Tensor& av = a.value();
  Tensor out(a.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * v.dim + k) * v.inner + i; };
      auto on = [&](std::size_t k) { return mask == nullptr || (*mask)[at(k)] != 0.0; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.dim; ++k)
        if (on(k)) mx = std::max(mx, av[at(k)]);
      if (!std::isfinite(mx)) throw ContractError(std::string(op) + ": a row has no admissible entry");
      double z = 0.0;
      for (std::size_t k = 0; k < v.dim; ++k) {
        const double e = on(k) ? std::exp(av[at(k)] - mx) : 0.0;
        out[at(k)] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.dim; ++k) out[at(k)] /= z;
    }
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, v](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    const Tensor& y = tp.value(self);
                    auto gx = tp.grad_buffer(ia).data();
                    for (std::size_t o = 0; o < v.outer; ++o) {
                      for (std::size_t i = 0; i < v.inner; ++i) {
                        double dot = 0.0;
                        for (std::size_t k = 0; k < v.dim; ++k) {
                          const std::size_t p = (o * v.dim + k) * v.inner + i;
                          dot += g[p] * y[p];
                        }
                        for (std::size_t k = 0; k < v.dim; ++k) {
                          const std::size_t p = (o * v.dim + k) * v.inner + i;
                          gx[p] += y[p] * (g[p] - dot);
                        }
                      }
                    }
                  },
                  op);
}

}  // namespace detail

inline Var softmax(const Var& a, std::size_t axis) { return detail::softmax_impl(a, axis, nullptr, "softmax"); }

/// Softmax restricted to entries whose mask is nonzero; masked entries are 0.
inline Var masked_softmax(const Var& a, const Tensor& mask, std::size_t axis) {
  return detail::softmax_impl(a, axis, &mask, "masked_softmax");
}

// ---------------------------------------------------------------------------
// Tensor-valued conveniences

/// Elementwise product with a constant tensor (masks, fixed weights).
inline Var mul_const(const Var& a, const Tensor& c) { return mul(a, a.tape()->constant(c)); }

inline Var add_const(const Var& a, const Tensor& c) { return add(a, a.tape()->constant(c)); }

}  // namespace stg
