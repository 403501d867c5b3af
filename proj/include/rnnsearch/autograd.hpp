// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/tensor.hpp"

namespace rnnsearch::ag {

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  tanh,
  sigmoid,
  log,
  negate,
  softmax_row,
  log_softmax_row,
  concat,
  slice,
  lookup,
  pairwise_max,
  sum,
  pick,
  gather_rows,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::negate: return "negate";
    case OpKind::softmax_row: return "softmax_row";
    case OpKind::log_softmax_row: return "log_softmax_row";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::lookup: return "lookup";
    case OpKind::pairwise_max: return "pairwise_max";
    case OpKind::sum: return "sum";
    case OpKind::pick: return "pick";
    case OpKind::gather_rows: return "gather_rows";
  }
  return "?";
}

inline std::optional<OpKind> op_from_name(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(OpKind::gather_rows); ++k) {
    if (op_name(static_cast<OpKind>(k)) == name) return static_cast<OpKind>(k);
  }
  return std::nullopt;
}

/// Test-only mutation hook: when set, the backward rule of this op kind
/// receives an upstream gradient scaled by 1.5, so gradient checks must fail.
inline std::optional<OpKind>& corrupted_backward() {
  static std::optional<OpKind> kind;
  return kind;
}

template <typename Real>
using GradientSet = std::map<std::string, Tensor<Real>>;

template <typename Real>
class Tape;

/// Handle to a node on a tape.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const { return tape->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor<Real> value;
    const Tensor<Real>* external = nullptr;
    Tensor<Real> grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Backward backward;
    std::string name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Named leaf that refers to caller-owned storage; the tensor must outlive the tape.
  Var<Real> parameter(std::string name, const Tensor<Real>& t) {
    Node n;
    n.external = &t;
    n.needs_grad = true;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Named leaf owning its value; it receives a gradient.
  Var<Real> variable(std::string name, Tensor<Real> t) {
    Node n;
    n.value = std::move(t);
    n.needs_grad = true;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<Real> constant(Tensor<Real> t) {
    Node n;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<Real> record(OpKind kind, std::vector<std::size_t> inputs, Tensor<Real> value,
                   Backward backward) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                               [&](std::size_t i) { return nodes_[i].needs_grad; });
    if (n.needs_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<Real>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<Real>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of an input; zero-initialised on first use.
  Tensor<Real>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !value(id).empty()) {
      n.grad = Tensor<Real>(value(id).rows(), value(id).cols());
    }
    return n.grad;
  }

  /// Reverse sweep from a scalar root. Returns gradients of every named leaf;
  /// leaves the root does not depend on get zero tensors.
  GradientSet<Real> backward(Var<Real> root) {
    if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
    const auto& rv = value(root.id);
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw std::invalid_argument(
          rnnsearch::detail::concat("backward: root must be scalar, got ", rv.shape_string()));
    }
    for (auto& n : nodes_) n.grad = Tensor<Real>();
    if (nodes_[root.id].needs_grad) {
      grad_buffer(root.id)(0, 0) = Real(1);
      const auto fault = corrupted_backward();
      for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
        if (fault && *fault == n.kind) {
          for (auto& g : n.grad.span()) g *= Real(1.5);
        }
        n.backward(*this, i);
      }
    }
    GradientSet<Real> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.kind != OpKind::leaf || !n.needs_grad) continue;
      const auto& v = value(i);
      Tensor<Real> g = n.grad.empty() ? Tensor<Real>(v.rows(), v.cols()) : std::move(n.grad);
      auto it = out.find(n.name);
      if (it == out.end()) {
        out.emplace(n.name, std::move(g));
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
      }
    }
    for (auto& n : nodes_) n.grad = Tensor<Real>();
    return out;
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

enum class Broadcast { same, row, col };

template <typename Real>
Broadcast broadcast_kind(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.same_shape(b)) return Broadcast::same;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col;
  throw std::invalid_argument(rnnsearch::detail::concat(op, ": incompatible shapes ", a.shape_string(),
                                                        " and ", b.shape_string()));
}

template <typename Real>
Real bval(const Tensor<Real>& b, Broadcast k, std::size_t r, std::size_t c) {
  switch (k) {
    case Broadcast::same: return b(r, c);
    case Broadcast::row: return b(0, c);
    case Broadcast::col: return b(r, 0);
  }
  return Real(0);
}

template <typename Real>
void accumulate_reduced(Tensor<Real>& gb, Broadcast k, std::size_t r, std::size_t c, Real v) {
  switch (k) {
    case Broadcast::same: gb(r, c) += v; break;
    case Broadcast::row: gb(0, c) += v; break;
    case Broadcast::col: gb(r, 0) += v; break;
  }
}

template <typename Real>
void check_same_tape(Var<Real> a, Var<Real> b) {
  if (a.tape != b.tape) throw std::invalid_argument("autograd: operands on different tapes");
}

}  // namespace detail

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  detail::check_same_tape(a, b);
  auto value = rnnsearch::matmul(a.value(), b.value());
  return a.tape->record(OpKind::matmul, {a.id, b.id}, std::move(value),
                        [ai = a.id, bi = b.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.needs_grad(ai)) kernel::gemm_nt(g, t.value(bi), t.grad_buffer(ai));
                          if (t.needs_grad(bi)) kernel::gemm_tn(t.value(ai), g, t.grad_buffer(bi));
                        });
}

/// x * W^T for a weight stored as (out x in).
template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> w) {
  detail::check_same_tape(x, w);
  auto value = rnnsearch::matmul_bt(x.value(), w.value());
  return x.tape->record(OpKind::matmul, {x.id, w.id}, std::move(value),
                        [xi = x.id, wi = w.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.needs_grad(xi)) kernel::gemm_nn(g, t.value(wi), t.grad_buffer(xi));
                          if (t.needs_grad(wi)) kernel::gemm_tn(g, t.value(xi), t.grad_buffer(wi));
                        });
}

/// a + b, where b may also be a 1 x cols row or a rows x 1 column broadcast over a.
template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  detail::check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto bk = detail::broadcast_kind(av, bv, "add");
  Tensor<Real> value(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) value(r, c) = av(r, c) + detail::bval(bv, bk, r, c);
  return a.tape->record(OpKind::add, {a.id, b.id}, std::move(value),
                        [ai = a.id, bi = b.id, bk](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.needs_grad(ai)) {
                            auto& ga = t.grad_buffer(ai);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
                          }
                          if (t.needs_grad(bi)) {
                            auto& gb = t.grad_buffer(bi);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c)
                                detail::accumulate_reduced(gb, bk, r, c, g(r, c));
                          }
                        });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  detail::check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto bk = detail::broadcast_kind(av, bv, "sub");
  Tensor<Real> value(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) value(r, c) = av(r, c) - detail::bval(bv, bk, r, c);
  return a.tape->record(OpKind::sub, {a.id, b.id}, std::move(value),
                        [ai = a.id, bi = b.id, bk](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.needs_grad(ai)) {
                            auto& ga = t.grad_buffer(ai);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
                          }
                          if (t.needs_grad(bi)) {
                            auto& gb = t.grad_buffer(bi);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c)
                                detail::accumulate_reduced(gb, bk, r, c, -g(r, c));
                          }
                        });
}

/// Elementwise product; b may broadcast as in add().
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  detail::check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto bk = detail::broadcast_kind(av, bv, "mul");
  Tensor<Real> value(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) value(r, c) = av(r, c) * detail::bval(bv, bk, r, c);
  return a.tape->record(OpKind::mul, {a.id, b.id}, std::move(value),
                        [ai = a.id, bi = b.id, bk](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& av = t.value(ai);
                          const auto& bv = t.value(bi);
                          if (t.needs_grad(ai)) {
                            auto& ga = t.grad_buffer(ai);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c)
                                ga(r, c) += g(r, c) * detail::bval(bv, bk, r, c);
                          }
                          if (t.needs_grad(bi)) {
                            auto& gb = t.grad_buffer(bi);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c)
                                detail::accumulate_reduced(gb, bk, r, c, g(r, c) * av(r, c));
                          }
                        });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real s) {
  Tensor<Real> value = a.value();
  for (auto& x : value.span()) x *= s;
  return a.tape->record(OpKind::scale, {a.id}, std::move(value),
                        [ai = a.id, s](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += s * g[k];
                        });
}

template <typename Real>
Var<Real> negate(Var<Real> a) {
  Tensor<Real> value = a.value();
  for (auto& x : value.span()) x = -x;
  return a.tape->record(OpKind::negate, {a.id}, std::move(value),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t k = 0; k < g.size(); ++k) ga[k] -= g[k];
                        });
}

template <typename Real>
Var<Real> tanh(Var<Real> a) {
  Tensor<Real> value = a.value();
  for (auto& x : value.span()) x = std::tanh(x);
  return a.tape->record(OpKind::tanh, {a.id}, std::move(value),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t k = 0; k < n.grad.size(); ++k) {
                            const Real y = n.value[k];
                            ga[k] += n.grad[k] * (Real(1) - y * y);
                          }
                        });
}

template <typename Real>
Var<Real> sigmoid(Var<Real> a) {
  Tensor<Real> value = a.value();
  for (auto& x : value.span()) x = Real(1) / (Real(1) + std::exp(-x));
  return a.tape->record(OpKind::sigmoid, {a.id}, std::move(value),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t k = 0; k < n.grad.size(); ++k) {
                            const Real y = n.value[k];
                            ga[k] += n.grad[k] * y * (Real(1) - y);
                          }
                        });
}

template <typename Real>
Var<Real> log(Var<Real> a) {
  Tensor<Real> value = a.value();
  for (auto& x : value.span()) x = std::log(x);
  return a.tape->record(OpKind::log, {a.id}, std::move(value),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& x = t.value(ai);
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] / x[k];
                        });
}

/// Row-wise softmax. Entries where `mask` is 0 are excluded from the
/// normalisation and come out as exactly 0; a fully masked row is rejected.
template <typename Real>
Var<Real> softmax_rows(Var<Real> a, const Tensor<Real>* mask = nullptr) {
  const auto& x = a.value();
  if (x.cols() == 0) throw std::invalid_argument("softmax_rows: empty rows");
  if (mask && !mask->same_shape(x)) {
    throw std::invalid_argument(rnnsearch::detail::concat(
        "softmax_rows: mask shape ", mask->shape_string(), " differs from ", x.shape_string()));
  }
  Tensor<Real> y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (!mask || (*mask)(r, c) != Real(0)) mx = std::max(mx, x(r, c));
    if (mx == -std::numeric_limits<Real>::infinity()) {
      throw std::invalid_argument(
          rnnsearch::detail::concat("softmax_rows: row ", r, " has every position masked"));
    }
    Real total = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (mask && (*mask)(r, c) == Real(0)) continue;
      y(r, c) = std::exp(x(r, c) - mx);
      total += y(r, c);
    }
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) /= total;
  }
  return a.tape->record(OpKind::softmax_row, {a.id}, std::move(y),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          const auto& y = n.value;
                          const auto& g = n.grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            Real dot = 0;
                            for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
                            for (std::size_t c = 0; c < y.cols(); ++c)
                              ga(r, c) += y(r, c) * (g(r, c) - dot);
                          }
                        });
}

template <typename Real>
Var<Real> log_softmax_rows(Var<Real> a) {
  const auto& x = a.value();
  if (x.cols() == 0) throw std::invalid_argument("log_softmax_rows: empty rows");
  Tensor<Real> y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const Real mx = *std::max_element(row.begin(), row.end());
    Real total = 0;
    for (const Real v : row) total += std::exp(v - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) - lse;
  }
  return a.tape->record(OpKind::log_softmax_row, {a.id}, std::move(y),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const auto& n = t.node(self);
                          const auto& y = n.value;
                          const auto& g = n.grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            Real gsum = 0;
                            for (std::size_t c = 0; c < y.cols(); ++c) gsum += g(r, c);
                            for (std::size_t c = 0; c < y.cols(); ++c)
                              ga(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
                          }
                        });
}

/// Column-wise concatenation of equal-height tensors.
template <typename Real>
Var<Real> concat(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    if (p.rows() != rows) {
      throw std::invalid_argument(rnnsearch::detail::concat("concat: row counts differ (", rows,
                                                            " vs ", p.rows(), ")"));
    }
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor<Real> value(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.row(r).begin(), v.row(r).end(), value.row(r).begin() + off);
    off += v.cols();
  }
  auto inputs = ids;
  return parts[0].tape->record(
      OpKind::concat, std::move(inputs), std::move(value),
      [ids](Tape<Real>& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        std::size_t off = 0;
        for (const auto id : ids) {
          const std::size_t w = t.value(id).cols();
          if (t.needs_grad(id)) {
            auto& gi = t.grad_buffer(id);
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
          }
          off += w;
        }
      });
}

template <typename Real>
Var<Real> concat(std::initializer_list<Var<Real>> parts) {
  return concat(std::span<const Var<Real>>(parts.begin(), parts.size()));
}

template <typename Real>
Var<Real> slice(Var<Real> a, std::size_t begin, std::size_t count) {
  const auto& x = a.value();
  if (begin + count > x.cols() || count == 0) {
    throw std::invalid_argument(rnnsearch::detail::concat("slice: columns [", begin, ", ",
                                                          begin + count, ") out of range for ",
                                                          x.shape_string()));
  }
  Tensor<Real> value(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) value(r, c) = x(r, begin + c);
  return a.tape->record(OpKind::slice, {a.id}, std::move(value),
                        [ai = a.id, begin](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
                        });
}

/// Embedding lookup: row b of the result is column ids[b] of `table`
/// (m x K). A negative id yields a zero row.
template <typename Real>
Var<Real> lookup(Var<Real> table, std::vector<int> ids) {
  const auto& e = table.value();
  Tensor<Real> value(ids.size(), e.rows());
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b] >= static_cast<int>(e.cols())) {
      throw std::invalid_argument(rnnsearch::detail::concat("lookup: id ", ids[b],
                                                            " out of range for ", e.cols(),
                                                            " columns"));
    }
    if (ids[b] < 0) continue;
    for (std::size_t r = 0; r < e.rows(); ++r) value(b, r) = e(r, static_cast<std::size_t>(ids[b]));
  }
  return table.tape->record(OpKind::lookup, {table.id}, std::move(value),
                            [ti = table.id, ids = std::move(ids)](Tape<Real>& t, std::size_t self) {
                              const auto& g = t.node(self).grad;
                              auto& gt = t.grad_buffer(ti);
                              for (std::size_t b = 0; b < ids.size(); ++b) {
                                if (ids[b] < 0) continue;
                                const auto col = static_cast<std::size_t>(ids[b]);
                                for (std::size_t r = 0; r < gt.rows(); ++r) gt(r, col) += g(b, r);
                              }
                            });
}

/// Maxout over adjacent column pairs: out(r, j) = max(a(r, 2j), a(r, 2j+1)).
/// Ties select the lower index, which alone receives the gradient.
template <typename Real>
Var<Real> pairwise_max(Var<Real> a) {
  const auto& x = a.value();
  if (x.cols() % 2 != 0 || x.cols() == 0) {
    throw std::invalid_argument(rnnsearch::detail::concat(
        "pairwise_max: column count must be even and positive, got ", x.shape_string()));
  }
  const std::size_t half = x.cols() / 2;
  Tensor<Real> value(x.rows(), half);
  std::vector<std::uint8_t> pick_second(x.rows() * half);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < half; ++j) {
      const Real lo = x(r, 2 * j), hi = x(r, 2 * j + 1);
      const bool second = hi > lo;
      pick_second[r * half + j] = second;
      value(r, j) = second ? hi : lo;
    }
  }
  return a.tape->record(OpKind::pairwise_max, {a.id}, std::move(value),
                        [ai = a.id, half, pick_second = std::move(pick_second)](Tape<Real>& t,
                                                                                 std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t j = 0; j < half; ++j)
                              ga(r, 2 * j + pick_second[r * half + j]) += g(r, j);
                        });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
  Real total = 0;
  for (const Real v : a.value().span()) total += v;
  return a.tape->record(OpKind::sum, {a.id}, Tensor<Real>(1, 1, total),
                        [ai = a.id](Tape<Real>& t, std::size_t self) {
                          const Real g = t.node(self).grad(0, 0);
                          auto& ga = t.grad_buffer(ai);
                          for (auto& x : ga.span()) x += g;
                        });
}

/// Column `ids[r]` of each row r, as a rows x 1 tensor.
template <typename Real>
Var<Real> pick(Var<Real> a, std::vector<int> ids) {
  const auto& x = a.value();
  if (ids.size() != x.rows()) {
    throw std::invalid_argument(rnnsearch::detail::concat("pick: ", ids.size(), " ids for ",
                                                          x.rows(), " rows"));
  }
  Tensor<Real> value(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (ids[r] < 0 || ids[r] >= static_cast<int>(x.cols())) {
      throw std::invalid_argument(rnnsearch::detail::concat("pick: id ", ids[r], " out of range"));
    }
    value(r, 0) = x(r, static_cast<std::size_t>(ids[r]));
  }
  return a.tape->record(OpKind::pick, {a.id}, std::move(value),
                        [ai = a.id, ids = std::move(ids)](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t r = 0; r < ids.size(); ++r)
                            ga(r, static_cast<std::size_t>(ids[r])) += g(r, 0);
                        });
}

/// Rows `indices` of a, stacked (repeats allowed).
template <typename Real>
Var<Real> gather_rows(Var<Real> a, std::vector<std::size_t> indices) {
  const auto& x = a.value();
  Tensor<Real> value(indices.size(), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) {
      throw std::invalid_argument(rnnsearch::detail::concat("gather_rows: row ", indices[i],
                                                            " out of range for ", x.shape_string()));
    }
    std::copy(x.row(indices[i]).begin(), x.row(indices[i]).end(), value.row(i).begin());
  }
  return a.tape->record(OpKind::gather_rows, {a.id}, std::move(value),
                        [ai = a.id, indices = std::move(indices)](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_buffer(ai);
                          for (std::size_t i = 0; i < indices.size(); ++i)
                            for (std::size_t c = 0; c < g.cols(); ++c) ga(indices[i], c) += g(i, c);
                        });
}

/// References to the tensors a loss function reads, keyed by name.
using ParamRefs = std::vector<std::pair<std::string, Tensor<double>*>>;

/// Central-difference gradient of `loss` with respect to every coordinate of
/// every referenced tensor. Tensors are perturbed in place and restored.
template <typename LossFn>
GradientSet<double> finite_diff_grad(LossFn&& loss, const ParamRefs& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  GradientSet<double> out;
  for (const auto& [name, tensor] : params) {
    Tensor<double> g(tensor->rows(), tensor->cols());
    for (std::size_t k = 0; k < tensor->size(); ++k) {
      const double saved = (*tensor)[k];
      (*tensor)[k] = saved + h;
      const double up = loss();
      (*tensor)[k] = saved - h;
      const double down = loss();
      (*tensor)[k] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError(rnnsearch::detail::concat("finite_diff_grad: non-finite loss probing ",
                                                     name, "[", k, "]"));
      }
      g[k] = (up - down) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

/// Worst per-coordinate |a - n| / max(|a|, |n|, 1e-8) for one tensor pair.
template <typename Real>
double max_relative_error(const Tensor<Real>& analytic, const Tensor<double>& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    throw std::invalid_argument("max_relative_error: shape mismatch");
  }
  double worst = 0;
  for (std::size_t k = 0; k < numeric.size(); ++k) {
    const double a = static_cast<double>(analytic[k]);
    const double n = numeric[k];
    const double denom = std::max({1e-8, std::abs(a), std::abs(n)});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace rnnsearch::ag
