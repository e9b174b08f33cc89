#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "attnprior/tensor.hpp"

namespace attnprior {

enum class MaskMode { Strict, Inclusive };

/// Reverse-mode tape over TensorT values. Nodes are appended in evaluation
/// order, so the node list is already a topological order and backward() is a
/// single reverse sweep that visits each node exactly once. One tape per
/// training sequence; parameters enter as leaves and their grads are read back
/// after backward().
template <class S>
class TapeT {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScaled,
    Matmul,
    Transpose,
    SliceCols,
    SliceRows,
    GatherRows,
    AddRowVec,
    LayerNorm,
    Gelu,
    MaskedSoftmax,
    CrossEntropy,
    RowGram,
    RowOuter,
    MarginLogdet,
    LogAbsDet,
    Sum,
  };

  struct Node {
    Op op;
    TensorT<S> val;
    TensorT<S> grad;
    int a = -1, b = -1, c = -1;
    bool needs_grad = false;
    double scalar0 = 0.0;  // scale factor, eps, det_floor
    int i0 = 0, i1 = 0;    // slice bounds / mask mode / flags
    std::shared_ptr<std::vector<int>> idx;  // gather rows, CE targets
    TensorT<S> saved;                       // op-specific forward cache
    int sat_count = 0;                      // MarginLogdet clamp hits
  };

  TapeT() { nodes_.reserve(256); }

  const TensorT<S>& value(Var v) const { return nodes_[v.id].val; }
  const TensorT<S>& grad(Var v) const { return nodes_[v.id].grad; }
  const Node& node(Var v) const { return nodes_[v.id]; }
  size_t size() const { return nodes_.size(); }

  Var leaf(TensorT<S> t) {
    Node n;
    n.op = Op::Leaf;
    n.needs_grad = t.requires_grad;
    n.val = std::move(t);
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Node n = binary(Op::Add, a, b);
    n.val = value(a);
    auto& d = n.val.data;
    const auto& bd = value(b).data;
    for (size_t i = 0; i < d.size(); ++i) d[i] += bd[i];
    return push(std::move(n));
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Node n = binary(Op::Sub, a, b);
    n.val = value(a);
    auto& d = n.val.data;
    const auto& bd = value(b).data;
    for (size_t i = 0; i < d.size(); ++i) d[i] -= bd[i];
    return push(std::move(n));
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Node n = binary(Op::Mul, a, b);
    n.val = value(a);
    auto& d = n.val.data;
    const auto& bd = value(b).data;
    for (size_t i = 0; i < d.size(); ++i) d[i] *= bd[i];
    return push(std::move(n));
  }

  Var scale(Var a, double c) {
    Node n = unary(Op::Scale, a);
    n.scalar0 = c;
    n.val = value(a);
    for (auto& x : n.val.data) x = static_cast<S>(c * static_cast<double>(x));
    return push(std::move(n));
  }

  /// a + c*b
  Var add_scaled(Var a, Var b, double c) {
    check_same_shape(a, b, "add_scaled");
    Node n = binary(Op::AddScaled, a, b);
    n.scalar0 = c;
    n.val = value(a);
    auto& d = n.val.data;
    const auto& bd = value(b).data;
    for (size_t i = 0; i < d.size(); ++i) d[i] += static_cast<S>(c) * bd[i];
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (!ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows())
      throw DimensionError("matmul shape mismatch " + shape_str(ta.shape) + " * " + shape_str(tb.shape));
    Node n = binary(Op::Matmul, a, b);
    n.val = TensorT<S>({ta.rows(), tb.cols()});
    n.val.mat().noalias() = ta.mat() * tb.mat();
    return push(std::move(n));
  }

  Var transpose(Var a) {
    const auto& ta = value(a);
    Node n = unary(Op::Transpose, a);
    n.val = TensorT<S>({ta.cols(), ta.rows()});
    n.val.mat() = ta.mat().transpose();
    return push(std::move(n));
  }

  Var slice_cols(Var a, Index c0, Index c1) {
    const auto& ta = value(a);
    if (c0 < 0 || c1 > ta.cols() || c0 >= c1) throw DimensionError("slice_cols out of range");
    Node n = unary(Op::SliceCols, a);
    n.i0 = static_cast<int>(c0);
    n.i1 = static_cast<int>(c1);
    n.val = TensorT<S>({ta.rows(), c1 - c0});
    n.val.mat() = ta.mat().middleCols(c0, c1 - c0);
    return push(std::move(n));
  }

  Var slice_rows(Var a, Index r0, Index r1) {
    const auto& ta = value(a);
    if (r0 < 0 || r1 > ta.rows() || r0 >= r1) throw DimensionError("slice_rows out of range");
    Node n = unary(Op::SliceRows, a);
    n.i0 = static_cast<int>(r0);
    n.i1 = static_cast<int>(r1);
    n.val = TensorT<S>({r1 - r0, ta.cols()});
    n.val.mat() = ta.mat().middleRows(r0, r1 - r0);
    return push(std::move(n));
  }

  Var gather_rows(Var table, std::vector<int> ids) {
    const auto& tt = value(table);
    Node n = unary(Op::GatherRows, table);
    n.idx = std::make_shared<std::vector<int>>(std::move(ids));
    n.val = TensorT<S>({static_cast<Index>(n.idx->size()), tt.cols()});
    for (size_t i = 0; i < n.idx->size(); ++i) n.val.mat().row(static_cast<Index>(i)) = tt.mat().row((*n.idx)[i]);
    return push(std::move(n));
  }

  /// rows of a plus the single-row vector b
  Var add_rowvec(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (tb.rows() != 1 || tb.cols() != ta.cols())
      throw DimensionError("add_rowvec wants a 1x" + std::to_string(ta.cols()) + " bias");
    Node n = binary(Op::AddRowVec, a, b);
    n.val = ta;
    n.val.mat().rowwise() += tb.mat().row(0);
    return push(std::move(n));
  }

  Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const auto& tx = value(x);
    const Index R = tx.rows(), C = tx.cols();
    Node n;
    n.op = Op::LayerNorm;
    n.a = x.id;
    n.b = gain.id;
    n.c = bias.id;
    n.needs_grad = nodes_[x.id].needs_grad || nodes_[gain.id].needs_grad || nodes_[bias.id].needs_grad;
    n.scalar0 = eps;
    n.val = TensorT<S>({R, C});
    n.saved = TensorT<S>({R, C + 1});  // xhat rows plus 1/sigma per row
    for (Index r = 0; r < R; ++r) {
      double m = 0;
      for (Index j = 0; j < C; ++j) m += tx.at(r, j);
      m /= C;
      double var = 0;
      for (Index j = 0; j < C; ++j) {
        const double u = tx.at(r, j) - m;
        var += u * u;
      }
      var /= C;
      const double inv = 1.0 / std::sqrt(var + eps);
      n.saved.at(r, C) = static_cast<S>(inv);
      for (Index j = 0; j < C; ++j) {
        const double xh = (tx.at(r, j) - m) * inv;
        n.saved.at(r, j) = static_cast<S>(xh);
        n.val.at(r, j) = static_cast<S>(xh) * value(gain).data[j] + value(bias).data[j];
      }
    }
    return push(std::move(n));
  }

  Var gelu(Var x) {
    Node n = unary(Op::Gelu, x);
    n.val = value(x);
    for (auto& v : n.val.data) {
      const double xv = static_cast<double>(v);
      v = static_cast<S>(0.5 * xv * (1.0 + std::erf(xv * 0.7071067811865475)));
    }
    return push(std::move(n));
  }

  /// Row-wise causal softmax over a square score matrix. Row t normalizes
  /// over columns [0, t) (Strict) or [0, t] (Inclusive); all other entries
  /// are exactly 0. Computed with max-subtraction.
  Var masked_softmax(Var logits, MaskMode mode, bool allow_empty_rows = false) {
    const auto& tl = value(logits);
    if (tl.rows() != tl.cols()) throw DimensionError("masked_softmax wants square scores");
    if (mode == MaskMode::Strict && !allow_empty_rows)
      throw DimensionError("masked_softmax: strict mask leaves row 0 with empty context");
    const Index L = tl.rows();
    Node n = unary(Op::MaskedSoftmax, logits);
    n.i0 = (mode == MaskMode::Inclusive) ? 1 : 0;
    n.val = TensorT<S>({L, L});
    for (Index t = 0; t < L; ++t) {
      const Index hi = (mode == MaskMode::Inclusive) ? t + 1 : t;
      if (hi == 0) continue;  // empty strict context: zero row
      double mx = -std::numeric_limits<double>::infinity();
      for (Index s = 0; s < hi; ++s) mx = std::max(mx, static_cast<double>(tl.at(t, s)));
      double z = 0;
      for (Index s = 0; s < hi; ++s) z += std::exp(static_cast<double>(tl.at(t, s)) - mx);
      for (Index s = 0; s < hi; ++s)
        n.val.at(t, s) = static_cast<S>(std::exp(static_cast<double>(tl.at(t, s)) - mx) / z);
    }
    return push(std::move(n));
  }

  /// Mean negative log-likelihood (nats per row) of targets under row-wise
  /// softmax of logits.
  Var cross_entropy(Var logits, std::vector<int> targets) {
    const auto& tl = value(logits);
    if (static_cast<Index>(targets.size()) != tl.rows())
      throw DimensionError("cross_entropy: one target per row required");
    const Index R = tl.rows(), C = tl.cols();
    Node n = unary(Op::CrossEntropy, logits);
    n.idx = std::make_shared<std::vector<int>>(std::move(targets));
    n.saved = TensorT<S>({R, C});  // softmax probabilities
    double loss = 0;
    for (Index r = 0; r < R; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < C; ++j) mx = std::max(mx, static_cast<double>(tl.at(r, j)));
      double z = 0;
      for (Index j = 0; j < C; ++j) z += std::exp(static_cast<double>(tl.at(r, j)) - mx);
      const double logz = std::log(z) + mx;
      for (Index j = 0; j < C; ++j)
        n.saved.at(r, j) = static_cast<S>(std::exp(static_cast<double>(tl.at(r, j)) - logz));
      loss -= static_cast<double>(tl.at(r, (*n.idx)[r])) - logz;
    }
    n.val = TensorT<S>({1}, static_cast<S>(loss / R));
    return push(std::move(n));
  }

  /// out[t] = sum_s alpha(t,s) x_s x_s^T, stacked as [L, d, d].
  Var row_gram(Var alpha, Var x) {
    const auto& ta = value(alpha);
    const auto& tx = value(x);
    if (ta.cols() != tx.rows()) throw DimensionError("row_gram: alpha cols must match x rows");
    const Index L = ta.rows(), d = tx.cols();
    Node n = binary(Op::RowGram, alpha, x);
    n.val = TensorT<S>({L, d, d});
    for (Index t = 0; t < L; ++t) {
      auto out = n.val.slab(t, d, d);
      out.setZero();
      for (Index s = 0; s < ta.cols(); ++s) {
        const S w = ta.at(t, s);
        if (w == S(0)) continue;
        out.noalias() += w * tx.mat().row(s).transpose() * tx.mat().row(s);
      }
    }
    return push(std::move(n));
  }

  /// out[t] = m_t m_t^T, stacked as [L, d, d].
  Var row_outer(Var m) {
    const auto& tm = value(m);
    const Index L = tm.rows(), d = tm.cols();
    Node n = unary(Op::RowOuter, m);
    n.val = TensorT<S>({L, d, d});
    for (Index t = 0; t < L; ++t)
      n.val.slab(t, d, d).noalias() = tm.mat().row(t).transpose() * tm.mat().row(t);
    return push(std::move(n));
  }

  /// -sum_t log max(|det(I - Sigma_t W^T)|, det_floor). Positions whose
  /// |det| falls below the floor contribute the clamped constant and no
  /// gradient; their count is kept on the node.
  Var margin_logdet(Var sigma_stack, Var w, double det_floor) {
    const auto& ts = value(sigma_stack);
    const auto& tw = value(w);
    if (ts.shape.size() != 3 || ts.shape[1] != ts.shape[2] || tw.rows() != tw.cols() ||
        tw.rows() != ts.shape[1])
      throw DimensionError("margin_logdet wants [L,d,d] covariances and a d x d W");
    const Index L = ts.shape[0], d = ts.shape[1];
    Node n = binary(Op::MarginLogdet, sigma_stack, w);
    n.scalar0 = det_floor;
    n.saved = TensorT<S>({L, d, d});  // M_t^{-1} per position (zero when clamped)
    double penalty = 0;
    const double log_floor = std::log(det_floor);
    MatX<S> M(d, d);
    for (Index t = 0; t < L; ++t) {
      M = MatX<S>::Identity(d, d) - ts.slab(t, d, d) * tw.mat().transpose();
      Eigen::PartialPivLU<MatX<S>> lu(M);
      double lad = 0;
      const auto& U = lu.matrixLU();
      for (Index i = 0; i < d; ++i) lad += std::log(std::abs(static_cast<double>(U(i, i))));
      if (!(lad >= log_floor)) {
        penalty -= log_floor;
        ++n.sat_count;
        n.saved.slab(t, d, d).setZero();
      } else {
        penalty -= lad;
        n.saved.slab(t, d, d) = lu.inverse();
      }
    }
    n.val = TensorT<S>({1}, static_cast<S>(penalty));
    return push(std::move(n));
  }

  /// log|det m| via pivoted LU; -inf sentinel below det_floor (no gradient
  /// flows from a sentinel value).
  Var logabsdet(Var m, double det_floor = 1e-12) {
    const auto& tm = value(m);
    if (!tm.is_matrix() || tm.rows() != tm.cols())
      throw DimensionError("logabsdet wants a square matrix, got " + shape_str(tm.shape));
    const Index d = tm.rows();
    Node n = unary(Op::LogAbsDet, m);
    n.scalar0 = det_floor;
    Eigen::PartialPivLU<MatX<S>> lu(tm.mat());
    double lad = 0;
    const auto& U = lu.matrixLU();
    for (Index i = 0; i < d; ++i) lad += std::log(std::abs(static_cast<double>(U(i, i))));
    if (lad >= std::log(det_floor)) {
      n.saved = TensorT<S>({d, d});
      n.saved.mat() = lu.inverse();
      n.i0 = 1;
      n.val = TensorT<S>({1}, static_cast<S>(lad));
    } else {
      n.i0 = 0;
      n.val = TensorT<S>({1}, -std::numeric_limits<S>::infinity());
    }
    return push(std::move(n));
  }

  Var sum(Var a) {
    Node n = unary(Op::Sum, a);
    double s = 0;
    for (S v : value(a).data) s += static_cast<double>(v);
    n.val = TensorT<S>({1}, static_cast<S>(s));
    return push(std::move(n));
  }

  int saturation_count(Var v) const { return nodes_[v.id].sat_count; }

  /// Reverse sweep seeding d(out)/d(out) = 1. Each node is visited exactly
  /// once, in reverse creation order.
  void backward(Var out) {
    if (!value(out).is_scalar()) throw DimensionError("backward from non-scalar output");
    for (auto& n : nodes_)
      if (n.needs_grad && n.grad.data.empty()) n.grad = TensorT<S>(n.val.shape);
    if (!nodes_[out.id].needs_grad) return;
    nodes_[out.id].grad.data[0] = S(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.op == Op::Leaf) continue;
      backward_node(n);
    }
  }

 private:
  Node unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    return n;
  }
  Node binary(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    return n;
  }
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  void check_same_shape(Var a, Var b, const char* what) const {
    if (value(a).shape != value(b).shape)
      throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(value(a).shape) +
                           " vs " + shape_str(value(b).shape));
  }
  bool wants(int id) const { return id >= 0 && nodes_[id].needs_grad; }
  TensorT<S>& g(int id) { return nodes_[id].grad; }
  const TensorT<S>& v(int id) const { return nodes_[id].val; }

  void backward_node(Node& n) {
    const TensorT<S>& go = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.a).data[i] += go.data[i];
        if (wants(n.b))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.b).data[i] += go.data[i];
        break;
      case Op::Sub:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.a).data[i] += go.data[i];
        if (wants(n.b))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.b).data[i] -= go.data[i];
        break;
      case Op::Mul:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.a).data[i] += go.data[i] * v(n.b).data[i];
        if (wants(n.b))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.b).data[i] += go.data[i] * v(n.a).data[i];
        break;
      case Op::Scale:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i)
            g(n.a).data[i] += static_cast<S>(n.scalar0) * go.data[i];
        break;
      case Op::AddScaled:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i) g(n.a).data[i] += go.data[i];
        if (wants(n.b))
          for (size_t i = 0; i < go.data.size(); ++i)
            g(n.b).data[i] += static_cast<S>(n.scalar0) * go.data[i];
        break;
      case Op::Matmul:
        if (wants(n.a)) g(n.a).mat().noalias() += go.mat() * v(n.b).mat().transpose();
        if (wants(n.b)) g(n.b).mat().noalias() += v(n.a).mat().transpose() * go.mat();
        break;
      case Op::Transpose:
        if (wants(n.a)) g(n.a).mat() += go.mat().transpose();
        break;
      case Op::SliceCols:
        if (wants(n.a)) g(n.a).mat().middleCols(n.i0, n.i1 - n.i0) += go.mat();
        break;
      case Op::SliceRows:
        if (wants(n.a)) g(n.a).mat().middleRows(n.i0, n.i1 - n.i0) += go.mat();
        break;
      case Op::GatherRows:
        if (wants(n.a))
          for (size_t i = 0; i < n.idx->size(); ++i)
            g(n.a).mat().row((*n.idx)[i]) += go.mat().row(static_cast<Index>(i));
        break;
      case Op::AddRowVec:
        if (wants(n.a)) g(n.a).mat() += go.mat();
        if (wants(n.b)) g(n.b).mat().row(0) += go.mat().colwise().sum();
        break;
      case Op::LayerNorm: {
        const Index R = n.val.rows(), C = n.val.cols();
        for (Index r = 0; r < R; ++r) {
          const double inv = static_cast<double>(n.saved.at(r, C));
          double sum_dy_g = 0, sum_dy_g_xh = 0;
          for (Index j = 0; j < C; ++j) {
            const double dyg = static_cast<double>(go.at(r, j)) * static_cast<double>(v(n.b).data[j]);
            sum_dy_g += dyg;
            sum_dy_g_xh += dyg * static_cast<double>(n.saved.at(r, j));
          }
          for (Index j = 0; j < C; ++j) {
            const double xh = static_cast<double>(n.saved.at(r, j));
            const double dyg = static_cast<double>(go.at(r, j)) * static_cast<double>(v(n.b).data[j]);
            if (wants(n.a))
              g(n.a).at(r, j) += static_cast<S>(inv * (dyg - sum_dy_g / C - xh * sum_dy_g_xh / C));
            if (wants(n.b)) g(n.b).data[j] += go.at(r, j) * static_cast<S>(xh);
            if (wants(n.c)) g(n.c).data[j] += go.at(r, j);
          }
        }
        break;
      }
      case Op::Gelu:
        if (wants(n.a))
          for (size_t i = 0; i < go.data.size(); ++i) {
            const double x = static_cast<double>(v(n.a).data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
            const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
            g(n.a).data[i] += go.data[i] * static_cast<S>(cdf + x * pdf);
          }
        break;
      case Op::MaskedSoftmax: {
        if (!wants(n.a)) break;
        const Index L = n.val.rows();
        for (Index t = 0; t < L; ++t) {
          const Index hi = n.i0 ? t + 1 : t;
          if (hi == 0) continue;
          double dot = 0;
          for (Index s = 0; s < hi; ++s)
            dot += static_cast<double>(go.at(t, s)) * static_cast<double>(n.val.at(t, s));
          for (Index s = 0; s < hi; ++s)
            g(n.a).at(t, s) += static_cast<S>(static_cast<double>(n.val.at(t, s)) *
                                              (static_cast<double>(go.at(t, s)) - dot));
        }
        break;
      }
      case Op::CrossEntropy: {
        if (!wants(n.a)) break;
        const Index R = n.saved.rows(), C = n.saved.cols();
        const S gscale = go.data[0] / static_cast<S>(R);
        for (Index r = 0; r < R; ++r) {
          for (Index j = 0; j < C; ++j) g(n.a).at(r, j) += gscale * n.saved.at(r, j);
          g(n.a).at(r, (*n.idx)[r]) -= gscale;
        }
        break;
      }
      case Op::RowGram: {
        const Index L = v(n.a).rows(), ctx = v(n.a).cols(), d = v(n.b).cols();
        for (Index t = 0; t < L; ++t) {
          auto G = n.grad.slab(t, d, d);
          for (Index s = 0; s < ctx; ++s) {
            const auto xs = v(n.b).mat().row(s);
            if (wants(n.a)) g(n.a).at(t, s) += static_cast<S>(xs * G * xs.transpose());
            const S w = v(n.a).at(t, s);
            if (wants(n.b) && w != S(0))
              g(n.b).mat().row(s).noalias() += w * (xs * (G + G.transpose()));
          }
        }
        break;
      }
      case Op::RowOuter: {
        if (!wants(n.a)) break;
        const Index L = v(n.a).rows(), d = v(n.a).cols();
        for (Index t = 0; t < L; ++t) {
          auto G = n.grad.slab(t, d, d);
          g(n.a).mat().row(t).noalias() += v(n.a).mat().row(t) * (G + G.transpose());
        }
        break;
      }
      case Op::MarginLogdet: {
        const Index L = v(n.a).shape[0], d = v(n.a).shape[1];
        const S gs = go.data[0];
        for (Index t = 0; t < L; ++t) {
          const auto Minv = n.saved.slab(t, d, d);  // zero when clamped
          if (wants(n.a))
            g(n.a).slab(t, d, d).noalias() += gs * (Minv.transpose() * v(n.b).mat());
          if (wants(n.b))
            g(n.b).mat().noalias() += gs * (Minv * v(n.a).slab(t, d, d));
        }
        break;
      }
      case Op::LogAbsDet:
        if (wants(n.a) && n.i0) g(n.a).mat().noalias() += go.data[0] * n.saved.mat().transpose();
        break;
      case Op::Sum:
        if (wants(n.a))
          for (auto& x : g(n.a).data) x += go.data[0];
        break;
    }
  }

  std::vector<Node> nodes_;
};

using Tape = TapeT<double>;
using TapeF = TapeT<float>;

}  // namespace attnprior
