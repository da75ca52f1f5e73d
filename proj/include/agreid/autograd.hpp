#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Operations are coarse (linear layers, layer norm, fused
// multi-head attention, fused losses) so the tape stays short.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace agreid::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

namespace detail {
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

/// While alive, newly created nodes do not record backward closures.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() const { return node_->value; }
  /// Accumulated gradient; zero-filled if nothing flowed here.
  const Matrix& grad() const { return node_->grad_buffer(); }
  void zero_grad() const {
    if (node_->grad.size() != 0) node_->grad.setZero();
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

inline Var constant(Matrix value) { return leaf(std::move(value), false); }

inline Var scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

namespace detail {

template <class Backward>
Var make_result(Matrix value, std::vector<Var> inputs, Backward&& backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& in : inputs) n->inputs.push_back(in.shared());
      n->backward = std::forward<Backward>(backward);
    }
  }
  return Var(std::move(n));
}

inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + what);
}

}  // namespace detail

/// Runs reverse accumulation from a 1x1 root. Leaf gradients accumulate.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives

inline Var add(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Node* na = a.node();
  Node* nb = b.node();
  return detail::make_result(a.value() + b.value(), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) na->grad_buffer() += self.grad;
    if (nb->requires_grad) nb->grad_buffer() += self.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Node* na = a.node();
  Node* nb = b.node();
  return detail::make_result(a.value() - b.value(), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) na->grad_buffer() += self.grad;
    if (nb->requires_grad) nb->grad_buffer() -= self.grad;
  });
}

inline Var scale(const Var& a, double s) {
  Node* na = a.node();
  return detail::make_result(a.value() * s, {a}, [na, s](Node& self) {
    na->grad_buffer() += s * self.grad;
  });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check(a.cols() == b.rows(), "matmul");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value() * b.value();
  return detail::make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) na->grad_buffer().noalias() += self.grad * nb->value.transpose();
    if (nb->requires_grad) nb->grad_buffer().noalias() += na->value.transpose() * self.grad;
  });
}

/// x [n, in] * w [in, out] + bias [1, out] broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  detail::check(x.cols() == w.rows() && bias.rows() == 1 && bias.cols() == w.cols(), "linear");
  Node* nx = x.node();
  Node* nw = w.node();
  Node* nb = bias.node();
  Matrix out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  return detail::make_result(std::move(out), {x, w, bias}, [nx, nw, nb](Node& self) {
    if (nx->requires_grad) nx->grad_buffer().noalias() += self.grad * nw->value.transpose();
    if (nw->requires_grad) nw->grad_buffer().noalias() += nx->value.transpose() * self.grad;
    if (nb->requires_grad) nb->grad_buffer() += self.grad.colwise().sum();
  });
}

inline Var linear(const Var& x, const Var& w) { return matmul(x, w); }

/// Adds `tile` [r, c] to every consecutive block of r rows of x [k*r, c].
inline Var add_tiled(const Var& x, const Var& tile) {
  const Index r = tile.rows();
  detail::check(r > 0 && x.rows() % r == 0 && x.cols() == tile.cols(), "add_tiled");
  Matrix out = x.value();
  const Index blocks = x.rows() / r;
  for (Index k = 0; k < blocks; ++k) out.middleRows(k * r, r) += tile.value();
  Node* nx = x.node();
  Node* nt = tile.node();
  return detail::make_result(std::move(out), {x, tile}, [nx, nt, r, blocks](Node& self) {
    if (nx->requires_grad) nx->grad_buffer() += self.grad;
    if (nt->requires_grad) {
      Matrix& g = nt->grad_buffer();
      for (Index k = 0; k < blocks; ++k) g += self.grad.middleRows(k * r, r);
    }
  });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  const Matrix& v = x.value();
  Matrix out = v.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z * M_SQRT1_2)); });
  Node* nx = x.node();
  return detail::make_result(std::move(out), {x}, [nx](Node& self) {
    const Matrix d = nx->value.unaryExpr([](double z) {
      const double cdf = 0.5 * (1.0 + std::erf(z * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * z * z) * 0.3989422804014327;
      return cdf + z * pdf;
    });
    nx->grad_buffer().array() += self.grad.array() * d.array();
  });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Index n = x.rows();
  const Index c = x.cols();
  detail::check(gain.cols() == c && bias.cols() == c, "layer_norm");
  auto xhat = std::make_shared<Matrix>(n, c);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  const Matrix& v = x.value();
  for (Index i = 0; i < n; ++i) {
    const double mean = v.row(i).mean();
    const double var = (v.row(i).array() - mean).square().mean();
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (v.row(i).array() - mean) * (*inv_std)(i);
  }
  Matrix out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  Node* nx = x.node();
  Node* ng = gain.node();
  Node* nb = bias.node();
  return detail::make_result(std::move(out), {x, gain, bias}, [=](Node& self) {
    const Matrix& dy = self.grad;
    if (ng->requires_grad) ng->grad_buffer() += (dy.array() * xhat->array()).colwise().sum().matrix();
    if (nb->requires_grad) nb->grad_buffer() += dy.colwise().sum();
    if (nx->requires_grad) {
      Matrix& dx = nx->grad_buffer();
      const Eigen::Array<double, 1, Eigen::Dynamic> g = ng->value.row(0).array();
      for (Index i = 0; i < n; ++i) {
        const Eigen::Array<double, 1, Eigen::Dynamic> dxh = dy.row(i).array() * g;
        const double m1 = dxh.mean();
        const double m2 = (dxh * xhat->row(i).array()).mean();
        dx.row(i).array() += (*inv_std)(i) * (dxh - m1 - xhat->row(i).array() * m2);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural primitives

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Index rows = 0;
  const Index c = parts.front().cols();
  for (const auto& p : parts) {
    detail::check(p.cols() == c, "concat_rows");
    rows += p.rows();
  }
  Matrix out(rows, c);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Node*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(std::move(out), parts, [nodes](Node& self) {
    Index off = 0;
    for (Node* n : nodes) {
      const Index r = n->value.rows();
      if (n->requires_grad) n->grad_buffer() += self.grad.middleRows(off, r);
      off += r;
    }
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows(), "concat_cols");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  Node* na = a.node();
  Node* nb = b.node();
  return detail::make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) na->grad_buffer() += self.grad.leftCols(na->value.cols());
    if (nb->requires_grad) nb->grad_buffer() += self.grad.rightCols(nb->value.cols());
  });
}

/// out.row(i) = x.row(index[i]); repeated indices accumulate on the way back.
inline Var gather_rows(const Var& x, std::vector<Index> index) {
  const Index n = static_cast<Index>(index.size());
  Matrix out(n, x.cols());
  for (Index i = 0; i < n; ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw std::out_of_range("gather_rows: index");
    out.row(i) = x.value().row(index[i]);
  }
  Node* nx = x.node();
  return detail::make_result(std::move(out), {x}, [nx, idx = std::move(index)](Node& self) {
    Matrix& g = nx->grad_buffer();
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

inline Var slice_rows(const Var& x, Index start, Index count) {
  std::vector<Index> idx(static_cast<size_t>(count));
  for (Index i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
  return gather_rows(x, std::move(idx));
}

/// Mean over consecutive groups of `group` rows: [k*group, c] -> [k, c].
inline Var group_mean_rows(const Var& x, Index group) {
  detail::check(group > 0 && x.rows() % group == 0, "group_mean_rows");
  const Index k = x.rows() / group;
  Matrix out(k, x.cols());
  for (Index i = 0; i < k; ++i) out.row(i) = x.value().middleRows(i * group, group).colwise().mean();
  Node* nx = x.node();
  return detail::make_result(std::move(out), {x}, [nx, group, k](Node& self) {
    Matrix& g = nx->grad_buffer();
    const double w = 1.0 / static_cast<double>(group);
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < group; ++j) g.row(i * group + j) += w * self.grad.row(i);
  });
}

inline Var sum(const Var& x) {
  Node* nx = x.node();
  return detail::make_result(Matrix::Constant(1, 1, x.value().sum()), {x}, [nx](Node& self) {
    nx->grad_buffer().array() += self.grad(0, 0);
  });
}

// ---------------------------------------------------------------------------
// Fused multi-head attention

struct AttentionShape {
  Index groups = 1;  // independent sequences stacked along rows
  Index heads = 1;
  bool causal = false;
  double scale = 1.0;
};

/// q [groups*Sq, C], k/v [groups*Sk, C] -> [groups*Sq, C]. Per group and
/// head, softmax(q k^T * scale) v. If `record` is non-null, the probability
/// matrices are appended there (group-major, then head).
inline Var attention(const Var& q, const Var& k, const Var& v, AttentionShape shape,
                     std::vector<Matrix>* record = nullptr) {
  const Index g = shape.groups;
  const Index h = shape.heads;
  const Index c = q.cols();
  detail::check(g > 0 && h > 0 && c % h == 0, "attention heads");
  detail::check(q.rows() % g == 0 && k.rows() % g == 0 && k.rows() == v.rows(), "attention rows");
  detail::check(k.cols() == c && v.cols() == c, "attention cols");
  const Index sq = q.rows() / g;
  const Index sk = k.rows() / g;
  if (shape.causal) detail::check(sq == sk, "causal attention");
  const Index d = c / h;
  const double scl = shape.scale;

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<size_t>(g * h));
  Matrix out(q.rows(), c);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  for (Index gi = 0; gi < g; ++gi) {
    for (Index hi = 0; hi < h; ++hi) {
      Matrix s = (Q.block(gi * sq, hi * d, sq, d) * K.block(gi * sk, hi * d, sk, d).transpose()) * scl;
      for (Index i = 0; i < sq; ++i) {
        const Index limit = shape.causal ? i + 1 : sk;
        double mx = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < limit; ++j) mx = std::max(mx, s(i, j));
        double total = 0.0;
        for (Index j = 0; j < sk; ++j) {
          s(i, j) = j < limit ? std::exp(s(i, j) - mx) : 0.0;
          total += s(i, j);
        }
        s.row(i) /= total;
      }
      out.block(gi * sq, hi * d, sq, d).noalias() = s * V.block(gi * sk, hi * d, sk, d);
      if (record) record->push_back(s);
      (*probs)[static_cast<size_t>(gi * h + hi)] = std::move(s);
    }
  }
  Node* nq = q.node();
  Node* nk = k.node();
  Node* nv = v.node();
  return detail::make_result(std::move(out), {q, k, v}, [=](Node& self) {
    const Matrix& dout = self.grad;
    for (Index gi = 0; gi < g; ++gi) {
      for (Index hi = 0; hi < h; ++hi) {
        const Matrix& p = (*probs)[static_cast<size_t>(gi * h + hi)];
        const auto dO = dout.block(gi * sq, hi * d, sq, d);
        const auto Vh = nv->value.block(gi * sk, hi * d, sk, d);
        if (nv->requires_grad) nv->grad_buffer().block(gi * sk, hi * d, sk, d).noalias() += p.transpose() * dO;
        if (!nq->requires_grad && !nk->requires_grad) continue;
        Matrix dp = dO * Vh.transpose();
        const Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = p.array() * (dp.colwise() - rs).array();
        ds *= scl;
        if (nq->requires_grad)
          nq->grad_buffer().block(gi * sq, hi * d, sq, d).noalias() += ds * nk->value.block(gi * sk, hi * d, sk, d);
        if (nk->requires_grad)
          nk->grad_buffer().block(gi * sk, hi * d, sk, d).noalias() += ds.transpose() * nq->value.block(gi * sq, hi * d, sq, d);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Fused losses

/// Batch-mean cross-entropy against a label-smoothed target: 1-eps on the true
/// class, eps/(n-1) on every other class.
inline Var smoothed_cross_entropy(const Var& logits, const std::vector<int>& labels, double eps) {
  const Index b = logits.rows();
  const Index n = logits.cols();
  detail::check(static_cast<Index>(labels.size()) == b && b > 0, "smoothed_cross_entropy");
  for (int y : labels)
    if (y < 0 || y >= n) throw std::out_of_range("label out of range");
  const double off = n > 1 ? eps / static_cast<double>(n - 1) : 0.0;
  const double on = n > 1 ? 1.0 - eps : 1.0;
  auto target = std::make_shared<Matrix>(Matrix::Constant(b, n, off));
  for (Index i = 0; i < b; ++i) (*target)(i, labels[static_cast<size_t>(i)]) = on;

  auto soft = std::make_shared<Matrix>(b, n);
  double loss = 0.0;
  const Matrix& z = logits.value();
  for (Index i = 0; i < b; ++i) {
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    const auto logp = z.row(i).array() - lse;
    soft->row(i) = logp.exp().matrix();
    loss -= (target->row(i).array() * logp).sum();
  }
  loss /= static_cast<double>(b);
  Node* nz = logits.node();
  return detail::make_result(Matrix::Constant(1, 1, loss), {logits}, [=](Node& self) {
    nz->grad_buffer() += (self.grad(0, 0) / static_cast<double>(b)) * (*soft - *target);
  });
}

class DegenerateBatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Batch-hard triplet loss on Euclidean distances: for each anchor the
/// farthest positive and nearest negative; mean of max(0, dp - dn + margin).
inline Var batch_hard_triplet(const Var& features, const std::vector<int>& labels, double margin) {
  const Index b = features.rows();
  detail::check(static_cast<Index>(labels.size()) == b && b > 0, "batch_hard_triplet");
  const Matrix& x = features.value();
  Matrix dist(b, b);
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < b; ++j) dist(i, j) = (x.row(i) - x.row(j)).norm();

  struct Active {
    Index anchor, pos, neg;
  };
  auto active = std::make_shared<std::vector<Active>>();
  double loss = 0.0;
  for (Index a = 0; a < b; ++a) {
    Index pos = -1, neg = -1;
    for (Index j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0 || neg < 0)
      throw DegenerateBatch("triplet anchor " + std::to_string(a) + " lacks a positive or a negative");
    const double hinge = dist(a, pos) - dist(a, neg) + margin;
    if (hinge > 0.0) {
      loss += hinge;
      active->push_back({a, pos, neg});
    }
  }
  loss /= static_cast<double>(b);
  Node* nf = features.node();
  return detail::make_result(Matrix::Constant(1, 1, loss), {features}, [=](Node& self) {
    Matrix& g = nf->grad_buffer();
    const double w = self.grad(0, 0) / static_cast<double>(b);
    const Matrix& xv = nf->value;
    for (const auto& t : *active) {
      const Eigen::RowVectorXd dap = xv.row(t.anchor) - xv.row(t.pos);
      const Eigen::RowVectorXd dan = xv.row(t.anchor) - xv.row(t.neg);
      const double np = dap.norm();
      const double nn = dan.norm();
      if (np > 0.0) {
        g.row(t.anchor) += w * dap / np;
        g.row(t.pos) -= w * dap / np;
      }
      if (nn > 0.0) {
        g.row(t.anchor) -= w * dan / nn;
        g.row(t.neg) += w * dan / nn;
      }
    }
  });
}

}  // namespace agreid::ad
