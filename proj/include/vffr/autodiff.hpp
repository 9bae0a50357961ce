#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace vffr {
namespace ad {

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
using Mat = MatT<double>;

/// Reverse-mode tape over dense 2D tensors. One tape records one forward
/// pass; backward() fills gradients for every node that requires them.
/// The scalar type is a template parameter: double for gradient checking,
/// float for bulk training where memory bandwidth dominates.
template <class S>
class TapeT {
 public:
  using Mat = MatT<S>;

  enum class Op {
    Leaf, MatMul, AddBias, Add, Relu, GatherRows, GroupMax, ConcatCols, SplitRows, Interp3, Mse,
    Linear, AddRelu
  };

  struct Node {
    Op op = Op::Leaf;
    Mat val;
    Mat grad;
    bool requires_grad = false;
    int a = -1, b = -1, c = -1;  // c: Linear bias
    bool act = false;            // Linear: rectifier after the affine map
    std::vector<int> idx;      // GatherRows: row map; GroupMax: argmax rows
    int group_k = 0;           // GroupMax: members per group
    Eigen::Index split = 0;    // ConcatCols: columns taken from input a; SplitRows: first row
    Mat weights;               // Interp3: n x 3 weights
    std::vector<int> widx;     // Interp3: n x 3 coarse row indices, flattened
    Mat target;                // Mse
  };

  int leaf(const Mat& value, bool requires_grad = false) {
    Node n;
    n.val = value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  /// value(a) * value(b)
  int matmul(int a, int b) {
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    if (nodes_[a].val.cols() != nodes_[b].val.rows()) throw std::invalid_argument("matmul: shape mismatch");
    n.val.noalias() = nodes_[a].val * nodes_[b].val;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  /// value(a) + row-broadcast value(b), b is 1 x C
  int add_bias(int a, int b) {
    Node n;
    n.op = Op::AddBias;
    n.a = a;
    n.b = b;
    if (nodes_[b].val.rows() != 1 || nodes_[a].val.cols() != nodes_[b].val.cols())
      throw std::invalid_argument("add_bias: shape mismatch");
    n.val = nodes_[a].val;
    for (Eigen::Index j = 0; j < n.val.cols(); ++j) n.val.col(j).array() += nodes_[b].val(0, j);
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  int add(int a, int b) {
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    if (nodes_[a].val.rows() != nodes_[b].val.rows() || nodes_[a].val.cols() != nodes_[b].val.cols())
      throw std::invalid_argument("add: shape mismatch");
    n.val = nodes_[a].val + nodes_[b].val;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  int relu(int a) {
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.val = nodes_[a].val.cwiseMax(S(0));
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  int gather_rows(int a, std::vector<int> rows) {
    Node n;
    n.op = Op::GatherRows;
    n.a = a;
    n.val.resize(rows.size(), nodes_[a].val.cols());
    for (size_t i = 0; i < rows.size(); ++i) n.val.row(i) = nodes_[a].val.row(rows[i]);
    n.idx = std::move(rows);
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  /// Max over k consecutive rows per group: (m*k) x C -> m x C.
  int group_max(int a, int k) {
    Node n;
    n.op = Op::GroupMax;
    n.a = a;
    n.group_k = k;
    const auto& x = nodes_[a].val;
    if (x.rows() % k != 0) throw std::invalid_argument("group_max: rows not divisible by k");
    Eigen::Index m = x.rows() / k, c = x.cols();
    n.val.resize(m, c);
    n.idx.resize(m * c);
    for (Eigen::Index g = 0; g < m; ++g)
      for (Eigen::Index j = 0; j < c; ++j) {
        int best = 0;
        S bv = x(g * k, j);
        for (int r = 1; r < k; ++r)
          if (x(g * k + r, j) > bv) {
            bv = x(g * k + r, j);
            best = r;
          }
        n.val(g, j) = bv;
        n.idx[g * c + j] = best;
      }
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  int concat_cols(int a, int b) {
    Node n;
    n.op = Op::ConcatCols;
    n.a = a;
    n.b = b;
    if (nodes_[a].val.rows() != nodes_[b].val.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    n.split = nodes_[a].val.cols();
    n.val.resize(nodes_[a].val.rows(), n.split + nodes_[b].val.cols());
    n.val << nodes_[a].val, nodes_[b].val;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  /// Fused affine map: value(a) * value(w) + row-broadcast value(b), then an
  /// optional rectifier, all in one materialized matrix.
  int linear(int a, int w, int b, bool relu_after) {
    Node n;
    n.op = Op::Linear;
    n.a = a;
    n.b = w;
    n.c = b;
    n.act = relu_after;
    if (nodes_[a].val.cols() != nodes_[w].val.rows()) throw std::invalid_argument("linear: shape mismatch");
    if (nodes_[b].val.rows() != 1 || nodes_[w].val.cols() != nodes_[b].val.cols())
      throw std::invalid_argument("linear: bias shape mismatch");
    n.val.noalias() = nodes_[a].val * nodes_[w].val;
    for (Eigen::Index j = 0; j < n.val.cols(); ++j) n.val.col(j).array() += nodes_[b].val(0, j);
    if (relu_after) n.val = n.val.cwiseMax(S(0));
    n.requires_grad = nodes_[a].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  /// max(value(a) + value(b), 0)
  int add_relu(int a, int b) {
    Node n;
    n.op = Op::AddRelu;
    n.a = a;
    n.b = b;
    if (nodes_[a].val.rows() != nodes_[b].val.rows() || nodes_[a].val.cols() != nodes_[b].val.cols())
      throw std::invalid_argument("add_relu: shape mismatch");
    n.val = (nodes_[a].val + nodes_[b].val).cwiseMax(S(0));
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  /// Rows [r0, r0 + m) of value(a).
  int split_rows(int a, Eigen::Index r0, Eigen::Index m) {
    Node n;
    n.op = Op::SplitRows;
    n.a = a;
    if (r0 < 0 || m < 1 || r0 + m > nodes_[a].val.rows())
      throw std::invalid_argument("split_rows: bad row range");
    n.split = r0;
    n.val = nodes_[a].val.middleRows(r0, m);
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  /// Fixed-weight interpolation: out.row(i) = sum_j weights(i,j) * a.row(widx[i*3+j]).
  int interp3(int a, const Mat& weights, std::vector<int> widx) {
    Node n;
    n.op = Op::Interp3;
    n.a = a;
    n.weights = weights;
    n.widx = std::move(widx);
    n.val.setZero(weights.rows(), nodes_[a].val.cols());
    for (Eigen::Index i = 0; i < weights.rows(); ++i)
      for (int j = 0; j < weights.cols(); ++j)
        n.val.row(i) += weights(i, j) * nodes_[a].val.row(n.widx[i * weights.cols() + j]);
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  /// Mean squared error against a constant target; result is 1 x 1.
  int mse(int a, const Mat& target) {
    Node n;
    n.op = Op::Mse;
    n.a = a;
    if (nodes_[a].val.rows() != target.rows() || nodes_[a].val.cols() != target.cols())
      throw std::invalid_argument("mse: shape mismatch");
    n.target = target;
    n.val.resize(1, 1);
    n.val(0, 0) = (nodes_[a].val - target).squaredNorm() / target.size();
    n.requires_grad = nodes_[a].requires_grad;
    return push(std::move(n));
  }

  const Mat& value(int id) const { return nodes_[id].val; }
  const Mat& gradient(int id) const { return nodes_[id].grad; }

  void backward(int loss_id) {
    if (nodes_[loss_id].val.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    // gradients materialize lazily: the first dense contribution assigns,
    // later ones accumulate; scatter ops zero-fill their input first
    std::vector<char> seen(nodes_.size(), 0);
    auto dense = [&](int id, const auto& expr) {
      Node& c = nodes_[id];
      if (seen[id]) {
        c.grad.noalias() += expr;
      } else {
        c.grad.noalias() = expr;
        seen[id] = 1;
      }
    };
    auto zeroed = [&](int id) -> Mat& {
      Node& c = nodes_[id];
      if (!seen[id]) {
        c.grad.setZero(c.val.rows(), c.val.cols());
        seen[id] = 1;
      }
      return c.grad;
    };
    nodes_[loss_id].grad.setOnes(1, 1);
    seen[loss_id] = 1;
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !seen[id]) continue;
      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::MatMul:
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad * nodes_[n.b].val.transpose());
          if (nodes_[n.b].requires_grad) dense(n.b, nodes_[n.a].val.transpose() * n.grad);
          break;
        case Op::AddBias:
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad);
          if (nodes_[n.b].requires_grad) zeroed(n.b).row(0) += n.grad.colwise().sum();
          break;
        case Op::Add:
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad);
          if (nodes_[n.b].requires_grad) dense(n.b, n.grad);
          break;
        case Op::Relu:
          if (nodes_[n.a].requires_grad) {
            Node& c = nodes_[n.a];
            const Eigen::Index sz = n.grad.size();
            const S* v = n.val.data();
            const S* og = n.grad.data();
            if (!seen[n.a]) {
              c.grad.resize(c.val.rows(), c.val.cols());
              seen[n.a] = 1;
              S* g = c.grad.data();
              for (Eigen::Index t = 0; t < sz; ++t) g[t] = v[t] > S(0) ? og[t] : S(0);
            } else {
              S* g = c.grad.data();
              for (Eigen::Index t = 0; t < sz; ++t) g[t] += v[t] > S(0) ? og[t] : S(0);
            }
          }
          break;
        case Op::GatherRows:
          if (nodes_[n.a].requires_grad) {
            Mat& g = zeroed(n.a);
            for (size_t i = 0; i < n.idx.size(); ++i) g.row(n.idx[i]) += n.grad.row(i);
          }
          break;
        case Op::GroupMax:
          if (nodes_[n.a].requires_grad) {
            Mat& g = zeroed(n.a);
            Eigen::Index m = n.val.rows(), c = n.val.cols();
            for (Eigen::Index gi = 0; gi < m; ++gi)
              for (Eigen::Index j = 0; j < c; ++j)
                g(gi * n.group_k + n.idx[gi * c + j], j) += n.grad(gi, j);
          }
          break;
        case Op::ConcatCols:
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad.leftCols(n.split));
          if (nodes_[n.b].requires_grad) dense(n.b, n.grad.rightCols(n.grad.cols() - n.split));
          break;
        case Op::SplitRows:
          if (nodes_[n.a].requires_grad) zeroed(n.a).middleRows(n.split, n.grad.rows()) += n.grad;
          break;
        case Op::Linear: {
          // the rectifier mask is applied to this node's own gradient in
          // place; nothing downstream reads it again
          if (n.act) relu_mask(n.grad, n.val);
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad * nodes_[n.b].val.transpose());
          if (nodes_[n.b].requires_grad) dense(n.b, nodes_[n.a].val.transpose() * n.grad);
          if (nodes_[n.c].requires_grad) zeroed(n.c).row(0) += n.grad.colwise().sum();
          break;
        }
        case Op::AddRelu: {
          relu_mask(n.grad, n.val);
          if (nodes_[n.a].requires_grad) dense(n.a, n.grad);
          if (nodes_[n.b].requires_grad) dense(n.b, n.grad);
          break;
        }
        case Op::Interp3:
          if (nodes_[n.a].requires_grad) {
            Mat& g = zeroed(n.a);
            for (Eigen::Index i = 0; i < n.weights.rows(); ++i)
              for (int j = 0; j < n.weights.cols(); ++j)
                g.row(n.widx[i * n.weights.cols() + j]) += n.weights(i, j) * n.grad.row(i);
          }
          break;
        case Op::Mse:
          if (nodes_[n.a].requires_grad)
            dense(n.a, (n.grad(0, 0) * S(2) / S(n.target.size())) * (nodes_[n.a].val - n.target));
          break;
      }
    }
    // parameters the loss never touched still expose a zero gradient
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].requires_grad && !seen[i])
        nodes_[i].grad.setZero(nodes_[i].val.rows(), nodes_[i].val.cols());
  }

  size_t size() const { return nodes_.size(); }

 private:
  // zero gradient entries where the rectifier output was clamped
  static void relu_mask(Mat& grad, const Mat& out) {
    const S* v = out.data();
    S* g = grad.data();
    const Eigen::Index sz = grad.size();
    for (Eigen::Index t = 0; t < sz; ++t)
      if (v[t] <= S(0)) g[t] = S(0);
  }

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  std::vector<Node> nodes_;
};

using Tape = TapeT<double>;

/// Adam with bias correction; moments are stored per parameter matrix.
template <class S>
struct AdamStateT {
  std::vector<MatT<S>> m, v;
  long step = 0;
};
using AdamState = AdamStateT<double>;

template <class S>
inline void adam_step(std::vector<MatT<S>*> params, const std::vector<MatT<S>>& grads,
                      AdamStateT<S>& state, double lr = 1e-3, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam: param/grad count mismatch");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(MatT<S>::Zero(p->rows(), p->cols()));
      state.v.emplace_back(MatT<S>::Zero(p->rows(), p->cols()));
    }
  }
  state.step++;
  const S b1 = S(beta1), b2 = S(beta2);
  const S c1 = S(1.0 - std::pow(beta1, static_cast<double>(state.step)));
  const S c2 = S(1.0 - std::pow(beta2, static_cast<double>(state.step)));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (S(1) - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (S(1) - b2) * grads[i].cwiseProduct(grads[i]);
    MatT<S> mhat = state.m[i] / c1;
    MatT<S> vhat = state.v[i] / c2;
    params[i]->array() -= S(lr) * mhat.array() / (vhat.array().sqrt() + S(eps));
  }
}

}  // namespace ad
}  // namespace vffr
