#pragma once

// Reverse-mode autodiff over dense row-major tensors. Small tape engine:
// each op eagerly computes its value and records a closure that scatters
// gradients back to its parents. Heavy lifting (GEMM) goes through Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "ehm/common.hpp"

namespace ehm {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

inline int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

template <class S>
struct TensorNode {
  std::vector<int> shape;
  std::vector<S> val;
  std::vector<S> grad;  // empty until touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.assign(size_t(shape_size(n->shape)), S(0));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from(std::vector<int> shape, std::vector<S> data,
                     bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    require(int64_t(data.size()) == shape_size(n->shape),
            "tensor data does not match shape");
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[size_t(i)]; }
  int ndim() const { return int(n_->shape.size()); }
  int64_t size() const { return int64_t(n_->val.size()); }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<S>& val() { return n_->val; }
  const std::vector<S>& val() const { return n_->val; }
  S* data() { return n_->val.data(); }
  const S* data() const { return n_->val.data(); }
  S item() const {
    require(size() == 1, "item() on non-scalar tensor");
    return n_->val[0];
  }

  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<S>& grad_or_empty() const { return n_->grad; }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Reverse pass from this scalar. Topological order comes from a DFS
  // postorder over parents, walked in reverse.
  void backward() {
    require(size() == 1, "backward() requires a scalar root");
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop();
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

template <class S>
std::shared_ptr<TensorNode<S>> make_node(std::vector<int> shape,
                                         std::initializer_list<Tensor<S>> parents) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->val.resize(size_t(shape_size(n->shape)));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg && grad_mode();
  if (n->requires_grad)
    for (const auto& p : parents) n->parents.push_back(p.node());
  return n;
}

}  // namespace detail

// ---- elementwise ----

template <class S, class FwdFn, class BwdFn>
Tensor<S> unary_op(const Tensor<S>& x, FwdFn fwd, BwdFn dydx) {
  auto n = detail::make_node<S>(x.shape(), {x});
  const auto& xv = x.val();
  for (size_t i = 0; i < xv.size(); ++i) n->val[i] = fwd(xv[i]);
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out, dydx]() {
      xn->ensure_grad();
      for (size_t i = 0; i < out->val.size(); ++i)
        xn->grad[i] += out->grad[i] * dydx(xn->val[i], out->val[i]);
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return v > S(0) ? v : S(0); },
                  [](S xi, S) { return xi > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
                  [](S, S yi) { return yi * (S(1) - yi); });
}

template <class S>
Tensor<S> tanh_t(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::tanh(v); },
                  [](S, S yi) { return S(1) - yi * yi; });
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::exp(v); },
                  [](S, S yi) { return yi; });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::log(v); },
                  [](S xi, S) { return S(1) / xi; });
}

template <class S>
Tensor<S> pow_scalar(const Tensor<S>& x, S p) {
  return unary_op(x, [p](S v) { return std::pow(v, p); },
                  [p](S xi, S) { return p * std::pow(xi, p - S(1)); });
}

// Gradient passes only through the un-clamped interior.
template <class S>
Tensor<S> clamp_const(const Tensor<S>& x, S lo, S hi) {
  return unary_op(x, [lo, hi](S v) { return std::min(hi, std::max(lo, v)); },
                  [lo, hi](S xi, S) { return (xi > lo && xi < hi) ? S(1) : S(0); });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S a) {
  return unary_op(x, [a](S v) { return a * v; }, [a](S, S) { return a; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S a) {
  return unary_op(x, [a](S v) { return v + a; }, [](S, S) { return S(1); });
}

template <class S, class CombineFn>
Tensor<S> binary_same_shape(const Tensor<S>& a, const Tensor<S>& b, CombineFn f,
                            S da, S db, const char* name) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch");
  auto n = detail::make_node<S>(a.shape(), {a, b});
  for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = f(a.val()[i], b.val()[i]);
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto out = n.get();
    n->backprop = [an, bn, out, da, db]() {
      an->ensure_grad();
      bn->ensure_grad();
      for (size_t i = 0; i < out->val.size(); ++i) {
        an->grad[i] += da * out->grad[i];
        bn->grad[i] += db * out->grad[i];
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_same_shape(a, b, [](S x, S y) { return x + y; }, S(1), S(1), "add");
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_same_shape(a, b, [](S x, S y) { return x - y; }, S(1), S(-1), "sub");
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  auto n = detail::make_node<S>(a.shape(), {a, b});
  for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.val()[i] * b.val()[i];
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto out = n.get();
    n->backprop = [an, bn, out]() {
      an->ensure_grad();
      bn->ensure_grad();
      for (size_t i = 0; i < out->val.size(); ++i) {
        an->grad[i] += bn->val[i] * out->grad[i];
        bn->grad[i] += an->val[i] * out->grad[i];
      }
    };
  }
  return Tensor<S>(n);
}

// Value copy with no graph edge.
template <class S>
Tensor<S> detach(const Tensor<S>& x) {
  return Tensor<S>::from(x.shape(), x.val());
}

// ---- 2-d linear algebra ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes");
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto n = detail::make_node<S>({m, nn}, {a, b});
  detail::CMapMat<S> A(a.data(), m, k), B(b.data(), k, nn);
  detail::MapMat<S>(n->val.data(), m, nn).noalias() = A * B;
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    auto out = n.get();
    n->backprop = [an, bn, out, m, k, nn]() {
      an->ensure_grad();
      bn->ensure_grad();
      detail::CMapMat<S> G(out->grad.data(), m, nn);
      detail::CMapMat<S> A(an->val.data(), m, k), B(bn->val.data(), k, nn);
      detail::MapMat<S>(an->grad.data(), m, k).noalias() += G * B.transpose();
      detail::MapMat<S>(bn->grad.data(), k, nn).noalias() += A.transpose() * G;
    };
  }
  return Tensor<S>(n);
}

// x: [N,F] plus bias [F] broadcast over rows
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0),
          "add_bias: shape mismatch");
  const int rows = x.dim(0), cols = x.dim(1);
  auto n = detail::make_node<S>(x.shape(), {x, b});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      n->val[size_t(r) * cols + c] = x.val()[size_t(r) * cols + c] + b.val()[size_t(c)];
  if (n->requires_grad) {
    auto xn = x.node(), bn = b.node();
    auto out = n.get();
    n->backprop = [xn, bn, out, rows, cols]() {
      xn->ensure_grad();
      bn->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          S g = out->grad[size_t(r) * cols + c];
          xn->grad[size_t(r) * cols + c] += g;
          bn->grad[size_t(c)] += g;
        }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  require(x.ndim() == 2, "transpose2d: rank != 2");
  const int r = x.dim(0), c = x.dim(1);
  auto n = detail::make_node<S>({c, r}, {x});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->val[size_t(j) * r + i] = x.val()[size_t(i) * c + j];
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out, r, c]() {
      xn->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          xn->grad[size_t(i) * c + j] += out->grad[size_t(j) * r + i];
    };
  }
  return Tensor<S>(n);
}

// Same data, new shape (copies; tensors are small enough here).
template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int> shape) {
  require(shape_size(shape) == x.size(), "reshape: element count mismatch");
  auto n = detail::make_node<S>(std::move(shape), {x});
  n->val = x.val();
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out]() {
      xn->ensure_grad();
      for (size_t i = 0; i < out->val.size(); ++i) xn->grad[i] += out->grad[i];
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  const int rows = parts[0].dim(0);
  int cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.ndim() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    cols += p.dim(1);
    rg = rg || p.requires_grad();
  }
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = {rows, cols};
  n->val.resize(size_t(rows) * cols);
  n->requires_grad = rg && grad_mode();
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    for (int r = 0; r < rows; ++r)
      std::copy_n(p.data() + size_t(r) * pc, pc,
                  n->val.data() + size_t(r) * cols + off);
    off += pc;
  }
  if (n->requires_grad) {
    std::vector<std::shared_ptr<TensorNode<S>>> ps;
    for (const auto& p : parts) ps.push_back(p.node());
    n->parents = ps;
    auto out = n.get();
    n->backprop = [ps, out, rows, cols]() {
      int off = 0;
      for (auto& pn : ps) {
        const int pc = pn->shape[1];
        pn->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < pc; ++c)
            pn->grad[size_t(r) * pc + c] += out->grad[size_t(r) * cols + off + c];
        off += pc;
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  const int cols = parts[0].dim(1);
  int rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.ndim() == 2 && p.dim(1) == cols, "concat_rows: column mismatch");
    rows += p.dim(0);
    rg = rg || p.requires_grad();
  }
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = {rows, cols};
  n->val.resize(size_t(rows) * cols);
  n->requires_grad = rg && grad_mode();
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.val().begin(), p.val().end(), n->val.begin() + off);
    off += p.val().size();
  }
  if (n->requires_grad) {
    std::vector<std::shared_ptr<TensorNode<S>>> ps;
    for (const auto& p : parts) ps.push_back(p.node());
    n->parents = ps;
    auto out = n.get();
    n->backprop = [ps, out]() {
      size_t off = 0;
      for (auto& pn : ps) {
        pn->ensure_grad();
        for (size_t i = 0; i < pn->val.size(); ++i) pn->grad[i] += out->grad[off + i];
        off += pn->val.size();
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, int row0, int row1) {
  require(x.ndim() == 2 && row0 >= 0 && row1 <= x.dim(0) && row0 < row1,
          "slice_rows: bad range");
  const int cols = x.dim(1);
  auto n = detail::make_node<S>({row1 - row0, cols}, {x});
  std::copy_n(x.data() + size_t(row0) * cols, size_t(row1 - row0) * cols,
              n->val.data());
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out, row0, cols]() {
      xn->ensure_grad();
      for (size_t i = 0; i < out->val.size(); ++i)
        xn->grad[size_t(row0) * cols + i] += out->grad[i];
    };
  }
  return Tensor<S>(n);
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  auto n = detail::make_node<S>({1}, {x});
  S acc = S(0);
  for (S v : x.val()) acc += v;
  n->val[0] = acc;
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out]() {
      xn->ensure_grad();
      const S g = out->grad[0];
      for (size_t i = 0; i < xn->val.size(); ++i) xn->grad[i] += g;
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / S(x.size()));
}

// ---- row-wise softmax / normalization ----

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  require(x.ndim() == 2, "softmax_rows: rank != 2");
  const int rows = x.dim(0), cols = x.dim(1);
  auto n = detail::make_node<S>(x.shape(), {x});
  for (int r = 0; r < rows; ++r) {
    const S* xr = x.data() + size_t(r) * cols;
    S* yr = n->val.data() + size_t(r) * cols;
    S mx = xr[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    S sum = S(0);
    for (int c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (int c = 0; c < cols; ++c) yr[c] /= sum;
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto out = n.get();
    n->backprop = [xn, out, rows, cols]() {
      xn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const S* y = out->val.data() + size_t(r) * cols;
        const S* gy = out->grad.data() + size_t(r) * cols;
        S dot = S(0);
        for (int c = 0; c < cols; ++c) dot += y[c] * gy[c];
        S* gx = xn->grad.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> layer_norm_rows(const Tensor<S>& x, const Tensor<S>& gamma,
                          const Tensor<S>& beta, S eps = S(1e-5)) {
  require(x.ndim() == 2 && gamma.dim(0) == x.dim(1) && beta.dim(0) == x.dim(1),
          "layer_norm_rows: shape mismatch");
  const int rows = x.dim(0), cols = x.dim(1);
  auto n = detail::make_node<S>(x.shape(), {x, gamma, beta});
  std::vector<S> inv_std(size_t(rows)), mean(size_t(rows));
  for (int r = 0; r < rows; ++r) {
    const S* xr = x.data() + size_t(r) * cols;
    S m = S(0);
    for (int c = 0; c < cols; ++c) m += xr[c];
    m /= S(cols);
    S v = S(0);
    for (int c = 0; c < cols; ++c) v += (xr[c] - m) * (xr[c] - m);
    v /= S(cols);
    mean[size_t(r)] = m;
    inv_std[size_t(r)] = S(1) / std::sqrt(v + eps);
    S* yr = n->val.data() + size_t(r) * cols;
    for (int c = 0; c < cols; ++c)
      yr[c] = gamma.val()[size_t(c)] * (xr[c] - m) * inv_std[size_t(r)] +
              beta.val()[size_t(c)];
  }
  if (n->requires_grad) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto out = n.get();
    n->backprop = [xn, gn, bn, out, rows, cols, mean, inv_std]() {
      xn->ensure_grad();
      gn->ensure_grad();
      bn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const S* xr = xn->val.data() + size_t(r) * cols;
        const S* gy = out->grad.data() + size_t(r) * cols;
        const S is = inv_std[size_t(r)], m = mean[size_t(r)];
        S sum_gxh = S(0), sum_gxh_xh = S(0);
        for (int c = 0; c < cols; ++c) {
          const S xh = (xr[c] - m) * is;
          const S gxh = gy[c] * gn->val[size_t(c)];
          sum_gxh += gxh;
          sum_gxh_xh += gxh * xh;
          gn->grad[size_t(c)] += gy[c] * xh;
          bn->grad[size_t(c)] += gy[c];
        }
        S* gx = xn->grad.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) {
          const S xh = (xr[c] - m) * is;
          const S gxh = gy[c] * gn->val[size_t(c)];
          gx[c] += is * (gxh - (sum_gxh + xh * sum_gxh_xh) / S(cols));
        }
      }
    };
  }
  return Tensor<S>(n);
}

// ---- batch norm (per feature over rows) ----

template <class S>
struct RunningStats {
  std::vector<S> mean;
  std::vector<S> var;  // running variance (unbiased when batch > 1)
  void init(int features) {
    mean.assign(size_t(features), S(0));
    var.assign(size_t(features), S(1));
  }
};

template <class S>
Tensor<S> batch_norm_rows(const Tensor<S>& x, const Tensor<S>& gamma,
                          const Tensor<S>& beta, RunningStats<S>& rs,
                          bool training, S momentum = S(0.1), S eps = S(1e-5)) {
  require(x.ndim() == 2, "batch_norm_rows: rank != 2");
  const int rows = x.dim(0), cols = x.dim(1);
  require(int(rs.mean.size()) == cols, "batch_norm_rows: stats size mismatch");
  auto n = detail::make_node<S>(x.shape(), {x, gamma, beta});
  std::vector<S> mu(size_t(cols)), inv_std(size_t(cols));
  if (training) {
    for (int c = 0; c < cols; ++c) {
      S m = S(0);
      for (int r = 0; r < rows; ++r) m += x.val()[size_t(r) * cols + c];
      m /= S(rows);
      S v = S(0);
      for (int r = 0; r < rows; ++r) {
        const S d = x.val()[size_t(r) * cols + c] - m;
        v += d * d;
      }
      const S biased = v / S(rows);
      const S unbiased = rows > 1 ? v / S(rows - 1) : biased;
      mu[size_t(c)] = m;
      inv_std[size_t(c)] = S(1) / std::sqrt(biased + eps);
      rs.mean[size_t(c)] = (S(1) - momentum) * rs.mean[size_t(c)] + momentum * m;
      rs.var[size_t(c)] = (S(1) - momentum) * rs.var[size_t(c)] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < cols; ++c) {
      mu[size_t(c)] = rs.mean[size_t(c)];
      inv_std[size_t(c)] = S(1) / std::sqrt(rs.var[size_t(c)] + eps);
    }
  }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      n->val[size_t(r) * cols + c] =
          gamma.val()[size_t(c)] * (x.val()[size_t(r) * cols + c] - mu[size_t(c)]) *
              inv_std[size_t(c)] +
          beta.val()[size_t(c)];
  if (n->requires_grad) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto out = n.get();
    n->backprop = [xn, gn, bn, out, rows, cols, mu, inv_std, training]() {
      xn->ensure_grad();
      gn->ensure_grad();
      bn->ensure_grad();
      for (int c = 0; c < cols; ++c) {
        const S m = mu[size_t(c)], is = inv_std[size_t(c)];
        const S g = gn->val[size_t(c)];
        S sum_gy = S(0), sum_gy_xh = S(0);
        for (int r = 0; r < rows; ++r) {
          const S gy = out->grad[size_t(r) * cols + c];
          const S xh = (xn->val[size_t(r) * cols + c] - m) * is;
          sum_gy += gy;
          sum_gy_xh += gy * xh;
        }
        gn->grad[size_t(c)] += sum_gy_xh;
        bn->grad[size_t(c)] += sum_gy;
        for (int r = 0; r < rows; ++r) {
          const S gy = out->grad[size_t(r) * cols + c];
          const S xh = (xn->val[size_t(r) * cols + c] - m) * is;
          if (training) {
            xn->grad[size_t(r) * cols + c] +=
                g * is * (gy - (sum_gy + xh * sum_gy_xh) / S(rows));
          } else {
            xn->grad[size_t(r) * cols + c] += g * is * gy;
          }
        }
      }
    };
  }
  return Tensor<S>(n);
}

// ---- embedding lookup ----

template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& idx) {
  require(table.ndim() == 2, "embedding_lookup: table rank != 2");
  const int vocab = table.dim(0), dim = table.dim(1);
  for (int i : idx) require(i >= 0 && i < vocab, "embedding_lookup: index out of range");
  auto n = detail::make_node<S>({int(idx.size()), dim}, {table});
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.data() + size_t(idx[r]) * dim, dim, n->val.data() + r * dim);
  if (n->requires_grad) {
    auto tn = table.node();
    auto out = n.get();
    n->backprop = [tn, out, idx, dim]() {
      tn->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < dim; ++c)
          tn->grad[size_t(idx[r]) * dim + c] += out->grad[r * size_t(dim) + c];
    };
  }
  return Tensor<S>(n);
}

}  // namespace ehm
