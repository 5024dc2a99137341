#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "musiq/tensor.hpp"

namespace musiq {

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return ConstMatMap<T>(t.data(), rows, cols);
}

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MatMap<T>(t.data(), rows, cols);
}

// Reverse-mode tape. Every op appends a node whose parents strictly precede
// it, so creation order is a topological order and backward() is a single
// reverse sweep. One tape serves one forward pass and is then discarded.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    std::vector<int> parents;
    std::function<void(Graph&, int)> backward;  // reads grad(id), accumulates into parents
  };

  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  int add_leaf(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_node(Tensor<T> value, std::vector<int> parents,
               std::function<void(Graph&, int)> backward) {
    if (!recording_) return add_leaf(std::move(value));
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }

  // Zero-initialized on first touch.
  Tensor<T>& grad(int id) {
    if (grads_[id].numel() != nodes_[id].value.numel())
      grads_[id] = Tensor<T>::zeros(nodes_[id].value.shape());
    return grads_[id];
  }

  bool has_grad(int id) const {
    return !grads_.empty() && grads_[id].numel() == nodes_[id].value.numel();
  }

  void accumulate(int id, const Tensor<T>& g) {
    Tensor<T>& dst = grad(id);
    const T* src = g.data();
    T* d = dst.data();
    for (int64_t i = 0; i < dst.numel(); ++i) d[i] += src[i];
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(int loss_id) {
    if (!recording_) throw Error("backward() on a non-recording graph");
    if (nodes_[loss_id].value.numel() != 1)
      throw ShapeError("backward() requires a scalar loss, got " +
                       shape_str(nodes_[loss_id].value.shape()));
    grads_.assign(nodes_.size(), Tensor<T>());
    grad(loss_id)[0] = T(1);
    for (int id = loss_id; id >= 0; --id) {
      if (!nodes_[id].backward) continue;
      if (!has_grad(id)) continue;
      nodes_[id].backward(*this, id);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

// Handle into a graph node.
template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  const Tensor<T>& val() const { return g->value(id); }
  const Shape& shape() const { return val().shape(); }
  int dim(int i) const { return val().dim(i); }
  int64_t numel() const { return val().numel(); }
};

template <typename T>
Var<T> make_leaf(Graph<T>& g, Tensor<T> t) {
  return {&g, g.add_leaf(std::move(t))};
}

namespace ops {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (!a.val().same_shape(b.val()))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  int id = a.g->add_node(std::move(out), {a.id, b.id}, [a, b](Graph<T>& g, int self) {
    g.accumulate(a.id, g.grad(self));
    g.accumulate(b.id, g.grad(self));
  });
  return {a.g, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
  int id = a.g->add_node(std::move(out), {a.id, b.id}, [a, b](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    g.accumulate(a.id, go);
    Tensor<T>& gb = g.grad(b.id);
    for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
  });
  return {a.g, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
  int id = a.g->add_node(std::move(out), {a.id, b.id}, [a, b](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& ga = g.grad(a.id);
    Tensor<T>& gb = g.grad(b.id);
    for (int64_t i = 0; i < go.numel(); ++i) {
      ga[i] += go[i] * b.val()[i];
      gb[i] += go[i] * a.val()[i];
    }
  });
  return {a.g, id};
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * s;
  int id = a.g->add_node(std::move(out), {a.id}, [a, s](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& ga = g.grad(a.id);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * s;
  });
  return {a.g, id};
}

// a + c where c is a plain tensor that receives no gradient (masks).
template <typename T>
Var<T> add_const(Var<T> a, const Tensor<T>& c) {
  if (!a.val().same_shape(c))
    throw ShapeError("add_const: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(c.shape()));
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + c[i];
  int id = a.g->add_node(std::move(out), {a.id}, [a](Graph<T>& g, int self) {
    g.accumulate(a.id, g.grad(self));
  });
  return {a.g, id};
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.val().reshaped(shape);
  int id = a.g->add_node(std::move(out), {a.id}, [a](Graph<T>& g, int self) {
    Tensor<T> go = g.grad(self).reshaped(a.shape());
    g.accumulate(a.id, go);
  });
  return {a.g, id};
}

template <typename T>
void require_2d(const Var<T>& v, const char* what) {
  if (v.val().rank() != 2)
    throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " +
                     shape_str(v.shape()));
}

// (M,K) x (K,N) -> (M,N)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner extents disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(a.val(), m, k) * as_mat(b.val(), k, n);
  int id = a.g->add_node(std::move(out), {a.id, b.id}, [a, b, m, k, n](Graph<T>& g, int self) {
    ConstMatMap<T> go(g.grad(self).data(), m, n);
    as_mat(g.grad(a.id), m, k).noalias() += go * as_mat(b.val(), k, n).transpose();
    as_mat(g.grad(b.id), k, n).noalias() += as_mat(a.val(), m, k).transpose() * go;
  });
  return {a.g, id};
}

// (M,K) x (N,K)^T -> (M,N)
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1))
    throw ShapeError("matmul_nt: inner extents disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  Tensor<T> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(a.val(), m, k) * as_mat(b.val(), n, k).transpose();
  int id = a.g->add_node(std::move(out), {a.id, b.id}, [a, b, m, k, n](Graph<T>& g, int self) {
    ConstMatMap<T> go(g.grad(self).data(), m, n);
    as_mat(g.grad(a.id), m, k).noalias() += go * as_mat(b.val(), n, k);
    as_mat(g.grad(b.id), n, k).noalias() += go.transpose() * as_mat(a.val(), m, k);
  });
  return {a.g, id};
}

// x (M,K) * w (K,N) + row-broadcast bias (N).
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  require_2d(x, "affine");
  require_2d(w, "affine");
  int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (k != w.dim(0) || b.numel() != n)
    throw ShapeError("affine: incompatible shapes " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  Tensor<T> out({m, n});
  auto o = as_mat(out, m, n);
  o.noalias() = as_mat(x.val(), m, k) * as_mat(w.val(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.val().data(), n);
  int id = x.g->add_node(std::move(out), {x.id, w.id, b.id},
                         [x, w, b, m, k, n](Graph<T>& g, int self) {
    ConstMatMap<T> go(g.grad(self).data(), m, n);
    as_mat(g.grad(x.id), m, k).noalias() += go * as_mat(w.val(), k, n).transpose();
    as_mat(g.grad(w.id), k, n).noalias() += as_mat(x.val(), m, k).transpose() * go;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g.grad(b.id).data(), n) +=
        go.colwise().sum();
  });
  return {x.g, id};
}

// Softmax over the last dimension. -inf inputs map to exactly 0.
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  if (x.val().rank() < 1 || x.dim(x.val().rank() - 1) < 1)
    throw ShapeError("softmax_lastdim: empty last dimension");
  int64_t cols = x.dim(x.val().rank() - 1);
  int64_t rows = x.numel() / cols;
  const T* px = x.val().data();
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::isnan(static_cast<double>(px[i])))
      throw NumericError("softmax_lastdim: NaN input");
  Tensor<T> out(x.shape());
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * cols;
    T* orow = po + r * cols;
    T mx = row[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      T e = std::isinf(static_cast<double>(row[c])) && row[c] < T(0)
                ? T(0)
                : std::exp(row[c] - mx);
      orow[c] = e;
      sum += e;
    }
    if (!(sum > T(0))) throw NumericError("softmax_lastdim: row has no finite entries");
    for (int64_t c = 0; c < cols; ++c) orow[c] /= sum;
  }
  int id = x.g->add_node(std::move(out), {x.id}, [x, rows, cols](Graph<T>& g, int self) {
    const Tensor<T>& y = g.value(self);
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = y.data() + r * cols;
      const T* gr = go.data() + r * cols;
      T dot = T(0);
      for (int64_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      T* gxr = gx.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) gxr[c] += yr[c] * (gr[c] - dot);
    }
  });
  return {x.g, id};
}

// LayerNorm over the last dimension with per-feature scale/offset.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  int64_t d = x.dim(x.val().rank() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layernorm: scale/offset must have the feature extent");
  int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_sigma({static_cast<int>(rows)});
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.val().data() + r * d;
    T mean = T(0);
    for (int64_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int64_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    T* hr = xhat.data() + r * d;
    T* orow = out.data() + r * d;
    for (int64_t c = 0; c < d; ++c) {
      hr[c] = (xr[c] - mean) * is;
      orow[c] = gamma.val()[c] * hr[c] + beta.val()[c];
    }
  }
  int id = x.g->add_node(
      std::move(out), {x.id, gamma.id, beta.id},
      [x, gamma, beta, rows, d, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](Graph<T>& g, int self) {
        const Tensor<T>& go = g.grad(self);
        Tensor<T>& gx = g.grad(x.id);
        Tensor<T>& gg = g.grad(gamma.id);
        Tensor<T>& gb = g.grad(beta.id);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gor = go.data() + r * d;
          const T* hr = xhat.data() + r * d;
          T m1 = T(0), m2 = T(0);
          for (int64_t c = 0; c < d; ++c) {
            T h = gor[c] * gamma.val()[c];
            m1 += h;
            m2 += h * hr[c];
            gg[c] += gor[c] * hr[c];
            gb[c] += gor[c];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          T* gxr = gx.data() + r * d;
          for (int64_t c = 0; c < d; ++c)
            gxr[c] += inv_sigma[r] * (gor[c] * gamma.val()[c] - m1 - hr[c] * m2);
        }
      });
  return {x.g, id};
}

// GroupNorm on NHWC input: each (sample, channel group) is normalized over
// its H*W*(C/groups) elements; scale/offset are per channel.
template <typename T>
Var<T> groupnorm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-6)) {
  if (x.val().rank() != 4) throw ShapeError("groupnorm: expected NHWC input");
  int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (c % groups != 0) throw ShapeError("groupnorm: channels not divisible by groups");
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("groupnorm: scale/offset must have the channel extent");
  int gc = c / groups;
  int64_t set = static_cast<int64_t>(h) * w * gc;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_sigma({n, groups});
  const T* px = x.val().data();
  for (int s = 0; s < n; ++s) {
    for (int gi = 0; gi < groups; ++gi) {
      T mean = T(0);
      for (int yx = 0; yx < h * w; ++yx)
        for (int ch = gi * gc; ch < (gi + 1) * gc; ++ch)
          mean += px[(static_cast<int64_t>(s) * h * w + yx) * c + ch];
      mean /= static_cast<T>(set);
      T var = T(0);
      for (int yx = 0; yx < h * w; ++yx)
        for (int ch = gi * gc; ch < (gi + 1) * gc; ++ch) {
          T v = px[(static_cast<int64_t>(s) * h * w + yx) * c + ch] - mean;
          var += v * v;
        }
      var /= static_cast<T>(set);
      T is = T(1) / std::sqrt(var + eps);
      inv_sigma[static_cast<int64_t>(s) * groups + gi] = is;
      for (int yx = 0; yx < h * w; ++yx)
        for (int ch = gi * gc; ch < (gi + 1) * gc; ++ch) {
          int64_t idx = (static_cast<int64_t>(s) * h * w + yx) * c + ch;
          xhat[idx] = (px[idx] - mean) * is;
          out[idx] = gamma.val()[ch] * xhat[idx] + beta.val()[ch];
        }
    }
  }
  int id = x.g->add_node(
      std::move(out), {x.id, gamma.id, beta.id},
      [x, gamma, beta, n, h, w, c, groups, gc, set, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](Graph<T>& g, int self) {
        const Tensor<T>& go = g.grad(self);
        Tensor<T>& gx = g.grad(x.id);
        Tensor<T>& gg = g.grad(gamma.id);
        Tensor<T>& gb = g.grad(beta.id);
        for (int s = 0; s < n; ++s) {
          for (int gi = 0; gi < groups; ++gi) {
            T m1 = T(0), m2 = T(0);
            for (int yx = 0; yx < h * w; ++yx)
              for (int ch = gi * gc; ch < (gi + 1) * gc; ++ch) {
                int64_t idx = (static_cast<int64_t>(s) * h * w + yx) * c + ch;
                T hval = go[idx] * gamma.val()[ch];
                m1 += hval;
                m2 += hval * xhat[idx];
                gg[ch] += go[idx] * xhat[idx];
                gb[ch] += go[idx];
              }
            m1 /= static_cast<T>(set);
            m2 /= static_cast<T>(set);
            T is = inv_sigma[static_cast<int64_t>(s) * groups + gi];
            for (int yx = 0; yx < h * w; ++yx)
              for (int ch = gi * gc; ch < (gi + 1) * gc; ++ch) {
                int64_t idx = (static_cast<int64_t>(s) * h * w + yx) * c + ch;
                gx[idx] += is * (go[idx] * gamma.val()[ch] - m1 - xhat[idx] * m2);
              }
          }
        }
      });
  return {x.g, id};
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] > T(0) ? x.val()[i] : T(0);
  int id = x.g->add_node(std::move(out), {x.id}, [x](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int64_t i = 0; i < go.numel(); ++i)
      if (x.val()[i] > T(0)) gx[i] += go[i];
  });
  return {x.g, id};
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(x.val()[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  int id = x.g->add_node(std::move(out), {x.id}, [x](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int64_t i = 0; i < go.numel(); ++i) {
      double v = static_cast<double>(x.val()[i]);
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] += go[i] * static_cast<T>(cdf + v * pdf);
    }
  });
  return {x.g, id};
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  T s = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) s += x.val()[i];
  int id = x.g->add_node(Tensor<T>::scalar(s), {x.id}, [x](Graph<T>& g, int self) {
    T go = g.grad(self)[0];
    Tensor<T>& gx = g.grad(x.id);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go;
  });
  return {x.g, id};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Column block [start, start+width) of a (M,N) matrix.
template <typename T>
Var<T> slice_cols(Var<T> x, int start, int width) {
  require_2d(x, "slice_cols");
  int m = x.dim(0), n = x.dim(1);
  if (start < 0 || width < 1 || start + width > n)
    throw ShapeError("slice_cols: block out of range");
  Tensor<T> out({m, width});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < width; ++c)
      out[static_cast<int64_t>(r) * width + c] =
          x.val()[static_cast<int64_t>(r) * n + start + c];
  int id = x.g->add_node(std::move(out), {x.id}, [x, start, width, m, n](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < width; ++c)
        gx[static_cast<int64_t>(r) * n + start + c] +=
            go[static_cast<int64_t>(r) * width + c];
  });
  return {x.g, id};
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  int m = xs[0].dim(0), n = 0;
  std::vector<int> parents;
  for (const Var<T>& v : xs) {
    require_2d(v, "concat_cols");
    if (v.dim(0) != m) throw ShapeError("concat_cols: row extents disagree");
    n += v.dim(1);
    parents.push_back(v.id);
  }
  Tensor<T> out({m, n});
  int off = 0;
  for (const Var<T>& v : xs) {
    int w = v.dim(1);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < w; ++c)
        out[static_cast<int64_t>(r) * n + off + c] = v.val()[static_cast<int64_t>(r) * w + c];
    off += w;
  }
  std::vector<Var<T>> saved = xs;
  int id = xs[0].g->add_node(std::move(out), std::move(parents),
                             [saved, m, n](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    int off = 0;
    for (const Var<T>& v : saved) {
      int w = v.dim(1);
      Tensor<T>& gv = g.grad(v.id);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
          gv[static_cast<int64_t>(r) * w + c] += go[static_cast<int64_t>(r) * n + off + c];
      off += w;
    }
  });
  return {xs[0].g, id};
}

// Row block [start, start+rows) of a (M,N) matrix.
template <typename T>
Var<T> slice_rows(Var<T> x, int start, int rows) {
  require_2d(x, "slice_rows");
  int m = x.dim(0), n = x.dim(1);
  if (start < 0 || rows < 1 || start + rows > m)
    throw ShapeError("slice_rows: block out of range");
  Tensor<T> out({rows, n});
  std::copy(x.val().data() + static_cast<int64_t>(start) * n,
            x.val().data() + static_cast<int64_t>(start + rows) * n, out.data());
  int id = x.g->add_node(std::move(out), {x.id}, [x, start, rows, n](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int64_t i = 0; i < go.numel(); ++i) gx[static_cast<int64_t>(start) * n + i] += go[i];
  });
  return {x.g, id};
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  int n = xs[0].dim(1), m = 0;
  std::vector<int> parents;
  for (const Var<T>& v : xs) {
    require_2d(v, "concat_rows");
    if (v.dim(1) != n) throw ShapeError("concat_rows: column extents disagree");
    m += v.dim(0);
    parents.push_back(v.id);
  }
  Tensor<T> out({m, n});
  int64_t off = 0;
  for (const Var<T>& v : xs) {
    std::copy(v.val().data(), v.val().data() + v.numel(), out.data() + off);
    off += v.numel();
  }
  std::vector<Var<T>> saved = xs;
  int id = xs[0].g->add_node(std::move(out), std::move(parents), [saved](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    int64_t off = 0;
    for (const Var<T>& v : saved) {
      Tensor<T>& gv = g.grad(v.id);
      for (int64_t i = 0; i < gv.numel(); ++i) gv[i] += go[off + i];
      off += gv.numel();
    }
  });
  return {xs[0].g, id};
}

// Row lookup: out[r] = table[idx[r]] for idx[r] >= 0, a zero row for -1.
// Gradients scatter-add back into the table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int> idx) {
  require_2d(table, "gather_rows");
  int rows = table.dim(0), d = table.dim(1);
  int m = static_cast<int>(idx.size());
  Tensor<T> out({m, d});
  for (int r = 0; r < m; ++r) {
    int src = idx[r];
    if (src < -1 || src >= rows) throw ShapeError("gather_rows: index out of range");
    if (src >= 0)
      std::copy(table.val().data() + static_cast<int64_t>(src) * d,
                table.val().data() + static_cast<int64_t>(src + 1) * d,
                out.data() + static_cast<int64_t>(r) * d);
  }
  int id = table.g->add_node(std::move(out), {table.id},
                             [table, idx = std::move(idx), d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gt = g.grad(table.id);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      for (int c = 0; c < d; ++c)
        gt[static_cast<int64_t>(idx[r]) * d + c] += go[static_cast<int64_t>(r) * d + c];
    }
  });
  return {table.g, id};
}

// Row scatter: out has `out_rows` rows; out[r] = x[src[r]] for src[r] >= 0,
// zero rows elsewhere. Inverse layout of gather_rows.
template <typename T>
Var<T> scatter_rows(Var<T> x, std::vector<int> src, int out_rows) {
  require_2d(x, "scatter_rows");
  int d = x.dim(1);
  if (static_cast<int>(src.size()) != out_rows)
    throw ShapeError("scatter_rows: index list length must equal out_rows");
  Tensor<T> out({out_rows, d});
  for (int r = 0; r < out_rows; ++r) {
    int s = src[r];
    if (s < -1 || s >= x.dim(0)) throw ShapeError("scatter_rows: index out of range");
    if (s >= 0)
      std::copy(x.val().data() + static_cast<int64_t>(s) * d,
                x.val().data() + static_cast<int64_t>(s + 1) * d,
                out.data() + static_cast<int64_t>(r) * d);
  }
  int id = x.g->add_node(std::move(out), {x.id},
                         [x, src = std::move(src), d](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (size_t r = 0; r < src.size(); ++r) {
      if (src[r] < 0) continue;
      for (int c = 0; c < d; ++c)
        gx[static_cast<int64_t>(src[r]) * d + c] += go[static_cast<int64_t>(r) * d + c];
    }
  });
  return {x.g, id};
}

// NHWC -> NC mean over the spatial extent.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  if (x.val().rank() != 4) throw ShapeError("global_avg_pool: expected NHWC input");
  int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  int64_t hw = static_cast<int64_t>(h) * w;
  Tensor<T> out({n, c});
  for (int s = 0; s < n; ++s)
    for (int64_t yx = 0; yx < hw; ++yx)
      for (int ch = 0; ch < c; ++ch)
        out[static_cast<int64_t>(s) * c + ch] += x.val()[(s * hw + yx) * c + ch];
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<T>(hw);
  int id = x.g->add_node(std::move(out), {x.id}, [x, n, hw, c](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    for (int s = 0; s < n; ++s)
      for (int64_t yx = 0; yx < hw; ++yx)
        for (int ch = 0; ch < c; ++ch)
          gx[(s * hw + yx) * c + ch] +=
              go[static_cast<int64_t>(s) * c + ch] / static_cast<T>(hw);
  });
  return {x.g, id};
}

namespace detail {

// im2col block for samples [n0, n1): rows (n1-n0)*oh*ow, cols kh*kw*cin.
template <typename T>
void im2col(const Tensor<T>& x, int n0, int n1, int h, int w, int cin, int kh, int kw,
            int stride, int pad, int oh, int ow, Tensor<T>& cols) {
  const T* px = x.data();
  T* pc = cols.data();
  int64_t kcols = static_cast<int64_t>(kh) * kw * cin;
  int64_t row = 0;
  for (int s = n0; s < n1; ++s) {
    const T* sample = px + static_cast<int64_t>(s) * h * w * cin;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++row) {
        T* dst = pc + row * kcols;
        int64_t k = 0;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
              for (int ci = 0; ci < cin; ++ci) dst[k++] = T(0);
            } else {
              const T* src = sample + (static_cast<int64_t>(iy) * w + ix) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[k++] = src[ci];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const Tensor<T>& cols, int n0, int n1, int h, int w, int cin, int kh,
                  int kw, int stride, int pad, int oh, int ow, Tensor<T>& gx) {
  const T* pc = cols.data();
  T* pg = gx.data();
  int64_t kcols = static_cast<int64_t>(kh) * kw * cin;
  int64_t row = 0;
  for (int s = n0; s < n1; ++s) {
    T* sample = pg + static_cast<int64_t>(s) * h * w * cin;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++row) {
        const T* src = pc + row * kcols;
        int64_t k = 0;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
              k += cin;
            } else {
              T* dst = sample + (static_cast<int64_t>(iy) * w + ix) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[ci] += src[k++];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D convolution on NHWC input; weight (KH,KW,Cin,Cout), bias (Cout).
// Runs im2col + matmul in sample chunks and recomputes the column block in
// backward, so nothing quadratic in sequence length is retained.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  if (x.val().rank() != 4) throw ShapeError("conv2d: expected NHWC input");
  if (w.val().rank() != 4) throw ShapeError("conv2d: expected KH,KW,Cin,Cout weight");
  int n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  int kh = w.dim(0), kw = w.dim(1), wcin = w.dim(2), cout = w.dim(3);
  if (cin != wcin) throw ShapeError("conv2d: channel extents disagree");
  if (b.numel() != cout) throw ShapeError("conv2d: bias extent mismatch");
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel larger than padded input");
  int64_t kcols = static_cast<int64_t>(kh) * kw * cin;
  int chunk = std::max<int>(1, static_cast<int>((1 << 22) / std::max<int64_t>(1, kcols * oh * ow)));

  Tensor<T> out({n, oh, ow, cout});
  ConstMatMap<T> wm(w.val().data(), static_cast<int>(kcols), cout);
  for (int n0 = 0; n0 < n; n0 += chunk) {
    int n1 = std::min(n, n0 + chunk);
    int64_t rows = static_cast<int64_t>(n1 - n0) * oh * ow;
    Tensor<T> cols({static_cast<int>(rows), static_cast<int>(kcols)});
    detail::im2col(x.val(), n0, n1, h, wd, cin, kh, kw, stride, pad, oh, ow, cols);
    MatMap<T> om(out.data() + static_cast<int64_t>(n0) * oh * ow * cout,
                 static_cast<int>(rows), cout);
    om.noalias() = ConstMatMap<T>(cols.data(), static_cast<int>(rows),
                                  static_cast<int>(kcols)) * wm;
    om.rowwise() +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.val().data(), cout);
  }

  int id = x.g->add_node(std::move(out), {x.id, w.id, b.id},
                         [x, w, b, n, h, wd, cin, kh, kw, cout, stride, pad, oh, ow,
                          kcols, chunk](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad(self);
    Tensor<T>& gx = g.grad(x.id);
    Tensor<T>& gw = g.grad(w.id);
    Tensor<T>& gb = g.grad(b.id);
    MatMap<T> gwm(gw.data(), static_cast<int>(kcols), cout);
    ConstMatMap<T> wm(w.val().data(), static_cast<int>(kcols), cout);
    for (int n0 = 0; n0 < n; n0 += chunk) {
      int n1 = std::min(n, n0 + chunk);
      int64_t rows = static_cast<int64_t>(n1 - n0) * oh * ow;
      Tensor<T> cols({static_cast<int>(rows), static_cast<int>(kcols)});
      detail::im2col(x.val(), n0, n1, h, wd, cin, kh, kw, stride, pad, oh, ow, cols);
      ConstMatMap<T> gom(go.data() + static_cast<int64_t>(n0) * oh * ow * cout,
                         static_cast<int>(rows), cout);
      gwm.noalias() += ConstMatMap<T>(cols.data(), static_cast<int>(rows),
                                      static_cast<int>(kcols)).transpose() * gom;
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), cout) +=
          gom.colwise().sum();
      Tensor<T> gcols({static_cast<int>(rows), static_cast<int>(kcols)});
      MatMap<T>(gcols.data(), static_cast<int>(rows), static_cast<int>(kcols)).noalias() =
          gom * wm.transpose();
      detail::col2im_accum(gcols, n0, n1, h, wd, cin, kh, kw, stride, pad, oh, ow, gx);
    }
  });
  return {x.g, id};
}

// Mean absolute error against a constant target of the same extent.
template <typename T>
Var<T> l1_to_target(Var<T> pred, const Tensor<T>& target) {
  if (pred.numel() != target.numel())
    throw ShapeError("l1_to_target: extent mismatch");
  int64_t n = pred.numel();
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += std::abs(pred.val()[i] - target[i]);
  s /= static_cast<T>(n);
  int id = pred.g->add_node(Tensor<T>::scalar(s), {pred.id},
                            [pred, target, n](Graph<T>& g, int self) {
    T go = g.grad(self)[0] / static_cast<T>(n);
    Tensor<T>& gp = g.grad(pred.id);
    for (int64_t i = 0; i < n; ++i) {
      T d = pred.val()[i] - target[i];
      if (d > T(0)) gp[i] += go;
      else if (d < T(0)) gp[i] -= go;
      // subgradient 0 at equality
    }
  });
  return {pred.g, id};
}

// EMD between a predicted distribution (differentiable) and a constant
// normalized target: ((1/B) sum_m |CDF_p(m) - CDF_phat(m)|^r)^(1/r).
template <typename T>
Var<T> emd_to_target(Var<T> phat, const Tensor<T>& p, T r) {
  if (phat.numel() != p.numel()) throw ShapeError("emd_to_target: bucket counts differ");
  int64_t B = phat.numel();
  if (B < 1) throw ShapeError("emd_to_target: empty distributions");
  std::vector<T> diff(B);
  T cp = T(0), cq = T(0), s = T(0);
  for (int64_t m = 0; m < B; ++m) {
    cq += phat.val()[m];
    cp += p[m];
    diff[m] = cq - cp;
    s += std::pow(std::abs(diff[m]), r);
  }
  s /= static_cast<T>(B);
  T e = std::pow(s, T(1) / r);
  int id = phat.g->add_node(Tensor<T>::scalar(e), {phat.id},
                            [phat, diff = std::move(diff), s, r, B](Graph<T>& g, int self) {
    if (!(s > T(0))) return;  // minimum; subgradient 0
    T go = g.grad(self)[0];
    T outer = std::pow(s, T(1) / r - T(1)) / static_cast<T>(B);
    // dE/d diff_m, then prefix-sum structure of the CDF gives dE/d phat_i.
    Tensor<T>& gp = g.grad(phat.id);
    T suffix = T(0);
    for (int64_t m = B - 1; m >= 0; --m) {
      T d = diff[m];
      T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      suffix += outer * std::pow(std::abs(d), r - T(1)) * sign;
      gp[m] += go * suffix;
    }
  });
  return {phat.g, id};
}

}  // namespace ops

}  // namespace musiq
