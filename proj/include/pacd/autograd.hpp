#pragma once

// Minimal tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph records every value produced by an op together with a closure that
// propagates the output gradient to the op's inputs. Parameters live in a
// ParamStore and are bound into a graph as leaves; after backward() their
// gradients are collected with Graph::param_grads(). A Graph owns no global
// state, so independent graphs may be built concurrently over a read-only
// ParamStore.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pacd/common.hpp"

namespace pacd::ad {

class ParamStore {
public:
  std::size_t add(const std::string &name, Tensor value) {
    if (index_.count(name)) throw Error("ParamStore: duplicate parameter " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  bool contains(const std::string &name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter " + name);
    return it->second;
  }

  Tensor &value(std::size_t i) { return values_.at(i); }
  const Tensor &value(std::size_t i) const { return values_.at(i); }
  Tensor &operator[](const std::string &name) { return values_[index(name)]; }
  const Tensor &operator[](const std::string &name) const { return values_[index(name)]; }

  const std::string &name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string> &names() const { return names_; }
  std::size_t size() const { return values_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto &v : values_) n += v.numel();
    return n;
  }

  /// Number of scalars in parameters whose names start with `prefix`.
  std::size_t numel_with_prefix(const std::string &prefix) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) n += values_[i].numel();
    return n;
  }

  bool operator==(const ParamStore &o) const {
    return names_ == o.names_ && values_ == o.values_;
  }

private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Gradients aligned with ParamStore indices. An empty tensor means the
/// parameter did not participate.
using Grads = std::vector<Tensor>;

class Graph;

struct Var {
  Graph *g = nullptr;
  std::size_t id = 0;
};

using BackwardFn = std::function<void(Graph &, std::size_t self)>;

class Graph {
public:
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  bool tracking() const { return track_; }

  Var constant(Tensor t) { return push(std::move(t), false, -1, {}); }
  Var input(Tensor t) { return push(std::move(t), track_, -1, {}); }
  Var param(const ParamStore &store, std::size_t i) {
    return push(store.value(i), track_, static_cast<long>(i), {});
  }
  Var param(const ParamStore &store, const std::string &name) {
    return param(store, store.index(name));
  }

  /// Records an op result. `fn` runs during backward only if any input
  /// requires a gradient.
  Var make(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    if (track_)
      for (auto v : inputs) rg = rg || nodes_[v.id].requires_grad;
    return push(std::move(value), rg, -1, rg ? std::move(fn) : BackwardFn{});
  }
  Var make(Tensor value, const std::vector<Var> &inputs, BackwardFn fn) {
    bool rg = false;
    if (track_)
      for (auto v : inputs) rg = rg || nodes_[v.id].requires_grad;
    return push(std::move(value), rg, -1, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor &value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor &value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward root w.r.t. `v` (zeros if none flowed).
  Tensor grad(Var v) const {
    const auto &n = nodes_.at(v.id);
    if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0);
    return n.grad;
  }

  const Tensor &out_grad(std::size_t self) const { return nodes_[self].grad; }

  /// Lazily allocated gradient accumulator for node `id`.
  Tensor &acc(std::size_t id) {
    auto &n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
  }
  Tensor &acc(Var v) { return acc(v.id); }

  void backward(Var root) {
    if (nodes_.at(root.id).value.numel() != 1)
      throw Error("backward: root must be a scalar");
    backward(root, Tensor(nodes_[root.id].value.shape, 1.0));
  }

  void backward(Var root, const Tensor &seed) {
    if (!track_) throw Error("backward: graph does not track gradients");
    for (auto &n : nodes_) n.grad = Tensor{};
    if (!nodes_[root.id].requires_grad) return;
    if (seed.shape != nodes_[root.id].value.shape)
      throw Error("backward: seed shape mismatch");
    nodes_[root.id].grad = seed;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      auto &n = nodes_[id];
      if (n.grad.data.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  /// Sums gradients of every leaf bound to each parameter index.
  Grads param_grads(std::size_t n_params) const {
    Grads g(n_params);
    for (const auto &n : nodes_) {
      if (n.param < 0 || n.grad.data.empty()) continue;
      auto &dst = g.at(static_cast<std::size_t>(n.param));
      if (dst.data.empty())
        dst = n.grad;
      else
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += n.grad.data[i];
    }
    return g;
  }

  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    long param = -1;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool rg, long param, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(fn), param, rg});
    return Var{this, nodes_.size() - 1};
  }

  bool track_;
  std::vector<Node> nodes_;
};

inline const Tensor &val(Var v) { return v.g->value(v); }

//==============================================================================
// Elementwise

inline Var add(Var a, Var b) {
  const Tensor &A = val(a), &B = val(b);
  if (A.shape != B.shape)
    throw Error("add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += B.data[i];
  return a.g->make(std::move(out), {a, b}, [a, b](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    for (Var x : {a, b}) {
      if (!g.requires_grad(x)) continue;
      auto &gx = g.acc(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = val(a);
  for (auto &x : out.data) x *= s;
  return a.g->make(std::move(out), {a}, [a, s](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(a);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += s * gy.data[i];
  });
}

inline Var reshape(Var a, std::vector<std::size_t> shape) {
  Tensor out = val(a);
  if (Tensor::numel_of(shape) != out.numel()) throw Error("reshape: size mismatch");
  out.shape = std::move(shape);
  return a.g->make(std::move(out), {a}, [a](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(a);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[i];
  });
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

/// Gaussian-error linear unit (exact erf form).
inline Var gelu(Var a) {
  Tensor out = val(a);
  for (auto &x : out.data) x = gelu_value(x);
  return a.g->make(std::move(out), {a}, [a](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    const Tensor &x = g.value(a);
    auto &gx = g.acc(a);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[i] * gelu_grad(x.data[i]);
  });
}

//==============================================================================
// Dense layers

namespace detail {
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor &t) {
  if (t.ndim() == 1) return {1, t.dim(0)};
  if (t.ndim() == 2) return {t.dim(0), t.dim(1)};
  throw Error("expected a 1-D or 2-D tensor, got " + shape_str(t.shape));
}
} // namespace detail

/// y = x W + b with x [N, Cin] (or [Cin]), W [Cin, Cout], b [Cout].
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  const Tensor &X = val(x), &W = val(w);
  const auto [n, cin] = detail::rows_cols(X);
  if (W.ndim() != 2 || W.dim(0) != cin)
    throw Error("linear: weight " + shape_str(W.shape) + " incompatible with input " +
                shape_str(X.shape));
  const std::size_t cout = W.dim(1);
  if (b && (val(*b).ndim() != 1 || val(*b).dim(0) != cout))
    throw Error("linear: bias shape mismatch");

  Tensor out(X.ndim() == 1 ? std::vector<std::size_t>{cout}
                           : std::vector<std::size_t>{n, cout});
  for (std::size_t i = 0; i < n; ++i) {
    double *o = out.data.data() + i * cout;
    if (b) std::copy(val(*b).data.begin(), val(*b).data.end(), o);
    const double *xi = X.data.data() + i * cin;
    for (std::size_t k = 0; k < cin; ++k) {
      const double xv = xi[k];
      const double *wr = W.data.data() + k * cout;
      for (std::size_t j = 0; j < cout; ++j) o[j] += xv * wr[j];
    }
  }
  std::vector<Var> ins{x, w};
  if (b) ins.push_back(*b);
  auto bb = b;
  return x.g->make(std::move(out), ins, [x, w, bb, n, cin, cout](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    const Tensor &X = g.value(x), &W = g.value(w);
    if (g.requires_grad(x)) {
      auto &gx = g.acc(x);
      for (std::size_t i = 0; i < n; ++i) {
        const double *gyi = gy.data.data() + i * cout;
        double *gxi = gx.data.data() + i * cin;
        for (std::size_t k = 0; k < cin; ++k) {
          const double *wr = W.data.data() + k * cout;
          double s = 0.0;
          for (std::size_t j = 0; j < cout; ++j) s += gyi[j] * wr[j];
          gxi[k] += s;
        }
      }
    }
    if (g.requires_grad(w)) {
      auto &gw = g.acc(w);
      for (std::size_t i = 0; i < n; ++i) {
        const double *gyi = gy.data.data() + i * cout;
        const double *xi = X.data.data() + i * cin;
        for (std::size_t k = 0; k < cin; ++k) {
          const double xv = xi[k];
          double *gwr = gw.data.data() + k * cout;
          for (std::size_t j = 0; j < cout; ++j) gwr[j] += xv * gyi[j];
        }
      }
    }
    if (bb && g.requires_grad(*bb)) {
      auto &gb = g.acc(*bb);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cout; ++j) gb.data[j] += gy.data[i * cout + j];
    }
  });
}

/// Layer normalization over the last dimension.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor &X = val(x);
  const auto [n, c] = detail::rows_cols(X);
  if (val(gamma).numel() != c || val(beta).numel() != c)
    throw Error("layer_norm: affine parameter size mismatch");
  auto xhat = std::make_shared<std::vector<double>>(X.numel());
  auto inv_sd = std::make_shared<std::vector<double>>(n);
  Tensor out(X.shape);
  const double *G = val(gamma).data.data(), *B = val(beta).data.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double *xi = X.data.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xi[j] - mean) * is;
      (*xhat)[i * c + j] = h;
      out.data[i * c + j] = G[j] * h + B[j];
    }
  }
  return x.g->make(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat, inv_sd, n, c](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    const double *G = g.value(gamma).data.data();
    if (g.requires_grad(gamma)) {
      auto &gg = g.acc(gamma);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gg.data[j] += gy.data[i * c + j] * (*xhat)[i * c + j];
    }
    if (g.requires_grad(beta)) {
      auto &gb = g.acc(beta);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gb.data[j] += gy.data[i * c + j];
    }
    if (g.requires_grad(x)) {
      auto &gx = g.acc(x);
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = gy.data[i * c + j] * G[j];
          m1 += dh;
          m2 += dh * (*xhat)[i * c + j];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = gy.data[i * c + j] * G[j];
          gx.data[i * c + j] += (*inv_sd)[i] * (dh - m1 - (*xhat)[i * c + j] * m2);
        }
      }
    }
  });
}

/// 3x3 convolution with zero padding 1 on a channels-last [H, W, Cin] map.
/// Weight layout [3, 3, Cin, Cout]. Output [ceil(H/sh), ceil(W/sw), Cout].
inline Var conv3x3(Var x, Var w, Var b, std::size_t stride_h = 1, std::size_t stride_w = 1) {
  const Tensor &X = val(x), &Wt = val(w);
  if (X.ndim() != 3) throw Error("conv3x3: input must be [H, W, C]");
  const std::size_t H = X.dim(0), W = X.dim(1), cin = X.dim(2);
  if (Wt.ndim() != 4 || Wt.dim(0) != 3 || Wt.dim(1) != 3 || Wt.dim(2) != cin)
    throw Error("conv3x3: weight shape " + shape_str(Wt.shape) + " incompatible with input " +
                shape_str(X.shape));
  const std::size_t cout = Wt.dim(3);
  if (val(b).numel() != cout) throw Error("conv3x3: bias shape mismatch");
  if (stride_h == 0 || stride_w == 0) throw Error("conv3x3: zero stride");
  const std::size_t OH = (H - 1) / stride_h + 1, OW = (W - 1) / stride_w + 1;

  Tensor out({OH, OW, cout});
  const double *bias = val(b).data.data();
  for (std::size_t oh = 0; oh < OH; ++oh)
    for (std::size_t ow = 0; ow < OW; ++ow) {
      double *o = out.data.data() + (oh * OW + ow) * cout;
      std::copy(bias, bias + cout, o);
      for (std::size_t kh = 0; kh < 3; ++kh) {
        const long ih = static_cast<long>(oh * stride_h + kh) - 1;
        if (ih < 0 || ih >= static_cast<long>(H)) continue;
        for (std::size_t kw = 0; kw < 3; ++kw) {
          const long iw = static_cast<long>(ow * stride_w + kw) - 1;
          if (iw < 0 || iw >= static_cast<long>(W)) continue;
          const double *xp = X.data.data() + (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * cin;
          const double *wp = Wt.data.data() + (kh * 3 + kw) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = xp[ci];
            if (xv == 0.0) continue;
            const double *wr = wp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wr[co];
          }
        }
      }
    }

  return x.g->make(std::move(out), {x, w, b},
                   [x, w, b, H, W, cin, cout, OH, OW, stride_h, stride_w](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    const Tensor &X = g.value(x), &Wt = g.value(w);
    const bool need_x = g.requires_grad(x), need_w = g.requires_grad(w);
    Tensor *gx = need_x ? &g.acc(x) : nullptr;
    Tensor *gw = need_w ? &g.acc(w) : nullptr;
    if (g.requires_grad(b)) {
      auto &gb = g.acc(b);
      for (std::size_t p = 0; p < OH * OW; ++p)
        for (std::size_t co = 0; co < cout; ++co) gb.data[co] += gy.data[p * cout + co];
    }
    if (!need_x && !need_w) return;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const double *go = gy.data.data() + (oh * OW + ow) * cout;
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const long ih = static_cast<long>(oh * stride_h + kh) - 1;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const long iw = static_cast<long>(ow * stride_w + kw) - 1;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t xoff = (static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * cin;
            const std::size_t woff = (kh * 3 + kw) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double *wr = Wt.data.data() + woff + ci * cout;
              if (need_x) {
                double s = 0.0;
                for (std::size_t co = 0; co < cout; ++co) s += go[co] * wr[co];
                gx->data[xoff + ci] += s;
              }
              if (need_w) {
                const double xv = X.data[xoff + ci];
                if (xv == 0.0) continue;
                double *gwr = gw->data.data() + woff + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) gwr[co] += xv * go[co];
              }
            }
          }
        }
      }
  });
}

//==============================================================================
// Shape / gather ops

/// out[i, :] = x[idx[i], :] for x [N, C]. Backward scatters (adds).
inline Var gather_rows(Var x, std::shared_ptr<const std::vector<std::size_t>> idx) {
  const Tensor &X = val(x);
  if (X.ndim() != 2) throw Error("gather_rows: input must be 2-D");
  const std::size_t c = X.dim(1), m = idx->size();
  Tensor out({m, c});
  for (std::size_t i = 0; i < m; ++i) {
    if ((*idx)[i] >= X.dim(0)) throw Error("gather_rows: index out of range");
    std::copy_n(X.data.data() + (*idx)[i] * c, c, out.data.data() + i * c);
  }
  return x.g->make(std::move(out), {x}, [x, idx, c, m](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(x);
    for (std::size_t i = 0; i < m; ++i) {
      double *dst = gx.data.data() + (*idx)[i] * c;
      const double *src = gy.data.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

/// Mean over rows of [N, C] -> [C].
inline Var mean_rows(Var x) {
  const Tensor &X = val(x);
  const auto [n, c] = detail::rows_cols(X);
  Tensor out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j] += X.data[i * c + j];
  for (auto &v : out.data) v /= static_cast<double>(n);
  return x.g->make(std::move(out), {x}, [x, n, c](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(x);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) gx.data[i * c + j] += gy.data[j] * inv;
  });
}

/// Per-column standardization over the rows of [N, C] using the batch mean
/// and biased variance: y = (x - mean) / sqrt(var + eps).
inline Var standardize_rows(Var x, double eps = 1e-5) {
  const Tensor &X = val(x);
  const auto [n, c] = detail::rows_cols(X);
  if (X.ndim() != 2 || n < 2) throw Error("standardize_rows: need a [N, C] matrix with N >= 2");
  auto inv_sd = std::make_shared<std::vector<double>>(c, 0.0);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += X.data[i * c + j];
  for (auto &m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = X.data[i * c + j] - mean[j];
      (*inv_sd)[j] += d * d;
    }
  for (auto &v : *inv_sd) v = 1.0 / std::sqrt(v / static_cast<double>(n) + eps);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = (X.data[i * c + j] - mean[j]) * (*inv_sd)[j];
  auto y = std::make_shared<Tensor>(out);
  return x.g->make(std::move(out), {x}, [x, n, c, inv_sd, y](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(x);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < c; ++j) {
      double sg = 0.0, sgy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sg += gy.data[i * c + j];
        sgy += gy.data[i * c + j] * y->data[i * c + j];
      }
      for (std::size_t i = 0; i < n; ++i)
        gx.data[i * c + j] += (*inv_sd)[j] * (gy.data[i * c + j] - sg * inv_n - y->data[i * c + j] * sgy * inv_n);
    }
  });
}

/// Stacks equal-length vectors into a [M, C] matrix.
inline Var stack(const std::vector<Var> &xs) {
  if (xs.empty()) throw Error("stack: empty input");
  const std::size_t c = val(xs[0]).numel();
  Tensor out({xs.size(), c});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (val(xs[i]).numel() != c) throw Error("stack: size mismatch");
    std::copy(val(xs[i]).data.begin(), val(xs[i]).data.end(), out.data.begin() + i * c);
  }
  return xs[0].g->make(std::move(out), xs, [xs, c](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!g.requires_grad(xs[i])) continue;
      auto &gx = g.acc(xs[i]);
      for (std::size_t j = 0; j < c; ++j) gx.data[j] += gy.data[i * c + j];
    }
  });
}

//==============================================================================
// Windowed multi-head attention core

/// Scaled dot-product attention inside contiguous groups of `window_tokens`
/// rows. `qkv` is [N, 3C] laid out as [q | k | v]; heads split C evenly.
/// When `region` is given, logits between rows of different regions are set
/// to -inf, so their weight is exactly zero. Attention weights are written to
/// `probs_out` ([windows, heads, n, n]) when non-null.
inline Var window_attention(Var qkv, std::size_t window_tokens, std::size_t heads,
                            std::shared_ptr<const std::vector<int>> region = nullptr,
                            std::vector<double> *probs_out = nullptr) {
  const Tensor &QKV = val(qkv);
  if (QKV.ndim() != 2 || QKV.dim(1) % 3 != 0) throw Error("window_attention: qkv must be [N, 3C]");
  const std::size_t N = QKV.dim(0), C = QKV.dim(1) / 3, n = window_tokens;
  if (heads == 0 || C % heads != 0)
    throw Error("window_attention: heads (" + std::to_string(heads) +
                ") must divide channels (" + std::to_string(C) + ")");
  if (n == 0 || N % n != 0) throw Error("window_attention: rows not divisible by window size");
  if (region && region->size() != N) throw Error("window_attention: region size mismatch");
  const std::size_t nw = N / n, dh = C / heads, C3 = 3 * C;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();

  auto P = std::make_shared<std::vector<double>>(nw * heads * n * n);
  Tensor out({N, C});
  std::vector<double> row(n);
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t h = 0; h < heads; ++h) {
      double *Pw = P->data() + (w * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double *q = QKV.data.data() + (w * n + i) * C3 + h * dh;
        double mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) {
          if (region && (*region)[w * n + i] != (*region)[w * n + j]) {
            row[j] = neg_inf;
            continue;
          }
          const double *k = QKV.data.data() + (w * n + j) * C3 + C + h * dh;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += q[d] * k[d];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = row[j] == neg_inf ? 0.0 : std::exp(row[j] - mx);
          z += row[j];
        }
        double *o = out.data.data() + (w * n + i) * C + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = row[j] / z;
          Pw[i * n + j] = p;
          if (p == 0.0) continue;
          const double *v = QKV.data.data() + (w * n + j) * C3 + 2 * C + h * dh;
          for (std::size_t d = 0; d < dh; ++d) o[d] += p * v[d];
        }
      }
    }
  if (probs_out) *probs_out = *P;

  return qkv.g->make(std::move(out), {qkv}, [qkv, P, nw, n, heads, C, dh, sc](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    const Tensor &QKV = g.value(qkv);
    auto &gq = g.acc(qkv);
    const std::size_t C3 = 3 * C;
    std::vector<double> dP(n * n);
    for (std::size_t w = 0; w < nw; ++w)
      for (std::size_t h = 0; h < heads; ++h) {
        const double *Pw = P->data() + (w * heads + h) * n * n;
        // dP = dO V^T ; dV = P^T dO
        for (std::size_t i = 0; i < n; ++i) {
          const double *dO = gy.data.data() + (w * n + i) * C + h * dh;
          for (std::size_t j = 0; j < n; ++j) {
            const double p = Pw[i * n + j];
            const double *v = QKV.data.data() + (w * n + j) * C3 + 2 * C + h * dh;
            double *dv = gq.data.data() + (w * n + j) * C3 + 2 * C + h * dh;
            double s = 0.0;
            for (std::size_t d = 0; d < dh; ++d) {
              s += dO[d] * v[d];
              dv[d] += p * dO[d];
            }
            dP[i * n + j] = s;
          }
        }
        // dS = P * (dP - rowsum(P*dP)); dq = sc dS k ; dk = sc dS^T q
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += Pw[i * n + j] * dP[i * n + j];
          const double *q = QKV.data.data() + (w * n + i) * C3 + h * dh;
          double *dq = gq.data.data() + (w * n + i) * C3 + h * dh;
          for (std::size_t j = 0; j < n; ++j) {
            const double p = Pw[i * n + j];
            if (p == 0.0) continue;
            const double ds = p * (dP[i * n + j] - dot) * sc;
            const double *k = QKV.data.data() + (w * n + j) * C3 + C + h * dh;
            double *dk = gq.data.data() + (w * n + j) * C3 + C + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
              dq[d] += ds * k[d];
              dk[d] += ds * q[d];
            }
          }
        }
      }
  });
}

} // namespace pacd::ad
