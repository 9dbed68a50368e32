#pragma once

// Shifted-window transformer encoder with a convolutional residual branch.
//
// Token maps are carried as [H*W, C] row-major matrices (row = h*W + w).
// Every block computes
//   hat = MSA(LN(z)) + CRB(z)
//   out = MLP(LN(hat)) + hat
// where MSA alternates between regular and cyclically shifted windows inside
// each block pair and CRB is a 3x3 same-channel convolution.

#include <array>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pacd/autograd.hpp"
#include "pacd/views.hpp"

namespace pacd {

using ad::Graph;
using ad::ParamStore;
using ad::Var;

struct Stride2 {
  std::size_t d = 1;
  std::size_t t = 1;
  bool operator==(const Stride2 &) const = default;
};

struct BackboneConfig {
  std::size_t embed_dim = 32;
  std::vector<std::size_t> depths{1, 1};
  std::vector<std::size_t> num_heads{4, 4};
  std::array<std::size_t, 2> window{7, 9};
  double mlp_ratio = 4.0;
  std::array<Stride2, 2> patch_embed_strides{Stride2{1, 2}, Stride2{1, 2}};
  double p_drop = 0.0;

  std::size_t stages() const { return depths.size(); }
  std::size_t stage_channels(std::size_t l) const { return embed_dim << l; }
  std::size_t feature_dim() const { return stage_channels(stages() - 1); }

  bool operator==(const BackboneConfig &) const = default;
};

/// Spatial resolution of each stage for a D x T input.
struct StageGeometry {
  std::size_t H = 0, W = 0, C = 0;
  std::size_t wd = 0, wt = 0; // window
  std::size_t sd = 0, st = 0; // shift used by the shifted block
};

/// Validates `cfg` against a D x T input and returns per-stage geometry.
inline std::vector<StageGeometry> stage_geometry(const BackboneConfig &cfg, std::size_t D,
                                                 std::size_t T) {
  if (cfg.embed_dim < 2 || cfg.embed_dim % 2 != 0)
    throw ConfigError("backbone: embed_dim must be even and >= 2");
  if (cfg.depths.empty() || cfg.depths.size() != cfg.num_heads.size())
    throw ConfigError("backbone: depths and num_heads must have equal, nonzero length");
  if (cfg.window[0] == 0 || cfg.window[1] == 0) throw ConfigError("backbone: zero window");
  if (!(cfg.mlp_ratio > 0.0)) throw ConfigError("backbone: mlp_ratio must be positive");
  if (!(cfg.p_drop >= 0.0 && cfg.p_drop < 1.0)) throw ConfigError("backbone: p_drop must lie in [0,1)");
  const auto &[s1, s2] = cfg.patch_embed_strides;
  if (s1.d == 0 || s1.t == 0 || s2.d == 0 || s2.t == 0) throw ConfigError("backbone: zero stride");
  if (D % s1.d || (D / s1.d) % s2.d || T % s1.t || (T / s1.t) % s2.t)
    throw ConfigError("backbone: input " + std::to_string(D) + "x" + std::to_string(T) +
                      " not divisible by patch-embed strides");
  std::size_t H = D / s1.d / s2.d, W = T / s1.t / s2.t;
  std::vector<StageGeometry> geo;
  for (std::size_t l = 0; l < cfg.stages(); ++l) {
    if (l > 0) {
      if (H % 2 || W % 2)
        throw ConfigError("backbone: stage " + std::to_string(l) + " needs even grid, got " +
                          std::to_string(H) + "x" + std::to_string(W));
      H /= 2;
      W /= 2;
    }
    StageGeometry g{H, W, cfg.stage_channels(l), cfg.window[0], cfg.window[1], 0, 0};
    if (H % g.wd || W % g.wt)
      throw ConfigError("backbone: stage " + std::to_string(l) + " grid " + std::to_string(H) +
                        "x" + std::to_string(W) + " not divisible by window");
    // a window spanning the whole axis has nothing to shift across
    g.sd = g.wd < H ? g.wd / 2 : 0;
    g.st = g.wt < W ? g.wt / 2 : 0;
    if (cfg.num_heads[l] == 0 || g.C % cfg.num_heads[l])
      throw ConfigError("backbone: heads must divide stage channels at stage " + std::to_string(l));
    if (cfg.depths[l] == 0) throw ConfigError("backbone: zero depth");
    geo.push_back(g);
  }
  return geo;
}

//==============================================================================
// Window index arithmetic

/// For each row of the window-partitioned layout (window-major, then local
/// row-major) the source token index in the H x W grid, after cyclically
/// shifting the grid by (-sd, -st).
inline std::vector<std::size_t> window_partition_index(std::size_t H, std::size_t W,
                                                       std::size_t wd, std::size_t wt,
                                                       std::size_t sd = 0, std::size_t st = 0) {
  if (wd == 0 || wt == 0 || H % wd || W % wt)
    throw ConfigError("window_partition: grid " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by window " + std::to_string(wd) + "x" + std::to_string(wt));
  std::vector<std::size_t> idx;
  idx.reserve(H * W);
  for (std::size_t wi = 0; wi < H / wd; ++wi)
    for (std::size_t wj = 0; wj < W / wt; ++wj)
      for (std::size_t a = 0; a < wd; ++a)
        for (std::size_t b = 0; b < wt; ++b) {
          const std::size_t h = (wi * wd + a + sd) % H;
          const std::size_t w = (wj * wt + b + st) % W;
          idx.push_back(h * W + w);
        }
  return idx;
}

inline std::vector<std::size_t> invert_permutation(const std::vector<std::size_t> &p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

/// Region label of every row of the shifted, window-partitioned layout. Rows
/// whose labels differ were not contiguous before the cyclic shift and must
/// not attend to each other.
inline std::vector<int> shift_region_ids(std::size_t H, std::size_t W, std::size_t wd,
                                         std::size_t wt, std::size_t sd, std::size_t st) {
  auto band = [](std::size_t i, std::size_t n, std::size_t w, std::size_t s) {
    if (i < n - w) return 0;
    if (i < n - s) return 1;
    return 2;
  };
  std::vector<int> ids;
  ids.reserve(H * W);
  for (std::size_t wi = 0; wi < H / wd; ++wi)
    for (std::size_t wj = 0; wj < W / wt; ++wj)
      for (std::size_t a = 0; a < wd; ++a)
        for (std::size_t b = 0; b < wt; ++b) {
          const std::size_t i = wi * wd + a, j = wj * wt + b; // shifted-frame position
          ids.push_back(band(i, H, wd, sd) * 3 + band(j, W, wt, st));
        }
  return ids;
}

/// Splits an [H, W, C] tensor into (H/wd)*(W/wt) windows of [wd, wt, C].
inline std::vector<Tensor> window_partition(const Tensor &x, std::size_t wd, std::size_t wt) {
  if (x.ndim() != 3) throw Error("window_partition: expected [H, W, C]");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const auto idx = window_partition_index(H, W, wd, wt);
  std::vector<Tensor> out;
  const std::size_t per = wd * wt;
  for (std::size_t w = 0; w < idx.size() / per; ++w) {
    Tensor t({wd, wt, C});
    for (std::size_t r = 0; r < per; ++r)
      std::copy_n(x.data.data() + idx[w * per + r] * C, C, t.data.data() + r * C);
    out.push_back(std::move(t));
  }
  return out;
}

/// Inverse of window_partition.
inline Tensor window_reverse(const std::vector<Tensor> &windows, std::size_t H, std::size_t W) {
  if (windows.empty()) throw Error("window_reverse: no windows");
  const std::size_t wd = windows[0].dim(0), wt = windows[0].dim(1), C = windows[0].dim(2);
  const auto idx = window_partition_index(H, W, wd, wt);
  if (windows.size() * wd * wt != H * W) throw Error("window_reverse: window count mismatch");
  Tensor x({H, W, C});
  const std::size_t per = wd * wt;
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (std::size_t r = 0; r < per; ++r)
      std::copy_n(windows[w].data.data() + r * C, C, x.data.data() + idx[w * per + r] * C);
  return x;
}

/// Row indices gathering each 2x2 neighbourhood as (top-left, top-right,
/// bottom-left, bottom-right).
inline std::vector<std::size_t> patch_merge_index(std::size_t H, std::size_t W) {
  if (H % 2 || W % 2) throw ConfigError("patch_merge: grid dimensions must be even");
  std::vector<std::size_t> idx;
  idx.reserve(H * W);
  for (std::size_t i = 0; i < H / 2; ++i)
    for (std::size_t j = 0; j < W / 2; ++j)
      for (auto [di, dj] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}})
        idx.push_back((2 * i + di) * W + 2 * j + dj);
  return idx;
}

//==============================================================================
// Differentiable building blocks

/// [H*W, C] token matrix plus its grid geometry.
struct TokenGrid {
  Var tokens;
  std::size_t H = 0, W = 0, C = 0;
  std::size_t stage_index = 0;
};

/// Options for one forward pass. Dropout only runs when `dropout_rng` is set.
struct ForwardContext {
  Rng *dropout_rng = nullptr;
  std::vector<double> *attention_probs = nullptr; // last attention call, for inspection
};

inline Var dropout(Var x, double p, Rng *rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(ad::val(x).numel());
  for (auto &m : *mask) m = keep(*rng) ? 1.0 / (1.0 - p) : 0.0;
  Tensor out = ad::val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= (*mask)[i];
  return x.g->make(std::move(out), {x}, [x, mask](Graph &g, std::size_t self) {
    const Tensor &gy = g.out_grad(self);
    auto &gx = g.acc(x);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[i] * (*mask)[i];
  });
}

namespace detail {

inline Tensor lecun_normal(std::vector<std::size_t> shape, std::size_t fan_in, Rng &rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  for (auto &v : t.data) v = n(rng);
  return t;
}

inline void add_linear(ParamStore &ps, const std::string &name, std::size_t in, std::size_t out,
                       Rng &rng, bool bias = true) {
  ps.add(name + ".weight", lecun_normal({in, out}, in, rng));
  if (bias) ps.add(name + ".bias", Tensor({out}, 0.0));
}

inline void add_conv(ParamStore &ps, const std::string &name, std::size_t in, std::size_t out,
                     Rng &rng) {
  ps.add(name + ".weight", lecun_normal({3, 3, in, out}, 9 * in, rng));
  ps.add(name + ".bias", Tensor({out}, 0.0));
}

inline void add_layer_norm(ParamStore &ps, const std::string &name, std::size_t c) {
  ps.add(name + ".gamma", Tensor({c}, 1.0));
  ps.add(name + ".beta", Tensor({c}, 0.0));
}

} // namespace detail

inline Var linear_p(Graph &g, const ParamStore &ps, const std::string &name, Var x,
                    bool bias = true) {
  Var w = g.param(ps, name + ".weight");
  if (!bias) return ad::linear(x, w);
  return ad::linear(x, w, g.param(ps, name + ".bias"));
}

inline Var layer_norm_p(Graph &g, const ParamStore &ps, const std::string &name, Var x) {
  return ad::layer_norm(x, g.param(ps, name + ".gamma"), g.param(ps, name + ".beta"), 1e-5);
}

/// Converts a channel-first 3 x D x T view tensor into a channels-last map.
inline Tensor to_channels_last(const Tensor &chw) {
  if (chw.ndim() != 3) throw Error("expected [C, H, W]");
  const std::size_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out({H, W, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) out.data[i * C + c] = chw.data[c * H * W + i];
  return out;
}

/// Standardization applied to observed values in the stem (160 +- 60 mg/dL).
inline constexpr double kStemValueCenter = 160.0 / kGlucoseScale;
inline constexpr double kStemValueScale = 60.0 / kGlucoseScale;

/// Encoder stem input: channels-last. Observed values are standardized
/// (missing cells stay 0) and the positional channel is divided by its value
/// at the origin (= p_dim), so all three channels are O(1).
inline Tensor stem_input(const Tensor &chw) {
  Tensor x = to_channels_last(chw);
  const std::size_t C = x.dim(2);
  if (C != 3) throw Error("stem_input: expected 3 channels");
  const double p = x.data[2];
  for (std::size_t i = 0; i < x.numel(); i += C) {
    if (x.data[i + 1] == 0.0) x.data[i] = (x.data[i] - kStemValueCenter) / kStemValueScale;
    if (p != 0.0) x.data[i + 2] /= p;
  }
  return x;
}

/// Two strided 3x3 convolutions (3 -> C/2 -> C), each followed by GELU.
inline TokenGrid patch_embed(Graph &g, const ParamStore &ps, const Tensor &theta,
                             const BackboneConfig &cfg, const std::string &prefix = "backbone.") {
  if (theta.ndim() != 3 || theta.dim(0) != 3) throw Error("patch_embed: expected a 3 x D x T view");
  const auto geo = stage_geometry(cfg, theta.dim(1), theta.dim(2));
  const auto &[s1, s2] = cfg.patch_embed_strides;
  Var x = g.constant(stem_input(theta));
  x = ad::gelu(ad::conv3x3(x, g.param(ps, prefix + "embed.conv1.weight"),
                           g.param(ps, prefix + "embed.conv1.bias"), s1.d, s1.t));
  x = ad::gelu(ad::conv3x3(x, g.param(ps, prefix + "embed.conv2.weight"),
                           g.param(ps, prefix + "embed.conv2.bias"), s2.d, s2.t));
  const auto &shape = ad::val(x).shape;
  return TokenGrid{ad::reshape(x, {shape[0] * shape[1], shape[2]}), shape[0], shape[1], shape[2], 0};
}

/// Precomputed permutations for one (shifted or regular) attention layout.
struct WindowLayout {
  std::size_t wd = 0, wt = 0, sd = 0, st = 0;
  std::shared_ptr<const std::vector<std::size_t>> forward;  // grid -> windows
  std::shared_ptr<const std::vector<std::size_t>> backward; // windows -> grid
  std::shared_ptr<const std::vector<int>> region;           // null when unshifted

  static WindowLayout make(std::size_t H, std::size_t W, std::size_t wd, std::size_t wt,
                           std::size_t sd, std::size_t st) {
    WindowLayout l{wd, wt, sd, st, nullptr, nullptr, nullptr};
    auto fwd = window_partition_index(H, W, wd, wt, sd, st);
    l.backward = std::make_shared<const std::vector<std::size_t>>(invert_permutation(fwd));
    l.forward = std::make_shared<const std::vector<std::size_t>>(std::move(fwd));
    if (sd || st)
      l.region = std::make_shared<const std::vector<int>>(shift_region_ids(H, W, wd, wt, sd, st));
    return l;
  }
};

/// Windowed multi-head self-attention (shifted when the layout has a shift).
/// `name` is the attention sublayer prefix holding qkv and proj parameters.
inline Var wmsa(Graph &g, const ParamStore &ps, const std::string &name, Var x,
                const WindowLayout &layout, std::size_t heads, const ForwardContext &ctx = {}) {
  Var t = ad::gather_rows(x, layout.forward);
  t = linear_p(g, ps, name + ".qkv", t);
  t = ad::window_attention(t, layout.wd * layout.wt, heads, layout.region, ctx.attention_probs);
  t = linear_p(g, ps, name + ".proj", t);
  return ad::gather_rows(t, layout.backward);
}

/// Convolutional residual branch: one 3x3 same-channel convolution.
inline Var crb(Graph &g, const ParamStore &ps, const std::string &name, const TokenGrid &z) {
  Var x = ad::reshape(z.tokens, {z.H, z.W, z.C});
  x = ad::conv3x3(x, g.param(ps, name + ".weight"), g.param(ps, name + ".bias"));
  return ad::reshape(x, {z.H * z.W, z.C});
}

inline Var mlp(Graph &g, const ParamStore &ps, const std::string &name, Var x, double p_drop,
               const ForwardContext &ctx) {
  Var h = ad::gelu(linear_p(g, ps, name + ".fc1", x));
  h = dropout(h, p_drop, ctx.dropout_rng);
  return linear_p(g, ps, name + ".fc2", h);
}

/// One block: hat = MSA(LN(z)) + CRB(z); out = MLP(LN(hat)) + hat.
inline TokenGrid swin_block(Graph &g, const ParamStore &ps, const std::string &name,
                            const TokenGrid &z, const WindowLayout &layout, std::size_t heads,
                            double p_drop, const ForwardContext &ctx = {}) {
  Var attn = wmsa(g, ps, name + ".attn", layer_norm_p(g, ps, name + ".ln1", z.tokens), layout,
                  heads, ctx);
  attn = dropout(attn, p_drop, ctx.dropout_rng);
  Var hat = ad::add(attn, crb(g, ps, name + ".crb", z));
  Var m = mlp(g, ps, name + ".mlp", layer_norm_p(g, ps, name + ".ln2", hat), p_drop, ctx);
  m = dropout(m, p_drop, ctx.dropout_rng);
  TokenGrid out = z;
  out.tokens = ad::add(m, hat);
  return out;
}

/// Concatenates each 2x2 neighbourhood (4C) and projects linearly to 2C.
inline TokenGrid patch_merge(Graph &g, const ParamStore &ps, const std::string &name,
                             const TokenGrid &z) {
  auto idx = std::make_shared<const std::vector<std::size_t>>(patch_merge_index(z.H, z.W));
  Var t = ad::gather_rows(z.tokens, idx);
  t = ad::reshape(t, {z.H * z.W / 4, 4 * z.C});
  t = linear_p(g, ps, name, t, /*bias=*/false);
  return TokenGrid{t, z.H / 2, z.W / 2, 2 * z.C, z.stage_index + 1};
}

//==============================================================================
// Encoders

/// Common interface of the backbone encoders: parameter initialization and a
/// differentiable map from one composite view to a pooled feature vector.
class Encoder {
public:
  virtual ~Encoder() = default;
  virtual void init_params(ParamStore &ps, Rng &rng) const = 0;
  virtual Var encode(Graph &g, const ParamStore &ps, const Tensor &theta,
                     const ForwardContext &ctx = {}) const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::string kind() const = 0;
};

inline const std::string kBackbonePrefix = "backbone.";

class SwinCrbEncoder final : public Encoder {
public:
  SwinCrbEncoder(BackboneConfig cfg, std::size_t d_days, std::size_t t_slots)
      : cfg_(std::move(cfg)), geo_(stage_geometry(cfg_, d_days, t_slots)), D_(d_days), T_(t_slots) {
    for (const auto &s : geo_) {
      regular_.push_back(WindowLayout::make(s.H, s.W, s.wd, s.wt, 0, 0));
      shifted_.push_back(WindowLayout::make(s.H, s.W, s.wd, s.wt, s.sd, s.st));
    }
  }

  const BackboneConfig &config() const { return cfg_; }
  const std::vector<StageGeometry> &geometry() const { return geo_; }
  std::size_t feature_dim() const override { return cfg_.feature_dim(); }
  std::string kind() const override { return "swin_crb"; }

  static std::string block_name(std::size_t stage, std::size_t pair, std::size_t blk) {
    return kBackbonePrefix + "stage" + std::to_string(stage) + ".pair" + std::to_string(pair) +
           ".blk" + std::to_string(blk);
  }

  void init_params(ParamStore &ps, Rng &rng) const override {
    const std::string p = kBackbonePrefix;
    const std::size_t C = cfg_.embed_dim;
    detail::add_conv(ps, p + "embed.conv1", 3, C / 2, rng);
    detail::add_conv(ps, p + "embed.conv2", C / 2, C, rng);
    for (std::size_t l = 0; l < geo_.size(); ++l) {
      const std::size_t c = geo_[l].C;
      if (l > 0)
        detail::add_linear(ps, p + "stage" + std::to_string(l) + ".merge", 2 * c, c, rng, false);
      const auto hidden = static_cast<std::size_t>(std::lround(cfg_.mlp_ratio * static_cast<double>(c)));
      for (std::size_t b = 0; b < cfg_.depths[l]; ++b)
        for (std::size_t k = 0; k < 2; ++k) {
          const std::string n = block_name(l, b, k);
          detail::add_layer_norm(ps, n + ".ln1", c);
          detail::add_linear(ps, n + ".attn.qkv", c, 3 * c, rng);
          detail::add_linear(ps, n + ".attn.proj", c, c, rng);
          // residual branch starts near identity (Dirac kernel plus noise)
          Tensor w = detail::lecun_normal({3, 3, c, c}, 9 * c, rng);
          for (auto &v : w.data) v *= 0.1;
          for (std::size_t i = 0; i < c; ++i) w.data[(4 * c + i) * c + i] += 1.0;
          ps.add(n + ".crb.weight", std::move(w));
          ps.add(n + ".crb.bias", Tensor({c}, 0.0));
          detail::add_layer_norm(ps, n + ".ln2", c);
          detail::add_linear(ps, n + ".mlp.fc1", c, hidden, rng);
          detail::add_linear(ps, n + ".mlp.fc2", hidden, c, rng);
        }
    }
    detail::add_layer_norm(ps, p + "norm", cfg_.feature_dim());
  }

  /// Runs one block pair (regular then shifted windows).
  TokenGrid block_pair(Graph &g, const ParamStore &ps, const TokenGrid &z, std::size_t stage,
                       std::size_t pair, const ForwardContext &ctx = {}) const {
    const std::size_t heads = cfg_.num_heads.at(stage);
    TokenGrid z1 = swin_block(g, ps, block_name(stage, pair, 0), z, regular_.at(stage), heads,
                              cfg_.p_drop, ctx);
    return swin_block(g, ps, block_name(stage, pair, 1), z1, shifted_.at(stage), heads,
                      cfg_.p_drop, ctx);
  }

  /// Token grid after the last stage (before the final norm and pooling).
  TokenGrid forward_tokens(Graph &g, const ParamStore &ps, const Tensor &theta,
                           const ForwardContext &ctx = {}) const {
    if (theta.ndim() != 3 || theta.dim(1) != D_ || theta.dim(2) != T_)
      throw ConfigError("encoder built for " + std::to_string(D_) + "x" + std::to_string(T_) +
                        " views, got " + shape_str(theta.shape));
    TokenGrid z = patch_embed(g, ps, theta, cfg_, kBackbonePrefix);
    for (std::size_t l = 0; l < geo_.size(); ++l) {
      if (l > 0) z = patch_merge(g, ps, kBackbonePrefix + "stage" + std::to_string(l) + ".merge", z);
      for (std::size_t b = 0; b < cfg_.depths[l]; ++b) z = block_pair(g, ps, z, l, b, ctx);
    }
    return z;
  }

  Var encode(Graph &g, const ParamStore &ps, const Tensor &theta,
             const ForwardContext &ctx = {}) const override {
    TokenGrid z = forward_tokens(g, ps, theta, ctx);
    return ad::mean_rows(layer_norm_p(g, ps, kBackbonePrefix + "norm", z.tokens));
  }

private:
  BackboneConfig cfg_;
  std::vector<StageGeometry> geo_;
  std::vector<WindowLayout> regular_, shifted_;
  std::size_t D_, T_;
};

} // namespace pacd
