#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pacd/swin_crb.hpp"

namespace pacd {

/// Plain convolutional baseline for the ablation study: four blocks of
/// 3x3 conv (time stride 2) + layer norm + GELU, then global average pooling.
class CnnEncoder final : public Encoder {
public:
  explicit CnnEncoder(std::vector<std::size_t> channels) : channels_(std::move(channels)) {
    if (channels_.size() != 4) throw ConfigError("cnn encoder: expects 4 block widths");
    for (auto c : channels_)
      if (c == 0) throw ConfigError("cnn encoder: zero width");
  }

  std::size_t feature_dim() const override { return channels_.back(); }
  std::string kind() const override { return "cnn"; }
  const std::vector<std::size_t> &channels() const { return channels_; }

  static std::size_t param_count(const std::vector<std::size_t> &ch) {
    std::size_t n = 0, in = 3;
    for (auto c : ch) {
      n += 9 * in * c + c + 2 * c;
      in = c;
    }
    return n;
  }

  /// Widths {w, w, w, w} whose parameter count is closest to `budget`.
  static std::vector<std::size_t> matched_channels(std::size_t budget) {
    std::vector<std::size_t> best{1, 1, 1, 1};
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t w = 1; w <= 1024; ++w) {
      std::vector<std::size_t> ch(4, w);
      const double err = std::abs(static_cast<double>(param_count(ch)) - static_cast<double>(budget));
      if (err < best_err) {
        best_err = err;
        best = ch;
      }
    }
    return best;
  }

  void init_params(ParamStore &ps, Rng &rng) const override {
    std::size_t in = 3;
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      const std::string n = kBackbonePrefix + "cnn" + std::to_string(i);
      detail::add_conv(ps, n + ".conv", in, channels_[i], rng);
      detail::add_layer_norm(ps, n + ".ln", channels_[i]);
      in = channels_[i];
    }
  }

  Var encode(Graph &g, const ParamStore &ps, const Tensor &theta,
             const ForwardContext & = {}) const override {
    Var x = g.constant(stem_input(theta));
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      const std::string n = kBackbonePrefix + "cnn" + std::to_string(i);
      x = ad::conv3x3(x, g.param(ps, n + ".conv.weight"), g.param(ps, n + ".conv.bias"), 1, 2);
      const auto s = ad::val(x).shape;
      Var t = ad::reshape(x, {s[0] * s[1], s[2]});
      t = ad::gelu(layer_norm_p(g, ps, n + ".ln", t));
      x = ad::reshape(t, s);
    }
    const auto s = ad::val(x).shape;
    return ad::mean_rows(ad::reshape(x, {s[0] * s[1], s[2]}));
  }

private:
  std::vector<std::size_t> channels_;
};

} // namespace pacd
