#pragma once

#include <cmath>
#include <vector>

#include "pacd/autograd.hpp"

namespace pacd {

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// only (ndim >= 2), not to biases or norm scales.
struct AdamW {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::size_t t = 0;
  std::vector<Tensor> m, v;

  void step(ad::ParamStore &ps, const ad::Grads &grads) {
    if (grads.size() != ps.size()) throw Error("AdamW: gradient count mismatch");
    if (m.size() != ps.size()) {
      m.clear();
      v.clear();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        m.emplace_back(ps.value(i).shape, 0.0);
        v.emplace_back(ps.value(i).shape, 0.0);
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (grads[i].data.empty()) continue;
      Tensor &p = ps.value(i);
      const bool decay = p.ndim() >= 2 && weight_decay > 0.0;
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double g = grads[i].data[k];
        m[i].data[k] = beta1 * m[i].data[k] + (1.0 - beta1) * g;
        v[i].data[k] = beta2 * v[i].data[k] + (1.0 - beta2) * g * g;
        if (decay) p.data[k] -= lr * weight_decay * p.data[k];
        p.data[k] -= lr * (m[i].data[k] / bc1) / (std::sqrt(v[i].data[k] / bc2) + eps);
      }
    }
  }
};

inline double global_norm(const ad::Grads &grads) {
  double s = 0.0;
  for (const auto &g : grads)
    for (double x : g.data) s += x * x;
  return std::sqrt(s);
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(ad::Grads &grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0.0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto &g : grads)
      for (double &x : g.data) x *= s;
  }
  return n;
}

} // namespace pacd
