#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "pacd/pacd.hpp"

namespace testutil {

using pacd::Tensor;

inline Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto &x : t.data) x = n(rng);
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_grad(const std::function<double(const Tensor &)> &f, Tensor x,
                                        double h = 1e-5) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = x.data[i];
    x.data[i] = keep + h;
    const double fp = f(x);
    x.data[i] = keep - h;
    const double fm = f(x);
    x.data[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// Largest relative error, ignoring entries where both gradients are tiny.
inline double max_rel_err(const std::vector<double> &a, const std::vector<double> &b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    const double s = std::max(std::abs(a[i]), std::abs(b[i]));
    if (s < floor) {
      worst = std::max(worst, d / floor);
      continue;
    }
    worst = std::max(worst, d / s);
  }
  return worst;
}

inline pacd::CgmSample constant_sample(std::size_t D, std::size_t T, double g, std::string id = "a",
                                       std::string subject = "p") {
  return pacd::validate_cgm(pacd::Matrix(D, T, g), D, T, std::move(id), std::move(subject));
}

} // namespace testutil
