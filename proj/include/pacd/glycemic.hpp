#pragma once

#include <array>
#include <span>
#include <string>

#include "pacd/common.hpp"

namespace pacd {

/// Glucose range thresholds in mg/dL. Readings in [tau_low, tau_high] are in
/// range; the bounds themselves count as in range.
struct Thresholds {
  double tau_low = 70.0;
  double tau_high = 180.0;

  void validate() const {
    if (!(tau_low > 0.0 && tau_low < tau_high))
      throw ConfigError("thresholds require 0 < tau_low < tau_high");
  }
};

/// Time-above/in/below range fractions. Always a point on the 3-simplex.
struct TrMetrics {
  double tar = 0.0;
  double tir = 0.0;
  double tbr = 0.0;

  std::array<double, 3> as_array() const { return {tar, tir, tbr}; }
  static TrMetrics from_array(const std::array<double, 3> &a) {
    return {a[0], a[1], a[2]};
  }
  double sum() const { return tar + tir + tbr; }
  bool operator==(const TrMetrics &) const = default;
};

inline constexpr std::array<const char *, 3> kTrNames = {"tar", "tir", "tbr"};

inline constexpr double kMaxPlausibleGlucose = 1000.0;
inline constexpr std::size_t kDefaultSlotsPerDay = 288;

/// One complete CGM observation window: a D x T grid of glucose values.
struct CgmSample {
  std::string sample_id;
  std::string subject_id;
  Matrix grid; // d_days x t_slots, mg/dL

  std::size_t d_days() const { return grid.rows; }
  std::size_t t_slots() const { return grid.cols; }
  bool operator==(const CgmSample &) const = default;
};

/// Checks shape and value plausibility. Reports the first offending cell.
inline CgmSample validate_cgm(Matrix raw_grid, std::size_t d_days,
                              std::size_t t_slots, std::string sample_id = {},
                              std::string subject_id = {}) {
  if (d_days == 0 || t_slots == 0)
    throw ValidationError("grid dimensions must be positive");
  if (raw_grid.rows != d_days || raw_grid.cols != t_slots ||
      raw_grid.data.size() != d_days * t_slots)
    throw ValidationError("grid shape " + std::to_string(raw_grid.rows) + "x" +
                          std::to_string(raw_grid.cols) + " does not match " +
                          std::to_string(d_days) + "x" + std::to_string(t_slots));
  for (std::size_t d = 0; d < d_days; ++d) {
    for (std::size_t t = 0; t < t_slots; ++t) {
      const double g = raw_grid(d, t);
      if (!std::isfinite(g) || g <= 0.0 || g > kMaxPlausibleGlucose) {
        throw ValidationError("invalid glucose value at (" + std::to_string(d) +
                                  "," + std::to_string(t) + ")",
                              static_cast<long>(d), static_cast<long>(t));
      }
    }
  }
  return CgmSample{std::move(sample_id), std::move(subject_id),
                   std::move(raw_grid)};
}

inline CgmSample validate_cgm(Matrix raw_grid) {
  const auto r = raw_grid.rows, c = raw_grid.cols;
  return validate_cgm(std::move(raw_grid), r, c);
}

namespace detail {

inline TrMetrics count_tr(std::span<const double> values, const Thresholds &th) {
  std::size_t above = 0, below = 0, in = 0;
  for (double g : values) {
    if (g > th.tau_high)
      ++above;
    else if (g < th.tau_low)
      ++below;
    else
      ++in;
  }
  const double n = static_cast<double>(values.size());
  return {static_cast<double>(above) / n, static_cast<double>(in) / n,
          static_cast<double>(below) / n};
}

} // namespace detail

/// TR fractions over every cell of a complete CGM grid.
inline TrMetrics compute_tr(const CgmSample &cgm, const Thresholds &th = {}) {
  th.validate();
  for (std::size_t i = 0; i < cgm.grid.data.size(); ++i) {
    const double g = cgm.grid.data[i];
    if (!std::isfinite(g) || g <= 0.0) {
      const auto c = cgm.grid.cols ? cgm.grid.cols : 1;
      throw ValidationError("invalid glucose value in CGM grid",
                            static_cast<long>(i / c), static_cast<long>(i % c));
    }
  }
  if (cgm.grid.data.empty()) throw ValidationError("empty CGM grid");
  return detail::count_tr(cgm.grid.data, th);
}

/// TR fractions computed only over sparse observed readings, with no temporal
/// interpolation.
inline TrMetrics no_interp_baseline(std::span<const double> observed_values,
                                    const Thresholds &th = {}) {
  th.validate();
  if (observed_values.empty())
    throw Error("no_interp_baseline: no observed values, baseline undefined");
  for (double g : observed_values)
    if (!std::isfinite(g) || g <= 0.0)
      throw ValidationError("no_interp_baseline: invalid glucose value");
  return detail::count_tr(observed_values, th);
}

} // namespace pacd
