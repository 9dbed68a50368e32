#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "json.hpp"
#include "pacd/glycemic.hpp"

namespace pacd {

/// Regression quality of TR predictions. Index order is (tar, tir, tbr).
/// R^2 is undefined (nullopt) for a metric whose ground truth has zero
/// variance; overall R^2 averages the defined entries only.
struct EvalReport {
  std::array<double, 3> rmse{};
  std::array<double, 3> mae{};
  std::array<std::optional<double>, 3> r2{};
  double overall_rmse = 0.0;
  std::optional<double> overall_r2;
  std::size_t undefined_r2 = 0;
  std::size_t n_samples = 0;
};

inline EvalReport metric_suite(const std::vector<TrMetrics> &preds,
                               const std::vector<TrMetrics> &truths) {
  if (preds.size() != truths.size()) throw Error("metric_suite: length mismatch");
  if (truths.size() < 2) throw Error("metric_suite: need at least 2 samples");
  const std::size_t n = truths.size();
  const double nd = static_cast<double>(n);
  EvalReport r;
  r.n_samples = n;
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (const auto &t : truths) mean += t.as_array()[j];
    mean /= nd;
    double sse = 0.0, sae = 0.0, sst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = truths[i].as_array()[j], yh = preds[i].as_array()[j];
      sse += (y - yh) * (y - yh);
      sae += std::abs(y - yh);
      sst += (y - mean) * (y - mean);
    }
    r.rmse[j] = std::sqrt(sse / nd);
    r.mae[j] = sae / nd;
    if (sst > 0.0)
      r.r2[j] = 1.0 - sse / sst;
    else
      ++r.undefined_r2;
  }
  r.overall_rmse = (r.rmse[0] + r.rmse[1] + r.rmse[2]) / 3.0;
  double s = 0.0;
  std::size_t k = 0;
  for (const auto &v : r.r2)
    if (v) {
      s += *v;
      ++k;
    }
  if (k > 0) r.overall_r2 = s / static_cast<double>(k);
  return r;
}

inline nlohmann::json to_json(const EvalReport &r) {
  nlohmann::json j;
  j["n_samples"] = r.n_samples;
  j["overall_rmse"] = r.overall_rmse;
  j["overall_r2"] = r.overall_r2 ? nlohmann::json(*r.overall_r2) : nlohmann::json("undefined");
  j["undefined_r2"] = r.undefined_r2;
  for (std::size_t m = 0; m < 3; ++m) {
    j[kTrNames[m]] = {{"rmse", r.rmse[m]},
                      {"mae", r.mae[m]},
                      {"r2", r.r2[m] ? nlohmann::json(*r.r2[m]) : nlohmann::json("undefined")}};
  }
  return j;
}

} // namespace pacd
