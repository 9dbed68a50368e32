#pragma once

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pacd/glycemic.hpp"

namespace pacd {

enum class SamplingPolicy { Random, Aps };
enum class ViewRole { Teacher, Student };

inline const char *to_string(SamplingPolicy p) {
  return p == SamplingPolicy::Random ? "random" : "aps";
}
inline const char *to_string(ViewRole r) {
  return r == ViewRole::Teacher ? "teacher" : "student";
}

/// Binary D x T observation pattern. obs(d,t) == 1 where a reading is kept.
struct ObservationMask {
  Matrix obs;
  double alpha = 0.0;
  SamplingPolicy policy = SamplingPolicy::Random;

  std::size_t observed_count() const {
    return static_cast<std::size_t>(std::count(obs.data.begin(), obs.data.end(), 1.0));
  }
};

/// Number of observed cells for ratio `alpha` on an n-cell grid.
inline std::size_t observation_count(double alpha, std::size_t n_cells) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("observation ratio must lie in (0,1]");
  const long k = round_count(alpha * static_cast<double>(n_cells));
  if (k <= 0) throw ConfigError("observation ratio yields an empty view");
  return static_cast<std::size_t>(k);
}

/// Uniform sampling of round(alpha*D*T) cells without replacement.
inline ObservationMask sample_random(const CgmSample &cgm, double alpha, Rng &rng) {
  const std::size_t n = cgm.grid.size();
  const std::size_t k = observation_count(alpha, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  ObservationMask m{Matrix(cgm.d_days(), cgm.t_slots()), alpha, SamplingPolicy::Random};
  for (std::size_t i = 0; i < k; ++i) m.obs.data[idx[i]] = 1.0;
  return m;
}

/// Per-cell selection weights of the variability-seeking sampler: normalized
/// absolute time-derivative mixed with the uniform distribution.
inline std::vector<double> aps_weights(const CgmSample &cgm, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw ConfigError("APS epsilon must lie in [0,1]");
  const std::size_t D = cgm.d_days(), T = cgm.t_slots(), n = D * T;
  std::vector<double> deriv(n, 0.0);
  double total = 0.0;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t t = 1; t < T; ++t) {
      const double v = std::abs(cgm.grid(d, t) - cgm.grid(d, t - 1));
      deriv[d * T + t] = v;
      total += v;
    }
  const double uniform = 1.0 / static_cast<double>(n);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dn = total > 0.0 ? deriv[i] / total : uniform;
    w[i] = (1.0 - epsilon) * dn + epsilon * uniform;
  }
  return w;
}

/// Weighted sampling without replacement using aps_weights. Once every
/// remaining weight is zero the rest of the draw is uniform.
inline ObservationMask sample_aps(const CgmSample &cgm, double alpha, double epsilon,
                                  Rng &rng) {
  const std::size_t n = cgm.grid.size();
  const std::size_t k = observation_count(alpha, n);
  std::vector<double> w = aps_weights(cgm, epsilon);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ObservationMask m{Matrix(cgm.d_days(), cgm.t_slots()), alpha, SamplingPolicy::Aps};

  double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (std::size_t draw = 0; draw < k; ++draw) {
    std::size_t chosen = n;
    if (total > 0.0) {
      const double u = unif(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (w[i] <= 0.0) continue;
        acc += w[i];
        chosen = i;
        if (u < acc) break;
      }
    }
    if (chosen == n || m.obs.data[chosen] == 1.0) {
      // no weight left: uniform over unselected cells
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (m.obs.data[i] == 0.0) free.push_back(i);
      std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
      chosen = free[pick(rng)];
    }
    m.obs.data[chosen] = 1.0;
    total -= w[chosen];
    w[chosen] = 0.0;
    if (total < 1e-15) {
      total = 0.0;
      for (double x : w) total += x;
    }
  }
  return m;
}

inline constexpr double kGlucoseScale = 400.0;

/// Maps a glucose reading to the value channel: clamp to sensor range, scale
/// by the upper limit. Strictly positive, so 0 can mark a missing cell.
inline double normalize_glucose(double g) {
  return std::clamp(g, 40.0, kGlucoseScale) / kGlucoseScale;
}

inline Matrix make_value_matrix(const CgmSample &cgm, const ObservationMask &obs) {
  if (obs.obs.rows != cgm.d_days() || obs.obs.cols != cgm.t_slots())
    throw ConfigError("make_value_matrix: shape mismatch");
  Matrix v(cgm.d_days(), cgm.t_slots());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (obs.obs.data[i] == 1.0) v.data[i] = normalize_glucose(cgm.grid.data[i]);
  return v;
}

inline Matrix make_missing_mask(const ObservationMask &obs) {
  Matrix m(obs.obs.rows, obs.obs.cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = 1.0 - obs.obs.data[i];
  return m;
}

/// Two-axis sinusoidal encoding summed over its p_dim embedding channels.
inline Matrix positional_encoding(std::size_t d_days, std::size_t t_slots,
                                  std::size_t p_dim) {
  if (p_dim < 2 || p_dim % 2 != 0)
    throw ConfigError("positional_encoding: p_dim must be even and >= 2");
  const std::size_t half = p_dim / 2;
  std::vector<double> freq(half);
  for (std::size_t p = 0; p < half; ++p)
    freq[p] = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(p) /
                                          static_cast<double>(p_dim));
  auto axis = [&](std::size_t n) {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < half; ++p) {
        const double a = static_cast<double>(i) * freq[p];
        s[i] += std::sin(a) + std::cos(a);
      }
    return s;
  };
  const auto day = axis(d_days), time = axis(t_slots);
  Matrix out(d_days, t_slots);
  for (std::size_t i = 0; i < d_days; ++i)
    for (std::size_t j = 0; j < t_slots; ++j) out(i, j) = day[i] + time[j];
  return out;
}

/// One pseudo-SMBG input: channels (value, miss_mask, pos_enc).
struct CompositeView {
  Matrix value;
  Matrix miss_mask;
  Matrix pos_enc;
  ViewRole role = ViewRole::Student;
  std::string source_sample_id;
  double alpha = 0.0;
  SamplingPolicy policy = SamplingPolicy::Random;

  std::size_t d_days() const { return value.rows; }
  std::size_t t_slots() const { return value.cols; }

  /// Channel-first 3 x D x T tensor.
  Tensor to_tensor() const {
    const std::size_t n = value.size();
    Tensor t({3, value.rows, value.cols});
    std::copy(value.data.begin(), value.data.end(), t.data.begin());
    std::copy(miss_mask.data.begin(), miss_mask.data.end(), t.data.begin() + n);
    std::copy(pos_enc.data.begin(), pos_enc.data.end(), t.data.begin() + 2 * n);
    return t;
  }

  /// Glucose readings (mg/dL scale is lost; values are normalized) at
  /// observed cells, in row-major order.
  std::vector<double> observed_normalized() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < value.size(); ++i)
      if (miss_mask.data[i] == 0.0) out.push_back(value.data[i]);
    return out;
  }

  bool operator==(const CompositeView &) const = default;
};

inline CompositeView assemble_view(const CgmSample &cgm, const ObservationMask &obs,
                                   const Matrix &pe, ViewRole role) {
  if (obs.obs.rows != cgm.d_days() || obs.obs.cols != cgm.t_slots() ||
      pe.rows != cgm.d_days() || pe.cols != cgm.t_slots())
    throw ConfigError("assemble_view: shape mismatch");
  return CompositeView{make_value_matrix(cgm, obs), make_missing_mask(obs), pe, role,
                       cgm.sample_id, obs.alpha, obs.policy};
}

struct ViewGenConfig {
  double alpha_t = 0.50;
  std::size_t n_t = 2;
  double alpha_s = 0.03;
  std::size_t n_s = 4;
  double student_policy_mix = 0.5; // probability a student view uses APS
  double epsilon = 0.3;
  std::size_t p_dim = 16;

  void validate() const {
    if (!(alpha_s < alpha_t))
      throw ConfigError("student ratio alpha_s must be smaller than alpha_t");
    if (n_t < 1 || n_s < 1) throw ConfigError("n_t and n_s must be >= 1");
    if (!(student_policy_mix >= 0.0 && student_policy_mix <= 1.0))
      throw ConfigError("student_policy_mix must lie in [0,1]");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0,1]");
  }
};

struct ViewSet {
  std::vector<CompositeView> teacher_views;
  std::vector<CompositeView> student_views;
  TrMetrics label;
};

/// RNG stream for a single view, keyed by (seed, sample, role, view index).
inline Rng view_rng(std::uint64_t seed, const std::string &sample_id, ViewRole role,
                    std::size_t view_index) {
  return make_rng(seed, {hash_string(sample_id), static_cast<std::uint64_t>(role),
                         view_index});
}

/// Student observation pattern: APS with probability `policy_mix`, else random.
inline ObservationMask draw_student_mask(const CgmSample &cgm, double alpha, double policy_mix,
                                         double epsilon, Rng &rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const bool aps = coin(rng) < policy_mix;
  return aps ? sample_aps(cgm, alpha, epsilon, rng) : sample_random(cgm, alpha, rng);
}

/// Glucose values at the observed cells, row-major.
inline std::vector<double> observed_values(const CgmSample &cgm, const ObservationMask &obs) {
  std::vector<double> out;
  for (std::size_t i = 0; i < obs.obs.data.size(); ++i)
    if (obs.obs.data[i] == 1.0) out.push_back(cgm.grid.data[i]);
  return out;
}

inline CompositeView make_student_view(const CgmSample &cgm, double alpha,
                                       double policy_mix, double epsilon,
                                       const Matrix &pe, Rng &rng) {
  return assemble_view(cgm, draw_student_mask(cgm, alpha, policy_mix, epsilon, rng), pe,
                       ViewRole::Student);
}

inline ViewSet generate_view_set(const CgmSample &cgm, const ViewGenConfig &cfg,
                                 std::uint64_t seed, const Thresholds &th = {}) {
  cfg.validate();
  const Matrix pe = positional_encoding(cgm.d_days(), cgm.t_slots(), cfg.p_dim);
  ViewSet vs;
  vs.label = compute_tr(cgm, th);
  vs.teacher_views.reserve(cfg.n_t);
  for (std::size_t i = 0; i < cfg.n_t; ++i) {
    Rng rng = view_rng(seed, cgm.sample_id, ViewRole::Teacher, i);
    vs.teacher_views.push_back(
        assemble_view(cgm, sample_random(cgm, cfg.alpha_t, rng), pe, ViewRole::Teacher));
  }
  vs.student_views.reserve(cfg.n_s);
  for (std::size_t j = 0; j < cfg.n_s; ++j) {
    Rng rng = view_rng(seed, cgm.sample_id, ViewRole::Student, j);
    vs.student_views.push_back(
        make_student_view(cgm, cfg.alpha_s, cfg.student_policy_mix, cfg.epsilon, pe, rng));
  }
  return vs;
}

/// Debug dump: `<stem>.bin` holds the 3 x D x T tensor as little-endian
/// float64, `<stem>.json` the metadata sidecar.
inline void write_view_dump(const CompositeView &view, const std::filesystem::path &stem,
                            std::uint64_t seed) {
  static_assert(std::endian::native == std::endian::little,
                "view dump assumes a little-endian host");
  const Tensor t = view.to_tensor();
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem.string() + ".bin");
  bin.write(reinterpret_cast<const char *>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  nlohmann::json meta = {{"sample_id", view.source_sample_id},
                         {"role", to_string(view.role)},
                         {"alpha", view.alpha},
                         {"policy", to_string(view.policy)},
                         {"seed", seed},
                         {"shape", {3, view.d_days(), view.t_slots()}},
                         {"dtype", "float64"}};
  std::ofstream js(stem.string() + ".json");
  if (!js) throw IoError("cannot write " + stem.string() + ".json");
  js << meta.dump(2) << '\n';
}

} // namespace pacd
