#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "pacd/glycemic.hpp"

namespace pacd {

struct Dataset {
  std::vector<CgmSample> samples;
  std::vector<TrMetrics> labels;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  void push_back(CgmSample s, const Thresholds &th = {}) {
    labels.push_back(compute_tr(s, th));
    samples.push_back(std::move(s));
  }

  std::set<std::string> subject_ids() const {
    std::set<std::string> ids;
    for (const auto &s : samples) ids.insert(s.subject_id);
    return ids;
  }

  bool operator==(const Dataset &) const = default;
};

/// Recomputes every label from its grid and checks the dataset invariants.
inline void check_dataset(const Dataset &ds, const Thresholds &th = {}) {
  if (ds.samples.size() != ds.labels.size())
    throw Error("dataset: label count does not match sample count");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!(compute_tr(ds.samples[i], th) == ds.labels[i]))
      throw Error("dataset: stored label does not match grid for sample " +
                  ds.samples[i].sample_id);
  }
}

//==============================================================================
// Synthetic CGM generator

struct IntRange {
  int lo = 0;
  int hi = 0;
};
struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Parameters of the synthetic CGM surrogate: a mean-reverting baseline with
/// meal and hypoglycemic excursions plus white sensor noise.
struct SynthConfig {
  std::size_t n_samples = 64;
  std::size_t d_days = 7;
  std::size_t t_slots = kDefaultSlotsPerDay;
  double baseline_mean = 140.0;
  double baseline_sd = 30.0;    // stationary sd of the baseline process
  IntRange meal_count_per_day{2, 4};
  RealRange meal_amplitude{30.0, 120.0};
  double excursion_decay = 12.0; // slots to excursion peak
  double noise_sd = 4.0;
  double hypo_event_rate = 0.3;  // probability per day
  RealRange hypo_amplitude{40.0, 90.0};
  double reversion_slots = 288.0; // baseline mean-reversion time constant
  std::size_t samples_per_subject = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 1 || d_days < 1 || t_slots < 1 || samples_per_subject < 1)
      throw ConfigError("synth: counts must be >= 1");
    if (baseline_sd < 0 || noise_sd < 0 || meal_amplitude.lo < 0 ||
        meal_amplitude.hi < meal_amplitude.lo || hypo_amplitude.lo < 0 ||
        hypo_amplitude.hi < hypo_amplitude.lo)
      throw ConfigError("synth: sd and amplitude values must be >= 0");
    if (meal_count_per_day.lo < 0 || meal_count_per_day.hi < meal_count_per_day.lo)
      throw ConfigError("synth: invalid meal_count_per_day range");
    if (!(hypo_event_rate >= 0.0 && hypo_event_rate <= 1.0))
      throw ConfigError("synth: hypo_event_rate must lie in [0,1]");
    if (!(excursion_decay > 0.0) || !(reversion_slots >= 1.0))
      throw ConfigError("synth: excursion_decay and reversion_slots must be positive");
    if (!(baseline_mean > 0.0)) throw ConfigError("synth: baseline_mean must be > 0");
  }
};

inline constexpr double kSensorMin = 40.0;
inline constexpr double kSensorMax = 400.0;

namespace detail {

// Alpha-function excursion: exponential rise to `amplitude` at u == tau, then
// exponential decay.
inline void add_excursion(std::vector<double> &trace, std::size_t onset,
                          double amplitude, double tau) {
  const auto span = static_cast<std::size_t>(std::ceil(10.0 * tau));
  for (std::size_t u = 0; u <= span && onset + u < trace.size(); ++u) {
    const double x = static_cast<double>(u) / tau;
    trace[onset + u] += amplitude * x * std::exp(1.0 - x);
  }
}

inline CgmSample synth_one(const SynthConfig &cfg, std::size_t index) {
  Rng rng = make_rng(cfg.seed, {0x53594E54ULL, index});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const std::size_t n = cfg.d_days * cfg.t_slots;
  std::vector<double> trace(n);

  const double theta = 1.0 / cfg.reversion_slots;
  const double step_sd =
      cfg.baseline_sd * std::sqrt(1.0 - (1.0 - theta) * (1.0 - theta));
  double x = cfg.baseline_mean + cfg.baseline_sd * normal(rng);
  for (std::size_t i = 0; i < n; ++i) {
    trace[i] = x;
    x += theta * (cfg.baseline_mean - x) + step_sd * normal(rng);
  }

  std::uniform_int_distribution<int> meal_count(cfg.meal_count_per_day.lo,
                                                cfg.meal_count_per_day.hi);
  std::uniform_int_distribution<std::size_t> slot(0, cfg.t_slots - 1);
  for (std::size_t d = 0; d < cfg.d_days; ++d) {
    const int meals = meal_count(rng);
    for (int m = 0; m < meals; ++m) {
      const std::size_t onset = d * cfg.t_slots + slot(rng);
      const double amp = cfg.meal_amplitude.lo +
                         (cfg.meal_amplitude.hi - cfg.meal_amplitude.lo) * unif(rng);
      add_excursion(trace, onset, amp, cfg.excursion_decay);
    }
    if (unif(rng) < cfg.hypo_event_rate) {
      const std::size_t onset = d * cfg.t_slots + slot(rng);
      const double amp = cfg.hypo_amplitude.lo +
                         (cfg.hypo_amplitude.hi - cfg.hypo_amplitude.lo) * unif(rng);
      add_excursion(trace, onset, -amp, cfg.excursion_decay);
    }
  }

  Matrix grid(cfg.d_days, cfg.t_slots);
  for (std::size_t i = 0; i < n; ++i) {
    const double noisy = trace[i] + cfg.noise_sd * normal(rng);
    grid.data[i] = std::clamp(noisy, kSensorMin, kSensorMax);
  }
  const std::size_t subject = index / cfg.samples_per_subject;
  return validate_cgm(std::move(grid), cfg.d_days, cfg.t_slots,
                      "s" + std::to_string(index), "subj" + std::to_string(subject));
}

} // namespace detail

/// Generates a labelled synthetic dataset. Sample i draws from its own stream
/// derived from (seed, i), so the output is independent of generation order.
inline Dataset synth_cgm(const SynthConfig &cfg, const Thresholds &th = {}) {
  cfg.validate();
  Dataset ds;
  ds.samples.reserve(cfg.n_samples);
  ds.labels.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i)
    ds.push_back(detail::synth_one(cfg, i), th);
  return ds;
}

//==============================================================================
// CSV ingestion

inline constexpr std::string_view kCgmCsvHeader =
    "sample_id,subject_id,day,slot,glucose_mgdl";

struct MissingCell {
  std::string sample_id;
  std::size_t day;
  std::size_t slot;
  bool operator==(const MissingCell &) const = default;
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::vector<std::string> rejected_samples;
  std::vector<MissingCell> missing_cells;
};

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

} // namespace detail

/// Reads `sample_id,subject_id,day,slot,glucose_mgdl` rows into complete
/// D x T grids. Samples with missing cells are dropped and listed in `report`.
inline Dataset load_cgm_csv(std::istream &in, std::size_t d_days,
                            std::size_t t_slots, LoadReport *report = nullptr,
                            const Thresholds &th = {}) {
  struct Partial {
    std::string subject_id;
    Matrix grid;
    std::vector<char> seen;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Partial> partial;
  LoadReport local;

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty file, missing header", 1);
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCgmCsvHeader) throw ParseError("unexpected header '" + line + "'", 1);

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 5) throw ParseError("expected 5 fields", lineno);
    const auto day = detail::parse_number<std::size_t>(f[2]);
    const auto slot = detail::parse_number<std::size_t>(f[3]);
    const auto g = detail::parse_number<double>(f[4]);
    if (f[0].empty()) throw ParseError("empty sample_id", lineno);
    if (!day || !slot) throw ParseError("malformed day/slot", lineno);
    if (!g) throw ParseError("malformed glucose value '" + std::string(f[4]) + "'", lineno);
    if (*day >= d_days || *slot >= t_slots)
      throw ParseError("day/slot out of range", lineno);
    if (!std::isfinite(*g) || *g <= 0.0 || *g > kMaxPlausibleGlucose)
      throw ParseError("implausible glucose value '" + std::string(f[4]) + "'", lineno);

    std::string sid(f[0]);
    auto it = partial.find(sid);
    if (it == partial.end()) {
      order.push_back(sid);
      it = partial
               .emplace(sid, Partial{std::string(f[1]), Matrix(d_days, t_slots),
                                     std::vector<char>(d_days * t_slots, 0)})
               .first;
    } else if (it->second.subject_id != f[1]) {
      throw ParseError("sample '" + sid + "' has conflicting subject_id", lineno);
    }
    const std::size_t cell = *day * t_slots + *slot;
    if (it->second.seen[cell])
      throw ParseError("duplicate cell for sample '" + sid + "'", lineno);
    it->second.seen[cell] = 1;
    it->second.grid.data[cell] = *g;
    ++local.rows_read;
  }

  Dataset ds;
  for (const auto &sid : order) {
    auto &p = partial.at(sid);
    bool complete = true;
    for (std::size_t c = 0; c < p.seen.size(); ++c) {
      if (!p.seen[c]) {
        complete = false;
        local.missing_cells.push_back({sid, c / t_slots, c % t_slots});
      }
    }
    if (!complete) {
      local.rejected_samples.push_back(sid);
      continue;
    }
    ds.push_back(validate_cgm(std::move(p.grid), d_days, t_slots, sid, p.subject_id), th);
  }
  if (report) *report = std::move(local);
  return ds;
}

inline Dataset load_cgm_csv(const std::filesystem::path &path, std::size_t d_days,
                            std::size_t t_slots, LoadReport *report = nullptr,
                            const Thresholds &th = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return load_cgm_csv(in, d_days, t_slots, report, th);
}

inline void write_cgm_csv(std::ostream &out, const Dataset &ds) {
  out << kCgmCsvHeader << '\n';
  for (const auto &s : ds.samples)
    for (std::size_t d = 0; d < s.d_days(); ++d)
      for (std::size_t t = 0; t < s.t_slots(); ++t)
        out << s.sample_id << ',' << s.subject_id << ',' << d << ',' << t << ','
            << detail::format_double(s.grid(d, t)) << '\n';
}

inline void write_cgm_csv(const std::filesystem::path &path, const Dataset &ds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_cgm_csv(out, ds);
}

inline nlohmann::json dataset_manifest(const Dataset &ds) {
  double tar = 0, tir = 0, tbr = 0;
  for (const auto &l : ds.labels) {
    tar += l.tar;
    tir += l.tir;
    tbr += l.tbr;
  }
  const double n = ds.empty() ? 1.0 : static_cast<double>(ds.size());
  return {{"n_samples", ds.size()},
          {"d_days", ds.empty() ? 0 : ds.samples.front().d_days()},
          {"t_slots", ds.empty() ? 0 : ds.samples.front().t_slots()},
          {"label_summary",
           {{"mean_tar", tar / n}, {"mean_tir", tir / n}, {"mean_tbr", tbr / n}}}};
}

//==============================================================================
// Subject-level splitting

/// Partitions subjects (not samples) into train/validation. Samples keep their
/// original relative order on each side.
inline std::pair<Dataset, Dataset> split_subjects(const Dataset &ds, double val_fraction,
                                                  std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("split_subjects: val_fraction must lie in (0,1)");
  std::vector<std::string> subjects;
  std::set<std::string> seen;
  for (const auto &s : ds.samples) {
    if (s.subject_id.empty()) throw Error("split_subjects: sample without subject_id");
    if (seen.insert(s.subject_id).second) subjects.push_back(s.subject_id);
  }
  if (subjects.size() < 2) throw Error("split_subjects: need at least 2 subjects");

  Rng rng = make_rng(seed, {0x53504C54ULL});
  std::shuffle(subjects.begin(), subjects.end(), rng);
  const auto n = static_cast<long>(subjects.size());
  const long n_val = std::clamp(round_count(val_fraction * static_cast<double>(n)), 1L, n - 1);
  const std::set<std::string> val_ids(subjects.begin(), subjects.begin() + n_val);

  Dataset train, val;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto &dst = val_ids.count(ds.samples[i].subject_id) ? val : train;
    dst.samples.push_back(ds.samples[i]);
    dst.labels.push_back(ds.labels[i]);
  }
  return {std::move(train), std::move(val)};
}

/// Appends a seeded subject-level fraction of `extra` to `base`. Models the
/// "all of cohort A plus part of cohort B" training mix.
inline Dataset mix_datasets(const Dataset &base, const Dataset &extra,
                            double extra_fraction, std::uint64_t seed) {
  if (!(extra_fraction >= 0.0 && extra_fraction <= 1.0))
    throw ConfigError("mix_datasets: fraction must lie in [0,1]");
  Dataset out = base;
  if (extra.empty() || extra_fraction == 0.0) return out;
  if (extra_fraction == 1.0) {
    out.samples.insert(out.samples.end(), extra.samples.begin(), extra.samples.end());
    out.labels.insert(out.labels.end(), extra.labels.begin(), extra.labels.end());
    return out;
  }
  auto [rest, picked] = split_subjects(extra, extra_fraction, seed);
  out.samples.insert(out.samples.end(), picked.samples.begin(), picked.samples.end());
  out.labels.insert(out.labels.end(), picked.labels.begin(), picked.labels.end());
  return out;
}

} // namespace pacd
