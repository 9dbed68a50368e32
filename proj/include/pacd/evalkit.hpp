#pragma once

// Evaluation, the no-interpolation baseline, experiment sweeps and exports.

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pacd/trainer.hpp"

namespace pacd {

struct PredictionRow {
  std::string sample_id;
  TrMetrics truth;
  TrMetrics prediction;
  bool operator==(const PredictionRow &) const = default;
};
using PredictionTable = std::vector<PredictionRow>;

struct Evaluation {
  EvalReport report;
  PredictionTable table;
};

inline PredictionTable make_table(const Dataset &ds, const std::vector<TrMetrics> &preds) {
  if (preds.size() != ds.size()) throw Error("prediction count does not match dataset");
  PredictionTable t;
  t.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    t.push_back({ds.samples[i].sample_id, ds.labels[i], preds[i]});
  return t;
}

inline Evaluation evaluate_model(const PacdModel &model, const ParamStore &student,
                                 const Dataset &ds, const EvalViewConfig &ev) {
  const auto preds = predict_dataset(model, student, ds, ev);
  return {metric_suite(preds, ds.labels), make_table(ds, preds)};
}

inline Evaluation evaluate_model(const Checkpoint &ck, const Dataset &ds, const EvalViewConfig &ev) {
  const PacdModel model(ck.spec);
  return evaluate_model(model, ck.student, ds, ev);
}

//==============================================================================
// No-Interp baseline

struct BaselineResult {
  EvalReport report;
  PredictionTable table;
  std::vector<std::string> excluded; // samples whose view had no observed points
};

/// TR computed directly over the observed points of one sparse student-style
/// view per sample. The views are the same ones the model is evaluated on.
inline BaselineResult run_baseline(const Dataset &ds, const EvalViewConfig &ev,
                                   const Thresholds &th = {}) {
  th.validate();
  BaselineResult res;
  std::vector<TrMetrics> preds, truths;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const CgmSample &s = ds.samples[i];
    if (round_count(ev.alpha * static_cast<double>(s.grid.data.size())) <= 0) {
      res.excluded.push_back(s.sample_id);
      continue;
    }
    Rng rng = view_rng(ev.seed, s.sample_id, ViewRole::Student, 0);
    const auto obs = draw_student_mask(s, ev.alpha, ev.policy_mix, ev.epsilon, rng);
    const auto values = observed_values(s, obs);
    if (values.empty()) {
      res.excluded.push_back(s.sample_id);
      continue;
    }
    const TrMetrics p = no_interp_baseline(values, th);
    preds.push_back(p);
    truths.push_back(ds.labels[i]);
    res.table.push_back({s.sample_id, ds.labels[i], p});
  }
  res.report = metric_suite(preds, truths);
  return res;
}

inline BaselineResult run_baseline(const Dataset &ds, double alpha_s, std::uint64_t seed,
                                   double policy_mix = 0.5, double epsilon = 0.3) {
  EvalViewConfig ev;
  ev.alpha = alpha_s;
  ev.seed = seed;
  ev.policy_mix = policy_mix;
  ev.epsilon = epsilon;
  return run_baseline(ds, ev);
}

//==============================================================================
// Bias direction

/// One-sided exact sign test of H1: positive differences dominate.
/// Zero differences are dropped.
struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};

/// P(X >= k) for X ~ Binomial(n, 1/2).
inline double binomial_upper_tail(std::size_t k, std::size_t n) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  const double ln2 = std::log(2.0);
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (std::size_t i = k; i <= n; ++i) {
    const double t = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                     static_cast<double>(n) * ln2;
    terms.push_back(t);
    mx = std::max(mx, t);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return std::min(1.0, std::exp(mx) * s);
}

inline SignTest sign_test(const std::vector<double> &diffs) {
  SignTest t;
  for (double d : diffs) {
    if (d > 0.0) ++t.positive;
    else if (d < 0.0) ++t.negative;
    else ++t.ties;
  }
  t.p_value = binomial_upper_tail(t.positive, t.positive + t.negative);
  return t;
}

/// Mean signed error (prediction - truth) per metric and sign tests for
/// TAR overestimation, TIR underestimation and TBR overestimation.
struct BiasSummary {
  std::array<double, 3> mean_bias{};
  SignTest tar_over;
  SignTest tir_under;
  SignTest tbr_over;
};

inline BiasSummary bias_summary(const PredictionTable &table) {
  if (table.empty()) throw Error("bias_summary: empty table");
  BiasSummary b;
  std::array<std::vector<double>, 3> d;
  for (const auto &r : table) {
    const auto p = r.prediction.as_array(), y = r.truth.as_array();
    for (std::size_t m = 0; m < 3; ++m) {
      d[m].push_back(p[m] - y[m]);
      b.mean_bias[m] += p[m] - y[m];
    }
  }
  for (auto &m : b.mean_bias) m /= static_cast<double>(table.size());
  b.tar_over = sign_test(d[0]);
  std::vector<double> tir_neg(d[1].size());
  for (std::size_t i = 0; i < tir_neg.size(); ++i) tir_neg[i] = -d[1][i];
  b.tir_under = sign_test(tir_neg);
  b.tbr_over = sign_test(d[2]);
  return b;
}

inline json to_json(const SignTest &t) {
  return {{"positive", t.positive}, {"negative", t.negative}, {"ties", t.ties}, {"p_value", t.p_value}};
}

inline json to_json(const BiasSummary &b) {
  return {{"mean_bias", {{"tar", b.mean_bias[0]}, {"tir", b.mean_bias[1]}, {"tbr", b.mean_bias[2]}}},
          {"tar_over", to_json(b.tar_over)},
          {"tir_under", to_json(b.tir_under)},
          {"tbr_over", to_json(b.tbr_over)}};
}

//==============================================================================
// Experiments

/// Data + model + training settings shared by every run of a sweep.
struct ExperimentConfig {
  SynthConfig data;
  double val_fraction = 0.2;
  TrainConfig train;
  BackboneConfig backbone;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

inline void to_json(json &j, const ExperimentConfig &c) {
  j = {{"data", c.data},
       {"val_fraction", c.val_fraction},
       {"train", c.train},
       {"backbone", c.backbone},
       {"seeds", c.seeds}};
}

inline void from_json(const json &j, ExperimentConfig &c) {
  detail::reject_unknown(j, {"data", "val_fraction", "train", "backbone", "seeds"}, "experiment config");
  detail::read(j, "data", c.data);
  detail::read(j, "val_fraction", c.val_fraction);
  detail::read(j, "train", c.train);
  detail::read(j, "backbone", c.backbone);
  detail::read(j, "seeds", c.seeds);
}

/// Synthetic dataset and its subject-disjoint split.
inline std::pair<Dataset, Dataset> experiment_data(const ExperimentConfig &c) {
  return split_subjects(synth_cgm(c.data), c.val_fraction, c.data.seed);
}

struct RunOutcome {
  std::uint64_t seed = 0;
  EvalReport report;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
  double final_train_loss = 0.0;
};

struct RunStats {
  double mean = 0.0;
  double sd = 0.0; // sample sd, 0 for a single run
};

inline RunStats run_stats(const std::vector<double> &xs) {
  RunStats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return s;
}

/// Per-seed training config: evaluation views follow the seed as well.
inline TrainConfig seeded(const TrainConfig &base, std::uint64_t seed) {
  TrainConfig c = base;
  c.seed = seed;
  c.eval_seed = derive_seed(base.eval_seed, {seed});
  return c;
}

/// One hermetic fit + evaluate.
inline RunOutcome run_once(const Dataset &train, const Dataset &val, const TrainConfig &cfg,
                           const BackboneConfig &backbone, std::uint64_t seed,
                           FitResult *fit_out = nullptr, const FitCallbacks &cb = {}) {
  const TrainConfig c = seeded(cfg, seed);
  const auto t0 = std::chrono::steady_clock::now();
  FitResult fr = fit(train, val, c, backbone, cb);
  RunOutcome out;
  out.seed = seed;
  out.best_epoch = fr.best_epoch;
  out.report = evaluate_model(fr.best, val, eval_view_config(c)).report;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!fr.epochs.empty()) out.final_train_loss = fr.epochs.back().mean_total_loss;
  if (fit_out) *fit_out = std::move(fr);
  return out;
}

struct SweepCell {
  std::string label;
  json value;      // the swept setting
  json provenance; // loss weights, encoder and parameter count actually used
  std::vector<RunOutcome> runs;
  RunStats overall_rmse;
  RunStats overall_r2;
  std::array<RunStats, 3> mae;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepCell> cells;
};

using ProgressFn = std::function<void(const std::string &)>;

inline SweepCell run_cell(std::string label, json value, const Dataset &train, const Dataset &val,
                          const TrainConfig &cfg, const BackboneConfig &backbone,
                          const std::vector<std::uint64_t> &seeds, const ProgressFn &progress) {
  if (seeds.empty()) throw ConfigError("sweep: no seeds");
  SweepCell cell;
  cell.label = std::move(label);
  cell.value = std::move(value);
  const ModelSpec spec = make_model_spec(cfg, backbone, train.samples.front().d_days(),
                                         train.samples.front().t_slots());
  ParamStore ps;
  Rng rng(0);
  PacdModel(spec).encoder().init_params(ps, rng);
  cell.provenance = {{"encoder", cfg.encoder},
                     {"lambda_sup", cfg.weights.lambda_sup},
                     {"lambda_kd", cfg.weights.lambda_kd},
                     {"lambda_cl", cfg.weights.lambda_cl},
                     {"backbone_params", ps.numel()},
                     {"views", cfg.views}};
  if (cfg.encoder == "cnn") cell.provenance["cnn_channels"] = spec.cnn_channels;
  std::vector<double> rmse, r2;
  std::array<std::vector<double>, 3> mae;
  for (auto seed : seeds) {
    if (progress) progress(cell.label + " seed " + std::to_string(seed));
    RunOutcome r = run_once(train, val, cfg, backbone, seed);
    rmse.push_back(r.report.overall_rmse);
    if (r.report.overall_r2) r2.push_back(*r.report.overall_r2);
    for (std::size_t m = 0; m < 3; ++m) mae[m].push_back(r.report.mae[m]);
    cell.runs.push_back(std::move(r));
  }
  cell.overall_rmse = run_stats(rmse);
  cell.overall_r2 = run_stats(r2);
  for (std::size_t m = 0; m < 3; ++m) cell.mae[m] = run_stats(mae[m]);
  return cell;
}

inline const std::vector<double> kDefaultAlphaT{0.10, 0.30, 0.50, 0.70};

inline SweepResult sweep_alpha_t(const ExperimentConfig &base, const Dataset &train,
                                 const Dataset &val, const std::vector<double> &alphas,
                                 const std::vector<std::uint64_t> &seeds,
                                 const ProgressFn &progress = {}) {
  if (alphas.empty()) throw ConfigError("sweep_alpha_t: empty grid");
  for (double a : alphas)
    if (!(a > base.train.views.alpha_s && a <= 1.0))
      throw ConfigError("sweep_alpha_t: every alpha_t must exceed alpha_s and be <= 1");
  SweepResult res{"alpha_t", {}};
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    TrainConfig c = base.train;
    c.views.alpha_t = alphas[i];
    res.cells.push_back(run_cell("T" + std::to_string(i + 1), alphas[i], train, val, c,
                                 base.backbone, seeds, progress));
  }
  return res;
}

struct ViewCombo {
  std::size_t n_t = 2;
  std::size_t n_s = 4;
};

inline const std::vector<ViewCombo> kDefaultViewCombos{{2, 4}, {1, 4}, {3, 4}, {2, 2},
                                                      {2, 6}, {1, 2}, {3, 6}};

inline SweepResult sweep_views(const ExperimentConfig &base, const Dataset &train, const Dataset &val,
                               const std::vector<ViewCombo> &combos,
                               const std::vector<std::uint64_t> &seeds,
                               const ProgressFn &progress = {}) {
  if (combos.empty()) throw ConfigError("sweep_views: empty grid");
  for (const auto &c : combos) {
    if (c.n_t < 1) throw ConfigError("sweep_views: n_t must be >= 1");
    if (c.n_s < 2) throw ConfigError("sweep_views: contrastive loss needs n_s >= 2");
  }
  SweepResult res{"views", {}};
  for (std::size_t i = 0; i < combos.size(); ++i) {
    TrainConfig c = base.train;
    c.views.n_t = combos[i].n_t;
    c.views.n_s = combos[i].n_s;
    res.cells.push_back(run_cell("V" + std::to_string(i), json{{"n_t", combos[i].n_t}, {"n_s", combos[i].n_s}},
                                 train, val, c, base.backbone, seeds, progress));
  }
  return res;
}

inline const std::array<const char *, 4> kAblationLabels{"CNN (sup only)", "Swin-CRB (sup only)",
                                                         "Swin-CRB + KD", "PACD-Net (full)"};

/// The four-rung ladder. Weights of the enabled losses are taken from the
/// base config; disabled ones are set to zero.
inline std::array<TrainConfig, 4> ablation_variants(const TrainConfig &base) {
  std::array<TrainConfig, 4> v;
  v.fill(base);
  v[0].encoder = "cnn";
  v[0].weights.lambda_kd = v[0].weights.lambda_cl = 0.0;
  v[1].encoder = "swin_crb";
  v[1].weights.lambda_kd = v[1].weights.lambda_cl = 0.0;
  v[2].encoder = "swin_crb";
  v[2].weights.lambda_cl = 0.0;
  v[3].encoder = "swin_crb";
  return v;
}

inline SweepResult ablation_ladder(const ExperimentConfig &base, const Dataset &train,
                                   const Dataset &val, const std::vector<std::uint64_t> &seeds,
                                   const ProgressFn &progress = {}) {
  SweepResult res{"ablation", {}};
  const auto variants = ablation_variants(base.train);
  for (std::size_t i = 0; i < variants.size(); ++i)
    res.cells.push_back(run_cell(kAblationLabels[i], std::string(kAblationLabels[i]), train, val,
                                 variants[i], base.backbone, seeds, progress));
  return res;
}

//==============================================================================
// Reports

inline json to_json(const RunStats &s) { return {{"mean", s.mean}, {"sd", s.sd}}; }

inline json to_json(const SweepResult &r) {
  json cells = json::array();
  for (const auto &c : r.cells) {
    json runs = json::array();
    for (const auto &o : c.runs)
      runs.push_back({{"seed", o.seed},
                      {"best_epoch", o.best_epoch},
                      {"seconds", o.seconds},
                      {"final_train_loss", o.final_train_loss},
                      {"report", to_json(o.report)}});
    cells.push_back({{"label", c.label},
                     {"value", c.value},
                     {"provenance", c.provenance},
                     {"overall_rmse", to_json(c.overall_rmse)},
                     {"overall_r2", to_json(c.overall_r2)},
                     {"tar_mae", to_json(c.mae[0])},
                     {"tir_mae", to_json(c.mae[1])},
                     {"tbr_mae", to_json(c.mae[2])},
                     {"runs", runs}});
  }
  return {{"axis", r.axis}, {"cells", cells}};
}

namespace detail {

inline std::string pm(const RunStats &s) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << s.mean << " +- " << s.sd;
  return o.str();
}

inline std::string aligned(const std::vector<std::vector<std::string>> &rows) {
  std::vector<std::size_t> w;
  for (const auto &r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (w.size() <= i) w.push_back(0);
      w[i] = std::max(w[i], r[i].size());
    }
  std::ostringstream o;
  for (const auto &r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      o << std::left << std::setw(static_cast<int>(w[i])) << r[i];
      if (i + 1 < r.size()) o << "  ";
    }
    o << '\n';
  }
  return o.str();
}

} // namespace detail

/// Human-readable table: one row per cell, mean +- sd over seeds.
inline std::string format_table(const SweepResult &r) {
  std::vector<std::vector<std::string>> rows{
      {"Group", r.axis, "Overall RMSE", "Overall R2", "TAR MAE", "TIR MAE", "TBR MAE"}};
  for (const auto &c : r.cells)
    rows.push_back({c.label, c.value.is_string() ? c.value.get<std::string>() : c.value.dump(),
                    detail::pm(c.overall_rmse), detail::pm(c.overall_r2), detail::pm(c.mae[0]),
                    detail::pm(c.mae[1]), detail::pm(c.mae[2])});
  return detail::aligned(rows);
}

inline std::string format_report(const EvalReport &r, const std::string &title) {
  auto f = [](double x) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(4) << x;
    return o.str();
  };
  auto fr = [&](const std::optional<double> &x) { return x ? f(*x) : std::string("undefined"); };
  std::vector<std::vector<std::string>> rows{{title, "RMSE", "MAE", "R2"}};
  for (std::size_t m = 0; m < 3; ++m) rows.push_back({kTrNames[m], f(r.rmse[m]), f(r.mae[m]), fr(r.r2[m])});
  rows.push_back({"overall", f(r.overall_rmse), "", fr(r.overall_r2)});
  std::string out = detail::aligned(rows);
  if (r.undefined_r2) out += "(" + std::to_string(r.undefined_r2) + " metric(s) with zero truth variance)\n";
  return out;
}

//==============================================================================
// Prediction tables and scatter export

inline json to_json(const PredictionTable &t) {
  json a = json::array();
  for (const auto &r : t)
    a.push_back({{"sample_id", r.sample_id}, {"truth", r.truth.as_array()}, {"prediction", r.prediction.as_array()}});
  return a;
}

inline PredictionTable prediction_table_from_json(const json &j) {
  if (!j.is_array()) throw ParseError("prediction table: expected an array", 0);
  PredictionTable t;
  for (const auto &r : j) {
    try {
      t.push_back({r.at("sample_id").get<std::string>(),
                   TrMetrics::from_array(r.at("truth").get<std::array<double, 3>>()),
                   TrMetrics::from_array(r.at("prediction").get<std::array<double, 3>>())});
    } catch (const json::exception &e) {
      throw ParseError(std::string("prediction table: ") + e.what(), 0);
    }
  }
  return t;
}

inline constexpr const char *kScatterHeader = "sample_id,metric,truth,prediction";

namespace detail {
inline std::string fmt_double(double x) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}
} // namespace detail

/// One row per (sample, metric), metrics in tar, tir, tbr order.
inline void export_scatter(const PredictionTable &t, std::ostream &out) {
  if (t.empty()) throw Error("export_scatter: empty prediction table");
  out << kScatterHeader << '\n';
  for (const auto &r : t) {
    if (r.sample_id.find_first_of(",\n\"") != std::string::npos)
      throw Error("export_scatter: sample_id contains a delimiter: " + r.sample_id);
    const auto y = r.truth.as_array(), p = r.prediction.as_array();
    for (std::size_t m = 0; m < 3; ++m)
      out << r.sample_id << ',' << kTrNames[m] << ',' << detail::fmt_double(y[m]) << ','
          << detail::fmt_double(p[m]) << '\n';
  }
}

inline void export_scatter(const PredictionTable &t, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  export_scatter(t, out);
  if (!out) throw IoError("write failed: " + path.string());
}

inline PredictionTable read_scatter(std::istream &in) {
  std::string line;
  std::size_t ln = 1;
  if (!std::getline(in, line) || line != kScatterHeader) throw ParseError("scatter: bad header", 1);
  PredictionTable t;
  std::map<std::string, std::size_t> index;
  std::vector<std::array<int, 3>> seen;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 4) throw ParseError("scatter: expected 4 fields", ln);
    std::size_t m = 3;
    for (std::size_t k = 0; k < 3; ++k)
      if (f[1] == kTrNames[k]) m = k;
    if (m == 3) throw ParseError("scatter: unknown metric '" + f[1] + "'", ln);
    double y = 0, p = 0;
    for (auto [s, v] : {std::pair{&f[2], &y}, std::pair{&f[3], &p}}) {
      auto [e, ec] = std::from_chars(s->data(), s->data() + s->size(), *v);
      if (ec != std::errc() || e != s->data() + s->size()) throw ParseError("scatter: bad number", ln);
    }
    auto [it, fresh] = index.try_emplace(f[0], t.size());
    if (fresh) {
      t.push_back({f[0], {}, {}});
      seen.push_back({0, 0, 0});
    }
    if (seen[it->second][m]++) throw ParseError("scatter: duplicate row", ln);
    auto ya = t[it->second].truth.as_array(), pa = t[it->second].prediction.as_array();
    ya[m] = y;
    pa[m] = p;
    t[it->second].truth = TrMetrics::from_array(ya);
    t[it->second].prediction = TrMetrics::from_array(pa);
  }
  for (std::size_t i = 0; i < t.size(); ++i)
    if (seen[i] != std::array<int, 3>{1, 1, 1})
      throw ParseError("scatter: incomplete sample " + t[i].sample_id, ln);
  return t;
}

} // namespace pacd
