// pacd: command-line driver for data synthesis, training, evaluation and sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pacd/pacd.hpp"

namespace fs = std::filesystem;
using namespace pacd;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = "out";
  std::string data; // optional CGM CSV; synthetic data otherwise
  std::string split = "val";

  // flags mirroring config keys
  std::optional<std::size_t> n_samples, d_days, t_slots, epochs, batch_size, n_t, n_s, embed_dim;
  std::optional<double> learning_rate, alpha_t, alpha_s, lambda_sup, lambda_kd, lambda_cl, val_fraction,
      noise_sd, policy_mix;
  std::optional<std::string> encoder;
};

void add_common(CLI::App *app, Common &c) {
  app->add_option("--seed", c.seed, "Seed of the command's primary random stream");
  app->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--data", c.data, "CGM CSV (sample_id,subject_id,day,slot,glucose_mgdl)")
      ->check(CLI::ExistingFile);
  app->add_option("--n-samples", c.n_samples);
  app->add_option("--d-days", c.d_days);
  app->add_option("--t-slots", c.t_slots);
  app->add_option("--noise-sd", c.noise_sd);
  app->add_option("--val-fraction", c.val_fraction);
  app->add_option("--epochs", c.epochs);
  app->add_option("--batch-size", c.batch_size);
  app->add_option("--learning-rate", c.learning_rate);
  app->add_option("--alpha-t", c.alpha_t);
  app->add_option("--alpha-s", c.alpha_s);
  app->add_option("--n-t", c.n_t);
  app->add_option("--n-s", c.n_s);
  app->add_option("--policy-mix", c.policy_mix);
  app->add_option("--lambda-sup", c.lambda_sup);
  app->add_option("--lambda-kd", c.lambda_kd);
  app->add_option("--lambda-cl", c.lambda_cl);
  app->add_option("--embed-dim", c.embed_dim);
  app->add_option("--encoder", c.encoder)->check(CLI::IsMember({"swin_crb", "cnn"}));
}

template <typename T, typename U> void apply(const std::optional<T> &v, U &dst) {
  if (v) dst = *v;
}

ExperimentConfig load_config(const Common &c) {
  ExperimentConfig e;
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    try {
      e = json::parse(in).get<ExperimentConfig>();
    } catch (const json::parse_error &err) {
      throw ConfigError(c.config + ": " + err.what());
    }
  }
  apply(c.n_samples, e.data.n_samples);
  apply(c.d_days, e.data.d_days);
  apply(c.t_slots, e.data.t_slots);
  apply(c.noise_sd, e.data.noise_sd);
  apply(c.val_fraction, e.val_fraction);
  apply(c.epochs, e.train.epochs);
  apply(c.batch_size, e.train.batch_size);
  apply(c.learning_rate, e.train.learning_rate);
  apply(c.alpha_t, e.train.views.alpha_t);
  apply(c.alpha_s, e.train.views.alpha_s);
  apply(c.n_t, e.train.views.n_t);
  apply(c.n_s, e.train.views.n_s);
  apply(c.policy_mix, e.train.views.student_policy_mix);
  apply(c.lambda_sup, e.train.weights.lambda_sup);
  apply(c.lambda_kd, e.train.weights.lambda_kd);
  apply(c.lambda_cl, e.train.weights.lambda_cl);
  apply(c.embed_dim, e.backbone.embed_dim);
  apply(c.encoder, e.train.encoder);
  return e;
}

fs::path out_dir(const Common &c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path &p, const json &j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

void write_text(const fs::path &p, const std::string &s) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

Dataset load_all(const Common &c, const ExperimentConfig &e) {
  if (c.data.empty()) return synth_cgm(e.data);
  LoadReport rep;
  Dataset ds = load_cgm_csv(fs::path(c.data), e.data.d_days, e.data.t_slots, &rep);
  if (!rep.rejected_samples.empty())
    std::cerr << "warning: " << rep.rejected_samples.size() << " incomplete sample(s) rejected\n";
  return ds;
}

std::pair<Dataset, Dataset> load_split(const Common &c, const ExperimentConfig &e) {
  return split_subjects(load_all(c, e), e.val_fraction, e.data.seed);
}

Dataset pick_split(const Common &c, const ExperimentConfig &e) {
  if (c.split == "all") return load_all(c, e);
  auto [tr, va] = load_split(c, e);
  return c.split == "train" ? tr : va;
}

// seeds for multi-run commands: --seed s gives s, s+1, ... (as many as configured)
std::vector<std::uint64_t> run_seeds(const Common &c, const ExperimentConfig &e) {
  if (!c.seed) return e.seeds;
  std::vector<std::uint64_t> s(std::max<std::size_t>(1, e.seeds.size()));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = *c.seed + i;
  return s;
}

void report_sweep(const SweepResult &r, const fs::path &dir, const std::string &stem) {
  write_json(dir / (stem + ".json"), to_json(r));
  const std::string t = format_table(r);
  write_text(dir / (stem + ".txt"), t);
  std::cout << t;
}

ProgressFn progress() {
  return [](const std::string &s) { std::cerr << "[run] " << s << '\n'; };
}

int cmd_synth(const Common &c) {
  ExperimentConfig e = load_config(c);
  apply(c.seed, e.data.seed);
  const Dataset ds = synth_cgm(e.data);
  const fs::path dir = out_dir(c);
  write_cgm_csv(dir / "cgm.csv", ds);
  json m = dataset_manifest(ds);
  m["config"] = e.data;
  write_json(dir / "manifest.json", m);
  std::cout << "wrote " << ds.size() << " samples to " << (dir / "cgm.csv").string() << '\n';
  return 0;
}

int cmd_views(const Common &c, const std::string &sample) {
  const ExperimentConfig e = load_config(c);
  const Dataset ds = load_all(c, e);
  if (ds.empty()) throw Error("empty dataset");
  auto it = std::find_if(ds.samples.begin(), ds.samples.end(),
                         [&](const CgmSample &s) { return s.sample_id == sample; });
  if (!sample.empty() && it == ds.samples.end()) throw Error("no sample '" + sample + "'");
  const CgmSample &s = sample.empty() ? ds.samples.front() : *it;
  const std::uint64_t seed = c.seed.value_or(e.train.seed);
  const ViewSet vs = generate_view_set(s, e.train.views, seed);
  const fs::path dir = out_dir(c);
  for (std::size_t i = 0; i < vs.teacher_views.size(); ++i)
    write_view_dump(vs.teacher_views[i], dir / (s.sample_id + "_teacher" + std::to_string(i)), seed);
  for (std::size_t i = 0; i < vs.student_views.size(); ++i)
    write_view_dump(vs.student_views[i], dir / (s.sample_id + "_student" + std::to_string(i)), seed);
  std::cout << "wrote " << vs.teacher_views.size() << " teacher and " << vs.student_views.size()
            << " student views of " << s.sample_id << '\n';
  return 0;
}

int cmd_train(const Common &c) {
  ExperimentConfig e = load_config(c);
  apply(c.seed, e.train.seed);
  const auto [tr, va] = load_split(c, e);
  const fs::path dir = out_dir(c);
  std::ofstream log(dir / "loss_log.jsonl");
  std::ofstream epochs(dir / "epochs.jsonl");
  FitCallbacks cb;
  cb.on_step = [&](const StepRecord &r) { log << to_json(r).dump() << '\n'; };
  cb.on_epoch = [&](const EpochRecord &er) {
    epochs << json{{"epoch", er.epoch}, {"mean_total_loss", er.mean_total_loss}, {"val", to_json(er.val)}}.dump()
           << '\n';
    std::cerr << "epoch " << er.epoch << "  loss " << er.mean_total_loss << "  val overall RMSE "
              << er.val.overall_rmse << '\n';
  };
  const FitResult fr = fit(tr, va, e.train, e.backbone, cb);
  save_checkpoint(fr.best, dir / "checkpoint.bin");
  write_json(dir / "checkpoint_shapes.json", shape_manifest(fr.best));
  write_json(dir / "config.json", e);
  const Evaluation ev = evaluate_model(fr.best, va, eval_view_config(e.train));
  write_json(dir / "val_report.json", to_json(ev.report));
  std::cout << format_report(ev.report, "validation (epoch " + std::to_string(fr.best_epoch) + ")");
  return 0;
}

int cmd_evaluate(const Common &c, const std::string &ckpt) {
  ExperimentConfig e = load_config(c);
  apply(c.seed, e.train.eval_seed);
  const Checkpoint ck = load_checkpoint(ckpt);
  const Dataset ds = pick_split(c, e);
  const Evaluation ev = evaluate_model(ck, ds, eval_view_config(e.train));
  const fs::path dir = out_dir(c);
  write_json(dir / "report.json", to_json(ev.report));
  write_json(dir / "predictions.json", to_json(ev.table));
  export_scatter(ev.table, dir / "scatter.csv");
  const std::string t = format_report(ev.report, "PACD-Net");
  write_text(dir / "report.txt", t);
  std::cout << t;
  return 0;
}

int cmd_baseline(const Common &c) {
  ExperimentConfig e = load_config(c);
  apply(c.seed, e.train.eval_seed);
  const Dataset ds = pick_split(c, e);
  const BaselineResult b = run_baseline(ds, eval_view_config(e.train));
  const BiasSummary bias = bias_summary(b.table);
  const fs::path dir = out_dir(c);
  write_json(dir / "baseline.json", {{"report", to_json(b.report)},
                                     {"excluded", b.excluded.size()},
                                     {"excluded_ids", b.excluded},
                                     {"bias", to_json(bias)}});
  write_json(dir / "predictions.json", to_json(b.table));
  std::string t = format_report(b.report, "No-Interp");
  if (!b.excluded.empty()) t += std::to_string(b.excluded.size()) + " sample(s) excluded: empty view\n";
  write_text(dir / "baseline.txt", t);
  std::cout << t << "mean bias tar " << bias.mean_bias[0] << "  tir " << bias.mean_bias[1] << "  tbr "
            << bias.mean_bias[2] << "\nsign test p: tar over " << bias.tar_over.p_value << "  tir under "
            << bias.tir_under.p_value << '\n';
  return 0;
}

int cmd_sweep_alpha_t(const Common &c, std::vector<double> alphas) {
  const ExperimentConfig e = load_config(c);
  if (alphas.empty()) alphas = kDefaultAlphaT;
  const auto [tr, va] = load_split(c, e);
  report_sweep(sweep_alpha_t(e, tr, va, alphas, run_seeds(c, e), progress()), out_dir(c), "sweep_alpha_t");
  return 0;
}

std::vector<ViewCombo> parse_combos(const std::vector<std::string> &specs) {
  std::vector<ViewCombo> out;
  for (const auto &s : specs) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw ConfigError("view combo must look like 2x4: " + s);
    try {
      out.push_back({std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))});
    } catch (const std::exception &) {
      throw ConfigError("view combo must look like 2x4: " + s);
    }
  }
  return out;
}

int cmd_sweep_views(const Common &c, const std::vector<std::string> &combo_specs) {
  const ExperimentConfig e = load_config(c);
  const auto combos = combo_specs.empty() ? kDefaultViewCombos : parse_combos(combo_specs);
  const auto [tr, va] = load_split(c, e);
  report_sweep(sweep_views(e, tr, va, combos, run_seeds(c, e), progress()), out_dir(c), "sweep_views");
  return 0;
}

int cmd_ablation(const Common &c) {
  const ExperimentConfig e = load_config(c);
  const auto [tr, va] = load_split(c, e);
  report_sweep(ablation_ladder(e, tr, va, run_seeds(c, e), progress()), out_dir(c), "ablation");
  return 0;
}

int cmd_export_scatter(const Common &c, const std::string &predictions) {
  std::ifstream in(predictions);
  if (!in) throw IoError("cannot open " + predictions);
  const PredictionTable t = prediction_table_from_json(json::parse(in));
  const fs::path dir = out_dir(c);
  export_scatter(t, dir / "scatter.csv");
  std::cout << "wrote " << 3 * t.size() << " rows to " << (dir / "scatter.csv").string() << '\n';
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"PACD-Net: glycemic time-in-range estimation from sparse glucose views"};
  app.require_subcommand(1);

  Common c;
  std::string sample, ckpt, predictions;
  std::vector<double> alphas;
  std::vector<std::string> combos;

  auto *synth = app.add_subcommand("synth", "Generate a synthetic CGM dataset");
  auto *views = app.add_subcommand("views", "Dump the teacher/student views of one sample");
  auto *train = app.add_subcommand("train", "Train on the training split, select on validation");
  auto *evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on sparse views");
  auto *baseline = app.add_subcommand("baseline", "No-interpolation baseline on sparse views");
  auto *sw_a = app.add_subcommand("sweep-alpha-t", "Teacher observation ratio sweep");
  auto *sw_v = app.add_subcommand("sweep-views", "Teacher/student view count sweep");
  auto *abl = app.add_subcommand("ablation", "Four-variant ablation ladder");
  auto *exp = app.add_subcommand("export-scatter", "Prediction table to scatter CSV");
  for (auto *s : {synth, views, train, evaluate, baseline, sw_a, sw_v, abl, exp}) add_common(s, c);

  views->add_option("--sample", sample, "Sample id (default: first)");
  evaluate->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  for (auto *s : {evaluate, baseline})
    s->add_option("--split", c.split, "Which split to score")->check(CLI::IsMember({"train", "val", "all"}));
  sw_a->add_option("--alphas", alphas, "alpha_t grid");
  sw_v->add_option("--combos", combos, "n_t x n_s pairs, e.g. 2x4 1x4");
  exp->add_option("--predictions", predictions, "predictions.json from evaluate/baseline")
      ->required()
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(c);
    if (*views) return cmd_views(c, sample);
    if (*train) return cmd_train(c);
    if (*evaluate) return cmd_evaluate(c, ckpt);
    if (*baseline) return cmd_baseline(c);
    if (*sw_a) return cmd_sweep_alpha_t(c, alphas);
    if (*sw_v) return cmd_sweep_views(c, combos);
    if (*abl) return cmd_ablation(c);
    if (*exp) return cmd_export_scatter(c, predictions);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
