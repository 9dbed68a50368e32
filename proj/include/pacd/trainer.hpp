#pragma once

// Student/teacher training: multi-view batching, student backpropagation,
// EMA teacher shadowing, center updates and checkpoint I/O.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pacd/cnn_encoder.hpp"
#include "pacd/config.hpp"
#include "pacd/dataio.hpp"
#include "pacd/heads.hpp"
#include "pacd/metrics.hpp"
#include "pacd/optim.hpp"
#include "pacd/swin_crb.hpp"
#include "pacd/views.hpp"

namespace pacd {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  double ema_momentum = 0.996;
  double grad_clip = 5.0;
  LossWeights weights;
  ViewGenConfig views;
  std::size_t kd_dim = 64;
  std::size_t kd_hidden = 64;
  double tau_t = 0.04;
  double tau_s = 0.1;
  double center_momentum = 0.9;
  double tau_cl = 0.2;
  std::string encoder = "swin_crb"; // or "cnn"
  std::vector<std::size_t> cnn_channels; // empty: matched to the swin budget
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 7;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0))
      throw ConfigError("train: ema_momentum must lie in [0,1]");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (encoder != "swin_crb" && encoder != "cnn")
      throw ConfigError("train: encoder must be 'swin_crb' or 'cnn'");
    weights.validate();
    views.validate();
    ContrastiveConfig{tau_cl}.validate();
    if (weights.lambda_cl > 0.0 && views.n_s < 2)
      throw ConfigError("train: contrastive loss needs n_s >= 2 student views");
  }
};

inline void to_json(json &j, const TrainConfig &c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"ema_momentum", c.ema_momentum},
       {"grad_clip", c.grad_clip},
       {"lambda_sup", c.weights.lambda_sup},
       {"lambda_kd", c.weights.lambda_kd},
       {"lambda_cl", c.weights.lambda_cl},
       {"views", c.views},
       {"kd_dim", c.kd_dim},
       {"kd_hidden", c.kd_hidden},
       {"tau_t", c.tau_t},
       {"tau_s", c.tau_s},
       {"center_momentum", c.center_momentum},
       {"tau_cl", c.tau_cl},
       {"encoder", c.encoder},
       {"cnn_channels", c.cnn_channels},
       {"seed", c.seed},
       {"eval_seed", c.eval_seed}};
}

inline void from_json(const json &j, TrainConfig &c) {
  detail::reject_unknown(j,
                         {"epochs", "batch_size", "learning_rate", "weight_decay", "ema_momentum",
                          "grad_clip", "lambda_sup", "lambda_kd", "lambda_cl", "views", "kd_dim",
                          "kd_hidden", "tau_t", "tau_s", "center_momentum", "tau_cl", "encoder",
                          "cnn_channels", "seed", "eval_seed"},
                         "train config");
  detail::read(j, "epochs", c.epochs);
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "learning_rate", c.learning_rate);
  detail::read(j, "weight_decay", c.weight_decay);
  detail::read(j, "ema_momentum", c.ema_momentum);
  detail::read(j, "grad_clip", c.grad_clip);
  detail::read(j, "lambda_sup", c.weights.lambda_sup);
  detail::read(j, "lambda_kd", c.weights.lambda_kd);
  detail::read(j, "lambda_cl", c.weights.lambda_cl);
  detail::read(j, "views", c.views);
  detail::read(j, "kd_dim", c.kd_dim);
  detail::read(j, "kd_hidden", c.kd_hidden);
  detail::read(j, "tau_t", c.tau_t);
  detail::read(j, "tau_s", c.tau_s);
  detail::read(j, "center_momentum", c.center_momentum);
  detail::read(j, "tau_cl", c.tau_cl);
  detail::read(j, "encoder", c.encoder);
  detail::read(j, "cnn_channels", c.cnn_channels);
  detail::read(j, "seed", c.seed);
  detail::read(j, "eval_seed", c.eval_seed);
}

//==============================================================================
// Model

/// Everything needed to rebuild the network graph (but not its weights).
struct ModelSpec {
  std::string encoder = "swin_crb";
  BackboneConfig backbone;
  std::vector<std::size_t> cnn_channels;
  std::size_t d_days = 7;
  std::size_t t_slots = kDefaultSlotsPerDay;
  std::size_t kd_dim = 64;
  std::size_t kd_hidden = 64;
  double tau_t = 0.04;
  double tau_s = 0.1;
  double center_momentum = 0.9;
  std::size_t p_dim = 16;
  bool operator==(const ModelSpec &) const = default;
};

inline void to_json(json &j, const ModelSpec &s) {
  j = {{"encoder", s.encoder},     {"backbone", s.backbone}, {"cnn_channels", s.cnn_channels},
       {"d_days", s.d_days},       {"t_slots", s.t_slots},   {"kd_dim", s.kd_dim},
       {"kd_hidden", s.kd_hidden}, {"tau_t", s.tau_t},       {"tau_s", s.tau_s},
       {"center_momentum", s.center_momentum}, {"p_dim", s.p_dim}};
}

inline void from_json(const json &j, ModelSpec &s) {
  detail::reject_unknown(j,
                         {"encoder", "backbone", "cnn_channels", "d_days", "t_slots", "kd_dim",
                          "kd_hidden", "tau_t", "tau_s", "center_momentum", "p_dim"},
                         "model spec");
  detail::read(j, "encoder", s.encoder);
  detail::read(j, "backbone", s.backbone);
  detail::read(j, "cnn_channels", s.cnn_channels);
  detail::read(j, "d_days", s.d_days);
  detail::read(j, "t_slots", s.t_slots);
  detail::read(j, "kd_dim", s.kd_dim);
  detail::read(j, "kd_hidden", s.kd_hidden);
  detail::read(j, "tau_t", s.tau_t);
  detail::read(j, "tau_s", s.tau_s);
  detail::read(j, "center_momentum", s.center_momentum);
  detail::read(j, "p_dim", s.p_dim);
}

/// Parameter count of a Swin-CRB backbone for a D x T input.
inline std::size_t swin_backbone_params(const BackboneConfig &cfg, std::size_t D, std::size_t T) {
  ParamStore ps;
  Rng rng(0);
  SwinCrbEncoder(cfg, D, T).init_params(ps, rng);
  return ps.numel_with_prefix(kBackbonePrefix);
}

inline ModelSpec make_model_spec(const TrainConfig &cfg, const BackboneConfig &backbone,
                                 std::size_t d_days, std::size_t t_slots) {
  ModelSpec s;
  s.encoder = cfg.encoder;
  s.backbone = backbone;
  s.d_days = d_days;
  s.t_slots = t_slots;
  s.kd_dim = cfg.kd_dim;
  s.kd_hidden = cfg.kd_hidden;
  s.tau_t = cfg.tau_t;
  s.tau_s = cfg.tau_s;
  s.center_momentum = cfg.center_momentum;
  s.p_dim = cfg.views.p_dim;
  if (s.encoder == "cnn")
    s.cnn_channels = cfg.cnn_channels.empty()
                         ? CnnEncoder::matched_channels(swin_backbone_params(backbone, d_days, t_slots))
                         : cfg.cnn_channels;
  return s;
}

/// Pooled features are standardized per channel before the heads: batch
/// statistics during training, running averages (kept in the student store
/// under these names, never optimized) at inference.
inline const std::string kFeatureMeanName = "fnorm.mean";
inline const std::string kFeatureVarName = "fnorm.var";
inline constexpr double kFeatureNormEps = 1e-5;
inline constexpr double kFeatureNormMomentum = 0.9;

/// Student, EMA teacher, the running KD center and the optimizer state.
struct DualEncoderState {
  ParamStore student; // backbone + kd projection + regression head
  ParamStore teacher; // backbone + kd projection
  KdHead kd;          // temperatures and center
  std::size_t step = 0;
  AdamW optimizer;
};

class PacdModel {
public:
  explicit PacdModel(ModelSpec spec) : spec_(std::move(spec)) {
    if (spec_.encoder == "swin_crb")
      encoder_ = std::make_unique<SwinCrbEncoder>(spec_.backbone, spec_.d_days, spec_.t_slots);
    else if (spec_.encoder == "cnn")
      encoder_ = std::make_unique<CnnEncoder>(spec_.cnn_channels);
    else
      throw ConfigError("unknown encoder kind '" + spec_.encoder + "'");
  }

  const ModelSpec &spec() const { return spec_; }
  const Encoder &encoder() const { return *encoder_; }
  std::size_t feature_dim() const { return encoder_->feature_dim(); }

  KdHead kd_head() const {
    KdHead h = make_kd_head(feature_dim(), spec_.kd_hidden, spec_.kd_dim);
    h.tau_t = spec_.tau_t;
    h.tau_s = spec_.tau_s;
    h.center_momentum = spec_.center_momentum;
    h.validate();
    return h;
  }
  RegressionHead regression_head() const { return RegressionHead{feature_dim()}; }

  /// Fresh state; the teacher starts as an exact copy of the student's shared
  /// parameters.
  DualEncoderState init_state(std::uint64_t seed) const {
    DualEncoderState s;
    Rng rng = make_rng(seed, {0x494E4954ULL});
    encoder_->init_params(s.student, rng);
    s.kd = kd_head();
    s.kd.init_params(s.student, rng);
    regression_head().init_params(s.student, rng);
    s.student.add(kFeatureMeanName, Tensor({feature_dim()}, 0.0));
    s.student.add(kFeatureVarName, Tensor({feature_dim()}, 1.0));
    for (std::size_t i = 0; i < s.student.size(); ++i)
      if (is_shared(s.student.name(i))) s.teacher.add(s.student.name(i), s.student.value(i));
    return s;
  }

  static bool is_shared(const std::string &name) {
    return name.rfind("reg.", 0) != 0 && name.rfind("fnorm.", 0) != 0;
  }

  Var feature(Graph &g, const ParamStore &ps, const CompositeView &view,
              const ForwardContext &ctx = {}) const {
    if (view.d_days() != spec_.d_days || view.t_slots() != spec_.t_slots)
      throw ConfigError("view shape does not match model");
    return encoder_->encode(g, ps, view.to_tensor(), ctx);
  }

  /// Feature standardized with the running statistics.
  static Tensor normalize_running(const ParamStore &student, const Tensor &f) {
    const Tensor &mu = student[kFeatureMeanName], &var = student[kFeatureVarName];
    Tensor out = f;
    for (std::size_t j = 0; j < out.numel(); ++j)
      out.data[j] = (f.data[j] - mu.data[j]) / std::sqrt(var.data[j] + kFeatureNormEps);
    return out;
  }

  /// Inference path: encode, standardize, regress. Uses no RNG.
  TrMetrics predict(const ParamStore &student, const CompositeView &view) const {
    Graph g(false);
    const Tensor f = normalize_running(student, ad::val(feature(g, student, view)));
    return simplex_from_logits(ad::val(regression_logits(g, student, g.constant(f))).data);
  }

  /// Teacher KD projections of a batch of views (no gradient tracking),
  /// standardized with the statistics of this batch.
  std::vector<Vec> teacher_projections(const ParamStore &teacher, const KdHead &kd,
                                       const std::vector<const CompositeView *> &views) const {
    Graph g(false);
    std::vector<Var> feats;
    for (const CompositeView *v : views) feats.push_back(feature(g, teacher, *v));
    Var z = project_kd(g, teacher, kd, ad::standardize_rows(ad::stack(feats), kFeatureNormEps));
    const Tensor &Z = ad::val(z);
    std::vector<Vec> out(views.size(), Vec(kd.out_dim));
    for (std::size_t i = 0; i < views.size(); ++i)
      std::copy_n(Z.data.begin() + i * kd.out_dim, kd.out_dim, out[i].begin());
    return out;
  }

private:
  ModelSpec spec_;
  std::unique_ptr<Encoder> encoder_;
};

//==============================================================================
// EMA

/// teacher'[p] = lam * teacher[p] + (1 - lam) * student[p] for every teacher
/// parameter.
inline ParamStore ema_update(const ParamStore &teacher, const ParamStore &student, double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("ema_update: momentum must lie in [0,1]");
  ParamStore out = teacher;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const std::string &name = teacher.name(i);
    if (!student.contains(name)) throw Error("ema_update: student lacks parameter " + name);
    const Tensor &s = student[name];
    Tensor &t = out.value(i);
    if (s.shape != t.shape) throw Error("ema_update: shape mismatch for " + name);
    for (std::size_t k = 0; k < t.numel(); ++k) t.data[k] = lam * t.data[k] + (1.0 - lam) * s.data[k];
  }
  return out;
}

//==============================================================================
// Training step

struct StepRecord {
  std::size_t step = 0;
  double l_sup = 0.0;
  double l_kd = 0.0;
  double l_cl = 0.0;
  double l_total = 0.0;
  double center_norm = 0.0;
  double grad_norm = 0.0;
  std::size_t kd_clamped = 0;
  bool operator==(const StepRecord &) const = default;
};

inline json to_json(const StepRecord &r) {
  return {{"step", r.step},     {"l_sup", r.l_sup},         {"l_kd", r.l_kd},
          {"l_cl", r.l_cl},     {"l_total", r.l_total},     {"center_norm", r.center_norm},
          {"grad_norm", r.grad_norm}, {"kd_clamped", r.kd_clamped}};
}

/// Accumulates b into a (either may be empty = no gradient).
inline void add_grads(ad::Grads &a, const ad::Grads &b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i].data.empty()) continue;
    if (a[i].data.empty())
      a[i] = b[i];
    else
      for (std::size_t k = 0; k < a[i].numel(); ++k) a[i].data[k] += b[i].data[k];
  }
}

/// Folds the batch mean and (unbiased) variance of [M, F] features into the
/// running statistics with momentum `k` (0 replaces them).
inline void update_feature_stats(ParamStore &student, const Tensor &feats, double k) {
  const std::size_t m = feats.dim(0), f = feats.dim(1);
  Tensor &mu = student[kFeatureMeanName], &var = student[kFeatureVarName];
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += feats.data[i * f + j];
    mean /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) ss += (feats.data[i * f + j] - mean) * (feats.data[i * f + j] - mean);
    mu.data[j] = k * mu.data[j] + (1.0 - k) * mean;
    var.data[j] = k * var.data[j] + (1.0 - k) * ss / static_cast<double>(m - 1);
  }
}

/// One optimization step on a batch of view sets. Order: teacher targets,
/// student forward, losses, student update, EMA teacher update, center update.
inline StepRecord train_step(const PacdModel &model, DualEncoderState &state,
                             std::span<const ViewSet *const> batch, const TrainConfig &cfg) {
  if (batch.size() < 2) throw Error("train_step: batch size must be >= 2");
  const auto &w = cfg.weights;
  const bool use_kd = w.lambda_kd > 0.0;
  const KdHead &kd = state.kd;

  // (1) teacher targets, no gradient tracking
  std::vector<Tensor> teacher_z(batch.size());
  std::vector<Vec> all_teacher_z;
  if (use_kd) {
    std::vector<const CompositeView *> views;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto &tv = batch[r]->teacher_views;
      if (tv.empty()) throw Error("train_step: view set without teacher views");
      for (const auto &v : tv) views.push_back(&v);
    }
    if (views.size() < 2) throw Error("train_step: need at least 2 teacher views per batch");
    all_teacher_z = model.teacher_projections(state.teacher, kd, views);
    std::size_t row = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const std::size_t nt = batch[r]->teacher_views.size();
      teacher_z[r] = Tensor({nt, kd.out_dim});
      for (std::size_t i = 0; i < nt; ++i, ++row)
        std::copy(all_teacher_z[row].begin(), all_teacher_z[row].end(),
                  teacher_z[r].data.begin() + i * kd.out_dim);
    }
  }

  // (2) student backbone features, one graph per view
  Rng dropout_rng = make_rng(cfg.seed, {0x44524F50ULL, state.step});
  ForwardContext ctx;
  if (model.spec().encoder == "swin_crb" && model.spec().backbone.p_drop > 0.0) ctx.dropout_rng = &dropout_rng;
  std::vector<std::unique_ptr<Graph>> view_graphs;
  std::vector<Var> view_features;
  std::vector<std::size_t> sample_of;
  std::vector<TrMetrics> labels;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    labels.push_back(batch[r]->label);
    if (batch[r]->student_views.empty()) throw Error("train_step: view set without student views");
    for (const auto &v : batch[r]->student_views) {
      view_graphs.push_back(std::make_unique<Graph>(true));
      view_features.push_back(model.feature(*view_graphs.back(), state.student, v, ctx));
      sample_of.push_back(r);
    }
  }

  // (3) heads and losses on a separate graph with features as leaves
  Graph lg(true);
  std::vector<Var> feats;
  for (Var f : view_features) feats.push_back(lg.input(ad::val(f)));
  Var raw_feats = ad::stack(feats);
  Var feat_mat = ad::standardize_rows(raw_feats, kFeatureNormEps);
  Var logits = regression_logits(lg, state.student, feat_mat);
  Var l_sup = supervised_loss_op(logits, sample_of, labels);

  std::optional<Var> l_kd;
  StepRecord rec;
  if (use_kd) {
    Var z = project_kd(lg, state.student, kd, feat_mat);
    const std::size_t K = kd.out_dim;
    std::vector<Var> per_sample;
    std::size_t row = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const std::size_t ns = batch[r]->student_views.size();
      auto idx = std::make_shared<std::vector<std::size_t>>(ns);
      std::iota(idx->begin(), idx->end(), row);
      row += ns;
      KdLoss info;
      per_sample.push_back(kd_loss_op(lg.constant(teacher_z[r]), ad::gather_rows(z, idx), kd, &info));
      rec.kd_clamped += info.clamped;
    }
    (void)K;
    Var sum = per_sample[0];
    for (std::size_t i = 1; i < per_sample.size(); ++i) sum = ad::add(sum, per_sample[i]);
    l_kd = ad::scale(sum, 1.0 / static_cast<double>(per_sample.size()));
  }

  std::optional<Var> l_cl;
  const bool multi_view = std::all_of(batch.begin(), batch.end(),
                                      [](const ViewSet *v) { return v->student_views.size() >= 2; });
  if (multi_view) l_cl = contrastive_loss_op(feat_mat, sample_of, ContrastiveConfig{cfg.tau_cl});
  else if (w.lambda_cl > 0.0) throw Error("train_step: contrastive loss needs >= 2 student views per sample");

  rec.l_sup = ad::val(l_sup)[0];
  rec.l_kd = l_kd ? ad::val(*l_kd)[0] : 0.0;
  rec.l_cl = l_cl ? ad::val(*l_cl)[0] : 0.0;
  rec.l_total = total_loss(rec.l_sup, rec.l_kd, rec.l_cl, w); // throws on non-finite

  Var total = ad::scale(l_sup, w.lambda_sup);
  if (l_kd) total = ad::add(total, ad::scale(*l_kd, w.lambda_kd));
  if (l_cl && w.lambda_cl > 0.0) total = ad::add(total, ad::scale(*l_cl, w.lambda_cl));

  // (4) gradients: heads from the loss graph, backbone by seeding each view
  lg.backward(total);
  ad::Grads grads = lg.param_grads(state.student.size());
  for (std::size_t i = 0; i < view_graphs.size(); ++i) {
    view_graphs[i]->backward(view_features[i], lg.grad(feats[i]));
    add_grads(grads, view_graphs[i]->param_grads(state.student.size()));
  }
  rec.grad_norm = clip_global_norm(grads, cfg.grad_clip);
  state.optimizer.lr = cfg.learning_rate;
  state.optimizer.weight_decay = cfg.weight_decay;
  state.optimizer.step(state.student, grads);

  update_feature_stats(state.student, ad::val(raw_feats), state.step == 0 ? 0.0 : kFeatureNormMomentum);

  // (5) EMA teacher, (6) center
  state.teacher = ema_update(state.teacher, state.student, cfg.ema_momentum);
  if (use_kd) state.kd.center = update_center(state.kd, all_teacher_z);
  double cn = 0.0;
  for (double c : state.kd.center) cn += c * c;
  rec.center_norm = std::sqrt(cn);
  rec.step = ++state.step;
  return rec;
}

//==============================================================================
// Evaluation views and prediction

/// How the single evaluation view of each sample is drawn.
struct EvalViewConfig {
  double alpha = 0.03;
  double policy_mix = 0.5;
  double epsilon = 0.3;
  std::size_t p_dim = 16;
  std::uint64_t seed = 7;
};

inline EvalViewConfig eval_view_config(const TrainConfig &cfg) {
  return {cfg.views.alpha_s, cfg.views.student_policy_mix, cfg.views.epsilon, cfg.views.p_dim,
          cfg.eval_seed};
}

/// The deterministic sparse evaluation view of one sample.
inline CompositeView eval_view(const CgmSample &cgm, const EvalViewConfig &ev) {
  const Matrix pe = positional_encoding(cgm.d_days(), cgm.t_slots(), ev.p_dim);
  Rng rng = view_rng(ev.seed, cgm.sample_id, ViewRole::Student, 0);
  return make_student_view(cgm, ev.alpha, ev.policy_mix, ev.epsilon, pe, rng);
}

inline std::vector<TrMetrics> predict_dataset(const PacdModel &model, const ParamStore &student,
                                              const Dataset &ds, const EvalViewConfig &ev) {
  std::vector<TrMetrics> out;
  out.reserve(ds.size());
  for (const auto &s : ds.samples) out.push_back(model.predict(student, eval_view(s, ev)));
  return out;
}

//==============================================================================
// Checkpoints

struct Checkpoint {
  ModelSpec spec;
  ParamStore student;
  ParamStore teacher;
  Vec center;
  std::size_t step = 0;
  std::uint64_t config_hash = 0;

  bool operator==(const Checkpoint &) const = default;
};

struct CheckpointError : Error {
  using Error::Error;
};

inline Checkpoint make_checkpoint(const PacdModel &model, const DualEncoderState &s,
                                  std::uint64_t config_hash) {
  return {model.spec(), s.student, s.teacher, s.kd.center, s.step, config_hash};
}

/// Rebuilds a state (fresh optimizer) from a checkpoint.
inline DualEncoderState restore_state(const PacdModel &model, const Checkpoint &ck) {
  DualEncoderState s;
  s.student = ck.student;
  s.teacher = ck.teacher;
  s.kd = model.kd_head();
  if (ck.center.size() != s.kd.out_dim) throw CheckpointError("checkpoint center size mismatch");
  s.kd.center = ck.center;
  s.step = ck.step;
  return s;
}

namespace detail {

inline constexpr char kCkptMagic[8] = {'P', 'A', 'C', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

struct ByteWriter {
  std::string buf;
  template <typename T> void pod(const T &v) {
    static_assert(std::endian::native == std::endian::little);
    buf.append(reinterpret_cast<const char *>(&v), sizeof(T));
  }
  void str(const std::string &s) {
    pod<std::uint64_t>(s.size());
    buf.append(s);
  }
  void doubles(const std::vector<double> &v) {
    pod<std::uint64_t>(v.size());
    buf.append(reinterpret_cast<const char *>(v.data()), v.size() * sizeof(double));
  }
  void store(const ParamStore &ps) {
    pod<std::uint64_t>(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      str(ps.name(i));
      const Tensor &t = ps.value(i);
      pod<std::uint64_t>(t.ndim());
      for (auto d : t.shape) pod<std::uint64_t>(d);
      doubles(t.data);
    }
  }
};

struct ByteReader {
  std::string_view buf;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw CheckpointError("checkpoint truncated");
  }
  template <typename T> T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::size_t count(std::size_t max = std::size_t{1} << 32) {
    const auto n = pod<std::uint64_t>();
    if (n > max) throw CheckpointError("checkpoint corrupt: implausible length");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const auto n = count();
    need(n);
    std::string s(buf.substr(pos, n));
    pos += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = count();
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return v;
  }
  ParamStore store() {
    ParamStore ps;
    const auto n = count(1 << 20);
    for (std::size_t i = 0; i < n; ++i) {
      std::string name = str();
      const auto nd = count(8);
      std::vector<std::size_t> shape(nd);
      for (auto &d : shape) d = count();
      auto data = doubles();
      if (data.size() != Tensor::numel_of(shape)) throw CheckpointError("checkpoint corrupt: tensor size");
      ps.add(name, Tensor(std::move(shape), std::move(data)));
    }
    return ps;
  }
};

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint &ck) {
  detail::ByteWriter w;
  w.buf.append(detail::kCkptMagic, 8);
  w.pod(detail::kCkptVersion);
  w.pod<std::uint64_t>(ck.config_hash);
  w.pod<std::uint64_t>(ck.step);
  w.str(json(ck.spec).dump());
  w.doubles(ck.center);
  w.store(ck.student);
  w.store(ck.teacher);
  w.pod<std::uint64_t>(hash_string(w.buf));
  return w.buf;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 + 4 + 8 || std::memcmp(bytes.data(), detail::kCkptMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  if (bytes.size() < 8 + sizeof(std::uint64_t)) throw CheckpointError("checkpoint truncated");
  detail::ByteReader r{bytes.substr(0, bytes.size() - 8)};
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  r.pos = 8;
  if (r.pod<std::uint32_t>() != detail::kCkptVersion) throw CheckpointError("unsupported checkpoint version");
  Checkpoint ck;
  ck.config_hash = r.pod<std::uint64_t>();
  ck.step = static_cast<std::size_t>(r.pod<std::uint64_t>());
  const std::string spec = r.str();
  ck.center = r.doubles();
  ck.student = r.store();
  ck.teacher = r.store();
  if (r.pos != r.buf.size()) throw CheckpointError("checkpoint corrupt: trailing bytes");
  if (hash_string(r.buf) != stored_sum) throw CheckpointError("checkpoint corrupt: checksum mismatch");
  try {
    ck.spec = json::parse(spec).get<ModelSpec>();
  } catch (const std::exception &e) {
    throw CheckpointError(std::string("checkpoint corrupt: model spec: ") + e.what());
  }
  return ck;
}

/// Name -> shape map of every stored tensor, for cross-implementation use.
inline json shape_manifest(const Checkpoint &ck) {
  json j;
  j["model"] = ck.spec;
  j["step"] = ck.step;
  j["config_hash"] = ck.config_hash;
  for (const auto &[key, ps] : {std::pair{"student", &ck.student}, std::pair{"teacher", &ck.teacher}}) {
    json m = json::object();
    for (std::size_t i = 0; i < ps->size(); ++i) m[ps->name(i)] = ps->value(i).shape;
    j[key] = m;
  }
  j["center"] = {ck.center.size()};
  return j;
}

inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

inline std::uint64_t config_hash(const ModelSpec &spec, const TrainConfig &cfg) {
  return hash_string(json{{"model", spec}, {"train", cfg}}.dump());
}

//==============================================================================
// Fit

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total_loss = 0.0;
  EvalReport val;
};

struct FitResult {
  Checkpoint best;
  std::size_t best_epoch = 0;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct FitCallbacks {
  std::function<void(const StepRecord &)> on_step;
  std::function<void(const EpochRecord &)> on_epoch;
};

/// View sets of one epoch. Streams derive from (seed, epoch, sample id).
inline std::vector<ViewSet> epoch_views(const Dataset &ds, const ViewGenConfig &vc,
                                        std::uint64_t seed, std::size_t epoch) {
  std::vector<ViewSet> out;
  out.reserve(ds.size());
  const std::uint64_t es = derive_seed(seed, {0x45504F43ULL, epoch});
  for (const auto &s : ds.samples) out.push_back(generate_view_set(s, vc, es));
  return out;
}

/// Replaces the running feature statistics with the exact mean and variance
/// of the current student over the first student view of every view set.
/// Run once per epoch, before validation, so inference never sees stale
/// statistics.
inline void refresh_feature_stats(const PacdModel &model, ParamStore &student,
                                  const std::vector<ViewSet> &views) {
  std::vector<double> rows;
  std::size_t m = 0;
  for (const auto &vs : views) {
    if (vs.student_views.empty()) continue;
    Graph g(false);
    const Tensor &f = ad::val(model.feature(g, student, vs.student_views.front()));
    rows.insert(rows.end(), f.data.begin(), f.data.end());
    ++m;
  }
  if (m < 2) return;
  const std::size_t f = rows.size() / m;
  update_feature_stats(student, Tensor({m, f}, std::move(rows)), 0.0);
}

/// Sets the regression bias to the log of the mean training label, so the
/// zero-weight head starts at the label prior instead of (1/3, 1/3, 1/3).
inline void init_label_prior(ParamStore &student, const Dataset &train, double floor = 1e-3) {
  std::array<double, 3> mean{};
  for (const auto &s : train.samples) {
    const auto y = compute_tr(s).as_array();
    for (int j = 0; j < 3; ++j) mean[j] += y[j] / static_cast<double>(train.size());
  }
  Tensor &b = student["reg.bias"];
  for (int j = 0; j < 3; ++j) b.data[j] = std::log(std::max(mean[j], floor));
}

/// Trains from scratch and returns the checkpoint with the lowest validation
/// overall RMSE.
inline FitResult fit(const Dataset &train, const Dataset &val, const TrainConfig &cfg,
                     const BackboneConfig &backbone, const FitCallbacks &cb = {}) {
  cfg.validate();
  if (train.empty()) throw Error("fit: empty training set");
  if (val.size() < 2) throw Error("fit: validation set needs at least 2 samples");
  if (cfg.batch_size > train.size()) throw Error("fit: batch_size exceeds training set size");
  const std::size_t D = train.samples.front().d_days(), T = train.samples.front().t_slots();

  const PacdModel model(make_model_spec(cfg, backbone, D, T));
  const std::uint64_t chash = config_hash(model.spec(), cfg);
  DualEncoderState state = model.init_state(cfg.seed);
  init_label_prior(state.student, train);
  const EvalViewConfig ev = eval_view_config(cfg);

  FitResult res;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto views = epoch_views(train, cfg.views, cfg.seed, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(cfg.seed, {0x53485546ULL, epoch});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t n_steps = 0;
    for (std::size_t b = 0; b + cfg.batch_size <= order.size(); b += cfg.batch_size) {
      std::vector<const ViewSet *> batch;
      for (std::size_t k = b; k < b + cfg.batch_size; ++k) batch.push_back(&views[order[k]]);
      const StepRecord rec = train_step(model, state, batch, cfg);
      loss_sum += rec.l_total;
      ++n_steps;
      res.steps.push_back(rec);
      if (cb.on_step) cb.on_step(rec);
    }

    refresh_feature_stats(model, state.student, views);

    EpochRecord er;
    er.epoch = epoch;
    er.mean_total_loss = n_steps ? loss_sum / static_cast<double>(n_steps) : 0.0;
    er.val = metric_suite(predict_dataset(model, state.student, val, ev), val.labels);
    if (er.val.overall_rmse < best) {
      best = er.val.overall_rmse;
      res.best = make_checkpoint(model, state, chash);
      res.best_epoch = epoch;
    }
    res.epochs.push_back(er);
    if (cb.on_epoch) cb.on_epoch(er);
  }
  return res;
}

} // namespace pacd
