#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace pacd;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.embed_dim = 8;
  b.depths = {1};
  b.num_heads = {2};
  b.window = {2, 3};
  return b;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.kd_dim = 8;
  c.kd_hidden = 8;
  c.views.alpha_s = 0.25;
  c.views.n_s = 2;
  return c;
}

Dataset tiny_data(std::size_t n, std::uint64_t seed = 3) {
  SynthConfig s;
  s.n_samples = n;
  s.d_days = 2;
  s.t_slots = 24;
  s.seed = seed;
  return synth_cgm(s);
}

std::vector<const ViewSet *> pointers(const std::vector<ViewSet> &v) {
  std::vector<const ViewSet *> out;
  for (const auto &x : v) out.push_back(&x);
  return out;
}

} // namespace

TEST(Ema, ScalarAlgebra) {
  ParamStore t, s;
  t.add("a", Tensor({1}, 1.0));
  s.add("a", Tensor({1}, 0.0));
  s.add("reg.weight", Tensor({1}, 5.0));
  EXPECT_DOUBLE_EQ(ema_update(t, s, 0.9)["a"][0], 0.9);
  EXPECT_EQ(ema_update(t, s, 1.0)["a"][0], 1.0);
  EXPECT_EQ(ema_update(t, s, 0.0)["a"][0], 0.0);
  EXPECT_FALSE(ema_update(t, s, 0.5).contains("reg.weight"));
  EXPECT_THROW(ema_update(t, s, 1.5), ConfigError);
  ParamStore bad;
  bad.add("a", Tensor({2}, 0.0));
  EXPECT_THROW(ema_update(t, bad, 0.5), Error);
}

TEST(Model, InitialTeacherMatchesStudent) {
  const PacdModel model(make_model_spec(tiny_train(), tiny_backbone(), 2, 24));
  const DualEncoderState st = model.init_state(1);
  for (std::size_t i = 0; i < st.teacher.size(); ++i)
    EXPECT_EQ(st.teacher.value(i), st.student[st.teacher.name(i)]);
  EXPECT_FALSE(st.teacher.contains("reg.weight"));
  EXPECT_FALSE(st.teacher.contains(kFeatureMeanName));
  EXPECT_TRUE(st.student.contains("kd.fc2.weight"));
}

TEST(Model, InferenceIsDeterministic) {
  const PacdModel model(make_model_spec(tiny_train(), tiny_backbone(), 2, 24));
  const DualEncoderState st = model.init_state(2);
  const Dataset ds = tiny_data(4);
  const EvalViewConfig ev{0.25, 0.5, 0.3, 16, 9};
  const auto a = predict_dataset(model, st.student, ds, ev), b = predict_dataset(model, st.student, ds, ev);
  EXPECT_EQ(a, b);
  for (const auto &p : a) EXPECT_NEAR(p.sum(), 1.0, 1e-9);
}

TEST(TrainStep, EmaContractAndStopGradient) {
  const TrainConfig cfg = tiny_train();
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(3);
  const auto views = epoch_views(tiny_data(4), cfg.views, 0, 0);
  const ParamStore teacher_before = st.teacher;
  const StepRecord rec = train_step(model, st, pointers(views), cfg);
  EXPECT_EQ(rec.step, 1u);
  EXPECT_EQ(st.step, 1u);
  EXPECT_TRUE(std::isfinite(rec.l_total));
  EXPECT_NEAR(rec.l_total, rec.l_sup + rec.l_kd + rec.l_cl, 1e-12);
  for (std::size_t i = 0; i < st.teacher.size(); ++i) {
    const Tensor &t = st.teacher.value(i), &t0 = teacher_before.value(i);
    const Tensor &s = st.student[st.teacher.name(i)];
    for (std::size_t k = 0; k < t.numel(); ++k)
      EXPECT_DOUBLE_EQ(t.data[k], cfg.ema_momentum * t0.data[k] + (1 - cfg.ema_momentum) * s.data[k]);
  }
  EXPECT_GT(rec.center_norm, 0.0);
}

TEST(TrainStep, TeacherStaysInsideStudentEnvelope) {
  TrainConfig cfg = tiny_train();
  cfg.ema_momentum = 0.5;
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(4);
  const auto views = epoch_views(tiny_data(4), cfg.views, 0, 0);
  const std::string name = "backbone.embed.conv1.bias";
  double lo = st.student[name][0], hi = lo;
  for (int i = 0; i < 5; ++i) {
    train_step(model, st, pointers(views), cfg);
    lo = std::min(lo, st.student[name][0]);
    hi = std::max(hi, st.student[name][0]);
    EXPECT_GE(st.teacher[name][0], lo - 1e-15);
    EXPECT_LE(st.teacher[name][0], hi + 1e-15);
  }
}

TEST(TrainStep, DeterministicRecords) {
  const TrainConfig cfg = tiny_train();
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  const auto views = epoch_views(tiny_data(4), cfg.views, 0, 0);
  std::vector<StepRecord> a, b;
  for (auto *out : {&a, &b}) {
    DualEncoderState st = model.init_state(5);
    for (int i = 0; i < 5; ++i) out->push_back(train_step(model, st, pointers(views), cfg));
  }
  EXPECT_EQ(a, b);
}

TEST(TrainStep, Preconditions) {
  TrainConfig cfg = tiny_train();
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(6);
  auto views = epoch_views(tiny_data(2), cfg.views, 0, 0);
  std::vector<const ViewSet *> one{&views[0]};
  EXPECT_THROW(train_step(model, st, one, cfg), Error);
  views[1].student_views.resize(1);
  EXPECT_THROW(train_step(model, st, pointers(views), cfg), Error);
}

TEST(TrainStep, SupervisedOnlySkipsTeacher) {
  TrainConfig cfg = tiny_train();
  cfg.weights = {1.0, 0.0, 0.0};
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(7);
  const auto views = epoch_views(tiny_data(4), cfg.views, 0, 0);
  const StepRecord r = train_step(model, st, pointers(views), cfg);
  EXPECT_EQ(r.l_kd, 0.0);
  EXPECT_EQ(r.l_total, r.l_sup);
  EXPECT_EQ(r.center_norm, 0.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const TrainConfig cfg = tiny_train();
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(8);
  const auto views = epoch_views(tiny_data(4), cfg.views, 0, 0);
  train_step(model, st, pointers(views), cfg);
  const Checkpoint ck = make_checkpoint(model, st, config_hash(model.spec(), cfg));
  const auto dir = std::filesystem::temp_directory_path();
  save_checkpoint(ck, dir / "pacd_ck_a.bin");
  const Checkpoint back = load_checkpoint(dir / "pacd_ck_a.bin");
  EXPECT_EQ(back, ck);
  save_checkpoint(back, dir / "pacd_ck_b.bin");
  EXPECT_EQ(serialize_checkpoint(ck), serialize_checkpoint(back));

  const Dataset ds = tiny_data(4, 11);
  const EvalViewConfig ev{0.25, 0.5, 0.3, 16, 1};
  const DualEncoderState restored = restore_state(model, back);
  EXPECT_EQ(predict_dataset(model, restored.student, ds, ev), predict_dataset(model, st.student, ds, ev));
  EXPECT_EQ(restored.step, st.step);
  EXPECT_EQ(restored.kd.center, st.kd.center);

  const json manifest = shape_manifest(ck);
  EXPECT_EQ(manifest["student"]["reg.weight"], json({8, 3}));
}

TEST(Checkpoint, CorruptionIsDetected) {
  const TrainConfig cfg = tiny_train();
  const PacdModel model(make_model_spec(cfg, tiny_backbone(), 2, 24));
  const std::string bytes = serialize_checkpoint(make_checkpoint(model, model.init_state(9), 1));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), CheckpointError);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(flipped), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint("garbage"), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.bin"), IoError);
}

TEST(Fit, SmokeAndValidation) {
  TrainConfig cfg = tiny_train();
  const Dataset train = tiny_data(8), val = tiny_data(4, 99);
  const FitResult r = fit(train, val, cfg, tiny_backbone());
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_EQ(r.steps.size(), 2u);
  EXPECT_TRUE(std::isfinite(r.epochs[0].val.overall_rmse));
  cfg.batch_size = 9;
  EXPECT_THROW(fit(train, val, cfg, tiny_backbone()), Error);
  EXPECT_THROW(fit(Dataset{}, val, tiny_train(), tiny_backbone()), Error);
}

TEST(Fit, LabelPriorInitialization) {
  const Dataset train = tiny_data(8);
  const PacdModel model(make_model_spec(tiny_train(), tiny_backbone(), 2, 24));
  DualEncoderState st = model.init_state(1);
  init_label_prior(st.student, train);
  const auto p = model.predict(st.student, eval_view(train.samples[0], EvalViewConfig{0.25, 0.5, 0.3, 16, 1}));
  std::array<double, 3> mean{};
  for (const auto &y : train.labels)
    for (int j = 0; j < 3; ++j) mean[j] += y.as_array()[j] / 8.0;
  double total = 0.0;
  for (double m : mean) total += std::max(m, 1e-3);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(p.as_array()[j], std::max(mean[j], 1e-3) / total, 1e-12);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = tiny_train();
  c.weights.lambda_cl = 0.25;
  c.encoder = "cnn";
  const json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(json(back), j);
  json bad = j;
  bad["lamda_kd"] = 1;
  EXPECT_THROW(bad.get<TrainConfig>(), ConfigError);
  c.encoder = "rnn";
  EXPECT_THROW(c.validate(), ConfigError);
}
