#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace pacd;

namespace {

std::vector<TrMetrics> random_simplex(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<TrMetrics> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = g(rng), b = g(rng), c = g(rng), s = a + b + c;
    out.push_back({a / s, b / s, c / s});
  }
  return out;
}

Dataset small_data(std::size_t n, std::uint64_t seed = 5) {
  SynthConfig s;
  s.n_samples = n;
  s.d_days = 2;
  s.t_slots = 48;
  s.seed = seed;
  return synth_cgm(s);
}

} // namespace

TEST(Metrics, PerfectAndMeanPredictors) {
  const auto y = random_simplex(20, 1);
  const EvalReport r = metric_suite(y, y);
  for (int j = 0; j < 3; ++j) {
    EXPECT_EQ(r.rmse[j], 0.0);
    EXPECT_EQ(r.mae[j], 0.0);
    EXPECT_EQ(*r.r2[j], 1.0);
  }
  TrMetrics mean{};
  for (const auto &t : y) {
    mean.tar += t.tar / 20;
    mean.tir += t.tir / 20;
    mean.tbr += t.tbr / 20;
  }
  const EvalReport m = metric_suite(std::vector<TrMetrics>(20, mean), y);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(*m.r2[j], 0.0, 1e-12);
}

TEST(Metrics, HandArithmetic) {
  const std::vector<TrMetrics> truth{{0.2, 0.7, 0.1}, {0.4, 0.5, 0.1}};
  const std::vector<TrMetrics> pred{{0.3, 0.6, 0.1}, {0.3, 0.6, 0.1}};
  const EvalReport r = metric_suite(pred, truth);
  EXPECT_NEAR(r.rmse[0], 0.1, 1e-12);
  EXPECT_NEAR(r.mae[0], 0.1, 1e-12);
  EXPECT_NEAR(*r.r2[0], 0.0, 1e-12);
  EXPECT_FALSE(r.r2[2].has_value()); // constant tbr truth
  EXPECT_EQ(r.undefined_r2, 1u);
  EXPECT_NEAR(*r.overall_r2, (*r.r2[0] + *r.r2[1]) / 2.0, 1e-15);
}

TEST(Metrics, MatchesLongDoubleReimplementation) {
  const auto y = random_simplex(50, 2), p = random_simplex(50, 3);
  const EvalReport r = metric_suite(p, y);
  double overall = 0.0;
  for (int j = 0; j < 3; ++j) {
    long double mean = 0, sse = 0, sae = 0, sst = 0;
    for (const auto &t : y) mean += t.as_array()[j];
    mean /= 50;
    for (int i = 0; i < 50; ++i) {
      const long double d = y[i].as_array()[j] - p[i].as_array()[j];
      sse += d * d;
      sae += std::fabs(d);
      sst += (y[i].as_array()[j] - mean) * (y[i].as_array()[j] - mean);
    }
    EXPECT_NEAR(r.rmse[j], static_cast<double>(std::sqrt(sse / 50)), 1e-12);
    EXPECT_NEAR(r.mae[j], static_cast<double>(sae / 50), 1e-12);
    EXPECT_NEAR(*r.r2[j], static_cast<double>(1 - sse / sst), 1e-12);
    overall += r.rmse[j];
  }
  EXPECT_EQ(r.overall_rmse, overall / 3.0);
  EXPECT_THROW(metric_suite(p, random_simplex(49, 4)), Error);
}

TEST(Baseline, CompleteObservationIsExact) {
  const Dataset ds = small_data(12);
  const BaselineResult b = run_baseline(ds, 1.0, 3);
  EXPECT_EQ(b.report.overall_rmse, 0.0);
  EXPECT_EQ(*b.report.overall_r2, 1.0);
  EXPECT_TRUE(b.excluded.empty());
}

TEST(Baseline, DeterministicAndExcludesEmptyViews) {
  const Dataset ds = small_data(12);
  EXPECT_EQ(run_baseline(ds, 0.1, 4).table, run_baseline(ds, 0.1, 4).table);
  EXPECT_NE(run_baseline(ds, 0.1, 4).table, run_baseline(ds, 0.1, 5).table);
  // 0.1% of 96 cells rounds to zero: every sample is excluded, nothing to score
  EXPECT_THROW(run_baseline(ds, 0.001, 4), Error);
}

TEST(SignTestTest, BinomialTails) {
  EXPECT_NEAR(binomial_upper_tail(10, 10), std::pow(0.5, 10), 1e-15);
  EXPECT_NEAR(binomial_upper_tail(0, 10), 1.0, 1e-15);
  EXPECT_NEAR(binomial_upper_tail(9, 10), 11.0 / 1024.0, 1e-15);
  const SignTest t = sign_test({0.1, 0.2, -0.1, 0.0, 0.3});
  EXPECT_EQ(t.positive, 3u);
  EXPECT_EQ(t.negative, 1u);
  EXPECT_EQ(t.ties, 1u);
  EXPECT_NEAR(t.p_value, 5.0 / 16.0, 1e-15);
}

TEST(Bias, DirectionOfSparseBaseline) {
  SynthConfig s;
  s.n_samples = 240;
  s.noise_sd = 1.0;
  const Dataset ds = synth_cgm(s);
  const BaselineResult b = run_baseline(ds, 0.03, 1, 1.0);
  const BiasSummary bias = bias_summary(b.table);
  EXPECT_GT(bias.mean_bias[0], 0.0);
  EXPECT_LT(bias.mean_bias[1], 0.0);
  EXPECT_LT(bias.tar_over.p_value, 0.01);
  EXPECT_LT(bias.tir_under.p_value, 0.01);
}

TEST(Scatter, RoundTripAndRowCount) {
  const Dataset ds = small_data(5);
  const BaselineResult b = run_baseline(ds, 0.5, 2);
  std::stringstream ss;
  export_scatter(b.table, ss);
  std::string line;
  std::size_t rows = 0;
  std::stringstream copy(ss.str());
  std::getline(copy, line);
  EXPECT_EQ(line, kScatterHeader);
  while (std::getline(copy, line)) ++rows;
  EXPECT_EQ(rows, 15u);
  EXPECT_EQ(read_scatter(ss), b.table);

  PredictionTable perfect = b.table;
  for (auto &r : perfect) r.prediction = r.truth;
  std::stringstream p;
  export_scatter(perfect, p);
  for (const auto &r : read_scatter(p)) EXPECT_EQ(r.prediction, r.truth);

  std::stringstream bad("sample_id,metric,truth,prediction\na,tar,0.1\n");
  EXPECT_THROW(read_scatter(bad), ParseError);
}

TEST(Tables, JsonRoundTrip) {
  const BaselineResult b = run_baseline(small_data(4), 0.5, 2);
  EXPECT_EQ(prediction_table_from_json(to_json(b.table)), b.table);
}

TEST(Sweeps, ShapesAndPreconditions) {
  EXPECT_EQ(kDefaultViewCombos.size(), 7u);
  EXPECT_EQ(kDefaultViewCombos[0].n_t, 2u);
  EXPECT_EQ(kDefaultViewCombos[0].n_s, 4u);
  EXPECT_EQ(kDefaultViewCombos[6].n_t, 3u);
  EXPECT_EQ(kDefaultViewCombos[6].n_s, 6u);
  EXPECT_EQ(kDefaultAlphaT, (std::vector<double>{0.10, 0.30, 0.50, 0.70}));

  const auto v = ablation_variants(TrainConfig{});
  EXPECT_EQ(v[0].encoder, "cnn");
  EXPECT_EQ(v[0].weights.lambda_kd, 0.0);
  EXPECT_EQ(v[1].weights.lambda_cl, 0.0);
  EXPECT_EQ(v[2].weights.lambda_kd, 1.0);
  EXPECT_EQ(v[2].weights.lambda_cl, 0.0);
  EXPECT_EQ(v[3].weights.lambda_cl, 1.0);

  ExperimentConfig ec;
  const Dataset d = small_data(8);
  EXPECT_THROW(sweep_views(ec, d, d, {{1, 1}}, {0}), ConfigError);
  EXPECT_THROW(sweep_alpha_t(ec, d, d, {0.02}, {0}), ConfigError);
}

TEST(Sweeps, SingleCellEqualsDirectRun) {
  ExperimentConfig ec;
  ec.data.n_samples = 16;
  ec.data.d_days = 2;
  ec.data.t_slots = 24;
  ec.train.epochs = 1;
  ec.train.batch_size = 4;
  ec.train.kd_dim = 8;
  ec.train.kd_hidden = 8;
  ec.train.views.alpha_s = 0.25;
  ec.train.views.n_s = 2;
  ec.backbone.embed_dim = 8;
  ec.backbone.depths = {1};
  ec.backbone.num_heads = {2};
  ec.backbone.window = {2, 3};
  const auto [train, val] = experiment_data(ec);
  const SweepResult s = sweep_alpha_t(ec, train, val, {0.5}, {0});
  ASSERT_EQ(s.cells.size(), 1u);
  EXPECT_EQ(s.cells[0].label, "T1");
  const RunOutcome direct = run_once(train, val, ec.train, ec.backbone, 0);
  EXPECT_EQ(s.cells[0].runs[0].report.overall_rmse, direct.report.overall_rmse);
  EXPECT_EQ(s.cells[0].overall_rmse.mean, direct.report.overall_rmse);
  EXPECT_EQ(s.cells[0].overall_rmse.sd, 0.0);

  const json j = to_json(s);
  EXPECT_EQ(j["axis"], "alpha_t");
  EXPECT_FALSE(format_table(s).empty());
}

TEST(Stats, SampleSd) {
  const RunStats s = run_stats({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.sd, 1.0);
  EXPECT_EQ(run_stats({4.0}).sd, 0.0);
}
