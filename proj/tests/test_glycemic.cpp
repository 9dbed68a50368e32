#include <gtest/gtest.h>

#include <limits>

#include "test_util.hpp"

using namespace pacd;

namespace {

CgmSample row(std::vector<double> g) {
  Matrix m(1, g.size());
  m.data = std::move(g);
  return validate_cgm(m, 1, m.cols);
}

} // namespace

TEST(ComputeTr, HandCountedMixedRow) {
  const TrMetrics r = compute_tr(row({60, 100, 190, 150}));
  EXPECT_DOUBLE_EQ(r.tar, 0.25);
  EXPECT_DOUBLE_EQ(r.tir, 0.50);
  EXPECT_DOUBLE_EQ(r.tbr, 0.25);
}

TEST(ComputeTr, AllInRange) {
  EXPECT_EQ(compute_tr(testutil::constant_sample(7, 288, 100.0)), (TrMetrics{0, 1, 0}));
}

TEST(ComputeTr, BoundsAreInclusive) {
  EXPECT_EQ(compute_tr(row({70, 180})), (TrMetrics{0, 1, 0}));
  EXPECT_EQ(compute_tr(row({69.999, 180.001})), (TrMetrics{0.5, 0, 0.5}));
}

TEST(ComputeTr, CustomThresholds) {
  Thresholds th{100, 150};
  const TrMetrics r = compute_tr(row({60, 100, 190, 150}), th);
  EXPECT_DOUBLE_EQ(r.tar, 0.25);
  EXPECT_DOUBLE_EQ(r.tir, 0.5);
  EXPECT_DOUBLE_EQ(r.tbr, 0.25);
  EXPECT_THROW(compute_tr(row({100}), Thresholds{180, 70}), ConfigError);
}

TEST(NoInterpBaseline, Examples) {
  const std::vector<double> a{65, 100};
  EXPECT_EQ(no_interp_baseline(a), (TrMetrics{0, 0.5, 0.5}));
  const std::vector<double> b{100, 120, 150};
  EXPECT_EQ(no_interp_baseline(b), (TrMetrics{0, 1, 0}));
  EXPECT_THROW(no_interp_baseline(std::vector<double>{}), Error);
}

TEST(NoInterpBaseline, FullGridRecoversCgmTr) {
  SynthConfig sc;
  sc.n_samples = 5;
  sc.d_days = 2;
  const Dataset ds = synth_cgm(sc);
  for (const auto &s : ds.samples) EXPECT_EQ(no_interp_baseline(s.grid.data), compute_tr(s));
}

TEST(ValidateCgm, AcceptsWellFormedGrid) {
  const CgmSample s = testutil::constant_sample(7, 288, 100.0);
  EXPECT_EQ(s.d_days(), 7u);
  EXPECT_EQ(s.t_slots(), 288u);
}

TEST(ValidateCgm, NanCitesCell) {
  Matrix m(7, 288, 100.0);
  m(2, 10) = std::numeric_limits<double>::quiet_NaN();
  try {
    validate_cgm(m, 7, 288);
    FAIL() << "expected a validation error";
  } catch (const ValidationError &e) {
    EXPECT_EQ(e.row, 2);
    EXPECT_EQ(e.col, 10);
    EXPECT_NE(std::string(e.what()).find("(2,10)"), std::string::npos);
  }
}

TEST(ValidateCgm, RejectsShapeMismatchAndImplausibleValues) {
  EXPECT_THROW(validate_cgm(Matrix(7, 287, 100.0), 7, 288), ValidationError);
  EXPECT_THROW(validate_cgm(Matrix(1, 3, 0.0), 1, 3), ValidationError);
  EXPECT_THROW(validate_cgm(Matrix(1, 3, -5.0), 1, 3), ValidationError);
  EXPECT_THROW(validate_cgm(Matrix(1, 3, 5000.0), 1, 3), ValidationError);
}

TEST(ComputeTr, SimplexOnRandomGrids) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> g(40, 400);
  for (int k = 0; k < 200; ++k) {
    Matrix m(3, 12);
    for (auto &v : m.data) v = g(rng);
    EXPECT_NEAR(compute_tr(validate_cgm(m)).sum(), 1.0, 1e-12);
  }
}
