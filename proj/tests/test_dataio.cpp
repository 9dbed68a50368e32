#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace pacd;

namespace {

SynthConfig flat(double mean) {
  SynthConfig c;
  c.n_samples = 6;
  c.d_days = 2;
  c.t_slots = 48;
  c.noise_sd = 0;
  c.meal_count_per_day = {0, 0};
  c.hypo_event_rate = 0;
  c.baseline_mean = mean;
  c.baseline_sd = 0;
  return c;
}

std::string csv_of(const Dataset &ds) {
  std::ostringstream o;
  write_cgm_csv(o, ds);
  return o.str();
}

} // namespace

TEST(Synth, DegenerateGeneratorIsConstant) {
  const Dataset ds = synth_cgm(flat(100));
  ASSERT_EQ(ds.size(), 6u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double g : ds.samples[i].grid.data) EXPECT_EQ(g, 100.0);
    EXPECT_EQ(ds.labels[i], (TrMetrics{0, 1, 0}));
  }
}

TEST(Synth, HighBaselineIsAllAbove) {
  const Dataset ds = synth_cgm(flat(220));
  for (const auto &l : ds.labels) EXPECT_EQ(l, (TrMetrics{1, 0, 0}));
  for (const auto &s : ds.samples) EXPECT_EQ(compute_tr(s), (TrMetrics{1, 0, 0}));
}

TEST(Synth, DeterministicAndSeedSensitive) {
  SynthConfig c;
  c.n_samples = 4;
  c.d_days = 2;
  EXPECT_EQ(synth_cgm(c), synth_cgm(c));
  SynthConfig d = c;
  d.seed = 99;
  EXPECT_NE(synth_cgm(c).samples[0].grid, synth_cgm(d).samples[0].grid);
}

TEST(Synth, OutputPassesValidationAndSpansRanges) {
  SynthConfig c;
  c.n_samples = 200;
  c.d_days = 2;
  const Dataset ds = synth_cgm(c);
  check_dataset(ds);
  std::size_t below_full = 0, with_tar = 0, with_tbr = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double g : ds.samples[i].grid.data) {
      EXPECT_GE(g, 40.0);
      EXPECT_LE(g, 400.0);
    }
    EXPECT_EQ(compute_tr(ds.samples[i]), ds.labels[i]);
    below_full += ds.labels[i].tir < 1.0;
    with_tar += ds.labels[i].tar > 0.0;
    with_tbr += ds.labels[i].tbr > 0.0;
  }
  EXPECT_GT(below_full, 150u);
  EXPECT_GT(with_tar, 100u);
  EXPECT_GT(with_tbr, 10u);
}

TEST(Synth, RejectsInvalidConfig) {
  SynthConfig c;
  c.n_samples = 0;
  EXPECT_THROW(synth_cgm(c), ConfigError);
  c = {};
  c.hypo_event_rate = 1.5;
  EXPECT_THROW(synth_cgm(c), ConfigError);
  c = {};
  c.noise_sd = -1;
  EXPECT_THROW(synth_cgm(c), ConfigError);
}

TEST(Csv, SingleConstantSample) {
  std::ostringstream o;
  o << kCgmCsvHeader << '\n';
  for (int t = 0; t < 288; ++t) o << "x,p,0," << t << ",100\n";
  std::istringstream in(o.str());
  const Dataset ds = load_cgm_csv(in, 1, 288);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], (TrMetrics{0, 1, 0}));
  EXPECT_EQ(ds.samples[0].subject_id, "p");
}

TEST(Csv, MissingCellRejectsSample) {
  std::ostringstream o;
  o << kCgmCsvHeader << '\n';
  for (int t = 0; t < 288; ++t)
    if (t != 5) o << "x,p,0," << t << ",100\n";
  for (int t = 0; t < 288; ++t) o << "y,q,0," << t << ",120\n";
  std::istringstream in(o.str());
  LoadReport rep;
  const Dataset ds = load_cgm_csv(in, 1, 288, &rep);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.samples[0].sample_id, "y");
  ASSERT_EQ(rep.rejected_samples, std::vector<std::string>{"x"});
  ASSERT_EQ(rep.missing_cells.size(), 1u);
  EXPECT_EQ(rep.missing_cells[0].sample_id, "x");
  EXPECT_EQ(rep.missing_cells[0].day, 0u);
  EXPECT_EQ(rep.missing_cells[0].slot, 5u);
}

TEST(Csv, BadNumberCitesLine) {
  std::ostringstream o;
  o << kCgmCsvHeader << '\n';
  for (int t = 0; t < 20; ++t) o << "x,p,0," << t << "," << (t == 15 ? "abc" : "100") << '\n';
  std::istringstream in(o.str());
  try {
    load_cgm_csv(in, 1, 20);
    FAIL() << "expected a parse error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line, 17u); // header is line 1, slot 15 is line 17
  }
}

TEST(Csv, StructuralErrors) {
  auto load = [](const std::string &s) {
    std::istringstream in(s);
    return load_cgm_csv(in, 1, 2);
  };
  const std::string h = std::string(kCgmCsvHeader) + "\n";
  EXPECT_THROW(load("wrong,header\n"), ParseError);
  EXPECT_THROW(load(h + "x,p,0,0\n"), ParseError);
  EXPECT_THROW(load(h + "x,p,0,0,100\nx,p,0,0,100\n"), ParseError);
  EXPECT_THROW(load(h + "x,p,0,0,100\nx,q,0,1,100\n"), ParseError);
  EXPECT_THROW(load(h + "x,p,0,7,100\n"), ParseError);
  EXPECT_THROW(load(h + "x,p,0,0,-3\n"), ParseError);
}

TEST(Csv, RoundTrip) {
  SynthConfig c;
  c.n_samples = 5;
  c.d_days = 2;
  c.t_slots = 24;
  const Dataset ds = synth_cgm(c);
  std::istringstream in(csv_of(ds));
  EXPECT_EQ(load_cgm_csv(in, 2, 24), ds);
}

TEST(Split, SubjectCounts) {
  SynthConfig c = flat(100);
  c.n_samples = 30;
  c.samples_per_subject = 3; // 10 subjects
  const Dataset ds = synth_cgm(c);
  const auto [tr, va] = split_subjects(ds, 0.2, 1);
  const auto vs = va.subject_ids(), ts = tr.subject_ids();
  EXPECT_EQ(vs.size(), 2u);
  EXPECT_EQ(ts.size(), 8u);
  EXPECT_EQ(tr.size() + va.size(), ds.size());
  for (const auto &s : vs) EXPECT_EQ(ts.count(s), 0u);
  const auto again = split_subjects(ds, 0.2, 1);
  EXPECT_EQ(again.first, tr);
  EXPECT_EQ(again.second, va);
}

TEST(Split, SingleSubjectFails) {
  SynthConfig c = flat(100);
  c.n_samples = 50;
  c.samples_per_subject = 50;
  EXPECT_THROW(split_subjects(synth_cgm(c), 0.2, 0), Error);
}

TEST(Split, DisjointForManySeeds) {
  SynthConfig c = flat(100);
  c.n_samples = 40;
  c.samples_per_subject = 2;
  const Dataset ds = synth_cgm(c);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto [tr, va] = split_subjects(ds, 0.3, s);
    const auto ts = tr.subject_ids();
    for (const auto &v : va.subject_ids()) EXPECT_EQ(ts.count(v), 0u);
  }
}

TEST(Mix, AddsSubsetOfExtra) {
  SynthConfig a = flat(100), b = flat(200);
  a.n_samples = 8;
  b.n_samples = 20;
  b.samples_per_subject = 2;
  b.seed = 5;
  const Dataset base = synth_cgm(a);
  Dataset extra = synth_cgm(b);
  for (auto &s : extra.samples) {
    s.sample_id = "e" + s.sample_id;
    s.subject_id = "e" + s.subject_id;
  }
  const Dataset m = mix_datasets(base, extra, 0.5, 3);
  EXPECT_EQ(m.size(), base.size() + 10);
}

TEST(Manifest, SummarisesDataset) {
  const Dataset ds = synth_cgm(flat(100));
  const auto j = dataset_manifest(ds);
  EXPECT_EQ(j.at("n_samples").get<std::size_t>(), 6u);
}
