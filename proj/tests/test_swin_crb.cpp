#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace pacd;
using testutil::random_tensor;

namespace {

CompositeView random_view(std::size_t D, std::size_t T, std::uint64_t seed, double alpha = 0.3) {
  std::mt19937_64 r(seed);
  std::uniform_real_distribution<double> u(50, 350);
  Matrix m(D, T);
  for (auto &v : m.data) v = u(r);
  const CgmSample s = validate_cgm(m, D, T, "v" + std::to_string(seed), "p");
  Rng rng(seed);
  return make_student_view(s, alpha, 0.5, 0.3, positional_encoding(D, T, 16), rng);
}

BackboneConfig tiny() {
  BackboneConfig c;
  c.embed_dim = 8;
  c.depths = {1, 1};
  c.num_heads = {2, 2};
  c.window = {2, 3};
  return c;
}

} // namespace

TEST(Geometry, DefaultConfigShapes) {
  const auto geo = stage_geometry(BackboneConfig{}, 14, 288);
  ASSERT_EQ(geo.size(), 2u);
  EXPECT_EQ(geo[0].H, 14u);
  EXPECT_EQ(geo[0].W, 72u);
  EXPECT_EQ(geo[0].C, 32u);
  EXPECT_EQ(geo[0].sd, 3u);
  EXPECT_EQ(geo[0].st, 4u);
  EXPECT_EQ(geo[1].H, 7u);
  EXPECT_EQ(geo[1].W, 36u);
  EXPECT_EQ(geo[1].C, 64u);
  EXPECT_EQ(geo[1].sd, 0u); // window covers the whole day axis
}

TEST(Geometry, RejectsIncompatibleConfigs) {
  EXPECT_THROW(stage_geometry(BackboneConfig{}, 14, 100), ConfigError);
  BackboneConfig c;
  c.num_heads = {3, 4};
  EXPECT_THROW(stage_geometry(c, 14, 288), ConfigError);
  c = BackboneConfig{};
  c.window = {4, 9};
  EXPECT_THROW(stage_geometry(c, 14, 288), ConfigError);
  c = BackboneConfig{};
  c.depths = {1, 1, 1};
  c.num_heads = {4, 4, 4};
  EXPECT_THROW(stage_geometry(c, 14, 288), ConfigError); // 7 rows cannot be merged
}

TEST(Windows, PartitionReverseRoundTrip) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t wd = 1 + rng() % 4, wt = 1 + rng() % 5;
    const std::size_t H = wd * (1 + rng() % 4), W = wt * (1 + rng() % 4), C = 1 + rng() % 3;
    const Tensor x = random_tensor({H, W, C}, rng());
    const auto wins = window_partition(x, wd, wt);
    ASSERT_EQ(wins.size(), (H / wd) * (W / wt));
    EXPECT_EQ(window_reverse(wins, H, W), x);
  }
  EXPECT_THROW(window_partition(Tensor({5, 6, 1}), 2, 3), ConfigError);
}

TEST(Windows, ShiftedIndexIsAPermutation) {
  const auto idx = window_partition_index(14, 72, 7, 9, 3, 4);
  std::vector<std::size_t> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  const auto inv = invert_permutation(idx);
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(inv[idx[i]], i);
}

TEST(Windows, RegionIdsSeparateWrappedBands) {
  // 4x4 grid, 2x2 windows, shift 1: the last window mixes wrapped rows/cols
  const auto ids = shift_region_ids(4, 4, 2, 2, 1, 1);
  const std::vector<int> last(ids.end() - 4, ids.end());
  EXPECT_EQ(last, (std::vector<int>{4, 5, 7, 8}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ids[i], 0);
}

TEST(Attention, RowsSumToOneAndMaskIsExact) {
  const std::size_t H = 4, W = 6, C = 8, wd = 2, wt = 3;
  const auto layout = WindowLayout::make(H, W, wd, wt, 1, 1);
  Graph g(false);
  std::vector<double> probs;
  Var x = g.input(random_tensor({H * W, 3 * C}, 3));
  ad::window_attention(ad::gather_rows(x, layout.forward), wd * wt, 2, layout.region, &probs);
  const std::size_t n = wd * wt, nw = H * W / n;
  ASSERT_EQ(probs.size(), nw * 2 * n * n);
  std::size_t blocked = 0;
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = probs[((w * 2 + h) * n + i) * n + j];
          sum += p;
          if ((*layout.region)[w * n + i] != (*layout.region)[w * n + j]) {
            EXPECT_EQ(p, 0.0);
            ++blocked;
          }
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  EXPECT_GT(blocked, 0u);
}

TEST(PatchOps, EmbedAndMergeShapes) {
  const BackboneConfig cfg;
  ParamStore ps;
  Rng rng(1);
  SwinCrbEncoder enc(cfg, 14, 288);
  enc.init_params(ps, rng);
  Graph g(false);
  const TokenGrid z = patch_embed(g, ps, random_view(14, 288, 2).to_tensor(), cfg);
  EXPECT_EQ(ad::val(z.tokens).shape, (std::vector<std::size_t>{14 * 72, 32}));
  EXPECT_EQ(z.H, 14u);
  EXPECT_EQ(z.W, 72u);
  const TokenGrid m = patch_merge(g, ps, "backbone.stage1.merge", z);
  EXPECT_EQ(ad::val(m.tokens).shape, (std::vector<std::size_t>{7 * 36, 64}));
  EXPECT_EQ(m.stage_index, 1u);
}

TEST(PatchOps, MergeGathersTwoByTwo) {
  const auto idx = patch_merge_index(2, 4);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 4, 5, 2, 3, 6, 7}));
  EXPECT_THROW(patch_merge_index(3, 4), ConfigError);
}

TEST(Encoder, FeatureShapeAndDeterminism) {
  SwinCrbEncoder enc(tiny(), 4, 24);
  ParamStore ps;
  Rng rng(4);
  enc.init_params(ps, rng);
  const CompositeView v = random_view(4, 24, 9);
  Graph g1(false), g2(false);
  const Tensor f1 = ad::val(enc.encode(g1, ps, v.to_tensor()));
  const Tensor f2 = ad::val(enc.encode(g2, ps, v.to_tensor()));
  EXPECT_EQ(f1.shape, (std::vector<std::size_t>{16}));
  EXPECT_EQ(f1, f2);
  for (double x : f1.data) EXPECT_TRUE(std::isfinite(x));
  EXPECT_THROW(enc.encode(g1, ps, random_view(4, 12, 1).to_tensor()), ConfigError);
}

TEST(Encoder, ParameterGradientsMatchFiniteDifferences) {
  SwinCrbEncoder enc(tiny(), 4, 24);
  ParamStore ps;
  Rng rng(6);
  enc.init_params(ps, rng);
  const Tensor theta = random_view(4, 24, 10).to_tensor();
  const Tensor probe = random_tensor({16}, 11);
  auto loss = [&](const ParamStore &p) {
    Graph g(false);
    const Tensor f = ad::val(enc.encode(g, p, theta));
    double s = 0.0;
    for (std::size_t i = 0; i < 16; ++i) s += f.data[i] * probe.data[i];
    return s;
  };
  Graph g(true);
  Var f = enc.encode(g, ps, theta);
  g.backward(f, probe);
  const auto grads = g.param_grads(ps.size());
  for (const std::string name : {"backbone.embed.conv1.weight", "backbone.stage0.pair0.blk1.attn.qkv.weight",
                                 "backbone.stage0.pair0.blk0.crb.weight", "backbone.stage1.merge.weight",
                                 "backbone.stage1.pair0.blk1.mlp.fc1.bias", "backbone.norm.gamma"}) {
    const std::size_t i = ps.index(name);
    ParamStore work = ps;
    auto fd = testutil::numeric_grad(
        [&](const Tensor &t) {
          work.value(i) = t;
          return loss(work);
        },
        ps.value(i));
    std::vector<double> sub_fd, sub_an;
    for (std::size_t k = 0; k < fd.size(); k += std::max<std::size_t>(1, fd.size() / 40)) {
      sub_fd.push_back(fd[k]);
      sub_an.push_back(grads[i].data[k]);
    }
    EXPECT_LT(testutil::max_rel_err(sub_an, sub_fd), 1e-4) << name;
  }
}

TEST(Encoder, ResidualBranchStartsNearIdentity) {
  SwinCrbEncoder enc(tiny(), 4, 24);
  ParamStore ps;
  Rng rng(7);
  enc.init_params(ps, rng);
  const Tensor &w = ps["backbone.stage0.pair0.blk0.crb.weight"];
  const std::size_t c = 8;
  for (std::size_t i = 0; i < c; ++i) EXPECT_NEAR(w.data[(4 * c + i) * c + i], 1.0, 0.2);
}

TEST(CnnEncoder, MatchedBudgetAndShape) {
  SwinCrbEncoder swin(BackboneConfig{}, 14, 288);
  ParamStore sp;
  Rng rng(1);
  swin.init_params(sp, rng);
  const std::size_t budget = sp.numel();
  CnnEncoder cnn(CnnEncoder::matched_channels(budget));
  const double ratio = static_cast<double>(CnnEncoder::param_count(cnn.channels())) / budget;
  EXPECT_GT(ratio, 0.8);
  EXPECT_LT(ratio, 1.2);
  ParamStore cp;
  cnn.init_params(cp, rng);
  Graph g(false);
  EXPECT_EQ(ad::val(cnn.encode(g, cp, random_view(14, 288, 3).to_tensor())).numel(), cnn.feature_dim());
}
