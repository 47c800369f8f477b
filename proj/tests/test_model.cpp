#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "bvit/model.hpp"

using namespace bvit;

namespace {

FloatTensor random_images(std::size_t b, const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  FloatTensor x({b, cfg.img_size, cfg.img_size, cfg.in_channels});
  for (auto& v : x.values()) v = nd(rng);
  return x;
}

std::vector<std::pair<std::string, FloatTensor>> snapshot(Model<float>& m) {
  std::vector<std::pair<std::string, FloatTensor>> out;
  m.for_each_param([&](const std::string& n, Param<float>& p) { out.emplace_back(n, p.value); });
  return out;
}

std::string config_error_message(const ModelConfig& cfg) {
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Two short stages on 16 x 16 inputs.
ModelConfig small_config() {
  ModelConfig c;
  c.img_size = 16;
  c.num_classes = 5;
  c.stages = {{8, 2, 2, 2, 1, 4}, {16, 1, 2, 2, 1, 2}};
  return c;
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
  for (const auto& c : {presets::binaryvit(), presets::binaryvit_star(), presets::deit_s_baseline(), presets::tiny_pyramid()})
    EXPECT_NO_THROW(c.validate()) << c.name;
  EXPECT_EQ(presets::binaryvit().total_downsample(), 32u);
}

TEST(ModelConfig, BinaryViTArchitecture) {
  const auto c = presets::binaryvit();
  ASSERT_EQ(c.stages.size(), 4u);
  const std::size_t dims[] = {64, 128, 256, 512}, red[] = {8, 4, 1, 1}, heads[] = {1, 2, 4, 8}, exp[] = {8, 8, 4, 4},
                    blocks[] = {3, 4, 8, 4};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.stages[i].dim, dims[i]);
    EXPECT_EQ(c.stages[i].reduction, red[i]);
    EXPECT_EQ(c.stages[i].heads, heads[i]);
    EXPECT_EQ(c.stages[i].ffn_expansion, exp[i]);
    EXPECT_EQ(c.stages[i].blocks, blocks[i]);
  }
  EXPECT_EQ(c.pooling, Pooling::global_avg);
}

TEST(ModelConfig, ViolationsNameTheConstraint) {
  auto c = small_config();
  c.stages[0].heads = 3;
  EXPECT_NE(config_error_message(c).find("not divisible by heads"), std::string::npos);
  c = small_config();
  c.img_size = 18;
  EXPECT_NE(config_error_message(c).find("cumulative downsample"), std::string::npos);
  c = small_config();
  c.stages[0].reduction = 3;
  EXPECT_NE(config_error_message(c).find("reduction 3"), std::string::npos);
  c = small_config();
  c.pooling = Pooling::cls_token;
  EXPECT_NE(config_error_message(c).find("single-stage"), std::string::npos);
  c = small_config();
  c.stages[1].dim = 24;
  EXPECT_NE(config_error_message(c).find("integer channel ratio"), std::string::npos);
  c = small_config();
  c.stages.clear();
  EXPECT_NE(config_error_message(c).find("at least one stage"), std::string::npos);
  EXPECT_THROW(Model<float>{c}, ConfigError);
}

TEST(Model, ParameterCountsNearPublishedSizes) {
  const double vit = static_cast<double>(Model<float>(presets::binaryvit()).num_params());
  const double deit = static_cast<double>(Model<float>(presets::deit_s_baseline()).num_params());
  EXPECT_NEAR(vit / 22.6e6, 1.0, 0.02);
  EXPECT_NEAR(deit / 22.1e6, 1.0, 0.01);
}

TEST(Model, StageGridsFollowDownsampleSchedule) {
  const Model<float> m(presets::binaryvit());
  const auto grids = m.stage_grids();
  ASSERT_EQ(grids.size(), 4u);
  const std::size_t sides[] = {56, 28, 14, 7};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(grids[i].h, sides[i]);
    EXPECT_EQ(grids[i].w, sides[i]);
    EXPECT_EQ(grids[i].tokens(), 224u * 224u / (16u << (2 * i)));
  }
  const auto d = Model<float>(presets::deit_s_baseline()).stage_grids();
  EXPECT_EQ(d[0].tokens(), 197u);
}

TEST(Model, ImageNetLogitsAndInferPurity) {
  const auto cfg = presets::binaryvit();
  const Model<float> m = build_model<float>(cfg, 3);
  const FloatTensor x = random_images(1, cfg, 4);
  const FloatTensor a = m.forward(x, Ctx<float>{});
  EXPECT_EQ(a.shape(), (Shape{1, 1000}));
  EXPECT_EQ(m.forward(x, Ctx<float>{}), a);
  for (float v : a.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, SameSeedSameWeights) {
  auto a = build_model<float>(small_config(), 7), b = build_model<float>(small_config(), 7), c = build_model<float>(small_config(), 8);
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_NE(snapshot(a), snapshot(c));
}

TEST(Model, WrongImageShapeThrows) {
  const auto m = build_model<float>(small_config(), 1);
  EXPECT_THROW(m.forward(FloatTensor({1, 8, 8, 3}), Ctx<float>{}), ShapeError);
  EXPECT_THROW(m.forward(FloatTensor({1, 16, 16, 1}), Ctx<float>{}), ShapeError);
}

TEST(Model, BatchRowsAreIndependentInInference) {
  const auto cfg = small_config();
  const auto m = build_model<float>(cfg, 2);
  const FloatTensor x = random_images(3, cfg, 5);
  const FloatTensor all = m.forward(x, Ctx<float>{});
  const std::size_t img = cfg.img_size * cfg.img_size * cfg.in_channels;
  for (std::size_t b = 0; b < 3; ++b) {
    FloatTensor one({1, cfg.img_size, cfg.img_size, cfg.in_channels});
    std::copy_n(x.storage().begin() + static_cast<long>(b * img), img, one.storage().begin());
    const FloatTensor y = m.forward(one, Ctx<float>{});
    for (std::size_t k = 0; k < cfg.num_classes; ++k) EXPECT_EQ(y[k], all(b, k));
  }
}

TEST(Model, ZeroLayerScaleLeavesOnlyTheSkipPath) {
  const auto cfg = small_config();
  auto m = build_model<float>(cfg, 9);
  m.for_each_param([](const std::string& n, Param<float>& p) {
    if (n.find(".ls") != std::string::npos) p.value.fill(0.0f);
  });
  const FloatTensor x = random_images(2, cfg, 10);
  const FloatTensor y = m.forward(x, Ctx<float>{});

  auto skip_only = m;
  for (auto& st : skip_only.stages()) st.blocks.clear();
  EXPECT_EQ(skip_only.forward(x, Ctx<float>{}), y);

  // Scrambling everything inside the blocks changes nothing.
  std::mt19937_64 rng(11);
  std::normal_distribution<float> nd;
  m.for_each_param([&](const std::string& n, Param<float>& p) {
    if (n.find(".block") != std::string::npos && n.find(".ls") == std::string::npos && !n.ends_with("alpha_p"))
      for (auto& v : p.value.values()) v = nd(rng);
  });
  EXPECT_EQ(m.forward(x, Ctx<float>{}), y);
}

TEST(Model, ClassTokenReadoutIgnoresOtherRows) {
  auto cfg = presets::deit_s_baseline();
  auto m = build_model<float>(cfg, 12);
  std::mt19937_64 rng(13);
  std::normal_distribution<float> nd;
  for (auto& v : m.final_bn().running_mean.values()) v = nd(rng);
  const Grid g{2, 14, 14, true};
  FloatTensor h = FloatTensor::matrix(g.rows(), 384);
  for (auto& v : h.values()) v = nd(rng);
  auto tail = [&](const FloatTensor& t) { return m.head().forward(cls_pool(m.final_bn().forward(t, Ctx<float>{}, nullptr), g), Ctx<float>{}, nullptr); };
  const FloatTensor y = tail(h);
  FloatTensor h2 = h;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t t = 1; t < g.tokens(); ++t)
      for (std::size_t k = 0; k < 384; ++k) h2(b * g.tokens() + t, k) += 5 * nd(rng);
  EXPECT_EQ(tail(h2), y);
}

TEST(Model, GlobalAverageReadoutIsPermutationInvariant) {
  const auto cfg = small_config();
  auto m = build_model<float>(cfg, 14);
  std::mt19937_64 rng(15);
  std::normal_distribution<float> nd;
  const Grid g{1, 2, 2, false};
  FloatTensor h = FloatTensor::matrix(g.rows(), 16);
  for (auto& v : h.values()) v = nd(rng);
  auto tail = [&](const FloatTensor& t) { return m.head().forward(global_avg_pool(m.final_bn().forward(t, Ctx<float>{}, nullptr), g), Ctx<float>{}, nullptr); };
  const FloatTensor y = tail(h);
  const std::size_t perm[] = {2, 0, 3, 1};
  FloatTensor hp = h;
  for (std::size_t t = 0; t < 4; ++t) std::copy_n(&h(perm[t], 0), 16, &hp(t, 0));
  const FloatTensor yp = tail(hp);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(yp[i], y[i], 1e-5f);
}

TEST(Model, TrainStepProducesFiniteGradientsForEveryParameter) {
  const auto cfg = small_config();
  auto m = build_model<float>(cfg, 16);
  const Ctx<float> ctx{Mode::train};
  Model<float>::Cache cache;
  const FloatTensor logits = m.forward(random_images(4, cfg, 17), ctx, &cache);
  FloatTensor d(logits.shape(), 0.25f);
  m.zero_grad();
  m.backward(d, cache, ctx);
  std::size_t nonzero = 0, total = 0;
  m.for_each_param([&](const std::string& n, Param<float>& p) {
    ++total;
    bool any = false;
    for (float g : p.grad.values()) {
      EXPECT_TRUE(std::isfinite(g)) << n;
      any |= g != 0.0f;
    }
    nonzero += any;
  });
  EXPECT_GT(nonzero, total / 2);
}

TEST(Model, FreezeKeepsInferenceOutputs) {
  const auto cfg = small_config();
  auto m = build_model<float>(cfg, 18);
  const FloatTensor x = random_images(2, cfg, 19);
  const FloatTensor y = m.forward(x, Ctx<float>{});
  const std::size_t params = m.num_params();
  m.freeze();
  EXPECT_EQ(m.forward(x, Ctx<float>{}), y);
  EXPECT_EQ(m.num_params(), params);
}

TEST(Model, NormalizePixels) {
  const auto cfg = presets::tiny_pyramid();
  std::vector<std::uint8_t> px(32 * 32 * 3, 0);
  px[0] = 255;
  const FloatTensor t = normalize_pixels<float>(px, 1, cfg);
  EXPECT_NEAR(t[0], (255 - 123.675) / 58.395, 1e-5);
  EXPECT_NEAR(t[1], -116.28 / 57.12, 1e-5);
  EXPECT_THROW(normalize_pixels<float>(std::span<const std::uint8_t>(px).subspan(1), 1, cfg), ShapeError);
}
