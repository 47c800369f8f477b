#include <gtest/gtest.h>

#include <random>

#include "bvit/analysis.hpp"

using namespace bvit;

namespace {

constexpr const char* kResNet34 = R"(
first kernel=7 channels=3 max=255
layer name=stage1 kernel=3 din=64 count=3
aggregate name=pool1 factor=4
layer name=stage2 kernel=3 din=128 count=4
aggregate name=pool2 factor=4
layer name=stage3 kernel=3 din=256 count=6
aggregate name=pool3 factor=4
layer name=stage4 kernel=3 din=512 count=3
aggregate name=global factor=49
)";

CostReport sum_matching(const CostReport& r, const std::string& prefix) {
  CostReport s;
  for (const auto& l : r.per_layer)
    if (l.name.starts_with(prefix)) s.add(l);
  return s;
}

}  // namespace

TEST(Costs, OpsIdentity) {
  CostReport r;
  r.bops = 6'400'000'000ULL;
  r.flops = 100'000'000ULL;
  EXPECT_DOUBLE_EQ(r.ops(), 2e8);
  for (const auto& [name, make] : preset_table()) {
    const auto c = count_costs(make());
    EXPECT_EQ(c.ops(), static_cast<double>(c.bops) / 64.0 + static_cast<double>(c.flops)) << name;
  }
}

TEST(Costs, TotalsEqualPerLayerSums) {
  for (const auto& [name, make] : preset_table()) {
    const auto c = count_costs(make());
    std::uint64_t f = 0, b = 0, p = 0;
    for (const auto& l : c.per_layer) {
      f += l.flops;
      b += l.bops;
      p += l.params;
    }
    EXPECT_EQ(c.flops, f) << name;
    EXPECT_EQ(c.bops, b) << name;
    EXPECT_EQ(c.params, p) << name;
  }
}

TEST(Costs, ParamsMatchInstantiatedModel) {
  for (const auto& [name, make] : preset_table())
    EXPECT_EQ(count_costs(make()).params, Model<float>(make()).num_params()) << name;
}

TEST(Costs, DeitSBaselineHandCount) {
  const std::uint64_t n = 197, d = 384, hidden = 1536;
  const std::uint64_t flops = 196 * (16 * 16 * 3) * d + d * 1000;
  const std::uint64_t per_block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * hidden;
  const auto c = count_costs(presets::deit_s_baseline());
  EXPECT_EQ(c.flops, flops);
  EXPECT_EQ(c.bops, 12 * per_block);
  EXPECT_NEAR(static_cast<double>(c.flops) / 0.57e8, 1.0, 0.05);
  EXPECT_NEAR(static_cast<double>(c.bops) / 4.51e9, 1.0, 0.05);
}

TEST(Costs, BinaryViTStarNearPublished) {
  const auto c = count_costs(presets::binaryvit_star());
  EXPECT_NEAR(static_cast<double>(c.flops) / 0.95e8, 1.0, 0.10);
  EXPECT_NEAR(static_cast<double>(c.bops) / 3.75e9, 1.0, 0.10);
}

TEST(Costs, StageOneAttentionHandCount) {
  // 3136 query tokens, 49 reduced key/value tokens, D = 64.
  const auto c = count_costs(presets::binaryvit());
  const auto qk = std::find_if(c.per_layer.begin(), c.per_layer.end(), [](const LayerCost& l) { return l.name == "stage0.block0.attn.qk"; });
  ASSERT_NE(qk, c.per_layer.end());
  EXPECT_EQ(qk->bops, 3136u * 49u * 64u);
  const auto sr = std::find_if(c.per_layer.begin(), c.per_layer.end(), [](const LayerCost& l) { return l.name == "stage0.block0.attn.sr"; });
  ASSERT_NE(sr, c.per_layer.end());
  EXPECT_EQ(sr->bops, 49u * 64u * 64u);
}

TEST(Costs, AdditivityOverBlocks) {
  auto cfg = presets::binaryvit();
  const auto base = count_costs(cfg);
  cfg.stages[2].blocks += 1;
  const auto more = count_costs(cfg);
  const auto one = sum_matching(base, "stage2.block0.");
  EXPECT_EQ(more.flops - base.flops, one.flops);
  EXPECT_EQ(more.bops - base.bops, one.bops);
  EXPECT_EQ(more.params - base.params, one.params);

  CostReport assembled;
  for (const auto& l : base.per_layer) assembled.add(l);
  EXPECT_EQ(assembled.bops, base.bops);
}

TEST(Costs, NoBinaryLayersMeansNoBops) {
  auto cfg = presets::binaryvit_star();
  for (auto& s : cfg.stages) s.blocks = 0;
  const auto c = count_costs(cfg);
  EXPECT_EQ(c.bops, 0u);
  EXPECT_EQ(c.ops(), static_cast<double>(c.flops));
}

TEST(Costs, JsonSchema) {
  const auto j = to_json(count_costs(presets::tiny_pyramid()));
  for (const char* k : {"model", "flops", "bops", "ops", "params", "per_layer"}) EXPECT_TRUE(j.contains(k)) << k;
  ASSERT_FALSE(j["per_layer"].empty());
  for (const char* k : {"name", "kind", "flops", "bops", "params"}) EXPECT_TRUE(j["per_layer"][0].contains(k)) << k;
}

TEST(RepCap, ResNet34Chain) {
  const auto c = parse_repcap(kResNet34);
  EXPECT_EQ(c.total, 71'193'472u);
  ASSERT_EQ(c.steps.size(), 9u);
  EXPECT_EQ(c.steps[0].running, 18'742u);
  EXPECT_EQ(c.steps[2].running, 81'880u);
  EXPECT_EQ(c.steps[4].running, 345'952u);
  EXPECT_EQ(c.steps[6].running, 1'439'104u);
}

TEST(RepCap, DeitFirstLayerAndLiteralChain) {
  EXPECT_EQ(first_layer_capability(16, 3, 255), 97'920u);
  const auto c = parse_repcap(
      "first kernel=16 channels=3 max=255\n"
      "layer name=qkvo kernel=1 din=384 count=48\n"
      "add name=attn value=196 count=12\n"
      "layer name=ffn kernel=1 din=1536 count=24\n"
      "reference value=153216 note=published\n");
  // (384*4 + 196 + 4*384*2) * 12 + 97920 evaluated literally.
  EXPECT_EQ(c.total, (384u * 4 + 196 + 4 * 384 * 2) * 12 + 97'920u);
  EXPECT_EQ(c.total, 155'568u);
  EXPECT_TRUE(c.diverges_from_reference());
  EXPECT_NE(to_text(c).find("reference 153216 DIVERGES from computed total by 2352"), std::string::npos);
}

TEST(RepCap, PyramidStageOneFullyConnected) {
  const auto c = parse_repcap("layer kernel=1 din=64\naggregate factor=4\naggregate factor=4\naggregate factor=4\naggregate factor=49\n");
  EXPECT_EQ(c.total, 200'704u);
  EXPECT_FALSE(c.reference.has_value());
}

TEST(RepCap, UnitKernelConvolutionEqualsFullyConnected) {
  EXPECT_EQ(parse_repcap("layer kernel=1 din=384").total, 384u);
  EXPECT_EQ(parse_repcap("layer kernel=3 din=128").total, 1152u);
  EXPECT_EQ(parse_repcap("layer kernel=3 din=128").total, 3 * parse_repcap("layer kernel=1 din=384").total);
}

TEST(RepCap, TotalIsLeftToRightEvaluation) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> kind(1, 2);
  std::uniform_int_distribution<std::uint64_t> val(1, 50);
  for (int t = 0; t < 50; ++t) {
    std::vector<RepCapStep> steps{{"first", RepCapKind::first_layer, val(rng), 0}};
    for (int i = 0; i < 6; ++i) steps.push_back({"s", static_cast<RepCapKind>(kind(rng)), val(rng), 0});
    std::uint64_t acc = steps[0].value;
    for (std::size_t i = 1; i < steps.size(); ++i) acc = steps[i].kind == RepCapKind::add_contribution ? acc + steps[i].value : acc * steps[i].value;
    EXPECT_EQ(evaluate_repcap(steps).total, acc);
  }
}

TEST(RepCap, Monotone) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> kind(1, 2);
  std::uniform_int_distribution<std::uint64_t> val(1, 30);
  for (int t = 0; t < 200; ++t) {
    std::vector<RepCapStep> steps{{"first", RepCapKind::first_layer, val(rng), 0}};
    for (int i = 0; i < 5; ++i) steps.push_back({"s", static_cast<RepCapKind>(kind(rng)), val(rng), 0});
    const auto before = evaluate_repcap(steps).total;
    steps[std::uniform_int_distribution<std::size_t>(0, steps.size() - 1)(rng)].value += val(rng);
    EXPECT_GE(evaluate_repcap(steps).total, before);
  }
}

TEST(RepCap, InputErrors) {
  EXPECT_THROW(parse_repcap("layer kernel=0 din=3"), InputError);
  EXPECT_THROW(parse_repcap("add value=-4"), InputError);
  EXPECT_THROW(parse_repcap("aggregate factor=x"), InputError);
  EXPECT_THROW(parse_repcap("layer kernel=1 din=3\nfirst kernel=1 channels=1 max=2"), InputError);
  EXPECT_THROW(parse_repcap("conv kernel=1"), InputError);
  EXPECT_THROW(parse_repcap("# nothing\n"), InputError);
  EXPECT_THROW(parse_repcap("layer kernel=1"), InputError);
  EXPECT_THROW(parse_repcap("first kernel=1 channels=1 max=1"), InputError);  // floor(1/2) = 0
  RepCapChain c;
  EXPECT_THROW(push_step(c, "zero", RepCapKind::add_contribution, 0), InputError);
}
