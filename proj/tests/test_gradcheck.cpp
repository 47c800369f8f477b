#include <gtest/gtest.h>

#include "bvit/gradcheck.hpp"

using namespace bvit;

namespace {

void expect_ok(const GradCheckResult& r) {
  EXPECT_TRUE(r.ok()) << r.name << " points " << r.points << " failures " << r.failures << " max rel err " << r.max_rel_err
                      << " worst " << r.worst << (r.rejected ? " (rejected)" : "");
  EXPECT_EQ(r.points, GradCheckOptions{}.points) << r.name;
}

}  // namespace

class LayerGradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(LayerGradCheck, AllLayersPass) {
  for (const auto& r : run_layer_gradchecks(GradCheckOptions{}, GetParam())) expect_ok(r);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGradCheck, ::testing::Values(1u, 2u, 3u));

TEST(GradCheck, WholeModel) {
  std::mt19937_64 rng(5);
  expect_ok(check_model(GradCheckOptions{}, rng));
}

TEST(GradCheck, BifcWithChannelChanges) {
  std::mt19937_64 rng(6);
  expect_ok(check_bifc(GradCheckOptions{}, rng, 8, 8));
  expect_ok(check_bifc(GradCheckOptions{}, rng, 8, 32));
  expect_ok(check_bifc(GradCheckOptions{}, rng, 32, 8));
}

TEST(GradCheck, DetectsAWrongBackward) {
  std::mt19937_64 rng(7);
  DTensor w = detail::random_normal({3, 4}, rng);
  DTensor grad(w.shape());
  const std::vector<GradTarget> targets{{"w", &w, &grad}};
  auto fwd = [&](Ctx<double>&, bool) {
    double s = 0;
    for (double v : w.values()) s += v * v;
    return s;
  };
  auto wrong = [&] {
    for (std::size_t i = 0; i < w.size(); ++i) grad[i] = 3 * w[i];
  };
  auto right = [&] {
    for (std::size_t i = 0; i < w.size(); ++i) grad[i] = 2 * w[i];
  };
  GradCheckOptions opt;
  opt.points = 12;
  EXPECT_FALSE(grad_check("wrong", fwd, wrong, targets, opt, rng).ok());
  EXPECT_TRUE(grad_check("right", fwd, right, targets, opt, rng).ok());
}

TEST(GradCheck, PointsNearAKinkAreRejected) {
  std::mt19937_64 rng(8);
  DTensor w = DTensor::from_rows({{1e-5, 0.5}});
  DTensor grad(w.shape());
  const std::vector<GradTarget> targets{{"w", &w, &grad}};
  auto fwd = [&](Ctx<double>& ctx, bool) {
    ctx.probe->note_kink(w[0]);
    return w[0] + w[1];
  };
  auto bwd = [&] { grad.fill(1.0); };
  const auto r = grad_check("kink", fwd, bwd, targets, GradCheckOptions{}, rng);
  EXPECT_TRUE(r.rejected);
  EXPECT_FALSE(r.ok());
}
