#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bvit/layers.hpp"

using namespace bvit;

namespace {

using Td = Tensor<double>;

Td random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0, sd);
  Td t(std::move(s));
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

void make_identity(BatchNorm<double>& bn) { bn.eps = 0; }
void make_identity(RPReLU<double>& a) { a.slope.value.fill(1.0); }

BiFC<double> identity_config_bifc(Td w) {
  BiFC<double> f(w.rows(), w.cols());
  f.set_latent(std::move(w));
  make_identity(f.bn);
  make_identity(f.act);
  return f;
}

}  // namespace

TEST(BiFC, HandExample) {
  const auto f = identity_config_bifc(Td::from_rows({{0.5, -0.5}, {-0.5, 0.5}}));
  const Td out = bifc_forward(Td::from_rows({{0.4, -0.6}}), f);
  EXPECT_NEAR(out[0], 1.4, 1e-12);
  EXPECT_NEAR(out[1], -1.6, 1e-12);
}

TEST(BiFC, FrozenAndLatentPathsAgree) {
  std::mt19937_64 rng(1);
  auto f = identity_config_bifc(random_tensor({20, 20}, rng));
  f.bn.running_mean = random_tensor({20}, rng);
  const Td x = random_tensor({7, 20}, rng);
  const Td a = bifc_forward(x, f);
  BiFC<double> g = f;
  g.set_frozen(f.binary_weight());
  EXPECT_FALSE(g.trainable());
  EXPECT_EQ(bifc_forward(x, g), a);
}

TEST(BiFC, IdentityConfigEqualsScaledIntegerGemmPlusShortcut) {
  std::mt19937_64 rng(2);
  for (auto [din, dout] : {std::pair{16, 16}, {8, 32}, {48, 12}, {130, 65}}) {
    auto f = identity_config_bifc(random_tensor({std::size_t(din), std::size_t(dout)}, rng));
    f.rsign.beta.value = random_tensor({std::size_t(din)}, rng, 0.2);
    const Td x = random_tensor({5, std::size_t(din)}, rng);
    const auto w = f.binary_weight();
    const Td xs = add_row_vector(x, f.rsign.beta.value.values());
    const IntMatrix g = reference::sign_gemm(xs, unpack<double>(w.bits));
    const Td r = shortcut_R(x, din, dout);
    const Td out = bifc_forward(x, f);
    ASSERT_EQ(out.shape(), (Shape{5, std::size_t(dout)}));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], w.alpha * g[i] + r[i]);
  }
}

TEST(BiFC, DuplicationShape) {
  std::mt19937_64 rng(3);
  const auto f = identity_config_bifc(random_tensor({2, 4}, rng));
  EXPECT_EQ(bifc_forward(random_tensor({3, 2}, rng), f).shape(), (Shape{3, 4}));
}

TEST(BiFC, IncompatibleDimsAreConfigErrors) {
  EXPECT_THROW(BiFC<double>(3, 5), ConfigError);
  EXPECT_THROW(BiFC<double>(4, 6), ConfigError);
  EXPECT_NO_THROW(BiFC<double>(4, 12));
}

TEST(BiFC, WrongInputWidthThrows) {
  const BiFC<double> f(4, 4);
  EXPECT_THROW(bifc_forward(Td::matrix(2, 5), f), ShapeError);
}

TEST(Shortcut, Examples) {
  const Td x = Td::from_rows({{1, 2}});
  EXPECT_EQ(shortcut_R(x, 2, 2), x);
  EXPECT_EQ(shortcut_R(x, 2, 4).storage(), (std::vector<double>{1, 2, 1, 2}));
  EXPECT_EQ(shortcut_R(Td::from_rows({{1, 2, 3, 4}}), 4, 2).storage(), (std::vector<double>{2, 3}));
  EXPECT_THROW(shortcut_R(Td::matrix(1, 3), 3, 4), ConfigError);
}

TEST(Shortcut, DuplicationPreservesMeanMagnitude) {
  std::mt19937_64 rng(4);
  const Td x = random_tensor({6, 5}, rng);
  const Td y = shortcut_R(x, 5, 15);
  double a = 0, b = 0;
  for (double v : x.values()) a += std::abs(v);
  for (double v : y.values()) b += std::abs(v);
  EXPECT_NEAR(a / x.size(), b / y.size(), 1e-12);
}

TEST(Shortcut, BackwardIsAdjoint) {
  std::mt19937_64 rng(5);
  for (auto [ci, co] : {std::pair{6, 6}, {3, 12}, {12, 4}}) {
    const Td x = random_tensor({4, std::size_t(ci)}, rng), dy = random_tensor({4, std::size_t(co)}, rng);
    const Td y = shortcut_R(x, ci, co), dx = shortcut_R_backward(dy, ci, co);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * dy[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * dx[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(RPReLU, Examples) {
  RPReLU<double> p(1);
  p.slope.value.fill(1.0);
  EXPECT_EQ(rprelu(Td::from_rows({{-3.0}}), p)[0], -3.0);
  p.slope.value.fill(0.25);
  EXPECT_EQ(rprelu(Td::from_rows({{2.0}}), p)[0], 2.0);
  EXPECT_EQ(rprelu(Td::from_rows({{-4.0}}), p)[0], -1.0);
  p.gamma.value.fill(0.7);
  p.zeta.value.fill(-0.3);
  EXPECT_EQ(rprelu(Td::from_rows({{0.7}}), p)[0], -0.3);
}

TEST(RPReLU, DefaultInit) {
  const RPReLU<double> p(3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(p.gamma.value[i], 0.0);
    EXPECT_EQ(p.zeta.value[i], 0.0);
    EXPECT_EQ(p.slope.value[i], 0.25);
  }
}

TEST(RPReLU, ContinuousWithSingleKink) {
  std::mt19937_64 rng(6);
  RPReLU<double> p(1);
  p.gamma.value[0] = 0.4;
  p.zeta.value[0] = -1.1;
  p.slope.value[0] = -0.6;
  const double eps = 1e-9;
  const Td at = rprelu(Td::from_rows({{0.4 - eps}, {0.4 + eps}}), p);
  EXPECT_NEAR(at[0], at[1], 1e-8);
  // Second differences vanish away from the kink.
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 200; ++i) {
    const double x = u(rng), h = 1e-3;
    if (std::abs(x - 0.4) < 2 * h) continue;
    const Td y = rprelu(Td::from_rows({{x - h}, {x}, {x + h}}), p);
    EXPECT_NEAR(y[0] - 2 * y[1] + y[2], 0.0, 1e-12);
  }
}

TEST(BatchNorm, InferIdentity) {
  std::mt19937_64 rng(7);
  BatchNorm<double> bn(4);
  bn.eps = 0;
  const Td x = random_tensor({9, 4}, rng);
  EXPECT_EQ(bn.forward(x, Ctx<double>{Mode::infer}, nullptr), x);
}

TEST(BatchNorm, TrainStandardizesAndUpdatesRunningStats) {
  std::mt19937_64 rng(8);
  BatchNorm<double> bn(3);
  bn.eps = 0;
  Td x = random_tensor({50, 3}, rng, 3.0);
  for (std::size_t r = 0; r < 50; ++r) x(r, 1) += 10;
  typename BatchNorm<double>::Cache cache;
  const Td y = bn.forward(x, Ctx<double>{Mode::train}, &cache);
  for (std::size_t k = 0; k < 3; ++k) {
    double m = 0, v = 0;
    for (std::size_t r = 0; r < 50; ++r) m += y(r, k);
    m /= 50;
    for (std::size_t r = 0; r < 50; ++r) v += (y(r, k) - m) * (y(r, k) - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v / 50, 1.0, 1e-6);
  }
  bn.backward(Td(y.shape()), cache);
  for (std::size_t k = 0; k < 3; ++k) {
    double m = 0;
    for (std::size_t r = 0; r < 50; ++r) m += x(r, k);
    EXPECT_NEAR(bn.running_mean[k], 0.1 * m / 50, 1e-12);
  }
}

TEST(BatchNorm, AffineOnStandardizedInput) {
  BatchNorm<double> bn(1);
  bn.eps = 0;
  bn.gamma.value[0] = 2;
  bn.shift.value[0] = 3;
  const Td y = bn.forward(Td::from_rows({{-1.5}, {0.25}}), Ctx<double>{Mode::infer}, nullptr);
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 3.5);
}

TEST(BatchNorm, NegativeRunningVarianceIsStateError) {
  BatchNorm<double> bn(2);
  bn.running_var[1] = -0.1;
  EXPECT_THROW(bn.forward(Td::matrix(1, 2), Ctx<double>{Mode::infer}, nullptr), StateError);
}

TEST(MultiPool, ConstantMapGivesFourTimes) {
  const Td map({5, 7, 2}, 1.25);
  const Td y = multi_pool_branches(map);
  ASSERT_EQ(y.shape(), map.shape());
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(MultiPool, EdgeAveragingOverValidElements) {
  const Grid g{1, 1, 3, false};
  const Td y = avg_pool_same(Td::from_rows({{1}, {2}, {3}}), g, 1, 3);
  EXPECT_DOUBLE_EQ(y[0], 1.5);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
  EXPECT_DOUBLE_EQ(y[2], 2.5);
}

TEST(MultiPool, KernelsLargerThanMapAndSinglePixel) {
  const Td one({1, 1, 3}, -2.0);
  const Td pooled = multi_pool_branches(one);
  for (double v : pooled.values()) EXPECT_DOUBLE_EQ(v, -8.0);
  EXPECT_THROW(multi_pool_branches(Td({0, 3, 1})), ShapeError);
}

TEST(MultiPool, MatchesDirectWindowOracle) {
  std::mt19937_64 rng(9);
  const std::size_t H = 6, W = 4, C = 3;
  const Td map = random_tensor({H, W, C}, rng);
  const Td y = multi_pool_branches(map);
  auto at = [&](long i, long j, std::size_t c) { return map[(static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)) * C + c]; };
  for (long i = 0; i < long(H); ++i)
    for (long j = 0; j < long(W); ++j)
      for (std::size_t c = 0; c < C; ++c) {
        double want = 0;
        for (auto [kh, kw] : kPoolBranches) {
          double s = 0;
          int n = 0;
          for (long a = i - long(kh / 2); a <= i + long(kh / 2); ++a)
            for (long e = j - long(kw / 2); e <= j + long(kw / 2); ++e)
              if (a >= 0 && a < long(H) && e >= 0 && e < long(W)) {
                s += at(a, e, c);
                ++n;
              }
          want += s / n;
        }
        EXPECT_NEAR(y[(std::size_t(i) * W + std::size_t(j)) * C + c], want, 1e-12);
      }
}

TEST(MultiPool, Linearity) {
  std::mt19937_64 rng(10);
  const Td x = random_tensor({4, 5, 2}, rng), z = random_tensor({4, 5, 2}, rng);
  const double a = 1.7, b = -0.4;
  Td mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * z[i];
  const Td fx = multi_pool_branches(x), fz = multi_pool_branches(z), fm = multi_pool_branches(mix);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fm[i], a * fx[i] + b * fz[i], 1e-12);
}

TEST(LayerScale, Examples) {
  std::mt19937_64 rng(11);
  const Td branch = random_tensor({3, 4}, rng), skip = random_tensor({3, 4}, rng);
  LayerScale<double> p(4, 0.0);
  EXPECT_EQ(layerscale_residual(branch, skip, p), skip);
  p.alpha.value.fill(1.0);
  EXPECT_EQ(layerscale_residual(branch, skip, p), add(branch, skip));
  LayerScale<double> s(1);
  s.alpha.value[0] = 2;
  s.bias.value[0] = 1;
  EXPECT_EQ(layerscale_residual(Td::from_rows({{3}}), Td::from_rows({{4}}), s)[0], 11.0);
  EXPECT_THROW(layerscale_residual(Td::matrix(2, 4), Td::matrix(3, 4), p), ShapeError);
}

TEST(LayerScale, DefaultInit) {
  const LayerScale<double> p(2);
  EXPECT_DOUBLE_EQ(p.alpha.value[0], 0.1);
  EXPECT_DOUBLE_EQ(p.bias.value[1], 0.0);
}

TEST(PatchEmbed, ImageShapes) {
  const PatchEmbed<float> first(4, 3, 64, Precision::full);
  const auto [t1, g1] = patch_embed(FloatTensor({224, 224, 3}), first);
  EXPECT_EQ(t1.shape(), (Shape{3136, 64}));
  EXPECT_EQ(g1.h, 56u);
  EXPECT_EQ(g1.w, 56u);
  PatchEmbed<float> mid(2, 64, 128, Precision::binary);
  mid.bin.set_latent(FloatTensor({256, 128}, 0.5f));
  const auto [t2, g2] = patch_embed(FloatTensor({56, 56, 64}), mid);
  EXPECT_EQ(t2.shape(), (Shape{784, 128}));
  EXPECT_EQ(g2.h * g2.w, 784u);
  EXPECT_THROW(patch_embed(FloatTensor({10, 12, 3}), first), ShapeError);
}

TEST(PatchEmbed, UnitPatchIdentityProjection) {
  std::mt19937_64 rng(12);
  PatchEmbed<double> pe(1, 5, 5, Precision::full);
  for (std::size_t i = 0; i < 5; ++i) pe.fp.weight.value(i, i) = 1;
  const Td map = random_tensor({3, 4, 5}, rng);
  const auto [t, g] = patch_embed(map, pe);
  EXPECT_EQ(t.storage(), map.storage());
  EXPECT_EQ(g.h, 3u);
}

TEST(PatchEmbed, PatchLayout) {
  Td map({4, 4, 2});
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = double(i);
  Grid og;
  const Td p = patchify(map.reshaped({16, 2}), Grid{1, 4, 4, false}, 2, &og);
  ASSERT_EQ(p.shape(), (Shape{4, 8}));
  // Patch (0, 1): pixels (0,2), (0,3), (1,2), (1,3).
  EXPECT_EQ(std::vector<double>(p.row(1).begin(), p.row(1).end()), (std::vector<double>{4, 5, 6, 7, 12, 13, 14, 15}));
  EXPECT_EQ(unpatchify(p, Grid{1, 4, 4, false}, 2), map.reshaped({16, 2}));
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(Td::from_rows({{1, 3}, {3, 5}})).storage(), (std::vector<double>{2, 4}));
  const Td one = Td::from_rows({{0.3, -7}});
  EXPECT_EQ(global_avg_pool(one), one);
  EXPECT_THROW(global_avg_pool(Td::matrix(0, 3)), ShapeError);
}

TEST(GlobalAvgPool, MatchesMeanOracle) {
  std::mt19937_64 rng(13);
  const Td x = random_tensor({196, 384}, rng);
  const Td y = global_avg_pool(x);
  for (std::size_t k = 0; k < 384; ++k) {
    long double s = 0;
    for (std::size_t r = 0; r < 196; ++r) s += x(r, k);
    EXPECT_NEAR(y[k], static_cast<double>(s / 196), 1e-12);
  }
}
