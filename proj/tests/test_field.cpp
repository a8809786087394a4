#include "oracles.hpp"
#include "sketch3d/field.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

using namespace sketch3d;

namespace {

HashGridConfig small_config() {
  HashGridConfig c;
  c.table_size_log2 = 12;
  c.num_levels = 4;
  c.mlp_hidden_width = 16;
  return c;
}

FieldParams<double> perturbed(const HashGridConfig& cfg, std::uint64_t seed, double scale) {
  auto p = init_params<double>(cfg, seed);
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (int l = 0; l < cfg.num_levels; ++l)
    for (auto& v : p.hash_table(l)) v += u(rng);
  return p;
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec3 v(n(rng), n(rng), n(rng));
  return v.normalized();
}

}  // namespace

TEST(InitParams, DeterministicForSeed) {
  const HashGridConfig cfg;
  const auto a = init_params(cfg, 1);
  const auto b = init_params(cfg, 1);
  EXPECT_EQ(a.values, b.values);
}

TEST(InitParams, SeedChangesHashTables) {
  const HashGridConfig cfg;
  const auto a = init_params(cfg, 1);
  const auto b = init_params(cfg, 2);
  const auto ta = a.hash_table(0), tb = b.hash_table(0);
  EXPECT_FALSE(std::equal(ta.begin(), ta.end(), tb.begin()));
}

TEST(InitParams, RejectsInvalidConfig) {
  HashGridConfig cfg;
  cfg.num_levels = 0;
  EXPECT_THROW(init_params(cfg, 1), InvalidArgument);
  cfg = HashGridConfig{};
  cfg.growth_factor = 1.0;
  EXPECT_THROW(init_params(cfg, 1), InvalidArgument);
  cfg = HashGridConfig{};
  cfg.table_size_log2 = 25;
  EXPECT_THROW(init_params(cfg, 1), InvalidArgument);
}

TEST(InitParams, RangesAndZeroBiases) {
  const HashGridConfig cfg;
  const auto p = init_params(cfg, 7);
  for (int l = 0; l < cfg.num_levels; ++l)
    for (float v : p.hash_table(l)) ASSERT_LE(std::abs(v), 1e-4f);
  for (const auto& d : p.layout.trunk) {
    const float bound = static_cast<float>(std::sqrt(6.0 / d.in));
    for (int i = 0; i < d.out * d.in; ++i) ASSERT_LE(std::abs(p.values[d.weight + i]), bound);
    for (int i = 0; i < d.out; ++i) ASSERT_EQ(p.values[d.bias + i], 0.0f);
  }
}

TEST(Layout, TensorOffsetsTileTheVector) {
  const FieldParams<float> p(HashGridConfig{});
  std::size_t next = 0;
  for (const auto& t : p.layout.tensors) {
    EXPECT_EQ(t.offset, next) << t.name;
    next += t.count;
  }
  EXPECT_EQ(next, p.values.size());
  EXPECT_EQ(p.layout.dense_offset(), p.layout.trunk.front().weight);
}

TEST(HashEncode, LatticePointReturnsStoredFeature) {
  const HashGridConfig cfg = small_config();
  const auto p = perturbed(cfg, 3, 0.5);
  // (0.5, 0.25, -0.5) maps to integer lattice coordinates on the 16-cell level 0.
  const Vec3 x(0.5, 0.25, -0.5);
  const auto enc = hash_encode(x, p);
  const int res = cfg.level_resolution(0);
  const std::uint32_t cx = static_cast<std::uint32_t>((x.x() + 1) * 0.5 * res);
  const std::uint32_t cy = static_cast<std::uint32_t>((x.y() + 1) * 0.5 * res);
  const std::uint32_t cz = static_cast<std::uint32_t>((x.z() + 1) * 0.5 * res);
  const std::uint32_t mask = static_cast<std::uint32_t>(cfg.table_size() - 1);
  const std::uint32_t slot = (cx * 1u ^ cy * 2654435761u ^ cz * 805459861u) & mask;
  for (int f = 0; f < cfg.features_per_level; ++f)
    EXPECT_EQ(enc(f), p.hash_table(0)[slot * cfg.features_per_level + f]);
}

TEST(HashEncode, ZeroTablesGiveZeroEncoding) {
  const HashGridConfig cfg = small_config();
  FieldParams<double> p = init_params<double>(cfg, 1);
  for (int l = 0; l < cfg.num_levels; ++l)
    for (auto& v : p.hash_table(l)) v = 0.0;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 20; ++i) EXPECT_TRUE(hash_encode(Vec3(u(rng), u(rng), u(rng)), p).isZero(0.0));
}

TEST(HashEncode, PureAndClampedOutsideTheBox) {
  const auto p = perturbed(small_config(), 4, 0.5);
  const Vec3 x(0.123, -0.77, 0.4);
  EXPECT_EQ(hash_encode(x, p), hash_encode(x, p));
  EXPECT_EQ(hash_encode(Vec3(1.7, -3.0, 0.2), p), hash_encode(Vec3(1.0, -1.0, 0.2), p));
}

TEST(HashEncode, ContinuousWithinCells) {
  const auto p = perturbed(small_config(), 5, 0.5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.95, 0.95);
  for (int i = 0; i < 50; ++i) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const Vec3 dx = 1e-9 * random_unit(rng);
    EXPECT_LT((hash_encode(x, p) - hash_encode(Vec3(x + dx), p)).norm(), 1e-6);
  }
}

TEST(EvalField, ActivationRanges) {
  const auto p = perturbed(small_config(), 6, 5.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 200; ++i) {
    const auto s = eval_field(Vec3(u(rng), u(rng), u(rng)), random_unit(rng), p);
    EXPECT_GE(s.density, 0.0);
    EXPECT_TRUE((s.color.array() >= 0.0).all() && (s.color.array() <= 1.0).all());
  }
}

TEST(EvalField, DensityIgnoresDirection) {
  const auto p = perturbed(small_config(), 7, 1.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 50; ++i) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const auto a = eval_field(x, random_unit(rng), p);
    const auto b = eval_field(x, random_unit(rng), p);
    EXPECT_EQ(a.density, b.density);
  }
}

TEST(EvalField, InitialDensityNearSoftplusZero) {
  const auto p = init_params<double>(HashGridConfig{}, 11);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 50; ++i) {
    const auto s = eval_field(Vec3(u(rng), u(rng), u(rng)), Vec3::UnitZ(), p);
    EXPECT_NEAR(s.density, std::log(2.0), 1e-3);
  }
}

TEST(EvalField, RejectsBadInputs) {
  auto p = init_params<double>(small_config(), 1);
  EXPECT_THROW(eval_field(Vec3::Zero(), Vec3(1, 1, 0), p), InvalidArgument);
  p.values[p.layout.trunk[0].weight] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(eval_field(Vec3::Zero(), Vec3::UnitX(), p), InvalidArgument);
}

TEST(DensityGradient, MatchesFiniteDifferences) {
  const auto p = perturbed(small_config(), 8, 1.0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  for (int i = 0; i < 30; ++i) {
    Vec3 x(u(rng), u(rng), u(rng));
    const Vec3 g = density_gradient(x, p);
    for (int a = 0; a < 3; ++a) {
      const double fd = oracle::central_difference(
          [&] { return eval_field(x, Vec3::UnitZ(), p).density; }, x[a], 1e-7);
      EXPECT_LT(oracle::relative_error(g[a], fd, 1e-6), 1e-3) << "axis " << a;
    }
  }
}

TEST(FieldNormal, UnitLengthWhereDefined) {
  const auto p = perturbed(small_config(), 9, 1.0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  for (int i = 0; i < 50; ++i) {
    const auto n = field_normal(Vec3(u(rng), u(rng), u(rng)), p);
    if (!n.degenerate) {
      EXPECT_NEAR(n.normal.norm(), 1.0, 1e-6);
    }
  }
}

TEST(FieldNormal, DensityRisingAlongXPointsNegativeX) {
  // Level-0 features equal to the corner's lattice x coordinate make the
  // encoding linear in x inside one cell; a positive-bias identity chain
  // carries it into the raw density.
  HashGridConfig cfg = small_config();
  cfg.num_levels = 1;
  FieldParams<double> p(cfg);
  const Vec3 x0(0.1, 0.2, 0.3);
  const int res = cfg.level_resolution(0);
  std::uint32_t cell[3];
  for (int a = 0; a < 3; ++a) cell[a] = static_cast<std::uint32_t>(std::floor((x0[a] + 1) * 0.5 * res));
  const std::uint32_t mask = static_cast<std::uint32_t>(cfg.table_size() - 1);
  std::set<std::uint32_t> slots;
  for (int c = 0; c < 8; ++c) {
    const std::uint32_t ix = cell[0] + (c & 1), iy = cell[1] + ((c >> 1) & 1), iz = cell[2] + ((c >> 2) & 1);
    const std::uint32_t slot = (ix * 1u ^ iy * 2654435761u ^ iz * 805459861u) & mask;
    slots.insert(slot);
    p.hash_table(0)[slot * cfg.features_per_level] = static_cast<double>(ix);
  }
  ASSERT_EQ(slots.size(), 8u) << "corner slots collide; pick another test point";
  const auto& L = p.layout;
  p.values[L.trunk[0].weight] = 1.0;
  p.values[L.trunk[0].bias] = 1.0;
  p.values[L.trunk[1].weight] = 1.0;
  p.values[L.trunk[2].weight] = 1.0;
  const auto n = field_normal(x0, p);
  ASSERT_FALSE(n.degenerate);
  EXPECT_NEAR(n.normal.x(), -1.0, 1e-9);
  EXPECT_NEAR(n.normal.y(), 0.0, 1e-9);
  EXPECT_NEAR(n.normal.z(), 0.0, 1e-9);
  Vec3 x = x0;
  const double fd = oracle::central_difference([&] { return eval_field(x, Vec3::UnitZ(), p).density; }, x[0], 1e-6);
  EXPECT_LT(oracle::relative_error(density_gradient(x0, p).x(), fd), 1e-6);
}

TEST(FieldNormal, FlatFieldIsDegenerate) {
  FieldParams<double> p(small_config());
  const auto n = field_normal(Vec3(0.2, 0.1, 0.0), p);
  EXPECT_TRUE(n.degenerate);
  EXPECT_EQ(n.normal, Vec3::UnitZ());
}

TEST(FieldBatch, FloatAndDoubleAgree) {
  const auto pd = perturbed(small_config(), 10, 1.0);
  const auto pf = pd.cast<float>();
  const Vec3 x(0.3, -0.2, 0.5), d = Vec3(1, 2, 3).normalized();
  const auto a = eval_field(x, d, pd), b = eval_field(x, d, pf);
  EXPECT_NEAR(a.density, b.density, 1e-4);
  EXPECT_LT((a.color - b.color).norm(), 1e-5);
}

TEST(FieldBatch, BackwardIndependentOfGradientBufferAlignment) {
  HashGridConfig cfg = small_config();
  cfg.mlp_hidden_width = 64;
  const auto p = perturbed(cfg, 11, 1.0).cast<float>();
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(-0.9f, 0.9f);
  const int B = 37;
  Eigen::Matrix<float, 3, Eigen::Dynamic> pos(3, B), dir(3, B), dcolor(3, B), dgrad(3, B);
  Eigen::Matrix<float, 1, Eigen::Dynamic> dsigma(B);
  for (int b = 0; b < B; ++b) {
    pos.col(b) = Eigen::Vector3f(u(rng), u(rng), u(rng));
    dir.col(b) = random_unit(rng).cast<float>();
    dcolor.col(b) = Eigen::Vector3f(u(rng), u(rng), u(rng));
    dgrad.col(b) = Eigen::Vector3f(u(rng), u(rng), u(rng));
    dsigma(b) = u(rng);
  }
  FieldWorkspace<float> ws;
  field_forward<float>(p, pos, dir, true, ws);
  const std::size_t n = p.values.size();
  std::vector<float> ref;
  // Shifting the start of the buffer by one float at a time changes which
  // rows of each dense block land on vector-aligned addresses.
  for (std::size_t shift = 0; shift < 8; ++shift) {
    std::vector<float> buf(n + 8, 0.0f);
    field_backward<float>(p, ws, dsigma, dcolor, &dgrad, buf.data() + shift);
    std::vector<float> g(buf.begin() + shift, buf.begin() + shift + n);
    if (shift == 0)
      ref = g;
    else
      EXPECT_EQ(g, ref) << "shift " << shift;
  }
}
