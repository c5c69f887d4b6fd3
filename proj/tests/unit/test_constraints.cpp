#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "divergent/constraints.hpp"
#include "fixtures.hpp"

using namespace divergent;

namespace {

ConstraintContext synthetic_context(double r0 = 1.6) {
  ConstraintContext ctx;
  ctx.elements = fixtures::unit_radius_table();
  ctx.bvs = BvsTable({{1, 2, r0}, {3, 2, r0}});
  return ctx;
}

CrystalStructure big_cell(std::vector<int> species, std::vector<Vec3> cart, double a = 10.0) {
  std::vector<Vec3> frac;
  for (const auto& c : cart) frac.push_back(c / a);
  return CrystalStructure("big", metric_from_parameters(a, a, a), std::move(species), std::move(frac));
}

}  // namespace

TEST(DistanceCheckTest, InclusiveBoundary) {
  const auto t = fixtures::unit_radius_table();
  const auto pass = check_min_distances(big_cell({1, 2}, {Vec3(0, 0, 0), Vec3(1.4, 0, 0)}), 0.7, t);
  EXPECT_TRUE(pass.pass);
  EXPECT_NEAR(pass.worst_ratio, 0.7, 1e-14);
  const auto fail = check_min_distances(big_cell({1, 2}, {Vec3(0, 0, 0), Vec3(1.39, 0, 0)}), 0.7, t);
  EXPECT_FALSE(fail.pass);
  EXPECT_THROW(check_min_distances(big_cell({1}, {Vec3::Zero()}), 0.0, t), Error);
}

TEST(DistanceCheckTest, AgreesWithBruteForceOnRandomCells) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0), len(3.0, 7.0), ang(70.0, 110.0);
  const auto& t = ElementTable::builtin();
  const std::vector<int> pool = {3, 8, 11, 12, 17, 26};
  int disagreements = 0, fails = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> sp;
    std::vector<Vec3> x;
    for (int k = 0; k < 8; ++k) {
      sp.push_back(pool[static_cast<std::size_t>(u(rng) * pool.size()) % pool.size()]);
      x.emplace_back(u(rng), u(rng), u(rng));
    }
    CrystalStructure s("r", metric_from_parameters(len(rng), len(rng), len(rng), ang(rng), ang(rng), ang(rng)),
                       sp, x);
    // brute force over a wide image window in Cartesian space
    const Mat3 r = s.lattice();
    bool ok = true;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = i; j < 8; ++j)
        for (int a = -2; a <= 2; ++a)
          for (int b = -2; b <= 2; ++b)
            for (int c = -2; c <= 2; ++c) {
              if (i == j && a == 0 && b == 0 && c == 0) continue;
              const double d = (r * (x[j] + Vec3(a, b, c) - x[i])).norm();
              if (d < 0.7 * (t.by_z(sp[i]).covalent_radius + t.by_z(sp[j]).covalent_radius)) ok = false;
            }
    fails += !ok;
    disagreements += ok != check_min_distances(s, 0.7).pass;
  }
  EXPECT_EQ(disagreements, 0);
  EXPECT_GT(fails, 0);
}

TEST(PaulingTest, SymmetricTetrahedralSharingHasZeroDeviation) {
  auto ctx = synthetic_context();
  // zincblende with explicit +4/-4 labels: each anion also has CN 4
  const auto s = fixtures::binary("zb", 3, 2, fixtures::Prototype::Zincblende, 1.9);
  const auto res = pauling_valence_check(s, {4, 4, 4, 4, -4, -4, -4, -4}, ctx);
  ASSERT_TRUE(res.check.applicable);
  for (double d : res.deviations) EXPECT_NEAR(d, 0.0, 1e-12);
  EXPECT_TRUE(res.check.passed);
  const auto env = coordination_environments(s, {4, 4, 4, 4, -4, -4, -4, -4}, ctx);
  ASSERT_EQ(env.size(), 4u);
  EXPECT_EQ(env[0].coordination_number, 4);
  for (double v : env[0].bond_valences) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(PaulingTest, ThreeFoldCationBondStrength) {
  auto ctx = synthetic_context();
  const double d = 1.5;
  const double c = std::cos(2 * M_PI / 3), sn = std::sin(2 * M_PI / 3);
  const Vec3 o(5, 5, 5);
  const auto s = big_cell({3, 2, 2, 2}, {o, o + Vec3(d, 0, 0), o + Vec3(d * c, d * sn, 0), o + Vec3(d * c, -d * sn, 0)});
  const auto env = coordination_environments(s, {4, -2, -2, -2}, ctx);
  ASSERT_EQ(env.size(), 1u);
  EXPECT_EQ(env[0].coordination_number, 3);
  for (double v : env[0].bond_valences) EXPECT_DOUBLE_EQ(v, 4.0 / 3.0);
}

TEST(PaulingTest, RocksaltPolyhedronSums) {
  auto ctx = synthetic_context();
  const auto s = fixtures::binary("rs", 1, 2, fixtures::Prototype::RocksaltConventional, 1.8);
  // each anion has six cation neighbours; a cation receives 6 * |Z_a| / 6
  const auto balanced = pauling_valence_check(s, {1, 1, 1, 1, -1, -1, -1, -1}, ctx);
  for (double d : balanced.deviations) EXPECT_NEAR(d, 0.0, 1e-12);
  const auto off = pauling_valence_check(s, {2, 2, 2, 2, -1, -1, -1, -1}, ctx);
  ASSERT_EQ(off.deviations.size(), 4u);
  for (double d : off.deviations) EXPECT_NEAR(d, 1.0, 1e-12);
  EXPECT_FALSE(off.check.passed);
  const auto none = pauling_valence_check(s, {1, 1, 1, 1, 1, 1, 1, 1}, ctx);
  EXPECT_FALSE(none.check.applicable);
}

TEST(BondValenceTest, ClosedFormCases) {
  auto ctx = synthetic_context(1.6);
  const Vec3 o(5, 5, 5);
  const auto one = big_cell({1, 2}, {o, o + Vec3(1.6, 0, 0)});
  EXPECT_NEAR(bond_valence_sum(one, 0, {2, -2}, ctx), 1.0, 1e-14);
  const auto far = big_cell({1, 2}, {o, o + Vec3(3.0, 0, 0)});
  EXPECT_EQ(bond_valence_sum(far, 0, {2, -2}, ctx), 0.0);
  const double d = 1.6 + 0.37 * std::log(4.0);
  const double k = d / std::sqrt(3.0);
  const auto tet = big_cell({1, 2, 2, 2, 2}, {o, o + Vec3(k, k, k), o + Vec3(k, -k, -k), o + Vec3(-k, k, -k),
                                             o + Vec3(-k, -k, k)});
  EXPECT_NEAR(bond_valence_sum(tet, 0, {2, -2, -2, -2, -2}, ctx), 1.0, 1e-12);
  ctx.bvs = BvsTable();
  EXPECT_THROW(bond_valence_sum(one, 0, {2, -2}, ctx), Error);
}

TEST(BondValenceTest, RocksaltFixtureMatchesOxidationState) {
  for (const auto& c : fixtures::corpus_chemistries()) {
    const auto s = fixtures::ideal(c);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(bond_valence_sum(s, i), c.ox, 1e-9) << c.cation;
  }
}

TEST(ValidateTest, StageSemantics) {
  const int na = fixtures::z_of("Na"), cl = fixtures::z_of("Cl");
  const double rsum = ElementTable::builtin().by_z(na).covalent_radius + ElementTable::builtin().by_z(cl).covalent_radius;
  const auto s = fixtures::binary("tight", na, cl, fixtures::Prototype::RocksaltPrimitive, 0.75 * rsum);
  EXPECT_TRUE(validate(s, Stage::Generation).overall_pass);
  const auto v = validate(s, Stage::Validation);
  EXPECT_FALSE(v.overall_pass);
  EXPECT_FALSE(v.find("min_distance")->passed);
}

TEST(ValidateTest, CompliantFixturesPassBothStages) {
  for (const auto& c : fixtures::corpus_chemistries()) {
    const auto s = fixtures::ideal(c);
    const auto g = validate(s, Stage::Generation);
    const auto v = validate(s, Stage::Validation);
    EXPECT_TRUE(g.overall_pass) << c.cation << c.anion;
    EXPECT_TRUE(v.overall_pass) << c.cation << c.anion;
    EXPECT_EQ(g.soft_penalty, 0.0);
    EXPECT_TRUE(v.find("bond_valence_sum")->applicable);
  }
}

TEST(ValidateTest, EmptyStructureRejected) {
  CrystalStructure empty("e", metric_from_parameters(3, 3, 3), {}, {});
  EXPECT_THROW(validate(empty, Stage::Validation), Error);
}

TEST(ValidateTest, ChargeImbalanceRejected) {
  // MgCl in rocksalt: +2 -1 cannot balance
  const auto s = fixtures::binary("mgcl", fixtures::z_of("Mg"), fixtures::z_of("Cl"),
                                  fixtures::Prototype::RocksaltConventional, 2.5);
  const auto r = validate(s, Stage::Validation);
  EXPECT_FALSE(r.find("charge_balance")->passed);
  EXPECT_NEAR(r.find("charge_balance")->magnitude, 1.0, 1e-12);
  EXPECT_FALSE(r.overall_pass);
}

TEST(ValidateTest, DeterministicAndMonotone) {
  std::mt19937_64 rng(4);
  for (const auto& s : fixtures::valid_corpus(9, 40)) {
    const auto big = fixtures::jitter(s, rng, 0.4, 0.1);
    const auto a = validate(big, Stage::Validation);
    const auto b = validate(big, Stage::Validation);
    ASSERT_EQ(a.checks.size(), b.checks.size());
    for (std::size_t k = 0; k < a.checks.size(); ++k) {
      EXPECT_EQ(a.checks[k].magnitude, b.checks[k].magnitude);
      EXPECT_EQ(a.checks[k].passed, b.checks[k].passed);
    }
    if (a.find("min_distance")->passed) EXPECT_TRUE(validate(big, Stage::Generation).find("min_distance")->passed);
  }
}

TEST(ValidateTest, SoftPenaltyIsContinuous) {
  // sweep the lattice scale through the neighbour taper and the tolerance
  // hinges; a discontinuity would show as a finite jump over a tiny step
  const auto base = fixtures::ideal(fixtures::corpus_chemistries()[0]);
  auto penalty_at = [&](double f) {
    Metric6 g = base.metric();
    for (auto& v : g) v *= f * f;
    return validate(base.with_metric(g), Stage::Generation).soft_penalty;
  };
  double max_jump = 0.0;
  bool positive = false;
  for (int k = 0; k <= 1500; ++k) {
    const double f = 0.9 + 0.35 * k / 1500.0;
    const double p = penalty_at(f);
    positive = positive || p > 0.0;
    max_jump = std::max(max_jump, std::abs(penalty_at(f + 1e-9) - p));
  }
  EXPECT_TRUE(positive);
  EXPECT_LT(max_jump, 1e-6);
}

TEST(ValidateTest, SoftPenaltyZeroIffSoftChecksPass) {
  std::mt19937_64 rng(8);
  for (const auto& s : fixtures::valid_corpus(5, 60)) {
    const auto r = validate(fixtures::jitter(s, rng, 0.15, 0.05), Stage::Generation);
    bool soft_ok = true;
    for (const auto& c : r.checks)
      if (!c.hard && c.applicable) soft_ok = soft_ok && c.passed;
    EXPECT_EQ(soft_ok, r.soft_penalty == 0.0);
  }
}

TEST(DistancePenaltyTest, GradientMatchesFiniteDifferences) {
  const auto t = fixtures::unit_radius_table();
  CrystalStructure s("p", metric_from_parameters(4.0, 4.5, 5.0, 85, 95, 100), {1, 2, 3, 2},
                     {Vec3(0.1, 0.1, 0.1), Vec3(0.3, 0.15, 0.12), Vec3(0.2, 0.35, 0.2), Vec3(0.7, 0.7, 0.6)});
  std::vector<Vec3> grad;
  const double p0 = distance_penalty(s, 0.8, t, &grad);
  ASSERT_GT(p0, 0.0);
  const double h = 1e-6;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      std::vector<Vec3> xp(s.frac_coords().begin(), s.frac_coords().end()), xm = xp;
      xp[i][k] += h;
      xm[i][k] -= h;
      const double fd = (distance_penalty(s.with_coords(xp), 0.8, t) - distance_penalty(s.with_coords(xm), 0.8, t)) / (2 * h);
      EXPECT_NEAR(grad[i][k], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST(DistancePenaltyTest, ProjectionSeparatesOverlappingAtoms) {
  const auto t = fixtures::unit_radius_table();
  const auto s = big_cell({1, 2, 1}, {Vec3(5, 5, 5), Vec3(5.3, 5, 5), Vec3(5, 5.6, 5.1)}, 6.0);
  ASSERT_FALSE(check_min_distances(s, 0.7, t).pass);
  const auto p = project_min_distance(s, 0.7, 50, 0.25, t);
  ASSERT_TRUE(p.has_value());
  EXPECT_TRUE(check_min_distances(*p, 0.7, t).pass);
  // a cell too small for its own atom cannot be fixed by moving atoms
  CrystalStructure tiny("t", metric_from_parameters(1.0, 1.0, 1.0), {1}, {Vec3::Zero()});
  EXPECT_FALSE(project_min_distance(tiny, 0.7, 50, 0.25, t).has_value());
}

TEST(CorpusTest, FalseRejectionBelowTenPercent) {
  const auto corpus = fixtures::valid_corpus();
  ASSERT_EQ(corpus.size(), 200u);
  int rejected = 0;
  for (const auto& s : corpus) rejected += !validate(s, Stage::Validation).overall_pass;
  EXPECT_LT(rejected, 20);
}
