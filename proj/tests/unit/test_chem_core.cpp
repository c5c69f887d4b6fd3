#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "divergent/chem_core.hpp"

using namespace divergent;

namespace {

int z_of(const char* sym) { return ElementTable::builtin().by_symbol(sym).atomic_number; }

// Independent brute-force distance: Cartesian positions from an explicit
// lattice and a wide image window, no wrapping of differences.
double brute_distance(const CrystalStructure& s, std::size_t i, std::size_t j, int range) {
  const Mat3 r = s.lattice();
  double best = std::numeric_limits<double>::infinity();
  for (int a = -range; a <= range; ++a)
    for (int b = -range; b <= range; ++b)
      for (int c = -range; c <= range; ++c) {
        if (i == j && a == 0 && b == 0 && c == 0) continue;
        const Vec3 d = r * (s.frac_coords()[j] + Vec3(a, b, c) - s.frac_coords()[i]);
        best = std::min(best, d.norm());
      }
  return best;
}

}  // namespace

TEST(ElementTableTest, ShippedTableHas63AllowedElements) {
  const auto& t = ElementTable::builtin();
  EXPECT_EQ(t.allowed_count(), 63u);
  for (const auto& e : t.elements()) {
    EXPECT_GT(e.covalent_radius, 0.0) << e.symbol;
    if (e.allowed) EXPECT_FALSE(e.oxidation_states.empty()) << e.symbol;
  }
  EXPECT_EQ(t.by_symbol("Fe").block, Block::d);
  EXPECT_TRUE(t.by_symbol("Ce").correlation_prone());
  EXPECT_FALSE(t.by_symbol("Na").correlation_prone());
  EXPECT_THROW(t.by_symbol("Xx"), Error);
}

TEST(ElementTableTest, ParseRejectsBadRows) {
  EXPECT_THROW(ElementTable::parse("A\t1\t-1.0\t1.0\t1\ts\t1\n"), Error);
  EXPECT_THROW(ElementTable::parse("A\t1\t1.0\t1.0\t1\tq\t1\n"), Error);
  const auto t = ElementTable::parse("# c\nA\t1\t1.0\t1.0\t1\ts\t1\nB\t2\t1.0\t3.0\t-1\tp\t1\n");
  EXPECT_EQ(t.elements().size(), 2u);
  EXPECT_NE(t.content_hash(), ElementTable::builtin().content_hash());
}

TEST(CompositionTest, ReduceExamples) {
  Composition a({{1, 2}, {2, 4}});
  EXPECT_EQ(reduce_composition(a), Composition({{1, 1}, {2, 2}}));
  Composition b({{1, 1}, {2, 1}});
  EXPECT_EQ(reduce_composition(b), b);
  Composition c({{1, 6}, {2, 9}, {3, 3}});
  EXPECT_EQ(reduce_composition(c), Composition({{1, 2}, {2, 3}, {3, 1}}));
  EXPECT_THROW(reduce_composition(Composition()), Error);
}

TEST(CompositionTest, ReduceIsIdempotentOnRandomInputs) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> nel(1, 4), cnt(1, 5), zd(1, 30);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<CompositionEntry> e;
    const int n = nel(rng);
    for (int k = 0; k < n; ++k) e.push_back({zd(rng), cnt(rng)});
    Composition c(e);
    const auto r1 = reduce_composition(c);
    EXPECT_EQ(reduce_composition(r1), r1);
    int g = 0;
    for (const auto& x : r1.entries()) g = std::gcd(g, x.count);
    EXPECT_EQ(g, 1);
  }
}

TEST(CompositionTest, EntriesSortedAndMerged) {
  Composition c({{8, 1}, {3, 2}, {8, 2}});
  ASSERT_EQ(c.entries().size(), 2u);
  EXPECT_EQ(c.entries()[0].z, 3);
  EXPECT_EQ(c.count_of(8), 3);
  EXPECT_THROW(Composition({{1, 21}}), Error);
}

TEST(CompositionTest, ParseFormula) {
  const auto c = Composition::parse_formula("Fe2O3");
  EXPECT_EQ(c.count_of(z_of("Fe")), 2);
  EXPECT_EQ(c.count_of(z_of("O")), 3);
  EXPECT_EQ(c.formula(), "Fe2O3");
  // 12 + 24 atoms exceeds the cell limit and is reduced
  EXPECT_EQ(Composition::parse_formula("Ti12O24").formula(), "TiO2");
  EXPECT_THROW(Composition::parse_formula("Qq2"), Error);
  EXPECT_THROW(Composition::parse_formula("2Fe"), Error);
}

TEST(CompositionTest, ChargeBalanceExamples) {
  Composition nacl({{11, 1}, {17, 1}}, std::vector<int>{1, -1});
  EXPECT_DOUBLE_EQ(charge_balance(nacl), 0.0);
  Composition ab({{1, 1}, {2, 1}}, std::vector<int>{2, -1});
  EXPECT_DOUBLE_EQ(charge_balance(ab), 1.0);
  Composition a2b3({{1, 2}, {2, 3}}, std::vector<int>{3, -2});
  EXPECT_DOUBLE_EQ(charge_balance(a2b3), 2.0 * 3 - 3.0 * 2);
  EXPECT_THROW(charge_balance(Composition({{1, 1}})), Error);
}

TEST(CompositionTest, OxidationAssignmentFindsNeutralState) {
  const auto fe2o3 = assign_oxidation_states(Composition::parse_formula("Fe2O3"));
  EXPECT_DOUBLE_EQ(charge_balance(fe2o3), 0.0);
  EXPECT_EQ((*fe2o3.oxidation_states())[1], 3);  // entries sorted by Z: O, Fe
  const auto feo = assign_oxidation_states(Composition::parse_formula("FeO"));
  EXPECT_EQ((*feo.oxidation_states())[1], 2);
}

TEST(GeometryTest, WrapFractionalExamples) {
  const auto w = wrap_fractional(Vec3(1.2, -0.3, 0.5));
  EXPECT_NEAR(w[0], 0.2, 1e-15);
  EXPECT_NEAR(w[1], 0.7, 1e-15);
  EXPECT_EQ(w[2], 0.5);
  EXPECT_EQ(wrap_fractional(Vec3(0, 0, 0)), Vec3(0, 0, 0));
  EXPECT_EQ(wrap_fractional(Vec3(2.0, -1.0, 1.0)), Vec3(0, 0, 0));
  EXPECT_THROW(wrap_fractional(Vec3(NAN, 0, 0)), Error);
  EXPECT_THROW(wrap_fractional(Vec3(INFINITY, 0, 0)), Error);
}

TEST(GeometryTest, WrapFractionalProperties) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::uniform_int_distribution<int> k(-5, 5);
  for (int trial = 0; trial < 2000; ++trial) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const Vec3 w = wrap_fractional(x);
    for (int d = 0; d < 3; ++d) {
      EXPECT_GE(w[d], 0.0);
      EXPECT_LT(w[d], 1.0);
    }
    EXPECT_EQ(wrap_fractional(w), w);
    const Vec3 shifted = wrap_fractional(x + Vec3(k(rng), k(rng), k(rng)));
    EXPECT_NEAR((shifted - w).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  }
  // a value just below an integer must not produce 1.0
  const Vec3 tiny = wrap_fractional(Vec3(-1e-18, 0, 0));
  EXPECT_LT(tiny[0], 1.0);
}

TEST(GeometryTest, CubicPairAndSelfImage) {
  CrystalStructure s("c", metric_from_parameters(2, 2, 2), {11, 17}, {Vec3(0, 0, 0), Vec3(0.5, 0, 0)});
  const auto d = pairwise_min_image_distances(s);
  ASSERT_EQ(d.size(), 3u);
  for (const auto& p : d) {
    if (p.i != p.j) EXPECT_NEAR(p.distance, 1.0, 1e-14);
    else EXPECT_NEAR(p.distance, 2.0, 1e-14);
  }
  CrystalStructure one("o", metric_from_parameters(2, 2, 2), {11}, {Vec3(0.3, 0.1, 0.9)});
  const auto d1 = pairwise_min_image_distances(one);
  ASSERT_EQ(d1.size(), 1u);
  EXPECT_NEAR(d1[0].distance, 2.0, 1e-14);
}

TEST(GeometryTest, TriclinicMatchesBruteForce) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0), len(2.5, 6.0), ang(60.0, 120.0);
  int checked = 0;
  while (checked < 300) {
    const Metric6 g = metric_from_parameters(len(rng), len(rng), len(rng), ang(rng), ang(rng), ang(rng));
    if (!metric_is_positive_definite(g)) continue;
    CrystalStructure s("t", g, {8, 8}, {Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng))});
    for (const auto& p : pairwise_min_image_distances(s))
      EXPECT_NEAR(p.distance, brute_distance(s, p.i, p.j, 2), 1e-10);
    ++checked;
  }
}

TEST(GeometryTest, SkewedCellUses125Images) {
  // condition number well above 10
  const Metric6 g = metric_from_parameters(2.0, 2.0, 9.0, 90, 90, 25);
  ASSERT_GT(metric_condition_number(g), 10.0);
  CrystalStructure s("k", g, {8, 8}, {Vec3(0.1, 0.2, 0.3), Vec3(0.8, 0.45, 0.9)});
  for (const auto& p : pairwise_min_image_distances(s))
    EXPECT_NEAR(p.distance, brute_distance(s, p.i, p.j, 3), 1e-10);
}

TEST(GeometryTest, DistancesInvariantUnderTranslation) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Vec3> x;
    for (int k = 0; k < 5; ++k) x.emplace_back(u(rng), u(rng), u(rng));
    const Metric6 g = metric_from_parameters(4.0, 4.5, 5.0, 80, 95, 105);
    CrystalStructure s("t", g, {8, 8, 12, 12, 14}, x);
    const Vec3 shift(u(rng) * 3 - 1, u(rng) * 3 - 1, u(rng) * 3 - 1);
    std::vector<Vec3> moved;
    for (const auto& v : x) moved.push_back(v + shift);
    const auto a = pairwise_min_image_distances(s);
    const auto b = pairwise_min_image_distances(s.with_coords(moved));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k].distance, b[k].distance, 1e-12);
  }
}

TEST(GeometryTest, RejectsDegenerateMetrics) {
  EXPECT_THROW(CrystalStructure("d", {1, 1, 0, 0, 0, 0}, {8}, {Vec3::Zero()}), Error);
  EXPECT_THROW(CrystalStructure("d", {1, 1, 1, 1, 0, 0}, {8}, {Vec3::Zero()}), Error);
  EXPECT_THROW(CrystalStructure("d", {1, 1, -1, 0, 0, 0}, {8}, {Vec3::Zero()}), Error);
  EXPECT_FALSE(metric_is_positive_definite({1, 1, 1, 1, 0, 0}));
  EXPECT_TRUE(metric_is_positive_definite({1, 1, 1, 0.2, 0, 0}));
}

TEST(GeometryTest, LatticeFactorReproducesMetric) {
  const Metric6 g = metric_from_parameters(3.0, 4.0, 5.0, 70, 100, 110);
  CrystalStructure s("l", g, {8}, {Vec3::Zero()});
  const Mat3 r = s.lattice();
  EXPECT_LT((r.transpose() * r - metric_matrix(g)).norm(), 1e-12);
  const auto p = lattice_parameters(g);
  EXPECT_NEAR(p.b, 4.0, 1e-12);
  EXPECT_NEAR(p.beta, 100.0, 1e-10);
}

TEST(GeometryTest, NeighborListMatchesBruteForceCount) {
  CrystalStructure s("n", metric_from_parameters(3.0, 3.0, 3.0), {11, 17},
                     {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)});
  // CsCl-type: 8 unlike neighbours at a*sqrt(3)/2, 6 like at a
  const auto nl = neighbor_list(s, 2.7);
  std::size_t from0 = 0;
  for (const auto& n : nl)
    if (n.i == 0) {
      ++from0;
      EXPECT_NEAR(n.distance, 1.5 * std::sqrt(3.0), 1e-12);
    }
  EXPECT_EQ(from0, 8u);
  EXPECT_EQ(neighbor_list(s, 3.01).size(), 2u * (8 + 6));
}

TEST(FidelityTest, LadderDefaults) {
  const auto l = default_fidelity_ladder();
  EXPECT_DOUBLE_EQ(l[0].loss_weight, 0.1);
  EXPECT_DOUBLE_EQ(l[3].loss_weight, 1.0);
  EXPECT_DOUBLE_EQ(l[3].oracle_cost, 100.0);
  EXPECT_NO_THROW(validate_ladder(l));
  auto bad = l;
  bad[1].loss_weight = 0.05;
  EXPECT_THROW(validate_ladder(bad), Error);
  EXPECT_EQ(fidelity_from_string("HSE06"), Fidelity::HSE06);
  EXPECT_THROW(fidelity_from_string("MP2"), Error);
}

TEST(RecordTest, Validation) {
  EnergyRecord r{"x", Fidelity::PBE, 1.0, std::nullopt, "t"};
  EXPECT_NO_THROW(validate_record(r, 2));
  r.forces = std::vector<Vec3>(3, Vec3::Zero());
  EXPECT_THROW(validate_record(r, 2), Error);
  r.forces.reset();
  r.energy_per_atom = NAN;
  EXPECT_THROW(validate_record(r, 2), Error);
}

TEST(SerializationTest, StructureLineRoundTrip) {
  CrystalStructure s("abc-1", metric_from_parameters(3.1, 4.2, 5.3, 80, 91, 100), {26, 8, 8},
                     {Vec3(0.1, 0.2, 0.3), Vec3(0.123456789012345, 0.5, 0.9), Vec3(0, 0, 0.999)});
  const auto line = structure_to_line(s);
  const auto back = structure_from_line(line);
  EXPECT_EQ(back.id(), s.id());
  EXPECT_EQ(back.metric(), s.metric());
  EXPECT_EQ(std::vector<int>(back.species().begin(), back.species().end()),
            std::vector<int>(s.species().begin(), s.species().end()));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(back.frac_coords()[i], s.frac_coords()[i]);
  EXPECT_THROW(structure_from_line("only\ttwo"), Error);
}
