#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "divergent/active_learning.hpp"

using namespace divergent;

namespace {

WorldConfig tiny_world() {
  WorldConfig w;
  w.systems = {{"Na", "Cl"}, {"Ni", "O"}, {"Fe", "O"}};
  w.structures_per_system = 6;
  w.generated_per_system = 4;
  w.diffusion_steps = 20;
  w.denoiser.epochs = 30;
  w.refit_epochs = 5;
  w.surrogate.epochs = 60;
  w.surrogate.random_features = 64;
  return w;
}

CampaignConfig tiny_campaign() {
  CampaignConfig c;
  c.samples_per_cycle = 24;
  c.n_cycles_max = 2;
  c.k_means_k = 5;
  c.budget = 20000;
  c.retrain_every = 2;
  c.fine_tune_epochs = 10;
  c.stopping = StoppingKind::FixedBudget;
  c.seed = 3;
  return c;
}

class CampaignTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { world_ = new CampaignWorld(build_reference_world(tiny_world())); }
  static void TearDownTestSuite() {
    delete world_;
    world_ = nullptr;
  }
  static CampaignWorld* world_;
};

CampaignWorld* CampaignTest::world_ = nullptr;

}  // namespace

TEST(SelectionSize, CapAndFraction) {
  CampaignConfig c;
  OracleBudget b(500 * 100.0);
  EXPECT_EQ(selection_size(c, b), 20);
  OracleBudget small(10 * 100.0);
  EXPECT_EQ(selection_size(c, small), 1);
  OracleBudget tiny(9 * 100.0 + 50.0);
  EXPECT_EQ(selection_size(c, tiny), 0);
}

TEST(Efficiency, Arithmetic) {
  EXPECT_DOUBLE_EQ(efficiency_score(10, 25), 0.4);
  EXPECT_DOUBLE_EQ(efficiency_score(0, 7), 0.0);
  try {
    efficiency_score(0, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Undefined);
  }
  CampaignState fresh;
  EXPECT_THROW(efficiency_score(fresh), Error);
}

TEST(Diversity, IdenticalCandidatesScoreZero) {
  std::vector<Eigen::VectorXd> pts(6, Eigen::Vector3d(1.0, 2.0, 3.0));
  for (double u : diversity_scores(pts, 3)) EXPECT_EQ(u, 0.0);
}

TEST(Diversity, OtherClusterScoresOne) {
  std::vector<Eigen::VectorXd> pts;
  for (int i = 0; i < 4; ++i) pts.push_back(Eigen::Vector2d(0.0, 0.0));
  for (int i = 0; i < 5; ++i) pts.push_back(Eigen::Vector2d(10.0, 4.0));
  const std::vector<Eigen::VectorXd> picked = {Eigen::Vector2d(0.0, 0.0)};
  const auto u = diversity_scores(pts, 2, picked, 17);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(u[i], 0.0);
  for (int i = 4; i < 9; ++i) EXPECT_DOUBLE_EQ(u[i], 1.0);
}

TEST(Diversity, SingleClusterRanksByDistanceToMean) {
  std::vector<Eigen::VectorXd> pts = {Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 3),
                                      Eigen::Vector2d(4, 4), Eigen::Vector2d(2, 1)};
  const auto u = diversity_scores(pts, 1);
  // independent recomputation: standardise columns, distance to the mean (origin)
  Eigen::Vector2d mean = Eigen::Vector2d::Zero(), sq = Eigen::Vector2d::Zero();
  for (const auto& p : pts) {
    mean += p;
    sq += p.cwiseProduct(p);
  }
  mean /= 5.0;
  const Eigen::Vector2d sd = (sq / 5.0 - mean.cwiseProduct(mean)).cwiseSqrt();
  std::vector<double> d;
  for (const auto& p : pts) d.push_back((p - mean).cwiseQuotient(sd).norm());
  const double lo = *std::min_element(d.begin(), d.end()), hi = *std::max_element(d.begin(), d.end());
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_NEAR(u[i], (d[i] - lo) / (hi - lo), 1e-12);
}

TEST(Diversity, DeterministicForSeed) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<Eigen::VectorXd> pts;
  for (int i = 0; i < 60; ++i) pts.push_back(Eigen::Vector3d(n(rng), n(rng), n(rng)));
  EXPECT_EQ(diversity_scores(pts, 7, {}, 9), diversity_scores(pts, 7, {}, 9));
  for (double u : diversity_scores(pts, 7, {}, 9)) {
    EXPECT_GE(u, 0.0);
    EXPECT_LE(u, 1.0);
  }
}

TEST(KMeans, SeparatedClustersRecovered) {
  std::vector<Eigen::VectorXd> pts;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 5; ++i) pts.push_back(Eigen::Vector2d(10.0 * c + 0.01 * i, -5.0 * c));
  const auto km = kmeans(pts, 3, 1);
  ASSERT_EQ(km.centroids.size(), 3u);
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < 5; ++i) EXPECT_EQ(km.assignment[5 * c + i], km.assignment[5 * c]);
  EXPECT_NE(km.assignment[0], km.assignment[5]);
  EXPECT_NE(km.assignment[5], km.assignment[10]);
  EXPECT_EQ(kmeans(pts, 50, 1).centroids.size(), 15u);
}

TEST(Ranking, TiesBrokenById) {
  const std::vector<double> s = {0.5, 0.9, 0.5, 0.9, 0.1};
  const std::vector<std::string> ids = {"d", "b", "a", "a2", "z"};
  const auto top = rank_top_k(s, ids, 4);
  EXPECT_EQ(top, (std::vector<std::size_t>{3, 1, 2, 0}));
  EXPECT_EQ(rank_top_k(s, ids, 10).size(), 5u);
}

TEST(Stopping, Criteria) {
  CampaignConfig c;
  CampaignState s;
  s.budget = OracleBudget(100000);
  s.cycle = 1;
  s.history.push_back({0, 10, 10, 10, 5, 5, 2, 40.0, 0.05, 500});
  EXPECT_FALSE(check_stopping(s, c).stop);

  s.consecutive_no_stable = 3;
  auto d = check_stopping(s, c);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.reason, StopReason::NoStablePatience);

  CampaignState spent;
  spent.budget = OracleBudget(200, {1, 2, 5, 100});
  spent.budget.debit(Fidelity::CCSDT);
  spent.budget.debit(Fidelity::CCSDT);
  EXPECT_EQ(spent.budget.spent(), spent.budget.total());
  d = check_stopping(spent, c);
  EXPECT_EQ(d.reason, StopReason::BudgetExhausted);

  CampaignConfig dr = c;
  dr.stopping = StoppingKind::DiminishingReturns;
  CampaignState h;
  h.budget = OracleBudget(100000);
  h.cycle = 3;
  for (double r : {10.0, 20.0, 20.5, 20.9}) h.history.push_back({0, 0, 0, 0, 1, 1, 0, r, 0.05, 0});
  EXPECT_EQ(check_stopping(h, dr).reason, StopReason::DiminishingReturns);
  h.history.back().hit_rate = 30.0;
  EXPECT_FALSE(check_stopping(h, dr).stop);

  CampaignConfig cf = c;
  cf.stopping = StoppingKind::Confidence;
  h.history.back().mean_sigma = 0.009;
  EXPECT_EQ(check_stopping(h, cf).reason, StopReason::Confidence);

  CampaignConfig fixed = c;
  fixed.stopping = StoppingKind::FixedBudget;
  h.consecutive_no_stable = 10;
  EXPECT_FALSE(check_stopping(h, fixed).stop);
  h.cycle = fixed.n_cycles_max;
  EXPECT_EQ(check_stopping(h, fixed).reason, StopReason::MaxCycles);
}

TEST(Config, ValidationNamesField) {
  CampaignConfig c;
  c.weight_divergence = 0.6;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
  }
  CampaignConfig b;
  b.budget = 0;
  EXPECT_THROW(b.validate(), Error);
  CampaignConfig k;
  k.top_k_cap = 0;
  EXPECT_THROW(k.validate(), Error);
  EXPECT_NO_THROW(CampaignConfig{}.validate());
}

TEST(Config, Variants) {
  const CampaignConfig base;
  EXPECT_EQ(apply_variant(base, Variant::RandomSelection).selection, SelectionStrategy::Random);
  EXPECT_FALSE(apply_variant(base, Variant::NoConditioning).conditioning);
  EXPECT_EQ(apply_variant(base, Variant::PbeOnlyValidator).ladder, ValidatorLadder::PbeOnly);
  const auto both = apply_variant(base, Variant::NoQcNoMf);
  EXPECT_FALSE(both.conditioning);
  EXPECT_EQ(both.ladder, ValidatorLadder::PbeOnly);
  EXPECT_EQ(apply_variant(base, Variant::DirectPbeCcsdt).ladder, ValidatorLadder::DirectPbeCcsdt);
  for (auto v : {Variant::Full, Variant::RandomSelection, Variant::NoConditioning, Variant::PbeOnlyValidator,
                 Variant::NoQcNoMf, Variant::DirectPbeCcsdt})
    EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_THROW(variant_from_string("nope"), Error);
}

TEST(World, PrototypeNearestNeighbourDistance) {
  for (auto p : {BinaryPrototype::Rocksalt, BinaryPrototype::CsCl, BinaryPrototype::Zincblende}) {
    const auto s = binary_cell("x", 11, 17, p, 2.8);
    double nn = 1e9;
    for (const auto& d : pairwise_min_image_distances(s))
      if (d.i != d.j) nn = std::min(nn, d.distance);
    EXPECT_NEAR(nn, 2.8, 1e-9);
  }
}

TEST(World, LadderData) {
  std::vector<SurrogateExample> d;
  for (auto f : kAllFidelities) d.push_back({std::string(to_string(f)), "s", Eigen::VectorXd::Zero(1), f, 0.0});
  EXPECT_EQ(ladder_data(d, ValidatorLadder::Full).size(), 4u);
  EXPECT_EQ(ladder_data(d, ValidatorLadder::PbeOnly).size(), 1u);
  const auto direct = ladder_data(d, ValidatorLadder::DirectPbeCcsdt);
  ASSERT_EQ(direct.size(), 2u);
  EXPECT_EQ(direct[1].fidelity, Fidelity::CCSDT);
}

TEST_F(CampaignTest, WorldContents) {
  EXPECT_EQ(world_->systems.size(), 3u);
  EXPECT_EQ(world_->known_phases.size(), 9u);
  EXPECT_GT(world_->setup_cost, 0.0);
  std::size_t pbe = 0;
  for (const auto& e : world_->initial_data) pbe += e.fidelity == Fidelity::PBE;
  EXPECT_GE(pbe, 3u * 6u);
  // every known phase is below its elements
  for (const auto& p : world_->known_phases) EXPECT_LT(p.formation_energy, 0.0);
}

TEST_F(CampaignTest, CycleInvariants) {
  auto c = tiny_campaign();
  auto s = start_campaign(c, *world_);
  const double total = s.budget.total();
  run_cycle(s, c, *world_);
  ASSERT_EQ(s.history.size(), 1u);
  const auto& h = s.history[0];
  EXPECT_EQ(h.validated, s.d_hf.size());
  EXPECT_EQ(h.validated, s.budget.calls(Fidelity::CCSDT));
  EXPECT_EQ(s.validated.size(), h.validated);
  EXPECT_LE(h.selected, static_cast<std::size_t>(selection_size(c, OracleBudget(total))));
  EXPECT_LE(h.passed_filter, h.passed_constraints);
  EXPECT_LE(h.passed_constraints, h.generated);
  EXPECT_TRUE(s.budget.audit());
  EXPECT_DOUBLE_EQ(s.budget.spent(), 100.0 * static_cast<double>(h.validated));
  EXPECT_EQ(s.cycle, 1);
  const std::size_t before = s.d_hf.size();
  run_cycle(s, c, *world_);
  EXPECT_EQ(s.d_hf.size(), before + s.history[1].validated);
  EXPECT_TRUE(s.generator_retrain_flag);  // retrain_every = 2
  EXPECT_TRUE(s.generator.has_value());
  const auto table = history_table(s);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
}

TEST_F(CampaignTest, EmptyFilterIncrementsPatience) {
  auto c = tiny_campaign();
  c.e_threshold = -100.0;
  auto s = start_campaign(c, *world_);
  run_cycle(s, c, *world_);
  EXPECT_EQ(s.history[0].passed_filter, 0u);
  EXPECT_EQ(s.history[0].selected, 0u);
  EXPECT_EQ(s.consecutive_no_stable, 1);
  EXPECT_EQ(s.budget.spent(), 0.0);
}

TEST_F(CampaignTest, NoBudgetRefusesCycle) {
  auto c = tiny_campaign();
  auto s = start_campaign(c, *world_);
  s.budget = OracleBudget(100, {1, 2, 5, 100});
  s.budget.debit(Fidelity::CCSDT);
  EXPECT_THROW(run_cycle(s, c, *world_), Error);
  EXPECT_EQ(check_stopping(s, c).reason, StopReason::BudgetExhausted);
}

TEST_F(CampaignTest, DeterministicStateHash) {
  auto c = tiny_campaign();
  auto a = start_campaign(c, *world_);
  auto b = start_campaign(c, *world_);
  run_campaign(a, c, *world_);
  run_campaign(b, c, *world_);
  EXPECT_EQ(a.state_hash(), b.state_hash());
  EXPECT_EQ(a.stop, StopReason::MaxCycles);
}

TEST_F(CampaignTest, ResumeMatchesUninterrupted) {
  auto c = tiny_campaign();
  auto whole = start_campaign(c, *world_);
  run_campaign(whole, c, *world_);

  auto part = start_campaign(c, *world_);
  run_cycle(part, c, *world_);
  const auto path = std::filesystem::temp_directory_path() / "divergent_resume_test.ckpt";
  part.save(path);
  auto resumed = CampaignState::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(resumed.state_hash(), part.state_hash());
  run_campaign(resumed, c, *world_);
  EXPECT_EQ(resumed.state_hash(), whole.state_hash());
}

TEST_F(CampaignTest, CheckpointRejectsCorruption) {
  auto c = tiny_campaign();
  auto s = start_campaign(c, *world_);
  auto bytes = s.to_bytes();
  auto bad = bytes;
  bad[8] = 99;  // version field
  try {
    CampaignState::from_bytes(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SchemaMismatch);
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(CampaignState::from_bytes(bytes), Error);
}

TEST_F(CampaignTest, RandomSelectionKeepsBudgetAccounting) {
  auto c = tiny_campaign();
  c.n_cycles_max = 1;
  auto div = start_campaign(c, *world_);
  run_campaign(div, c, *world_);
  auto rc = apply_variant(c, Variant::RandomSelection);
  auto rnd = start_campaign(rc, *world_);
  run_campaign(rnd, rc, *world_);
  // both draw k from the same rule; the random pool is never smaller
  if (div.history[0].selected == static_cast<std::size_t>(selection_size(c, OracleBudget(c.budget))))
    EXPECT_EQ(rnd.budget.spent(), div.budget.spent());
  EXPECT_TRUE(rnd.budget.audit());
}

TEST_F(CampaignTest, PbeOnlyValidatorHasNoDivergence) {
  auto c = apply_variant(tiny_campaign(), Variant::PbeOnlyValidator);
  c.n_cycles_max = 1;
  auto s = start_campaign(c, *world_);
  EXPECT_FALSE(s.model.multi_fidelity());
  run_campaign(s, c, *world_);
  for (const auto& v : s.validated) EXPECT_EQ(v.divergence, 0.0);
  EXPECT_TRUE(s.d_hf.empty());
}
