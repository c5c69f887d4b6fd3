#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "divergent/oracles.hpp"
#include "divergent/surrogate.hpp"
#include "fixtures.hpp"

using namespace divergent;

namespace {

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

struct Pool {
  std::vector<CrystalStructure> structures;
  std::vector<Eigen::VectorXd> features;
  FeatureMap map;
};

const std::vector<std::pair<std::string, std::string>>& pairs() {
  static const std::vector<std::pair<std::string, std::string>> p = {
      {"Na", "Cl"}, {"K", "F"}, {"Li", "Br"}, {"Mg", "O"}, {"Ca", "S"}, {"Sr", "Se"},
      {"Fe", "O"},  {"Ni", "S"}, {"Co", "O"}, {"Mn", "Se"}, {"Ti", "O"}, {"Cu", "Cl"}};
  return p;
}

Pool make_pool(std::uint64_t seed, int per_pair) {
  Pool out;
  std::vector<int> elements;
  for (const auto& [a, b] : pairs()) {
    elements.push_back(fixtures::z_of(a));
    elements.push_back(fixtures::z_of(b));
  }
  out.map = FeatureMap(elements);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(0.9, 1.15);
  const fixtures::Prototype protos[] = {fixtures::Prototype::RocksaltPrimitive, fixtures::Prototype::CsCl,
                                        fixtures::Prototype::Zincblende};
  const auto& table = ElementTable::builtin();
  int k = 0;
  for (const auto& [a, b] : pairs()) {
    const int za = fixtures::z_of(a), zb = fixtures::z_of(b);
    const double d0 = table.by_z(za).covalent_radius + table.by_z(zb).covalent_radius;
    for (int n = 0; n < per_pair; ++n) {
      auto s = fixtures::binary("p" + std::to_string(k++), za, zb, protos[n % 3], d0 * scale(rng));
      out.features.push_back(out.map(s));
      out.structures.push_back(std::move(s));
    }
  }
  return out;
}

SurrogateConfig quick() {
  SurrogateConfig c;
  c.epochs = 250;
  return c;
}

}  // namespace

TEST(AggregationTest, WorkedExample) {
  const std::array<double, 5> e = {1, 1, 1, 1, 6}, s = {0, 0, 0, 0, 0};
  const auto a = aggregate_ensemble(e, s);
  EXPECT_DOUBLE_EQ(a.mean, 2.0);
  EXPECT_DOUBLE_EQ(a.sigma, 2.0);
}

TEST(AggregationTest, IdenticalMembers) {
  const std::array<double, 5> e = {-1.25, -1.25, -1.25, -1.25, -1.25}, s = {0.1, 0.1, 0.1, 0.1, 0.1};
  const auto a = aggregate_ensemble(e, s);
  EXPECT_DOUBLE_EQ(a.mean, -1.25);
  EXPECT_NEAR(a.sigma, 0.1, 1e-16);
}

TEST(AggregationTest, RejectsMismatchedInputs) {
  const std::array<double, 2> e = {1, 2};
  const std::array<double, 1> s = {0};
  EXPECT_THROW(aggregate_ensemble(e, s), Error);
  EXPECT_THROW(aggregate_ensemble(std::span<const double>{}, std::span<const double>{}), Error);
}

TEST(DivergenceTest, Examples) {
  EXPECT_NEAR(divergence_metric(-1.00, -1.05, 0.05, DivergenceKind::Abs), 0.05, 1e-15);
  EXPECT_NEAR(divergence_metric(-1.00, -1.05, 0.05, DivergenceKind::Rel), 1.0, 1e-13);
  EXPECT_NEAR(divergence_metric(-1.00, -1.05, 0.05, DivergenceKind::Sgn), 0.05, 1e-15);
  EXPECT_LT(divergence_metric(-1.10, -1.05, 0.05, DivergenceKind::Sgn), 0.0);
  EXPECT_EQ(divergence_metric(-1.0, -1.0, 0.05), 0.0);
  try {
    divergence_metric(-1, -1.05, 0.0, DivergenceKind::Rel);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DivisionBySigmaZero);
  }
  EXPECT_EQ(divergence_kind_from_string("rel"), DivergenceKind::Rel);
  EXPECT_EQ(to_string(DivergenceKind::Sgn), "sgn");
  EXPECT_THROW(divergence_kind_from_string("max"), Error);
}

TEST(CalibrationTest, PerfectlyCalibratedIsSmall) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> s(0.01, 0.5);
  std::vector<CalibrationSample> v;
  for (int i = 0; i < 10000; ++i) {
    const double sigma = s(rng);
    v.push_back({0.3, sigma, 0.3 + sigma * n(rng)});
  }
  EXPECT_LT(expected_calibration_error(v), 0.03);
  for (auto& x : v) x.sigma /= 10;
  EXPECT_GT(expected_calibration_error(v), 0.3);
}

TEST(CalibrationTest, SingleBinPerfectCoverageIsZero) {
  // place u = 2 Phi(z) - 1 exactly at k / n by bisection on z
  const int n = 9;
  std::vector<CalibrationSample> v;
  for (int k = 1; k <= n; ++k) {
    const double target = (k - 0.5) / n;
    double lo = 0, hi = 10;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (std::erf(mid / std::sqrt(2.0)) < target ? lo : hi) = mid;
    }
    v.push_back({0.0, 1.0, 0.5 * (lo + hi)});
  }
  // median sample has rank 5 of 9 and nominal 4.5/9: the gap is the half-rank offset
  EXPECT_NEAR(expected_calibration_error(v, 1), 0.5 / n, 1e-12);
  std::vector<CalibrationSample> exact;
  for (int k = 1; k <= n; ++k) {
    const double target = static_cast<double>(k) / (n + 1);
    double lo = 0, hi = 10;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (std::erf(mid / std::sqrt(2.0)) < target ? lo : hi) = mid;
    }
    exact.push_back({0.0, 1.0, 0.5 * (lo + hi)});
  }
  exact.push_back({0.0, 1.0, 40.0});  // u = 1, rank 10 of 10
  // single bin: median sample index 4 has rank 5/10 and nominal 5/10
  EXPECT_NEAR(expected_calibration_error(exact, 1), 0.0, 1e-12);
}

TEST(CalibrationTest, Errors) {
  try {
    expected_calibration_error({}, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
  }
  const std::vector<CalibrationSample> v = {{0, 0, 1}};
  EXPECT_THROW(expected_calibration_error(v, 1), Error);
}

TEST(FeatureMapTest, LayoutAndUnknownElement) {
  const FeatureMap m({11, 17});
  const auto s = fixtures::binary("x", 11, 17, fixtures::Prototype::RocksaltPrimitive, 2.8);
  const auto x = m(s);
  ASSERT_EQ(static_cast<std::size_t>(x.size()), m.dim());
  EXPECT_DOUBLE_EQ(x[0], 0.5);
  EXPECT_DOUBLE_EQ(x[1], 0.5);
  EXPECT_GT(x[x.size() - 1], 0.0);
  const auto feo = fixtures::binary("y", 26, 8, fixtures::Prototype::RocksaltPrimitive, 2.1);
  EXPECT_THROW(m(feo), Error);
}

class SurrogateTrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    pool_ = new Pool(make_pool(9, 24));
    const SyntheticLandscape L;
    OracleBudget budget(1e9);
    data_ = new std::vector<SurrogateExample>;
    pbe_only_ = new std::vector<SurrogateExample>;
    test_truth_ = new std::vector<double>;
    test_idx_ = new std::vector<std::size_t>;
    for (std::size_t i = 0; i < pool_->structures.size(); ++i) {
      const auto& s = pool_->structures[i];
      const auto pbe = evaluate(s, Fidelity::PBE, L, budget);
      data_->push_back({s.id(), s.id(), pool_->features[i], Fidelity::PBE, pbe.energy_per_atom});
      pbe_only_->push_back(data_->back());
      if (i % 3 == 0) {
        data_->push_back({s.id() + "/hse", s.id(), pool_->features[i], Fidelity::HSE06,
                          evaluate(s, Fidelity::HSE06, L, budget).energy_per_atom});
      }
      const double cc = evaluate(s, Fidelity::CCSDT, L, budget).energy_per_atom;
      if (i % 4 == 1) {
        data_->push_back({s.id() + "/cc", s.id(), pool_->features[i], Fidelity::CCSDT, cc});
      } else if (i % 4 == 3) {
        test_idx_->push_back(i);
        test_truth_->push_back(cc);
      }
    }
    model_ = new MultiFidelityModel(MultiFidelityModel::train(*data_, quick()));
  }
  static void TearDownTestSuite() {
    delete pool_;
    delete data_;
    delete pbe_only_;
    delete test_truth_;
    delete test_idx_;
    delete model_;
  }

  static Pool* pool_;
  static std::vector<SurrogateExample>* data_;
  static std::vector<SurrogateExample>* pbe_only_;
  static std::vector<double>* test_truth_;
  static std::vector<std::size_t>* test_idx_;
  static MultiFidelityModel* model_;
};

Pool* SurrogateTrainingTest::pool_ = nullptr;
std::vector<SurrogateExample>* SurrogateTrainingTest::data_ = nullptr;
std::vector<SurrogateExample>* SurrogateTrainingTest::pbe_only_ = nullptr;
std::vector<double>* SurrogateTrainingTest::test_truth_ = nullptr;
std::vector<std::size_t>* SurrogateTrainingTest::test_idx_ = nullptr;
MultiFidelityModel* SurrogateTrainingTest::model_ = nullptr;

TEST_F(SurrogateTrainingTest, MultiFidelityBeatsPbeOnlyOnCcsdtLabels) {
  const auto pbe_model = MultiFidelityModel::train(*pbe_only_, quick());
  std::vector<double> mf, pbe;
  for (std::size_t i : *test_idx_) {
    mf.push_back(model_->predict(pool_->features[i]).e_mf);
    pbe.push_back(pbe_model.predict_fidelity(pool_->features[i], Fidelity::PBE));
  }
  const double e_mf = rmse(mf, *test_truth_), e_pbe = rmse(pbe, *test_truth_);
  EXPECT_LT(e_mf, e_pbe) << "mf " << e_mf << " pbe-only " << e_pbe;
}

TEST_F(SurrogateTrainingTest, DivergenceLargerOnCorrelatedCompositions) {
  const SyntheticLandscape L;
  double flagged = 0, plain = 0;
  int nf = 0, np = 0;
  for (std::size_t i = 0; i < pool_->structures.size(); ++i) {
    const double d = model_->predict(pool_->features[i]).divergence;
    if (L.correlation_flagged(pool_->structures[i].composition())) {
      flagged += d;
      ++nf;
    } else {
      plain += d;
      ++np;
    }
  }
  EXPECT_GT(flagged / nf, 2 * plain / np);
}

TEST_F(SurrogateTrainingTest, BundleInvariants) {
  for (std::size_t i = 0; i < 20; ++i) {
    const auto b = model_->predict(pool_->features[i]);
    EXPECT_GE(b.sigma_mf, 0.0);
    EXPECT_DOUBLE_EQ(b.divergence, std::abs(b.e_pbe_pred - b.e_mf));
    const auto agg = aggregate_ensemble(b.member_energy, b.member_sigma);
    EXPECT_EQ(agg.mean, b.e_mf);
    EXPECT_EQ(agg.sigma, b.sigma_mf);
    const auto again = model_->predict(pool_->features[i]);
    EXPECT_EQ(again.e_mf, b.e_mf);
    EXPECT_EQ(again.sigma_mf, b.sigma_mf);
  }
}

TEST_F(SurrogateTrainingTest, MembersHaveDistinctBootstrapSets) {
  const auto idx = model_->bootstrap_indices();
  ASSERT_EQ(idx.size(), static_cast<std::size_t>(kEnsembleSize));
  std::set<std::vector<std::size_t>> distinct(idx.begin(), idx.end());
  EXPECT_EQ(distinct.size(), idx.size());
  for (const auto& v : idx) {
    EXPECT_GT(v.size(), data_->size() / 2);
    EXPECT_LT(v.size(), data_->size());
  }
  for (int k = 0; k < kEnsembleSize; ++k) EXPECT_GT(model_->member_sigma(static_cast<std::size_t>(k)), 0.0);
}

TEST_F(SurrogateTrainingTest, LossDecreases) {
  const auto& h = model_->loss_history();
  ASSERT_EQ(h.size(), static_cast<std::size_t>(quick().epochs));
  const double head = std::accumulate(h.begin(), h.begin() + 20, 0.0);
  const double tail = std::accumulate(h.end() - 20, h.end(), 0.0);
  EXPECT_LT(tail, 0.5 * head);
}

TEST_F(SurrogateTrainingTest, TrainingIsDeterministic) {
  const auto again = MultiFidelityModel::train(*data_, quick());
  EXPECT_EQ(again.state_hash(), model_->state_hash());
  auto cfg = quick();
  cfg.seed = 12;
  EXPECT_NE(MultiFidelityModel::train(*data_, cfg).state_hash(), model_->state_hash());
}

TEST_F(SurrogateTrainingTest, CheckpointRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "divergent_surrogate_test.bin";
  model_->save(path);
  const auto back = MultiFidelityModel::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.state_hash(), model_->state_hash());
  EXPECT_EQ(back.schema_hash(), model_->schema_hash());
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(back.predict(pool_->features[i]).e_mf, model_->predict(pool_->features[i]).e_mf);
  }
  auto bytes = model_->to_bytes();
  bytes[3] ^= 0xff;
  try {
    MultiFidelityModel::from_bytes(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SchemaMismatch);
  }
  bytes = model_->to_bytes();
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(MultiFidelityModel::from_bytes(bytes), Error);
}

TEST_F(SurrogateTrainingTest, FineTuneReducesErrorOnNewLabels) {
  const SyntheticLandscape L;
  OracleBudget budget(1e9);
  std::vector<SurrogateExample> extra = *data_;
  std::vector<double> before, truth;
  for (std::size_t i : *test_idx_) {
    const auto& s = pool_->structures[i];
    extra.push_back({s.id() + "/cc", s.id(), pool_->features[i], Fidelity::CCSDT,
                     evaluate(s, Fidelity::CCSDT, L, budget).energy_per_atom});
    before.push_back(model_->predict(pool_->features[i]).e_mf);
    truth.push_back(extra.back().energy);
  }
  auto tuned = *model_;
  tuned.fine_tune(extra);
  std::vector<double> after;
  for (std::size_t i : *test_idx_) after.push_back(tuned.predict(pool_->features[i]).e_mf);
  EXPECT_LT(rmse(after, truth), rmse(before, truth));
  EXPECT_EQ(tuned.loss_history().size(), model_->loss_history().size() + 60);
}

TEST(SurrogateTest, IdenticalLabelsGiveNearZeroDivergence) {
  const auto pool = make_pool(4, 15);
  const SyntheticLandscape L;
  std::vector<SurrogateExample> data;
  for (std::size_t i = 0; i < pool.structures.size(); ++i) {
    const double e = L.evaluate_noise_free(pool.structures[i], Fidelity::CCSDT).energy_per_atom;
    for (Fidelity f : {Fidelity::PBE, Fidelity::CCSDT})
      data.push_back({pool.structures[i].id() + std::string(to_string(f)), pool.structures[i].id(), pool.features[i], f, e});
  }
  const auto m = MultiFidelityModel::train(data, quick());
  double worst = 0;
  for (const auto& x : pool.features) worst = std::max(worst, m.predict(x).divergence);
  // noise floor of the PBE oracle
  EXPECT_LT(worst, 2 * LandscapeConfig{}.noise_sigma[0]);
}

TEST(SurrogateTest, PbeOnlyLossWeightTracksPbe) {
  const auto pool = make_pool(6, 15);
  const SyntheticLandscape L;
  OracleBudget budget(1e9);
  std::vector<SurrogateExample> data;
  std::vector<double> pbe_truth;
  for (std::size_t i = 0; i < pool.structures.size(); ++i) {
    const auto& s = pool.structures[i];
    pbe_truth.push_back(evaluate(s, Fidelity::PBE, L, budget).energy_per_atom);
    data.push_back({s.id(), s.id(), pool.features[i], Fidelity::PBE, pbe_truth.back()});
    data.push_back({s.id() + "/cc", s.id(), pool.features[i], Fidelity::CCSDT,
                    evaluate(s, Fidelity::CCSDT, L, budget).energy_per_atom});
  }
  auto cfg = quick();
  cfg.loss_weights = {1, 0, 0, 0};
  const auto m = MultiFidelityModel::train(data, cfg);
  std::vector<double> pred;
  for (const auto& x : pool.features) pred.push_back(m.predict(x).e_mf);
  double spread = 0, mean = std::accumulate(pbe_truth.begin(), pbe_truth.end(), 0.0) / pbe_truth.size();
  for (double v : pbe_truth) spread += (v - mean) * (v - mean);
  spread = std::sqrt(spread / pbe_truth.size());
  EXPECT_LT(rmse(pred, pbe_truth), 0.2 * spread);
  for (const auto& x : pool.features) EXPECT_EQ(m.predict(x).divergence, 0.0);
}

TEST(SurrogateTest, SingleFidelityDegradedMode) {
  const auto pool = make_pool(2, 6);
  std::vector<SurrogateExample> data;
  for (std::size_t i = 0; i < pool.structures.size(); ++i)
    data.push_back({pool.structures[i].id(), "", pool.features[i], Fidelity::PBE, -1.0 - 0.01 * static_cast<double>(i)});
  const auto m = MultiFidelityModel::train(data, quick());
  EXPECT_FALSE(m.multi_fidelity());
  EXPECT_FALSE(m.warnings().empty());
  EXPECT_NO_THROW(m.predict_fidelity(pool.features[0], Fidelity::PBE));
  try {
    m.predict(pool.features[0]);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DivergenceUndefined);
  }
}

TEST(SurrogateTest, UntrainedAndEmpty) {
  const MultiFidelityModel m;
  try {
    m.predict(Eigen::VectorXd::Zero(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ModelNotTrained);
  }
  try {
    MultiFidelityModel::train({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyDataset);
  }
}

TEST(ErrorPropagationTest, Formula) {
  const double j_mf = numeric_jacobian([](double x) { return 0.5 * x * x; }, 2.0);
  EXPECT_NEAR(j_mf, 2.0, 1e-8);
  const auto e = propagate_errors(0.001, 0.02, 0.01, j_mf, 0.5);
  EXPECT_NEAR(e.sigma_final, std::sqrt(1e-6 + j_mf * j_mf * 4e-4 + 0.25 * 1e-4), 1e-15);
  EXPECT_THROW(propagate_errors(-1, 0, 0, 0, 0), Error);
}
