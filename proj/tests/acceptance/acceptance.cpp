// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 when
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "divergent/active_learning.hpp"
#include "divergent/bench.hpp"
#include "divergent/campaign_io.hpp"
#include "divergent/constraints.hpp"
#include "divergent/generator.hpp"
#include "divergent/hull.hpp"
#include "divergent/stats.hpp"
#include "divergent/surrogate.hpp"
#include "fixtures.hpp"
#include "hull_oracle.hpp"

using namespace divergent;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ------------------------------------------------------------ 1

Outcome hull_oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240501);
  double worst = 0.0;
  int failures = 0;
  for (int k = 0; k < 500; ++k) {
    const auto sys = fixtures::random_system(rng, 12);
    const auto lp = energy_above_hull(sys.candidate, sys.phases);
    const auto brute = fixtures::brute_hull_energy(sys.candidate, sys.phases);
    if (!brute) {
      ++failures;
      continue;
    }
    const double diff = std::abs(lp.e_hull - (sys.candidate.formation_energy - *brute));
    worst = std::max(worst, diff);
    failures += diff > 1e-9;
  }
  const double secs = since(t0);
  return {failures == 0 && secs < 30.0,
          fmt("500 systems, max |LP - brute force| %.2e eV/atom, %d over 1e-9, %.2f s", worst, failures, secs)};
}

// ------------------------------------------------------------ 2

Outcome stability_classification() {
  struct Case {
    double mev;
    Stability want;
  };
  const Case cases[] = {{0.0, Stability::Metastable},    {50.0, Stability::Metastable},
                        {100.0, Stability::MarginallyMetastable}, {-0.001, Stability::Stable},
                        {50.001, Stability::MarginallyMetastable}, {100.001, Stability::Unstable}};
  int bad = 0;
  for (const auto& c : cases) {
    bad += classify_stability_mev(c.mev) != c.want;
    bad += classify_stability(c.mev / 1000.0) != c.want;
  }
  return {bad == 0, fmt("0 -> %s, 50 -> %s, 100 -> %s; %d mismatches",
                        std::string(to_string(classify_stability(0.0))).c_str(),
                        std::string(to_string(classify_stability(0.05))).c_str(),
                        std::string(to_string(classify_stability(0.1))).c_str(), bad)};
}

// ------------------------------------------------------------ 3

Outcome ensemble_aggregation() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> e(-5.0, 1.0), s(0.0, 0.3);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    std::array<double, 5> en{}, sg{};
    for (int i = 0; i < 5; ++i) {
      en[i] = e(rng);
      sg[i] = s(rng);
    }
    // long double two-pass recomputation
    long double m = 0, v = 0, s2 = 0;
    for (int i = 0; i < 5; ++i) m += en[i];
    m /= 5;
    for (int i = 0; i < 5; ++i) {
      v += (en[i] - m) * (en[i] - m);
      s2 += static_cast<long double>(sg[i]) * sg[i];
    }
    const long double sigma = std::sqrt(s2 / 5 + v / 5);
    const auto a = aggregate_ensemble(en, sg);
    const double scale_m = std::max(1.0, std::abs(static_cast<double>(m)));
    const double scale_s = std::max(1e-3, static_cast<double>(sigma));
    worst = std::max(worst, std::abs(a.mean - static_cast<double>(m)) / scale_m / std::numeric_limits<double>::epsilon());
    worst = std::max(worst, std::abs(a.sigma - static_cast<double>(sigma)) / scale_s / std::numeric_limits<double>::epsilon());
  }
  const std::array<double, 5> fe = {1, 1, 1, 1, 6}, fs0 = {0, 0, 0, 0, 0};
  const auto f = aggregate_ensemble(fe, fs0);
  const bool fixture = f.mean == 2.0 && f.sigma == 2.0;
  return {worst <= 8.0 && fixture,
          fmt("1000 fixtures, worst error %.1f ulp (bound 8); {1,1,1,1,6} -> (%g, %g)", worst, f.mean, f.sigma)};
}

// ------------------------------------------------------------ 4

Outcome divergence_identities() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> e(-4.0, 0.5), s(1e-4, 0.5);
  int abs_bad = 0, rel_bad = 0, product_far = 0, product_inexact = 0;
  for (int k = 0; k < 10000; ++k) {
    const double pbe = e(rng), mf = (k % 97 == 0) ? pbe : e(rng), sigma = s(rng);
    const double da = divergence_metric(pbe, mf, sigma, DivergenceKind::Abs);
    const double ds = divergence_metric(pbe, mf, sigma, DivergenceKind::Sgn);
    const double dr = divergence_metric(pbe, mf, sigma, DivergenceKind::Rel);
    abs_bad += da != std::abs(ds);
    rel_bad += dr != da / sigma;
    const double prod = dr * sigma;
    product_inexact += prod != da;
    // the product is rounded once more by the check itself
    product_far += std::abs(prod - da) > std::nextafter(da, 1e300) - da;
  }
  return {abs_bad == 0 && rel_bad == 0 && product_far == 0,
          fmt("10^4 inputs: D_abs == |D_sgn| fails %d, D_rel == D_abs/sigma fails %d, D_rel*sigma beyond 1 ulp %d "
              "(%d differ by the final rounding)",
              abs_bad, rel_bad, product_far, product_inexact)};
}

// ------------------------------------------------------------ 5

Outcome calibration() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> s(0.01, 0.5), c(-3.0, 0.0);
  std::vector<CalibrationSample> v;
  for (int i = 0; i < 10000; ++i) {
    const double sigma = s(rng), centre = c(rng);
    v.push_back({centre, sigma, centre + sigma * n(rng)});
  }
  const double good = expected_calibration_error(v);
  for (auto& x : v) x.sigma /= 10.0;
  const double bad = expected_calibration_error(v);
  return {good < 0.03 && bad > 0.3, fmt("calibrated ECE %.4f (< 0.03), 10x understated sigma ECE %.4f (> 0.3)", good, bad)};
}

// ------------------------------------------------------------ 8

Outcome constraint_validator() {
  const auto corpus = fixtures::valid_corpus();
  int false_reject = 0;
  for (const auto& s : corpus) false_reject += !validate(s, Stage::Validation).overall_pass;

  int seeded = 0, caught = 0;
  const auto& table = ElementTable::builtin();
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto& s = corpus[k];
    // overlapping atoms: second atom placed 0.1 Å from the first
    std::vector<Vec3> x(s.frac_coords().begin(), s.frac_coords().end());
    const Mat3 rinv = s.lattice().inverse();
    x[1] = x[0] + rinv * Vec3(0.1, 0.0, 0.0);
    const auto overlap = s.with_coords(x);
    for (auto stage : {Stage::Generation, Stage::Validation}) {
      ++seeded;
      caught += !validate(overlap, stage).overall_pass;
    }
    // charge imbalance: swap the anion for one of a different charge
    std::vector<int> sp(s.species().begin(), s.species().end());
    const int anion = sp.back();
    const int swap = table.by_z(anion).symbol == "O" ? fixtures::z_of("Cl") : fixtures::z_of("O");
    for (auto& z : sp)
      if (z == anion) z = swap;
    const CrystalStructure imbalanced(s.id() + "-q", s.metric(), sp,
                                      std::vector<Vec3>(s.frac_coords().begin(), s.frac_coords().end()));
    const double net = std::abs(charge_balance(assign_oxidation_states(imbalanced.composition())));
    if (net <= 0.01) continue;  // the swap happened to balance
    for (auto stage : {Stage::Generation, Stage::Validation}) {
      ++seeded;
      caught += !validate(imbalanced, stage).overall_pass;
    }
  }
  const double rate = 100.0 * false_reject / static_cast<double>(corpus.size());
  return {rate < 10.0 && caught == seeded,
          fmt("false rejection %.1f%% of %zu valid; seeded hard violations rejected %d/%d", rate, corpus.size(), caught,
              seeded)};
}

// ------------------------------------------------------------ 9

DiffusionState one_atom(const Vec3& x) {
  DiffusionState s;
  s.frame = CellFrame{{100, 100, 100, 0, 0, 0}, 1.0};
  s.species = {11};
  s.x = {x};
  return s;
}

double wrapped_displacement_variance(double var) {
  const int n = 20000;
  double m2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double d = -0.5 + (k + 0.5) / n;
    m2 += d * d * wrapped_normal_density(d, 0.0, var) / n;
  }
  return m2;
}

Outcome diffusion_sanity() {
  std::ostringstream detail;
  bool ok = true;

  // forward marginals
  const auto sch = NoiseSchedule::cosine(1000);
  std::mt19937_64 rng(9);
  const int n = 10000;
  double worst_z = 0.0;
  for (int t : {sch.steps() / 4, sch.steps() / 2, sch.steps()}) {
    const double var = 1.0 - sch.alpha_bar(t);
    double g2 = 0.0, d2 = 0.0, d4 = 0.0;
    for (int k = 0; k < n; ++k) {
      const auto out = forward_noise(one_atom(Vec3(0.5, 0.5, 0.5)), t, sch, rng);
      g2 += out.g[2] * out.g[2] / n;
      const double d = wrap_difference(out.x[0] - Vec3(0.5, 0.5, 0.5))[0];
      d2 += d * d / n;
      d4 += d * d * d * d / n;
    }
    const double zg = std::abs(g2 - var) / (var * std::sqrt(2.0 / n));
    const double expect = wrapped_displacement_variance(var);
    const double zx = std::abs(d2 - expect) / std::sqrt((d4 - d2 * d2) / n);
    worst_z = std::max({worst_z, zg, zx});
  }
  ok = ok && worst_z < 3.0;
  detail << fmt("forward variance worst %.2f SE", worst_z);

  // known-score reverse sampling
  const auto rs = NoiseSchedule::cosine(300);
  const Vec3 mu(0.3, 0.7, 0.95);
  const double tau2 = 0.01;
  const WrappedGaussianDenoiser den({mu}, tau2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int bins = 20;
  std::vector<double> hist(3 * bins, 0.0);
  bool in_range = true;
  for (int k = 0; k < n; ++k) {
    auto s = one_atom(Vec3(u(rng), u(rng), u(rng)));
    for (int t = rs.steps(); t >= 1; --t) s = reverse_step(s, t, rs, den, {std::nullopt, 0.0}, rng);
    for (int c = 0; c < 3; ++c) {
      in_range = in_range && s.x[0][c] >= 0.0 && s.x[0][c] < 1.0;
      hist[c * bins + std::min(bins - 1, static_cast<int>(s.x[0][c] * bins))] += 1.0 / n;
    }
  }
  double worst_tv = 0.0;
  for (int c = 0; c < 3; ++c) {
    double tv = 0.0;
    for (int b = 0; b < bins; ++b) {
      double p = 0.0;
      for (int q = 0; q < 50; ++q) p += wrapped_normal_density((b + (q + 0.5) / 50) / bins, mu[c], tau2) / 50 / bins;
      tv += std::abs(hist[c * bins + b] - p);
    }
    worst_tv = std::max(worst_tv, 0.5 * tv);
  }
  ok = ok && worst_tv < 0.05 && in_range;
  detail << fmt("; reverse TV %.4f", worst_tv);

  // generated samples keep structure invariants
  const auto corpus = fixtures::valid_corpus(77, 40);
  const auto gsch = NoiseSchedule::cosine(50);
  DenoiserTrainingConfig tc;
  tc.epochs = 20;
  const auto model = train_reference_denoiser(corpus, gsch, tc);
  int checked = 0, broken = 0;
  for (const auto& chem : fixtures::corpus_chemistries()) {
    const auto comp = fixtures::ideal(chem).composition();
    SamplerConfig sc;
    sc.seed = static_cast<std::uint64_t>(checked + 1);
    const auto out = sample(5, comp, {std::nullopt, 0.3}, model, gsch, sc);
    for (const auto& s : out.structures) {
      ++checked;
      Eigen::SelfAdjointEigenSolver<Mat3> eig(s.metric_matrix());
      bool good = eig.eigenvalues().minCoeff() > 0.0 && s.composition() == comp;
      for (const auto& x : s.frac_coords())
        for (int c = 0; c < 3; ++c) good = good && std::isfinite(x[c]) && x[c] >= 0.0 && x[c] < 1.0;
      for (const auto& d : pairwise_min_image_distances(s)) good = good && d.distance > 0.0;
      broken += !good;
    }
  }
  ok = ok && broken == 0 && checked > 0;
  detail << fmt("; %d/%d generated samples keep invariants", checked - broken, checked);
  return {ok, detail.str()};
}

// ------------------------------------------------------------ 10

std::vector<double> bh_definition(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = 1e300;
    for (std::size_t j = i; j < m; ++j) best = std::min(best, double(m) / double(j + 1) * p[order[j]]);
    out[order[i]] = std::min(1.0, best);
  }
  return out;
}

double quadrature_two_tailed(double t, double dof) {
  const double c = std::exp(std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2)) / std::sqrt(dof * M_PI);
  auto f = [&](double u) {
    if (u >= 1.0) return 0.0;
    const double x = std::abs(t) + u / (1 - u);
    return c * std::pow(1 + x * x / dof, -(dof + 1) / 2) / ((1 - u) * (1 - u));
  };
  const int n = 400000;
  const double h = 1.0 / n;
  double s = f(0) + f(1);
  for (int k = 1; k < n; ++k) s += (k % 2 ? 4 : 2) * f(k * h);
  return 2 * s * h / 3;
}

Outcome statistics_toolkit() {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  double bh_worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> p(1 + trial % 20);
    for (auto& v : p) v = trial % 4 ? u(rng) * u(rng) : std::round(u(rng) * 20) / 20;
    const auto got = stats::adjust_pvalues(p, stats::Adjustment::BenjaminiHochberg);
    const auto want = bh_definition(p);
    for (std::size_t i = 0; i < p.size(); ++i) bh_worst = std::max(bh_worst, std::abs(got[i] - want[i]));
  }

  std::normal_distribution<double> n(0, 1);
  double welch_worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> a(3 + trial % 6), b(4 + trial % 4);
    for (auto& v : a) v = 0.5 * (trial % 3) + n(rng) * (1 + trial % 3);
    for (auto& v : b) v = n(rng);
    const auto w = stats::welch_t_test(a, b);
    welch_worst = std::max(welch_worst, std::abs(w.p - quadrature_two_tailed(w.t, w.dof)));
  }

  // fixed points of n = 2 ((z_a + z_b) sigma / delta)^2
  const double z = stats::normal_quantile(0.975) + stats::normal_quantile(0.9);
  const double unit = stats::power_sample_size_exact(1.0, z * std::sqrt(2.0), 0.05, 0.9);
  const double quad = stats::power_sample_size_exact(2.0, 1.0, 0.05, 0.9) / stats::power_sample_size_exact(1.0, 1.0, 0.05, 0.9);
  const double pilot = stats::power_sample_size_exact(2.5, 5.0, 0.05, 0.9);
  const int pilot_n = stats::power_sample_size(2.5, 5.0, 0.05, 0.9);
  const bool power_ok = std::abs(unit - 1.0) < 1e-12 && std::abs(quad - 4.0) < 1e-12 &&
                        std::abs(pilot - z * z / 2.0) < 1e-12 && pilot_n == 6;
  return {bh_worst <= 1e-15 && welch_worst <= 1e-8 && power_ok,
          fmt("BH max deviation %.1e; Welch p max deviation %.1e; power n(2.5, 5) = %.4f -> %d per group",
              bh_worst, welch_worst, pilot, pilot_n)};
}

// ------------------------------------------------------------ 6, 7, 11

struct CampaignRuns {
  const CampaignWorld* world = nullptr;
  CampaignConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int audit_failures = 0;
  int audited_cycles = 0;

  std::vector<double> run(Variant v, CampaignConfig cfg) {
    cfg = apply_variant(cfg, v);
    std::vector<double> eff;
    for (auto seed : seeds) {
      cfg.seed = seed;
      auto s = start_campaign(cfg, *world);
      run_campaign(s, cfg, *world, [&](const CampaignState& st) {
        ++audited_cycles;
        audit_failures += !(st.budget.audit() && st.budget.spent() <= st.budget.total());
      });
      eff.push_back(s.budget.calls(Fidelity::CCSDT) > 0 ? efficiency_score(s) : 0.0);
    }
    return eff;
  }
  std::vector<double> run(Variant v) { return run(v, base); }
};

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.3f", x);
  return s;
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail
              << fmt(" [%.1f s]", since(t0)) << std::endl;
  };

  report(1, "hull_oracle_equivalence", hull_oracle_equivalence);
  report(2, "stability_classification", stability_classification);
  report(3, "ensemble_aggregation", ensemble_aggregation);
  report(4, "divergence_identities", divergence_identities);
  report(5, "calibration", calibration);

  // shared world for the campaign criteria
  std::optional<CampaignWorld> world;
  CampaignRuns runs;
  runs.base.samples_per_cycle = 200;
  runs.base.stopping = StoppingKind::FixedBudget;
  std::vector<double> full, random;

  report(6, "campaign_direction", [&]() -> Outcome {
    const auto t0 = Clock::now();
    world.emplace(build_reference_world());
    runs.world = &*world;
    full = runs.run(Variant::Full);
    random = runs.run(Variant::RandomSelection);
    const double secs = since(t0);
    const double mf = stats::mean(full), mr = stats::mean(random);
    const auto w = stats::welch_t_test(full, random, stats::Tail::One);
    return {mf >= 2.0 * mr && w.p < 0.05 && secs < 600.0,
            fmt("efficiency full %.3f [%s] vs random %.3f [%s], ratio %.2f, Welch one-tailed p %.2e, %.0f s",
                mf, join(full).c_str(), mr, join(random).c_str(), mf / mr, w.p, secs)};
  });

  report(7, "ablation_direction", [&]() -> Outcome {
    if (!world) return {false, "no campaign world"};
    const double mf = stats::mean(full);
    std::string detail = fmt("full %.3f", mf);
    bool ok = true;
    auto check = [&](Variant v, const std::vector<double>& eff) {
      const double m = stats::mean(eff);
      ok = ok && mf >= m;
      detail += fmt("; %s %.3f", std::string(to_string(v)).c_str(), m);
    };
    check(Variant::RandomSelection, random);
    for (auto v : {Variant::NoConditioning, Variant::PbeOnlyValidator, Variant::NoQcNoMf}) check(v, runs.run(v));
    return {ok, detail};
  });

  report(8, "constraint_validator", constraint_validator);
  report(9, "diffusion_sanity", diffusion_sanity);
  report(10, "statistics_toolkit", statistics_toolkit);

  report(11, "budget_and_determinism", [&]() -> Outcome {
    if (!world) return {false, "no campaign world"};
    // a budget that runs dry inside the campaign
    CampaignConfig tight = runs.base;
    tight.samples_per_cycle = 60;
    tight.budget = 1250.0;
    tight.n_cycles_max = 50;
    runs.run(Variant::Full, tight);
    runs.run(Variant::RandomSelection, tight);

    RunConfig rc;
    rc.campaign.n_cycles_max = 2;
    rc.campaign.samples_per_cycle = 50;
    rc.campaign.stopping = StoppingKind::FixedBudget;
    rc.seeds = {7};
    const auto manifest = make_manifest(rc, "campaign").hash();
    const auto root = fs::temp_directory_path() / fmt("divergent-acceptance-%d", static_cast<int>(::getpid()));
    std::string hashes[2];
    for (int r = 0; r < 2; ++r) {
      const auto dir = root / ("run" + std::to_string(r));
      fs::remove_all(dir);
      run_seed_to_dir(rc, *world, 7, Variant::Full, dir, manifest, false);
      hashes[r] = artifact_hashes(dir);
    }
    fs::remove_all(root);
    const bool same = !hashes[0].empty() && hashes[0] == hashes[1];
    return {runs.audit_failures == 0 && same,
            fmt("%d cycles audited across all campaigns, %d ledger violations; artifact hashes %s across two runs",
                runs.audited_cycles, runs.audit_failures, same ? "identical" : "DIFFER")};
  });

  report(12, "hull_scaling", []() -> Outcome {
    const auto r = bench::run_hull_scaling({100, 300, 1000, 3000, 10000}, 1000, 5);
    return {r.slope > 0.9 && r.slope < 1.35 && r.incremental.median < r.full_recompute.median,
            fmt("log-log slope %.3f over m = 100..10000; incremental insert %.2e s vs full recompute %.2e s at m = 1000",
                r.slope, r.incremental.median, r.full_recompute.median)};
  });

  std::cout << (failed == 0 ? "all criteria passed" : fmt("%d criteria failed", failed)) << std::endl;
  return failed == 0 ? 0 : 1;
}
