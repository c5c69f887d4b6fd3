#include "divergent/bench.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

namespace divergent::bench {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string num(double v, int digits) {
  std::ostringstream o;
  o << std::setprecision(digits) << v;
  return o.str();
}

}  // namespace

TimingStats time_call(const std::function<void()>& f, int repetitions, int warmup, double min_sample) {
  if (repetitions < 1) throw Error(ErrorKind::InvalidParameters, "repetitions must be at least 1");
  for (int i = 0; i < warmup; ++i) f();
  int batch = 1;
  while (true) {
    const auto t0 = Clock::now();
    for (int i = 0; i < batch; ++i) f();
    if (seconds_since(t0) >= min_sample || batch >= (1 << 20)) break;
    batch *= 4;
  }
  std::vector<double> samples;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = Clock::now();
    for (int i = 0; i < batch; ++i) f();
    samples.push_back(seconds_since(t0) / batch);
  }
  return {quantile(samples, 0.5), quantile(samples, 0.95), repetitions, batch};
}

std::vector<PhaseEntry> random_binary_phases(int m, std::uint64_t seed) {
  if (m < 3) throw Error(ErrorKind::InvalidParameters, "need at least 3 phases");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, kMaxAtomsPerCell / 2);
  std::uniform_real_distribution<double> depth(0.0, 1.0);
  const int a = 3, b = 8;  // Li, O
  std::vector<PhaseEntry> out;
  out.push_back(make_phase("A", Composition({{a, 1}}), 0.0));
  out.push_back(make_phase("B", Composition({{b, 1}}), 0.0));
  for (int i = 2; i < m; ++i) {
    const int na = count(rng), nb = count(rng);
    const double x = static_cast<double>(na) / (na + nb);
    // parabolic well plus scatter above it
    const double e = -2.0 * 4.0 * x * (1.0 - x) + 0.6 * depth(rng);
    out.push_back(make_phase("p" + std::to_string(i), Composition({{a, na}, {b, nb}}), e));
  }
  return out;
}

double loglog_slope(const std::vector<ScalingPoint>& points) {
  if (points.size() < 2) throw Error(ErrorKind::InsufficientData, "slope needs at least two sizes");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(points.size());
  for (const auto& p : points) {
    const double x = std::log(static_cast<double>(p.m)), y = std::log(p.build.median);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

HullScalingReport run_hull_scaling(const std::vector<int>& sizes, int paired_m, int repetitions, std::uint64_t seed) {
  if (sizes.size() < 2) throw Error(ErrorKind::InvalidParameters, "need at least two sizes");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 3) throw Error(ErrorKind::InvalidParameters, "sizes must be at least 3");
    if (i > 0 && sizes[i] <= sizes[i - 1]) throw Error(ErrorKind::InvalidParameters, "sizes must increase");
  }
  HullScalingReport r;
  for (int m : sizes) {
    const auto phases = random_binary_phases(m, seed + static_cast<std::uint64_t>(m));
    r.points.push_back({m, time_call([&] { (void)HullState::build(phases); }, repetitions)});
  }
  r.slope = loglog_slope(r.points);

  r.paired_m = paired_m;
  auto phases = random_binary_phases(paired_m + 1, seed ^ 0x1ace);
  const PhaseEntry extra = phases.back();
  phases.pop_back();
  const auto base = HullState::build(phases);
  auto all = phases;
  all.push_back(extra);
  r.incremental = time_call([&] { (void)incremental_insert(base, extra); }, repetitions);
  r.full_recompute = time_call([&] { (void)HullState::build(all); }, repetitions);
  r.incremental_speedup = r.full_recompute.median / r.incremental.median;

  const std::vector<int> elements = {3, 8};
  SubsystemCache cache;
  const auto probe = make_phase("probe", Composition({{3, 2}, {8, 3}}), -1.0);
  r.cold_query = time_call(
      [&] {
        cache.clear();
        (void)cache.get_or_build(phases, elements)->query(probe);
      },
      repetitions);
  (void)cache.get_or_build(phases, elements);
  r.cached_query = time_call([&] { (void)cache.get_or_build(phases, elements)->query(probe); }, repetitions);
  r.cache_speedup = r.cold_query.median / r.cached_query.median;
  return r;
}

PipelineProfile profile_from_state(const CampaignState& state) {
  PhaseSeconds total;
  for (const auto& t : state.timings) {
    total.generation += t.generation;
    total.prediction += t.prediction;
    total.selection += t.selection;
    total.validation += t.validation;
    total.retraining += t.retraining;
  }
  PipelineProfile p;
  p.rows = {{"generation", total.generation, 0.0},
            {"prediction", total.prediction, 0.0},
            {"selection", total.selection, 0.0},
            {"validation", total.validation, 0.0},
            {"retraining", total.retraining, 0.0}};
  double sum = 0.0;
  for (const auto& row : p.rows) sum += row.seconds;
  for (auto& row : p.rows) row.percent = sum > 0.0 ? 100.0 * row.seconds / sum : 0.0;
  p.ledger_calls = state.budget.calls(Fidelity::CCSDT);
  for (const auto& h : state.history) p.profiled_calls += h.validated;
  p.state_hash = state.state_hash();
  return p;
}

PipelineProfile run_pipeline_profile(const RunConfig& config, const CampaignWorld& world) {
  auto cc = apply_variant(config.campaign, config.variants.empty() ? Variant::Full : config.variants.front());
  if (!config.seeds.empty()) cc.seed = config.seeds.front();
  auto state = start_campaign(cc, world);
  run_campaign(state, cc, world);
  return profile_from_state(state);
}

std::string machine_header() {
  char host[256] = "unknown";
  gethostname(host, sizeof host - 1);
  std::ostringstream o;
  o << "# machine\thost=" << host << "\thardware_threads=" << std::thread::hardware_concurrency() << "\n"
    << "# build\tcompiler=" <<
#if defined(__clang__)
      "clang-" << __clang_major__ << "." << __clang_minor__
#elif defined(__GNUC__)
      "gcc-" << __GNUC__ << "." << __GNUC_MINOR__
#else
      "unknown"
#endif
    << "\tcode=" << code_version_hash() << "\n";
  return o.str();
}

std::string hull_scaling_table(const HullScalingReport& r) {
  std::ostringstream o;
  o << "case\tm\tmedian_s\tp95_s\trepetitions\tbatch\n";
  for (const auto& p : r.points)
    o << "build_d2\t" << p.m << "\t" << num(p.build.median, 6) << "\t" << num(p.build.p95, 6) << "\t"
      << p.build.repetitions << "\t" << p.build.batch << "\n";
  auto row = [&](const char* name, const TimingStats& t) {
    o << name << "\t" << r.paired_m << "\t" << num(t.median, 6) << "\t" << num(t.p95, 6) << "\t" << t.repetitions
      << "\t" << t.batch << "\n";
  };
  row("incremental_insert", r.incremental);
  row("full_recompute", r.full_recompute);
  row("cold_query", r.cold_query);
  row("cached_query", r.cached_query);
  o << "# loglog_slope\t" << num(r.slope, 4) << "\n"
    << "# incremental_speedup\t" << num(r.incremental_speedup, 4) << "\n"
    << "# cache_speedup\t" << num(r.cache_speedup, 4) << "\n";
  return o.str();
}

std::string pipeline_table(const PipelineProfile& p) {
  std::ostringstream o;
  o << "phase\tseconds\tpercent\n";
  double sum = 0.0;
  for (const auto& r : p.rows) {
    o << r.phase << "\t" << num(r.seconds, 6) << "\t" << std::fixed << std::setprecision(2) << r.percent << "\n"
      << std::defaultfloat;
    sum += r.seconds;
  }
  o << "total\t" << num(sum, 6) << "\t100.00\n"
    << "# ccsdt_calls ledger=" << p.ledger_calls << " profiled=" << p.profiled_calls
    << (p.consistent() ? " consistent" : " MISMATCH") << "\n";
  return o.str();
}

}  // namespace divergent::bench
