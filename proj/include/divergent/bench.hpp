#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "divergent/campaign_io.hpp"
#include "divergent/hull.hpp"

namespace divergent::bench {

struct TimingStats {
  double median = 0.0;  // seconds per call
  double p95 = 0.0;
  int repetitions = 0;
  int batch = 1;  // calls per timed sample
};

/// Times `f` after `warmup` untimed calls. When one call is too short for
/// the clock, calls are batched until a sample lasts at least min_sample
/// seconds and the per-call time is reported.
TimingStats time_call(const std::function<void()>& f, int repetitions = 7, int warmup = 1,
                      double min_sample = 2e-3);

/// m phases of a random A-B binary (d = 2) plus both elements, with
/// formation energies below zero and a few near the hull.
std::vector<PhaseEntry> random_binary_phases(int m, std::uint64_t seed);

struct ScalingPoint {
  int m = 0;
  TimingStats build;
};

struct HullScalingReport {
  std::vector<ScalingPoint> points;
  double slope = 0.0;  // least squares of log median against log m
  int paired_m = 0;
  TimingStats incremental;
  TimingStats full_recompute;
  TimingStats cold_query;
  TimingStats cached_query;
  double incremental_speedup = 0.0;
  double cache_speedup = 0.0;
};

/// Sizes must be increasing and at least 3; paired_m sets the size of the
/// incremental-versus-recompute and cache comparisons.
HullScalingReport run_hull_scaling(const std::vector<int>& sizes, int paired_m = 1000, int repetitions = 5,
                                   std::uint64_t seed = 1);

double loglog_slope(const std::vector<ScalingPoint>& points);

struct ProfileRow {
  std::string phase;
  double seconds = 0.0;
  double percent = 0.0;
};

struct PipelineProfile {
  std::vector<ProfileRow> rows;  // generation, prediction, selection, validation, retraining
  std::size_t ledger_calls = 0;    // CCSDT calls on the budget ledger
  std::size_t profiled_calls = 0;  // validations counted by the cycle history
  std::uint64_t state_hash = 0;
  bool consistent() const { return ledger_calls == profiled_calls; }
};

/// Runs the first seed of `config` and aggregates per-phase wall time.
PipelineProfile run_pipeline_profile(const RunConfig& config, const CampaignWorld& world);
PipelineProfile profile_from_state(const CampaignState& state);

/// "# machine ..." lines: host, compiler, build type, hardware threads.
std::string machine_header();
std::string hull_scaling_table(const HullScalingReport& r);
std::string pipeline_table(const PipelineProfile& p);

}  // namespace divergent::bench
