#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "divergent/chem_core.hpp"
#include "divergent/constraints.hpp"

namespace divergent::stats {

/// Per-seed values of one metric.
struct MetricSample {
  std::string name;
  std::vector<double> values;
  std::string units;

  /// Throws InsufficientData when empty, InvalidParameters on non-finite values.
  void validate() const;
};

double mean(std::span<const double> v);
/// Sample standard deviation (n - 1 denominator).
double sample_sd(std::span<const double> v);

/// 100 * |top_n ∩ stable| / top_n over the first top_n proposals.
double hit_rate(std::span<const std::string> proposals, const std::set<std::string>& stable,
                std::size_t top_n);

struct StructureTolerance {
  double lattice = 0.01;  // relative, on a, b, c; absolute 1% of 90° on angles
  double coord = 0.05;    // fractional, per component, periodic
};

/// Same reduced composition and atom count, lattice parameters within
/// tolerance, and a translation mapping every atom onto one of the same
/// species within the coordinate tolerance.
bool structures_match(const CrystalStructure& a, const CrystalStructure& b,
                      const StructureTolerance& tol = {});

struct VunResult {
  double validity = 0.0;    // percent of generated passing validation-stage checks
  double uniqueness = 0.0;  // percent distinct among generated
  double novelty = 0.0;     // percent of distinct items matching no training structure
  std::size_t distinct = 0;
};

VunResult validity_uniqueness_novelty(std::span<const CrystalStructure> generated,
                                      std::span<const CrystalStructure> training,
                                      const StructureTolerance& tol = {},
                                      const ConstraintContext& ctx = ConstraintContext::builtin());

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean.
Interval bootstrap_ci(std::span<const double> values, int resamples = 1000, double level = 0.95,
                      std::uint64_t seed = 0);

/// Regularised incomplete beta I_x(a, b), continued fraction (modified Lentz).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double dof);
/// Inverse standard normal CDF.
double normal_quantile(double p);

enum class Tail { One, Two };

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
};

/// One-tailed tests the alternative mean(a) > mean(b).
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b, Tail tail = Tail::Two);

enum class Adjustment { Bonferroni, BenjaminiHochberg };

std::vector<double> adjust_pvalues(std::span<const double> p, Adjustment method);

/// n = 2 ((z_{1-alpha/2} + z_{power}) sigma / delta)^2 before the ceiling.
double power_sample_size_exact(double sigma, double delta, double alpha, double power);
int power_sample_size(double sigma, double delta, double alpha = 0.05, double power = 0.9);

struct EffectSizes {
  double cohens_d = 0.0;     // pooled SD
  double glass_delta = 0.0;  // SD of b, the control
  double cv_a = 0.0;         // percent
  double cv_b = 0.0;
};

EffectSizes effect_sizes_and_cv(std::span<const double> a, std::span<const double> b);

/// metric, mean, CI lo, CI hi, units, per-seed values (';' joined), tab separated.
std::string metric_report(std::span<const MetricSample> metrics, std::uint64_t seed = 0);

}  // namespace divergent::stats
