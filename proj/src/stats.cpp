#include "divergent/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "text_util.hpp"

namespace divergent::stats {

void MetricSample::validate() const {
  if (values.empty()) throw Error(ErrorKind::InsufficientData, "metric '" + name + "' has no values");
  for (double v : values)
    if (!std::isfinite(v)) throw Error(ErrorKind::InvalidParameters, "metric '" + name + "' has a non-finite value");
}

double mean(std::span<const double> v) {
  if (v.empty()) throw Error(ErrorKind::InsufficientData, "mean of nothing");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
  if (v.size() < 2) throw Error(ErrorKind::InsufficientData, "standard deviation needs two values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double hit_rate(std::span<const std::string> proposals, const std::set<std::string>& stable,
                std::size_t top_n) {
  if (proposals.empty()) throw Error(ErrorKind::Undefined, "hit rate of an empty proposal list");
  if (top_n == 0 || top_n > proposals.size())
    throw Error(ErrorKind::InvalidParameters, "top_n must lie in [1, proposal count]");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < top_n; ++k) hits += stable.count(proposals[k]);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(top_n);
}

// ---------------------------------------------------------- structures

namespace {

double periodic_gap(double d) { return std::abs(d - std::round(d)); }

}  // namespace

bool structures_match(const CrystalStructure& a, const CrystalStructure& b, const StructureTolerance& tol) {
  if (a.size() != b.size() || a.empty()) return false;
  if (reduce_composition(a.composition()) != reduce_composition(b.composition())) return false;
  const auto pa = lattice_parameters(a.metric()), pb = lattice_parameters(b.metric());
  for (auto [x, y] : {std::pair{pa.a, pb.a}, {pa.b, pb.b}, {pa.c, pb.c}})
    if (std::abs(x - y) > tol.lattice * std::max(x, y)) return false;
  for (auto [x, y] : {std::pair{pa.alpha, pb.alpha}, {pa.beta, pb.beta}, {pa.gamma, pb.gamma}})
    if (std::abs(x - y) > tol.lattice * 90.0) return false;

  const auto& xa = a.frac_coords();
  const auto& xb = b.frac_coords();
  for (std::size_t anchor = 0; anchor < b.size(); ++anchor) {
    if (b.species()[anchor] != a.species()[0]) continue;
    const Vec3 shift = xb[anchor] - xa[0];
    std::vector<bool> used(b.size(), false);
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      const Vec3 target = xa[i] + shift;
      ok = false;
      for (std::size_t j = 0; j < b.size(); ++j) {
        if (used[j] || b.species()[j] != a.species()[i]) continue;
        const Vec3 d = xb[j] - target;
        if (periodic_gap(d[0]) <= tol.coord && periodic_gap(d[1]) <= tol.coord && periodic_gap(d[2]) <= tol.coord) {
          used[j] = true;
          ok = true;
          break;
        }
      }
    }
    if (ok) return true;
  }
  return false;
}

VunResult validity_uniqueness_novelty(std::span<const CrystalStructure> generated,
                                      std::span<const CrystalStructure> training,
                                      const StructureTolerance& tol, const ConstraintContext& ctx) {
  if (generated.empty()) throw Error(ErrorKind::EmptyInput, "no generated structures");
  std::size_t valid = 0;
  std::vector<std::size_t> reps;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    if (validate(generated[i], Stage::Validation, ctx).overall_pass) ++valid;
    bool seen = false;
    for (std::size_t r : reps)
      if (structures_match(generated[i], generated[r], tol)) {
        seen = true;
        break;
      }
    if (!seen) reps.push_back(i);
  }
  std::size_t novel = 0;
  for (std::size_t r : reps) {
    bool known = false;
    for (const auto& t : training)
      if (structures_match(generated[r], t, tol)) {
        known = true;
        break;
      }
    if (!known) ++novel;
  }
  const double n = static_cast<double>(generated.size());
  VunResult out;
  out.validity = 100.0 * static_cast<double>(valid) / n;
  out.uniqueness = 100.0 * static_cast<double>(reps.size()) / n;
  out.novelty = 100.0 * static_cast<double>(novel) / static_cast<double>(reps.size());
  out.distinct = reps.size();
  return out;
}

// ------------------------------------------------------------ bootstrap

Interval bootstrap_ci(std::span<const double> values, int resamples, double level, std::uint64_t seed) {
  if (values.size() < 2) throw Error(ErrorKind::InsufficientData, "bootstrap needs at least two values");
  if (resamples < 1 || !(level > 0.0 && level < 1.0))
    throw Error(ErrorKind::InvalidParameters, "bad bootstrap parameters");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double tail = 0.5 * (1.0 - level);
  return {quantile(tail), quantile(1.0 - tail)};
}

// --------------------------------------------------------- distributions

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0) || !(x >= 0.0 && x <= 1.0))
    throw Error(ErrorKind::InvalidParameters, "incomplete beta needs a, b > 0 and x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw Error(ErrorKind::InvalidParameters, "degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorKind::InvalidParameters, "normal quantile needs p in (0, 1)");
  // Acklam's rational approximation, then one Halley step against erfc
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * 3.14159265358979323846) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

// ----------------------------------------------------------------- tests

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b, Tail tail) {
  if (a.size() < 2 || b.size() < 2) throw Error(ErrorKind::InsufficientData, "Welch test needs two values per sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = std::pow(sample_sd(a), 2) / na, vb = std::pow(sample_sd(b), 2) / nb;
  const double diff = mean(a) - mean(b);
  if (va + vb == 0.0) throw Error(ErrorKind::DegenerateTest, "both samples have zero variance");
  WelchResult r;
  r.t = diff / std::sqrt(va + vb);
  r.dof = (va + vb) * (va + vb) / (va * va / (na - 1) + vb * vb / (nb - 1));
  const double two = std::min(1.0, incomplete_beta(0.5 * r.dof, 0.5, r.dof / (r.dof + r.t * r.t)));
  if (tail == Tail::Two) r.p = two;
  else r.p = r.t > 0 ? 0.5 * two : 1.0 - 0.5 * two;
  return r;
}

std::vector<double> adjust_pvalues(std::span<const double> p, Adjustment method) {
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::InvalidPValue, "p-value outside [0, 1]");
  const std::size_t m = p.size();
  std::vector<double> out(m);
  if (method == Adjustment::Bonferroni) {
    for (std::size_t i = 0; i < m; ++i) out[i] = std::min(1.0, static_cast<double>(m) * p[i]);
    return out;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return p[x] < p[y]; });
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const double scaled = static_cast<double>(m) / static_cast<double>(k + 1) * p[order[k]];
    running = std::min(running, scaled);
    out[order[k]] = std::min(1.0, running);
  }
  return out;
}

double power_sample_size_exact(double sigma, double delta, double alpha, double power) {
  if (!(sigma > 0.0) || !(delta > 0.0) || !(alpha > 0.0 && alpha < 1.0) || !(power > 0.0 && power < 1.0))
    throw Error(ErrorKind::InvalidParameters, "need sigma, delta > 0 and alpha, power in (0, 1)");
  const double z = normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power);
  const double r = z * sigma / delta;
  return 2.0 * r * r;
}

int power_sample_size(double sigma, double delta, double alpha, double power) {
  const double n = power_sample_size_exact(sigma, delta, alpha, power);
  // guard the ceiling against rounding at exact integers
  const double rounded = std::round(n);
  return static_cast<int>(std::abs(n - rounded) < 1e-9 * std::max(1.0, n) ? rounded : std::ceil(n));
}

EffectSizes effect_sizes_and_cv(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw Error(ErrorKind::InsufficientData, "effect sizes need two values per sample");
  const double ma = mean(a), mb = mean(b), sa = sample_sd(a), sb = sample_sd(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double pooled = std::sqrt(((na - 1) * sa * sa + (nb - 1) * sb * sb) / (na + nb - 2));
  EffectSizes e;
  if (pooled == 0.0) {
    if (ma != mb) throw Error(ErrorKind::Undefined, "Cohen's d with zero pooled SD");
    e.cohens_d = 0.0;
  } else {
    e.cohens_d = (ma - mb) / pooled;
  }
  if (sb == 0.0) {
    if (ma != mb) throw Error(ErrorKind::Undefined, "Glass's delta with zero control SD");
    e.glass_delta = 0.0;
  } else {
    e.glass_delta = (ma - mb) / sb;
  }
  if (ma == 0.0 || mb == 0.0) throw Error(ErrorKind::Undefined, "coefficient of variation with zero mean");
  e.cv_a = sa / std::abs(ma) * 100.0;
  e.cv_b = sb / std::abs(mb) * 100.0;
  return e;
}

std::string metric_report(std::span<const MetricSample> metrics, std::uint64_t seed) {
  std::ostringstream os;
  os << "metric\tmean\tci_lo\tci_hi\tunits\tvalues\n";
  for (const auto& m : metrics) {
    m.validate();
    const double mu = mean(m.values);
    Interval ci{mu, mu};
    if (m.values.size() >= 2) ci = bootstrap_ci(m.values, 1000, 0.95, seed);
    os << m.name << '\t' << detail::format_double(mu) << '\t' << detail::format_double(ci.lo) << '\t'
       << detail::format_double(ci.hi) << '\t' << m.units << '\t';
    for (std::size_t k = 0; k < m.values.size(); ++k) os << (k ? ";" : "") << detail::format_double(m.values[k]);
    os << '\n';
  }
  return os.str();
}

}  // namespace divergent::stats
