#include "divergent/hull.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "text_util.hpp"

namespace divergent {

namespace {

struct ProbeCounters {
  std::atomic<std::uint64_t> calls{0};
  std::atomic<std::uint64_t> nanos{0};
};
ProbeCounters g_build, g_insert, g_query, g_lp;

class ScopedProbe {
 public:
  explicit ScopedProbe(ProbeCounters& c) : c_(c), start_(std::chrono::steady_clock::now()) {}
  ~ScopedProbe() {
    const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                        std::chrono::steady_clock::now() - start_)
                        .count();
    c_.calls.fetch_add(1, std::memory_order_relaxed);
    c_.nanos.fetch_add(static_cast<std::uint64_t>(ns), std::memory_order_relaxed);
  }

 private:
  ProbeCounters& c_;
  std::chrono::steady_clock::time_point start_;
};

HullProbe snapshot(const ProbeCounters& c) {
  return {c.calls.load(), static_cast<double>(c.nanos.load()) * 1e-9};
}

constexpr double kHullTol = 1e-12;

bool subset_of(const Composition& c, const std::vector<int>& sorted_elements) {
  for (const auto& e : c.entries())
    if (!std::binary_search(sorted_elements.begin(), sorted_elements.end(), e.z)) return false;
  return true;
}

// Columns: atom fractions of each eligible phase over x's elements.
struct LpSetup {
  Eigen::MatrixXd a;
  Eigen::VectorXd b, c;
  std::vector<const PhaseEntry*> cols;
};

template <typename Range>
LpSetup setup_lp(const PhaseEntry& x, const Range& candidates) {
  const auto elems = x.composition.elements();
  LpSetup s;
  for (const PhaseEntry* p : candidates)
    if (p->phase_id != x.phase_id && subset_of(p->composition, elems)) s.cols.push_back(p);
  const auto m = static_cast<Eigen::Index>(elems.size());
  const auto n = static_cast<Eigen::Index>(s.cols.size());
  s.a.resize(m, n);
  s.b.resize(m);
  s.c.resize(n);
  for (Eigen::Index r = 0; r < m; ++r) s.b[r] = x.composition.fraction(elems[static_cast<std::size_t>(r)]);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto* p = s.cols[static_cast<std::size_t>(j)];
    for (Eigen::Index r = 0; r < m; ++r) s.a(r, j) = p->composition.fraction(elems[static_cast<std::size_t>(r)]);
    s.c[j] = p->formation_energy;
  }
  return s;
}

void check_finite(const PhaseEntry& p) {
  if (!std::isfinite(p.formation_energy))
    throw Error(ErrorKind::MalformedPhaseSet, "phase " + p.phase_id + " has non-finite energy");
  if (p.composition.empty())
    throw Error(ErrorKind::MalformedPhaseSet, "phase " + p.phase_id + " has empty composition");
}

HullResult finish(const PhaseEntry& x, const LpSetup& s, const LpSolution& sol) {
  if (sol.status == LpStatus::Infeasible)
    throw Error(ErrorKind::IncompleteChemicalSystem,
                "no mass-balanced mixture reaches " + x.composition.formula());
  if (sol.status == LpStatus::Unbounded)
    throw Error(ErrorKind::MalformedPhaseSet, "hull LP is unbounded");
  HullResult r;
  r.hull_energy = sol.objective;
  r.e_hull = x.formation_energy - sol.objective;
  for (Eigen::Index j = 0; j < sol.x.size(); ++j)
    if (sol.x[j] > 1e-14) {
      r.competing_phases.push_back(s.cols[static_cast<std::size_t>(j)]->phase_id);
      r.phase_fractions.push_back(sol.x[j]);
    }
  r.classification = classify_stability(r.e_hull);
  return r;
}

template <typename Range>
std::optional<double> hull_energy(const PhaseEntry& x, const Range& candidates) {
  const auto s = setup_lp(x, candidates);
  if (s.cols.empty()) return std::nullopt;
  const auto sol = solve_lp(s.a, s.b, s.c);
  if (sol.status != LpStatus::Optimal) return std::nullopt;
  return sol.objective;
}

}  // namespace

PhaseEntry make_phase(std::string id, const Composition& c, double formation_energy) {
  return {std::move(id), reduce_composition(Composition(
                             std::vector<CompositionEntry>(c.entries().begin(), c.entries().end()))),
          formation_energy};
}

std::string_view to_string(Stability s) noexcept {
  switch (s) {
    case Stability::Stable: return "Stable";
    case Stability::Metastable: return "Metastable";
    case Stability::MarginallyMetastable: return "MarginallyMetastable";
    case Stability::Unstable: return "Unstable";
  }
  return "?";
}

Stability classify_stability(double e) {
  if (!std::isfinite(e)) throw Error(ErrorKind::NonFiniteEnergy, "e_hull is not finite");
  if (e < 0.0) return Stability::Stable;
  if (e <= 0.050) return Stability::Metastable;
  if (e <= 0.100) return Stability::MarginallyMetastable;
  return Stability::Unstable;
}

Stability classify_stability_mev(double e) {
  if (!std::isfinite(e)) throw Error(ErrorKind::NonFiniteEnergy, "e_hull is not finite");
  if (e < 0.0) return Stability::Stable;
  if (e <= 50.0) return Stability::Metastable;
  if (e <= 100.0) return Stability::MarginallyMetastable;
  return Stability::Unstable;
}

// ------------------------------------------------------------------- LP

LpSolution solve_lp(const Eigen::MatrixXd& a_in, const Eigen::VectorXd& b_in,
                    const Eigen::VectorXd& c, double tol) {
  ScopedProbe probe(g_lp);
  const Eigen::Index m = a_in.rows(), n = a_in.cols();
  if (b_in.size() != m || c.size() != n)
    throw Error(ErrorKind::InvalidParameters, "LP dimension mismatch");
  // Tableau [A | I | b] with the objective row last.
  const Eigen::Index width = n + m + 1;
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m + 1, width);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double sign = b_in[i] < 0 ? -1.0 : 1.0;
    t.row(i).head(n) = sign * a_in.row(i);
    t(i, n + i) = 1.0;
    t(i, width - 1) = sign * b_in[i];
  }
  std::vector<Eigen::Index> basis(static_cast<std::size_t>(m));
  std::iota(basis.begin(), basis.end(), n);
  std::vector<bool> dead_row(static_cast<std::size_t>(m), false);

  LpSolution sol;
  const double rc_tol = 1e-12;
  const double piv_tol = 1e-11;
  const int max_pivots = static_cast<int>(50 * (m + n) + 100);

  auto pivot = [&](Eigen::Index r, Eigen::Index col) {
    t.row(r) /= t(r, col);
    for (Eigen::Index i = 0; i <= m; ++i)
      if (i != r && t(i, col) != 0.0) t.row(i) -= t(i, col) * t.row(r);
    basis[static_cast<std::size_t>(r)] = col;
    ++sol.pivots;
  };

  // Runs simplex iterations on the current objective row over columns [0, ncols).
  auto iterate = [&](Eigen::Index ncols) -> LpStatus {
    bool bland = false;
    while (true) {
      Eigen::Index enter = -1;
      double best = -rc_tol;
      for (Eigen::Index j = 0; j < ncols; ++j) {
        const double r = t(m, j);
        if (r < best) {
          enter = j;
          if (bland) break;
          best = r;
        }
      }
      if (enter < 0) return LpStatus::Optimal;
      Eigen::Index leave = -1;
      double ratio = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < m; ++i) {
        if (dead_row[static_cast<std::size_t>(i)] || t(i, enter) <= piv_tol) continue;
        const double q = t(i, width - 1) / t(i, enter);
        if (q < ratio - 1e-15 ||
            (std::abs(q - ratio) <= 1e-15 && leave >= 0 &&
             basis[static_cast<std::size_t>(i)] < basis[static_cast<std::size_t>(leave)])) {
          ratio = q;
          leave = i;
        }
      }
      if (leave < 0) return LpStatus::Unbounded;
      bland = ratio <= 1e-14;  // degenerate step: Bland's rule guarantees termination
      pivot(leave, enter);
      if (sol.pivots > max_pivots) throw Error(ErrorKind::MalformedPhaseSet, "simplex did not terminate");
    }
  };

  // Phase 1: minimise the sum of artificials.
  t.row(m).setZero();
  for (Eigen::Index i = 0; i < m; ++i) t.row(m) -= t.row(i);
  for (Eigen::Index i = 0; i < m; ++i) t(m, n + i) = 0.0;
  iterate(n);
  const double infeas = -t(m, width - 1);
  if (infeas > tol * std::max(1.0, b_in.cwiseAbs().sum())) {
    sol.status = LpStatus::Infeasible;
    return sol;
  }
  // Drive remaining artificials out of the basis, or retire redundant rows.
  for (Eigen::Index i = 0; i < m; ++i) {
    if (basis[static_cast<std::size_t>(i)] < n) continue;
    Eigen::Index col = -1;
    for (Eigen::Index j = 0; j < n; ++j)
      if (std::abs(t(i, j)) > 1e-9) {
        col = j;
        break;
      }
    if (col >= 0) pivot(i, col);
    else dead_row[static_cast<std::size_t>(i)] = true;
  }

  // Phase 2.
  t.row(m).setZero();
  t.row(m).head(n) = c.transpose();
  for (Eigen::Index i = 0; i < m; ++i) {
    if (dead_row[static_cast<std::size_t>(i)]) continue;
    const Eigen::Index bcol = basis[static_cast<std::size_t>(i)];
    if (bcol < n && c[bcol] != 0.0) t.row(m) -= c[bcol] * t.row(i);
  }
  const auto status = iterate(n);
  sol.status = status;
  if (status != LpStatus::Optimal) return sol;
  sol.x = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index bcol = basis[static_cast<std::size_t>(i)];
    if (!dead_row[static_cast<std::size_t>(i)] && bcol < n) sol.x[bcol] = std::max(0.0, t(i, width - 1));
  }
  sol.objective = c.dot(sol.x);
  return sol;
}

// ------------------------------------------------------------ hull API

HullResult energy_above_hull(const PhaseEntry& x, std::span<const PhaseEntry> phases) {
  ScopedProbe probe(g_query);
  check_finite(x);
  std::vector<const PhaseEntry*> ptrs;
  ptrs.reserve(phases.size());
  for (const auto& p : phases) {
    check_finite(p);
    ptrs.push_back(&p);
  }
  const auto s = setup_lp(x, ptrs);
  return finish(x, s, solve_lp(s.a, s.b, s.c));
}

void HullState::add_phase(Ptr p) {
  check_finite(*p);
  phases_.push_back(p);
  for (int z : p->composition.elements())
    if (!std::binary_search(elements_.begin(), elements_.end(), z))
      elements_.insert(std::upper_bound(elements_.begin(), elements_.end(), z), z);

  std::vector<const PhaseEntry*> verts;
  verts.reserve(vertices_.size());
  for (const auto& v : vertices_) verts.push_back(v.get());
  const auto h = hull_energy(*p, verts);
  if (h && p->formation_energy - *h >= -kHullTol) return;  // on or above the current hull

  vertices_.push_back(p);
  // Vertices that p can take part in decomposing may have dropped off the hull.
  const auto pel = p->composition.elements();
  for (std::size_t k = 0; k + 1 < vertices_.size();) {
    const auto& v = vertices_[k];
    const auto vel = v->composition.elements();
    if (!std::includes(vel.begin(), vel.end(), pel.begin(), pel.end())) {
      ++k;
      continue;
    }
    std::vector<const PhaseEntry*> others;
    for (std::size_t q = 0; q < vertices_.size(); ++q)
      if (q != k) others.push_back(vertices_[q].get());
    const auto hv = hull_energy(*v, others);
    if (hv && v->formation_energy - *hv >= -kHullTol) vertices_.erase(vertices_.begin() + static_cast<std::ptrdiff_t>(k));
    else ++k;
  }
}

HullState HullState::build(std::vector<PhaseEntry> phases, std::uint64_t seed) {
  ScopedProbe probe(g_build);
  std::vector<std::size_t> order(phases.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  HullState s;
  s.phases_.reserve(phases.size());
  for (std::size_t k : order) s.add_phase(std::make_shared<const PhaseEntry>(std::move(phases[k])));
  return s;
}

HullState HullState::insert(const PhaseEntry& p) const {
  ScopedProbe probe(g_insert);
  for (const auto& e : p.composition.entries())
    if (!std::binary_search(elements_.begin(), elements_.end(), e.z))
      throw Error(ErrorKind::IncompleteChemicalSystem,
                  "element Z=" + std::to_string(e.z) + " is outside the hull's system");
  HullState next = *this;
  next.add_phase(std::make_shared<const PhaseEntry>(p));
  return next;
}

HullState incremental_insert(const HullState& state, const PhaseEntry& p) { return state.insert(p); }

HullResult HullState::query(const PhaseEntry& x) const {
  ScopedProbe probe(g_query);
  check_finite(x);
  bool is_vertex = false;
  for (const auto& v : vertices_) is_vertex = is_vertex || v->phase_id == x.phase_id;
  std::vector<const PhaseEntry*> cands;
  // The candidate's own vertex shapes the hull; without it the hull must be
  // rebuilt from every remaining phase.
  if (is_vertex) {
    for (const auto& p : phases_) cands.push_back(p.get());
  } else {
    for (const auto& v : vertices_) cands.push_back(v.get());
  }
  const auto s = setup_lp(x, cands);
  return finish(x, s, solve_lp(s.a, s.b, s.c));
}

std::vector<std::string> HullState::vertex_ids() const {
  std::vector<std::string> out;
  for (const auto& v : vertices_) out.push_back(v->phase_id);
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<double> HullState::quick_ehull_lower_bound(const PhaseEntry& x) const {
  const auto xel = x.composition.elements();
  // cheapest pure-element reference for each element of x
  std::vector<double> elemental(xel.size(), std::numeric_limits<double>::infinity());
  for (const auto& v : vertices_)
    if (v->composition.entries().size() == 1)
      for (std::size_t r = 0; r < xel.size(); ++r)
        if (v->composition.entries()[0].z == xel[r]) elemental[r] = std::min(elemental[r], v->formation_energy);
  for (double e : elemental)
    if (!std::isfinite(e)) return std::nullopt;
  std::vector<double> fx(xel.size());
  for (std::size_t r = 0; r < xel.size(); ++r) fx[r] = x.composition.fraction(xel[r]);
  double best = 0.0;
  for (std::size_t r = 0; r < xel.size(); ++r) best += fx[r] * elemental[r];
  for (const auto& v : vertices_) {
    if (v->phase_id == x.phase_id || !subset_of(v->composition, xel)) continue;
    // largest share of v that keeps every remaining element fraction ≥ 0
    double share = 1.0;
    for (std::size_t r = 0; r < xel.size(); ++r) {
      const double fv = v->composition.fraction(xel[r]);
      if (fv > 0.0) share = std::min(share, fx[r] / fv);
    }
    double e = share * v->formation_energy;
    for (std::size_t r = 0; r < xel.size(); ++r)
      e += (fx[r] - share * v->composition.fraction(xel[r])) * elemental[r];
    best = std::min(best, e);
  }
  return x.formation_energy - best;
}

std::string phase_set_hash(std::span<const PhaseEntry> phases) {
  std::uint64_t h = fnv1a("phases");
  for (const auto& p : phases) {
    std::string rec = p.phase_id;
    rec += '|';
    for (const auto& e : p.composition.entries()) rec += std::to_string(e.z) + ":" + std::to_string(e.count) + ",";
    std::uint64_t bits;
    std::memcpy(&bits, &p.formation_energy, sizeof bits);
    rec += '|' + std::to_string(bits);
    h = fnv1a(rec, h);
  }
  return hex64(h);
}

SubsystemCache::StatePtr SubsystemCache::lookup(const std::vector<int>& elements,
                                                const std::string& phase_hash) {
  std::lock_guard lock(mu_);
  auto it = states_.find({elements, phase_hash});
  if (it == states_.end()) {
    ++misses_;
    return nullptr;
  }
  ++hits_;
  return it->second;
}

SubsystemCache::StatePtr SubsystemCache::get_or_build(std::span<const PhaseEntry> phases,
                                                      std::vector<int> elements) {
  std::sort(elements.begin(), elements.end());
  elements.erase(std::unique(elements.begin(), elements.end()), elements.end());
  std::vector<PhaseEntry> sub;
  for (const auto& p : phases)
    if (subset_of(p.composition, elements)) sub.push_back(p);
  const auto hash = phase_set_hash(sub);
  if (auto hit = lookup(elements, hash)) return hit;
  auto state = std::make_shared<const HullState>(HullState::build(std::move(sub)));
  std::lock_guard lock(mu_);
  states_[{elements, hash}] = state;
  return state;
}

std::size_t SubsystemCache::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t SubsystemCache::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

void SubsystemCache::clear() {
  std::lock_guard lock(mu_);
  states_.clear();
  hits_ = misses_ = 0;
}

HullProbes hull_timing_probes() {
  return {snapshot(g_build), snapshot(g_insert), snapshot(g_query), snapshot(g_lp)};
}

void reset_hull_timing_probes() {
  for (auto* c : {&g_build, &g_insert, &g_query, &g_lp}) {
    c->calls = 0;
    c->nanos = 0;
  }
}

std::vector<PhaseEntry> parse_phase_lines(std::string_view text, const ElementTable& table) {
  std::vector<PhaseEntry> out;
  for (auto line : detail::lines(text)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto f = detail::split(line, '\t');
    if (f.size() != 3) throw Error(ErrorKind::ParseError, "phase line needs 3 fields");
    const double e = detail::parse_double(f[2]);
    if (!std::isfinite(e)) throw Error(ErrorKind::MalformedPhaseSet, "non-finite phase energy");
    out.push_back(make_phase(std::string(detail::trim(f[0])),
                             Composition::parse_formula(detail::trim(f[1]), table), e));
  }
  return out;
}

std::string phase_to_line(const PhaseEntry& p, const ElementTable& table) {
  return p.phase_id + "\t" + p.composition.formula(table) + "\t" + detail::format_double(p.formation_energy);
}

}  // namespace divergent
