#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divergent/chem_core.hpp"

namespace divergent {

struct PhaseEntry {
  std::string phase_id;
  Composition composition;  // reduced
  double formation_energy = 0.0;  // eV/atom
};

/// Builds an entry, reducing the composition.
PhaseEntry make_phase(std::string id, const Composition& c, double formation_energy);

enum class Stability { Stable, Metastable, MarginallyMetastable, Unstable };
std::string_view to_string(Stability s) noexcept;

/// < 0 Stable, [0, 0.05] Metastable, (0.05, 0.1] MarginallyMetastable,
/// > 0.1 Unstable (eV/atom).
Stability classify_stability(double e_hull);
/// Same table in integer-friendly meV/atom units.
Stability classify_stability_mev(double e_hull_mev);

struct HullResult {
  double e_hull = 0.0;  // eV/atom, raw LP difference (may be negative)
  std::vector<std::string> competing_phases;
  std::vector<double> phase_fractions;  // atom fractions, parallel to competing_phases
  Stability classification = Stability::Unstable;
  double hull_energy = 0.0;  // optimum of the LP
};

// ------------------------------------------------------------------ LP

enum class LpStatus { Optimal, Infeasible, Unbounded };

struct LpSolution {
  LpStatus status = LpStatus::Infeasible;
  Eigen::VectorXd x;
  double objective = 0.0;
  int pivots = 0;
};

/// min cᵀx subject to A x = b, x ≥ 0, by a dense two-phase simplex.
/// Dantzig pricing, switching to Bland's rule after degenerate pivots.
LpSolution solve_lp(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                    double tol = 1e-10);

// ---------------------------------------------------------------- hulls

/// Energy above the lower hull of `phases`, excluding any phase with the
/// candidate's id. Only phases whose elements are a subset of the
/// candidate's take part.
HullResult energy_above_hull(const PhaseEntry& x, std::span<const PhaseEntry> phases);

/// Immutable hull snapshot: every phase plus the lower-hull vertex set.
/// Construction is randomized incremental, one LP against the current
/// vertices per inserted phase.
class HullState {
 public:
  HullState() = default;
  static HullState build(std::vector<PhaseEntry> phases, std::uint64_t seed = 0x5eed);

  /// New snapshot with p included. Throws IncompleteChemicalSystem when p
  /// brings an element outside this hull's system.
  HullState insert(const PhaseEntry& p) const;

  HullResult query(const PhaseEntry& x) const;

  std::size_t size() const noexcept { return phases_.size(); }
  const PhaseEntry& phase(std::size_t k) const { return *phases_[k]; }
  std::vector<std::string> vertex_ids() const;
  std::size_t vertex_count() const noexcept { return vertices_.size(); }
  const std::vector<int>& elements() const noexcept { return elements_; }

  /// Upper bound on the hull energy at x's composition from cheap mixtures
  /// (pure elements, and each vertex topped up with elements); turns into a
  /// lower bound on e_hull. nullopt when no cheap mixture is feasible.
  std::optional<double> quick_ehull_lower_bound(const PhaseEntry& x) const;

 private:
  using Ptr = std::shared_ptr<const PhaseEntry>;
  void add_phase(Ptr p);  // core of build/insert

  std::vector<Ptr> phases_;
  std::vector<Ptr> vertices_;
  std::vector<int> elements_;
};

HullState incremental_insert(const HullState& state, const PhaseEntry& p);

/// Content hash over (id, reduced formula, energy bits) of a phase set.
std::string phase_set_hash(std::span<const PhaseEntry> phases);

/// Hull snapshots keyed on sorted element set + phase-set content hash.
class SubsystemCache {
 public:
  using StatePtr = std::shared_ptr<const HullState>;

  /// Cached state for exactly this subsystem and phase set, or nullptr.
  StatePtr lookup(const std::vector<int>& elements, const std::string& phase_hash);
  /// Filters `phases` to the subsystem, then returns a cached or fresh state.
  StatePtr get_or_build(std::span<const PhaseEntry> phases, std::vector<int> elements);

  std::size_t hits() const;
  std::size_t misses() const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::vector<int>, std::string>, StatePtr> states_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Cumulative wall time and call counts per hull operation.
struct HullProbe {
  std::uint64_t calls = 0;
  double seconds = 0.0;
};
struct HullProbes {
  HullProbe build, insert, query, lp;
};
HullProbes hull_timing_probes();
void reset_hull_timing_probes();

/// Phase database lines: phase_id, reduced formula, formation energy (tab separated).
std::vector<PhaseEntry> parse_phase_lines(std::string_view text,
                                          const ElementTable& table = ElementTable::builtin());
std::string phase_to_line(const PhaseEntry& p, const ElementTable& table = ElementTable::builtin());

}  // namespace divergent
