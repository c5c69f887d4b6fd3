#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "divergent/chem_core.hpp"

namespace divergent {

enum class Stage { Generation, Validation };

/// R0 values keyed by (cation, anion) atomic numbers.
class BvsTable {
 public:
  struct Entry {
    int cation_z;
    int anion_z;
    double r0;
  };

  BvsTable() = default;
  explicit BvsTable(std::vector<Entry> entries);

  static const BvsTable& builtin();
  static BvsTable parse(std::string_view text, const ElementTable& table = ElementTable::builtin());

  std::optional<double> r0(int cation_z, int anion_z) const noexcept;
  std::span<const Entry> entries() const noexcept { return entries_; }

 private:
  std::vector<Entry> entries_;
};

struct ConstraintParams {
  double alpha_generation = 0.7;
  double alpha_validation = 0.8;
  double charge_tol_generation = kChargeToleranceGeneration;
  double charge_tol_validation = kChargeToleranceValidation;
  double neighbor_scale = 1.2;  // neighbours: d < scale * (r_i + r_j)
  double bvs_b = 0.37;          // Å
  double bvs_tolerance = 0.3;
  double pauling_tolerance = 0.2;
  double rule3_weight = 0.0;    // shared edges/faces between cation polyhedra
};

/// Element data, bond-valence table and thresholds used by every check.
struct ConstraintContext {
  ElementTable elements = ElementTable::builtin();
  BvsTable bvs = BvsTable::builtin();
  ConstraintParams params;

  static const ConstraintContext& builtin();
};

struct ConstraintCheck {
  std::string name;
  bool hard = false;
  bool applicable = true;
  bool passed = true;
  double magnitude = 0.0;  // check-specific violation measure
};

struct ConstraintReport {
  std::string structure_id;
  std::vector<ConstraintCheck> checks;
  bool overall_pass = true;
  double soft_penalty = 0.0;

  const ConstraintCheck* find(std::string_view name) const noexcept;
};

struct CoordinationEnvironment {
  std::size_t center = 0;
  std::vector<std::size_t> neighbors;  // one entry per periodic image
  std::vector<double> distances;
  int coordination_number = 0;
  std::vector<double> bond_valences;   // Pauling bond strengths Z_i / CN_i
};

struct DistanceCheck {
  bool pass = true;
  double worst_ratio = 0.0;  // min d_ij / (r_i + r_j), self images included
};

DistanceCheck check_min_distances(const CrystalStructure& s, double alpha,
                                  const ElementTable& table = ElementTable::builtin());

/// One oxidation state per atom, from the charge-minimising assignment of
/// the structure's composition.
std::vector<int> atom_oxidation_states(const CrystalStructure& s,
                                       const ElementTable& table = ElementTable::builtin());

/// Net charge per reduced formula unit under the assigned states.
double structure_net_charge(const CrystalStructure& s,
                            const ElementTable& table = ElementTable::builtin());

/// Environments of every cation, counting oppositely charged neighbours only.
std::vector<CoordinationEnvironment> coordination_environments(
    const CrystalStructure& s, const std::vector<int>& oxidation,
    const ConstraintContext& ctx = ConstraintContext::builtin());

struct PaulingResult {
  ConstraintCheck check;
  std::vector<double> deviations;  // per cation, in the order of coordination_environments
};

/// Electrostatic valence check, per cation polyhedron: the anion bond
/// strengths |Z_j| / CN_j received from the cation's neighbours must sum to
/// Z_i within the tolerance. Not applicable when the structure lacks either
/// cations or anions.
PaulingResult pauling_valence_check(const CrystalStructure& s,
                                    const ConstraintContext& ctx = ConstraintContext::builtin());
PaulingResult pauling_valence_check(const CrystalStructure& s, const std::vector<int>& oxidation,
                                    const ConstraintContext& ctx = ConstraintContext::builtin());

/// Σ exp((R0 - d)/b) over oppositely charged neighbours within the cutoff.
/// Throws MissingBVSParameter when a bonded pair has no R0.
double bond_valence_sum(const CrystalStructure& s, std::size_t atom,
                        const ConstraintContext& ctx = ConstraintContext::builtin());
double bond_valence_sum(const CrystalStructure& s, std::size_t atom,
                        const std::vector<int>& oxidation,
                        const ConstraintContext& ctx = ConstraintContext::builtin());

ConstraintReport validate(const CrystalStructure& s, Stage stage,
                          const ConstraintContext& ctx = ConstraintContext::builtin());

/// Sum of squared hinges max(0, alpha (r_i + r_j) - d)^2 over all pairs and
/// self images, and its gradient with respect to fractional coordinates.
double distance_penalty(const CrystalStructure& s, double alpha,
                        const ElementTable& table = ElementTable::builtin(),
                        std::vector<Vec3>* grad_frac = nullptr);

/// Moves atoms down the distance-penalty gradient (metric-preconditioned)
/// until the alpha rule holds or max_iters steps were taken. Returns the
/// projected structure when it succeeded.
std::optional<CrystalStructure> project_min_distance(const CrystalStructure& s, double alpha,
                                                     int max_iters = 50, double step = 0.25,
                                                     const ElementTable& table = ElementTable::builtin());

}  // namespace divergent
