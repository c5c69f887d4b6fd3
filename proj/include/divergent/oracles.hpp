#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "divergent/chem_core.hpp"

namespace divergent {

struct PairParameters {
  double well_depth = 0.0;  // eV
  double r0 = 0.0;          // Å, position of the minimum
};

struct LandscapeConfig {
  std::uint64_t seed = 2024;
  /// Multiplicative well-depth error per fidelity for pairs that involve a
  /// d/f-block species, before the per-element sign and strength.
  std::array<double, kFidelityCount> bias = {0.04, 0.025, 0.012, 0.0};
  std::array<double, kFidelityCount> noise_sigma = {0.005, 0.003, 0.002, 0.001};  // eV/atom
  double unlike_depth = 0.3;   // eV, scaled by (1 + |Δχ|)
  double like_depth = 0.12;    // eV
  double like_r0_factor = 1.0; // r0 = factor * 2 r_i
  double cutoff_factor = 2.0;  // cutoff = factor * r0
  double jitter = 0.15;        // seeded relative spread of well depths
};

/// Ground truth: shifted-force Lennard-Jones pair sum,
/// phi(r) = eps [(r0/r)^12 - 2 (r0/r)^6], cut and shifted so that phi and
/// phi' vanish at the cutoff. Fidelity f rescales the well depth of every
/// unlike pair with a d/f-block member by (1 - bias_f * sign_e * strength_e);
/// a positive sign means the cheaper levels underbind. Like pairs are exact
/// at every level, so elemental references do not depend on fidelity.
class SyntheticLandscape {
 public:
  explicit SyntheticLandscape(LandscapeConfig config = {},
                              const ElementTable& table = ElementTable::builtin());

  const LandscapeConfig& config() const noexcept { return config_; }
  const ElementTable& table() const noexcept { return table_; }

  PairParameters pair(int zi, int zj) const;
  /// Signed strength of the correlation error for a species (0 outside d/f).
  double correlation_strength(int z) const;
  /// Factor applied to the well depth of (zi, zj) at fidelity f.
  double well_depth_factor(Fidelity f, int zi, int zj) const;
  double noise_sigma(Fidelity f) const { return config_.noise_sigma[static_cast<int>(f)]; }
  bool correlation_flagged(const Composition& c) const;

  struct Evaluation {
    double energy_per_atom = 0.0;
    std::vector<Vec3> forces;  // -dE_total/dr, eV/Å
  };
  Evaluation evaluate_noise_free(const CrystalStructure& s, Fidelity f) const;
  /// Deterministic noise draw for (seed, structure content, fidelity).
  double noise(const CrystalStructure& s, Fidelity f) const;

 private:
  LandscapeConfig config_;
  ElementTable table_;
};

/// Abstract CPU-hour ledger. Debits are serialized; spent never exceeds total.
class OracleBudget {
 public:
  explicit OracleBudget(double total, std::array<double, kFidelityCount> costs = default_costs());
  OracleBudget(const OracleBudget& other);
  OracleBudget& operator=(const OracleBudget& other);

  static std::array<double, kFidelityCount> default_costs();
  /// Ledger rebuilt from a checkpoint. Throws InvariantViolation when the
  /// figures do not audit.
  static OracleBudget restore(double total, std::array<double, kFidelityCount> costs,
                              std::array<std::size_t, kFidelityCount> calls, double spent);
  std::array<double, kFidelityCount> costs() const { return costs_; }

  double total() const;
  double spent() const;
  double remaining() const;
  double cost(Fidelity f) const { return costs_[static_cast<int>(f)]; }
  bool can_afford(Fidelity f) const;
  std::size_t calls(Fidelity f) const;
  /// Throws BudgetExhausted when the call does not fit.
  void debit(Fidelity f);
  void refund(Fidelity f);
  /// spent equals the sum of per-call costs and stays within total.
  bool audit() const;

 private:
  mutable std::mutex mu_;
  double total_;
  double spent_ = 0.0;
  std::array<double, kFidelityCount> costs_;
  std::array<std::size_t, kFidelityCount> calls_{};
};

/// Debit, evaluate, add noise; refunds the debit if evaluation throws.
EnergyRecord evaluate(const CrystalStructure& s, Fidelity fidelity,
                      const SyntheticLandscape& landscape, OracleBudget& budget);

/// E_X + (E_X - E_{X-1}) / ((X / (X-1))^-3 - 1), x >= 3.
double cbs_extrapolate(double e_x, double e_xm1, int x);

/// Energies of the elemental phases (one-atom fcc cell at the optimal
/// lattice constant), evaluated once at CCSDT and cached.
class ElementalReferences {
 public:
  ElementalReferences() = default;
  static ElementalReferences evaluate(const std::vector<int>& elements,
                                      const SyntheticLandscape& landscape, OracleBudget& budget);

  double mu(int z) const;
  const std::map<int, double>& energies() const noexcept { return mu_; }
  const std::map<int, CrystalStructure>& structures() const noexcept { return structures_; }
  /// energy_per_atom minus the composition-weighted elemental energies.
  double formation_energy(const Composition& c, double energy_per_atom) const;

 private:
  std::map<int, double> mu_;
  std::map<int, CrystalStructure> structures_;
};

/// One-atom fcc cell of element z with the lattice constant minimising the
/// noise-free energy at fidelity f.
CrystalStructure elemental_ground_state(int z, const SyntheticLandscape& landscape,
                                        Fidelity f = Fidelity::CCSDT);

/// Uniform rescaling of the cell that minimises the noise-free energy
/// (golden section on the scale factor).
CrystalStructure relax_volume(const CrystalStructure& s, const SyntheticLandscape& landscape,
                              Fidelity f, double lo = 0.8, double hi = 1.3);

// ------------------------------------------------------------ ingestion

struct MaterialRecord {
  std::string id;  // empty before curation
  std::string source;
  std::string formula;
  double a = 0.0, b = 0.0, c = 0.0;  // Å
  double energy = 0.0;               // eV/atom
  bool experimental = false;
  std::vector<std::string> provenance;
};

/// Raw: source, formula, a, b, c, energy, experimental (tab separated).
/// Curated lines add the id in front and the provenance list (';' joined) at the end.
MaterialRecord parse_material_record(std::string_view line);
std::string material_record_to_line(const MaterialRecord& r);

struct IngestResult {
  std::vector<MaterialRecord> entries;
  std::vector<MaterialRecord> discarded;  // lattice mismatch within a cluster
  std::vector<std::string> rejected;      // unparseable lines with reasons
};

/// Reduces formulas and clusters each composition by lattice parameters:
/// an entry joins the nearest representative within cluster_tol (largest
/// relative deviation of a, b, c). Representatives are picked by priority
/// (experimental, then lowest energy); members deviating by more than
/// lattice_tol are discarded, the rest merge into the provenance list.
/// Ids follow MP-OQMD-0001; existing ids are kept.
IngestResult ingest_and_deduplicate(const std::vector<MaterialRecord>& records,
                                    double lattice_tol = 0.05, double cluster_tol = 0.15);
IngestResult ingest_lines(std::string_view text, double lattice_tol = 0.05,
                          double cluster_tol = 0.15);

}  // namespace divergent
