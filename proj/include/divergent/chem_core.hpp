#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "divergent/errors.hpp"

namespace divergent {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unique components of the lattice Gram matrix, in the order
/// G11, G22, G33, G12, G13, G23 (units of Å²).
using Metric6 = std::array<double, 6>;

inline constexpr int kMaxAtomsPerCell = 20;

// Net charge tolerances per formula unit, |e|. Sampling is lenient,
// final validation is strict.
inline constexpr double kChargeToleranceGeneration = 0.1;
inline constexpr double kChargeToleranceValidation = 0.01;

enum class Block { s, p, d, f };

struct Element {
  std::string symbol;
  int atomic_number = 0;
  double covalent_radius = 0.0;    // Å
  double electronegativity = 0.0;  // Pauling scale, 0 when undefined
  std::vector<int> oxidation_states;  // most common first
  Block block = Block::s;
  bool allowed = false;

  bool correlation_prone() const noexcept {
    return block == Block::d || block == Block::f;
  }
};

/// Lookup table of element properties. The shipped table is compiled in from
/// data/elements.tsv; custom tables (e.g. with synthetic radii) can be built
/// directly or parsed from text in the same format.
class ElementTable {
 public:
  explicit ElementTable(std::vector<Element> elements);

  static const ElementTable& builtin();
  static ElementTable parse(std::string_view text);
  static ElementTable from_file(const std::filesystem::path& path);

  const Element& by_z(int z) const;
  const Element& by_symbol(std::string_view symbol) const;
  const Element* find_symbol(std::string_view symbol) const noexcept;
  bool contains(int z) const noexcept;

  std::span<const Element> elements() const noexcept { return elements_; }
  std::size_t allowed_count() const noexcept;
  /// FNV-1a hash of the canonical table contents, hex encoded.
  std::string content_hash() const;

 private:
  std::vector<Element> elements_;
  std::vector<int> index_by_z_;
};

struct CompositionEntry {
  int z = 0;
  int count = 0;

  friend bool operator==(const CompositionEntry&, const CompositionEntry&) = default;
};

/// Multiset of elements. Entries are kept sorted by atomic number with
/// duplicates merged; the total atom count never exceeds kMaxAtomsPerCell.
class Composition {
 public:
  Composition() = default;
  explicit Composition(std::vector<CompositionEntry> entries,
                       std::optional<std::vector<int>> oxidation_states = {});

  /// Parses formulas like "Fe2O3" or "LiFePO4". Formulas whose total count
  /// exceeds the per-cell maximum are reduced before construction.
  static Composition parse_formula(std::string_view formula,
                                   const ElementTable& table = ElementTable::builtin());

  std::span<const CompositionEntry> entries() const noexcept { return entries_; }
  const std::optional<std::vector<int>>& oxidation_states() const noexcept {
    return oxidation_;
  }
  bool empty() const noexcept { return entries_.empty(); }
  int total_atoms() const noexcept;
  std::vector<int> elements() const;
  int count_of(int z) const noexcept;
  double fraction(int z) const noexcept;
  std::string formula(const ElementTable& table = ElementTable::builtin()) const;

  Composition with_oxidation_states(std::vector<int> states) const;

  friend bool operator==(const Composition& a, const Composition& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<CompositionEntry> entries_;
  std::optional<std::vector<int>> oxidation_;
};

/// Divides all counts by their GCD. Idempotent; keeps any oxidation assignment.
Composition reduce_composition(const Composition& c);

/// Net charge per formula unit, sum of n_i q_i.
double charge_balance(const Composition& c);

/// Assigns one oxidation state per element, minimising |net charge| by
/// exhaustive search. Ties go to the assignment that is lexicographically
/// first in each element's listed state order.
Composition assign_oxidation_states(const Composition& c,
                                    const ElementTable& table = ElementTable::builtin());

/// Componentwise x - floor(x), always in [0,1).
Vec3 wrap_fractional(const Vec3& x);

/// Wraps each component of a fractional difference into [-0.5, 0.5).
Vec3 wrap_difference(const Vec3& d);

Mat3 metric_matrix(const Metric6& g);
Metric6 metric_from_matrix(const Mat3& g);
bool metric_is_positive_definite(const Metric6& g);
double metric_condition_number(const Metric6& g);
/// Metric of a cell with the given lattice parameters (lengths in Å, angles in degrees).
Metric6 metric_from_parameters(double a, double b, double c, double alpha = 90.0,
                               double beta = 90.0, double gamma = 90.0);

struct LatticeParameters {
  double a, b, c;              // Å
  double alpha, beta, gamma;   // degrees
};
LatticeParameters lattice_parameters(const Metric6& g);

/// Periodic cell: metric tensor, wrapped fractional coordinates and species
/// (atomic numbers). Construction validates every invariant; fractional
/// coordinates are wrapped into [0,1).
class CrystalStructure {
 public:
  CrystalStructure(std::string id, Metric6 metric, std::vector<int> species,
                   std::vector<Vec3> frac_coords);

  const std::string& id() const noexcept { return id_; }
  const Metric6& metric() const noexcept { return metric_; }
  Mat3 metric_matrix() const { return divergent::metric_matrix(metric_); }
  std::span<const int> species() const noexcept { return species_; }
  std::span<const Vec3> frac_coords() const noexcept { return coords_; }
  std::size_t size() const noexcept { return species_.size(); }
  bool empty() const noexcept { return species_.empty(); }

  double volume() const;
  /// Upper-triangular lattice matrix R with G = RᵀR; Cartesian r = R x.
  Mat3 lattice() const;
  Composition composition() const;

  CrystalStructure with_id(std::string id) const;
  CrystalStructure with_coords(std::vector<Vec3> coords) const;
  CrystalStructure with_metric(const Metric6& metric) const;

 private:
  std::string id_;
  Metric6 metric_;
  std::vector<int> species_;
  std::vector<Vec3> coords_;
};

/// One entry per unordered pair (i < j) plus one self-image entry (i == i)
/// per atom: the distance to the nearest periodic copy of itself.
struct PairDistance {
  std::size_t i, j;
  double distance;
};

/// Minimum-image distances over 27 periodic images (125 when the metric's
/// condition number exceeds 10).
std::vector<PairDistance> pairwise_min_image_distances(const CrystalStructure& s);

struct Neighbor {
  std::size_t i, j;
  Eigen::Vector3i image;
  Vec3 delta;  // Cartesian r_j + R n - r_i
  double distance;
};

/// Every (i, j, image) with 0 < distance <= cutoff, both directions listed.
std::vector<Neighbor> neighbor_list(const CrystalStructure& s, double cutoff);

enum class Fidelity : int { PBE = 0, SCAN = 1, HSE06 = 2, CCSDT = 3 };
inline constexpr int kFidelityCount = 4;
inline constexpr std::array<Fidelity, kFidelityCount> kAllFidelities = {
    Fidelity::PBE, Fidelity::SCAN, Fidelity::HSE06, Fidelity::CCSDT};

std::string_view to_string(Fidelity f) noexcept;
Fidelity fidelity_from_string(std::string_view name);

struct FidelityLevel {
  Fidelity level;
  double loss_weight;
  double oracle_cost;  // abstract CPU-hours
};

using FidelityLadder = std::array<FidelityLevel, kFidelityCount>;

/// w = 0.1, 0.25, 0.5, 1.0 and costs 1, 2, 5, 100 for PBE..CCSDT.
FidelityLadder default_fidelity_ladder();
void validate_ladder(const FidelityLadder& ladder);

struct EnergyRecord {
  std::string structure_id;
  Fidelity fidelity = Fidelity::PBE;
  double energy_per_atom = 0.0;  // eV/atom
  std::optional<std::vector<Vec3>> forces;  // eV/Å
  std::string provenance;
};

void validate_record(const EnergyRecord& r, std::size_t atom_count);

/// Line-delimited structure record: id, six metric components, species list,
/// flattened fractional coordinates (tab separated fields).
std::string structure_to_line(const CrystalStructure& s,
                              const ElementTable& table = ElementTable::builtin());
CrystalStructure structure_from_line(std::string_view line,
                                     const ElementTable& table = ElementTable::builtin());

/// 64-bit FNV-1a, the hash used for schema and content fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace divergent
