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

#include "divergent/chem_core.hpp"
#include "divergent/generator.hpp"
#include "divergent/hull.hpp"
#include "divergent/oracles.hpp"
#include "divergent/surrogate.hpp"

namespace divergent {

enum class StoppingKind { FixedBudget, DiminishingReturns, NoStablePatience, Confidence };
std::string_view to_string(StoppingKind k) noexcept;
StoppingKind stopping_kind_from_string(std::string_view name);

enum class StopReason { None, BudgetExhausted, MaxCycles, DiminishingReturns, NoStablePatience, Confidence };
std::string_view to_string(StopReason r) noexcept;
StopReason stop_reason_from_string(std::string_view name);

enum class SelectionStrategy { Divergence, Random };

/// Which fidelities the surrogate sees. PbeOnly trains a single-fidelity
/// model: the filter then uses the PBE head and the divergence term is zero.
enum class ValidatorLadder { Full, PbeOnly, DirectPbeCcsdt };

/// Campaign variants used for ablations.
enum class Variant { Full, RandomSelection, NoConditioning, PbeOnlyValidator, NoQcNoMf, DirectPbeCcsdt };
std::string_view to_string(Variant v) noexcept;
Variant variant_from_string(std::string_view name);

struct CampaignConfig {
  int n_cycles_max = 10;
  int samples_per_cycle = 1000;
  double e_threshold = 0.1;  // eV/atom above the current hull
  int k_means_k = 50;
  double weight_divergence = 0.7;
  double weight_diversity = 0.3;
  int top_k_cap = 20;
  double top_k_fraction = 0.1;
  StoppingKind stopping = StoppingKind::NoStablePatience;
  int patience = 3;
  double min_hit_rate_gain = 1.0;  // percentage points per cycle
  int diminishing_cycles = 2;
  double confidence_sigma = 0.01;  // eV/atom
  double budget = 50000.0;         // CPU-hours
  std::uint64_t seed = 1;

  SelectionStrategy selection = SelectionStrategy::Divergence;
  /// Random selection draws from every constraint-valid candidate unless
  /// this is set, in which case it draws from the stability-filtered pool.
  bool random_uses_filter = false;
  bool conditioning = true;
  double lambda = 0.3;
  ValidatorLadder ladder = ValidatorLadder::Full;
  DivergenceKind divergence = DivergenceKind::Abs;

  int fine_tune_epochs = 60;
  double fine_tune_lr_scale = 0.1;
  int retrain_every = 5;
  bool refit_generator = true;
  int workers = 1;

  /// Throws InvalidConfig naming the offending field.
  void validate() const;
};

CampaignConfig apply_variant(CampaignConfig config, Variant v);

// ------------------------------------------------------------ world

enum class BinaryPrototype { Rocksalt, CsCl, Zincblende };

/// Two-atom primitive cell of an AB binary with nearest-neighbour distance d.
CrystalStructure binary_cell(std::string id, int cation_z, int anion_z, BinaryPrototype p, double d);

struct WorldConfig {
  LandscapeConfig landscape;
  /// Cation/anion symbol pairs; each pair is one chemical system.
  std::vector<std::pair<std::string, std::string>> systems = {
      {"Li", "Cl"}, {"Na", "Cl"}, {"K", "Br"},  {"Rb", "Cl"}, {"Na", "F"},  {"K", "F"},
      {"Mg", "O"},  {"Ca", "O"},  {"Sr", "S"},  {"Ba", "O"},  {"Ca", "Se"}, {"Mg", "S"},
      {"Fe", "O"},  {"Co", "O"},  {"Ni", "O"},  {"Mn", "S"},  {"Cu", "Cl"}, {"Zn", "Se"}};
  int structures_per_system = 18;  // rattled known phases in the initial surrogate data
  int generated_per_system = 12;   // unconditioned generator samples added to it
  double scan_fraction = 0.5;
  double hse_fraction = 0.34;
  double ccsdt_fraction = 0.25;
  double rattle = 0.06;   // Å, initial-data displacement spread
  double strain = 0.06;   // initial-data lattice strain spread
  int diffusion_steps = 50;
  DenoiserTrainingConfig denoiser{300, 25, 16, 3e-3, 0.2, 64, 7};
  int denoiser_copies = 8;  // rattled copies per known phase in the denoiser set
  int refit_epochs = 60;    // warm-started generator refit every retrain_every cycles
  SurrogateConfig surrogate;
  std::uint64_t seed = 2024;
};

struct ChemicalSystem {
  int cation_z = 0;
  int anion_z = 0;
  Composition composition;
  std::string formula;
  DescriptorVector target{};  // conditioning: descriptors of the known ground state
};

/// Fixed part of a campaign: landscape, elemental references, the known
/// PBE phase database, the initial surrogate data and the trained generator.
struct CampaignWorld {
  WorldConfig config;
  SyntheticLandscape landscape;
  ElementalReferences references;
  std::vector<ChemicalSystem> systems;
  std::vector<PhaseEntry> known_phases;  // PBE formation energies
  std::vector<CrystalStructure> known_structures;
  std::vector<SurrogateExample> initial_data;  // formation energies
  FeatureMap features;
  NoiseSchedule schedule;
  ReferenceDenoiser denoiser;
  /// CPU-hours spent building the world; kept off the campaign ledger.
  double setup_cost = 0.0;

  const ChemicalSystem& system_of(const Composition& c) const;
  /// Elemental references plus known phases plus `extra` restricted to the system.
  HullState hull_for(const ChemicalSystem& sys, std::span<const PhaseEntry> extra) const;
};

CampaignWorld build_reference_world(const WorldConfig& config = {});

// ------------------------------------------------------------ state

struct CycleRecord {
  int cycle = 0;
  std::size_t generated = 0;
  std::size_t passed_constraints = 0;
  std::size_t passed_filter = 0;
  std::size_t selected = 0;
  std::size_t validated = 0;
  std::size_t stable = 0;
  double hit_rate = 0.0;  // percent
  double mean_sigma = 0.0;  // sigma_MF over the selected batch
  double budget_spent = 0.0;
};

struct ValidatedCandidate {
  int cycle = 0;
  CrystalStructure structure;
  double formation_energy = 0.0;  // CCSDT, eV/atom
  double predicted = 0.0;         // E_MF at selection time
  double divergence = 0.0;
  double e_hull = 0.0;            // post-validation hull
  Stability classification = Stability::Unstable;
  bool stable = false;
};

struct PhaseSeconds {
  double generation = 0.0, prediction = 0.0, selection = 0.0, validation = 0.0, retraining = 0.0;
};

struct CampaignState {
  int cycle = 0;
  OracleBudget budget{0.0};
  MultiFidelityModel model;
  /// Labels added by the campaign (CCSDT validations).
  std::vector<SurrogateExample> d_hf;
  std::vector<CycleRecord> history;
  std::vector<ValidatedCandidate> validated;
  int consecutive_no_stable = 0;
  bool generator_retrain_flag = false;
  std::optional<ReferenceDenoiser> generator;  // refit denoiser, when any
  StopReason stop = StopReason::None;
  /// Wall time per phase; not part of the checkpoint or the hash.
  std::vector<PhaseSeconds> timings;

  std::size_t discoveries() const;
  std::vector<std::uint8_t> to_bytes() const;
  static CampaignState from_bytes(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static CampaignState load(const std::filesystem::path& path);
  std::uint64_t state_hash() const;
};

/// Training data seen by the surrogate for a ladder choice.
std::vector<SurrogateExample> ladder_data(std::span<const SurrogateExample> data, ValidatorLadder ladder);

/// Fresh state: budget ledger and a surrogate trained on the world's data.
CampaignState start_campaign(const CampaignConfig& config, const CampaignWorld& world);

/// k = min(cap, floor(fraction * remaining / CCSDT cost)).
int selection_size(const CampaignConfig& config, const OracleBudget& budget);

struct KMeansResult {
  std::vector<Eigen::VectorXd> centroids;
  std::vector<int> assignment;
};

/// Lloyd iterations from a k-means++ start; k is clamped to the point count.
KMeansResult kmeans(std::span<const Eigen::VectorXd> points, int k, std::uint64_t seed, int max_iter = 50);

/// U(x): distance from each candidate to the nearest centroid of a cluster
/// holding an already-selected point (every centroid when none is given),
/// min-max scaled to [0, 1]. Columns are standardised over candidates and
/// selected points together. All-equal distances give U = 0.
std::vector<double> diversity_scores(std::span<const Eigen::VectorXd> candidates, int k,
                                     std::span<const Eigen::VectorXd> selected = {},
                                     std::uint64_t seed = 0);

/// Min-max scaling to [0, 1]; zero spread maps to 0.
std::vector<double> min_max(std::span<const double> v);

/// Indices of the top k by score, ties by id ascending.
std::vector<std::size_t> rank_top_k(std::span<const double> scores, std::span<const std::string> ids,
                                    std::size_t k);

/// One Generate/Predict/Filter/Select/Validate/Augment/Retrain pass.
void run_cycle(CampaignState& state, const CampaignConfig& config, const CampaignWorld& world);

struct StopDecision {
  bool stop = false;
  StopReason reason = StopReason::None;
};

StopDecision check_stopping(const CampaignState& state, const CampaignConfig& config);

/// Discoveries per CCSDT call; throws Undefined before the first call.
double efficiency_score(const CampaignState& state);
double efficiency_score(std::size_t discoveries, std::size_t ccsdt_calls);

/// Runs cycles until check_stopping says stop; `on_cycle` runs after each.
template <class OnCycle>
void run_campaign(CampaignState& state, const CampaignConfig& config, const CampaignWorld& world,
                  OnCycle&& on_cycle) {
  while (state.stop == StopReason::None) {
    const auto d = check_stopping(state, config);
    if (d.stop) {
      state.stop = d.reason;
      break;
    }
    run_cycle(state, config, world);
    on_cycle(state);
  }
}

inline void run_campaign(CampaignState& state, const CampaignConfig& config, const CampaignWorld& world) {
  run_campaign(state, config, world, [](const CampaignState&) {});
}

/// Tab-separated per-cycle history with a header line.
std::string history_table(const CampaignState& state);

}  // namespace divergent
