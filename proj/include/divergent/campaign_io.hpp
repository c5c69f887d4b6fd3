#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "divergent/active_learning.hpp"

namespace divergent {

/// Everything a run needs: campaign and world settings, seeds, variants.
struct RunConfig {
  CampaignConfig campaign;
  WorldConfig world;
  std::vector<std::uint64_t> seeds = {1};
  std::vector<Variant> variants = {Variant::Full};
};

/// INI text with sections [campaign], [world], [landscape], [surrogate],
/// [denoiser] and [run]. `campaign.budget` is required; other keys default.
/// Unknown sections or keys and bad values throw InvalidConfig naming
/// "section.key".
RunConfig parse_run_config(std::string_view ini_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical INI listing every key; parse_run_config round-trips it.
std::string format_run_config(const RunConfig& config);

/// Content hash of this build's sources, fixed at configure time.
std::string code_version_hash();
/// Hashes of the compiled-in data tables, keyed by file name.
std::map<std::string, std::string> builtin_data_hashes();
/// Checks the tables under `root` against the compiled-in ones. Throws Io
/// when a file is unreadable and InvalidConfig when contents differ.
void verify_data_root(const std::filesystem::path& root);

struct RunManifest {
  std::string config_snapshot;  // format_run_config output
  std::vector<std::uint64_t> seeds;
  std::string code_version;
  std::map<std::string, std::string> data_hashes;
  std::string created_utc;
  std::string command;

  /// Hash over everything except the timestamp.
  std::string hash() const;
  std::string to_json() const;
  static RunManifest from_json(std::string_view text);
};

RunManifest make_manifest(const RunConfig& config, std::string command);

// ------------------------------------------------------------ artifacts

/// First line of every text artifact:
/// "#divergent <kind> v<version> schema=<hex> manifest=<hash>".
struct ArtifactHeader {
  std::string kind;
  std::uint32_t version = 0;
  std::string schema;
  std::string manifest;
};

std::string artifact_header_line(std::string_view kind, std::string_view manifest_hash);
/// Throws SchemaMismatch on a missing or foreign header, or an unknown version.
ArtifactHeader parse_artifact_header(std::string_view text);

void write_text_artifact(const std::filesystem::path& path, std::string_view kind,
                         std::string_view manifest_hash, std::string_view body);
/// Body of a text artifact after its header; checks kind and manifest when given.
std::string read_text_artifact(const std::filesystem::path& path, std::string_view kind,
                               std::optional<std::string_view> manifest_hash = std::nullopt);

struct Checkpoint {
  CampaignState state;
  std::string manifest;
};

void write_checkpoint(const std::filesystem::path& path, const CampaignState& state,
                      std::string_view manifest_hash);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ------------------------------------------------------------ tables

std::string validated_table(const CampaignState& state);
/// Per system: hull vertices after the campaign and the discoveries on it.
std::string hull_summary(const CampaignState& state, const CampaignWorld& world);
/// Counts of validated candidates by post-validation e_hull bin.
std::string ehull_histogram(const CampaignState& state, double bin_width = 0.025);
/// Cumulative CCSDT calls against cumulative discoveries, per cycle.
std::string discovery_curve(const CampaignState& state);
/// Ledger rows per fidelity; the cost column sums to the spent budget.
std::string cost_breakdown(const OracleBudget& budget);
/// Human-readable summary for the report command.
std::string campaign_summary(const CampaignState& state);

// ------------------------------------------------------------ runs

struct SeedRun {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  CampaignState state;
  bool partial = false;  // stopped by the oracle budget before n_cycles_max
};

/// Runs one seed into `dir`: checkpoint after every cycle, then the
/// history, validated list, hull summary and plot data. With `resume`
/// set, continues from dir/checkpoint.bin when its manifest matches.
SeedRun run_seed_to_dir(const RunConfig& config, const CampaignWorld& world, std::uint64_t seed,
                        Variant variant, const std::filesystem::path& dir,
                        std::string_view manifest_hash, bool resume);

/// Output file names (relative to a seed directory) whose hashes are
/// expected to be identical across fixed-seed reruns.
std::vector<std::string> deterministic_artifacts();
/// "name<TAB>hash" lines over the deterministic artifacts of `dir`.
std::string artifact_hashes(const std::filesystem::path& dir);

struct VariantResult {
  Variant variant = Variant::Full;
  std::vector<double> efficiency;  // per seed
  std::vector<double> hit_rate;    // percent, per seed
  std::vector<std::size_t> discoveries;
  std::vector<std::size_t> calls;
};

struct AblationRow {
  Variant variant = Variant::Full;
  double mean = 0.0, ci_lo = 0.0, ci_hi = 0.0;
  double hit_rate = 0.0;
  std::optional<double> p_value;     // Welch one-tailed, reference > variant
  std::optional<double> p_adjusted;  // Benjamini-Hochberg across rows
};

/// Rows in input order; the first variant is the reference for the tests.
std::vector<AblationRow> ablation_rows(const std::vector<VariantResult>& results,
                                       std::uint64_t seed = 0);
std::string ablation_table(const std::vector<AblationRow>& rows);

/// Runs every variant on every seed on the shared world.
std::vector<VariantResult> run_ablation(const RunConfig& config, const CampaignWorld& world);

}  // namespace divergent
