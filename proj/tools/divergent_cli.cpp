// divergent: campaigns, ablations, dataset ingestion, reports and benches.
//
// Exit codes: 0 success, 1 I/O, 2 configuration, 3 runtime invariant.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "divergent/bench.hpp"
#include "divergent/campaign_io.hpp"
#include "divergent/oracles.hpp"
#include "divergent/stats.hpp"

namespace fs = std::filesystem;
using namespace divergent;

namespace {

constexpr int kOk = 0, kIo = 1, kConfig = 2, kRuntime = 3;
constexpr const char* kDataRootEnv = "DIVERGENT_DATA_ROOT";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out_dir = "divergent-out";
  bool resume = false;
};

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Io:
    case ErrorKind::SchemaMismatch: return kIo;
    case ErrorKind::InvalidConfig: return kConfig;
    default: return kRuntime;
  }
}

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + p.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_all(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + p.string());
  f << text;
}

void check_data_root() {
  if (const char* root = std::getenv(kDataRootEnv)) verify_data_root(root);
}

RunConfig load_config(const Common& c) {
  auto cfg = load_run_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (c.workers) {
    if (*c.workers < 1) throw Error(ErrorKind::InvalidConfig, "--workers: must be at least 1");
    cfg.campaign.workers = *c.workers;
  }
  return cfg;
}

// Writes the manifest before any computation. On resume an existing
// manifest must describe the same run.
RunManifest prepare_manifest(const RunConfig& cfg, const std::string& command, const fs::path& out, bool resume) {
  fs::create_directories(out);
  auto m = make_manifest(cfg, command);
  const auto path = out / "manifest.json";
  if (resume && fs::exists(path)) {
    const auto old = RunManifest::from_json(read_all(path));
    if (old.hash() != m.hash())
      throw Error(ErrorKind::InvalidConfig, "--resume: " + path.string() + " has manifest " + old.hash() +
                                                " but this configuration gives " + m.hash());
    return old;
  }
  write_all(path, m.to_json());
  return m;
}

int cmd_campaign(const Common& c) {
  check_data_root();
  const auto cfg = load_config(c);
  const fs::path out = c.out_dir;
  const auto manifest = prepare_manifest(cfg, "campaign", out, c.resume);
  const auto mh = manifest.hash();
  std::cerr << "manifest " << mh << "; building world\n";
  const auto world = build_reference_world(cfg.world);

  stats::MetricSample eff{"efficiency_score", {}, "discoveries/call"};
  stats::MetricSample hits{"ccsdt_hit_rate", {}, "percent"};
  stats::MetricSample disc{"discoveries", {}, "count"};
  stats::MetricSample spent{"budget_spent", {}, "CPU-h"};
  bool any_partial = false;
  for (auto seed : cfg.seeds) {
    const auto dir = out / ("seed-" + std::to_string(seed));
    auto run = run_seed_to_dir(cfg, world, seed, cfg.variants.front(), dir, mh, c.resume);
    write_text_artifact(dir / "artifact_hashes.tsv", "artifact_hashes", mh, artifact_hashes(dir));
    const auto calls = run.state.budget.calls(Fidelity::CCSDT);
    const double e = calls > 0 ? efficiency_score(run.state) : 0.0;
    eff.values.push_back(e);
    hits.values.push_back(100.0 * e);
    disc.values.push_back(static_cast<double>(run.state.discoveries()));
    spent.values.push_back(run.state.budget.spent());
    any_partial = any_partial || run.partial;
    std::cout << "seed " << seed << ": " << run.state.cycle << " cycles, " << run.state.discoveries() << " discoveries / "
              << calls << " CCSDT calls, stop " << to_string(run.state.stop) << (run.partial ? " (partial)" : "")
              << "\n";
  }
  const std::vector<stats::MetricSample> metrics = {eff, hits, disc, spent};
  const auto report = stats::metric_report(metrics, cfg.seeds.front());
  write_text_artifact(out / "metrics.tsv", "metrics", mh, report);
  std::cout << report;
  if (any_partial) std::cout << "note: the oracle budget ran out before n_cycles_max; artifacts are flagged partial\n";
  return kOk;
}

int cmd_ablate(const Common& c) {
  check_data_root();
  const auto cfg = load_config(c);
  const fs::path out = c.out_dir;
  const auto manifest = prepare_manifest(cfg, "ablate", out, false);
  const auto world = build_reference_world(cfg.world);
  const auto results = run_ablation(cfg, world);
  const auto table = ablation_table(ablation_rows(results, cfg.seeds.front()));

  std::ostringstream per_seed;
  per_seed << "variant\tseed\tefficiency\tdiscoveries\tccsdt_calls\n";
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.efficiency.size(); ++i)
      per_seed << to_string(r.variant) << "\t" << cfg.seeds[i] << "\t" << r.efficiency[i] << "\t" << r.discoveries[i]
               << "\t" << r.calls[i] << "\n";
  write_text_artifact(out / "ablation.tsv", "ablation", manifest.hash(), table);
  write_text_artifact(out / "ablation_runs.tsv", "ablation_runs", manifest.hash(), per_seed.str());
  std::cout << table;
  return kOk;
}

int cmd_ingest(const std::string& records, const std::string& out_dir) {
  check_data_root();
  const auto text = read_all(records);
  const auto result = ingest_lines(text);
  std::size_t processed = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first != std::string::npos && line[first] != '#') ++processed;
  }
  const std::size_t accepted = processed - result.rejected.size();
  const std::size_t merges = accepted - result.entries.size() - result.discarded.size();

  const fs::path out = out_dir;
  fs::create_directories(out);
  std::string curated;
  for (const auto& r : result.entries) curated += material_record_to_line(r) + "\n";
  std::string rejected;
  for (const auto& r : result.rejected) rejected += r + "\n";
  for (const auto& r : result.discarded) rejected += "discarded lattice mismatch: " + material_record_to_line(r) + "\n";
  std::ostringstream st;
  st << "processed\taccepted\trejected\tentries\tmerges\tdiscarded\n"
     << processed << "\t" << accepted << "\t" << result.rejected.size() << "\t" << result.entries.size() << "\t" << merges
     << "\t" << result.discarded.size() << "\n";
  const auto tag = hex64(fnv1a(text));  // ingest artifacts key on the input contents
  write_text_artifact(out / "curated.tsv", "curated", tag, curated);
  write_text_artifact(out / "rejections.log", "rejections", tag, rejected);
  write_text_artifact(out / "dedup_stats.tsv", "dedup_stats", tag, st.str());
  std::cout << st.str();
  return kOk;
}

int cmd_report(const std::string& state_path, const std::string& manifest_path) {
  const auto ckpt = read_checkpoint(state_path);
  fs::path mpath = manifest_path;
  if (mpath.empty()) {
    // seed-N/checkpoint.bin sits one level below the run's manifest
    const auto dir = fs::path(state_path).parent_path();
    for (const auto& candidate : {dir / "manifest.json", dir.parent_path() / "manifest.json"})
      if (fs::exists(candidate)) {
        mpath = candidate;
        break;
      }
  }
  if (!mpath.empty()) {
    const auto m = RunManifest::from_json(read_all(mpath));
    if (m.hash() != ckpt.manifest)
      throw Error(ErrorKind::SchemaMismatch, "checkpoint belongs to manifest " + ckpt.manifest + " but " + mpath.string() +
                                                 " is " + m.hash());
    std::cout << "manifest           " << m.hash() << " (" << m.command << ", " << m.created_utc << ")\n";
  } else {
    std::cout << "manifest           " << ckpt.manifest << " (file not found)\n";
  }
  std::cout << campaign_summary(ckpt.state);
  if (!ckpt.state.budget.audit()) throw Error(ErrorKind::InvariantViolation, "budget ledger does not audit");
  return kOk;
}

int cmd_bench(const Common& c, bool quick) {
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  std::string text = bench::machine_header();
  const std::vector<int> sizes = quick ? std::vector<int>{100, 300, 1000} : std::vector<int>{100, 300, 1000, 3000, 10000};
  const auto hull = bench::run_hull_scaling(sizes, 1000, quick ? 3 : 5);
  text += bench::hull_scaling_table(hull);
  if (!c.config.empty()) {
    const auto cfg = load_config(c);
    const auto world = build_reference_world(cfg.world);
    const auto profile = bench::run_pipeline_profile(cfg, world);
    text += bench::pipeline_table(profile);
    if (!profile.consistent()) {
      write_all(out / "bench.tsv", text);
      throw Error(ErrorKind::InvariantViolation, "profiled CCSDT calls differ from the ledger");
    }
  }
  write_all(out / "bench.tsv", text);
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Divergence-driven generative materials discovery"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", common.config, "INI configuration file");
    if (config_required) opt->required();
    sub->add_option("--seed", common.seed, "Run this seed only");
    sub->add_option("--workers", common.workers, "Worker threads");
    sub->add_option("--out-dir", common.out_dir, "Artifact directory");
  };

  auto* campaign = app.add_subcommand("campaign", "Run a discovery campaign");
  add_common(campaign, true);
  campaign->add_flag("--resume", common.resume, "Continue from checkpoints in --out-dir");

  auto* ablate = app.add_subcommand("ablate", "Compare campaign variants on shared seeds");
  add_common(ablate, true);

  std::string records, state_path, manifest_path;
  auto* ingest = app.add_subcommand("ingest", "Curate and deduplicate material records");
  ingest->add_option("records", records, "Tab-separated records file")->required();
  ingest->add_option("--out-dir", common.out_dir, "Output directory");

  auto* report = app.add_subcommand("report", "Summarise a campaign checkpoint");
  report->add_option("state", state_path, "Checkpoint file")->required();
  report->add_option("--manifest", manifest_path, "Manifest to check the checkpoint against");

  bool quick = false;
  auto* bench = app.add_subcommand("bench", "Hull scaling and pipeline profile");
  add_common(bench, false);
  bench->add_flag("--quick", quick, "Smaller size grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*campaign) return cmd_campaign(common);
    if (*ablate) return cmd_ablate(common);
    if (*ingest) return cmd_ingest(records, common.out_dir);
    if (*report) return cmd_report(state_path, manifest_path);
    if (*bench) return cmd_bench(common, quick);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
