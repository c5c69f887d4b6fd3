#include "divergent/campaign_io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "blob.hpp"
#include "divergent/embedded_data.hpp"
#include "divergent/stats.hpp"
#include "json.hpp"
#include "text_util.hpp"

#ifndef DIVERGENT_CODE_HASH
#define DIVERGENT_CODE_HASH "unknown"
#endif

namespace divergent {

namespace {

namespace pt = boost::property_tree;

constexpr std::uint32_t kArtifactVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'D', 'V', 'G', 'C', 'K', 'P', 'T', '1'};

std::string artifact_schema() { return hex64(fnv1a("divergent-artifact:v1:header,tsv-body")); }

std::uint64_t checkpoint_schema() { return fnv1a("divergent-checkpoint:v1:manifest,campaign-state"); }

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw Error(ErrorKind::InvalidConfig, key + ": " + why);
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

double to_double(const std::string& key, const std::string& v) {
  try {
    const double d = detail::parse_double(v);
    if (!std::isfinite(d)) bad(key, "must be finite");
    return d;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidConfig) throw;
    bad(key, "not a number: '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  const auto s = detail::trim(v);
  long long out = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad(key, "not an integer: '" + v + "'");
  return out;
}

int to_int32(const std::string& key, const std::string& v) {
  const auto x = to_int(key, v);
  if (x < -2147483647LL || x > 2147483647LL) bad(key, "out of range");
  return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  const auto s = detail::trim(v);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad(key, "not an unsigned integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  const auto s = std::string(detail::trim(v));
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto part : detail::split(v, ',')) {
    const auto t = detail::trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

template <std::size_t N>
std::array<double, N> to_array(const std::string& key, const std::string& v) {
  const auto parts = to_list(v);
  if (parts.size() != N) bad(key, "expected " + std::to_string(N) + " comma-separated values");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = to_double(key, parts[i]);
  return out;
}

template <std::size_t N>
std::string from_array(const std::array<double, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + fmt(a[i]);
  return s;
}

std::string_view to_string(SelectionStrategy s) { return s == SelectionStrategy::Random ? "random" : "divergence"; }

std::string_view to_string(ValidatorLadder l) {
  switch (l) {
    case ValidatorLadder::Full: return "full";
    case ValidatorLadder::PbeOnly: return "pbe_only";
    case ValidatorLadder::DirectPbeCcsdt: return "direct_pbe_ccsdt";
  }
  return "full";
}

struct Field {
  std::string section, key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

// Every configurable key, bound to `c`.
std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  auto num = [&](std::string sec, std::string key, double& ref) {
    const auto name = sec + "." + key;
    f.push_back({sec, key, [&ref, name](const std::string& v) { ref = to_double(name, v); },
                 [&ref] { return fmt(ref); }});
  };
  auto integer = [&](std::string sec, std::string key, int& ref) {
    const auto name = sec + "." + key;
    f.push_back({sec, key, [&ref, name](const std::string& v) { ref = to_int32(name, v); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto u64 = [&](std::string sec, std::string key, std::uint64_t& ref) {
    const auto name = sec + "." + key;
    f.push_back({sec, key, [&ref, name](const std::string& v) { ref = to_u64(name, v); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto boolean = [&](std::string sec, std::string key, bool& ref) {
    const auto name = sec + "." + key;
    f.push_back({sec, key, [&ref, name](const std::string& v) { ref = to_bool(name, v); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto arr4 = [&](std::string sec, std::string key, std::array<double, kFidelityCount>& ref) {
    const auto name = sec + "." + key;
    f.push_back({sec, key, [&ref, name](const std::string& v) { ref = to_array<kFidelityCount>(name, v); },
                 [&ref] { return from_array(ref); }});
  };

  auto& k = c.campaign;
  integer("campaign", "n_cycles_max", k.n_cycles_max);
  integer("campaign", "samples_per_cycle", k.samples_per_cycle);
  num("campaign", "e_threshold", k.e_threshold);
  integer("campaign", "k_means_k", k.k_means_k);
  num("campaign", "weight_divergence", k.weight_divergence);
  num("campaign", "weight_diversity", k.weight_diversity);
  integer("campaign", "top_k_cap", k.top_k_cap);
  num("campaign", "top_k_fraction", k.top_k_fraction);
  f.push_back({"campaign", "stopping",
               [&k](const std::string& v) {
                 try {
                   k.stopping = stopping_kind_from_string(detail::trim(v));
                 } catch (const Error&) {
                   bad("campaign.stopping", "unknown criterion '" + v + "'");
                 }
               },
               [&k] { return std::string(to_string(k.stopping)); }});
  integer("campaign", "patience", k.patience);
  num("campaign", "min_hit_rate_gain", k.min_hit_rate_gain);
  integer("campaign", "diminishing_cycles", k.diminishing_cycles);
  num("campaign", "confidence_sigma", k.confidence_sigma);
  num("campaign", "budget", k.budget);
  u64("campaign", "seed", k.seed);
  f.push_back({"campaign", "selection",
               [&k](const std::string& v) {
                 const auto s = detail::trim(v);
                 if (s == "divergence") k.selection = SelectionStrategy::Divergence;
                 else if (s == "random") k.selection = SelectionStrategy::Random;
                 else bad("campaign.selection", "expected divergence or random");
               },
               [&k] { return std::string(to_string(k.selection)); }});
  boolean("campaign", "random_uses_filter", k.random_uses_filter);
  boolean("campaign", "conditioning", k.conditioning);
  num("campaign", "lambda", k.lambda);
  f.push_back({"campaign", "ladder",
               [&k](const std::string& v) {
                 const auto s = detail::trim(v);
                 if (s == "full") k.ladder = ValidatorLadder::Full;
                 else if (s == "pbe_only") k.ladder = ValidatorLadder::PbeOnly;
                 else if (s == "direct_pbe_ccsdt") k.ladder = ValidatorLadder::DirectPbeCcsdt;
                 else bad("campaign.ladder", "expected full, pbe_only or direct_pbe_ccsdt");
               },
               [&k] { return std::string(to_string(k.ladder)); }});
  f.push_back({"campaign", "divergence",
               [&k](const std::string& v) {
                 try {
                   k.divergence = divergence_kind_from_string(detail::trim(v));
                 } catch (const Error&) {
                   bad("campaign.divergence", "unknown divergence '" + v + "'");
                 }
               },
               [&k] { return std::string(to_string(k.divergence)); }});
  integer("campaign", "fine_tune_epochs", k.fine_tune_epochs);
  num("campaign", "fine_tune_lr_scale", k.fine_tune_lr_scale);
  integer("campaign", "retrain_every", k.retrain_every);
  boolean("campaign", "refit_generator", k.refit_generator);
  integer("campaign", "workers", k.workers);

  auto& w = c.world;
  f.push_back({"world", "systems",
               [&w](const std::string& v) {
                 w.systems.clear();
                 for (const auto& item : to_list(v)) {
                   const auto parts = detail::split(item, '-');
                   if (parts.size() != 2) bad("world.systems", "expected Cation-Anion pairs, got '" + item + "'");
                   const std::string a(detail::trim(parts[0])), b(detail::trim(parts[1]));
                   if (!ElementTable::builtin().find_symbol(a)) bad("world.systems", "unknown element '" + a + "'");
                   if (!ElementTable::builtin().find_symbol(b)) bad("world.systems", "unknown element '" + b + "'");
                   w.systems.emplace_back(a, b);
                 }
               },
               [&w] {
                 std::string s;
                 for (const auto& [a, b] : w.systems) s += (s.empty() ? "" : ",") + a + "-" + b;
                 return s;
               }});
  integer("world", "structures_per_system", w.structures_per_system);
  integer("world", "generated_per_system", w.generated_per_system);
  num("world", "scan_fraction", w.scan_fraction);
  num("world", "hse_fraction", w.hse_fraction);
  num("world", "ccsdt_fraction", w.ccsdt_fraction);
  num("world", "rattle", w.rattle);
  num("world", "strain", w.strain);
  integer("world", "diffusion_steps", w.diffusion_steps);
  integer("world", "denoiser_copies", w.denoiser_copies);
  integer("world", "refit_epochs", w.refit_epochs);
  u64("world", "seed", w.seed);

  auto& l = w.landscape;
  u64("landscape", "seed", l.seed);
  arr4("landscape", "bias", l.bias);
  arr4("landscape", "noise_sigma", l.noise_sigma);
  num("landscape", "unlike_depth", l.unlike_depth);
  num("landscape", "like_depth", l.like_depth);
  num("landscape", "like_r0_factor", l.like_r0_factor);
  num("landscape", "cutoff_factor", l.cutoff_factor);
  num("landscape", "jitter", l.jitter);

  auto& s = w.surrogate;
  integer("surrogate", "random_features", s.random_features);
  num("surrogate", "lengthscale", s.lengthscale);
  integer("surrogate", "epochs", s.epochs);
  num("surrogate", "lr_start", s.lr_start);
  num("surrogate", "lr_end", s.lr_end);
  arr4("surrogate", "loss_weights", s.loss_weights);
  num("surrogate", "force_weight", s.force_weight);
  num("surrogate", "l2_base", s.l2_base);
  num("surrogate", "l2_residual", s.l2_residual);
  u64("surrogate", "seed", s.seed);

  auto& d = w.denoiser;
  integer("denoiser", "epochs", d.epochs);
  integer("denoiser", "batches_per_epoch", d.batches_per_epoch);
  integer("denoiser", "batch_size", d.batch_size);
  num("denoiser", "learning_rate", d.learning_rate);
  num("denoiser", "condition_dropout", d.condition_dropout);
  integer("denoiser", "hidden", d.hidden);
  u64("denoiser", "seed", d.seed);

  f.push_back({"run", "seeds",
               [&c](const std::string& v) {
                 c.seeds.clear();
                 for (const auto& item : to_list(v)) c.seeds.push_back(to_u64("run.seeds", item));
                 if (c.seeds.empty()) bad("run.seeds", "must list at least one seed");
               },
               [&c] {
                 std::string s;
                 for (auto x : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(x);
                 return s;
               }});
  f.push_back({"run", "variants",
               [&c](const std::string& v) {
                 c.variants.clear();
                 for (const auto& item : to_list(v)) {
                   try {
                     c.variants.push_back(variant_from_string(item));
                   } catch (const Error&) {
                     bad("run.variants", "unknown variant '" + item + "'");
                   }
                 }
                 if (c.variants.empty()) bad("run.variants", "must list at least one variant");
               },
               [&c] {
                 std::string s;
                 for (auto x : c.variants) s += (s.empty() ? "" : ",") + std::string(to_string(x));
                 return s;
               }});
  return f;
}

void validate_world(const WorldConfig& w) {
  if (w.systems.empty()) bad("world.systems", "must list at least one system");
  if (w.structures_per_system < 1) bad("world.structures_per_system", "must be at least 1");
  if (w.generated_per_system < 0) bad("world.generated_per_system", "must be non-negative");
  for (auto [name, v] : {std::pair{"world.scan_fraction", w.scan_fraction}, {"world.hse_fraction", w.hse_fraction},
                         {"world.ccsdt_fraction", w.ccsdt_fraction}})
    if (v < 0.0 || v > 1.0) bad(name, "must be in [0, 1]");
  if (w.rattle < 0.0) bad("world.rattle", "must be non-negative");
  if (w.strain < 0.0 || w.strain >= 0.5) bad("world.strain", "must be in [0, 0.5)");
  if (w.diffusion_steps < 1) bad("world.diffusion_steps", "must be at least 1");
  if (w.denoiser_copies < 1) bad("world.denoiser_copies", "must be at least 1");
  if (w.refit_epochs < 0) bad("world.refit_epochs", "must be non-negative");
  if (w.surrogate.random_features < 1) bad("surrogate.random_features", "must be at least 1");
  if (!(w.surrogate.lengthscale > 0.0)) bad("surrogate.lengthscale", "must be positive");
  if (w.surrogate.epochs < 1) bad("surrogate.epochs", "must be at least 1");
  if (!(w.surrogate.lr_start > 0.0) || !(w.surrogate.lr_end > 0.0)) bad("surrogate.lr_start", "rates must be positive");
  if (w.denoiser.epochs < 1) bad("denoiser.epochs", "must be at least 1");
  if (w.denoiser.batches_per_epoch < 1) bad("denoiser.batches_per_epoch", "must be at least 1");
  if (w.denoiser.batch_size < 1) bad("denoiser.batch_size", "must be at least 1");
  if (w.denoiser.hidden < 1) bad("denoiser.hidden", "must be at least 1");
  if (!(w.denoiser.learning_rate > 0.0)) bad("denoiser.learning_rate", "must be positive");
  if (w.denoiser.condition_dropout < 0.0 || w.denoiser.condition_dropout > 1.0)
    bad("denoiser.condition_dropout", "must be in [0, 1]");
  for (double b : w.landscape.noise_sigma)
    if (b < 0.0) bad("landscape.noise_sigma", "must be non-negative");
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << text;
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string file_hash(const std::filesystem::path& path) { return hex64(fnv1a(read_text(path))); }

}  // namespace

// ------------------------------------------------------------ config

RunConfig parse_run_config(std::string_view ini_text) {
  pt::ptree tree;
  std::istringstream in{std::string(ini_text)};
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorKind::InvalidConfig, "line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig c;
  auto table = fields(c);
  bool have_budget = false, have_seeds = false;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) bad(section, "keys must sit inside a section");
    bool known_section = false;
    for (const auto& fl : table) known_section = known_section || fl.section == section;
    if (!known_section) bad(section, "unknown section");
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Field& fl) { return fl.section == section && fl.key == key; });
      if (it == table.end()) bad(section + "." + key, "unknown key");
      it->set(value.data());
      have_budget = have_budget || (section == "campaign" && key == "budget");
      have_seeds = have_seeds || (section == "run" && key == "seeds");
    }
  }
  if (!have_budget) bad("campaign.budget", "required field is missing");
  if (!have_seeds) c.seeds = {c.campaign.seed};
  try {
    c.campaign.validate();
  } catch (const Error& e) {
    // validate() names the bare field
    const std::string what = e.what();
    const auto colon = what.find(": ");
    throw Error(ErrorKind::InvalidConfig, "campaign." + what.substr(colon == std::string::npos ? 0 : colon + 2));
  }
  validate_world(c.world);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text(path)); }

std::string format_run_config(const RunConfig& config) {
  RunConfig copy = config;
  const auto table = fields(copy);
  std::ostringstream out;
  std::string section;
  for (const auto& fl : table) {
    if (fl.section != section) {
      out << (section.empty() ? "" : "\n") << "[" << fl.section << "]\n";
      section = fl.section;
    }
    out << fl.key << " = " << fl.get() << "\n";
  }
  return out.str();
}

// ------------------------------------------------------------ manifest

std::string code_version_hash() { return DIVERGENT_CODE_HASH; }

std::map<std::string, std::string> builtin_data_hashes() {
  return {{"elements.tsv", hex64(fnv1a(embedded::elements_tsv()))},
          {"bvs_params.tsv", hex64(fnv1a(embedded::bvs_params_tsv()))},
          {"descriptor_scaling.tsv", hex64(fnv1a(embedded::descriptor_scaling_tsv()))}};
}

void verify_data_root(const std::filesystem::path& root) {
  for (const auto& [name, hash] : builtin_data_hashes()) {
    const auto got = file_hash(root / name);
    if (got != hash)
      throw Error(ErrorKind::InvalidConfig, "data file " + (root / name).string() + " (hash " + got +
                                                ") differs from the compiled-in table (hash " + hash + ")");
  }
}

std::string RunManifest::hash() const {
  std::string s = "manifest:v1\n" + config_snapshot + "\nseeds:";
  for (auto x : seeds) s += std::to_string(x) + ",";
  s += "\ncode:" + code_version + "\ncommand:" + command + "\n";
  for (const auto& [k, v] : data_hashes) s += k + "=" + v + "\n";
  return hex64(fnv1a(s));
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "divergent-manifest";
  j["version"] = kArtifactVersion;
  j["hash"] = hash();
  j["command"] = command;
  j["created_utc"] = created_utc;
  j["code_version"] = code_version;
  j["seeds"] = seeds;
  j["data_hashes"] = data_hashes;
  j["config"] = config_snapshot;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaMismatch, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "divergent-manifest")
    throw Error(ErrorKind::SchemaMismatch, "not a run manifest");
  if (j.value("version", 0u) != kArtifactVersion)
    throw Error(ErrorKind::SchemaMismatch, "manifest version " + std::to_string(j.value("version", 0u)) +
                                               " is not supported (expected " + std::to_string(kArtifactVersion) + ")");
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.created_utc = j.at("created_utc").get<std::string>();
    m.code_version = j.at("code_version").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.data_hashes = j.at("data_hashes").get<std::map<std::string, std::string>>();
    m.config_snapshot = j.at("config").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaMismatch, std::string("manifest field: ") + e.what());
  }
  if (j.value("hash", "") != m.hash()) throw Error(ErrorKind::SchemaMismatch, "manifest hash does not match its contents");
  return m;
}

RunManifest make_manifest(const RunConfig& config, std::string command) {
  RunManifest m;
  m.config_snapshot = format_run_config(config);
  m.seeds = config.seeds;
  m.code_version = code_version_hash();
  m.data_hashes = builtin_data_hashes();
  m.created_utc = now_utc();
  m.command = std::move(command);
  return m;
}

// ------------------------------------------------------------ artifacts

std::string artifact_header_line(std::string_view kind, std::string_view manifest_hash) {
  return "#divergent " + std::string(kind) + " v" + std::to_string(kArtifactVersion) + " schema=" + artifact_schema() +
         " manifest=" + std::string(manifest_hash) + "\n";
}

ArtifactHeader parse_artifact_header(std::string_view text) {
  const auto eol = text.find('\n');
  const auto first = detail::split_ws(text.substr(0, eol));
  if (first.size() != 5 || first[0] != "#divergent") throw Error(ErrorKind::SchemaMismatch, "missing artifact header");
  ArtifactHeader h;
  h.kind = std::string(first[1]);
  if (first[2].size() < 2 || first[2][0] != 'v') throw Error(ErrorKind::SchemaMismatch, "malformed artifact version");
  try {
    h.version = static_cast<std::uint32_t>(to_u64("version", std::string(first[2].substr(1))));
  } catch (const Error&) {
    throw Error(ErrorKind::SchemaMismatch, "malformed artifact version");
  }
  if (h.version != kArtifactVersion)
    throw Error(ErrorKind::SchemaMismatch, "artifact version " + std::to_string(h.version) +
                                               " is not supported (expected " + std::to_string(kArtifactVersion) + ")");
  if (!first[3].starts_with("schema=") || !first[4].starts_with("manifest="))
    throw Error(ErrorKind::SchemaMismatch, "malformed artifact header");
  h.schema = std::string(first[3].substr(7));
  h.manifest = std::string(first[4].substr(9));
  if (h.schema != artifact_schema())
    throw Error(ErrorKind::SchemaMismatch, "artifact schema hash " + h.schema + " differs from " + artifact_schema());
  return h;
}

void write_text_artifact(const std::filesystem::path& path, std::string_view kind, std::string_view manifest_hash,
                         std::string_view body) {
  write_text(path, artifact_header_line(kind, manifest_hash) + std::string(body));
}

std::string read_text_artifact(const std::filesystem::path& path, std::string_view kind,
                               std::optional<std::string_view> manifest_hash) {
  const auto text = read_text(path);
  const auto h = parse_artifact_header(text);
  if (h.kind != kind) throw Error(ErrorKind::SchemaMismatch, path.string() + " holds '" + h.kind + "', not '" + std::string(kind) + "'");
  if (manifest_hash && h.manifest != *manifest_hash)
    throw Error(ErrorKind::SchemaMismatch, path.string() + " belongs to manifest " + h.manifest + ", not " +
                                               std::string(*manifest_hash));
  const auto eol = text.find('\n');
  return eol == std::string::npos ? std::string() : text.substr(eol + 1);
}

void write_checkpoint(const std::filesystem::path& path, const CampaignState& state, std::string_view manifest_hash) {
  detail::BlobWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put(checkpoint_schema());
  w.str(std::string(manifest_hash));
  const auto body = state.to_bytes();
  w.put(static_cast<std::uint64_t>(body.size()));
  w.bytes(body.data(), body.size());
  // write-then-rename so an interrupted run keeps the previous checkpoint
  auto tmp = path;
  tmp += ".tmp";
  detail::write_file(tmp, w.data());
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::BlobReader r(bytes, "checkpoint");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw Error(ErrorKind::SchemaMismatch, "not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::SchemaMismatch, "checkpoint version " + std::to_string(version) +
                                               " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto schema = r.get<std::uint64_t>();
  if (schema != checkpoint_schema())
    throw Error(ErrorKind::SchemaMismatch, "checkpoint schema hash " + hex64(schema) + " differs from " +
                                               hex64(checkpoint_schema()));
  Checkpoint c{CampaignState{}, r.str()};
  const auto n = r.get<std::uint64_t>();
  if (n != bytes.size() - (8 + 4 + 8 + 4 + c.manifest.size() + 8))
    throw Error(ErrorKind::SchemaMismatch, "checkpoint body length does not match the file");
  c.state = CampaignState::from_bytes(std::span(bytes).subspan(bytes.size() - n));
  return c;
}

// ------------------------------------------------------------ tables

std::string validated_table(const CampaignState& state) {
  std::ostringstream out;
  out << "id\tformula\tcycle\tformation_energy\tpredicted\tdivergence\te_hull\tclassification\tstable\n";
  for (const auto& v : state.validated)
    out << v.structure.id() << "\t" << v.structure.composition().formula() << "\t" << v.cycle << "\t"
        << fixed(v.formation_energy) << "\t" << fixed(v.predicted) << "\t" << fixed(v.divergence) << "\t"
        << fixed(v.e_hull) << "\t" << to_string(v.classification) << "\t" << (v.stable ? 1 : 0) << "\n";
  return out.str();
}

std::string hull_summary(const CampaignState& state, const CampaignWorld& world) {
  std::ostringstream out;
  out << "system\tphases\tvertices\tvalidated\tstable\tdiscoveries_on_hull\n";
  for (const auto& sys : world.systems) {
    std::vector<PhaseEntry> extra;
    std::size_t n_val = 0, n_stable = 0;
    for (const auto& v : state.validated) {
      if (world.system_of(v.structure.composition()).formula != sys.formula) continue;
      ++n_val;
      n_stable += v.stable;
      extra.push_back(make_phase(v.structure.id(), sys.composition, v.formation_energy));
    }
    const auto hull = world.hull_for(sys, extra);
    const auto ids = hull.vertex_ids();
    std::size_t on_hull = 0;
    std::string joined;
    for (const auto& id : ids) {
      joined += (joined.empty() ? "" : ";") + id;
      on_hull += std::any_of(extra.begin(), extra.end(), [&](const PhaseEntry& p) { return p.phase_id == id; });
    }
    out << sys.formula << "\t" << hull.size() << "\t" << joined << "\t" << n_val << "\t" << n_stable << "\t" << on_hull
        << "\n";
  }
  return out.str();
}

std::string ehull_histogram(const CampaignState& state, double bin_width) {
  if (!(bin_width > 0.0)) throw Error(ErrorKind::InvalidParameters, "bin width must be positive");
  std::map<long long, std::size_t> bins;
  for (const auto& v : state.validated) ++bins[static_cast<long long>(std::floor(v.e_hull / bin_width))];
  std::ostringstream out;
  out << "bin_lo\tbin_hi\tcount\n";
  for (const auto& [b, n] : bins)
    out << fixed(static_cast<double>(b) * bin_width, 4) << "\t" << fixed(static_cast<double>(b + 1) * bin_width, 4) << "\t"
        << n << "\n";
  return out.str();
}

std::string discovery_curve(const CampaignState& state) {
  std::ostringstream out;
  out << "cycle\tccsdt_calls\tdiscoveries\tbudget_spent\n";
  std::size_t calls = 0, disc = 0;
  for (const auto& h : state.history) {
    calls += h.validated;
    disc += h.stable;
    out << h.cycle << "\t" << calls << "\t" << disc << "\t" << fixed(h.budget_spent, 2) << "\n";
  }
  return out.str();
}

std::string cost_breakdown(const OracleBudget& budget) {
  std::ostringstream out;
  out << "fidelity\tcalls\tcost_per_call\tcpu_hours\tpercent\n";
  const double spent = budget.spent();
  double sum = 0.0;
  for (auto f : kAllFidelities) {
    const double c = budget.cost(f) * static_cast<double>(budget.calls(f));
    sum += c;
    out << to_string(f) << "\t" << budget.calls(f) << "\t" << fixed(budget.cost(f), 2) << "\t" << fixed(c, 2) << "\t"
        << fixed(spent > 0.0 ? 100.0 * c / spent : 0.0, 2) << "\n";
  }
  out << "total\t-\t-\t" << fixed(sum, 2) << "\t" << fixed(spent > 0.0 ? 100.0 : 0.0, 2) << "\n";
  return out.str();
}

std::string campaign_summary(const CampaignState& state) {
  std::ostringstream out;
  const auto calls = state.budget.calls(Fidelity::CCSDT);
  out << "cycles completed   " << state.cycle << "\n"
      << "stop reason        " << to_string(state.stop) << "\n"
      << "budget total       " << fixed(state.budget.total(), 2) << " CPU-h\n"
      << "budget spent       " << fixed(state.budget.spent(), 2) << " CPU-h\n"
      << "budget remaining   " << fixed(state.budget.remaining(), 2) << " CPU-h\n"
      << "CCSDT calls        " << calls << "\n"
      << "discoveries        " << state.discoveries() << "\n"
      << "efficiency score   " << (calls > 0 ? fixed(efficiency_score(state), 4) : std::string("undefined (no CCSDT calls)"))
      << "\n\n"
      << "cost breakdown\n"
      << cost_breakdown(state.budget);
  return out.str();
}

// ------------------------------------------------------------ runs

std::vector<std::string> deterministic_artifacts() {
  return {"history.tsv", "validated.tsv", "hull_summary.tsv", "ehull_histogram.tsv", "discovery_curve.tsv",
          "checkpoint.bin"};
}

std::string artifact_hashes(const std::filesystem::path& dir) {
  std::string out;
  for (const auto& name : deterministic_artifacts()) out += name + "\t" + file_hash(dir / name) + "\n";
  return out;
}

SeedRun run_seed_to_dir(const RunConfig& config, const CampaignWorld& world, std::uint64_t seed, Variant variant,
                        const std::filesystem::path& dir, std::string_view manifest_hash, bool resume) {
  auto cc = apply_variant(config.campaign, variant);
  cc.seed = seed;
  std::filesystem::create_directories(dir);
  const auto ckpt = dir / "checkpoint.bin";

  SeedRun run{seed, dir, CampaignState{}, false};
  if (resume && std::filesystem::exists(ckpt)) {
    auto c = read_checkpoint(ckpt);
    if (c.manifest != manifest_hash)
      throw Error(ErrorKind::SchemaMismatch, ckpt.string() + " belongs to manifest " + c.manifest + ", not " +
                                                 std::string(manifest_hash));
    run.state = std::move(c.state);
  } else {
    run.state = start_campaign(cc, world);
  }
  write_checkpoint(ckpt, run.state, manifest_hash);
  run_campaign(run.state, cc, world, [&](const CampaignState& s) { write_checkpoint(ckpt, s, manifest_hash); });
  write_checkpoint(ckpt, run.state, manifest_hash);

  run.partial = run.state.stop == StopReason::BudgetExhausted && run.state.cycle < cc.n_cycles_max;
  write_text_artifact(dir / "history.tsv", "history", manifest_hash, history_table(run.state));
  write_text_artifact(dir / "validated.tsv", "validated", manifest_hash, validated_table(run.state));
  write_text_artifact(dir / "hull_summary.tsv", "hull_summary", manifest_hash, hull_summary(run.state, world));
  write_text_artifact(dir / "ehull_histogram.tsv", "ehull_histogram", manifest_hash, ehull_histogram(run.state));
  write_text_artifact(dir / "discovery_curve.tsv", "discovery_curve", manifest_hash, discovery_curve(run.state));
  std::ostringstream status;
  status << "seed\tvariant\tstop_reason\tpartial\tcycles\n"
         << seed << "\t" << to_string(variant) << "\t" << to_string(run.state.stop) << "\t" << (run.partial ? 1 : 0) << "\t"
         << run.state.cycle << "\n";
  write_text_artifact(dir / "status.tsv", "status", manifest_hash, status.str());
  return run;
}

std::vector<AblationRow> ablation_rows(const std::vector<VariantResult>& results, std::uint64_t seed) {
  std::vector<AblationRow> rows;
  std::vector<double> raw;
  std::vector<std::size_t> tested;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    AblationRow row;
    row.variant = r.variant;
    row.mean = stats::mean(r.efficiency);
    const auto ci = stats::bootstrap_ci(r.efficiency, 1000, 0.95, seed + i);
    row.ci_lo = ci.lo;
    row.ci_hi = ci.hi;
    row.hit_rate = stats::mean(r.hit_rate);
    if (i > 0 && results[0].efficiency.size() >= 2 && r.efficiency.size() >= 2) {
      try {
        row.p_value = stats::welch_t_test(results[0].efficiency, r.efficiency, stats::Tail::One).p;
        raw.push_back(*row.p_value);
        tested.push_back(i);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateTest) throw;
      }
    }
    rows.push_back(row);
  }
  if (!raw.empty()) {
    const auto adj = stats::adjust_pvalues(raw, stats::Adjustment::BenjaminiHochberg);
    for (std::size_t j = 0; j < tested.size(); ++j) rows[tested[j]].p_adjusted = adj[j];
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant\tefficiency_mean\tci_lo\tci_hi\thit_rate_percent\tp_welch\tp_bh\n";
  for (const auto& r : rows)
    out << to_string(r.variant) << "\t" << fixed(r.mean, 4) << "\t" << fixed(r.ci_lo, 4) << "\t" << fixed(r.ci_hi, 4)
        << "\t" << fixed(r.hit_rate, 2) << "\t" << (r.p_value ? fixed(*r.p_value, 6) : "NA") << "\t"
        << (r.p_adjusted ? fixed(*r.p_adjusted, 6) : "NA") << "\n";
  return out.str();
}

std::vector<VariantResult> run_ablation(const RunConfig& config, const CampaignWorld& world) {
  std::vector<VariantResult> out;
  for (auto v : config.variants) {
    VariantResult r;
    r.variant = v;
    for (auto seed : config.seeds) {
      auto cc = apply_variant(config.campaign, v);
      cc.seed = seed;
      auto s = start_campaign(cc, world);
      run_campaign(s, cc, world);
      const auto calls = s.budget.calls(Fidelity::CCSDT);
      r.calls.push_back(calls);
      r.discoveries.push_back(s.discoveries());
      // a variant that never validates scores zero rather than undefined
      r.efficiency.push_back(calls > 0 ? efficiency_score(s) : 0.0);
      r.hit_rate.push_back(100.0 * r.efficiency.back());
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace divergent
