#include "divergent/active_learning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "blob.hpp"
#include "divergent/constraints.hpp"
#include "divergent/descriptors.hpp"

namespace divergent {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  const std::uint64_t words[3] = {a, b, c};
  return fnv1a(std::string_view(reinterpret_cast<const char*>(words), sizeof(words)));
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index
/// writes only its own slot, so results do not depend on the split.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t)
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void audit_or_throw(const OracleBudget& b, const char* where) {
  if (!b.audit()) throw Error(ErrorKind::InvariantViolation, std::string("ledger audit failed after ") + where);
}

CrystalStructure rattle(const CrystalStructure& s, std::mt19937_64& rng, double sigma, double strain) {
  std::normal_distribution<double> n(0.0, sigma);
  std::uniform_real_distribution<double> u(-strain, strain);
  const auto p = lattice_parameters(s.metric());
  const auto strained = s.with_metric(
      metric_from_parameters(p.a * (1 + u(rng)), p.b * (1 + u(rng)), p.c * (1 + u(rng)), p.alpha, p.beta, p.gamma));
  const Mat3 rinv = strained.lattice().inverse();
  std::vector<Vec3> x(strained.frac_coords().begin(), strained.frac_coords().end());
  for (auto& xi : x) {
    xi += rinv * Vec3(n(rng), n(rng), n(rng));
    for (int k = 0; k < 3; ++k) xi[k] -= std::floor(xi[k]);
  }
  return strained.with_coords(std::move(x));
}

std::string symbol(int z) { return std::string(ElementTable::builtin().by_z(z).symbol); }

}  // namespace

// ------------------------------------------------------------ enums

std::string_view to_string(StoppingKind k) noexcept {
  switch (k) {
    case StoppingKind::FixedBudget: return "fixed_budget";
    case StoppingKind::DiminishingReturns: return "diminishing_returns";
    case StoppingKind::NoStablePatience: return "no_stable_patience";
    case StoppingKind::Confidence: return "confidence";
  }
  return "?";
}

StoppingKind stopping_kind_from_string(std::string_view name) {
  for (auto k : {StoppingKind::FixedBudget, StoppingKind::DiminishingReturns, StoppingKind::NoStablePatience,
                 StoppingKind::Confidence})
    if (to_string(k) == name) return k;
  throw Error(ErrorKind::InvalidConfig, "unknown stopping kind '" + std::string(name) + "'");
}

std::string_view to_string(StopReason r) noexcept {
  switch (r) {
    case StopReason::None: return "none";
    case StopReason::BudgetExhausted: return "budget_exhausted";
    case StopReason::MaxCycles: return "max_cycles";
    case StopReason::DiminishingReturns: return "diminishing_returns";
    case StopReason::NoStablePatience: return "no_stable_patience";
    case StopReason::Confidence: return "confidence";
  }
  return "?";
}

StopReason stop_reason_from_string(std::string_view name) {
  for (auto r : {StopReason::None, StopReason::BudgetExhausted, StopReason::MaxCycles,
                 StopReason::DiminishingReturns, StopReason::NoStablePatience, StopReason::Confidence})
    if (to_string(r) == name) return r;
  throw Error(ErrorKind::ParseError, "unknown stop reason '" + std::string(name) + "'");
}

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::RandomSelection: return "random_selection";
    case Variant::NoConditioning: return "no_conditioning";
    case Variant::PbeOnlyValidator: return "pbe_only_validator";
    case Variant::NoQcNoMf: return "no_qc_no_mf";
    case Variant::DirectPbeCcsdt: return "direct_pbe_ccsdt";
  }
  return "?";
}

Variant variant_from_string(std::string_view name) {
  for (auto v : {Variant::Full, Variant::RandomSelection, Variant::NoConditioning, Variant::PbeOnlyValidator,
                 Variant::NoQcNoMf, Variant::DirectPbeCcsdt})
    if (to_string(v) == name) return v;
  throw Error(ErrorKind::InvalidConfig, "unknown variant '" + std::string(name) + "'");
}

// ------------------------------------------------------------ config

void CampaignConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::InvalidConfig, field + ": " + why);
  };
  if (n_cycles_max < 1) fail("n_cycles_max", "must be at least 1");
  if (samples_per_cycle < 1) fail("samples_per_cycle", "must be at least 1");
  if (!std::isfinite(e_threshold)) fail("e_threshold", "must be finite");
  if (k_means_k < 1) fail("k_means_k", "must be at least 1");
  if (!(weight_divergence >= 0.0) || !(weight_diversity >= 0.0))
    fail("weights", "must be non-negative");
  if (std::abs(weight_divergence + weight_diversity - 1.0) > 1e-9) fail("weights", "must sum to 1");
  if (top_k_cap < 1) fail("top_k_cap", "must be positive");
  if (!(top_k_fraction > 0.0) || top_k_fraction > 1.0) fail("top_k_fraction", "must be in (0, 1]");
  if (patience < 1) fail("patience", "must be at least 1");
  if (diminishing_cycles < 1) fail("diminishing_cycles", "must be at least 1");
  if (!(confidence_sigma > 0.0)) fail("confidence_sigma", "must be positive");
  if (!(budget > 0.0) || !std::isfinite(budget)) fail("budget", "must be positive and finite");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda", "must be in [0, 1]");
  if (fine_tune_epochs < 0) fail("fine_tune_epochs", "must be non-negative");
  if (!(fine_tune_lr_scale > 0.0)) fail("fine_tune_lr_scale", "must be positive");
  if (retrain_every < 1) fail("retrain_every", "must be at least 1");
  if (workers < 1) fail("workers", "must be at least 1");
}

CampaignConfig apply_variant(CampaignConfig c, Variant v) {
  switch (v) {
    case Variant::Full: break;
    case Variant::RandomSelection: c.selection = SelectionStrategy::Random; break;
    case Variant::NoConditioning: c.conditioning = false; break;
    case Variant::PbeOnlyValidator: c.ladder = ValidatorLadder::PbeOnly; break;
    case Variant::NoQcNoMf:
      c.conditioning = false;
      c.ladder = ValidatorLadder::PbeOnly;
      break;
    case Variant::DirectPbeCcsdt: c.ladder = ValidatorLadder::DirectPbeCcsdt; break;
  }
  return c;
}

// ------------------------------------------------------------ world

CrystalStructure binary_cell(std::string id, int cation_z, int anion_z, BinaryPrototype p, double d) {
  Metric6 g{};
  Vec3 x2;
  switch (p) {
    case BinaryPrototype::Rocksalt: {
      const double a = std::sqrt(2.0) * d;
      g = metric_from_parameters(a, a, a, 60, 60, 60);
      x2 = Vec3(0.5, 0.5, 0.5);
      break;
    }
    case BinaryPrototype::CsCl: {
      const double a = 2.0 * d / std::sqrt(3.0);
      g = metric_from_parameters(a, a, a);
      x2 = Vec3(0.5, 0.5, 0.5);
      break;
    }
    case BinaryPrototype::Zincblende: {
      const double a = 4.0 * d / std::sqrt(3.0) / std::sqrt(2.0);
      g = metric_from_parameters(a, a, a, 60, 60, 60);
      x2 = Vec3(0.25, 0.25, 0.25);
      break;
    }
  }
  return CrystalStructure(std::move(id), g, {cation_z, anion_z}, {Vec3(0, 0, 0), x2});
}

const ChemicalSystem& CampaignWorld::system_of(const Composition& c) const {
  const auto els = c.elements();
  for (const auto& s : systems)
    if (s.composition.elements() == els) return s;
  throw Error(ErrorKind::IncompleteChemicalSystem, "composition " + c.formula() + " is outside the world");
}

HullState CampaignWorld::hull_for(const ChemicalSystem& sys, std::span<const PhaseEntry> extra) const {
  std::vector<PhaseEntry> phases;
  const auto els = sys.composition.elements();
  for (int z : els) phases.push_back(make_phase(symbol(z), Composition({{z, 1}}), 0.0));
  auto in_system = [&](const PhaseEntry& p) {
    const auto pe = p.composition.elements();
    return std::includes(els.begin(), els.end(), pe.begin(), pe.end());
  };
  for (const auto& p : known_phases)
    if (in_system(p)) phases.push_back(p);
  for (const auto& p : extra)
    if (in_system(p)) phases.push_back(p);
  return HullState::build(std::move(phases));
}

CampaignWorld build_reference_world(const WorldConfig& config) {
  if (config.systems.empty()) throw Error(ErrorKind::InvalidConfig, "systems: at least one is needed");
  if (config.structures_per_system < 1) throw Error(ErrorKind::InvalidConfig, "structures_per_system: must be positive");
  if (config.diffusion_steps < 1) throw Error(ErrorKind::InvalidConfig, "diffusion_steps: must be positive");

  CampaignWorld w;
  w.config = config;
  w.landscape = SyntheticLandscape(config.landscape);
  const auto& table = ElementTable::builtin();
  OracleBudget setup(std::numeric_limits<double>::max() / 4);

  std::vector<int> elements;
  for (const auto& [c, a] : config.systems) {
    elements.push_back(table.by_symbol(c).atomic_number);
    elements.push_back(table.by_symbol(a).atomic_number);
  }
  std::sort(elements.begin(), elements.end());
  elements.erase(std::unique(elements.begin(), elements.end()), elements.end());
  w.references = ElementalReferences::evaluate(elements, w.landscape, setup);
  w.features = FeatureMap(elements);
  w.schedule = NoiseSchedule::cosine(config.diffusion_steps);

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<CrystalStructure> denoiser_set, initial;
  constexpr BinaryPrototype protos[] = {BinaryPrototype::Rocksalt, BinaryPrototype::CsCl, BinaryPrototype::Zincblende};
  constexpr const char* proto_names[] = {"rs", "cscl", "zb"};

  for (const auto& [csym, asym] : config.systems) {
    ChemicalSystem sys;
    sys.cation_z = table.by_symbol(csym).atomic_number;
    sys.anion_z = table.by_symbol(asym).atomic_number;
    sys.composition = Composition({{sys.cation_z, 1}, {sys.anion_z, 1}});
    sys.formula = sys.composition.formula();
    const double d0 = table.by_z(sys.cation_z).covalent_radius + table.by_z(sys.anion_z).covalent_radius;

    double best = std::numeric_limits<double>::infinity();
    std::vector<CrystalStructure> relaxed;
    for (int p = 0; p < 3; ++p) {
      auto s = relax_volume(binary_cell("known-" + sys.formula + "-" + proto_names[p], sys.cation_z, sys.anion_z,
                                        protos[p], d0),
                            w.landscape, Fidelity::PBE);
      const double e = evaluate(s, Fidelity::PBE, w.landscape, setup).energy_per_atom;
      const double ef = w.references.formation_energy(s.composition(), e);
      w.known_phases.push_back(make_phase(s.id(), s.composition(), ef));
      if (ef < best) {
        best = ef;
        sys.target = compute_descriptors(s, DescriptorScaling::builtin(), table);
      }
      for (int k = 0; k < config.denoiser_copies; ++k) denoiser_set.push_back(rattle(s, rng, 0.03, 0.03));
      w.known_structures.push_back(s);
      relaxed.push_back(std::move(s));
    }

    for (int k = 0; k < config.structures_per_system; ++k) {
      const auto& base = relaxed[static_cast<std::size_t>(k % 3)];
      initial.push_back(rattle(base, rng, config.rattle, config.strain).with_id("init-" + sys.formula + "-" + std::to_string(k)));
    }
    w.systems.push_back(std::move(sys));
  }
  w.denoiser = train_reference_denoiser(denoiser_set, w.schedule, config.denoiser);

  for (std::size_t i = 0; i < w.systems.size() && config.generated_per_system > 0; ++i) {
    SamplerConfig sc;
    sc.seed = mix(config.seed, i, 0x1417);
    sc.id_prefix = "init-" + w.systems[i].formula + "-g";
    auto res = sample(static_cast<std::size_t>(config.generated_per_system), w.systems[i].composition,
                      ConditioningContext{std::nullopt, 0.0}, w.denoiser, w.schedule, sc);
    for (auto& s : res.structures) initial.push_back(std::move(s));
  }

  for (const auto& s : initial) {
    const auto x = w.features(s);
    auto label = [&](Fidelity f) {
      const double e = evaluate(s, f, w.landscape, setup).energy_per_atom;
      w.initial_data.push_back({s.id() + "/" + std::string(to_string(f)), s.id(), x, f,
                                w.references.formation_energy(s.composition(), e)});
    };
    label(Fidelity::PBE);
    if (unit(rng) < config.scan_fraction) label(Fidelity::SCAN);
    if (unit(rng) < config.hse_fraction) label(Fidelity::HSE06);
    if (unit(rng) < config.ccsdt_fraction) label(Fidelity::CCSDT);
  }
  w.setup_cost = setup.spent();
  return w;
}

// ------------------------------------------------------------ state

std::size_t CampaignState::discoveries() const {
  return static_cast<std::size_t>(
      std::count_if(validated.begin(), validated.end(), [](const auto& v) { return v.stable; }));
}

namespace {

constexpr char kStateMagic[8] = {'D', 'V', 'G', 'S', 'T', 'A', 'T', 'E'};
constexpr std::uint32_t kStateVersion = 1;

void put_structure(detail::BlobWriter& w, const CrystalStructure& s) {
  w.str(s.id());
  for (double g : s.metric()) w.put(g);
  w.put(static_cast<std::uint32_t>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    w.put(static_cast<std::int32_t>(s.species()[i]));
    for (int k = 0; k < 3; ++k) w.put(s.frac_coords()[i][k]);
  }
}

CrystalStructure get_structure(detail::BlobReader& r) {
  auto id = r.str();
  Metric6 g{};
  for (auto& v : g) v = r.get<double>();
  const auto n = r.get<std::uint32_t>();
  if (n > static_cast<std::uint32_t>(kMaxAtomsPerCell)) throw Error(ErrorKind::SchemaMismatch, "atom count out of range");
  std::vector<int> sp(n);
  std::vector<Vec3> x(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    sp[i] = r.get<std::int32_t>();
    for (int k = 0; k < 3; ++k) x[i][k] = r.get<double>();
  }
  return CrystalStructure(std::move(id), g, std::move(sp), std::move(x));
}

void put_bytes(detail::BlobWriter& w, const std::vector<std::uint8_t>& b) {
  w.put(static_cast<std::uint64_t>(b.size()));
  w.bytes(b.data(), b.size());
}

std::vector<std::uint8_t> get_bytes(detail::BlobReader& r) {
  const auto n = r.get<std::uint64_t>();
  if (n > (std::uint64_t{1} << 34)) throw Error(ErrorKind::SchemaMismatch, "blob length out of range");
  std::vector<std::uint8_t> b(n);
  r.bytes(b.data(), n);
  return b;
}

std::uint64_t state_schema_hash() {
  return fnv1a("campaign-state:v1:cycle,budget,model,d_hf,history,validated,counters,generator,stop");
}

}  // namespace

std::vector<std::uint8_t> CampaignState::to_bytes() const {
  detail::BlobWriter w;
  w.bytes(kStateMagic, sizeof kStateMagic);
  w.put(kStateVersion);
  w.put(state_schema_hash());
  w.put(static_cast<std::int32_t>(cycle));

  w.put(budget.total());
  w.put(budget.spent());
  for (auto f : kAllFidelities) {
    w.put(budget.cost(f));
    w.put(static_cast<std::uint64_t>(budget.calls(f)));
  }

  put_bytes(w, model.trained() ? model.to_bytes() : std::vector<std::uint8_t>{});

  w.put(static_cast<std::uint64_t>(d_hf.size()));
  for (const auto& e : d_hf) {
    w.str(e.id);
    w.str(e.structure);
    w.vec(e.features);
    w.put(static_cast<std::int32_t>(e.fidelity));
    w.put(e.energy);
  }

  w.put(static_cast<std::uint64_t>(history.size()));
  for (const auto& h : history) {
    w.put(static_cast<std::int32_t>(h.cycle));
    for (auto n : {h.generated, h.passed_constraints, h.passed_filter, h.selected, h.validated, h.stable})
      w.put(static_cast<std::uint64_t>(n));
    w.put(h.hit_rate);
    w.put(h.mean_sigma);
    w.put(h.budget_spent);
  }

  w.put(static_cast<std::uint64_t>(validated.size()));
  for (const auto& v : validated) {
    w.put(static_cast<std::int32_t>(v.cycle));
    put_structure(w, v.structure);
    w.put(v.formation_energy);
    w.put(v.predicted);
    w.put(v.divergence);
    w.put(v.e_hull);
    w.put(static_cast<std::int32_t>(v.classification));
    w.put(static_cast<std::uint8_t>(v.stable));
  }

  w.put(static_cast<std::int32_t>(consecutive_no_stable));
  w.put(static_cast<std::uint8_t>(generator_retrain_flag));
  w.put(static_cast<std::uint8_t>(generator.has_value()));
  if (generator) put_bytes(w, generator->to_bytes());
  w.put(static_cast<std::int32_t>(stop));
  return std::move(w.data());
}

CampaignState CampaignState::from_bytes(std::span<const std::uint8_t> bytes) {
  detail::BlobReader r(bytes, "campaign checkpoint");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kStateMagic, sizeof magic) != 0)
    throw Error(ErrorKind::SchemaMismatch, "not a campaign checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kStateVersion)
    throw Error(ErrorKind::SchemaMismatch, "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                               std::to_string(kStateVersion) + ")");
  if (r.get<std::uint64_t>() != state_schema_hash())
    throw Error(ErrorKind::SchemaMismatch, "checkpoint schema hash differs");

  CampaignState s;
  s.cycle = r.get<std::int32_t>();
  const double total = r.get<double>();
  const double spent = r.get<double>();
  std::array<double, kFidelityCount> costs{};
  std::array<std::size_t, kFidelityCount> calls{};
  for (int f = 0; f < kFidelityCount; ++f) {
    costs[f] = r.get<double>();
    calls[f] = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  s.budget = OracleBudget::restore(total, costs, calls, spent);

  const auto model = get_bytes(r);
  if (!model.empty()) s.model = MultiFidelityModel::from_bytes(model);

  const auto n_hf = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_hf; ++i) {
    SurrogateExample e;
    e.id = r.str();
    e.structure = r.str();
    e.features = r.vec();
    const auto f = r.get<std::int32_t>();
    if (f < 0 || f >= kFidelityCount) throw Error(ErrorKind::SchemaMismatch, "fidelity out of range");
    e.fidelity = static_cast<Fidelity>(f);
    e.energy = r.get<double>();
    s.d_hf.push_back(std::move(e));
  }

  const auto n_hist = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_hist; ++i) {
    CycleRecord h;
    h.cycle = r.get<std::int32_t>();
    for (auto* n : {&h.generated, &h.passed_constraints, &h.passed_filter, &h.selected, &h.validated, &h.stable})
      *n = static_cast<std::size_t>(r.get<std::uint64_t>());
    h.hit_rate = r.get<double>();
    h.mean_sigma = r.get<double>();
    h.budget_spent = r.get<double>();
    s.history.push_back(h);
  }

  const auto n_val = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_val; ++i) {
    const int cycle = r.get<std::int32_t>();
    auto st = get_structure(r);
    ValidatedCandidate v{cycle, std::move(st)};
    v.formation_energy = r.get<double>();
    v.predicted = r.get<double>();
    v.divergence = r.get<double>();
    v.e_hull = r.get<double>();
    const auto c = r.get<std::int32_t>();
    if (c < 0 || c > 3) throw Error(ErrorKind::SchemaMismatch, "classification out of range");
    v.classification = static_cast<Stability>(c);
    v.stable = r.get<std::uint8_t>() != 0;
    s.validated.push_back(std::move(v));
  }

  s.consecutive_no_stable = r.get<std::int32_t>();
  s.generator_retrain_flag = r.get<std::uint8_t>() != 0;
  if (r.get<std::uint8_t>() != 0) s.generator = ReferenceDenoiser::from_bytes(get_bytes(r));
  const auto stop = r.get<std::int32_t>();
  if (stop < 0 || stop > static_cast<int>(StopReason::Confidence))
    throw Error(ErrorKind::SchemaMismatch, "stop reason out of range");
  s.stop = static_cast<StopReason>(stop);
  r.expect_end();
  return s;
}

void CampaignState::save(const std::filesystem::path& path) const { detail::write_file(path, to_bytes()); }

CampaignState CampaignState::load(const std::filesystem::path& path) {
  return from_bytes(detail::read_file(path));
}

std::uint64_t CampaignState::state_hash() const {
  const auto b = to_bytes();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

// ------------------------------------------------------------ campaign

std::vector<SurrogateExample> ladder_data(std::span<const SurrogateExample> data, ValidatorLadder ladder) {
  std::vector<SurrogateExample> out;
  for (const auto& e : data) {
    const bool keep = ladder == ValidatorLadder::Full ||
                      (ladder == ValidatorLadder::PbeOnly && e.fidelity == Fidelity::PBE) ||
                      (ladder == ValidatorLadder::DirectPbeCcsdt &&
                       (e.fidelity == Fidelity::PBE || e.fidelity == Fidelity::CCSDT));
    if (keep) out.push_back(e);
  }
  return out;
}

namespace {

SurrogateConfig surrogate_config(const CampaignConfig& config, const CampaignWorld& world, int generation) {
  SurrogateConfig c = world.config.surrogate;
  c.seed = mix(world.config.surrogate.seed, config.seed, static_cast<std::uint64_t>(generation));
  return c;
}

std::vector<SurrogateExample> training_set(const CampaignState& state, const CampaignConfig& config,
                                           const CampaignWorld& world) {
  std::vector<SurrogateExample> all = world.initial_data;
  all.insert(all.end(), state.d_hf.begin(), state.d_hf.end());
  return ladder_data(all, config.ladder);
}

Eigen::VectorXd diversity_features(const CampaignWorld& world, const Eigen::VectorXd& x) {
  return x.head(static_cast<Eigen::Index>(world.features.elements().size() + kDescriptorDim));
}

}  // namespace

CampaignState start_campaign(const CampaignConfig& config, const CampaignWorld& world) {
  config.validate();
  CampaignState s;
  s.budget = OracleBudget(config.budget);
  const auto data = training_set(s, config, world);
  s.model = MultiFidelityModel::train(data, surrogate_config(config, world, 0));
  return s;
}

int selection_size(const CampaignConfig& config, const OracleBudget& budget) {
  const double affordable = std::floor(budget.remaining() / budget.cost(Fidelity::CCSDT));
  const double k = std::floor(config.top_k_fraction * affordable);
  return static_cast<int>(std::min<double>(config.top_k_cap, std::max(0.0, k)));
}

std::vector<double> min_max(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / span;
  return out;
}

KMeansResult kmeans(std::span<const Eigen::VectorXd> points, int k, std::uint64_t seed, int max_iter) {
  KMeansResult res;
  const std::size_t n = points.size();
  if (n == 0) return res;
  const std::size_t kk = static_cast<std::size_t>(std::clamp<int>(k, 1, static_cast<int>(n)));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  res.centroids.push_back(points[static_cast<std::size_t>(unit(rng) * static_cast<double>(n)) % n]);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (res.centroids.size() < kk) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points[i] - res.centroids.back()).squaredNorm());
      total += d2[i];
    }
    if (!(total > 0.0)) break;  // fewer distinct points than k
    double u = unit(rng) * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      u -= d2[i];
      if (u < 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    res.centroids.push_back(points[pick]);
  }

  res.assignment.assign(n, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < res.centroids.size(); ++c) {
        const double d = (points[i] - res.centroids[c]).squaredNorm();
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (std::size_t c = 0; c < res.centroids.size(); ++c) {
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(points[0].size());
      int count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (res.assignment[i] == static_cast<int>(c)) {
          sum += points[i];
          ++count;
        }
      if (count > 0) res.centroids[c] = sum / count;
    }
  }
  return res;
}

std::vector<double> diversity_scores(std::span<const Eigen::VectorXd> candidates, int k,
                                     std::span<const Eigen::VectorXd> selected, std::uint64_t seed) {
  if (candidates.empty()) return {};
  const auto dim = candidates[0].size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim), sq = Eigen::VectorXd::Zero(dim);
  double n = 0.0;
  for (auto set : {candidates, selected})
    for (const auto& x : set) {
      mean += x;
      sq += x.cwiseProduct(x);
      n += 1.0;
    }
  mean /= n;
  Eigen::VectorXd sd = (sq / n - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index j = 0; j < dim; ++j)
    if (!(sd[j] > 1e-12)) sd[j] = 1.0;
  auto standardise = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return (x - mean).cwiseQuotient(sd); };

  std::vector<Eigen::VectorXd> pts;
  pts.reserve(candidates.size());
  for (const auto& x : candidates) pts.push_back(standardise(x));
  const auto km = kmeans(pts, k, seed);

  std::vector<const Eigen::VectorXd*> refs;
  if (selected.empty()) {
    for (const auto& c : km.centroids) refs.push_back(&c);
  } else {
    std::set<std::size_t> used;
    for (const auto& x : selected) {
      const auto y = standardise(x);
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < km.centroids.size(); ++c) {
        const double d = (y - km.centroids[c]).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      used.insert(best);
    }
    for (auto c : used) refs.push_back(&km.centroids[c]);
  }

  std::vector<double> dist(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto* c : refs) best = std::min(best, (pts[i] - *c).norm());
    dist[i] = best;
  }
  return min_max(dist);
}

std::vector<std::size_t> rank_top_k(std::span<const double> scores, std::span<const std::string> ids,
                                    std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  order.resize(std::min(k, order.size()));
  return order;
}

namespace {

struct Candidate {
  std::optional<CrystalStructure> structure;
  const ChemicalSystem* system = nullptr;
  bool passed = false;
  Eigen::VectorXd x;
  double e = 0.0, sigma = 0.0, d = 0.0, e_hull = 0.0;
};

}  // namespace

void run_cycle(CampaignState& state, const CampaignConfig& config, const CampaignWorld& world) {
  config.validate();
  if (!(state.budget.remaining() > 0.0)) throw Error(ErrorKind::BudgetExhausted, "no budget left for a cycle");
  audit_or_throw(state.budget, "cycle start");
  const int cycle = state.cycle;
  CycleRecord rec;
  rec.cycle = cycle;
  PhaseSeconds secs;
  const auto& gen = state.generator ? *state.generator : world.denoiser;

  // Generate
  auto t0 = Clock::now();
  std::vector<Candidate> cands;
  const std::size_t m = world.systems.size();
  const std::size_t n = static_cast<std::size_t>(config.samples_per_cycle);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t ni = n / m + ((i + static_cast<std::size_t>(cycle)) % m < n % m ? 1 : 0);
    if (ni == 0) continue;
    const auto& sys = world.systems[i];
    SamplerConfig sc;
    sc.seed = mix(config.seed, static_cast<std::uint64_t>(cycle), i);
    sc.id_prefix = "c" + std::to_string(cycle) + "-" + sys.formula + "-";
    SampleResult res;
    if (config.conditioning) {
      ConditioningContext ctx{sys.target, config.lambda};
      res = sample_two_stage(ni, sys.composition, ctx, gen, world.schedule, sc);
    } else {
      ConditioningContext ctx{std::nullopt, 0.0};
      res = sample(ni, sys.composition, ctx, gen, world.schedule, sc);
    }
    rec.generated += res.structures.size();
    for (auto& s : res.structures) {
      Candidate c;
      c.structure = std::move(s);
      c.system = &sys;
      cands.push_back(std::move(c));
    }
  }
  secs.generation = seconds_since(t0);

  // Constraints and prediction
  t0 = Clock::now();
  parallel_for(cands.size(), config.workers, [&](std::size_t i) {
    auto& c = cands[i];
    try {
      c.passed = validate(*c.structure, Stage::Generation).overall_pass;
    } catch (const Error&) {
      c.passed = false;
    }
    if (!c.passed) return;
    c.x = world.features(*c.structure);
    if (state.model.multi_fidelity()) {
      const auto b = state.model.predict(c.x);
      c.e = b.e_mf;
      c.sigma = b.sigma_mf;
      c.d = (config.divergence == DivergenceKind::Rel && !(b.sigma_mf > 0.0))
                ? 0.0
                : divergence_metric(b.e_pbe_pred, b.e_mf, b.sigma_mf, config.divergence);
    } else {
      std::array<double, kEnsembleSize> mu{}, sg{};
      for (std::size_t k = 0; k < kEnsembleSize; ++k) {
        mu[k] = state.model.predict_member(k, c.x, Fidelity::PBE);
        sg[k] = state.model.member_sigma(k);
      }
      const auto agg = aggregate_ensemble(mu, sg);
      c.e = agg.mean;
      c.sigma = agg.sigma;
      c.d = 0.0;
    }
  });
  std::map<const ChemicalSystem*, HullState> hulls;
  std::vector<PhaseEntry> validated_phases;
  for (const auto& v : state.validated)
    validated_phases.push_back(make_phase(v.structure.id(), v.structure.composition(), v.formation_energy));
  std::vector<std::size_t> pool, valid;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto& c = cands[i];
    if (!c.passed) continue;
    valid.push_back(i);
    auto it = hulls.find(c.system);
    if (it == hulls.end()) it = hulls.emplace(c.system, world.hull_for(*c.system, validated_phases)).first;
    c.e_hull = it->second.query(make_phase(c.structure->id(), c.structure->composition(), c.e)).e_hull;
    if (c.e_hull < config.e_threshold) pool.push_back(i);
  }
  rec.passed_constraints = valid.size();
  rec.passed_filter = pool.size();
  if (config.selection == SelectionStrategy::Random && !config.random_uses_filter) pool = valid;
  secs.prediction = seconds_since(t0);

  // Select
  t0 = Clock::now();
  const int k = selection_size(config, state.budget);
  std::vector<std::size_t> chosen;
  if (!pool.empty() && k > 0) {
    if (config.selection == SelectionStrategy::Random) {
      std::vector<std::size_t> order = pool;
      std::mt19937_64 rng(mix(config.seed, static_cast<std::uint64_t>(cycle), 0x5e1ec7));
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(std::min<std::size_t>(static_cast<std::size_t>(k), order.size()));
      chosen = std::move(order);
    } else {
      std::vector<double> dv, scores;
      std::vector<std::string> ids;
      std::vector<Eigen::VectorXd> feats, prior;
      for (auto i : pool) {
        dv.push_back(cands[i].d);
        ids.push_back(cands[i].structure->id());
        feats.push_back(diversity_features(world, cands[i].x));
      }
      for (const auto& v : state.validated) prior.push_back(diversity_features(world, world.features(v.structure)));
      const auto dn = min_max(dv);
      const auto u = diversity_scores(feats, config.k_means_k, prior, mix(config.seed, static_cast<std::uint64_t>(cycle), 0x6d65616e));
      for (std::size_t j = 0; j < pool.size(); ++j)
        scores.push_back(config.weight_divergence * dn[j] + config.weight_diversity * u[j]);
      for (auto j : rank_top_k(scores, ids, static_cast<std::size_t>(k))) chosen.push_back(pool[j]);
    }
  }
  rec.selected = chosen.size();
  secs.selection = seconds_since(t0);

  // Validate
  t0 = Clock::now();
  std::vector<ValidatedCandidate> batch;
  double sigma_sum = 0.0;
  for (auto i : chosen) {
    const auto& c = cands[i];
    sigma_sum += c.sigma;
    if (!state.budget.can_afford(Fidelity::CCSDT)) break;
    EnergyRecord r;
    try {
      r = evaluate(*c.structure, Fidelity::CCSDT, world.landscape, state.budget);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::BudgetExhausted) break;
      throw;
    }
    audit_or_throw(state.budget, "a CCSDT validation");
    ValidatedCandidate v{cycle, *c.structure};
    v.formation_energy = world.references.formation_energy(c.structure->composition(), r.energy_per_atom);
    v.predicted = c.e;
    v.divergence = c.d;
    batch.push_back(std::move(v));
  }
  rec.validated = batch.size();
  rec.mean_sigma = chosen.empty() ? 0.0 : sigma_sum / static_cast<double>(chosen.size());

  for (const auto& v : batch)
    validated_phases.push_back(make_phase(v.structure.id(), v.structure.composition(), v.formation_energy));
  std::map<const ChemicalSystem*, HullState> post;
  for (auto& v : batch) {
    const auto* sys = &world.system_of(v.structure.composition());
    auto it = post.find(sys);
    if (it == post.end()) it = post.emplace(sys, world.hull_for(*sys, validated_phases)).first;
    v.e_hull = it->second.query(make_phase(v.structure.id(), v.structure.composition(), v.formation_energy)).e_hull;
    v.classification = classify_stability(v.e_hull);
    v.stable = v.classification == Stability::Stable || v.classification == Stability::Metastable;
    if (v.stable) ++rec.stable;
  }
  rec.hit_rate = batch.empty() ? 0.0 : 100.0 * static_cast<double>(rec.stable) / static_cast<double>(batch.size());
  secs.validation = seconds_since(t0);

  // Augment and retrain
  t0 = Clock::now();
  const std::size_t before = state.d_hf.size();
  for (const auto& v : batch) {
    if (config.ladder == ValidatorLadder::PbeOnly) break;
    state.d_hf.push_back({v.structure.id() + "/CCSDT", v.structure.id(), world.features(v.structure), Fidelity::CCSDT,
                          v.formation_energy});
  }
  if (config.ladder != ValidatorLadder::PbeOnly && state.d_hf.size() != before + batch.size())
    throw Error(ErrorKind::InvariantViolation, "high-fidelity set did not grow by the validated count");
  for (auto& v : batch) state.validated.push_back(std::move(v));

  const bool full_retrain = (cycle + 1) % config.retrain_every == 0;
  const auto data = training_set(state, config, world);
  if (full_retrain) {
    state.model = MultiFidelityModel::train(data, surrogate_config(config, world, cycle + 1));
    state.generator_retrain_flag = true;
    if (config.refit_generator && world.config.refit_epochs > 0) {
      std::vector<CrystalStructure> set;
      std::mt19937_64 rng(mix(config.seed, static_cast<std::uint64_t>(cycle), 0x9e4));
      for (const auto& s : world.known_structures)
        for (int j = 0; j < world.config.denoiser_copies; ++j) set.push_back(rattle(s, rng, 0.03, 0.03));
      for (const auto& v : state.validated)
        if (v.stable) set.push_back(v.structure);
      auto dc = world.config.denoiser;
      dc.epochs = world.config.refit_epochs;
      dc.seed = mix(dc.seed, config.seed, static_cast<std::uint64_t>(cycle));
      state.generator = refit_reference_denoiser(gen, set, world.schedule, dc);
    }
  } else if (state.d_hf.size() > before && config.fine_tune_epochs > 0) {
    state.model.fine_tune(data, config.fine_tune_epochs, config.fine_tune_lr_scale);
  }
  secs.retraining = seconds_since(t0);

  audit_or_throw(state.budget, "cycle end");
  rec.budget_spent = state.budget.spent();
  state.consecutive_no_stable = rec.stable > 0 ? 0 : state.consecutive_no_stable + 1;
  state.history.push_back(rec);
  state.timings.push_back(secs);
  state.cycle = cycle + 1;
}

StopDecision check_stopping(const CampaignState& state, const CampaignConfig& config) {
  if (!state.budget.can_afford(Fidelity::CCSDT) || selection_size(config, state.budget) == 0)
    return {true, StopReason::BudgetExhausted};
  switch (config.stopping) {
    case StoppingKind::FixedBudget: break;
    case StoppingKind::NoStablePatience:
      if (state.consecutive_no_stable >= config.patience) return {true, StopReason::NoStablePatience};
      break;
    case StoppingKind::DiminishingReturns: {
      const auto& h = state.history;
      const auto need = static_cast<std::size_t>(config.diminishing_cycles);
      if (h.size() > need) {
        bool flat = true;
        for (std::size_t j = h.size() - need; j < h.size(); ++j)
          if (h[j].hit_rate - h[j - 1].hit_rate >= config.min_hit_rate_gain) flat = false;
        if (flat) return {true, StopReason::DiminishingReturns};
      }
      break;
    }
    case StoppingKind::Confidence:
      if (!state.history.empty() && state.history.back().selected > 0 &&
          state.history.back().mean_sigma < config.confidence_sigma)
        return {true, StopReason::Confidence};
      break;
  }
  if (state.cycle >= config.n_cycles_max) return {true, StopReason::MaxCycles};
  return {};
}

double efficiency_score(std::size_t discoveries, std::size_t ccsdt_calls) {
  if (ccsdt_calls == 0) throw Error(ErrorKind::Undefined, "efficiency needs at least one CCSDT call");
  return static_cast<double>(discoveries) / static_cast<double>(ccsdt_calls);
}

double efficiency_score(const CampaignState& state) {
  return efficiency_score(state.discoveries(), state.budget.calls(Fidelity::CCSDT));
}

std::string history_table(const CampaignState& state) {
  std::ostringstream out;
  out << "cycle\tgenerated\tpassed_constraints\tpassed_filter\tselected\tvalidated\tstable\thit_rate\tmean_sigma\tbudget_spent\n";
  out.precision(10);
  for (const auto& h : state.history)
    out << h.cycle << '\t' << h.generated << '\t' << h.passed_constraints << '\t' << h.passed_filter << '\t'
        << h.selected << '\t' << h.validated << '\t' << h.stable << '\t' << h.hit_rate << '\t' << h.mean_sigma
        << '\t' << h.budget_spent << '\n';
  return out.str();
}

}  // namespace divergent
