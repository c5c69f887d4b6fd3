#include "divergent/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <tuple>
#include <random>
#include <sstream>

#include "text_util.hpp"

namespace divergent {

namespace {

double unit_hash(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t words[3] = {seed, a, b};
  const std::uint64_t h = fnv1a(std::string_view(reinterpret_cast<const char*>(words), sizeof(words)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct Shifted {
  double eps, r0, rc, phi_c, dphi_c;

  static Shifted make(const PairParameters& p, double eps, double cutoff_factor) {
    Shifted s{eps, p.r0, cutoff_factor * p.r0, 0.0, 0.0};
    s.phi_c = s.raw(s.rc);
    s.dphi_c = s.raw_d(s.rc);
    return s;
  }
  double raw(double r) const {
    const double q6 = std::pow(r0 / r, 6);
    return eps * (q6 * q6 - 2.0 * q6);
  }
  double raw_d(double r) const {
    const double q6 = std::pow(r0 / r, 6);
    return 12.0 * eps / r * (q6 - q6 * q6);
  }
  double value(double r) const { return raw(r) - phi_c - (r - rc) * dphi_c; }
  double deriv(double r) const { return raw_d(r) - dphi_c; }
};

}  // namespace

// ------------------------------------------------------------ landscape

SyntheticLandscape::SyntheticLandscape(LandscapeConfig config, const ElementTable& table)
    : config_(config), table_(table) {
  for (int f = 0; f < kFidelityCount; ++f) {
    if (!(config_.bias[f] >= 0.0) || !(config_.noise_sigma[f] >= 0.0))
      throw Error(ErrorKind::InvalidConfig, "biases and noise levels must be non-negative");
  }
  if (!(config_.cutoff_factor > 1.0)) throw Error(ErrorKind::InvalidConfig, "cutoff factor must exceed 1");
}

PairParameters SyntheticLandscape::pair(int zi, int zj) const {
  const auto& a = table_.by_z(zi);
  const auto& b = table_.by_z(zj);
  const int lo = std::min(zi, zj), hi = std::max(zi, zj);
  const double u = 2.0 * unit_hash(config_.seed, static_cast<std::uint64_t>(lo),
                                   static_cast<std::uint64_t>(hi)) - 1.0;
  const double jitter = 1.0 + config_.jitter * u;
  if (zi == zj) return {config_.like_depth * jitter, config_.like_r0_factor * 2.0 * a.covalent_radius};
  const double dchi = std::abs(a.electronegativity - b.electronegativity);
  return {config_.unlike_depth * (1.0 + dchi) * jitter, a.covalent_radius + b.covalent_radius};
}

double SyntheticLandscape::correlation_strength(int z) const {
  if (!table_.by_z(z).correlation_prone()) return 0.0;
  const double u = unit_hash(config_.seed ^ 0x9e3779b97f4a7c15ULL, static_cast<std::uint64_t>(z), 17);
  // independent draws for the sign and the strength in [0.5, 1.5]
  const double sign = unit_hash(config_.seed, static_cast<std::uint64_t>(z), 91) < 0.5 ? -1.0 : 1.0;
  return sign * (0.5 + u);
}

double SyntheticLandscape::well_depth_factor(Fidelity f, int zi, int zj) const {
  if (zi == zj) return 1.0;
  const double si = correlation_strength(zi), sj = correlation_strength(zj);
  double s = 0.0;
  if (si != 0.0 && sj != 0.0) s = 0.5 * (si + sj);
  else s = si + sj;
  return 1.0 - config_.bias[static_cast<int>(f)] * s;
}

bool SyntheticLandscape::correlation_flagged(const Composition& c) const {
  for (const auto& e : c.entries())
    if (table_.by_z(e.z).correlation_prone()) return true;
  return false;
}

SyntheticLandscape::Evaluation SyntheticLandscape::evaluate_noise_free(const CrystalStructure& s,
                                                                       Fidelity f) const {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "cannot evaluate an empty structure");
  const std::size_t n = s.size();
  const Mat3 r = s.lattice();
  const Mat3 rinv = r.inverse();
  std::vector<Vec3> cart(n);
  for (std::size_t i = 0; i < n; ++i) cart[i] = r * s.frac_coords()[i];

  Evaluation out;
  out.forces.assign(n, Vec3::Zero());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const int zi = s.species()[i], zj = s.species()[j];
      const PairParameters p = pair(zi, zj);
      const Shifted phi = Shifted::make(p, p.well_depth * well_depth_factor(f, zi, zj),
                                        config_.cutoff_factor);
      int nmax[3];
      for (int k = 0; k < 3; ++k)
        nmax[k] = static_cast<int>(std::ceil(phi.rc * rinv.row(k).norm())) + 1;
      const Vec3 base = cart[j] - cart[i];
      for (int a = -nmax[0]; a <= nmax[0]; ++a) {
        for (int b = -nmax[1]; b <= nmax[1]; ++b) {
          for (int c = -nmax[2]; c <= nmax[2]; ++c) {
            if (i == j && a == 0 && b == 0 && c == 0) continue;
            const Vec3 d = base + r * Vec3(a, b, c);
            const double dist = d.norm();
            if (dist >= phi.rc) continue;
            if (i == j) {
              total += 0.5 * phi.value(dist);
              continue;
            }
            total += phi.value(dist);
            const Vec3 g = phi.deriv(dist) / dist * d;  // dphi/dr_j
            out.forces[j] -= g;
            out.forces[i] += g;
          }
        }
      }
    }
  }
  out.energy_per_atom = total / static_cast<double>(n);
  return out;
}

double SyntheticLandscape::noise(const CrystalStructure& s, Fidelity f) const {
  const double sigma = noise_sigma(f);
  if (sigma == 0.0) return 0.0;
  std::string bytes;
  bytes.append(reinterpret_cast<const char*>(s.metric().data()), sizeof(double) * 6);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int z = s.species()[i];
    bytes.append(reinterpret_cast<const char*>(&z), sizeof z);
    bytes.append(reinterpret_cast<const char*>(s.frac_coords()[i].data()), sizeof(double) * 3);
  }
  const std::uint64_t h = fnv1a(bytes, config_.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(f) + 1);
  std::mt19937_64 rng(h);
  std::normal_distribution<double> n(0.0, sigma);
  return n(rng);
}

// --------------------------------------------------------------- budget

OracleBudget::OracleBudget(double total, std::array<double, kFidelityCount> costs)
    : total_(total), costs_(costs) {
  if (!(total >= 0.0) || !std::isfinite(total))
    throw Error(ErrorKind::InvalidConfig, "budget must be finite and non-negative");
  for (double c : costs)
    if (!(c > 0.0)) throw Error(ErrorKind::InvalidConfig, "fidelity costs must be positive");
}

OracleBudget::OracleBudget(const OracleBudget& other) {
  std::lock_guard lock(other.mu_);
  total_ = other.total_;
  spent_ = other.spent_;
  costs_ = other.costs_;
  calls_ = other.calls_;
}

OracleBudget& OracleBudget::operator=(const OracleBudget& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(mu_, other.mu_);
  total_ = other.total_;
  spent_ = other.spent_;
  costs_ = other.costs_;
  calls_ = other.calls_;
  return *this;
}

OracleBudget OracleBudget::restore(double total, std::array<double, kFidelityCount> costs,
                                   std::array<std::size_t, kFidelityCount> calls, double spent) {
  OracleBudget b(total, costs);
  b.calls_ = calls;
  b.spent_ = spent;
  if (!b.audit()) throw Error(ErrorKind::InvariantViolation, "restored ledger does not audit");
  return b;
}

std::array<double, kFidelityCount> OracleBudget::default_costs() {
  std::array<double, kFidelityCount> c{};
  for (const auto& l : default_fidelity_ladder()) c[static_cast<int>(l.level)] = l.oracle_cost;
  return c;
}

double OracleBudget::total() const {
  std::lock_guard lock(mu_);
  return total_;
}

double OracleBudget::spent() const {
  std::lock_guard lock(mu_);
  return spent_;
}

double OracleBudget::remaining() const {
  std::lock_guard lock(mu_);
  return total_ - spent_;
}

bool OracleBudget::can_afford(Fidelity f) const {
  std::lock_guard lock(mu_);
  return spent_ + costs_[static_cast<int>(f)] <= total_;
}

std::size_t OracleBudget::calls(Fidelity f) const {
  std::lock_guard lock(mu_);
  return calls_[static_cast<int>(f)];
}

void OracleBudget::debit(Fidelity f) {
  std::lock_guard lock(mu_);
  const double c = costs_[static_cast<int>(f)];
  if (spent_ + c > total_)
    throw Error(ErrorKind::BudgetExhausted, std::string(to_string(f)) + " call costs " +
                                                std::to_string(c) + ", remaining " +
                                                std::to_string(total_ - spent_));
  spent_ += c;
  ++calls_[static_cast<int>(f)];
}

void OracleBudget::refund(Fidelity f) {
  std::lock_guard lock(mu_);
  auto& n = calls_[static_cast<int>(f)];
  if (n == 0) throw Error(ErrorKind::InvalidParameters, "refund without a matching debit");
  --n;
  spent_ -= costs_[static_cast<int>(f)];
}

bool OracleBudget::audit() const {
  std::lock_guard lock(mu_);
  double sum = 0.0;
  for (int f = 0; f < kFidelityCount; ++f) sum += static_cast<double>(calls_[f]) * costs_[f];
  return std::abs(sum - spent_) <= 1e-9 * std::max(1.0, spent_) && spent_ <= total_;
}

EnergyRecord evaluate(const CrystalStructure& s, Fidelity fidelity,
                      const SyntheticLandscape& landscape, OracleBudget& budget) {
  budget.debit(fidelity);
  try {
    auto ev = landscape.evaluate_noise_free(s, fidelity);
    EnergyRecord rec;
    rec.structure_id = s.id();
    rec.fidelity = fidelity;
    rec.energy_per_atom = ev.energy_per_atom + landscape.noise(s, fidelity);
    rec.forces = std::move(ev.forces);
    rec.provenance = "synthetic:" + std::string(to_string(fidelity)) + ":seed" +
                     std::to_string(landscape.config().seed);
    if (!std::isfinite(rec.energy_per_atom))
      throw Error(ErrorKind::NonFiniteEnergy, "non-finite energy for " + s.id());
    return rec;
  } catch (...) {
    budget.refund(fidelity);
    throw;
  }
}

double cbs_extrapolate(double e_x, double e_xm1, int x) {
  if (x < 3) throw Error(ErrorKind::InvalidCardinal, "cardinal number must be >= 3, got " + std::to_string(x));
  const double ratio = static_cast<double>(x) / static_cast<double>(x - 1);
  return e_x + (e_x - e_xm1) / (std::pow(ratio, -3.0) - 1.0);
}

// ----------------------------------------------------------- references

CrystalStructure relax_volume(const CrystalStructure& s, const SyntheticLandscape& landscape,
                              Fidelity f, double lo, double hi) {
  auto scaled = [&](double k) {
    Metric6 g = s.metric();
    for (double& v : g) v *= k * k;
    return s.with_metric(g);
  };
  auto energy = [&](double k) { return landscape.evaluate_noise_free(scaled(k), f).energy_per_atom; };
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = energy(c), fd = energy(d);
  for (int it = 0; it < 60 && b - a > 1e-7; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = energy(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = energy(d);
    }
  }
  return scaled(0.5 * (a + b));
}

CrystalStructure elemental_ground_state(int z, const SyntheticLandscape& landscape, Fidelity f) {
  const double d = landscape.pair(z, z).r0;
  const double a = d * std::sqrt(2.0);  // conventional fcc constant
  const double p = a / std::sqrt(2.0);
  const CrystalStructure fcc("ref-" + landscape.table().by_z(z).symbol,
                             metric_from_parameters(p, p, p, 60, 60, 60), {z}, {Vec3::Zero()});
  return relax_volume(fcc, landscape, f, 0.85, 1.15);
}

ElementalReferences ElementalReferences::evaluate(const std::vector<int>& elements,
                                                  const SyntheticLandscape& landscape,
                                                  OracleBudget& budget) {
  ElementalReferences out;
  for (int z : elements) {
    if (out.mu_.count(z)) continue;
    auto gs = elemental_ground_state(z, landscape, Fidelity::CCSDT);
    const auto rec = divergent::evaluate(gs, Fidelity::CCSDT, landscape, budget);
    out.mu_[z] = rec.energy_per_atom;
    out.structures_.emplace(z, std::move(gs));
  }
  return out;
}

double ElementalReferences::mu(int z) const {
  const auto it = mu_.find(z);
  if (it == mu_.end())
    throw Error(ErrorKind::IncompleteChemicalSystem, "no elemental reference for Z=" + std::to_string(z));
  return it->second;
}

double ElementalReferences::formation_energy(const Composition& c, double energy_per_atom) const {
  if (c.empty()) throw Error(ErrorKind::EmptyComposition, "formation energy of an empty composition");
  double ref = 0.0;
  for (const auto& e : c.entries()) ref += c.fraction(e.z) * mu(e.z);
  return energy_per_atom - ref;
}

// ------------------------------------------------------------ ingestion

namespace {

bool parse_flag(std::string_view s) {
  s = detail::trim(s);
  if (s == "1" || s == "true" || s == "exp" || s == "experimental" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "comp" || s == "computational" || s == "no") return false;
  throw Error(ErrorKind::ParseError, "bad experimental flag '" + std::string(s) + "'");
}

std::string raw_provenance(const MaterialRecord& r) {
  return r.source + ":" + r.formula + ":" + detail::format_double(r.a) + "/" +
         detail::format_double(r.b) + "/" + detail::format_double(r.c);
}

double max_relative_deviation(const MaterialRecord& x, const MaterialRecord& ref) {
  return std::max({std::abs(x.a - ref.a) / ref.a, std::abs(x.b - ref.b) / ref.b,
                   std::abs(x.c - ref.c) / ref.c});
}

bool higher_priority(const MaterialRecord& x, const MaterialRecord& y) {
  if (x.experimental != y.experimental) return x.experimental;
  if (x.energy != y.energy) return x.energy < y.energy;
  if (x.id != y.id) return !x.id.empty() && (y.id.empty() || x.id < y.id);
  return std::tie(x.source, x.a, x.b, x.c) < std::tie(y.source, y.a, y.b, y.c);
}

int id_number(const std::string& id) {
  const std::string prefix = "MP-OQMD-";
  if (id.rfind(prefix, 0) != 0) return 0;
  try {
    return static_cast<int>(detail::parse_int(std::string_view(id).substr(prefix.size())));
  } catch (const Error&) {
    return 0;
  }
}

}  // namespace

MaterialRecord parse_material_record(std::string_view line) {
  const auto f = detail::split(detail::trim(line), '\t');
  MaterialRecord r;
  std::size_t k = 0;
  if (f.size() == 9) {
    r.id = std::string(detail::trim(f[k++]));
  } else if (f.size() != 7) {
    throw Error(ErrorKind::RecordRejected, "expected 7 or 9 tab-separated fields, got " + std::to_string(f.size()));
  }
  try {
    r.source = std::string(detail::trim(f[k++]));
    r.formula = std::string(detail::trim(f[k++]));
    r.a = detail::parse_double(f[k++]);
    r.b = detail::parse_double(f[k++]);
    r.c = detail::parse_double(f[k++]);
    r.energy = detail::parse_double(f[k++]);
    r.experimental = parse_flag(f[k++]);
  } catch (const Error& e) {
    throw Error(ErrorKind::RecordRejected, e.what());
  }
  if (r.source.empty() || r.formula.empty()) throw Error(ErrorKind::RecordRejected, "empty source or formula");
  if (!(r.a > 0 && r.b > 0 && r.c > 0) || !std::isfinite(r.a + r.b + r.c))
    throw Error(ErrorKind::RecordRejected, "lattice parameters must be positive");
  if (!std::isfinite(r.energy)) throw Error(ErrorKind::RecordRejected, "non-finite energy");
  if (f.size() == 9) {
    for (auto p : detail::split(f[8], ';'))
      if (!detail::trim(p).empty()) r.provenance.emplace_back(detail::trim(p));
  }
  return r;
}

std::string material_record_to_line(const MaterialRecord& r) {
  std::ostringstream os;
  if (!r.id.empty()) os << r.id << '\t';
  os << r.source << '\t' << r.formula << '\t' << detail::format_double(r.a) << '\t'
     << detail::format_double(r.b) << '\t' << detail::format_double(r.c) << '\t'
     << detail::format_double(r.energy) << '\t' << (r.experimental ? 1 : 0);
  if (!r.id.empty()) {
    os << '\t';
    for (std::size_t k = 0; k < r.provenance.size(); ++k) os << (k ? ";" : "") << r.provenance[k];
  }
  return os.str();
}

IngestResult ingest_and_deduplicate(const std::vector<MaterialRecord>& records, double lattice_tol,
                                    double cluster_tol) {
  IngestResult out;
  std::map<std::string, std::vector<MaterialRecord>> by_formula;
  for (const auto& raw : records) {
    MaterialRecord r = raw;
    try {
      r.formula = reduce_composition(Composition::parse_formula(raw.formula)).formula();
    } catch (const Error& e) {
      out.rejected.push_back(raw.source + ":" + raw.formula + ": " + e.what());
      continue;
    }
    if (r.provenance.empty()) r.provenance.push_back(raw_provenance(raw));
    by_formula[r.formula].push_back(std::move(r));
  }

  // Clusters are polymorph groups: members lie within cluster_tol of the
  // representative in every lattice parameter. Within a cluster, entries
  // beyond lattice_tol are conflicting measurements and get discarded.
  int next_id = 0;
  for (const auto& r : records) next_id = std::max(next_id, id_number(r.id));

  std::vector<MaterialRecord> reps_all;
  for (auto& [formula, group] : by_formula) {
    std::sort(group.begin(), group.end(), higher_priority);
    std::vector<MaterialRecord> reps;
    for (auto& r : group) {
      MaterialRecord* home = nullptr;
      double best = cluster_tol;
      for (auto& rep : reps) {
        const double dev = max_relative_deviation(r, rep);
        if (dev <= best) {
          best = dev;
          home = &rep;
        }
      }
      if (!home) {
        reps.push_back(r);
        continue;
      }
      if (best > lattice_tol) {
        out.discarded.push_back(r);
        continue;
      }
      home->provenance.insert(home->provenance.end(), r.provenance.begin(), r.provenance.end());
    }
    reps_all.insert(reps_all.end(), reps.begin(), reps.end());
  }
  for (auto& r : reps_all) {
    if (r.id.empty() || id_number(r.id) == 0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "MP-OQMD-%04d", ++next_id);
      r.id = buf;
    }
  }
  std::sort(reps_all.begin(), reps_all.end(),
            [](const MaterialRecord& x, const MaterialRecord& y) { return id_number(x.id) < id_number(y.id); });
  out.entries = std::move(reps_all);
  return out;
}

IngestResult ingest_lines(std::string_view text, double lattice_tol, double cluster_tol) {
  std::vector<MaterialRecord> records;
  std::vector<std::string> rejected;
  std::size_t lineno = 0;
  for (auto line : detail::lines(text)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    try {
      records.push_back(parse_material_record(t));
    } catch (const Error& e) {
      rejected.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  auto out = ingest_and_deduplicate(records, lattice_tol, cluster_tol);
  out.rejected.insert(out.rejected.begin(), rejected.begin(), rejected.end());
  return out;
}

}  // namespace divergent
