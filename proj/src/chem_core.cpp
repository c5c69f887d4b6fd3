#include "divergent/chem_core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "divergent/embedded_data.hpp"
#include "text_util.hpp"

namespace divergent {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::EmptyComposition: return "EmptyComposition";
    case ErrorKind::NoOxidationStates: return "NoOxidationStates";
    case ErrorKind::NonFiniteCoordinate: return "NonFiniteCoordinate";
    case ErrorKind::DegenerateLattice: return "DegenerateLattice";
    case ErrorKind::InvalidStructure: return "InvalidStructure";
    case ErrorKind::UnknownElement: return "UnknownElement";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::EmptyStructure: return "EmptyStructure";
    case ErrorKind::MissingBVSParameter: return "MissingBVSParameter";
    case ErrorKind::NotIonic: return "NotIonic";
    case ErrorKind::IncompleteChemicalSystem: return "IncompleteChemicalSystem";
    case ErrorKind::MalformedPhaseSet: return "MalformedPhaseSet";
    case ErrorKind::NonFiniteEnergy: return "NonFiniteEnergy";
    case ErrorKind::StepOutOfRange: return "StepOutOfRange";
    case ErrorKind::DenoiserContractViolation: return "DenoiserContractViolation";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::BudgetExhausted: return "BudgetExhausted";
    case ErrorKind::InvalidCardinal: return "InvalidCardinal";
    case ErrorKind::RecordRejected: return "RecordRejected";
    case ErrorKind::ModelNotTrained: return "ModelNotTrained";
    case ErrorKind::DivergenceUndefined: return "DivergenceUndefined";
    case ErrorKind::DivisionBySigmaZero: return "DivisionBySigmaZero";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::Undefined: return "Undefined";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::DegenerateTest: return "DegenerateTest";
    case ErrorKind::InvalidPValue: return "InvalidPValue";
    case ErrorKind::InvalidParameters: return "InvalidParameters";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
    case ErrorKind::Io: return "Io";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

namespace detail {
std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------- elements

ElementTable::ElementTable(std::vector<Element> elements) : elements_(std::move(elements)) {
  int max_z = 0;
  for (const auto& e : elements_) {
    if (e.atomic_number <= 0)
      throw Error(ErrorKind::ParseError, "element " + e.symbol + " has non-positive Z");
    if (!(e.covalent_radius > 0.0))
      throw Error(ErrorKind::ParseError, "element " + e.symbol + " has non-positive radius");
    if (e.allowed && e.oxidation_states.empty())
      throw Error(ErrorKind::ParseError, "allowed element " + e.symbol + " has no oxidation states");
    max_z = std::max(max_z, e.atomic_number);
  }
  index_by_z_.assign(static_cast<std::size_t>(max_z) + 1, -1);
  for (std::size_t i = 0; i < elements_.size(); ++i) {
    auto& slot = index_by_z_[static_cast<std::size_t>(elements_[i].atomic_number)];
    if (slot >= 0) throw Error(ErrorKind::ParseError, "duplicate element " + elements_[i].symbol);
    slot = static_cast<int>(i);
  }
}

ElementTable ElementTable::parse(std::string_view text) {
  std::vector<Element> out;
  for (auto line : detail::lines(text)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 7)
      throw Error(ErrorKind::ParseError, "element row needs 7 fields: " + std::string(line));
    Element e;
    e.symbol = std::string(f[0]);
    e.atomic_number = static_cast<int>(detail::parse_int(f[1]));
    e.covalent_radius = detail::parse_double(f[2]);
    e.electronegativity = detail::parse_double(f[3]);
    for (auto s : detail::split(f[4], ','))
      e.oxidation_states.push_back(static_cast<int>(detail::parse_int(s)));
    if (f[5] == "s") e.block = Block::s;
    else if (f[5] == "p") e.block = Block::p;
    else if (f[5] == "d") e.block = Block::d;
    else if (f[5] == "f") e.block = Block::f;
    else throw Error(ErrorKind::ParseError, "bad block flag for " + e.symbol);
    e.allowed = detail::parse_int(f[6]) != 0;
    out.push_back(std::move(e));
  }
  return ElementTable(std::move(out));
}

ElementTable ElementTable::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const ElementTable& ElementTable::builtin() {
  static const ElementTable table = parse(embedded::elements_tsv());
  return table;
}

bool ElementTable::contains(int z) const noexcept {
  return z > 0 && static_cast<std::size_t>(z) < index_by_z_.size() &&
         index_by_z_[static_cast<std::size_t>(z)] >= 0;
}

const Element& ElementTable::by_z(int z) const {
  if (!contains(z)) throw Error(ErrorKind::UnknownElement, "Z=" + std::to_string(z));
  return elements_[static_cast<std::size_t>(index_by_z_[static_cast<std::size_t>(z)])];
}

const Element* ElementTable::find_symbol(std::string_view symbol) const noexcept {
  for (const auto& e : elements_)
    if (e.symbol == symbol) return &e;
  return nullptr;
}

const Element& ElementTable::by_symbol(std::string_view symbol) const {
  if (const auto* e = find_symbol(symbol)) return *e;
  throw Error(ErrorKind::UnknownElement, std::string(symbol));
}

std::size_t ElementTable::allowed_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(elements_.begin(), elements_.end(), [](const Element& e) { return e.allowed; }));
}

std::string ElementTable::content_hash() const {
  std::ostringstream os;
  for (const auto& e : elements_) {
    os << e.symbol << ' ' << e.atomic_number << ' ' << detail::format_double(e.covalent_radius)
       << ' ' << detail::format_double(e.electronegativity) << ' ';
    for (int s : e.oxidation_states) os << s << ',';
    os << ' ' << static_cast<int>(e.block) << ' ' << e.allowed << '\n';
  }
  return hex64(fnv1a(os.str()));
}

// ------------------------------------------------------------ compositions

Composition::Composition(std::vector<CompositionEntry> entries,
                         std::optional<std::vector<int>> oxidation_states) {
  if (oxidation_states && oxidation_states->size() != entries.size())
    throw Error(ErrorKind::InvalidStructure, "oxidation assignment length mismatch");
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return entries[a].z < entries[b].z; });
  std::vector<int> ox;
  for (std::size_t k : order) {
    const auto& e = entries[k];
    if (e.count <= 0)
      throw Error(ErrorKind::InvalidStructure, "non-positive count for Z=" + std::to_string(e.z));
    if (!entries_.empty() && entries_.back().z == e.z) {
      if (oxidation_states && ox.back() != (*oxidation_states)[k])
        throw Error(ErrorKind::InvalidStructure, "conflicting oxidation states for merged entry");
      entries_.back().count += e.count;
    } else {
      entries_.push_back(e);
      if (oxidation_states) ox.push_back((*oxidation_states)[k]);
    }
  }
  if (total_atoms() > kMaxAtomsPerCell)
    throw Error(ErrorKind::InvalidStructure,
                "composition exceeds " + std::to_string(kMaxAtomsPerCell) + " atoms");
  if (oxidation_states) oxidation_ = std::move(ox);
}

int Composition::total_atoms() const noexcept {
  int n = 0;
  for (const auto& e : entries_) n += e.count;
  return n;
}

std::vector<int> Composition::elements() const {
  std::vector<int> z;
  z.reserve(entries_.size());
  for (const auto& e : entries_) z.push_back(e.z);
  return z;
}

int Composition::count_of(int z) const noexcept {
  for (const auto& e : entries_)
    if (e.z == z) return e.count;
  return 0;
}

double Composition::fraction(int z) const noexcept {
  const int n = total_atoms();
  return n == 0 ? 0.0 : static_cast<double>(count_of(z)) / n;
}

std::string Composition::formula(const ElementTable& table) const {
  // electronegativity order puts cations first, as formulas are usually written
  std::vector<CompositionEntry> order(entries_);
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    return table.by_z(a.z).electronegativity < table.by_z(b.z).electronegativity;
  });
  std::string out;
  for (const auto& e : order) {
    out += table.by_z(e.z).symbol;
    if (e.count != 1) out += std::to_string(e.count);
  }
  return out;
}

Composition Composition::with_oxidation_states(std::vector<int> states) const {
  return Composition(entries_, std::move(states));
}

Composition Composition::parse_formula(std::string_view formula, const ElementTable& table) {
  std::vector<std::pair<int, long long>> raw;
  std::size_t i = 0;
  formula = detail::trim(formula);
  if (formula.empty()) throw Error(ErrorKind::EmptyComposition, "empty formula");
  while (i < formula.size()) {
    if (!std::isupper(static_cast<unsigned char>(formula[i])))
      throw Error(ErrorKind::ParseError, "bad formula '" + std::string(formula) + "'");
    std::size_t j = i + 1;
    while (j < formula.size() && std::islower(static_cast<unsigned char>(formula[j]))) ++j;
    const auto& el = table.by_symbol(formula.substr(i, j - i));
    std::size_t k = j;
    while (k < formula.size() && std::isdigit(static_cast<unsigned char>(formula[k]))) ++k;
    const long long count = k > j ? detail::parse_int(formula.substr(j, k - j)) : 1;
    if (count <= 0) throw Error(ErrorKind::ParseError, "zero count in '" + std::string(formula) + "'");
    raw.emplace_back(el.atomic_number, count);
    i = k;
  }
  long long g = 0;
  std::map<int, long long> merged;
  for (auto [z, n] : raw) merged[z] += n;
  long long total = 0;
  for (auto [z, n] : merged) {
    g = std::gcd(g, n);
    total += n;
  }
  const long long div = total > kMaxAtomsPerCell ? g : 1;
  std::vector<CompositionEntry> entries;
  for (auto [z, n] : merged) entries.push_back({z, static_cast<int>(n / div)});
  return Composition(std::move(entries));
}

Composition reduce_composition(const Composition& c) {
  if (c.empty()) throw Error(ErrorKind::EmptyComposition, "cannot reduce an empty composition");
  int g = 0;
  for (const auto& e : c.entries()) g = std::gcd(g, e.count);
  std::vector<CompositionEntry> entries(c.entries().begin(), c.entries().end());
  for (auto& e : entries) e.count /= g;
  return Composition(std::move(entries), c.oxidation_states());
}

double charge_balance(const Composition& c) {
  const auto& ox = c.oxidation_states();
  if (!ox) throw Error(ErrorKind::NoOxidationStates, "composition has no oxidation assignment");
  double q = 0.0;
  for (std::size_t k = 0; k < c.entries().size(); ++k)
    q += static_cast<double>(c.entries()[k].count) * (*ox)[k];
  return q;
}

Composition assign_oxidation_states(const Composition& c, const ElementTable& table) {
  if (c.empty()) throw Error(ErrorKind::EmptyComposition, "cannot assign states to nothing");
  const auto entries = c.entries();
  std::vector<const std::vector<int>*> options;
  for (const auto& e : entries) {
    const auto& states = table.by_z(e.z).oxidation_states;
    if (states.empty())
      throw Error(ErrorKind::NoOxidationStates, "no states listed for " + table.by_z(e.z).symbol);
    options.push_back(&states);
  }
  // Odometer over per-element choices in lexicographic order; only strictly
  // better assignments replace the incumbent.
  std::vector<std::size_t> idx(entries.size(), 0), best;
  long long best_abs = std::numeric_limits<long long>::max();
  while (true) {
    long long q = 0;
    for (std::size_t k = 0; k < entries.size(); ++k) q += entries[k].count * (*options[k])[idx[k]];
    if (std::llabs(q) < best_abs) {
      best_abs = std::llabs(q);
      best = idx;
      if (best_abs == 0) break;
    }
    std::size_t k = entries.size();
    while (k > 0) {
      --k;
      if (++idx[k] < options[k]->size()) break;
      idx[k] = 0;
      if (k == 0) {
        k = entries.size() + 1;
        break;
      }
    }
    if (k == entries.size() + 1) break;
  }
  std::vector<int> states;
  for (std::size_t k = 0; k < entries.size(); ++k) states.push_back((*options[k])[best[k]]);
  return c.with_oxidation_states(std::move(states));
}

// ------------------------------------------------------------- geometry

Vec3 wrap_fractional(const Vec3& x) {
  Vec3 out;
  for (int k = 0; k < 3; ++k) {
    if (!std::isfinite(x[k]))
      throw Error(ErrorKind::NonFiniteCoordinate, "fractional coordinate is not finite");
    double w = x[k] - std::floor(x[k]);
    // x slightly below an integer can round up to exactly 1.0
    if (w >= 1.0) w = 0.0;
    out[k] = w;
  }
  return out;
}

Vec3 wrap_difference(const Vec3& d) {
  Vec3 out;
  for (int k = 0; k < 3; ++k) {
    double w = d[k] - std::floor(d[k] + 0.5);
    if (w >= 0.5) w -= 1.0;
    out[k] = w;
  }
  return out;
}

Mat3 metric_matrix(const Metric6& g) {
  Mat3 m;
  m << g[0], g[3], g[4],
       g[3], g[1], g[5],
       g[4], g[5], g[2];
  return m;
}

Metric6 metric_from_matrix(const Mat3& m) {
  return {m(0, 0), m(1, 1), m(2, 2), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)),
          0.5 * (m(1, 2) + m(2, 1))};
}

namespace {
Eigen::Vector3d metric_eigenvalues(const Metric6& g) {
  for (double v : g)
    if (!std::isfinite(v)) throw Error(ErrorKind::DegenerateLattice, "metric is not finite");
  Eigen::SelfAdjointEigenSolver<Mat3> es(metric_matrix(g), Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}
}  // namespace

bool metric_is_positive_definite(const Metric6& g) {
  for (double v : g)
    if (!std::isfinite(v)) return false;
  const auto ev = metric_eigenvalues(g);
  const double scale = std::max(std::abs(ev[0]), std::abs(ev[2]));
  return ev[0] > 1e-12 * scale && ev[0] > 0.0;
}

double metric_condition_number(const Metric6& g) {
  const auto ev = metric_eigenvalues(g);
  if (!(ev[0] > 0.0)) return std::numeric_limits<double>::infinity();
  return ev[2] / ev[0];
}

Metric6 metric_from_parameters(double a, double b, double c, double alpha, double beta,
                               double gamma) {
  constexpr double deg = 3.14159265358979323846 / 180.0;
  return {a * a,
          b * b,
          c * c,
          a * b * std::cos(gamma * deg),
          a * c * std::cos(beta * deg),
          b * c * std::cos(alpha * deg)};
}

LatticeParameters lattice_parameters(const Metric6& g) {
  constexpr double rad = 180.0 / 3.14159265358979323846;
  const double a = std::sqrt(g[0]), b = std::sqrt(g[1]), c = std::sqrt(g[2]);
  return {a, b, c, std::acos(std::clamp(g[5] / (b * c), -1.0, 1.0)) * rad,
          std::acos(std::clamp(g[4] / (a * c), -1.0, 1.0)) * rad,
          std::acos(std::clamp(g[3] / (a * b), -1.0, 1.0)) * rad};
}

// ------------------------------------------------------------- structures

CrystalStructure::CrystalStructure(std::string id, Metric6 metric, std::vector<int> species,
                                   std::vector<Vec3> frac_coords)
    : id_(std::move(id)), metric_(metric), species_(std::move(species)),
      coords_(std::move(frac_coords)) {
  if (species_.size() != coords_.size())
    throw Error(ErrorKind::InvalidStructure, "species and coordinate counts differ");
  if (species_.size() > static_cast<std::size_t>(kMaxAtomsPerCell))
    throw Error(ErrorKind::InvalidStructure, "more than 20 atoms in cell");
  if (!metric_is_positive_definite(metric_))
    throw Error(ErrorKind::DegenerateLattice, "metric tensor is not positive definite");
  for (auto& x : coords_) x = wrap_fractional(x);
}

double CrystalStructure::volume() const { return std::sqrt(metric_matrix().determinant()); }

Mat3 CrystalStructure::lattice() const {
  Eigen::LLT<Mat3> llt(metric_matrix());
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::DegenerateLattice, "Cholesky factorisation failed");
  return llt.matrixL().transpose();
}

Composition CrystalStructure::composition() const {
  std::vector<CompositionEntry> entries;
  for (int z : species_) entries.push_back({z, 1});
  return Composition(std::move(entries));
}

CrystalStructure CrystalStructure::with_id(std::string id) const {
  CrystalStructure s = *this;
  s.id_ = std::move(id);
  return s;
}

CrystalStructure CrystalStructure::with_coords(std::vector<Vec3> coords) const {
  return CrystalStructure(id_, metric_, species_, std::move(coords));
}

CrystalStructure CrystalStructure::with_metric(const Metric6& metric) const {
  return CrystalStructure(id_, metric, species_, coords_);
}

std::vector<PairDistance> pairwise_min_image_distances(const CrystalStructure& s) {
  if (!metric_is_positive_definite(s.metric()))
    throw Error(ErrorKind::DegenerateLattice, "metric tensor is not positive definite");
  const Mat3 g = s.metric_matrix();
  const int range = metric_condition_number(s.metric()) > 10.0 ? 2 : 1;
  const auto coords = s.frac_coords();
  std::vector<PairDistance> out;
  out.reserve(s.size() * (s.size() + 1) / 2);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i; j < s.size(); ++j) {
      const Vec3 base = wrap_difference(coords[j] - coords[i]);
      double best = std::numeric_limits<double>::infinity();
      for (int a = -range; a <= range; ++a)
        for (int b = -range; b <= range; ++b)
          for (int c = -range; c <= range; ++c) {
            if (i == j && a == 0 && b == 0 && c == 0) continue;
            const Vec3 d = base + Vec3(a, b, c);
            best = std::min(best, d.dot(g * d));
          }
      out.push_back({i, j, std::sqrt(std::max(best, 0.0))});
    }
  }
  return out;
}

std::vector<Neighbor> neighbor_list(const CrystalStructure& s, double cutoff) {
  const Mat3 r = s.lattice();
  const Mat3 ginv = s.metric_matrix().inverse();
  std::array<int, 3> range{};
  for (int k = 0; k < 3; ++k)
    range[k] = static_cast<int>(std::ceil(cutoff * std::sqrt(ginv(k, k)) + 0.5));
  const double cut2 = cutoff * cutoff;
  const auto coords = s.frac_coords();
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      const Vec3 base = coords[j] - coords[i];
      const Vec3 shift = (base.array() + 0.5).floor().matrix();
      const Vec3 wrapped = base - shift;
      for (int a = -range[0]; a <= range[0]; ++a)
        for (int b = -range[1]; b <= range[1]; ++b)
          for (int c = -range[2]; c <= range[2]; ++c) {
            const Vec3 f = wrapped + Vec3(a, b, c);
            const Vec3 cart = r * f;
            const double d2 = cart.squaredNorm();
            if (d2 > cut2 || d2 < 1e-20) continue;
            Eigen::Vector3i image(a - static_cast<int>(shift[0]), b - static_cast<int>(shift[1]),
                                  c - static_cast<int>(shift[2]));
            out.push_back({i, j, image, cart, std::sqrt(d2)});
          }
    }
  }
  return out;
}

// ------------------------------------------------------------- fidelities

std::string_view to_string(Fidelity f) noexcept {
  switch (f) {
    case Fidelity::PBE: return "PBE";
    case Fidelity::SCAN: return "SCAN";
    case Fidelity::HSE06: return "HSE06";
    case Fidelity::CCSDT: return "CCSDT";
  }
  return "?";
}

Fidelity fidelity_from_string(std::string_view name) {
  for (auto f : kAllFidelities)
    if (to_string(f) == name) return f;
  if (name == "HSE") return Fidelity::HSE06;
  if (name == "CCSD(T)" || name == "CC") return Fidelity::CCSDT;
  throw Error(ErrorKind::ParseError, "unknown fidelity '" + std::string(name) + "'");
}

FidelityLadder default_fidelity_ladder() {
  return {{{Fidelity::PBE, 0.1, 1.0},
           {Fidelity::SCAN, 0.25, 2.0},
           {Fidelity::HSE06, 0.5, 5.0},
           {Fidelity::CCSDT, 1.0, 100.0}}};
}

void validate_ladder(const FidelityLadder& ladder) {
  for (int k = 0; k < kFidelityCount; ++k) {
    const auto& l = ladder[static_cast<std::size_t>(k)];
    if (static_cast<int>(l.level) != k)
      throw Error(ErrorKind::InvalidParameters, "fidelity ladder out of order");
    if (!(l.loss_weight >= 0.0) || !(l.oracle_cost > 0.0))
      throw Error(ErrorKind::InvalidParameters, "invalid weight or cost");
    if (k > 0 && !(l.loss_weight > ladder[static_cast<std::size_t>(k - 1)].loss_weight))
      throw Error(ErrorKind::InvalidParameters, "loss weights must increase with fidelity");
  }
}

void validate_record(const EnergyRecord& r, std::size_t atom_count) {
  if (!std::isfinite(r.energy_per_atom))
    throw Error(ErrorKind::NonFiniteEnergy, "record " + r.structure_id + " has non-finite energy");
  if (r.forces && r.forces->size() != atom_count)
    throw Error(ErrorKind::InvalidStructure, "force count does not match atom count");
}

// ---------------------------------------------------------- serialisation

std::string structure_to_line(const CrystalStructure& s, const ElementTable& table) {
  std::string out = s.id();
  out += '\t';
  for (std::size_t k = 0; k < 6; ++k) {
    if (k) out += ' ';
    out += detail::format_double(s.metric()[k]);
  }
  out += '\t';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += table.by_z(s.species()[i]).symbol;
  }
  out += '\t';
  bool first = true;
  for (const auto& x : s.frac_coords())
    for (int k = 0; k < 3; ++k) {
      if (!first) out += ' ';
      first = false;
      out += detail::format_double(x[k]);
    }
  return out;
}

CrystalStructure structure_from_line(std::string_view line, const ElementTable& table) {
  const auto fields = detail::split(line, '\t');
  if (fields.size() != 4) throw Error(ErrorKind::ParseError, "structure record needs 4 fields");
  const auto g = detail::split_ws(fields[1]);
  if (g.size() != 6) throw Error(ErrorKind::ParseError, "metric needs 6 components");
  Metric6 metric{};
  for (std::size_t k = 0; k < 6; ++k) metric[k] = detail::parse_double(g[k]);
  std::vector<int> species;
  if (!detail::trim(fields[2]).empty())
    for (auto sym : detail::split(fields[2], ','))
      species.push_back(table.by_symbol(detail::trim(sym)).atomic_number);
  const auto xs = detail::split_ws(fields[3]);
  if (xs.size() != 3 * species.size())
    throw Error(ErrorKind::ParseError, "coordinate count does not match species count");
  std::vector<Vec3> coords;
  for (std::size_t i = 0; i < species.size(); ++i)
    coords.emplace_back(detail::parse_double(xs[3 * i]), detail::parse_double(xs[3 * i + 1]),
                        detail::parse_double(xs[3 * i + 2]));
  return CrystalStructure(std::string(fields[0]), metric, std::move(species), std::move(coords));
}

}  // namespace divergent
