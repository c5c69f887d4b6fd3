#include "divergent/constraints.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "divergent/embedded_data.hpp"
#include "text_util.hpp"

namespace divergent {

BvsTable::BvsTable(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (const auto& e : entries_)
    if (!(e.r0 > 0.0)) throw Error(ErrorKind::ParseError, "R0 must be positive");
}

BvsTable BvsTable::parse(std::string_view text, const ElementTable& table) {
  std::vector<Entry> out;
  for (auto line : detail::lines(text)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 3) throw Error(ErrorKind::ParseError, "BVS row needs 3 fields");
    out.push_back({table.by_symbol(f[0]).atomic_number, table.by_symbol(f[1]).atomic_number,
                   detail::parse_double(f[2])});
  }
  return BvsTable(std::move(out));
}

const BvsTable& BvsTable::builtin() {
  static const BvsTable t = parse(embedded::bvs_params_tsv());
  return t;
}

std::optional<double> BvsTable::r0(int cation_z, int anion_z) const noexcept {
  for (const auto& e : entries_)
    if (e.cation_z == cation_z && e.anion_z == anion_z) return e.r0;
  return std::nullopt;
}

const ConstraintContext& ConstraintContext::builtin() {
  static const ConstraintContext ctx{};
  return ctx;
}

const ConstraintCheck* ConstraintReport::find(std::string_view name) const noexcept {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

namespace {

double radius(const ElementTable& t, int z) { return t.by_z(z).covalent_radius; }

double max_radius(const CrystalStructure& s, const ElementTable& t) {
  double r = 0.0;
  for (int z : s.species()) r = std::max(r, radius(t, z));
  return r;
}

// Cosine taper from 0.9 rc down to 0 at rc.
double smooth_weight(double d, double rc) {
  const double start = 0.9 * rc;
  if (d <= start) return 1.0;
  if (d >= rc) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (d - start) / (rc - start)));
}

double hard_weight(double d, double rc) { return d < rc ? 1.0 : 0.0; }

struct Bond {
  std::size_t i, j;
  double d;
  double w;
};

// Oppositely charged neighbour pairs (directed) with nonzero weight.
std::vector<Bond> ionic_bonds(const CrystalStructure& s, const std::vector<int>& ox,
                              const ConstraintContext& ctx, bool smooth) {
  const double scale = ctx.params.neighbor_scale;
  const double cutoff = scale * 2.0 * max_radius(s, ctx.elements);
  std::vector<Bond> out;
  for (const auto& n : neighbor_list(s, cutoff)) {
    if (ox[n.i] == 0 || ox[n.j] == 0 || (ox[n.i] > 0) == (ox[n.j] > 0)) continue;
    const double rc = scale * (radius(ctx.elements, s.species()[n.i]) +
                               radius(ctx.elements, s.species()[n.j]));
    const double w = smooth ? smooth_weight(n.distance, rc) : hard_weight(n.distance, rc);
    if (w > 0.0) out.push_back({n.i, n.j, n.distance, w});
  }
  return out;
}

bool is_ionic(const std::vector<int>& ox) {
  bool pos = false, neg = false;
  for (int q : ox) {
    pos = pos || q > 0;
    neg = neg || q < 0;
  }
  return pos && neg;
}

std::vector<double> pauling_deviations(const CrystalStructure& s, const std::vector<int>& ox,
                                       const std::vector<Bond>& bonds,
                                       std::vector<std::size_t>* cations = nullptr) {
  std::vector<double> cn(s.size(), 0.0);
  for (const auto& b : bonds) cn[b.i] += b.w;
  std::vector<double> received(s.size(), 0.0);
  for (const auto& b : bonds)
    if (ox[b.i] > 0) received[b.i] += b.w * std::abs(ox[b.j]) / std::max(cn[b.j], 1.0);
  std::vector<double> dev;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (ox[i] <= 0) continue;
    dev.push_back(std::abs(received[i] - ox[i]));
    if (cations) cations->push_back(i);
  }
  return dev;
}

struct BvsValues {
  std::vector<double> value;
  std::vector<bool> applicable;
};

BvsValues bvs_all(const CrystalStructure& s, const std::vector<int>& ox,
                  const std::vector<Bond>& bonds, const ConstraintContext& ctx) {
  BvsValues out{std::vector<double>(s.size(), 0.0), std::vector<bool>(s.size(), true)};
  for (std::size_t i = 0; i < s.size(); ++i)
    if (ox[i] == 0) out.applicable[i] = false;
  for (const auto& b : bonds) {
    const bool i_cation = ox[b.i] > 0;
    const int cz = s.species()[i_cation ? b.i : b.j];
    const int az = s.species()[i_cation ? b.j : b.i];
    const auto r0 = ctx.bvs.r0(cz, az);
    if (!r0) {
      out.applicable[b.i] = false;
      continue;
    }
    out.value[b.i] += b.w * std::exp((*r0 - b.d) / ctx.params.bvs_b);
  }
  return out;
}

double rule3_penalty(const CrystalStructure& s, const std::vector<int>& ox,
                     const std::vector<Bond>& bonds, double weight) {
  if (weight == 0.0) return 0.0;
  const std::size_t n = s.size();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& b : bonds)
    if (ox[b.i] > 0) w(static_cast<Eigen::Index>(b.i), static_cast<Eigen::Index>(b.j)) += b.w;
  double p = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i + 1; k < n; ++k) {
      if (ox[i] <= 0 || ox[k] <= 0) continue;
      const double shared = w.row(static_cast<Eigen::Index>(i)).dot(w.row(static_cast<Eigen::Index>(k)));
      p += std::pow(std::max(0.0, shared - 1.0), 2);
    }
  return weight * p;
}

double hinge2(double excess) { return excess > 0.0 ? excess * excess : 0.0; }

}  // namespace

DistanceCheck check_min_distances(const CrystalStructure& s, double alpha, const ElementTable& table) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw Error(ErrorKind::InvalidParameters, "alpha must lie in (0, 1]");
  DistanceCheck out{true, std::numeric_limits<double>::infinity()};
  for (const auto& p : pairwise_min_image_distances(s)) {
    const double rsum = radius(table, s.species()[p.i]) + radius(table, s.species()[p.j]);
    const double ratio = p.distance / rsum;
    out.worst_ratio = std::min(out.worst_ratio, ratio);
    // inclusive boundary, with slack for rounding in the metric product
    if (ratio < alpha * (1.0 - 1e-12)) out.pass = false;
  }
  return out;
}

std::vector<int> atom_oxidation_states(const CrystalStructure& s, const ElementTable& table) {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "structure has no atoms");
  const auto comp = assign_oxidation_states(s.composition(), table);
  std::vector<int> out;
  out.reserve(s.size());
  for (int z : s.species()) {
    const auto entries = comp.entries();
    for (std::size_t k = 0; k < entries.size(); ++k)
      if (entries[k].z == z) out.push_back((*comp.oxidation_states())[k]);
  }
  return out;
}

double structure_net_charge(const CrystalStructure& s, const ElementTable& table) {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "structure has no atoms");
  return charge_balance(reduce_composition(assign_oxidation_states(s.composition(), table)));
}

std::vector<CoordinationEnvironment> coordination_environments(const CrystalStructure& s,
                                                               const std::vector<int>& ox,
                                                               const ConstraintContext& ctx) {
  const auto bonds = ionic_bonds(s, ox, ctx, false);
  std::vector<CoordinationEnvironment> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (ox[i] <= 0) continue;
    CoordinationEnvironment env;
    env.center = i;
    for (const auto& b : bonds)
      if (b.i == i) {
        env.neighbors.push_back(b.j);
        env.distances.push_back(b.d);
      }
    env.coordination_number = static_cast<int>(env.neighbors.size());
    if (env.coordination_number > 0)
      env.bond_valences.assign(env.neighbors.size(),
                               static_cast<double>(ox[i]) / env.coordination_number);
    out.push_back(std::move(env));
  }
  return out;
}

PaulingResult pauling_valence_check(const CrystalStructure& s, const std::vector<int>& ox,
                                    const ConstraintContext& ctx) {
  PaulingResult out;
  out.check.name = "pauling_valence";
  out.check.hard = true;
  if (!is_ionic(ox)) {
    out.check.applicable = false;
    return out;
  }
  out.deviations = pauling_deviations(s, ox, ionic_bonds(s, ox, ctx, false));
  double worst = 0.0;
  for (double d : out.deviations) worst = std::max(worst, d);
  out.check.magnitude = worst;
  out.check.passed = worst < ctx.params.pauling_tolerance;
  return out;
}

PaulingResult pauling_valence_check(const CrystalStructure& s, const ConstraintContext& ctx) {
  return pauling_valence_check(s, atom_oxidation_states(s, ctx.elements), ctx);
}

double bond_valence_sum(const CrystalStructure& s, std::size_t atom, const std::vector<int>& ox,
                        const ConstraintContext& ctx) {
  if (atom >= s.size()) throw Error(ErrorKind::InvalidParameters, "atom index out of range");
  double sum = 0.0;
  for (const auto& b : ionic_bonds(s, ox, ctx, false)) {
    if (b.i != atom) continue;
    const bool cation = ox[b.i] > 0;
    const int cz = s.species()[cation ? b.i : b.j];
    const int az = s.species()[cation ? b.j : b.i];
    const auto r0 = ctx.bvs.r0(cz, az);
    if (!r0)
      throw Error(ErrorKind::MissingBVSParameter, "no R0 for " + ctx.elements.by_z(cz).symbol + "-" +
                                                      ctx.elements.by_z(az).symbol);
    sum += std::exp((*r0 - b.d) / ctx.params.bvs_b);
  }
  return sum;
}

double bond_valence_sum(const CrystalStructure& s, std::size_t atom, const ConstraintContext& ctx) {
  return bond_valence_sum(s, atom, atom_oxidation_states(s, ctx.elements), ctx);
}

ConstraintReport validate(const CrystalStructure& s, Stage stage, const ConstraintContext& ctx) {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "structure has no atoms");
  const auto& p = ctx.params;
  const bool gen = stage == Stage::Generation;
  ConstraintReport r;
  r.structure_id = s.id();

  const double alpha = gen ? p.alpha_generation : p.alpha_validation;
  const auto dist = check_min_distances(s, alpha, ctx.elements);
  r.checks.push_back({"min_distance", true, true, dist.pass, std::max(0.0, alpha - dist.worst_ratio)});

  const double tol = gen ? p.charge_tol_generation : p.charge_tol_validation;
  const double q = std::abs(structure_net_charge(s, ctx.elements));
  r.checks.push_back({"charge_balance", true, true, q <= tol, q});

  const auto ox = atom_oxidation_states(s, ctx.elements);
  const bool ionic = is_ionic(ox);
  // Soft checks at generation use the tapered neighbour weights so the
  // penalty is continuous and vanishes exactly when they pass.
  const auto bonds = ionic ? ionic_bonds(s, ox, ctx, gen) : std::vector<Bond>{};

  ConstraintCheck pauling{"pauling_valence", !gen, ionic, true, 0.0};
  if (ionic) {
    for (double d : pauling_deviations(s, ox, bonds)) {
      pauling.magnitude = std::max(pauling.magnitude, d);
      if (gen) r.soft_penalty += hinge2(d - p.pauling_tolerance);
    }
    pauling.passed = gen ? pauling.magnitude <= p.pauling_tolerance
                         : pauling.magnitude < p.pauling_tolerance;
  }
  r.checks.push_back(pauling);

  ConstraintCheck bvs{"bond_valence_sum", !gen, false, true, 0.0};
  if (ionic) {
    const auto v = bvs_all(s, ox, bonds, ctx);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!v.applicable[i]) continue;
      bvs.applicable = true;
      const double dev = std::abs(v.value[i] - std::abs(ox[i]));
      bvs.magnitude = std::max(bvs.magnitude, dev);
      if (gen) r.soft_penalty += hinge2(dev - p.bvs_tolerance);
    }
    bvs.passed = gen ? bvs.magnitude <= p.bvs_tolerance : bvs.magnitude < p.bvs_tolerance;
  }
  r.checks.push_back(bvs);

  const double r3 = ionic ? rule3_penalty(s, ox, ionic_bonds(s, ox, ctx, true), p.rule3_weight) : 0.0;
  r.checks.push_back({"polyhedron_sharing", false, ionic && p.rule3_weight > 0.0, r3 == 0.0, r3});
  r.soft_penalty += r3;

  for (const auto& c : r.checks)
    if (c.hard && c.applicable && !c.passed) r.overall_pass = false;
  return r;
}

double distance_penalty(const CrystalStructure& s, double alpha, const ElementTable& table,
                        std::vector<Vec3>* grad_frac) {
  const Mat3 r = s.lattice();
  const Mat3 rt = r.transpose();
  const Mat3 ginv = s.metric_matrix().inverse();
  const double cutoff = alpha * 2.0 * max_radius(s, table);
  const double cut2 = cutoff * cutoff;
  if (grad_frac) grad_frac->assign(s.size(), Vec3::Zero());
  // translations that can bring a wrapped difference within the cutoff
  std::vector<Vec3> shifts;
  std::array<int, 3> range{};
  for (int k = 0; k < 3; ++k) range[k] = static_cast<int>(std::ceil(cutoff * std::sqrt(ginv(k, k)) + 0.5));
  for (int a = -range[0]; a <= range[0]; ++a)
    for (int b = -range[1]; b <= range[1]; ++b)
      for (int c = -range[2]; c <= range[2]; ++c) shifts.push_back(r * Vec3(a, b, c));
  std::vector<double> rad(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) rad[i] = radius(table, s.species()[i]);
  const auto coords = s.frac_coords();
  double p = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i; j < s.size(); ++j) {
      const double thr = alpha * (rad[i] + rad[j]);
      const Vec3 base = r * wrap_difference(coords[j] - coords[i]);
      for (const auto& t : shifts) {
        const Vec3 d = base + t;
        const double d2 = d.squaredNorm();
        if (d2 > cut2 || d2 < 1e-20) continue;
        const double dist = std::sqrt(d2);
        const double h = thr - dist;
        if (h <= 0.0) continue;
        if (i == j) {
          p += 0.5 * h * h;  // self images come in +-t pairs
          continue;
        }
        p += h * h;
        if (grad_frac) {
          const Vec3 gi = 2.0 * h * (rt * d) / dist;
          (*grad_frac)[i] += gi;
          (*grad_frac)[j] -= gi;
        }
      }
    }
  }
  return p;
}

std::optional<CrystalStructure> project_min_distance(const CrystalStructure& s, double alpha,
                                                     int max_iters, double step,
                                                     const ElementTable& table) {
  if (check_min_distances(s, alpha, table).pass) return s;
  const Mat3 ginv = s.metric_matrix().inverse();
  // aim slightly inside the feasible set so rounding cannot undo the last step
  const double target = std::min(1.0, alpha * 1.01);
  CrystalStructure cur = s;
  std::vector<Vec3> grad;
  for (int it = 0; it < max_iters; ++it) {
    if (distance_penalty(cur, target, table, &grad) == 0.0) break;
    std::vector<Vec3> x(cur.frac_coords().begin(), cur.frac_coords().end());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= step * (ginv * grad[i]);
    cur = cur.with_coords(std::move(x));
    if (check_min_distances(cur, alpha, table).pass) return cur;
  }
  if (check_min_distances(cur, alpha, table).pass) return cur;
  return std::nullopt;
}

}  // namespace divergent
