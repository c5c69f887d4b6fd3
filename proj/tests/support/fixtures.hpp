#pragma once

// Constructed crystal fixtures shared by unit and acceptance tests.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "divergent/chem_core.hpp"
#include "divergent/constraints.hpp"

namespace fixtures {

using divergent::CrystalStructure;
using divergent::ElementTable;
using divergent::Metric6;
using divergent::Vec3;

inline int z_of(const std::string& sym) { return ElementTable::builtin().by_symbol(sym).atomic_number; }

enum class Prototype { RocksaltConventional, RocksaltPrimitive, CsCl, Zincblende };

inline int coordination(Prototype p) {
  switch (p) {
    case Prototype::CsCl: return 8;
    case Prototype::Zincblende: return 4;
    default: return 6;
  }
}

/// Bond length at which each bond carries valence ox / CN.
inline double bvs_bond_length(double r0, int ox, int cn, double b = 0.37) {
  return r0 + b * std::log(static_cast<double>(cn) / ox);
}

/// Ideal binary AB cell with nearest-neighbour distance d.
inline CrystalStructure binary(const std::string& id, int cz, int az, Prototype p, double d) {
  std::vector<int> sp;
  std::vector<Vec3> x;
  Metric6 g{};
  const std::vector<Vec3> fcc = {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0), Vec3(0.5, 0, 0.5), Vec3(0, 0.5, 0.5)};
  switch (p) {
    case Prototype::RocksaltConventional: {
      g = divergent::metric_from_parameters(2 * d, 2 * d, 2 * d);
      for (const auto& f : fcc) {
        sp.push_back(cz);
        x.push_back(f);
      }
      for (const auto& f : fcc) {
        sp.push_back(az);
        x.push_back(f + Vec3(0.5, 0, 0));
      }
      break;
    }
    case Prototype::RocksaltPrimitive: {
      const double a = 2 * d / std::sqrt(2.0);
      g = divergent::metric_from_parameters(a, a, a, 60, 60, 60);
      sp = {cz, az};
      x = {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)};
      break;
    }
    case Prototype::CsCl: {
      const double a = 2 * d / std::sqrt(3.0);
      g = divergent::metric_from_parameters(a, a, a);
      sp = {cz, az};
      x = {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)};
      break;
    }
    case Prototype::Zincblende: {
      const double a = 4 * d / std::sqrt(3.0);
      g = divergent::metric_from_parameters(a, a, a);
      for (const auto& f : fcc) {
        sp.push_back(cz);
        x.push_back(f);
      }
      for (const auto& f : fcc) {
        sp.push_back(az);
        x.push_back(f + Vec3(0.25, 0.25, 0.25));
      }
      break;
    }
  }
  return CrystalStructure(id, g, sp, x);
}

struct Chemistry {
  std::string cation, anion;
  int ox;
  Prototype proto;
};

inline const std::vector<Chemistry>& corpus_chemistries() {
  static const std::vector<Chemistry> c = {
      {"Na", "Cl", 1, Prototype::RocksaltConventional}, {"K", "Cl", 1, Prototype::RocksaltPrimitive},
      {"Li", "F", 1, Prototype::RocksaltConventional},  {"Mg", "O", 2, Prototype::RocksaltPrimitive},
      {"Ca", "O", 2, Prototype::RocksaltConventional},  {"Sr", "O", 2, Prototype::RocksaltPrimitive},
      {"Ba", "O", 2, Prototype::RocksaltConventional},  {"Zn", "S", 2, Prototype::Zincblende},
      {"Cs", "Cl", 1, Prototype::CsCl},                 {"Na", "F", 1, Prototype::RocksaltPrimitive},
  };
  return c;
}

/// Compliant binary cell for a chemistry, bond lengths from the BVS inversion.
inline CrystalStructure ideal(const Chemistry& c, const std::string& id = "ideal") {
  const int cz = z_of(c.cation), az = z_of(c.anion);
  const double r0 = *divergent::BvsTable::builtin().r0(cz, az);
  return binary(id, cz, az, c.proto, bvs_bond_length(r0, c.ox, coordination(c.proto)));
}

/// Random Cartesian displacement (sigma in Å) and per-axis strain.
inline CrystalStructure jitter(const CrystalStructure& s, std::mt19937_64& rng, double sigma,
                               double strain) {
  std::normal_distribution<double> n(0.0, sigma);
  std::uniform_real_distribution<double> u(-strain, strain);
  const auto p = divergent::lattice_parameters(s.metric());
  const Metric6 g = divergent::metric_from_parameters(p.a * (1 + u(rng)), p.b * (1 + u(rng)),
                                                      p.c * (1 + u(rng)), p.alpha, p.beta, p.gamma);
  CrystalStructure strained = s.with_metric(g);
  const divergent::Mat3 rinv = strained.lattice().inverse();
  std::vector<Vec3> x;
  for (const auto& f : strained.frac_coords()) x.push_back(f + rinv * Vec3(n(rng), n(rng), n(rng)));
  return strained.with_coords(std::move(x));
}

/// 200 constructed-valid structures: jittered variants of compliant cells.
inline std::vector<CrystalStructure> valid_corpus(std::uint64_t seed = 2024, std::size_t count = 200) {
  std::mt19937_64 rng(seed);
  std::vector<CrystalStructure> out;
  const auto& chems = corpus_chemistries();
  for (std::size_t k = 0; k < count; ++k) {
    const auto& c = chems[k % chems.size()];
    out.push_back(jitter(ideal(c, "corpus-" + std::to_string(k)), rng, 0.02, 0.01));
  }
  return out;
}

/// Element table with a few synthetic species of unit radius for geometry tests.
inline ElementTable unit_radius_table() {
  std::vector<divergent::Element> e;
  e.push_back({"A", 1, 1.0, 1.0, {2}, divergent::Block::s, true});
  e.push_back({"B", 2, 1.0, 3.0, {-2}, divergent::Block::p, true});
  e.push_back({"C", 3, 1.0, 2.0, {4}, divergent::Block::d, true});
  e.push_back({"D", 4, 1.0, 3.5, {-1}, divergent::Block::p, true});
  return ElementTable(std::move(e));
}

}  // namespace fixtures
