// Refits data/descriptor_scaling.tsv. The corpus is fixed by the seed: random
// 2-8 atom cells over common species, relaxed out of hard-sphere overlap and
// then expanded by a random factor, plus AB rocksalt / CsCl / zincblende
// cells over random cation-anion pairs. Prints the TSV to stdout.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "divergent/constraints.hpp"
#include "divergent/descriptors.hpp"

using namespace divergent;

int main() {
  const auto& table = ElementTable::builtin();
  const std::vector<std::string> pool = {"Li", "Na", "K", "Mg", "Ca", "Sr", "Ba", "Al", "Ti", "Fe",
                                         "Zn", "O",  "S",  "F",  "Cl", "N",  "Se", "Br", "Ni", "Cu"};
  std::mt19937_64 rng(20240611);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::uniform_int_distribution<int> nat(2, 8), nsp(1, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0), strain(0.85, 1.2), ang(75.0, 105.0),
      expand(1.0, 1.35), bond(0.9, 1.2);
  const std::vector<std::string> cations = {"Li", "Na", "K", "Rb", "Cs", "Mg", "Ca", "Sr", "Ba", "Zn", "Ni", "Fe"};
  const std::vector<std::string> anions = {"F", "Cl", "Br", "O", "S", "Se", "N"};

  std::vector<DescriptorVector> rows;
  double cn_sum = 0.0;
  auto record = [&](const CrystalStructure& s) {
    rows.push_back(raw_descriptors(s, table));
    double chi = 0.0;
    for (int z : s.species()) chi += table.by_z(z).electronegativity / static_cast<double>(s.size());
    cn_sum += rows.back()[0] / chi;
  };
  while (rows.size() < 600) {
    const int n = nat(rng), k = std::min(nsp(rng), n);
    std::vector<int> zs;
    for (int i = 0; i < k; ++i) zs.push_back(table.by_symbol(pool[pick(rng)]).atomic_number);
    std::vector<int> species;
    for (int i = 0; i < n; ++i) species.push_back(zs[static_cast<std::size_t>(i % k)]);
    std::vector<CompositionEntry> ce;
    for (int z : species) ce.push_back({z, 1});
    const Composition comp(ce);
    const double a = std::cbrt(estimated_volume_per_atom(comp, table) * n);
    const Metric6 g = metric_from_parameters(a * strain(rng), a * strain(rng), a * strain(rng),
                                             ang(rng), ang(rng), ang(rng));
    std::vector<Vec3> x;
    for (int i = 0; i < n; ++i) x.emplace_back(u(rng), u(rng), u(rng));
    const CrystalStructure s("fit", g, species, x);
    const auto relaxed = project_min_distance(s, 0.8, 200);
    if (!relaxed) continue;
    const double f = expand(rng);
    Metric6 big = relaxed->metric();
    for (double& v : big) v *= f * f;
    record(relaxed->with_metric(big));
  }
  std::uniform_int_distribution<std::size_t> pc(0, cations.size() - 1), pa(0, anions.size() - 1);
  std::uniform_int_distribution<int> proto(0, 2);
  while (rows.size() < 900) {
    const int cz = table.by_symbol(cations[pc(rng)]).atomic_number;
    const int az = table.by_symbol(anions[pa(rng)]).atomic_number;
    const double d = bond(rng) * (table.by_z(cz).covalent_radius + table.by_z(az).covalent_radius);
    switch (proto(rng)) {
      case 0: {
        const double a = d * std::sqrt(2.0);
        record(CrystalStructure("rs", metric_from_parameters(a, a, a, 60, 60, 60), {cz, az},
                                {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)}));
        break;
      }
      case 1: {
        const double a = 2.0 * d / std::sqrt(3.0);
        record(CrystalStructure("cscl", metric_from_parameters(a, a, a), {cz, az},
                                {Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)}));
        break;
      }
      default: {
        const double a = 4.0 * d / std::sqrt(3.0) / std::sqrt(2.0);
        record(CrystalStructure("zb", metric_from_parameters(a, a, a, 60, 60, 60), {cz, az},
                                {Vec3(0, 0, 0), Vec3(0.25, 0.25, 0.25)}));
        break;
      }
    }
  }

  std::printf("# descriptor standardization constants\n");
  std::printf("# version 2\n");
  std::printf("# fit: tools/fit_descriptor_scaling.cpp, %zu structures\n", rows.size());
  std::printf("# approx mean coordination %.3g\n", cn_sum / static_cast<double>(rows.size()));
  std::printf("# index\tname\tmean\tscale\n");
  const char* names[] = {"dos_mean", "dos_std", "dos_skew", "dos_kurt",
                         "elf_mean", "elf_var", "resp_lnv", "resp_cn"};
  // spread and shape components are scaled but not centred, so a
  // homogeneous cell stays at exactly 0
  const bool centred[] = {true, false, false, false, true, false, true, true};
  for (std::size_t c = 0; c < kDescriptorDim; ++c) {
    double m = 0.0, v = 0.0;
    if (centred[c]) {
      for (const auto& r : rows) m += r[c];
      m /= static_cast<double>(rows.size());
    }
    for (const auto& r : rows) v += (r[c] - m) * (r[c] - m);
    v /= static_cast<double>(rows.size() - (centred[c] ? 1 : 0));
    std::printf("%zu\t%s\t%.6g\t%.6g\n", c, names[c], m, std::sqrt(v));
  }
  return 0;
}
