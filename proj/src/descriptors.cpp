#include "divergent/descriptors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "divergent/embedded_data.hpp"
#include "text_util.hpp"

namespace divergent {

namespace {

// Weight 1 below 1.1 d_nn, cosine taper to 0 at 1.3 d_nn.
double shell_weight(double ratio) {
  if (ratio <= 1.1) return 1.0;
  if (ratio >= 1.3) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (ratio - 1.1) / 0.2));
}

struct Moments {
  double mean = 0.0, std = 0.0, skew = 0.0, kurt = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& v, const std::vector<double>& w) {
  Moments m;
  double wsum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    m.mean += w[i] * v[i];
    wsum += w[i];
  }
  m.mean /= wsum;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v[i] - m.mean;
    m2 += w[i] * d * d;
    m3 += w[i] * d * d * d;
    m4 += w[i] * d * d * d * d;
  }
  m2 /= wsum;
  m3 /= wsum;
  m4 /= wsum;
  m.var = m2;
  // shape moments are defined as 0 for a homogeneous set
  if (m2 <= 1e-14 * (1.0 + m.mean * m.mean)) {
    m.var = 0.0;
    return m;
  }
  m.std = std::sqrt(m2);
  m.skew = m3 / (m2 * m.std);
  m.kurt = m4 / (m2 * m2) - 3.0;
  return m;
}

DescriptorVector response_terms(DescriptorVector d, double vol_per_atom, double mean_cn) {
  d[6] = std::log(vol_per_atom);
  d[7] = mean_cn * std::exp(-vol_per_atom / 20.0);
  return d;
}

}  // namespace

DescriptorScaling DescriptorScaling::identity() {
  DescriptorScaling s;
  s.mean.fill(0.0);
  s.scale.fill(1.0);
  s.version = "identity";
  return s;
}

DescriptorScaling DescriptorScaling::parse(std::string_view text) {
  DescriptorScaling s = identity();
  s.version = "unversioned";
  std::array<bool, kDescriptorDim> seen{};
  for (auto line : detail::lines(text)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto pos = line.find("version");
      if (pos != std::string_view::npos) s.version = std::string(detail::trim(line.substr(pos + 7)));
      continue;
    }
    const auto f = detail::split_ws(line);
    if (f.size() != 4) throw Error(ErrorKind::ParseError, "scaling row needs 4 fields");
    const auto k = detail::parse_int(f[0]);
    if (k < 0 || k >= static_cast<long long>(kDescriptorDim))
      throw Error(ErrorKind::ParseError, "scaling index out of range");
    const auto idx = static_cast<std::size_t>(k);
    s.mean[idx] = detail::parse_double(f[2]);
    s.scale[idx] = detail::parse_double(f[3]);
    if (!(s.scale[idx] > 0.0)) throw Error(ErrorKind::ParseError, "scaling must be positive");
    seen[idx] = true;
  }
  for (bool b : seen)
    if (!b) throw Error(ErrorKind::ParseError, "scaling file misses a component");
  return s;
}

const DescriptorScaling& DescriptorScaling::builtin() {
  static const DescriptorScaling s = parse(embedded::descriptor_scaling_tsv());
  return s;
}

DescriptorVector DescriptorScaling::apply(const DescriptorVector& raw) const {
  DescriptorVector out;
  for (std::size_t k = 0; k < kDescriptorDim; ++k) out[k] = (raw[k] - mean[k]) / scale[k];
  return out;
}

double estimated_volume_per_atom(const Composition& c, const ElementTable& table) {
  if (c.empty()) throw Error(ErrorKind::EmptyComposition, "no atoms");
  double v = 0.0;
  for (const auto& e : c.entries()) {
    const double r = table.by_z(e.z).covalent_radius;
    v += e.count * 4.0 / 3.0 * std::numbers::pi * r * r * r;
  }
  return v / kAssumedPackingFraction / c.total_atoms();
}

DescriptorVector raw_descriptors(const CrystalStructure& s, const ElementTable& table) {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "structure has no atoms");
  const std::size_t n = s.size();
  std::vector<double> dnn(n, std::numeric_limits<double>::infinity());
  std::vector<double> ratio(n, std::numeric_limits<double>::infinity());
  std::vector<double> rad(n);
  for (std::size_t i = 0; i < n; ++i) rad[i] = table.by_z(s.species()[i]).covalent_radius;
  for (const auto& p : pairwise_min_image_distances(s)) {
    dnn[p.i] = std::min(dnn[p.i], p.distance);
    dnn[p.j] = std::min(dnn[p.j], p.distance);
    const double r = p.distance / (rad[p.i] + rad[p.j]);
    ratio[p.i] = std::min(ratio[p.i], r);
    ratio[p.j] = std::min(ratio[p.j], r);
  }
  double max_dnn = 0.0;
  for (double d : dnn) max_dnn = std::max(max_dnn, d);
  std::vector<double> cn(n, 0.0);
  for (const auto& nb : neighbor_list(s, 1.3 * max_dnn)) cn[nb.i] += shell_weight(nb.distance / dnn[nb.i]);

  std::vector<double> v(n), ones(n, 1.0);
  double mean_cn = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = table.by_z(s.species()[i]).electronegativity * cn[i];
    mean_cn += cn[i] / static_cast<double>(n);
  }
  const auto dos = moments(v, ones);
  const auto elf = moments(ratio, ones);
  DescriptorVector d{dos.mean, dos.std, dos.skew, dos.kurt, elf.mean, elf.var, 0.0, 0.0};
  return response_terms(d, s.volume() / static_cast<double>(n), mean_cn);
}

DescriptorVector compute_descriptors(const CrystalStructure& s, const DescriptorScaling& scaling,
                                     const ElementTable& table) {
  return scaling.apply(raw_descriptors(s, table));
}

DescriptorVector raw_composition_descriptors(const Composition& c, const ElementTable& table) {
  if (c.empty()) throw Error(ErrorKind::EmptyComposition, "no atoms");
  std::vector<double> v, w, ratio;
  for (const auto& e : c.entries()) {
    v.push_back(table.by_z(e.z).electronegativity * kAssumedCoordination);
    w.push_back(e.count);
  }
  const auto dos = moments(v, w);
  // no spread of neighbour distances is modelled
  DescriptorVector d{dos.mean, dos.std, dos.skew, dos.kurt, kAssumedNeighborRatio, 0.0, 0.0, 0.0};
  return response_terms(d, estimated_volume_per_atom(c, table), kAssumedCoordination);
}

DescriptorVector composition_descriptors(const Composition& c, const DescriptorScaling& scaling,
                                         const ElementTable& table) {
  return scaling.apply(raw_composition_descriptors(c, table));
}

}  // namespace divergent
