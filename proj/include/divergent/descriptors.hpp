#pragma once

#include <array>
#include <string>
#include <string_view>

#include "divergent/chem_core.hpp"

namespace divergent {

inline constexpr std::size_t kDescriptorDim = 8;

/// Standardised proxy descriptor vector:
///   [0..3] moments of electronegativity-weighted coordination (mean, std,
///          skewness, excess kurtosis)
///   [4..5] mean and variance of normalised nearest-neighbour distance
///   [6..7] ln(V/N) and mean_CN * exp(-(V/N)/20)
/// None of these is a physical DOS, ELF or response quantity; they keep the
/// conditioning interface alive with cheap deterministic stand-ins.
using DescriptorVector = std::array<double, kDescriptorDim>;

/// Frozen per-component standardisation (raw - mean) / scale.
struct DescriptorScaling {
  DescriptorVector mean{};
  DescriptorVector scale{};
  std::string version;

  static const DescriptorScaling& builtin();
  static DescriptorScaling parse(std::string_view text);
  static DescriptorScaling identity();

  DescriptorVector apply(const DescriptorVector& raw) const;
};

/// Unstandardised proxy values.
DescriptorVector raw_descriptors(const CrystalStructure& s,
                                 const ElementTable& table = ElementTable::builtin());

DescriptorVector compute_descriptors(const CrystalStructure& s,
                                     const DescriptorScaling& scaling = DescriptorScaling::builtin(),
                                     const ElementTable& table = ElementTable::builtin());

/// Structure-free estimate from composition statistics alone: a fixed
/// coordination number and a radius-based volume per atom.
DescriptorVector raw_composition_descriptors(const Composition& c,
                                             const ElementTable& table = ElementTable::builtin());
DescriptorVector composition_descriptors(const Composition& c,
                                         const DescriptorScaling& scaling = DescriptorScaling::builtin(),
                                         const ElementTable& table = ElementTable::builtin());

/// Volume per atom assumed by the composition model and by the generator's
/// reference cell: Σ n_i (4/3) π r_i^3 / packing / N.
double estimated_volume_per_atom(const Composition& c,
                                 const ElementTable& table = ElementTable::builtin());

inline constexpr double kAssumedPackingFraction = 0.6;
inline constexpr double kAssumedNeighborRatio = 1.02;
inline constexpr double kAssumedCoordination = 6.0;

}  // namespace divergent
