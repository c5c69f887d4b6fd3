#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "divergent/chem_core.hpp"
#include "divergent/descriptors.hpp"

namespace divergent {

using Vec6 = Eigen::Matrix<double, 6, 1>;

enum class ScheduleKind { Cosine, Linear, Custom };

std::string_view to_string(ScheduleKind k) noexcept;
ScheduleKind schedule_kind_from_string(std::string_view name);

/// Per-step betas plus cumulative products. Steps are numbered 1..T;
/// alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  /// alpha_bar(t) = f(t)/f(0), f(t) = cos²(((t/T + s)/(1 + s)) π/2); betas capped at 0.999.
  static NoiseSchedule cosine(int steps = 1000, double s = 0.008);
  /// Betas linear in [1e-4, 0.02] scaled by 1000/T so any T ends near alpha_bar = 0.
  static NoiseSchedule linear(int steps = 1000);
  static NoiseSchedule make(ScheduleKind kind, int steps);
  /// Arbitrary betas in [0, 1); zeros allowed (no strict decrease required).
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const noexcept { return static_cast<int>(betas_.size()); }
  ScheduleKind kind() const noexcept { return kind_; }
  std::span<const double> betas() const noexcept { return betas_; }
  double beta(int t) const;
  double alpha_bar(int t) const;
  /// Coordinate noise variance at step t: 1 - alpha_bar(t).
  double sigma2(int t) const { return 1.0 - alpha_bar(t); }

 private:
  ScheduleKind kind_ = ScheduleKind::Custom;
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;  // size T+1
};

/// Normalisation for the metric channel: g = (G - G_ref) / scale, where
/// G_ref = a0² I with a0³ the cell volume estimated from atomic radii.
struct CellFrame {
  Metric6 reference{};
  double scale = 1.0;

  static CellFrame for_composition(const Composition& c,
                                   const ElementTable& table = ElementTable::builtin());
  Vec6 normalise(const Metric6& g) const;
  Metric6 denormalise(const Vec6& g) const;
};

inline constexpr double kMinMetricEigenvalue = 0.1;  // Å²

/// Clamps eigenvalues of G to >= 0.1 Å². Returns the input untouched when
/// no eigenvalue is below the floor.
Metric6 clamp_metric(const Metric6& g);

/// Sampler state: normalised metric, wrapped fractional coordinates.
struct DiffusionState {
  CellFrame frame;
  std::vector<int> species;
  Vec6 g = Vec6::Zero();
  std::vector<Vec3> x;

  static DiffusionState from_structure(const CrystalStructure& s, const CellFrame& frame);
  static DiffusionState from_structure(const CrystalStructure& s);
  CrystalStructure to_structure(std::string id) const;
};

struct DenoiserQuery {
  const DiffusionState* state = nullptr;
  int t = 0;
  const NoiseSchedule* schedule = nullptr;
  std::optional<DescriptorVector> q;  // nullopt = unconditional
};

/// Mean update relative to the current state: mu = state + update.
struct DenoiserUpdate {
  Vec6 d_metric = Vec6::Zero();
  std::vector<Vec3> d_coords;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiserUpdate predict(const DenoiserQuery& query) const = 0;
};

class IdentityDenoiser final : public Denoiser {
 public:
  DenoiserUpdate predict(const DenoiserQuery& query) const override;
};

/// Score of a wrapped normal on [0,1) with mean mu and variance var,
/// image sum truncated at |k| <= 3.
double wrapped_normal_score(double x, double mu, double var);
double wrapped_normal_density(double x, double mu, double var);

/// Exact reverse mean for a fixed target: per-atom isotropic wrapped normal
/// coordinates around `mu` (variance tau2 per axis) and a point-mass metric.
class WrappedGaussianDenoiser final : public Denoiser {
 public:
  WrappedGaussianDenoiser(std::vector<Vec3> mu, double tau2, Vec6 g0 = Vec6::Zero());
  DenoiserUpdate predict(const DenoiserQuery& query) const override;

 private:
  std::vector<Vec3> mu_;
  double tau2_;
  Vec6 g0_;
};

struct DenoiserTrainingConfig {
  int epochs = 40;
  int batches_per_epoch = 25;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double condition_dropout = 0.2;
  int hidden = 64;
  std::uint64_t seed = 7;
};

/// Two-hidden-layer regressors predicting the injected noise: one per-atom
/// network for coordinates, one for the metric. Inputs are sin/cos of the
/// coordinates, atom slot, species radius and electronegativity, a step
/// embedding, the normalised metric and the conditioning vector with a
/// presence flag. Not equivariant.
class ReferenceDenoiser final : public Denoiser {
 public:
  ReferenceDenoiser();
  ~ReferenceDenoiser() override;
  ReferenceDenoiser(const ReferenceDenoiser&);
  ReferenceDenoiser& operator=(const ReferenceDenoiser&);
  ReferenceDenoiser(ReferenceDenoiser&&) noexcept;
  ReferenceDenoiser& operator=(ReferenceDenoiser&&) noexcept;

  DenoiserUpdate predict(const DenoiserQuery& query) const override;

  /// Mean training loss per epoch.
  const std::vector<double>& loss_history() const;
  /// Loss of the current parameters on a fixed evaluation draw.
  double evaluate_loss(std::span<const CrystalStructure> data, const NoiseSchedule& schedule,
                       std::uint64_t seed, int draws = 256) const;

  std::vector<std::uint8_t> to_bytes() const;
  static ReferenceDenoiser from_bytes(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static ReferenceDenoiser load(const std::filesystem::path& path);
  /// Hash of the layer layout; stored in the blob and checked on load.
  std::uint64_t schema_hash() const;

  struct Impl;

 private:
  friend ReferenceDenoiser train_reference_denoiser(std::span<const CrystalStructure>,
                                                    const NoiseSchedule&,
                                                    const DenoiserTrainingConfig&);
  friend ReferenceDenoiser refit_reference_denoiser(const ReferenceDenoiser&,
                                                    std::span<const CrystalStructure>,
                                                    const NoiseSchedule&,
                                                    const DenoiserTrainingConfig&);
  std::unique_ptr<Impl> impl_;
};

ReferenceDenoiser train_reference_denoiser(std::span<const CrystalStructure> dataset,
                                           const NoiseSchedule& schedule,
                                           const DenoiserTrainingConfig& config = {});

/// Continues training from `start` with a fresh optimiser; config.hidden is
/// ignored in favour of the start's layout.
ReferenceDenoiser refit_reference_denoiser(const ReferenceDenoiser& start,
                                           std::span<const CrystalStructure> dataset,
                                           const NoiseSchedule& schedule,
                                           const DenoiserTrainingConfig& config = {});

/// q = nullopt means "recompute from the current state at every step".
struct ConditioningContext {
  std::optional<DescriptorVector> q;
  double lambda = 0.3;

  bool lambda_in_recommended_range() const noexcept { return lambda >= 0.2 && lambda <= 0.4; }
};

/// Closed-form t-step marginal. Metric: variance preserving on the
/// normalised 6-vector. Coordinates: x_t = wrap(x_0 + sqrt(1 - alpha_bar_t) eps).
DiffusionState forward_noise(const DiffusionState& s, int t, const NoiseSchedule& schedule,
                             std::mt19937_64& rng);
CrystalStructure forward_noise(const CrystalStructure& s, int t, const NoiseSchedule& schedule,
                               std::mt19937_64& rng);

/// One ancestral step t -> t-1 with classifier-free blending
/// (1 - lambda) * unconditional + lambda * conditional.
DiffusionState reverse_step(const DiffusionState& s, int t, const NoiseSchedule& schedule,
                            const Denoiser& denoiser, const ConditioningContext& ctx,
                            std::mt19937_64& rng);

struct SamplerConfig {
  std::uint64_t seed = 1;
  double min_distance_alpha = 0.7;
  int projection_iters = 50;
  std::string id_prefix = "gen";
  const ElementTable* table = nullptr;  // builtin when null
};

struct SampleResult {
  std::vector<CrystalStructure> structures;
  std::size_t attempted = 0;
  std::size_t rejected = 0;  // final projection failures
  std::vector<std::string> warnings;
};

/// Draws n chains from noise, projecting coordinates out of the hard
/// distance violation after every step. Chains whose final projection fails
/// are dropped and counted in `rejected`.
SampleResult sample(std::size_t n, const Composition& composition, const ConditioningContext& ctx,
                    const Denoiser& denoiser, const NoiseSchedule& schedule,
                    const SamplerConfig& config = {});

/// Weak-conditioning sampling (lambda = 0.1) of n * oversample chains, then
/// the n samples whose descriptors are closest to ctx.q.
SampleResult sample_two_stage(std::size_t n, const Composition& composition,
                              const ConditioningContext& ctx, const Denoiser& denoiser,
                              const NoiseSchedule& schedule, const SamplerConfig& config = {},
                              int oversample = 3);

}  // namespace divergent
