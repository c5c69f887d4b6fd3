#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "divergent/chem_core.hpp"

namespace divergent {

inline constexpr int kEnsembleSize = 5;

/// Composition fractions over a fixed element list, the standardised
/// descriptor vector, and three contact statistics (min and mean of
/// min_j d_ij / (r_i + r_j), packing fraction of covalent spheres).
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(std::vector<int> elements);

  const std::vector<int>& elements() const noexcept { return elements_; }
  std::size_t dim() const noexcept;
  Eigen::VectorXd operator()(const CrystalStructure& s,
                             const ElementTable& table = ElementTable::builtin()) const;

 private:
  std::vector<int> elements_;
};

struct SurrogateExample {
  std::string id;  // unique per example; seeds the bootstrap weights
  /// Optional structure key shared by labels of one structure at several
  /// fidelities. A residual head is fit against the structure's own
  /// base-level label when there is one, otherwise against the base head.
  std::string structure;
  Eigen::VectorXd features;
  Fidelity fidelity = Fidelity::PBE;
  double energy = 0.0;  // eV/atom
};

struct SurrogateConfig {
  int random_features = 256;
  double lengthscale = 4.0;  // in standardised feature units
  int epochs = 400;
  /// Step sizes of the preconditioned descent, decayed exponentially per epoch.
  double lr_start = 0.05;
  double lr_end = 0.002;
  /// w_l of the multi-task loss, PBE..CCSDT.
  std::array<double, kFidelityCount> loss_weights = {0.1, 0.25, 0.5, 1.0};
  /// Force term weight. The feature map is not differentiable in the
  /// positions, so the term stays inactive (see train()).
  double force_weight = 0.0;
  /// Ridge penalties relative to each head's w_l * MSE.
  double l2_base = 1e-6;
  double l2_residual = 1e-3;
  std::uint64_t seed = 11;
};

struct PredictionBundle {
  double e_mf = 0.0;
  double sigma_mf = 0.0;
  double e_pbe_pred = 0.0;
  double divergence = 0.0;  // D_abs
  std::array<double, kEnsembleSize> member_energy{};
  std::array<double, kEnsembleSize> member_sigma{};
  std::array<double, kEnsembleSize> member_pbe{};
};

struct EnsembleAggregate {
  double mean = 0.0;
  double sigma = 0.0;
};

/// E = mean(E_i), sigma = sqrt(mean(sigma_i²) + population variance of E_i).
EnsembleAggregate aggregate_ensemble(std::span<const double> energies, std::span<const double> sigmas);

enum class DivergenceKind { Abs, Rel, Sgn };
std::string_view to_string(DivergenceKind k) noexcept;
DivergenceKind divergence_kind_from_string(std::string_view name);

/// abs: |e_pbe - e_mf|; rel: abs / sigma_mf; sgn: sign(e_pbe - e_mf) * abs.
double divergence_metric(double e_pbe, double e_mf, double sigma_mf,
                         DivergenceKind kind = DivergenceKind::Abs);

struct CalibrationSample {
  double prediction;
  double sigma;
  double truth;
};

/// Coverage-based calibration error: each sample's nominal central coverage
/// u = 2 Phi(|z|) - 1 is compared with its empirical coverage rank / n;
/// samples are split into equal-mass bins and the gap at each bin's median
/// sample is averaged with bin-count weights.
double expected_calibration_error(std::span<const CalibrationSample> samples, int bins = 10);

/// Fidelity-conditioned ensemble of random-Fourier-feature regressors.
/// Each member has a base head fit on the lowest fidelity present and one
/// residual head per higher fidelity, fit with the base head frozen.
/// Members differ in feature draw and Poisson bootstrap weights.
class MultiFidelityModel {
 public:
  MultiFidelityModel() = default;

  /// Throws EmptyDataset on no data. A single-fidelity dataset trains in a
  /// degraded mode (warning recorded) and predict() then throws.
  static MultiFidelityModel train(std::span<const SurrogateExample> data,
                                  const SurrogateConfig& config = {});

  /// Continued descent from the current weights on `data`; the learning
  /// rate follows the training schedule scaled by lr_scale. Input and
  /// target standardisation stay fixed.
  void fine_tune(std::span<const SurrogateExample> data, int epochs = 60, double lr_scale = 0.1);

  bool trained() const noexcept { return !members_.empty(); }
  bool multi_fidelity() const noexcept;
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }
  const SurrogateConfig& config() const noexcept { return config_; }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(mean_.size()); }

  double predict_member(std::size_t member, const Eigen::VectorXd& x, Fidelity f) const;
  /// Per-member sigma from out-of-bag residuals.
  double member_sigma(std::size_t member) const;
  /// Mean over members at one fidelity; usable in degraded mode.
  double predict_fidelity(const Eigen::VectorXd& x, Fidelity f) const;
  PredictionBundle predict(const Eigen::VectorXd& x) const;

  /// Weighted multi-task loss per epoch (summed over members), including fine-tuning.
  const std::vector<double>& loss_history() const noexcept { return loss_history_; }
  /// Index sets with non-zero bootstrap weight, per member, for the data
  /// of the most recent train/fine_tune call. Not persisted.
  std::vector<std::vector<std::size_t>> bootstrap_indices() const;

  std::vector<std::uint8_t> to_bytes() const;
  static MultiFidelityModel from_bytes(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static MultiFidelityModel load(const std::filesystem::path& path);
  std::uint64_t schema_hash() const;
  std::uint64_t state_hash() const;

  struct Member {
    std::uint64_t seed = 0;
    Eigen::MatrixXd omega;  // input_dim x D
    Eigen::VectorXd phase;  // D
    Eigen::VectorXd w_base;
    double b_base = 0.0;
    std::array<Eigen::VectorXd, kFidelityCount> w_res;  // zero-sized for base and unseen levels
    std::array<double, kFidelityCount> b_res{};
    double sigma = 0.0;
  };

 private:
  void fit(std::span<const SurrogateExample> data, int epochs, double lr_start, double lr_end,
           bool reinitialise);
  Eigen::VectorXd standardise(const Eigen::VectorXd& x) const;
  Eigen::RowVectorXd phi(const Member& m, const Eigen::VectorXd& z) const;

  SurrogateConfig config_;
  Eigen::VectorXd mean_, scale_;
  double y_mean_ = 0.0, y_scale_ = 1.0;
  Fidelity base_ = Fidelity::PBE;
  std::array<bool, kFidelityCount> seen_{};
  std::vector<Member> members_;
  std::vector<double> loss_history_;
  std::vector<std::string> warnings_;
  std::vector<std::vector<std::size_t>> in_bag_;
};

/// sigma_final² = sigma_ccsdt² + J_mf² sigma_dft² + J_diff² sigma_mf².
struct ErrorPropagation {
  double j_mf = 0.0;
  double j_diff = 0.0;
  double sigma_final = 0.0;
};

/// Central-difference derivative of f at x.
double numeric_jacobian(const std::function<double(double)>& f, double x, double h = 1e-4);

ErrorPropagation propagate_errors(double sigma_ccsdt, double sigma_dft, double sigma_mf,
                                  double j_mf, double j_diff);

}  // namespace divergent
