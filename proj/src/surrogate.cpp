#include "divergent/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <limits>
#include <map>
#include <random>

#include "blob.hpp"
#include "divergent/descriptors.hpp"

namespace divergent {

// ---------------------------------------------------------------- features

FeatureMap::FeatureMap(std::vector<int> elements) : elements_(std::move(elements)) {
  std::sort(elements_.begin(), elements_.end());
  elements_.erase(std::unique(elements_.begin(), elements_.end()), elements_.end());
  if (elements_.empty()) throw Error(ErrorKind::InvalidParameters, "feature map needs at least one element");
}

std::size_t FeatureMap::dim() const noexcept { return elements_.size() + kDescriptorDim + 3; }

Eigen::VectorXd FeatureMap::operator()(const CrystalStructure& s, const ElementTable& table) const {
  if (s.empty()) throw Error(ErrorKind::EmptyStructure, "no features for an empty structure");
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim()));
  const auto comp = s.composition();
  for (const auto& e : comp.entries()) {
    const auto it = std::lower_bound(elements_.begin(), elements_.end(), e.z);
    if (it == elements_.end() || *it != e.z)
      throw Error(ErrorKind::UnknownElement, "element Z=" + std::to_string(e.z) + " outside the feature map");
    x[it - elements_.begin()] = comp.fraction(e.z);
  }
  const auto d = compute_descriptors(s, DescriptorScaling::builtin(), table);
  const auto off = static_cast<Eigen::Index>(elements_.size());
  for (std::size_t k = 0; k < kDescriptorDim; ++k) x[off + static_cast<Eigen::Index>(k)] = d[k];

  std::vector<double> nearest(s.size(), std::numeric_limits<double>::infinity());
  for (const auto& p : pairwise_min_image_distances(s)) {
    const double r = table.by_z(s.species()[p.i]).covalent_radius + table.by_z(s.species()[p.j]).covalent_radius;
    const double ratio = p.distance / r;
    nearest[p.i] = std::min(nearest[p.i], ratio);
    nearest[p.j] = std::min(nearest[p.j], ratio);
  }
  double sphere = 0.0;
  for (int z : s.species()) sphere += 4.0 / 3.0 * std::numbers::pi * std::pow(table.by_z(z).covalent_radius, 3);
  const auto k = off + static_cast<Eigen::Index>(kDescriptorDim);
  x[k] = *std::min_element(nearest.begin(), nearest.end());
  x[k + 1] = std::accumulate(nearest.begin(), nearest.end(), 0.0) / static_cast<double>(nearest.size());
  x[k + 2] = sphere / s.volume();
  return x;
}

// ------------------------------------------------------------- aggregation

EnsembleAggregate aggregate_ensemble(std::span<const double> energies, std::span<const double> sigmas) {
  if (energies.empty() || energies.size() != sigmas.size())
    throw Error(ErrorKind::InvalidParameters, "need one sigma per member and at least one member");
  const double n = static_cast<double>(energies.size());
  double mean = 0.0, ms = 0.0;
  for (std::size_t i = 0; i < energies.size(); ++i) {
    mean += energies[i];
    ms += sigmas[i] * sigmas[i];
  }
  mean /= n;
  ms /= n;
  double var = 0.0;
  for (double e : energies) var += (e - mean) * (e - mean);
  var /= n;
  return {mean, std::sqrt(ms + var)};
}

std::string_view to_string(DivergenceKind k) noexcept {
  switch (k) {
    case DivergenceKind::Abs: return "abs";
    case DivergenceKind::Rel: return "rel";
    case DivergenceKind::Sgn: return "sgn";
  }
  return "?";
}

DivergenceKind divergence_kind_from_string(std::string_view name) {
  if (name == "abs") return DivergenceKind::Abs;
  if (name == "rel") return DivergenceKind::Rel;
  if (name == "sgn") return DivergenceKind::Sgn;
  throw Error(ErrorKind::InvalidConfig, "unknown divergence kind '" + std::string(name) + "'");
}

double divergence_metric(double e_pbe, double e_mf, double sigma_mf, DivergenceKind kind) {
  const double d = std::abs(e_pbe - e_mf);
  switch (kind) {
    case DivergenceKind::Abs: return d;
    case DivergenceKind::Rel:
      if (!(sigma_mf > 0.0)) throw Error(ErrorKind::DivisionBySigmaZero, "relative divergence needs sigma > 0");
      return d / sigma_mf;
    case DivergenceKind::Sgn:
      return e_pbe > e_mf ? d : (e_pbe < e_mf ? -d : 0.0);
  }
  return d;
}

double expected_calibration_error(std::span<const CalibrationSample> samples, int bins) {
  if (samples.empty()) throw Error(ErrorKind::EmptyInput, "no calibration samples");
  if (bins < 1 || static_cast<std::size_t>(bins) > samples.size())
    throw Error(ErrorKind::InvalidParameters, "need 1 <= bins <= sample count");
  std::vector<double> u;
  u.reserve(samples.size());
  for (const auto& s : samples) {
    if (!(s.sigma > 0.0)) throw Error(ErrorKind::InvalidParameters, "calibration sigmas must be positive");
    const double z = std::abs(s.truth - s.prediction) / s.sigma;
    u.push_back(std::erf(z / std::numbers::sqrt2));  // 2 Phi(|z|) - 1
  }
  std::sort(u.begin(), u.end());
  const std::size_t n = u.size();
  double ece = 0.0;
  for (int b = 0; b < bins; ++b) {
    const std::size_t lo = n * static_cast<std::size_t>(b) / static_cast<std::size_t>(bins);
    const std::size_t hi = n * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(bins);
    if (hi == lo) continue;
    const std::size_t mid = lo + (hi - lo - 1) / 2;
    const double nominal = u[mid];
    const double empirical = static_cast<double>(mid + 1) / static_cast<double>(n);
    ece += static_cast<double>(hi - lo) / static_cast<double>(n) * std::abs(empirical - nominal);
  }
  return ece;
}

// ------------------------------------------------------------------ model

namespace {

constexpr char kMagic[8] = {'D', 'V', 'G', 'S', 'U', 'R', 'R', 'O'};
constexpr std::uint32_t kBlobVersion = 1;

/// Poisson(1) bootstrap weight, fixed per (member seed, example id).
int bootstrap_weight(std::uint64_t member_seed, const std::string& id) {
  std::mt19937_64 rng(fnv1a(id, member_seed));
  std::poisson_distribution<int> p(1.0);
  return p(rng);
}


}  // namespace

bool MultiFidelityModel::multi_fidelity() const noexcept {
  return std::count(seen_.begin(), seen_.end(), true) >= 2;
}

Eigen::VectorXd MultiFidelityModel::standardise(const Eigen::VectorXd& x) const {
  if (x.size() != mean_.size())
    throw Error(ErrorKind::InvalidParameters, "feature vector has " + std::to_string(x.size()) +
                                                  " entries, model expects " + std::to_string(mean_.size()));
  return ((x - mean_).array() / scale_.array()).matrix();
}

Eigen::RowVectorXd MultiFidelityModel::phi(const Member& m, const Eigen::VectorXd& z) const {
  const Eigen::Index d = m.omega.cols(), p = z.size();
  Eigen::RowVectorXd out(d + p);
  const Eigen::RowVectorXd proj = z.transpose() * m.omega + m.phase.transpose();
  out.head(d) = std::sqrt(2.0 / static_cast<double>(d)) * proj.array().cos().matrix();
  out.tail(p) = z.transpose() / std::sqrt(static_cast<double>(p));
  return out;
}

MultiFidelityModel MultiFidelityModel::train(std::span<const SurrogateExample> data,
                                             const SurrogateConfig& config) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "no training examples");
  if (config.random_features < 1 || !(config.lengthscale > 0.0) || config.epochs < 1)
    throw Error(ErrorKind::InvalidConfig, "bad surrogate configuration");
  MultiFidelityModel m;
  m.config_ = config;
  const Eigen::Index p = data.front().features.size();
  m.mean_ = Eigen::VectorXd::Zero(p);
  for (const auto& e : data) {
    if (e.features.size() != p) throw Error(ErrorKind::InvalidParameters, "inconsistent feature sizes");
    if (!e.features.allFinite() || !std::isfinite(e.energy))
      throw Error(ErrorKind::NonFiniteEnergy, "non-finite training example " + e.id);
    m.mean_ += e.features;
  }
  const double n = static_cast<double>(data.size());
  m.mean_ /= n;
  m.scale_ = Eigen::VectorXd::Zero(p);
  for (const auto& e : data) m.scale_ += (e.features - m.mean_).cwiseAbs2();
  m.scale_ = (m.scale_ / n).cwiseSqrt().cwiseMax(1e-6);
  double ym = 0.0;
  for (const auto& e : data) ym += e.energy;
  ym /= n;
  double yv = 0.0;
  for (const auto& e : data) yv += (e.energy - ym) * (e.energy - ym);
  m.y_mean_ = ym;
  m.y_scale_ = std::max(std::sqrt(yv / n), 1e-6);

  std::mt19937_64 seeder(config.seed);
  for (int k = 0; k < kEnsembleSize; ++k) {
    Member mem;
    mem.seed = seeder();
    std::mt19937_64 rng(mem.seed);
    std::normal_distribution<double> g(0.0, 1.0 / config.lengthscale);
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    mem.omega.resize(p, config.random_features);
    for (Eigen::Index i = 0; i < mem.omega.size(); ++i) mem.omega.data()[i] = g(rng);
    mem.phase.resize(config.random_features);
    for (Eigen::Index i = 0; i < mem.phase.size(); ++i) mem.phase[i] = u(rng);
    mem.w_base = Eigen::VectorXd::Zero(config.random_features + p);
    m.members_.push_back(std::move(mem));
  }
  m.fit(data, config.epochs, config.lr_start, config.lr_end, true);
  return m;
}

void MultiFidelityModel::fine_tune(std::span<const SurrogateExample> data, int epochs, double lr_scale) {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "fine_tune before train");
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "no fine-tuning examples");
  if (epochs < 1 || !(lr_scale > 0.0)) throw Error(ErrorKind::InvalidConfig, "bad fine-tuning parameters");
  fit(data, epochs, config_.lr_start * lr_scale, config_.lr_end * lr_scale, false);
}

void MultiFidelityModel::fit(std::span<const SurrogateExample> data, int epochs, double lr_start,
                             double lr_end, bool reinitialise) {
  std::array<bool, kFidelityCount> seen{};
  for (const auto& e : data) seen[static_cast<int>(e.fidelity)] = true;
  if (reinitialise) {
    seen_ = seen;
    base_ = static_cast<Fidelity>(std::find(seen_.begin(), seen_.end(), true) - seen_.begin());
    warnings_.clear();
  } else {
    for (int f = 0; f < kFidelityCount; ++f) seen_[f] = seen_[f] || seen[f];
  }
  if (!multi_fidelity() &&
      std::find(warnings_.begin(), warnings_.end(), std::string("single-fidelity dataset: divergence undefined")) == warnings_.end())
    warnings_.push_back("single-fidelity dataset: divergence undefined");

  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  const int base = static_cast<int>(base_);
  Eigen::VectorXd y(n);
  std::vector<int> fid(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = (data[static_cast<std::size_t>(i)].energy - y_mean_) / y_scale_;
    fid[static_cast<std::size_t>(i)] = static_cast<int>(data[static_cast<std::size_t>(i)].fidelity);
  }
  std::vector<double> epoch_loss(static_cast<std::size_t>(epochs), 0.0);
  in_bag_.assign(members_.size(), {});

  // base-level label of the same structure, when one is present
  std::map<std::string, std::pair<double, int>> base_labels;
  for (const auto& e : data)
    if (!e.structure.empty() && e.fidelity == base_) {
      auto& acc = base_labels[e.structure];
      acc.first += (e.energy - y_mean_) / y_scale_;
      ++acc.second;
    }
  std::vector<double> anchor(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = data[static_cast<std::size_t>(i)];
    if (e.fidelity == base_ || e.structure.empty()) continue;
    const auto it = base_labels.find(e.structure);
    if (it != base_labels.end()) anchor[static_cast<std::size_t>(i)] = it->second.first / it->second.second;
  }

  for (std::size_t mi = 0; mi < members_.size(); ++mi) {
    auto& mem = members_[mi];
    const Eigen::Index dim = mem.w_base.size();
    Eigen::MatrixXd feats(n, dim);
    Eigen::VectorXd beta(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      feats.row(i) = phi(mem, standardise(data[static_cast<std::size_t>(i)].features));
      beta[i] = bootstrap_weight(mem.seed, data[static_cast<std::size_t>(i)].id);
      if (beta[i] > 0) in_bag_[mi].push_back(static_cast<std::size_t>(i));
    }
    std::array<double, kFidelityCount> wsum{};
    for (Eigen::Index i = 0; i < n; ++i) wsum[fid[static_cast<std::size_t>(i)]] += beta[i];
    for (int f = 0; f < kFidelityCount; ++f) {
      if (f != base && seen_[f] && mem.w_res[f].size() == 0) mem.w_res[f] = Eigen::VectorXd::Zero(dim);
    }
    // Each head is a weighted ridge problem in its own parameters, so the
    // descent direction is preconditioned with the inverse of that head's
    // regularised Gram matrix (the bias column is not penalised).
    std::array<Eigen::LDLT<Eigen::MatrixXd>, kFidelityCount> precond;
    std::array<std::vector<Eigen::Index>, kFidelityCount> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (beta[i] > 0) rows[fid[static_cast<std::size_t>(i)]].push_back(i);
    for (int f = 0; f < kFidelityCount; ++f) {
      if (rows[f].empty() || config_.loss_weights[f] == 0.0) continue;
      if (f != base && mem.w_res[f].size() == 0) continue;
      const double l2 = f == base ? config_.l2_base : config_.l2_residual;
      Eigen::MatrixXd a(static_cast<Eigen::Index>(rows[f].size()), dim + 1);
      for (std::size_t k = 0; k < rows[f].size(); ++k) {
        const double sw = std::sqrt(beta[rows[f][k]] / wsum[f]);
        a.row(static_cast<Eigen::Index>(k)).head(dim) = sw * feats.row(rows[f][k]);
        a(static_cast<Eigen::Index>(k), dim) = sw;
      }
      Eigen::MatrixXd g = a.transpose() * a;
      g.diagonal().head(dim).array() += l2;
      g(dim, dim) += 1e-12;
      precond[f].compute(g);
    }

    for (int ep = 0; ep < epochs; ++ep) {
      const double frac = epochs > 1 ? static_cast<double>(ep) / (epochs - 1) : 0.0;
      const double lr = lr_start * std::pow(lr_end / lr_start, frac);
      std::array<Eigen::VectorXd, kFidelityCount> grad;
      double loss = 0.0;
      for (int f = 0; f < kFidelityCount; ++f) {
        if (rows[f].empty()) continue;
        // residual heads see the base prediction as a constant
        Eigen::VectorXd gr = Eigen::VectorXd::Zero(dim + 1);
        double sse = 0.0;
        for (Eigen::Index i : rows[f]) {
          const double a = anchor[static_cast<std::size_t>(i)];
          double pred = std::isnan(a) ? feats.row(i).dot(mem.w_base) + mem.b_base : a;
          if (f != base && mem.w_res[f].size()) pred += feats.row(i).dot(mem.w_res[f]) + mem.b_res[f];
          const double e = pred - y[i];
          gr.head(dim) += (beta[i] * e) * feats.row(i).transpose();
          gr[dim] += beta[i] * e;
          sse += beta[i] * e * e;
        }
        const Eigen::VectorXd& w = f == base ? mem.w_base : mem.w_res[f];
        const double l2 = f == base ? config_.l2_base : config_.l2_residual;
        loss += config_.loss_weights[f] * (sse / wsum[f] + (w.size() ? l2 * w.squaredNorm() : 0.0));
        gr /= wsum[f];
        if (w.size()) gr.head(dim) += l2 * w;
        grad[f] = std::move(gr);
      }
      for (int f = 0; f < kFidelityCount; ++f) {
        if (grad[f].size() == 0 || precond[f].rows() == 0) continue;
        const Eigen::VectorXd step = lr * precond[f].solve(grad[f]);
        if (f == base) {
          mem.w_base -= step.head(dim);
          mem.b_base -= step[dim];
        } else {
          mem.w_res[f] -= step.head(dim);
          mem.b_res[f] -= step[dim];
        }
      }
      epoch_loss[static_cast<std::size_t>(ep)] += loss;
    }

    // out-of-bag residuals at each example's own fidelity
    double ss_top = 0.0, ss_all = 0.0, ss_in = 0.0;
    int n_top = 0, n_all = 0, n_in = 0;
    const int top = static_cast<int>(std::find(seen_.rbegin(), seen_.rend(), true) - seen_.rbegin());
    const int top_level = kFidelityCount - 1 - top;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int f = fid[static_cast<std::size_t>(i)];
      double pred = feats.row(i).dot(mem.w_base) + mem.b_base;
      if (f != base && mem.w_res[f].size()) pred += feats.row(i).dot(mem.w_res[f]) + mem.b_res[f];
      const double r2 = std::pow((pred - y[i]) * y_scale_, 2);
      if (beta[i] == 0) {
        ss_all += r2;
        ++n_all;
        if (f == top_level) {
          ss_top += r2;
          ++n_top;
        }
      } else {
        ss_in += r2;
        ++n_in;
      }
    }
    if (n_top >= 5) mem.sigma = std::sqrt(ss_top / n_top);
    else if (n_all > 0) mem.sigma = std::sqrt(ss_all / n_all);
    else mem.sigma = std::sqrt(ss_in / std::max(n_in, 1));
  }
  loss_history_.insert(loss_history_.end(), epoch_loss.begin(), epoch_loss.end());
}

double MultiFidelityModel::predict_member(std::size_t member, const Eigen::VectorXd& x, Fidelity f) const {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "model has not been trained");
  const auto& mem = members_.at(member);
  const Eigen::RowVectorXd feats = phi(mem, standardise(x));
  double v = feats.dot(mem.w_base) + mem.b_base;
  const int k = static_cast<int>(f);
  if (f != base_ && mem.w_res[k].size()) v += feats.dot(mem.w_res[k]) + mem.b_res[k];
  return y_mean_ + y_scale_ * v;
}

double MultiFidelityModel::member_sigma(std::size_t member) const {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "model has not been trained");
  return members_.at(member).sigma;
}

double MultiFidelityModel::predict_fidelity(const Eigen::VectorXd& x, Fidelity f) const {
  double s = 0.0;
  for (std::size_t k = 0; k < members_.size(); ++k) s += predict_member(k, x, f);
  return s / static_cast<double>(members_.size());
}

PredictionBundle MultiFidelityModel::predict(const Eigen::VectorXd& x) const {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "model has not been trained");
  if (!multi_fidelity())
    throw Error(ErrorKind::DivergenceUndefined, "model was trained on a single fidelity");
  PredictionBundle b;
  for (std::size_t k = 0; k < members_.size(); ++k) {
    b.member_energy[k] = predict_member(k, x, Fidelity::CCSDT);
    b.member_pbe[k] = predict_member(k, x, Fidelity::PBE);
    b.member_sigma[k] = members_[k].sigma;
  }
  const auto agg = aggregate_ensemble(b.member_energy, b.member_sigma);
  b.e_mf = agg.mean;
  b.sigma_mf = agg.sigma;
  b.e_pbe_pred = std::accumulate(b.member_pbe.begin(), b.member_pbe.end(), 0.0) / kEnsembleSize;
  b.divergence = divergence_metric(b.e_pbe_pred, b.e_mf, b.sigma_mf, DivergenceKind::Abs);
  return b;
}

std::vector<std::vector<std::size_t>> MultiFidelityModel::bootstrap_indices() const {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "model has not been trained");
  return in_bag_;
}

// ------------------------------------------------------------ persistence

std::uint64_t MultiFidelityModel::schema_hash() const {
  std::string layout = "mf-rff-ensemble/v1/members:" + std::to_string(kEnsembleSize) +
                       "/fidelities:" + std::to_string(kFidelityCount) +
                       "/inputs:" + std::to_string(mean_.size()) +
                       "/features:" + std::to_string(config_.random_features);
  return fnv1a(layout);
}

std::vector<std::uint8_t> MultiFidelityModel::to_bytes() const {
  if (!trained()) throw Error(ErrorKind::ModelNotTrained, "nothing to serialise");
  detail::BlobWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.put(kBlobVersion);
  w.put(static_cast<std::uint64_t>(mean_.size()));
  w.put(static_cast<std::uint32_t>(config_.random_features));
  w.put(schema_hash());
  w.put(config_.lengthscale);
  w.put(config_.epochs);
  w.put(config_.lr_start);
  w.put(config_.lr_end);
  for (double v : config_.loss_weights) w.put(v);
  w.put(config_.force_weight);
  w.put(config_.l2_base);
  w.put(config_.l2_residual);
  w.put(config_.seed);
  w.vec(mean_);
  w.vec(scale_);
  w.put(y_mean_);
  w.put(y_scale_);
  w.put(static_cast<std::int32_t>(base_));
  for (bool s : seen_) w.put(static_cast<std::uint8_t>(s));
  for (const auto& m : members_) {
    w.put(m.seed);
    w.mat(m.omega);
    w.vec(m.phase);
    w.vec(m.w_base);
    w.put(m.b_base);
    for (int f = 0; f < kFidelityCount; ++f) {
      w.vec(m.w_res[f]);
      w.put(m.b_res[f]);
    }
    w.put(m.sigma);
  }
  w.put(static_cast<std::uint64_t>(loss_history_.size()));
  for (double l : loss_history_) w.put(l);
  w.put(static_cast<std::uint32_t>(warnings_.size()));
  for (const auto& s : warnings_) w.str(s);
  return std::move(w.data());
}

MultiFidelityModel MultiFidelityModel::from_bytes(std::span<const std::uint8_t> bytes) {
  detail::BlobReader r(bytes, "surrogate blob");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw Error(ErrorKind::SchemaMismatch, "not a surrogate blob");
  if (r.get<std::uint32_t>() != kBlobVersion) throw Error(ErrorKind::SchemaMismatch, "unsupported surrogate blob version");
  MultiFidelityModel m;
  const auto inputs = r.get<std::uint64_t>();
  m.config_.random_features = static_cast<int>(r.get<std::uint32_t>());
  m.mean_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(std::min<std::uint64_t>(inputs, 1u << 20)));
  if (r.get<std::uint64_t>() != m.schema_hash()) throw Error(ErrorKind::SchemaMismatch, "surrogate schema hash differs");
  m.config_.lengthscale = r.get<double>();
  m.config_.epochs = r.get<int>();
  m.config_.lr_start = r.get<double>();
  m.config_.lr_end = r.get<double>();
  for (double& v : m.config_.loss_weights) v = r.get<double>();
  m.config_.force_weight = r.get<double>();
  m.config_.l2_base = r.get<double>();
  m.config_.l2_residual = r.get<double>();
  m.config_.seed = r.get<std::uint64_t>();
  m.mean_ = r.vec();
  m.scale_ = r.vec();
  if (static_cast<std::uint64_t>(m.mean_.size()) != inputs || m.scale_.size() != m.mean_.size())
    throw Error(ErrorKind::SchemaMismatch, "input statistics have the wrong size");
  m.y_mean_ = r.get<double>();
  m.y_scale_ = r.get<double>();
  const auto base = r.get<std::int32_t>();
  if (base < 0 || base >= kFidelityCount) throw Error(ErrorKind::SchemaMismatch, "bad base fidelity");
  m.base_ = static_cast<Fidelity>(base);
  for (bool& s : m.seen_) s = r.get<std::uint8_t>() != 0;
  const Eigen::Index dim = m.config_.random_features + m.mean_.size();
  for (int k = 0; k < kEnsembleSize; ++k) {
    Member mem;
    mem.seed = r.get<std::uint64_t>();
    mem.omega = r.mat();
    mem.phase = r.vec();
    mem.w_base = r.vec();
    mem.b_base = r.get<double>();
    for (int f = 0; f < kFidelityCount; ++f) {
      mem.w_res[f] = r.vec();
      mem.b_res[f] = r.get<double>();
      if (mem.w_res[f].size() != 0 && mem.w_res[f].size() != dim)
        throw Error(ErrorKind::SchemaMismatch, "residual head has the wrong size");
    }
    mem.sigma = r.get<double>();
    if (mem.omega.rows() != m.mean_.size() || mem.omega.cols() != m.config_.random_features ||
        mem.phase.size() != m.config_.random_features || mem.w_base.size() != dim)
      throw Error(ErrorKind::SchemaMismatch, "member layout differs from the schema");
    m.members_.push_back(std::move(mem));
  }
  const auto nl = r.get<std::uint64_t>();
  for (std::uint64_t k = 0; k < nl; ++k) m.loss_history_.push_back(r.get<double>());
  const auto nw = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < nw; ++k) m.warnings_.push_back(r.str());
  r.expect_end();
  return m;
}

void MultiFidelityModel::save(const std::filesystem::path& path) const { detail::write_file(path, to_bytes()); }

MultiFidelityModel MultiFidelityModel::load(const std::filesystem::path& path) {
  return from_bytes(detail::read_file(path));
}

std::uint64_t MultiFidelityModel::state_hash() const {
  const auto b = to_bytes();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

// ------------------------------------------------------ error propagation

double numeric_jacobian(const std::function<double(double)>& f, double x, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidParameters, "step must be positive");
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

ErrorPropagation propagate_errors(double sigma_ccsdt, double sigma_dft, double sigma_mf, double j_mf,
                                  double j_diff) {
  for (double s : {sigma_ccsdt, sigma_dft, sigma_mf})
    if (!(s >= 0.0)) throw Error(ErrorKind::InvalidParameters, "sigmas must be non-negative");
  ErrorPropagation out;
  out.j_mf = j_mf;
  out.j_diff = j_diff;
  out.sigma_final = std::sqrt(sigma_ccsdt * sigma_ccsdt + j_mf * j_mf * sigma_dft * sigma_dft +
                              j_diff * j_diff * sigma_mf * sigma_mf);
  return out;
}

}  // namespace divergent
