#include "divergent/generator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "divergent/constraints.hpp"
#include "mlp.hpp"

namespace divergent {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_step(const NoiseSchedule& schedule, int t, int lo) {
  if (t < lo || t > schedule.steps())
    throw Error(ErrorKind::StepOutOfRange,
                "step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                    std::to_string(schedule.steps()) + "]");
}

Vec3 normal3(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double a = n(rng), b = n(rng), c = n(rng);
  return Vec3(a, b, c);
}

Vec6 normal6(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec6 v;
  for (int k = 0; k < 6; ++k) v[k] = n(rng);
  return v;
}

// Metric mean from a noise estimate (variance-preserving channel), via the
// clean-sample estimate clipped to +-kMetricClip so near-terminal steps with
// beta -> 1 cannot amplify estimation error.
constexpr double kMetricClip = 10.0;

Vec6 metric_update_from_eps(const Vec6& g, const Vec6& eps, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1), beta = s.beta(t);
  if (1.0 - ab <= 0.0) return Vec6::Zero();
  const Vec6 g0 = ((g - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).cwiseMax(-kMetricClip).cwiseMin(kMetricClip);
  const Vec6 mu = std::sqrt(ab_prev) * beta / (1.0 - ab) * g0 +
                  std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab) * g;
  return mu - g;
}

}  // namespace

// -------------------------------------------------------------- schedules

std::string_view to_string(ScheduleKind k) noexcept {
  switch (k) {
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Custom: return "custom";
  }
  return "?";
}

ScheduleKind schedule_kind_from_string(std::string_view name) {
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "linear") return ScheduleKind::Linear;
  throw Error(ErrorKind::InvalidParameters, "unknown schedule kind '" + std::string(name) + "'");
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw Error(ErrorKind::InvalidParameters, "schedule needs at least one step");
  NoiseSchedule s;
  s.alpha_bar_.assign(1, 1.0);
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw Error(ErrorKind::InvalidParameters, "beta outside [0,1)");
    s.alpha_bar_.push_back(s.alpha_bar_.back() * (1.0 - b));
  }
  s.betas_ = std::move(betas);
  return s;
}

NoiseSchedule NoiseSchedule::cosine(int steps, double offset) {
  if (steps < 1) throw Error(ErrorKind::InvalidParameters, "steps must be positive");
  auto f = [&](double t) {
    const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas;
  for (int t = 1; t <= steps; ++t) betas.push_back(std::min(1.0 - f(t) / f(t - 1), 0.999));
  auto s = from_betas(std::move(betas));
  s.kind_ = ScheduleKind::Cosine;
  return s;
}

NoiseSchedule NoiseSchedule::linear(int steps) {
  if (steps < 1) throw Error(ErrorKind::InvalidParameters, "steps must be positive");
  const double scale = 1000.0 / steps;
  std::vector<double> betas;
  for (int t = 0; t < steps; ++t) {
    const double u = steps == 1 ? 1.0 : static_cast<double>(t) / (steps - 1);
    betas.push_back(std::min(scale * (1e-4 + u * (0.02 - 1e-4)), 0.999));
  }
  auto s = from_betas(std::move(betas));
  s.kind_ = ScheduleKind::Linear;
  return s;
}

NoiseSchedule NoiseSchedule::make(ScheduleKind kind, int steps) {
  switch (kind) {
    case ScheduleKind::Cosine: return cosine(steps);
    case ScheduleKind::Linear: return linear(steps);
    case ScheduleKind::Custom: break;
  }
  throw Error(ErrorKind::InvalidParameters, "custom schedules need explicit betas");
}

double NoiseSchedule::beta(int t) const {
  check_step(*this, t, 1);
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(*this, t, 0);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

// ------------------------------------------------------------ metric frame

CellFrame CellFrame::for_composition(const Composition& c, const ElementTable& table) {
  const double v = estimated_volume_per_atom(c, table) * c.total_atoms();
  const double a2 = std::pow(v, 2.0 / 3.0);
  CellFrame f;
  f.reference = {a2, a2, a2, 0.0, 0.0, 0.0};
  f.scale = 0.25 * a2;
  return f;
}

Vec6 CellFrame::normalise(const Metric6& g) const {
  Vec6 v;
  for (int k = 0; k < 6; ++k) v[k] = (g[static_cast<std::size_t>(k)] - reference[static_cast<std::size_t>(k)]) / scale;
  return v;
}

Metric6 CellFrame::denormalise(const Vec6& g) const {
  Metric6 m;
  for (int k = 0; k < 6; ++k) m[static_cast<std::size_t>(k)] = reference[static_cast<std::size_t>(k)] + scale * g[k];
  return m;
}

Metric6 clamp_metric(const Metric6& g) {
  const Mat3 m = metric_matrix(g);
  // fast path: G - floor*I positive definite means nothing to clamp
  if (Eigen::LLT<Mat3>(m - kMinMetricEigenvalue * Mat3::Identity()).info() == Eigen::Success) return g;
  Eigen::SelfAdjointEigenSolver<Mat3> es(m);
  if (es.eigenvalues().minCoeff() >= kMinMetricEigenvalue) return g;
  const Vec3 ev = es.eigenvalues().cwiseMax(kMinMetricEigenvalue);
  const Mat3 fixed = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return metric_from_matrix(0.5 * (fixed + fixed.transpose()));
}

DiffusionState DiffusionState::from_structure(const CrystalStructure& s, const CellFrame& frame) {
  DiffusionState d;
  d.frame = frame;
  d.species.assign(s.species().begin(), s.species().end());
  d.g = frame.normalise(s.metric());
  d.x.assign(s.frac_coords().begin(), s.frac_coords().end());
  return d;
}

DiffusionState DiffusionState::from_structure(const CrystalStructure& s) {
  return from_structure(s, CellFrame::for_composition(s.composition()));
}

CrystalStructure DiffusionState::to_structure(std::string id) const {
  return CrystalStructure(std::move(id), clamp_metric(frame.denormalise(g)), species, x);
}

// -------------------------------------------------------- simple denoisers

DenoiserUpdate IdentityDenoiser::predict(const DenoiserQuery& query) const {
  DenoiserUpdate u;
  u.d_coords.assign(query.state->x.size(), Vec3::Zero());
  return u;
}

double wrapped_normal_density(double x, double mu, double var) {
  double p = 0.0;
  for (int k = -3; k <= 3; ++k) {
    const double d = x - mu - k;
    p += std::exp(-0.5 * d * d / var);
  }
  return p / std::sqrt(kTwoPi * var);
}

double wrapped_normal_score(double x, double mu, double var) {
  // centre the image sum on the nearest copy so |k| <= 3 covers the mass
  const double r = x - mu - std::round(x - mu);
  double num = 0.0, den = 0.0;
  for (int k = -3; k <= 3; ++k) {
    const double d = r - k;
    const double w = std::exp(-0.5 * d * d / var);
    num += -d / var * w;
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

WrappedGaussianDenoiser::WrappedGaussianDenoiser(std::vector<Vec3> mu, double tau2, Vec6 g0)
    : mu_(std::move(mu)), tau2_(tau2), g0_(g0) {
  if (!(tau2 > 0.0)) throw Error(ErrorKind::InvalidParameters, "target variance must be positive");
}

DenoiserUpdate WrappedGaussianDenoiser::predict(const DenoiserQuery& query) const {
  const auto& s = *query.state;
  const auto& sch = *query.schedule;
  const int t = query.t;
  if (s.x.size() != mu_.size())
    throw Error(ErrorKind::DenoiserContractViolation, "atom count differs from target");
  DenoiserUpdate u;
  const double ab = sch.alpha_bar(t);
  if (1.0 - ab > 0.0) {
    const Vec6 eps = (s.g - std::sqrt(ab) * g0_) / std::sqrt(1.0 - ab);
    u.d_metric = metric_update_from_eps(s.g, eps, t, sch);
  }
  const double var = tau2_ + sch.sigma2(t);
  const double dvar = sch.sigma2(t) - sch.sigma2(t - 1);
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    Vec3 d;
    for (int k = 0; k < 3; ++k) d[k] = dvar * wrapped_normal_score(s.x[i][k], mu_[i][k], var);
    u.d_coords.push_back(d);
  }
  return u;
}

// ------------------------------------------------------ reference denoiser

namespace {

constexpr int kStepFeatures = 7;
constexpr int kCoordFeatures = 6 + kMaxAtomsPerCell + 2 + kStepFeatures + 6 + 6 + 9;
constexpr int kMetricFeatures = 6 + kStepFeatures + 9 + 3;
constexpr std::uint32_t kBlobVersion = 1;
constexpr char kMagic[8] = {'D', 'V', 'G', 'D', 'E', 'N', 'O', 'I'};

void step_features(double* f, int t, int steps) {
  const double u = static_cast<double>(t) / steps;
  f[0] = u;
  for (int k = 0; k < 3; ++k) {
    f[1 + 2 * k] = std::sin(std::numbers::pi * u * (1 << k));
    f[2 + 2 * k] = std::cos(std::numbers::pi * u * (1 << k));
  }
}

void cond_features(double* f, const std::optional<DescriptorVector>& q) {
  for (std::size_t k = 0; k < kDescriptorDim; ++k) f[k] = q ? std::clamp((*q)[k], -5.0, 5.0) : 0.0;
  f[kDescriptorDim] = q ? 1.0 : 0.0;
}

struct Features {
  Eigen::MatrixXd coord;   // atoms x kCoordFeatures
  Eigen::RowVectorXd metric;  // kMetricFeatures
};

Features make_features(const DiffusionState& s, int t, int steps, const std::optional<DescriptorVector>& q,
                       const ElementTable& table) {
  const auto n = static_cast<Eigen::Index>(s.x.size());
  Features f;
  f.coord = Eigen::MatrixXd::Zero(n, kCoordFeatures);
  f.metric = Eigen::RowVectorXd::Zero(kMetricFeatures);
  double tf[kStepFeatures], cf[kDescriptorDim + 1];
  step_features(tf, t, steps);
  cond_features(cf, q);
  Eigen::Matrix<double, 1, 6> mean_trig = Eigen::Matrix<double, 1, 6>::Zero();
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      mean_trig[2 * k] += std::sin(kTwoPi * s.x[static_cast<std::size_t>(i)][k]) / n;
      mean_trig[2 * k + 1] += std::cos(kTwoPi * s.x[static_cast<std::size_t>(i)][k]) / n;
    }
  double mean_r = 0.0, mean_chi = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& el = table.by_z(s.species[static_cast<std::size_t>(i)]);
    mean_r += el.covalent_radius / n;
    mean_chi += el.electronegativity / 4.0 / n;
    int c = 0;
    for (int k = 0; k < 3; ++k) {
      f.coord(i, c++) = std::sin(kTwoPi * s.x[static_cast<std::size_t>(i)][k]);
      f.coord(i, c++) = std::cos(kTwoPi * s.x[static_cast<std::size_t>(i)][k]);
    }
    f.coord(i, c + std::min<Eigen::Index>(i, kMaxAtomsPerCell - 1)) = 1.0;
    c += kMaxAtomsPerCell;
    f.coord(i, c++) = el.covalent_radius;
    f.coord(i, c++) = el.electronegativity / 4.0;
    for (double v : tf) f.coord(i, c++) = v;
    for (int k = 0; k < 6; ++k) f.coord(i, c++) = s.g[k];
    for (int k = 0; k < 6; ++k) f.coord(i, c++) = mean_trig[k];
    for (double v : cf) f.coord(i, c++) = v;
  }
  int c = 0;
  for (int k = 0; k < 6; ++k) f.metric[c++] = s.g[k];
  for (double v : tf) f.metric[c++] = v;
  for (double v : cf) f.metric[c++] = v;
  f.metric[c++] = static_cast<double>(n) / kMaxAtomsPerCell;
  f.metric[c++] = mean_r;
  f.metric[c++] = mean_chi;
  return f;
}

struct TrainingItem {
  DiffusionState clean;
  DescriptorVector q;
};

// Draws (x_t, targets) for one item; targets are the metric noise and the
// per-atom wrapped-kernel noise estimate -sigma * score.
struct Draw {
  Features feats;
  Vec6 eps_g;
  Eigen::MatrixXd eps_x;
};

Draw make_draw(const TrainingItem& item, int t, const NoiseSchedule& sch, bool drop_cond,
               std::mt19937_64& rng, const ElementTable& table) {
  const double ab = sch.alpha_bar(t), sig2 = sch.sigma2(t), sig = std::sqrt(sig2);
  DiffusionState s = item.clean;
  Draw d;
  d.eps_g = normal6(rng);
  s.g = std::sqrt(ab) * item.clean.g + std::sqrt(1.0 - ab) * d.eps_g;
  d.eps_x.resize(static_cast<Eigen::Index>(s.x.size()), 3);
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    s.x[i] = wrap_fractional(item.clean.x[i] + sig * normal3(rng));
    for (int k = 0; k < 3; ++k)
      d.eps_x(static_cast<Eigen::Index>(i), k) = -sig * wrapped_normal_score(s.x[i][k], item.clean.x[i][k], sig2);
  }
  d.feats = make_features(s, t, sch.steps(), drop_cond ? std::nullopt : std::optional(item.q), table);
  return d;
}

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
  template <class T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw Error(ErrorKind::SchemaMismatch, "truncated denoiser blob");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

void write_net(std::vector<std::uint8_t>& out, const detail::Mlp& net) {
  for (std::size_t l = 0; l < net.layers(); ++l) {
    put_bytes(out, net.weights()[l].data(), sizeof(double) * static_cast<std::size_t>(net.weights()[l].size()));
    put_bytes(out, net.biases()[l].data(), sizeof(double) * static_cast<std::size_t>(net.biases()[l].size()));
  }
}

void read_net(Reader& r, detail::Mlp& net) {
  for (std::size_t l = 0; l < net.layers(); ++l) {
    for (Eigen::Index i = 0; i < net.weights()[l].size(); ++i) net.weights()[l].data()[i] = r.get<double>();
    for (Eigen::Index i = 0; i < net.biases()[l].size(); ++i) net.biases()[l].data()[i] = r.get<double>();
  }
}

}  // namespace

struct ReferenceDenoiser::Impl {
  detail::Mlp coord_net;
  detail::Mlp metric_net;
  std::vector<double> losses;
  int hidden = 64;

  void init(int h, std::uint64_t seed) {
    hidden = h;
    std::mt19937_64 rng(seed);
    coord_net = detail::Mlp({kCoordFeatures, h, h, 3}, rng);
    metric_net = detail::Mlp({kMetricFeatures, h / 2, h / 2, 6}, rng);
  }
};

ReferenceDenoiser::ReferenceDenoiser() : impl_(std::make_unique<Impl>()) { impl_->init(64, 7); }
ReferenceDenoiser::~ReferenceDenoiser() = default;
ReferenceDenoiser::ReferenceDenoiser(const ReferenceDenoiser& o) : impl_(std::make_unique<Impl>(*o.impl_)) {}
ReferenceDenoiser& ReferenceDenoiser::operator=(const ReferenceDenoiser& o) {
  if (this != &o) impl_ = std::make_unique<Impl>(*o.impl_);
  return *this;
}
ReferenceDenoiser::ReferenceDenoiser(ReferenceDenoiser&&) noexcept = default;
ReferenceDenoiser& ReferenceDenoiser::operator=(ReferenceDenoiser&&) noexcept = default;

const std::vector<double>& ReferenceDenoiser::loss_history() const { return impl_->losses; }

DenoiserUpdate ReferenceDenoiser::predict(const DenoiserQuery& query) const {
  const auto& s = *query.state;
  const auto& sch = *query.schedule;
  const int t = query.t;
  check_step(sch, t, 1);
  if (s.x.size() != s.species.size() || s.x.size() > static_cast<std::size_t>(kMaxAtomsPerCell))
    throw Error(ErrorKind::DenoiserContractViolation, "state shape is inconsistent");
  const auto f = make_features(s, t, sch.steps(), query.q, ElementTable::builtin());
  const Eigen::MatrixXd ex = impl_->coord_net.forward(f.coord);
  const Eigen::MatrixXd eg = impl_->metric_net.forward(f.metric);
  DenoiserUpdate u;
  u.d_metric = metric_update_from_eps(s.g, eg.row(0).transpose(), t, sch);
  const double sig2 = sch.sigma2(t);
  const double dvar = sig2 - sch.sigma2(t - 1);
  const double sig = std::sqrt(sig2);
  for (Eigen::Index i = 0; i < ex.rows(); ++i) {
    // eps estimate -> score = -eps / sigma
    const Vec3 e = ex.row(i).transpose();
    u.d_coords.push_back(sig > 0.0 ? Vec3(-dvar / sig * e) : Vec3::Zero());
  }
  return u;
}

std::uint64_t ReferenceDenoiser::schema_hash() const {
  std::string layout = "reference-denoiser/features-v1/coord";
  for (int v : impl_->coord_net.sizes()) layout += ":" + std::to_string(v);
  layout += "/metric";
  for (int v : impl_->metric_net.sizes()) layout += ":" + std::to_string(v);
  return fnv1a(layout);
}

std::vector<std::uint8_t> ReferenceDenoiser::to_bytes() const {
  std::vector<std::uint8_t> out;
  put_bytes(out, kMagic, sizeof(kMagic));
  put(out, kBlobVersion);
  put(out, static_cast<std::uint32_t>(impl_->hidden));
  put(out, schema_hash());
  write_net(out, impl_->coord_net);
  write_net(out, impl_->metric_net);
  put(out, static_cast<std::uint32_t>(impl_->losses.size()));
  for (double l : impl_->losses) put(out, l);
  return out;
}

ReferenceDenoiser ReferenceDenoiser::from_bytes(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorKind::SchemaMismatch, "not a denoiser blob");
  if (r.get<std::uint32_t>() != kBlobVersion) throw Error(ErrorKind::SchemaMismatch, "unsupported blob version");
  const auto hidden = r.get<std::uint32_t>();
  if (hidden < 2 || hidden > 4096) throw Error(ErrorKind::SchemaMismatch, "implausible layer width");
  ReferenceDenoiser d;
  d.impl_->init(static_cast<int>(hidden), 0);
  if (r.get<std::uint64_t>() != d.schema_hash()) throw Error(ErrorKind::SchemaMismatch, "schema hash differs");
  read_net(r, d.impl_->coord_net);
  read_net(r, d.impl_->metric_net);
  const auto nl = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < nl; ++k) d.impl_->losses.push_back(r.get<double>());
  if (r.pos != bytes.size()) throw Error(ErrorKind::SchemaMismatch, "trailing bytes in denoiser blob");
  return d;
}

void ReferenceDenoiser::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ReferenceDenoiser ReferenceDenoiser::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

namespace {

std::vector<TrainingItem> training_items(std::span<const CrystalStructure> data) {
  std::vector<TrainingItem> items;
  for (const auto& s : data) {
    if (s.size() > static_cast<std::size_t>(kMaxAtomsPerCell))
      throw Error(ErrorKind::InvalidStructure, "structure exceeds the per-cell atom limit");
    items.push_back({DiffusionState::from_structure(s), compute_descriptors(s)});
  }
  return items;
}

struct BatchLoss {
  double loss = 0.0;
  detail::Mlp::Grad coord, metric;
};

BatchLoss batch_loss(const ReferenceDenoiser::Impl& impl, const std::vector<Draw>& draws, bool with_grad) {
  Eigen::Index rows = 0;
  for (const auto& d : draws) rows += d.feats.coord.rows();
  Eigen::MatrixXd xc(rows, kCoordFeatures), yc(rows, 3);
  Eigen::MatrixXd xm(static_cast<Eigen::Index>(draws.size()), kMetricFeatures), ym(xm.rows(), 6);
  Eigen::Index r = 0;
  for (std::size_t k = 0; k < draws.size(); ++k) {
    const auto& d = draws[k];
    xc.middleRows(r, d.feats.coord.rows()) = d.feats.coord;
    yc.middleRows(r, d.eps_x.rows()) = d.eps_x;
    r += d.feats.coord.rows();
    xm.row(static_cast<Eigen::Index>(k)) = d.feats.metric;
    ym.row(static_cast<Eigen::Index>(k)) = d.eps_g.transpose();
  }
  detail::Mlp::Tape tc, tm;
  const Eigen::MatrixXd pc = impl.coord_net.forward(xc, &tc);
  const Eigen::MatrixXd pm = impl.metric_net.forward(xm, &tm);
  const Eigen::MatrixXd rc = pc - yc, rm = pm - ym;
  BatchLoss out;
  const double nc = static_cast<double>(rc.size()), nm = static_cast<double>(rm.size());
  out.loss = rc.squaredNorm() / nc + rm.squaredNorm() / nm;
  if (with_grad) {
    out.coord = impl.coord_net.backward(tc, 2.0 / nc * rc);
    out.metric = impl.metric_net.backward(tm, 2.0 / nm * rm);
  }
  return out;
}

}  // namespace

double ReferenceDenoiser::evaluate_loss(std::span<const CrystalStructure> data, const NoiseSchedule& schedule,
                                        std::uint64_t seed, int draws) const {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "no structures to evaluate");
  const auto items = training_items(data);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  std::uniform_int_distribution<int> step(1, schedule.steps());
  std::vector<Draw> batch;
  for (int k = 0; k < draws; ++k) {
    const auto& item = items[pick(rng)];
    const int t = step(rng);
    batch.push_back(make_draw(item, t, schedule, false, rng, ElementTable::builtin()));
  }
  return batch_loss(*impl_, batch, false).loss;
}

ReferenceDenoiser train_reference_denoiser(std::span<const CrystalStructure> dataset,
                                           const NoiseSchedule& schedule,
                                           const DenoiserTrainingConfig& config) {
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "cannot train on an empty dataset");
  if (config.epochs < 1 || config.batch_size < 1 || config.batches_per_epoch < 1 || config.hidden < 2)
    throw Error(ErrorKind::InvalidParameters, "training sizes must be positive");
  ReferenceDenoiser d;
  d.impl_->init(config.hidden, config.seed);
  return refit_reference_denoiser(d, dataset, schedule, config);
}

ReferenceDenoiser refit_reference_denoiser(const ReferenceDenoiser& start,
                                           std::span<const CrystalStructure> dataset,
                                           const NoiseSchedule& schedule,
                                           const DenoiserTrainingConfig& config) {
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "cannot train on an empty dataset");
  if (config.epochs < 1 || config.batch_size < 1 || config.batches_per_epoch < 1)
    throw Error(ErrorKind::InvalidParameters, "training sizes must be positive");
  const auto items = training_items(dataset);
  ReferenceDenoiser d = start;
  detail::Adam opt_c(d.impl_->coord_net, config.learning_rate);
  detail::Adam opt_m(d.impl_->metric_net, config.learning_rate);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  std::uniform_int_distribution<int> step(1, schedule.steps());
  std::bernoulli_distribution drop(config.condition_dropout);
  const auto& table = ElementTable::builtin();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // cosine decay keeps late epochs from bouncing
    const double lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / config.epochs)));
    opt_c.set_lr(lr);
    opt_m.set_lr(lr);
    double total = 0.0;
    for (int b = 0; b < config.batches_per_epoch; ++b) {
      std::vector<Draw> batch;
      for (int k = 0; k < config.batch_size; ++k) {
        const auto& item = items[pick(rng)];
        const int t = step(rng);
        const bool dc = drop(rng);
        batch.push_back(make_draw(item, t, schedule, dc, rng, table));
      }
      const auto bl = batch_loss(*d.impl_, batch, true);
      opt_c.step(d.impl_->coord_net, bl.coord);
      opt_m.step(d.impl_->metric_net, bl.metric);
      total += bl.loss;
    }
    d.impl_->losses.push_back(total / config.batches_per_epoch);
  }
  return d;
}

// ----------------------------------------------------------------- process

DiffusionState forward_noise(const DiffusionState& s, int t, const NoiseSchedule& schedule,
                             std::mt19937_64& rng) {
  check_step(schedule, t, 0);
  if (t == 0) return s;
  const double ab = schedule.alpha_bar(t);
  const double sig = std::sqrt(schedule.sigma2(t));
  DiffusionState out = s;
  out.g = std::sqrt(ab) * s.g + std::sqrt(1.0 - ab) * normal6(rng);
  const Metric6 clamped = clamp_metric(out.frame.denormalise(out.g));
  out.g = out.frame.normalise(clamped);
  for (auto& x : out.x) x = wrap_fractional(x + sig * normal3(rng));
  return out;
}

CrystalStructure forward_noise(const CrystalStructure& s, int t, const NoiseSchedule& schedule,
                               std::mt19937_64& rng) {
  return forward_noise(DiffusionState::from_structure(s), t, schedule, rng).to_structure(s.id());
}

namespace {

void check_update(const DenoiserUpdate& u, const DiffusionState& s) {
  if (u.d_coords.size() != s.x.size())
    throw Error(ErrorKind::DenoiserContractViolation,
                "denoiser returned " + std::to_string(u.d_coords.size()) + " coordinate updates for " +
                    std::to_string(s.x.size()) + " atoms");
  if (!u.d_metric.allFinite()) throw Error(ErrorKind::DenoiserContractViolation, "non-finite metric update");
  for (const auto& d : u.d_coords)
    if (!d.allFinite()) throw Error(ErrorKind::DenoiserContractViolation, "non-finite coordinate update");
}

}  // namespace

DiffusionState reverse_step(const DiffusionState& s, int t, const NoiseSchedule& schedule,
                            const Denoiser& denoiser, const ConditioningContext& ctx,
                            std::mt19937_64& rng) {
  check_step(schedule, t, 1);
  if (!(ctx.lambda >= 0.0 && ctx.lambda <= 1.0))
    throw Error(ErrorKind::InvalidParameters, "conditioning strength outside [0,1]");
  DenoiserQuery query{&s, t, &schedule, std::nullopt};
  DenoiserUpdate u;
  if (ctx.lambda < 1.0) {
    u = denoiser.predict(query);
    check_update(u, s);
  }
  if (ctx.lambda > 0.0) {
    query.q = ctx.q ? *ctx.q : compute_descriptors(s.to_structure("q"));
    auto c = denoiser.predict(query);
    check_update(c, s);
    if (ctx.lambda == 1.0) {
      u = std::move(c);
    } else {
      const double l = ctx.lambda;
      u.d_metric = (1.0 - l) * u.d_metric + l * c.d_metric;
      for (std::size_t i = 0; i < u.d_coords.size(); ++i)
        u.d_coords[i] = (1.0 - l) * u.d_coords[i] + l * c.d_coords[i];
    }
  }

  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t - 1);
  const double beta = schedule.beta(t);
  const double metric_var = 1.0 - ab > 0.0 ? beta * (1.0 - ab_prev) / (1.0 - ab) : 0.0;
  const double s2 = schedule.sigma2(t), s2_prev = schedule.sigma2(t - 1);
  const double coord_var = s2 > 0.0 ? s2_prev * (s2 - s2_prev) / s2 : 0.0;

  DiffusionState out = s;
  out.g = s.g + u.d_metric;
  if (metric_var > 0.0) out.g += std::sqrt(metric_var) * normal6(rng);
  const Metric6 m = out.frame.denormalise(out.g);
  const Metric6 clamped = clamp_metric(m);
  if (clamped != m) out.g = out.frame.normalise(clamped);
  for (std::size_t i = 0; i < out.x.size(); ++i) {
    Vec3 x = s.x[i] + u.d_coords[i];
    if (coord_var > 0.0) x += std::sqrt(coord_var) * normal3(rng);
    out.x[i] = wrap_fractional(x);
  }
  return out;
}

// ---------------------------------------------------------------- sampling

namespace {

std::mt19937_64 chain_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// Coordinates cannot repair an atom overlapping its own periodic image, nor
// a cell too small to hold the atoms at all.
bool projection_feasible(const CrystalStructure& s, double alpha, const ElementTable& table) {
  const Mat3 g = s.metric_matrix();
  double shortest = std::numeric_limits<double>::infinity();
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b)
      for (int c = -1; c <= 1; ++c) {
        if (a == 0 && b == 0 && c == 0) continue;
        const Vec3 n(a, b, c);
        shortest = std::min(shortest, n.dot(g * n));
      }
  double rmax = 0.0, excluded = 0.0;
  for (int z : s.species()) {
    const double r = alpha * table.by_z(z).covalent_radius;
    rmax = std::max(rmax, r);
    excluded += 4.0 / 3.0 * std::numbers::pi * r * r * r;
  }
  // spheres of radius alpha*r cannot pack beyond the close-packed fraction
  return std::sqrt(shortest) >= 2.0 * rmax && excluded <= 0.74 * s.volume();
}

std::optional<CrystalStructure> run_chain(const Composition& comp, const ConditioningContext& ctx,
                                          const Denoiser& denoiser, const NoiseSchedule& schedule,
                                          const SamplerConfig& config, std::size_t index) {
  const ElementTable& table = config.table ? *config.table : ElementTable::builtin();
  auto rng = chain_rng(config.seed, index);
  DiffusionState s;
  s.frame = CellFrame::for_composition(comp, table);
  for (const auto& e : comp.entries())
    for (int k = 0; k < e.count; ++k) s.species.push_back(e.z);
  s.g = normal6(rng);
  s.g = s.frame.normalise(clamp_metric(s.frame.denormalise(s.g)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < s.species.size(); ++i) {
    const double a = u(rng), b = u(rng), c = u(rng);
    s.x.emplace_back(a, b, c);
  }
  const std::string id = config.id_prefix + "-" + std::to_string(index);
  for (int t = schedule.steps(); t >= 1; --t) {
    s = reverse_step(s, t, schedule, denoiser, ctx, rng);
    const auto cur = s.to_structure(id);
    if (!projection_feasible(cur, config.min_distance_alpha, table)) continue;
    if (auto p = project_min_distance(cur, config.min_distance_alpha, config.projection_iters, 0.25, table))
      s.x.assign(p->frac_coords().begin(), p->frac_coords().end());
  }
  auto out = s.to_structure(id);
  if (!check_min_distances(out, config.min_distance_alpha, table).pass) return std::nullopt;
  return out;
}

}  // namespace

SampleResult sample(std::size_t n, const Composition& composition, const ConditioningContext& ctx,
                    const Denoiser& denoiser, const NoiseSchedule& schedule, const SamplerConfig& config) {
  if (n == 0) throw Error(ErrorKind::InvalidParameters, "sample count must be positive");
  if (composition.empty()) throw Error(ErrorKind::EmptyComposition, "nothing to sample");
  SampleResult r;
  if (!ctx.lambda_in_recommended_range())
    r.warnings.push_back("conditioning strength " + std::to_string(ctx.lambda) + " outside [0.2, 0.4]");
  for (std::size_t k = 0; k < n; ++k) {
    ++r.attempted;
    auto s = run_chain(composition, ctx, denoiser, schedule, config, k);
    if (s)
      r.structures.push_back(std::move(*s));
    else
      ++r.rejected;
  }
  return r;
}

SampleResult sample_two_stage(std::size_t n, const Composition& composition, const ConditioningContext& ctx,
                              const Denoiser& denoiser, const NoiseSchedule& schedule,
                              const SamplerConfig& config, int oversample) {
  if (oversample < 1) throw Error(ErrorKind::InvalidParameters, "oversample must be >= 1");
  const DescriptorVector target = ctx.q ? *ctx.q : composition_descriptors(composition);
  ConditioningContext weak{target, 0.1};
  auto r = sample(n * static_cast<std::size_t>(oversample), composition, weak, denoiser, schedule, config);
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t k = 0; k < r.structures.size(); ++k) {
    const auto d = compute_descriptors(r.structures[k]);
    double dist = 0.0;
    for (std::size_t c = 0; c < kDescriptorDim; ++c) dist += (d[c] - target[c]) * (d[c] - target[c]);
    order.emplace_back(dist, k);
  }
  std::sort(order.begin(), order.end());
  SampleResult out;
  out.attempted = r.attempted;
  out.rejected = r.rejected;
  out.warnings = std::move(r.warnings);
  for (std::size_t k = 0; k < std::min(n, order.size()); ++k)
    out.structures.push_back(std::move(r.structures[order[k].second]));
  return out;
}

}  // namespace divergent
