#pragma once

// Drift-augmented linear-Gaussian model of tilt-induced image shifts.
//
// State layout (normalized): the l aberration slots, the rotation
// misalignment phi, then the drift chain of Re c11 (derivatives 1..b) and the
// drift chain of Im c11. All covariances and priors in ModelConfig are
// expressed in normalized units; state_scales map a normalized slot to its
// physical value and measurement_scale does the same for image shifts.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "tiltab/aberration.hpp"
#include "tiltab/errors.hpp"
#include "tiltab/random.hpp"

namespace tiltab {

// Per-step tilt magnitude limit. Steps with an explicit value use it; all
// other steps follow a linear ramp from max_tilt/10 at k = 0 to max_tilt at
// k = ramp_steps, constant afterwards.
struct TiltBoundSchedule {
  double max_tilt = 5e-3;
  int ramp_steps = 10;
  std::vector<double> explicit_bounds;

  double bound(int k) const {
    if (k >= 0 && static_cast<std::size_t>(k) < explicit_bounds.size()) {
      return explicit_bounds[static_cast<std::size_t>(k)];
    }
    if (ramp_steps <= 0 || k >= ramp_steps) return max_tilt;
    return max_tilt * (0.1 + 0.9 * static_cast<double>(k) / static_cast<double>(ramp_steps));
  }

  std::vector<double> bounds(int first, int count) const {
    std::vector<double> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = bound(first + i);
    return out;
  }
};

struct ModelConfig {
  int max_order = 4;
  int drift_order = 2;
  double sample_time = 1.0;         // seconds
  Eigen::VectorXd state_scales;     // physical units per normalized unit
  double measurement_scale = 1e-9;  // meters per normalized shift unit
  Eigen::VectorXd process_noise_diag;
  Eigen::Matrix2d measurement_noise = Eigen::Matrix2d::Identity();
  Eigen::VectorXd prior_mean;
  Eigen::MatrixXd prior_cov;
  TiltBoundSchedule tilt_bounds;
  // Design weight W for the schedule objective; empty means (1/d)·I.
  Eigen::MatrixXd weight;

  int aberration_dim() const { return enumerate_basis(max_order).real_dim(); }
  int state_dim() const { return aberration_dim() + 1 + 2 * drift_order; }
};

enum class SlotKind { kAberration, kRotation, kDriftReal, kDriftImag };

struct StateSlot {
  SlotKind kind = SlotKind::kAberration;
  int aberration = -1;    // position in the basis, aberration slots only
  bool imaginary = false;  // imaginary part of a complex aberration
  int derivative = 0;      // 1..b, drift slots only
  std::string label;
};

class StateLayout {
 public:
  StateLayout() = default;
  StateLayout(const AberrationBasis& basis, int drift_order) : drift_order_(drift_order) {
    const auto labels = basis.slot_labels();
    for (int i = 0; i < basis.size(); ++i) {
      const bool cplx = basis.indices()[static_cast<std::size_t>(i)].is_complex();
      for (int part = 0; part < (cplx ? 2 : 1); ++part) {
        slots_.push_back({SlotKind::kAberration, i, part == 1, 0,
                          labels[static_cast<std::size_t>(basis.offset(i) + part)]});
      }
    }
    aberration_dim_ = basis.real_dim();
    slots_.push_back({SlotKind::kRotation, -1, false, 0, "phi"});
    for (int part = 0; part < 2; ++part) {
      for (int j = 1; j <= drift_order; ++j) {
        slots_.push_back({part == 0 ? SlotKind::kDriftReal : SlotKind::kDriftImag, -1, part == 1, j,
                          std::string(part == 0 ? "Re " : "Im ") + derivative_name(j)});
      }
    }
  }

  int size() const { return static_cast<int>(slots_.size()); }
  int aberration_dim() const { return aberration_dim_; }
  int drift_order() const { return drift_order_; }
  int rotation() const { return aberration_dim_; }
  int drift_real(int derivative) const { return aberration_dim_ + derivative; }
  int drift_imag(int derivative) const { return aberration_dim_ + drift_order_ + derivative; }
  const StateSlot& slot(int i) const { return slots_.at(static_cast<std::size_t>(i)); }
  const std::vector<StateSlot>& slots() const { return slots_; }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& s : slots_) out.push_back(s.label);
    return out;
  }

 private:
  static std::string derivative_name(int j) {
    if (j == 1) return "v";
    if (j == 2) return "a";
    return "d" + std::to_string(j);
  }

  int aberration_dim_ = 0;
  int drift_order_ = 0;
  std::vector<StateSlot> slots_;
};

// Default physical scale of one normalized unit for each state slot.
inline Eigen::VectorXd default_state_scales(int max_order, int drift_order) {
  const AberrationBasis basis(max_order);
  const StateLayout layout(basis, drift_order);
  Eigen::VectorXd s(layout.size());
  for (int i = 0; i < layout.size(); ++i) {
    const StateSlot& slot = layout.slot(i);
    switch (slot.kind) {
      case SlotKind::kAberration: {
        const int m = basis.indices()[static_cast<std::size_t>(slot.aberration)].m;
        s(i) = m <= 2 ? 1e-9 : m == 3 ? 100e-9 : m == 4 ? 10e-6 : std::pow(100.0, m - 4) * 10e-6;
        break;
      }
      case SlotKind::kRotation:
        s(i) = 1e-9;
        break;
      default:
        s(i) = 1e-9;  // 1 nm/s, 1 nm/s^2, ...
        break;
    }
  }
  return s;
}

inline ModelConfig default_config(int max_order = 4, int drift_order = 2) {
  ModelConfig cfg;
  cfg.max_order = max_order;
  cfg.drift_order = drift_order;
  const int d = cfg.state_dim();
  cfg.state_scales = default_state_scales(max_order, drift_order);
  cfg.process_noise_diag = Eigen::VectorXd::Constant(d, 1e-6);
  cfg.measurement_noise = 1e-6 * Eigen::Matrix2d::Identity();
  cfg.prior_mean = Eigen::VectorXd::Zero(d);
  cfg.prior_cov = Eigen::MatrixXd::Identity(d, d);
  return cfg;
}

namespace detail {

inline bool is_symmetric(const Eigen::MatrixXd& m, double tol = 1e-10) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}

inline double min_eigenvalue(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// Symmetric square root factor L with L·Lᵀ = m for PSD m (zero eigenvalues allowed).
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

inline double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace detail

inline void validate(const ModelConfig& cfg) {
  require(cfg.max_order >= 1 && cfg.max_order <= kMaxSupportedOrder, "config: max_order must be in [1, 8]");
  require(cfg.drift_order >= 0, "config: drift_order must be >= 0");
  require(std::isfinite(cfg.sample_time) && cfg.sample_time > 0.0, "config: sample_time must be positive");
  const int d = cfg.state_dim();
  require(cfg.state_scales.size() == d, "config: state_scales must have length d = " + std::to_string(d));
  require((cfg.state_scales.array() > 0.0).all() && cfg.state_scales.allFinite(),
          "config: state_scales must be positive");
  require(std::isfinite(cfg.measurement_scale) && cfg.measurement_scale > 0.0,
          "config: measurement_scale must be positive");
  require(cfg.process_noise_diag.size() == d, "config: process_noise_diag must have length d");
  require((cfg.process_noise_diag.array() >= 0.0).all(), "config: process noise must be non-negative");
  require(cfg.measurement_noise.allFinite() && detail::is_symmetric(cfg.measurement_noise),
          "config: measurement_noise must be symmetric");
  require(detail::min_eigenvalue(cfg.measurement_noise) > 0.0, "config: measurement_noise must be positive definite");
  require(cfg.prior_mean.size() == d, "config: prior_mean must have length d");
  require(cfg.prior_cov.rows() == d && cfg.prior_cov.cols() == d, "config: prior_cov must be d x d");
  require(detail::is_symmetric(cfg.prior_cov), "config: prior_cov must be symmetric");
  require(detail::min_eigenvalue(cfg.prior_cov) >= -1e-12, "config: prior_cov must be positive semi-definite");
  require(cfg.tilt_bounds.max_tilt >= 0.0 && std::isfinite(cfg.tilt_bounds.max_tilt),
          "config: tilt bound must be non-negative");
  for (double b : cfg.tilt_bounds.explicit_bounds) {
    require(b >= 0.0 && std::isfinite(b), "config: tilt bounds must be non-negative");
  }
  if (cfg.weight.size() != 0) {
    require(cfg.weight.rows() == d && cfg.weight.cols() == d, "config: weight must be d x d");
    require(detail::is_symmetric(cfg.weight), "config: weight must be symmetric");
    require(detail::min_eigenvalue(cfg.weight) >= -1e-12, "config: weight must be positive semi-definite");
  }
}

// Normalized state-space model x_{k+1} = A x_k + ξ_k, y_k = C(θ_k) x_k + ε_k.
class LinearModel {
 public:
  explicit LinearModel(ModelConfig config)
      : config_(std::move(config)),
        basis_(config_.max_order),
        table_(basis_),
        layout_(basis_, config_.drift_order) {
    validate(config_);
    const int d = layout_.size();
    const int b = config_.drift_order;
    const double tau = config_.sample_time;
    const Eigen::VectorXd& s = config_.state_scales;

    Eigen::MatrixXd a_phys = Eigen::MatrixXd::Identity(d, d);
    const int re = basis_.slot(1, 1, false);
    const int im = basis_.slot(1, 1, true);
    for (int j = 1; j <= b; ++j) {
      const double coupling = std::pow(tau, j) / detail::factorial(j);
      a_phys(re, layout_.drift_real(j)) = coupling;
      a_phys(im, layout_.drift_imag(j)) = coupling;
      for (int i = 1; i < j; ++i) {
        const double chain = std::pow(tau, j - i) / detail::factorial(j - i);
        a_phys(layout_.drift_real(i), layout_.drift_real(j)) = chain;
        a_phys(layout_.drift_imag(i), layout_.drift_imag(j)) = chain;
      }
    }
    transition_ = s.cwiseInverse().asDiagonal() * a_phys * s.asDiagonal();
    transition_.diagonal().setOnes();  // rescaling can leave 1 ± ulp
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        if (i != j && transition_(i, j) != 0.0) couplings_.push_back({i, j, transition_(i, j)});
      }
    }
    process_noise_ = config_.process_noise_diag.asDiagonal();
    measurement_noise_ = 0.5 * (config_.measurement_noise + config_.measurement_noise.transpose());
    prior_mean_ = config_.prior_mean;
    prior_cov_ = 0.5 * (config_.prior_cov + config_.prior_cov.transpose());
    aberration_scale_ = s.head(basis_.real_dim()) / config_.measurement_scale;
    rotation_scale_ = s(layout_.rotation()) / config_.measurement_scale;
    if (config_.weight.size() != 0) {
      weight_ = 0.5 * (config_.weight + config_.weight.transpose());
    } else {
      weight_ = Eigen::MatrixXd::Identity(d, d) / static_cast<double>(d);
    }
  }

  const ModelConfig& config() const { return config_; }
  const AberrationBasis& basis() const { return basis_; }
  const TiltPolynomialTable& table() const { return table_; }
  const StateLayout& layout() const { return layout_; }
  int state_dim() const { return layout_.size(); }
  int aberration_dim() const { return basis_.real_dim(); }

  const Eigen::MatrixXd& transition() const { return transition_; }
  const Eigen::MatrixXd& process_noise() const { return process_noise_; }
  const Eigen::Matrix2d& measurement_noise() const { return measurement_noise_; }
  const Eigen::VectorXd& prior_mean() const { return prior_mean_; }
  const Eigen::MatrixXd& prior_cov() const { return prior_cov_; }
  const Eigen::MatrixXd& default_weight() const { return weight_; }

  // A is unit upper triangular, so A⁻¹·v is a back substitution.
  // A·m without the dense product: A is the identity plus a few drift couplings.
  Eigen::MatrixXd apply_transition(const Eigen::MatrixXd& m) const {
    Eigen::MatrixXd out = m;
    for (const Coupling& e : couplings_) out.row(e.row) += e.value * m.row(e.col);
    return out;
  }

  // A·P·Aᵀ + Σ_ξ, symmetrized.
  Eigen::MatrixXd propagate_cov(const Eigen::MatrixXd& p) const {
    const Eigen::MatrixXd ap = apply_transition(p);
    Eigen::MatrixXd out = ap;
    for (const Coupling& e : couplings_) out.col(e.row) += e.value * ap.col(e.col);
    out.diagonal() += process_noise_.diagonal();
    out.triangularView<Eigen::StrictlyLower>() = out.transpose();
    return out;
  }

  Eigen::MatrixXd solve_transition(const Eigen::MatrixXd& rhs) const {
    return transition_.triangularView<Eigen::UnitUpper>().solve(rhs);
  }

  // [Ψ(θ)·S_aberr | (−ty, tx)ᵀ·s_phi | 0] divided by the measurement scale.
  Eigen::MatrixXd observation(Tilt theta) const {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, state_dim());
    c.leftCols(aberration_dim()) = table_.evaluate(theta) * aberration_scale_.asDiagonal();
    c(0, layout_.rotation()) = -theta.ty * rotation_scale_;
    c(1, layout_.rotation()) = theta.tx * rotation_scale_;
    return c;
  }

  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> observation_gradient(Tilt theta) const {
    auto [px, py] = table_.gradient(theta);
    Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(2, state_dim());
    Eigen::MatrixXd dy = Eigen::MatrixXd::Zero(2, state_dim());
    dx.leftCols(aberration_dim()) = px * aberration_scale_.asDiagonal();
    dy.leftCols(aberration_dim()) = py * aberration_scale_.asDiagonal();
    dx(1, layout_.rotation()) = rotation_scale_;
    dy(0, layout_.rotation()) = -rotation_scale_;
    return {std::move(dx), std::move(dy)};
  }

  // Copy with a different normalized measurement-noise covariance.
  LinearModel with_measurement_noise(const Eigen::Matrix2d& sigma) const {
    ModelConfig cfg = config_;
    cfg.measurement_noise = sigma;
    return LinearModel(std::move(cfg));
  }

  Eigen::VectorXd to_physical(const Eigen::VectorXd& x) const { return config_.state_scales.cwiseProduct(x); }
  Eigen::MatrixXd cov_to_physical(const Eigen::MatrixXd& p) const {
    return config_.state_scales.asDiagonal() * p * config_.state_scales.asDiagonal();
  }

 private:
  struct Coupling {
    int row, col;
    double value;
  };

  ModelConfig config_;
  AberrationBasis basis_;
  TiltPolynomialTable table_;
  StateLayout layout_;
  Eigen::MatrixXd transition_;
  Eigen::MatrixXd process_noise_;
  Eigen::Matrix2d measurement_noise_;
  Eigen::VectorXd prior_mean_;
  Eigen::MatrixXd prior_cov_;
  Eigen::MatrixXd weight_;
  Eigen::VectorXd aberration_scale_;
  double rotation_scale_ = 1.0;
  std::vector<Coupling> couplings_;  // off-diagonal entries of A
};

inline LinearModel build_model(const ModelConfig& config) { return LinearModel(config); }

inline Eigen::MatrixXd observation(const LinearModel& model, Tilt theta) { return model.observation(theta); }

struct SimulatedTrajectory {
  std::vector<Eigen::VectorXd> states;        // x_0 .. x_{N-1}
  std::vector<Eigen::Vector2d> measurements;  // y_0 .. y_{N-1}
};

// Overrides for the noise the simulator injects; unset fields use the
// model's own covariances. Lets the truth differ from the filter's model.
struct SimulationNoise {
  std::optional<Eigen::VectorXd> process_noise_diag;
  std::optional<Eigen::Matrix2d> measurement_noise;
};

// Draws x_{k+1} = A x_k + ξ_k and y_k = C(θ_k) x_k + ε_k from truth_init.
inline SimulatedTrajectory simulate_trajectory(const LinearModel& model, const std::vector<Tilt>& tilts,
                                               const Eigen::VectorXd& truth_init, std::uint64_t seed,
                                               const SimulationNoise& noise = {}) {
  require(truth_init.size() == model.state_dim(), "simulate: initial state must have length d");
  auto rng = make_rng(seed, 0);
  StandardNormal normal;
  const int d = model.state_dim();
  const Eigen::VectorXd process_var = noise.process_noise_diag.value_or(model.process_noise().diagonal());
  require(process_var.size() == d, "simulate: process noise override must have length d");
  const Eigen::VectorXd process_sd = process_var.cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd meas_factor =
      detail::psd_factor(noise.measurement_noise.value_or(model.measurement_noise()));

  SimulatedTrajectory out;
  out.states.reserve(tilts.size());
  out.measurements.reserve(tilts.size());
  Eigen::VectorXd x = truth_init;
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    if (k > 0) {
      Eigen::VectorXd xi(d);
      for (int i = 0; i < d; ++i) xi(i) = normal(rng);
      x = model.transition() * x + process_sd.cwiseProduct(xi);
    }
    Eigen::Vector2d eps(normal(rng), normal(rng));
    out.states.push_back(x);
    out.measurements.push_back(model.observation(tilts[k]) * x + meas_factor * eps);
  }
  return out;
}

// Draw x_0 from the model prior N(prior_mean, prior_cov).
inline Eigen::VectorXd sample_prior(const LinearModel& model, std::mt19937_64& rng) {
  StandardNormal normal;
  Eigen::VectorXd z(model.state_dim());
  for (int i = 0; i < z.size(); ++i) z(i) = normal(rng);
  return model.prior_mean() + detail::psd_factor(model.prior_cov()) * z;
}

}  // namespace tiltab
