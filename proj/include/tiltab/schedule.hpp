#pragma once

// A-optimal tilt-sequence design: weighted-trace cost of the batch posterior
// covariance with its analytic gradient, projected-gradient local search in
// polar coordinates, multi-start, receding-horizon driver and baseline
// patterns.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tiltab/errors.hpp"
#include "tiltab/estimation.hpp"
#include "tiltab/random.hpp"
#include "tiltab/state_space.hpp"

namespace tiltab {

inline constexpr double kFeasibilityTolerance = 1e-12;

struct TiltSequence {
  std::vector<Tilt> tilts;
  std::vector<double> bounds;  // per-step magnitude limit θ̃_k

  int size() const { return static_cast<int>(tilts.size()); }

  bool feasible(double tol = kFeasibilityTolerance) const {
    if (tilts.size() != bounds.size()) return false;
    for (std::size_t k = 0; k < tilts.size(); ++k) {
      if (!(tilts[k].norm() <= bounds[k] + tol)) return false;
    }
    return true;
  }
};

inline TiltSequence make_sequence(std::vector<Tilt> tilts, const TiltBoundSchedule& schedule, int first_step = 0) {
  TiltSequence seq{std::move(tilts), {}};
  seq.bounds = schedule.bounds(first_step, seq.size());
  return seq;
}

// Pull a tilt back onto the disk of radius bound.
inline Tilt project_to_disk(Tilt t, double bound) {
  const double r = t.norm();
  if (r <= bound || r == 0.0) return t;
  const double s = bound / r;
  return {t.tx * s, t.ty * s};
}

struct ScheduleObjective {
  const LinearModel* model = nullptr;
  Eigen::MatrixXd weight;
  Eigen::MatrixXd prior_cov;  // P_{k|k-1} at the start of the horizon

  static ScheduleObjective from_model(const LinearModel& model) {
    return {&model, model.default_weight(), model.prior_cov()};
  }
};

// Cost tr(W·P_{H-1|H-1}) and its gradient for a fixed horizon length, from
// P_{k|k-1} at the start of the horizon. The cost runs the covariance
// recursion; the gradient is its exact adjoint:
//   Λ_{H-1} = W,  dcost/dC_i = −2 K_iᵀ Λ_i P_{i|i},
//   Λ_{i-1} = Aᵀ (I − K_i C_i)ᵀ Λ_i (I − K_i C_i) A,
// with K_i the Kalman gain at step i and Λ_i the sensitivity to P_{i|i}.
// A = I + N with N holding only the drift couplings, so every step is O(d²).
class HorizonProblem {
 public:
  HorizonProblem(const ScheduleObjective& objective, int horizon)
      : model_(objective.model), horizon_(horizon) {
    require(model_ != nullptr, "schedule objective: model is not set");
    require(horizon >= 1, "schedule objective: horizon must be >= 1");
    const int d = model_->state_dim();
    require(objective.weight.rows() == d && objective.weight.cols() == d, "schedule objective: weight must be d x d");
    require(objective.prior_cov.rows() == d && objective.prior_cov.cols() == d,
            "schedule objective: prior covariance must be d x d");
    weight_ = symmetrized(objective.weight);
    prior_cov_ = objective.prior_cov;
    const Eigen::MatrixXd& a = model_->transition();
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        const double v = a(i, j) - (i == j ? 1.0 : 0.0);
        if (v == 0.0) continue;
        const auto slot = [](std::vector<int>& list, int idx) {
          const auto it = std::find(list.begin(), list.end(), idx);
          if (it != list.end()) return static_cast<int>(it - list.begin());
          list.push_back(idx);
          return static_cast<int>(list.size()) - 1;
        };
        coupling_.push_back({i, j, v, slot(rows_, i), slot(cols_, j)});
      }
    }
  }

  int horizon() const { return horizon_; }
  const LinearModel& model() const { return *model_; }
  const Eigen::MatrixXd& weight() const { return weight_; }
  const Eigen::MatrixXd& prior_cov() const { return prior_cov_; }

  Eigen::MatrixXd posterior_cov(std::span<const Tilt> tilts) const {
    check(tilts);
    Eigen::MatrixXd p = prior_cov_, pct;
    Eigen::Matrix<double, Eigen::Dynamic, 2> gain;
    for (std::size_t i = 0; i < tilts.size(); ++i) {
      if (i > 0) predict(p);
      update(p, model_->observation(tilts[i]), pct, gain);
    }
    return p;
  }

  double cost(std::span<const Tilt> tilts) const { return weight_.cwiseProduct(posterior_cov(tilts)).sum(); }

  // Gradient ordered (tx_0, ty_0, tx_1, ty_1, ...).
  double cost_and_gradient(std::span<const Tilt> tilts, Eigen::VectorXd& gradient) const {
    check(tilts);
    const auto h = static_cast<std::size_t>(horizon_);
    std::vector<Eigen::MatrixXd> c(h), post(h);
    std::vector<Eigen::Matrix<double, Eigen::Dynamic, 2>> gain(h);
    Eigen::MatrixXd p = prior_cov_, pct;
    for (std::size_t i = 0; i < h; ++i) {
      if (i > 0) predict(p);
      c[i] = model_->observation(tilts[i]);
      update(p, c[i], pct, gain[i]);
      post[i] = p;
    }
    gradient.resize(2 * horizon_);
    Eigen::MatrixXd lambda = weight_;
    for (std::size_t k = h; k-- > 0;) {
      const Eigen::Matrix<double, 2, Eigen::Dynamic> kl = gain[k].transpose().lazyProduct(lambda);
      const Eigen::MatrixXd m = -2.0 * kl.lazyProduct(post[k]);
      const auto [dx, dy] = model_->observation_gradient(tilts[k]);
      gradient(static_cast<Eigen::Index>(2 * k)) = dx.cwiseProduct(m).sum();
      gradient(static_cast<Eigen::Index>(2 * k + 1)) = dy.cwiseProduct(m).sum();
      if (k > 0) {
        // (I − KC)ᵀ Λ (I − KC) = Λ − CᵀUᵀ − UC + Cᵀ(KᵀU)C with U = ΛK.
        const Eigen::Matrix<double, Eigen::Dynamic, 2> u = lambda.lazyProduct(gain[k]);
        const Eigen::Matrix2d ktu = gain[k].transpose() * u;
        const Eigen::MatrixXd uc = u.lazyProduct(c[k]);
        lambda -= uc + uc.transpose();
        const Eigen::Matrix<double, 2, Eigen::Dynamic> kc = ktu * c[k];
        lambda.noalias() += c[k].transpose().lazyProduct(kc);
        adjoint_predict(lambda);
        lambda.triangularView<Eigen::StrictlyUpper>() = lambda.transpose();
      }
    }
    return weight_.cwiseProduct(post.back()).sum();
  }

 private:
  struct Coupling {
    int row;
    int col;
    double value;
    int row_slot;  // position of row in rows_
    int col_slot;  // position of col in cols_
  };

  void check(std::span<const Tilt> tilts) const {
    require(static_cast<int>(tilts.size()) == horizon_, "schedule objective: sequence length differs from horizon");
  }

  // P <- (I + N) P (I + N)ᵀ + Σ_ξ. NP is nonzero only on the rows of N.
  void predict(Eigen::MatrixXd& p) const {
    const auto k = static_cast<Eigen::Index>(rows_.size());
    Eigen::MatrixXd np = Eigen::MatrixXd::Zero(p.rows(), k);  // (NP)ᵀ restricted to rows_
    for (const Coupling& e : coupling_) np.col(e.row_slot) += e.value * p.col(e.col);
    Eigen::MatrixXd npn = Eigen::MatrixXd::Zero(k, k);
    for (const Coupling& e : coupling_) npn.col(e.row_slot) += e.value * np.row(e.col).transpose();
    for (Eigen::Index a = 0; a < k; ++a) {
      p.col(rows_[static_cast<std::size_t>(a)]) += np.col(a);
      p.row(rows_[static_cast<std::size_t>(a)]) += np.col(a).transpose();
    }
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) {
        p(rows_[static_cast<std::size_t>(a)], rows_[static_cast<std::size_t>(b)]) += npn(a, b);
      }
    }
    p += model_->process_noise();
  }

  // Λ <- (I + N)ᵀ Λ (I + N). ΛN is nonzero only on the columns of N.
  void adjoint_predict(Eigen::MatrixXd& lambda) const {
    const auto k = static_cast<Eigen::Index>(cols_.size());
    Eigen::MatrixXd ln = Eigen::MatrixXd::Zero(lambda.rows(), k);
    for (const Coupling& e : coupling_) ln.col(e.col_slot) += e.value * lambda.col(e.row);
    Eigen::MatrixXd ntln = Eigen::MatrixXd::Zero(k, k);
    for (const Coupling& e : coupling_) ntln.row(e.col_slot) += e.value * ln.row(e.row);
    for (Eigen::Index a = 0; a < k; ++a) {
      lambda.col(cols_[static_cast<std::size_t>(a)]) += ln.col(a);
      lambda.row(cols_[static_cast<std::size_t>(a)]) += ln.col(a).transpose();
    }
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) {
        lambda(cols_[static_cast<std::size_t>(a)], cols_[static_cast<std::size_t>(b)]) += ntln(a, b);
      }
    }
  }

  // Optimal-gain update P <- P − K (P Cᵀ)ᵀ.
  void update(Eigen::MatrixXd& p, const Eigen::MatrixXd& c, Eigen::MatrixXd& pct,
              Eigen::Matrix<double, Eigen::Dynamic, 2>& gain) const {
    pct.noalias() = p.lazyProduct(c.transpose());
    Eigen::Matrix2d s = c.lazyProduct(pct) + model_->measurement_noise();
    s(0, 1) = s(1, 0) = 0.5 * (s(0, 1) + s(1, 0));
    const Eigen::LLT<Eigen::Matrix2d> llt(s);
    if (llt.info() != Eigen::Success) {
      throw SingularInnovation("kalman update: innovation covariance is not positive definite");
    }
    gain = llt.solve(pct.transpose()).transpose();
    p.noalias() -= gain.lazyProduct(pct.transpose());
    p.triangularView<Eigen::StrictlyUpper>() = p.transpose();
  }

  const LinearModel* model_;
  int horizon_;
  Eigen::MatrixXd weight_;
  Eigen::MatrixXd prior_cov_;
  std::vector<Coupling> coupling_;
  std::vector<int> rows_, cols_;  // distinct rows and columns of N
};

inline double schedule_cost(const ScheduleObjective& objective, const TiltSequence& seq) {
  return HorizonProblem(objective, seq.size()).cost(seq.tilts);
}

inline Eigen::VectorXd schedule_gradient(const ScheduleObjective& objective, const TiltSequence& seq) {
  Eigen::VectorXd g;
  HorizonProblem(objective, seq.size()).cost_and_gradient(seq.tilts, g);
  return g;
}

// The same gradient from the one-shot batch correction, for cross-checking.
// With Z = Σ⁻¹G and P = P₋ − GᵀZ, a change in C(θ_i) moves G and Σ:
//   d tr(WP) = −2⟨dG, ZW⟩ + ⟨dΣ, ZWZᵀ⟩,
// and both terms reduce to ⟨dC_i, M_i⟩ for a 2 x d matrix M_i. With Σ_ξ = 0
// this is −2⟨dC̄, Σ⁻¹C̄P₋WP⟩.
inline Eigen::VectorXd batch_schedule_gradient(const ScheduleObjective& objective, const TiltSequence& seq) {
  require(objective.model != nullptr, "schedule objective: model is not set");
  using T = BatchScalar;
  const LinearModel& model = *objective.model;
  const int n = seq.size();
  const int d = model.state_dim();
  const auto e = detail::joint_correction<T>(model, seq.tilts, objective.prior_cov);
  const MatrixT<T> w = symmetrized(objective.weight).cast<T>();
  const MatrixT<T> zw = e.gain_t * w;
  const MatrixT<T> v = zw * e.gain_t.transpose();
  Eigen::VectorXd gradient(2 * n);
  for (int i = 0; i < n; ++i) {
    // (ZW)_i Cov(x_i, x_{N-1})ᵀ = (ZW)_i A^{N-1-i} P_{i|-1}
    MatrixT<T> row = zw.middleRows(2 * i, 2);
    for (int j = i; j < n - 1; ++j) row = row * e.transition;
    const MatrixT<T> m = T(-2) * row * e.predicted[static_cast<std::size_t>(i)] +
                         T(2) * v.middleRows(2 * i, 2) * e.cross.middleCols(static_cast<Eigen::Index>(i) * d, d);
    const Eigen::MatrixXd md = m.template cast<double>();
    const auto [dx, dy] = model.observation_gradient(seq.tilts[static_cast<std::size_t>(i)]);
    gradient(2 * i) = dx.cwiseProduct(md).sum();
    gradient(2 * i + 1) = dy.cwiseProduct(md).sum();
  }
  return gradient;
}

// Polar chart. r = 0 maps to psi = 0.
struct PolarSequence {
  Eigen::VectorXd r;
  Eigen::VectorXd psi;
};

inline PolarSequence to_polar(std::span<const Tilt> tilts) {
  PolarSequence out{Eigen::VectorXd(static_cast<Eigen::Index>(tilts.size())),
                    Eigen::VectorXd(static_cast<Eigen::Index>(tilts.size()))};
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    const double r = tilts[k].norm();
    double psi = r == 0.0 ? 0.0 : std::atan2(tilts[k].ty, tilts[k].tx);
    if (psi < 0.0) psi += 2.0 * std::numbers::pi;
    out.r(static_cast<Eigen::Index>(k)) = r;
    out.psi(static_cast<Eigen::Index>(k)) = psi;
  }
  return out;
}

inline std::vector<Tilt> from_polar(const Eigen::VectorXd& r, const Eigen::VectorXd& psi) {
  require(r.size() == psi.size(), "from_polar: r and psi differ in length");
  std::vector<Tilt> out(static_cast<std::size_t>(r.size()));
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    out[static_cast<std::size_t>(k)] = {r(k) * std::cos(psi(k)), r(k) * std::sin(psi(k))};
  }
  return out;
}

inline double wrap_angle(double psi) {
  const double two_pi = 2.0 * std::numbers::pi;
  psi = std::fmod(psi, two_pi);
  return psi < 0.0 ? psi + two_pi : psi;
}

struct LocalSolverSettings {
  int max_iterations = 500;
  double gradient_tolerance = 1e-8;
  double relative_decrease_tolerance = 1e-10;
  double initial_step = 1.0;
  double backtrack_factor = 0.5;
  double sufficient_decrease = 1e-4;
  int max_backtracks = 60;
  // Start each line search at twice the previously accepted step instead of initial_step.
  bool expand_step = true;
  // Curvature pairs kept for an L-BFGS scaling of the search direction on the
  // free variables; 0 gives the plain projected gradient.
  int lbfgs_memory = 8;
  double singular_radius = 1e-9;  // normalized radius below which the polar gradient is unreliable
};

struct SolverDiagnostics {
  int starts_tried = 0;
  int best_start = 0;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;          // projected-gradient norm at the returned iterate
  std::vector<double> iteration_costs;  // cost after each accepted iteration, starting with the initial cost
};

struct ScheduleResult {
  TiltSequence sequence;
  double cost = 0.0;                   // tr(W P) at the end of the (horizon) sequence
  std::vector<double> cost_trajectory;  // tr(W P_{k|k}) along the sequence
  SolverDiagnostics diagnostics;
  // Receding-horizon runs only: per committed step.
  std::vector<SolverDiagnostics> step_diagnostics;
};

namespace detail {

// Optimization variables: normalized radius u_k = r_k/θ̃_k in [0, 1] and the angle ψ_k.
struct PolarPoint {
  Eigen::VectorXd u;
  Eigen::VectorXd psi;
};

inline PolarPoint to_normalized_polar(std::span<const Tilt> tilts, const std::vector<double>& bounds) {
  const PolarSequence polar = to_polar(tilts);
  PolarPoint p{Eigen::VectorXd(polar.r.size()), polar.psi};
  for (Eigen::Index k = 0; k < polar.r.size(); ++k) {
    const double b = bounds[static_cast<std::size_t>(k)];
    p.u(k) = b > 0.0 ? std::clamp(polar.r(k) / b, 0.0, 1.0) : 0.0;
  }
  return p;
}

inline std::vector<Tilt> from_normalized_polar(const PolarPoint& p, const std::vector<double>& bounds) {
  std::vector<Tilt> out(static_cast<std::size_t>(p.u.size()));
  for (Eigen::Index k = 0; k < p.u.size(); ++k) {
    const double r = bounds[static_cast<std::size_t>(k)] * p.u(k);
    out[static_cast<std::size_t>(k)] = {r * std::cos(p.psi(k)), r * std::sin(p.psi(k))};
  }
  return out;
}

// Chain rule from the Cartesian gradient. At the chart singularity the angle
// is turned towards steepest descent so the radial derivative carries the
// full Cartesian slope.
inline void polar_gradient(const Eigen::VectorXd& cart, PolarPoint& p, const std::vector<double>& bounds,
                           double singular_radius, Eigen::VectorXd& gu, Eigen::VectorXd& gpsi) {
  const Eigen::Index n = p.u.size();
  gu.resize(n);
  gpsi.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double b = bounds[static_cast<std::size_t>(k)];
    const double gx = cart(2 * k), gy = cart(2 * k + 1);
    if (p.u(k) < singular_radius) {
      const double slope = std::hypot(gx, gy);
      if (slope > 0.0) p.psi(k) = wrap_angle(std::atan2(-gy, -gx));
      gu(k) = -b * slope;
      gpsi(k) = 0.0;
      continue;
    }
    const double c = std::cos(p.psi(k)), s = std::sin(p.psi(k));
    gu(k) = b * (gx * c + gy * s);
    gpsi(k) = b * p.u(k) * (-gx * s + gy * c);
  }
}

inline PolarPoint projected_step(const PolarPoint& p, const Eigen::VectorXd& gu, const Eigen::VectorXd& gpsi,
                                 double step) {
  PolarPoint q{(p.u - step * gu).cwiseMax(0.0).cwiseMin(1.0), p.psi - step * gpsi};
  return q;
}

}  // namespace detail

namespace detail {

// Limited-memory curvature pairs over the stacked (u, ψ) variables.
class LbfgsMemory {
 public:
  explicit LbfgsMemory(int capacity) : capacity_(capacity) {}

  void clear() {
    s_.clear();
    y_.clear();
  }

  void push(Eigen::VectorXd s, Eigen::VectorXd y) {
    if (capacity_ <= 0) return;
    const double sy = s.dot(y);
    if (!(sy > 1e-12 * s.norm() * y.norm())) return;
    if (static_cast<int>(s_.size()) == capacity_) {
      s_.erase(s_.begin());
      y_.erase(y_.begin());
    }
    s_.push_back(std::move(s));
    y_.push_back(std::move(y));
  }

  // −H·g on the free coordinates; fixed coordinates stay at zero.
  Eigen::VectorXd direction(const Eigen::VectorXd& g, const Eigen::Array<bool, Eigen::Dynamic, 1>& free) const {
    const auto mask = free.cast<double>().matrix();
    Eigen::VectorXd q = g.cwiseProduct(mask);
    const std::size_t m = s_.size();
    std::vector<double> alpha(m), rho(m);
    for (std::size_t i = m; i-- > 0;) {
      const Eigen::VectorXd s = s_[i].cwiseProduct(mask), y = y_[i].cwiseProduct(mask);
      const double sy = s.dot(y);
      rho[i] = sy > 0.0 ? 1.0 / sy : 0.0;
      alpha[i] = rho[i] * s.dot(q);
      q -= alpha[i] * y;
    }
    if (m > 0) {
      const Eigen::VectorXd s = s_.back().cwiseProduct(mask), y = y_.back().cwiseProduct(mask);
      const double yy = y.squaredNorm();
      if (yy > 0.0 && s.dot(y) > 0.0) q *= s.dot(y) / yy;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const Eigen::VectorXd s = s_[i].cwiseProduct(mask), y = y_[i].cwiseProduct(mask);
      const double beta = rho[i] * y.dot(q);
      q += (alpha[i] - beta) * s;
    }
    return -q.cwiseProduct(mask);
  }

 private:
  int capacity_;
  std::vector<Eigen::VectorXd> s_, y_;
};

inline Eigen::VectorXd stacked(const PolarPoint& p) {
  Eigen::VectorXd z(p.u.size() + p.psi.size());
  z << p.u, p.psi;
  return z;
}

}  // namespace detail

// Projected descent in normalized polar coordinates with Armijo backtracking
// along the projection arc. The direction is the negative gradient, scaled by
// L-BFGS on the coordinates not held at a radius bound. Never returns a cost
// above the initial one.
inline ScheduleResult solve_local(const HorizonProblem& problem, const TiltSequence& initial,
                                  const LocalSolverSettings& settings = {}) {
  require(initial.size() == problem.horizon(), "solve_local: initial sequence length differs from horizon");
  require(initial.bounds.size() == initial.tilts.size(), "solve_local: bounds missing");
  const std::vector<double>& bounds = initial.bounds;
  const Eigen::Index n = static_cast<Eigen::Index>(bounds.size());
  detail::PolarPoint x = detail::to_normalized_polar(initial.tilts, bounds);
  std::vector<Tilt> tilts = detail::from_normalized_polar(x, bounds);

  Eigen::VectorXd cart, cart_trial, gu, gpsi;
  double f = problem.cost_and_gradient(tilts, cart);
  SolverDiagnostics diag;
  diag.starts_tried = 1;
  diag.iteration_costs.push_back(f);

  detail::LbfgsMemory memory(settings.lbfgs_memory);
  Eigen::Array<bool, Eigen::Dynamic, 1> free(2 * n);
  double pg_norm = std::numeric_limits<double>::infinity();
  double last_step = settings.initial_step;
  bool have_gradient = false;
  bool plain_only = settings.lbfgs_memory <= 0;
  for (int it = 0; it < settings.max_iterations; ++it) {
    if (!have_gradient) {
      const Eigen::VectorXd psi_before = x.psi;
      detail::polar_gradient(cart, x, bounds, settings.singular_radius, gu, gpsi);
      if (x.psi != psi_before) memory.clear();  // chart reoriented at r = 0
    }
    have_gradient = false;
    const detail::PolarPoint unit = detail::projected_step(x, gu, gpsi, 1.0);
    pg_norm = std::sqrt((x.u - unit.u).squaredNorm() + (x.psi - unit.psi).squaredNorm());
    if (pg_norm <= settings.gradient_tolerance) {
      diag.converged = true;
      break;
    }

    Eigen::VectorXd g(2 * n);
    g << gu, gpsi;
    for (Eigen::Index k = 0; k < n; ++k) {
      free(k) = !((x.u(k) <= 0.0 && gu(k) > 0.0) || (x.u(k) >= 1.0 && gu(k) < 0.0));
      free(n + k) = true;
    }
    Eigen::VectorXd dir = memory.direction(g, free);
    const bool scaled = !plain_only && dir.dot(g) < 0.0 && dir.allFinite();
    if (!scaled) dir = -g;

    double step = scaled ? 1.0 : (settings.expand_step && it > 0 ? 2.0 * last_step : settings.initial_step);
    bool accepted = false;
    detail::PolarPoint trial;
    std::vector<Tilt> trial_tilts;
    double f_trial = f;
    bool trial_has_gradient = false;
    for (int bt = 0; bt < settings.max_backtracks; ++bt, step *= settings.backtrack_factor) {
      trial = detail::projected_step(x, -dir.head(n), -dir.tail(n), step);
      const double predicted = gu.dot(trial.u - x.u) + gpsi.dot(trial.psi - x.psi);
      if (!(predicted < 0.0)) continue;
      trial_tilts = detail::from_normalized_polar(trial, bounds);
      // A unit quasi-Newton step is usually accepted, so its gradient is taken along.
      trial_has_gradient = scaled && bt == 0;
      f_trial = trial_has_gradient ? problem.cost_and_gradient(trial_tilts, cart_trial) : problem.cost(trial_tilts);
      if (f_trial <= f + settings.sufficient_decrease * predicted) {
        accepted = true;
        if (!scaled) last_step = step;
        break;
      }
    }
    if (!accepted && scaled) {
      // The curvature model misled the search; retry along the plain gradient.
      memory.clear();
      plain_only = true;
      have_gradient = true;
      continue;
    }
    if (!accepted) {
      diag.converged = true;  // no descent available at machine precision
      break;
    }
    plain_only = settings.lbfgs_memory <= 0;
    const Eigen::VectorXd s = detail::stacked(trial) - detail::stacked(x);
    for (Eigen::Index k = 0; k < trial.psi.size(); ++k) trial.psi(k) = wrap_angle(trial.psi(k));
    const double f_prev = f;
    x = std::move(trial);
    tilts = std::move(trial_tilts);
    if (trial_has_gradient) {
      f = f_trial;
      cart.swap(cart_trial);
    } else {
      f = problem.cost_and_gradient(tilts, cart);
    }
    diag.iterations = it + 1;
    diag.iteration_costs.push_back(f);

    const Eigen::VectorXd psi_before = x.psi;
    detail::polar_gradient(cart, x, bounds, settings.singular_radius, gu, gpsi);
    have_gradient = true;
    if (x.psi != psi_before) {
      memory.clear();
    } else {
      Eigen::VectorXd g_new(2 * n);
      g_new << gu, gpsi;
      memory.push(s, g_new - g);
    }
    if (std::abs(f_prev - f) <= settings.relative_decrease_tolerance * std::abs(f_prev)) {
      diag.converged = true;
      const detail::PolarPoint unit2 = detail::projected_step(x, gu, gpsi, 1.0);
      pg_norm = std::sqrt((x.u - unit2.u).squaredNorm() + (x.psi - unit2.psi).squaredNorm());
      break;
    }
  }
  diag.gradient_norm = std::isfinite(pg_norm) ? pg_norm : 0.0;

  ScheduleResult result;
  result.sequence = {std::move(tilts), bounds};
  result.cost = f;
  result.diagnostics = std::move(diag);
  return result;
}

inline ScheduleResult solve_local(const ScheduleObjective& objective, const TiltSequence& initial,
                                  const LocalSolverSettings& settings = {}) {
  ScheduleResult r = solve_local(HorizonProblem(objective, initial.size()), initial, settings);
  r.cost_trajectory = covariance_trajectory(*objective.model, objective.prior_cov, r.sequence.tilts)
                          .weighted_traces(symmetrized(objective.weight));
  return r;
}

struct MultiStartSettings {
  LocalSolverSettings local;
  int threads = 0;  // 0: hardware concurrency
};

// Random feasible start: r uniform on [0, θ̃_k], ψ uniform on [0, 2π).
inline std::vector<Tilt> random_start(const std::vector<double>& bounds, std::mt19937_64& rng) {
  std::vector<Tilt> out(bounds.size());
  for (std::size_t k = 0; k < bounds.size(); ++k) {
    const double r = bounds[k] * uniform01(rng);
    const double psi = 2.0 * std::numbers::pi * uniform01(rng);
    out[k] = {r * std::cos(psi), r * std::sin(psi)};
  }
  return out;
}

// Runs solve_local from warm starts first, then random feasible starts, and
// keeps the lowest cost (ties go to the lowest start index).
inline ScheduleResult optimize_horizon(const ScheduleObjective& objective, const std::vector<double>& bounds,
                                       int n_starts, const std::vector<TiltSequence>& warm_starts,
                                       std::uint64_t seed, const MultiStartSettings& settings = {}) {
  require(n_starts >= 1, "optimize_horizon: n_starts must be >= 1");
  const int horizon = static_cast<int>(bounds.size());
  const HorizonProblem problem(objective, horizon);

  std::vector<TiltSequence> starts;
  starts.reserve(static_cast<std::size_t>(n_starts));
  for (const auto& w : warm_starts) {
    if (static_cast<int>(starts.size()) >= n_starts) break;
    require(w.size() == horizon, "optimize_horizon: warm start length differs from horizon");
    TiltSequence s{w.tilts, bounds};
    for (std::size_t k = 0; k < s.tilts.size(); ++k) s.tilts[k] = project_to_disk(s.tilts[k], bounds[k]);
    starts.push_back(std::move(s));
  }
  for (int i = static_cast<int>(starts.size()); i < n_starts; ++i) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(i));
    starts.push_back({random_start(bounds, rng), bounds});
  }

  std::vector<std::optional<ScheduleResult>> results(starts.size());
  std::vector<std::exception_ptr> errors(starts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < starts.size(); i = next++) {
      try {
        results[i] = solve_local(problem, starts[i], settings.local);
      } catch (const IllConditionedSchedule&) {
        errors[i] = std::current_exception();
      }
    }
  };
  unsigned threads = settings.threads > 0 ? static_cast<unsigned>(settings.threads) : std::thread::hardware_concurrency();
  threads = std::clamp(threads, 1u, static_cast<unsigned>(starts.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  int best = -1;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i] && (best < 0 || results[i]->cost < results[static_cast<std::size_t>(best)]->cost)) {
      best = static_cast<int>(i);
    }
  }
  if (best < 0) std::rethrow_exception(errors.front());

  ScheduleResult out = std::move(*results[static_cast<std::size_t>(best)]);
  out.diagnostics.starts_tried = static_cast<int>(starts.size());
  out.diagnostics.best_start = best;
  out.cost_trajectory = covariance_trajectory(*objective.model, objective.prior_cov, out.sequence.tilts)
                            .weighted_traces(problem.weight());
  return out;
}

struct RecedingHorizonSettings {
  int n_starts = 1000;
  int n_warm = 100;               // warm starts used from the second step on
  double warm_radius_jitter = 0.1;  // std of the normalized-radius perturbation
  double warm_angle_jitter = 0.3;   // std of the angle perturbation (radians)
  int greedy_starts = 20;           // starts per step of the one-step continuation warm start; 0 disables
  MultiStartSettings multistart;
};

namespace detail {

// h tilts chosen one step at a time from P_{k|k-1}.
inline TiltSequence greedy_continuation(const LinearModel& model, const Eigen::MatrixXd& weight,
                                        const Eigen::MatrixXd& p_pred, const std::vector<double>& bounds,
                                        int n_starts, std::uint64_t seed, const MultiStartSettings& settings) {
  TiltSequence seq{{}, bounds};
  Eigen::MatrixXd p = p_pred;
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    const ScheduleObjective objective{&model, weight, p};
    const ScheduleResult step =
        optimize_horizon(objective, {bounds[i]}, n_starts, {}, substream_seed(seed, i), settings);
    const Tilt t = step.sequence.tilts.front();
    seq.tilts.push_back(t);
    p = predict_cov(update_cov(p, model.observation(t), model.measurement_noise()), model);
  }
  return seq;
}

}  // namespace detail

// Solves the H-step problem from P_{k|k-1} at each k, commits the first tilt
// and advances the covariance. The horizon shrinks to N − k near the end.
inline ScheduleResult receding_horizon(const LinearModel& model, const Eigen::MatrixXd& weight, int n_steps, int horizon,
                                       std::uint64_t seed, const RecedingHorizonSettings& settings = {}) {
  require(horizon >= 1 && horizon <= n_steps, "receding_horizon: need 1 <= H <= N");
  require(settings.n_starts >= 1, "receding_horizon: n_starts must be >= 1");
  const TiltBoundSchedule& schedule = model.config().tilt_bounds;
  const Eigen::MatrixXd w = symmetrized(weight);

  ScheduleResult out;
  out.sequence.bounds = schedule.bounds(0, n_steps);
  Eigen::MatrixXd p_pred = model.prior_cov();
  std::optional<TiltSequence> previous;
  StandardNormal normal;

  for (int k = 0; k < n_steps; ++k) {
    const int h = std::min(horizon, n_steps - k);
    const std::vector<double> bounds = schedule.bounds(k, h);
    std::vector<TiltSequence> warm;
    if (previous) {
      TiltSequence shifted{{}, bounds};
      for (int i = 0; i < h; ++i) {
        const int src = std::min(i + 1, previous->size() - 1);
        shifted.tilts.push_back(previous->tilts[static_cast<std::size_t>(src)]);
      }
      const int n_warm = std::min(settings.n_warm, settings.n_starts);
      if (n_warm >= 1) warm.push_back(shifted);
      auto rng = make_rng(seed, 0x5741524dULL + static_cast<std::uint64_t>(k));
      const detail::PolarPoint base = detail::to_normalized_polar(shifted.tilts, bounds);
      for (int j = 1; j < n_warm; ++j) {
        detail::PolarPoint p = base;
        for (Eigen::Index i = 0; i < p.u.size(); ++i) {
          p.u(i) = std::clamp(p.u(i) + settings.warm_radius_jitter * normal(rng), 0.0, 1.0);
          p.psi(i) = wrap_angle(p.psi(i) + settings.warm_angle_jitter * normal(rng));
        }
        warm.push_back({detail::from_normalized_polar(p, bounds), bounds});
      }
    }
    if (h > 1 && settings.greedy_starts > 0 && static_cast<int>(warm.size()) < settings.n_starts) {
      warm.insert(warm.begin(), detail::greedy_continuation(model, w, p_pred, bounds, settings.greedy_starts,
                                                            substream_seed(seed, 0x47524459ULL + k), settings.multistart));
    }
    const ScheduleObjective objective{&model, w, p_pred};
    const std::uint64_t step_seed = k == 0 ? seed : substream_seed(seed, static_cast<std::uint64_t>(k));
    ScheduleResult step = optimize_horizon(objective, bounds, settings.n_starts, warm, step_seed, settings.multistart);

    const Tilt committed = step.sequence.tilts.front();
    out.sequence.tilts.push_back(committed);
    const Eigen::MatrixXd p_post = update_cov(p_pred, model.observation(committed), model.measurement_noise());
    out.cost_trajectory.push_back((w * p_post).trace());
    p_pred = predict_cov(p_post, model);
    out.step_diagnostics.push_back(step.diagnostics);
    previous = std::move(step.sequence);
  }
  out.cost = out.cost_trajectory.back();
  out.diagnostics = out.step_diagnostics.front();
  out.diagnostics.starts_tried = 0;
  out.diagnostics.iterations = 0;
  for (const auto& d : out.step_diagnostics) {
    out.diagnostics.starts_tried += d.starts_tried;
    out.diagnostics.iterations += d.iterations;
  }
  out.diagnostics.converged = std::all_of(out.step_diagnostics.begin(), out.step_diagnostics.end(),
                                          [](const SolverDiagnostics& d) { return d.converged; });
  out.diagnostics.iteration_costs.clear();
  return out;
}

// θ_k = θ̃_k/√2 · (sin(2π·a·k/N), sin(2π·b·k/N + π/2)). The 1/√2 keeps every
// point inside its disk since both components can reach 1 together.
inline TiltSequence lissajous_pattern(int n_steps, int ratio_a, int ratio_b, const std::vector<double>& bounds) {
  require(n_steps >= 1, "lissajous: N must be >= 1");
  require(static_cast<int>(bounds.size()) == n_steps, "lissajous: need one bound per step");
  TiltSequence seq{{}, bounds};
  const double two_pi = 2.0 * std::numbers::pi;
  for (int k = 0; k < n_steps; ++k) {
    const double phase = static_cast<double>(k) / n_steps;
    const double amp = bounds[static_cast<std::size_t>(k)] / std::numbers::sqrt2;
    seq.tilts.push_back({amp * std::sin(two_pi * ratio_a * phase),
                         amp * std::sin(two_pi * ratio_b * phase + std::numbers::pi / 2.0)});
  }
  return seq;
}

// Area-uniform samples on each disk: r = θ̃_k·√u.
inline TiltSequence random_pattern(int n_steps, const std::vector<double>& bounds, std::uint64_t seed) {
  require(n_steps >= 1, "random pattern: N must be >= 1");
  require(static_cast<int>(bounds.size()) == n_steps, "random pattern: need one bound per step");
  auto rng = make_rng(seed, 0);
  TiltSequence seq{{}, bounds};
  for (int k = 0; k < n_steps; ++k) {
    const double r = bounds[static_cast<std::size_t>(k)] * std::sqrt(uniform01(rng));
    const double psi = 2.0 * std::numbers::pi * uniform01(rng);
    seq.tilts.push_back({r * std::cos(psi), r * std::sin(psi)});
  }
  return seq;
}

}  // namespace tiltab
