#pragma once

// Kalman filter, Rauch-Tung-Striebel smoother and the batch N-step covariance
// correction. Everything here works in normalized coordinates.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/eigen.hpp>
#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tiltab/errors.hpp"
#include "tiltab/state_space.hpp"

namespace tiltab {

struct FilterState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int time_index = 0;
};

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& p) { return 0.5 * (p + p.transpose()); }

inline FilterState initial_state(const LinearModel& model) {
  return {model.prior_mean(), model.prior_cov(), 0};
}

// mean ← A·mean, cov ← A·cov·Aᵀ + Σ_ξ.
inline FilterState kf_predict(const FilterState& state, const LinearModel& model) {
  return {model.transition() * state.mean, model.propagate_cov(state.cov), state.time_index + 1};
}

inline Eigen::MatrixXd predict_cov(const Eigen::MatrixXd& cov, const LinearModel& model) {
  return model.propagate_cov(cov);
}

// Joseph-form posterior covariance for observation c and noise r.
inline Eigen::MatrixXd update_cov(const Eigen::MatrixXd& cov, const Eigen::MatrixXd& c, const Eigen::Matrix2d& r) {
  const Eigen::MatrixXd pct = cov * c.transpose();
  const Eigen::Matrix2d s = symmetrized(c * pct + r);
  const Eigen::LLT<Eigen::Matrix2d> llt(s);
  if (llt.info() != Eigen::Success) throw SingularInnovation("kalman update: innovation covariance is not positive definite");
  const Eigen::MatrixXd gain = llt.solve(pct.transpose()).transpose();
  const Eigen::MatrixXd ikc = Eigen::MatrixXd::Identity(cov.rows(), cov.cols()) - gain * c;
  return symmetrized(ikc * cov * ikc.transpose() + gain * r * gain.transpose());
}

struct Innovation {
  Eigen::Vector2d residual;
  Eigen::Matrix2d cov;
};

inline FilterState kf_update(const FilterState& state, const LinearModel& model, Tilt theta, const Eigen::Vector2d& y,
                             Innovation* innovation = nullptr) {
  const Eigen::MatrixXd c = model.observation(theta);
  const Eigen::Matrix2d& r = model.measurement_noise();
  const Eigen::MatrixXd pct = state.cov * c.transpose();
  const Eigen::Matrix2d s = symmetrized(c * pct + r);
  const Eigen::LLT<Eigen::Matrix2d> llt(s);
  if (llt.info() != Eigen::Success) throw SingularInnovation("kalman update: innovation covariance is not positive definite");
  const Eigen::MatrixXd gain = llt.solve(pct.transpose()).transpose();
  const Eigen::Vector2d nu = y - c * state.mean;
  const Eigen::MatrixXd ikc = Eigen::MatrixXd::Identity(state.cov.rows(), state.cov.cols()) - gain * c;
  if (innovation) *innovation = {nu, s};
  return {state.mean + gain * nu, symmetrized(ikc * state.cov * ikc.transpose() + gain * r * gain.transpose()),
          state.time_index};
}

// Predicted (k|k-1) and posterior (k|k) covariances along a tilt sequence.
struct CovarianceTrajectory {
  std::vector<Eigen::MatrixXd> predicted;
  std::vector<Eigen::MatrixXd> posterior;

  std::vector<double> weighted_traces(const Eigen::MatrixXd& weight, bool use_posterior = true) const {
    const auto& covs = use_posterior ? posterior : predicted;
    std::vector<double> out;
    out.reserve(covs.size());
    for (const auto& p : covs) out.push_back((weight * p).trace());
    return out;
  }
};

struct FilterOutput {
  std::vector<Eigen::VectorXd> predicted_means;
  std::vector<Eigen::VectorXd> posterior_means;
  CovarianceTrajectory covariances;
  std::vector<Innovation> innovations;

  int size() const { return static_cast<int>(posterior_means.size()); }
};

inline FilterOutput run_filter(const LinearModel& model, std::span<const Tilt> tilts,
                               std::span<const Eigen::Vector2d> measurements) {
  require(tilts.size() == measurements.size(), "run_filter: tilts and measurements differ in length");
  FilterOutput out;
  const std::size_t n = tilts.size();
  out.predicted_means.reserve(n);
  out.posterior_means.reserve(n);
  out.covariances.predicted.reserve(n);
  out.covariances.posterior.reserve(n);
  out.innovations.reserve(n);
  FilterState state = initial_state(model);
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0) state = kf_predict(state, model);
    out.predicted_means.push_back(state.mean);
    out.covariances.predicted.push_back(state.cov);
    Innovation inn;
    state = kf_update(state, model, tilts[k], measurements[k], &inn);
    out.innovations.push_back(inn);
    out.posterior_means.push_back(state.mean);
    out.covariances.posterior.push_back(state.cov);
  }
  return out;
}

// Covariance recursion only; identical to run_filter's covariances.
inline CovarianceTrajectory covariance_trajectory(const LinearModel& model, const Eigen::MatrixXd& prior_cov,
                                                  std::span<const Tilt> tilts) {
  CovarianceTrajectory out;
  Eigen::MatrixXd p = prior_cov;
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    if (k > 0) p = predict_cov(p, model);
    out.predicted.push_back(p);
    p = update_cov(p, model.observation(tilts[k]), model.measurement_noise());
    out.posterior.push_back(p);
  }
  return out;
}

struct SmootherOutput {
  std::vector<Eigen::VectorXd> means;  // x̃_{k|N-1}
  std::vector<Eigen::MatrixXd> covs;   // P_{k|N-1}
  // Lag-one cross covariances P_{k+1,k|N-1}, k = 0..N-2.
  std::vector<Eigen::MatrixXd> lag_one;
};

inline SmootherOutput rts_smooth(const LinearModel& model, const FilterOutput& filtered, bool lag_one = true) {
  const int n = filtered.size();
  SmootherOutput out;
  out.means.resize(static_cast<std::size_t>(n));
  out.covs.resize(static_cast<std::size_t>(n));
  if (lag_one) out.lag_one.resize(static_cast<std::size_t>(std::max(0, n - 1)));
  if (n == 0) return out;
  const auto last = static_cast<std::size_t>(n - 1);
  out.means[last] = filtered.posterior_means[last];
  out.covs[last] = filtered.covariances.posterior[last];
  const int d = model.state_dim();
  Eigen::LLT<Eigen::MatrixXd> llt(d);
  Eigen::MatrixXd apf(d, d), gain(d, d), gd(d, d), cov(d, d);
  for (int k = n - 2; k >= 0; --k) {
    const auto i = static_cast<std::size_t>(k);
    const Eigen::MatrixXd& pf = filtered.covariances.posterior[i];
    const Eigen::MatrixXd& pp = filtered.covariances.predicted[i + 1];
    llt.compute(pp);
    if (llt.info() != Eigen::Success) throw SingularInnovation("rts smoother: predicted covariance is not positive definite");
    // G = P_{k|k} Aᵀ P_{k+1|k}⁻¹
    apf = model.apply_transition(pf);
    gain = llt.solve(apf).transpose();
    out.means[i] = filtered.posterior_means[i] + gain * (out.means[i + 1] - filtered.predicted_means[i + 1]);
    gd.noalias() = gain * (out.covs[i + 1] - pp);
    cov = pf;
    cov.noalias() += gd * gain.transpose();
    out.covs[i] = symmetrized(cov);
    if (lag_one) out.lag_one[i].noalias() = out.covs[i + 1] * gain.transpose();
  }
  return out;
}

// P_{N-1|-1} = A^{N-1} P0 (Aᵀ)^{N-1} + Σ_{i<N-1} Aⁱ Σ_ξ (Aᵀ)ⁱ, by iteration.
inline Eigen::MatrixXd batch_predicted_cov(const LinearModel& model, int n, const Eigen::MatrixXd& prior_cov) {
  require(n >= 1, "batch_predicted_cov: N must be >= 1");
  Eigen::MatrixXd p = prior_cov;
  for (int i = 1; i < n; ++i) p = predict_cov(p, model);
  return p;
}

inline Eigen::MatrixXd batch_predicted_cov(const LinearModel& model, int n) {
  return batch_predicted_cov(model, n, model.prior_cov());
}

// Row-block i of the lifted observation is C(θ_i)·A^{-(N-1-i)}; the inverse
// powers are applied by repeated back substitution.
inline Eigen::MatrixXd lifted_observation(const LinearModel& model, std::span<const Tilt> tilts) {
  const int n = static_cast<int>(tilts.size());
  const int d = model.state_dim();
  Eigen::MatrixXd lifted(2 * n, d);
  // Rows of C·A^{-j} are (A^{-ᵀ j} Cᵀ)ᵀ; propagate backwards from the last block.
  Eigen::MatrixXd inv_power = Eigen::MatrixXd::Identity(d, d);  // A^{-(N-1-i)}
  for (int i = n - 1; i >= 0; --i) {
    lifted.middleRows(2 * i, 2) = model.observation(tilts[static_cast<std::size_t>(i)]) * inv_power;
    if (i > 0) inv_power = model.solve_transition(inv_power);
  }
  return lifted;
}

namespace detail {

inline Eigen::MatrixXd stacked_noise(const Eigen::Matrix2d& r, int n) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (int i = 0; i < n; ++i) out.block<2, 2>(2 * i, 2 * i) = r;
  return out;
}

}  // namespace detail

// The one-shot correction below subtracts a Gramian that can exceed the
// result by many orders of magnitude (drift variance grows like k⁴), so it is
// carried out in quadruple precision.
using BatchScalar = boost::multiprecision::cpp_bin_float_quad;

template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

template <class T>
struct JointCorrection {
  std::vector<MatrixT<T>> predicted;  // P_{i|-1}
  std::vector<MatrixT<T>> c;          // C(θ_i)
  MatrixT<T> transition;
  MatrixT<T> cross;   // 2N x Nd, block (i, j) = C(θ_i) Cov(x_i, x_j)
  MatrixT<T> gain_t;  // Σ⁻¹ G with G = Cov(y, x_{N-1})
  MatrixT<T> posterior;
};

// Conditions x_{N-1} on all N measurements at once:
//   Σ = Cov(y) = [C_i Cov(x_i, x_j) C_jᵀ] + I_N ⊗ Σ_ε,  G = [C_i Cov(x_i, x_{N-1})],
//   P_{N-1|N-1} = P_{N-1|-1} − Gᵀ Σ⁻¹ G,
// with Cov(x_i, x_j) = P_{i|-1} (Aᵀ)^{j-i} for i <= j. Without process noise
// Cov(x_i, x_j) = A^{-(N-1-i)} P₋ A^{-ᵀ(N-1-j)} and this is the lifted form
// P₋ − P₋C̄ᵀΣ⁻¹C̄P₋.
template <class T>
JointCorrection<T> joint_correction(const LinearModel& model, std::span<const Tilt> tilts,
                                    const Eigen::MatrixXd& prior_cov) {
  const int n = static_cast<int>(tilts.size());
  const int d = model.state_dim();
  require(n >= 1, "batch correction: sequence must not be empty");
  require(prior_cov.rows() == d && prior_cov.cols() == d, "batch correction: prior covariance must be d x d");
  JointCorrection<T> e;
  e.transition = model.transition().cast<T>();
  const MatrixT<T> at = e.transition.transpose();
  const MatrixT<T> q = model.process_noise().cast<T>();
  e.predicted.push_back(prior_cov.cast<T>());
  for (int i = 1; i < n; ++i) {
    const MatrixT<T> next = e.transition * e.predicted.back() * at + q;
    e.predicted.push_back(T(0.5) * (next + next.transpose()));
  }
  for (const Tilt& t : tilts) e.c.push_back(model.observation(t).cast<T>());

  e.cross.resize(2 * n, static_cast<Eigen::Index>(n) * d);
  for (int i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    MatrixT<T> row = e.c[ii] * e.predicted[ii];
    e.cross.block(2 * i, static_cast<Eigen::Index>(i) * d, 2, d) = row;
    for (int j = i + 1; j < n; ++j) {
      row = row * at;
      e.cross.block(2 * i, static_cast<Eigen::Index>(j) * d, 2, d) = row;
    }
    // j < i: C_i A^{i-j} P_{j|-1}
    MatrixT<T> ca = e.c[ii];
    for (int j = i - 1; j >= 0; --j) {
      ca = ca * e.transition;
      e.cross.block(2 * i, static_cast<Eigen::Index>(j) * d, 2, d) = ca * e.predicted[static_cast<std::size_t>(j)];
    }
  }
  const MatrixT<T> r = model.measurement_noise().cast<T>();
  MatrixT<T> sigma(2 * n, 2 * n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      MatrixT<T> sij = e.cross.block(2 * i, static_cast<Eigen::Index>(j) * d, 2, d) *
                       e.c[static_cast<std::size_t>(j)].transpose();
      if (i == j) sij = T(0.5) * (sij + sij.transpose()) + r;
      sigma.block(2 * i, 2 * j, 2, 2) = sij;
      sigma.block(2 * j, 2 * i, 2, 2) = sij.transpose();
    }
  }
  const Eigen::LLT<MatrixT<T>> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw IllConditionedSchedule("batch correction: stacked innovation covariance is not positive definite");
  }
  const MatrixT<T> g = e.cross.rightCols(d);
  e.gain_t = llt.solve(g);
  const MatrixT<T> post = e.predicted.back() - g.transpose() * e.gain_t;
  e.posterior = T(0.5) * (post + post.transpose());
  return e;
}

}  // namespace detail

// P_{N-1|N-1} from all N measurements in one correction. Accounts for the
// process noise between each measurement and step N-1, so it matches the
// recursive filter for any Σ_ξ.
inline Eigen::MatrixXd batch_posterior_cov(const LinearModel& model, std::span<const Tilt> tilts,
                                           const Eigen::MatrixXd& prior_cov) {
  return detail::joint_correction<BatchScalar>(model, tilts, prior_cov).posterior.template cast<double>();
}

inline Eigen::MatrixXd batch_posterior_cov(const LinearModel& model, std::span<const Tilt> tilts) {
  return batch_posterior_cov(model, tilts, model.prior_cov());
}

// P₋ − P₋ C̄ᵀ Σ⁻¹ C̄ P₋ with Σ = C̄ P₋ C̄ᵀ + I_N ⊗ Σ_ε. Treats the lifted
// measurements as independent of x_{N-1} given the prior, which holds only
// when Σ_ξ = 0; batch_posterior_cov is the general form.
inline Eigen::MatrixXd lifted_posterior_cov(const LinearModel& model, std::span<const Tilt> tilts,
                                            const Eigen::MatrixXd& prior_cov) {
  const int n = static_cast<int>(tilts.size());
  require(n >= 1, "lifted_posterior_cov: sequence must not be empty");
  const Eigen::MatrixXd p_minus = batch_predicted_cov(model, n, prior_cov);
  const Eigen::MatrixXd lifted = lifted_observation(model, tilts);
  const Eigen::MatrixXd cp = lifted * p_minus;
  const Eigen::MatrixXd sigma =
      symmetrized(cp * lifted.transpose() + detail::stacked_noise(model.measurement_noise(), n));
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw IllConditionedSchedule("lifted correction: stacked innovation covariance is not positive definite");
  }
  return symmetrized(p_minus - cp.transpose() * llt.solve(cp));
}

// Σ_k −½(2 log 2π + log det S_k + ν_kᵀ S_k⁻¹ ν_k) over the filter innovations.
inline double innovation_log_likelihood(const FilterOutput& filtered) {
  double ll = 0.0;
  for (const auto& inn : filtered.innovations) {
    const Eigen::LLT<Eigen::Matrix2d> llt(inn.cov);
    const Eigen::Matrix2d l = llt.matrixL();
    const double log_det = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)));
    const double quad = inn.residual.dot(llt.solve(inn.residual));
    ll += -0.5 * (2.0 * std::log(2.0 * std::numbers::pi) + log_det + quad);
  }
  return ll;
}

inline double innovation_log_likelihood(const LinearModel& model, std::span<const Tilt> tilts,
                                        std::span<const Eigen::Vector2d> measurements) {
  return innovation_log_likelihood(run_filter(model, tilts, measurements));
}

}  // namespace tiltab
