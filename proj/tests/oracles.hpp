#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. They follow the defining formulas directly and share no code with
// the fast paths they check (beyond the model's public accessors).

#include <cmath>
#include <complex>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tiltab/estimation.hpp"
#include "tiltab/schedule.hpp"
#include "tiltab/state_space.hpp"

namespace oracle {

using cplx = std::complex<double>;

inline double binom(int n, int k) {
  if (n < 0 || k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return std::round(r);
}

inline cplx ipow(cplx z, int p) {
  cplx r = 1.0;
  for (int i = 0; i < p; ++i) r *= z;
  return r;
}

// Packed real vector -> {(m, n) -> complex coefficient}, rebuilt from the
// ordering rule: m ascending, n ascending with n ≡ m (mod 2), real before
// imaginary, n = 0 takes one slot.
inline std::map<std::pair<int, int>, cplx> unpack(const Eigen::VectorXd& v, int max_order) {
  std::map<std::pair<int, int>, cplx> out;
  int pos = 0;
  for (int m = 1; m <= max_order; ++m) {
    for (int n = m % 2; n <= m; n += 2) {
      if (n == 0) {
        out[{m, n}] = cplx(v(pos), 0.0);
        pos += 1;
      } else {
        out[{m, n}] = cplx(v(pos), v(pos + 1));
        pos += 2;
      }
    }
  }
  return out;
}

inline Eigen::VectorXd pack(const std::map<std::pair<int, int>, cplx>& c, int max_order) {
  std::vector<double> vals;
  for (int m = 1; m <= max_order; ++m) {
    for (int n = m % 2; n <= m; n += 2) {
      const cplx z = c.at({m, n});
      vals.push_back(z.real());
      if (n > 0) vals.push_back(z.imag());
    }
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline int packed_dim(int max_order) {
  int l = 0;
  for (int m = 1; m <= max_order; ++m) {
    for (int n = m % 2; n <= m; n += 2) l += n == 0 ? 1 : 2;
  }
  return l;
}

// Direct double sum of the tilt-induced aberration formula.
inline Eigen::VectorXd tilt_transform(const Eigen::VectorXd& packed, int max_order, cplx t) {
  const auto c = unpack(packed, max_order);
  std::map<std::pair<int, int>, cplx> out;
  for (const auto& [key, unused] : c) {
    const int m = key.first, n = key.second;
    const int alpha = (m + n) / 2, gamma = (m - n) / 2;
    const double rho = alpha == gamma ? 0.5 : 1.0;
    cplx sum = 0.0;
    for (int beta = alpha; beta <= max_order; ++beta) {
      for (int delta = gamma; delta <= std::min(beta, max_order - beta); ++delta) {
        const cplx src = c.at({beta + delta, beta - delta});
        const double w1 = binom(beta, alpha) * binom(delta, gamma);
        const double w2 = binom(beta, gamma) * binom(delta, alpha);
        if (w1 != 0.0) sum += w1 * ipow(std::conj(t), beta - alpha) * ipow(t, delta - gamma) * src / double(beta + delta);
        if (w2 != 0.0) {
          sum += w2 * ipow(std::conj(t), delta - alpha) * ipow(t, beta - gamma) * std::conj(src) / double(beta + delta);
        }
      }
    }
    out[key] = rho * (alpha + gamma) * sum;
  }
  return pack(out, max_order);
}

// Closed-form M = 2 shift matrix for (Re c11, Im c11, c20, Re c22, Im c22).
inline Eigen::MatrixXd psi_order2(double tx, double ty) {
  Eigen::MatrixXd psi(2, 5);
  psi << 1, 0, tx, tx, ty,
         0, 1, ty, -ty, tx;
  return psi;
}

// Per-parameter gradient of tr(W P_{N-1|N-1}) written term by term from the
// lifted batch formulas (valid when Σ_ξ = 0):
//   dP = −P₋[dC̄ᵀΣ⁻¹C̄ + C̄ᵀ dΣ⁻¹ C̄ + C̄ᵀΣ⁻¹dC̄]P₋,
//   dΣ⁻¹ = −Σ⁻¹(dC̄P₋C̄ᵀ + C̄P₋dC̄ᵀ)Σ⁻¹.
inline Eigen::VectorXd lifted_gradient(const tiltab::LinearModel& model, const std::vector<tiltab::Tilt>& tilts,
                                       const Eigen::MatrixXd& weight) {
  const int n = static_cast<int>(tilts.size());
  const int d = model.state_dim();
  const Eigen::MatrixXd p_minus = tiltab::batch_predicted_cov(model, n);
  const Eigen::MatrixXd cbar = tiltab::lifted_observation(model, tilts);
  Eigen::MatrixXd sigma = cbar * p_minus * cbar.transpose();
  for (int i = 0; i < n; ++i) sigma.block<2, 2>(2 * i, 2 * i) += model.measurement_noise();
  const Eigen::MatrixXd sigma_inv = sigma.inverse();
  // A^{-(N-1-i)} by explicit inversion; small N only.
  const Eigen::MatrixXd a_inv = model.transition().inverse();
  Eigen::VectorXd g(2 * n);
  for (int i = 0; i < n; ++i) {
    Eigen::MatrixXd power = Eigen::MatrixXd::Identity(d, d);
    for (int j = 0; j < n - 1 - i; ++j) power = power * a_inv;
    const auto [dx, dy] = model.observation_gradient(tilts[static_cast<std::size_t>(i)]);
    for (int comp = 0; comp < 2; ++comp) {
      Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(2 * n, d);
      dc.middleRows(2 * i, 2) = (comp == 0 ? dx : dy) * power;
      const Eigen::MatrixXd dsigma_inv =
          -sigma_inv * (dc * p_minus * cbar.transpose() + cbar * p_minus * dc.transpose()) * sigma_inv;
      const Eigen::MatrixXd dp = -p_minus *
                                 (dc.transpose() * sigma_inv * cbar + cbar.transpose() * dsigma_inv * cbar +
                                  cbar.transpose() * sigma_inv * dc) *
                                 p_minus;
      g(2 * i + comp) = (weight * dp).trace();
    }
  }
  return g;
}

// tr(W P_{N-1|N-1}) through the one-shot correction, kept in quadruple
// precision so central differences resolve tiny gradient components.
inline tiltab::BatchScalar quad_cost(const tiltab::LinearModel& model, const std::vector<tiltab::Tilt>& tilts,
                                     const Eigen::MatrixXd& prior, const Eigen::MatrixXd& weight) {
  using T = tiltab::BatchScalar;
  const auto e = tiltab::detail::joint_correction<T>(model, tilts, prior);
  const tiltab::MatrixT<T> w = weight.cast<T>();
  return (w * e.posterior).trace();
}

// Central differences with step h_rel·θ̃_k on every tilt component.
inline Eigen::VectorXd central_difference(const tiltab::LinearModel& model, const tiltab::TiltSequence& seq,
                                          const Eigen::MatrixXd& prior, const Eigen::MatrixXd& weight,
                                          double h_rel = 1e-6) {
  const int n = seq.size();
  Eigen::VectorXd g(2 * n);
  for (int p = 0; p < 2 * n; ++p) {
    auto plus = seq.tilts, minus = seq.tilts;
    const double h = h_rel * std::max(seq.bounds[static_cast<std::size_t>(p / 2)], 1e-12);
    double* up = p % 2 == 0 ? &plus[static_cast<std::size_t>(p / 2)].tx : &plus[static_cast<std::size_t>(p / 2)].ty;
    double* dn = p % 2 == 0 ? &minus[static_cast<std::size_t>(p / 2)].tx : &minus[static_cast<std::size_t>(p / 2)].ty;
    *up += h;
    *dn -= h;
    const double span = *up - *dn;
    g(p) = static_cast<double>((quad_cost(model, plus, prior, weight) - quad_cost(model, minus, prior, weight)) /
                               tiltab::BatchScalar(span));
  }
  return g;
}

// Kalman covariance recursion written out with the textbook gain form.
inline std::vector<Eigen::MatrixXd> posterior_covs(const tiltab::LinearModel& model,
                                                   const std::vector<tiltab::Tilt>& tilts) {
  std::vector<Eigen::MatrixXd> out;
  Eigen::MatrixXd p = model.prior_cov();
  const Eigen::MatrixXd& a = model.transition();
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    if (k > 0) p = a * p * a.transpose() + model.process_noise();
    const Eigen::MatrixXd c = model.observation(tilts[k]);
    const Eigen::MatrixXd s = c * p * c.transpose() + Eigen::MatrixXd(model.measurement_noise());
    const Eigen::MatrixXd k_gain = p * c.transpose() * s.inverse();
    p = p - k_gain * c * p;
    p = 0.5 * (p + p.transpose());
    out.push_back(p);
  }
  return out;
}

inline double rel_frobenius(const Eigen::MatrixXd& a, const Eigen::MatrixXd& ref) {
  return (a - ref).norm() / ref.norm();
}

}  // namespace oracle
