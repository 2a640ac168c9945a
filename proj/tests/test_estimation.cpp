#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tiltab/estimation.hpp"
#include "tiltab/schedule.hpp"

using namespace tiltab;

namespace {

// Re c11, Im c11 and the rotation; A = I.
LinearModel shift_only_model(double r, double q = 0.0) {
  ModelConfig cfg = default_config(1, 0);
  cfg.measurement_noise = r * Eigen::Matrix2d::Identity();
  cfg.process_noise_diag = Eigen::VectorXd::Constant(cfg.state_dim(), q);
  return LinearModel(cfg);
}

// Σ_ε = 1e-2 keeps the stacked innovation covariance well conditioned in double.
LinearModel without_process_noise(int max_order) {
  ModelConfig cfg = default_config(max_order);
  cfg.process_noise_diag.setZero();
  cfg.measurement_noise = 1e-2 * Eigen::Matrix2d::Identity();
  return LinearModel(cfg);
}

std::vector<Tilt> random_tilts(const LinearModel& model, int n, std::uint64_t seed) {
  return random_pattern(n, model.config().tilt_bounds.bounds(0, n), seed).tilts;
}

std::vector<Eigen::Vector2d> random_measurements(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<Eigen::Vector2d> ys;
  for (int i = 0; i < n; ++i) ys.emplace_back(normal(rng), normal(rng));
  return ys;
}

}  // namespace

TEST(Update, ShiftOnlyHandExample) {
  const double r = 0.25;
  const LinearModel model = shift_only_model(r);
  const FilterState post = kf_update(initial_state(model), model, Tilt{}, Eigen::Vector2d(1.0, 2.0));
  EXPECT_NEAR(post.mean(0), 1.0 / (1.0 + r), 1e-15);
  EXPECT_NEAR(post.mean(1), 2.0 / (1.0 + r), 1e-15);
  EXPECT_NEAR(post.mean(2), 0.0, 1e-15);
  EXPECT_NEAR(post.cov(0, 0), r / (1.0 + r), 1e-15);
  EXPECT_NEAR(post.cov(1, 1), r / (1.0 + r), 1e-15);
  EXPECT_NEAR(post.cov(2, 2), 1.0, 1e-15);
}

TEST(Predict, ShiftOnlyAddsProcessNoise) {
  const LinearModel model = shift_only_model(0.1, 0.3);
  const FilterState next = kf_predict(initial_state(model), model);
  EXPECT_EQ(next.time_index, 1);
  EXPECT_LE((next.cov - 1.3 * Eigen::MatrixXd::Identity(3, 3)).norm(), 1e-15);
}

TEST(Update, JosephFormMatchesTextbookGain) {
  const LinearModel model(default_config());
  const auto tilts = random_tilts(model, 40, 2);
  const auto ref = oracle::posterior_covs(model, tilts);
  const auto traj = covariance_trajectory(model, model.prior_cov(), tilts);
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    EXPECT_LE(oracle::rel_frobenius(traj.posterior[k], ref[k]), 1e-9) << "k=" << k;
  }
}

TEST(Update, RejectsSingularInnovation) {
  ModelConfig cfg = default_config(1, 0);
  cfg.prior_cov.setZero();
  const LinearModel model(cfg);
  const Eigen::MatrixXd c = model.observation({});
  EXPECT_THROW(update_cov(model.prior_cov(), c, Eigen::Matrix2d::Zero()), SingularInnovation);
}

TEST(Filter, CovariancesDoNotDependOnMeasurements) {
  const LinearModel model(default_config());
  const auto tilts = random_tilts(model, 30, 4);
  const auto a = run_filter(model, tilts, random_measurements(30, 1));
  const auto b = run_filter(model, tilts, random_measurements(30, 2));
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    EXPECT_TRUE(a.covariances.posterior[k] == b.covariances.posterior[k]);
    EXPECT_TRUE(a.covariances.predicted[k] == b.covariances.predicted[k]);
  }
  EXPECT_NE(a.posterior_means.back(), b.posterior_means.back());
  const auto traj = covariance_trajectory(model, model.prior_cov(), tilts);
  EXPECT_TRUE(traj.posterior.back() == a.covariances.posterior.back());
}

TEST(Filter, RejectsLengthMismatch) {
  const LinearModel model(default_config());
  const std::vector<Tilt> tilts(3);
  EXPECT_THROW(run_filter(model, tilts, random_measurements(2, 1)), InvalidArgument);
}

TEST(Batch, MatchesRecursionWithProcessNoise) {
  for (int order : {2, 4}) {
    const LinearModel model(default_config(order));
    for (int n : {1, 2, 7, 30, 60}) {
      const auto tilts = random_tilts(model, n, static_cast<std::uint64_t>(n + order));
      const Eigen::MatrixXd recursive = covariance_trajectory(model, model.prior_cov(), tilts).posterior.back();
      EXPECT_LE(oracle::rel_frobenius(batch_posterior_cov(model, tilts), recursive), 1e-10)
          << "M=" << order << " N=" << n;
    }
  }
}

TEST(Batch, SingleStepIsOneUpdate) {
  const LinearModel model(default_config());
  const std::vector<Tilt> tilts{{1e-4, -3e-4}};
  const Eigen::MatrixXd one = update_cov(model.prior_cov(), model.observation(tilts[0]), model.measurement_noise());
  EXPECT_LE(oracle::rel_frobenius(batch_posterior_cov(model, tilts), one), 1e-12);
  EXPECT_LE(oracle::rel_frobenius(lifted_posterior_cov(model, tilts, model.prior_cov()), one), 1e-12);
}

TEST(Batch, LiftedFormExactWithoutProcessNoise) {
  for (int order : {2, 4}) {
    const LinearModel model = without_process_noise(order);
    for (int n : {2, 5, 12}) {
      const auto tilts = random_tilts(model, n, static_cast<std::uint64_t>(10 * n + order));
      const Eigen::MatrixXd recursive = covariance_trajectory(model, model.prior_cov(), tilts).posterior.back();
      EXPECT_LE(oracle::rel_frobenius(lifted_posterior_cov(model, tilts, model.prior_cov()), recursive), 1e-7)
          << "M=" << order << " N=" << n;
      EXPECT_LE(oracle::rel_frobenius(batch_posterior_cov(model, tilts), recursive), 1e-10);
    }
  }
}

TEST(Batch, LiftedFormMissesProcessNoiseCorrelation) {
  const LinearModel model(default_config());
  const auto tilts = random_tilts(model, 60, 9);
  const Eigen::MatrixXd recursive = covariance_trajectory(model, model.prior_cov(), tilts).posterior.back();
  EXPECT_GT(oracle::rel_frobenius(lifted_posterior_cov(model, tilts, model.prior_cov()), recursive), 1e-3);
}

TEST(Batch, PredictedCovarianceIterates) {
  const LinearModel model(default_config(2, 2));
  Eigen::MatrixXd p = model.prior_cov();
  for (int i = 1; i < 5; ++i) p = model.transition() * p * model.transition().transpose() + model.process_noise();
  EXPECT_LE(oracle::rel_frobenius(batch_predicted_cov(model, 5), p), 1e-14);
  EXPECT_THROW(batch_predicted_cov(model, 0), InvalidArgument);
}

TEST(Batch, LiftedObservationUsesInversePowers) {
  const LinearModel model(default_config(2, 2));
  const auto tilts = random_tilts(model, 4, 3);
  const Eigen::MatrixXd lifted = lifted_observation(model, tilts);
  const Eigen::MatrixXd a_inv = model.transition().inverse();
  for (int i = 0; i < 4; ++i) {
    Eigen::MatrixXd power = Eigen::MatrixXd::Identity(model.state_dim(), model.state_dim());
    for (int j = 0; j < 3 - i; ++j) power *= a_inv;
    const Eigen::MatrixXd expected = model.observation(tilts[static_cast<std::size_t>(i)]) * power;
    EXPECT_LE((lifted.middleRows(2 * i, 2) - expected).norm(), 1e-12 * (1.0 + expected.norm()));
  }
}

TEST(Smoother, StaticStateSmoothsToFinalEstimate) {
  const LinearModel model = shift_only_model(0.5);
  const std::vector<Tilt> tilts(6, Tilt{1e-3, -2e-3});
  const auto filtered = run_filter(model, tilts, random_measurements(6, 8));
  const auto smoothed = rts_smooth(model, filtered);
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    EXPECT_LE((smoothed.means[k] - filtered.posterior_means.back()).norm(), 1e-12);
    EXPECT_LE((smoothed.covs[k] - filtered.covariances.posterior.back()).norm(), 1e-12);
  }
  ASSERT_EQ(smoothed.lag_one.size(), 5u);
}

TEST(Smoother, ReducesVarianceAndKeepsLastStep) {
  const LinearModel model(default_config());
  const auto tilts = random_tilts(model, 25, 12);
  const auto filtered = run_filter(model, tilts, random_measurements(25, 3));
  const auto smoothed = rts_smooth(model, filtered);
  EXPECT_EQ(smoothed.means.back(), filtered.posterior_means.back());
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    const Eigen::MatrixXd diff = filtered.covariances.posterior[k] - smoothed.covs[k];
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(diff).eigenvalues().minCoeff(),
              -1e-9 * filtered.covariances.posterior[k].norm());
  }
}

TEST(Smoother, MatchesJointGaussianConditioning) {
  // Smoothed mean of x_0 is E[x_0 | y_0..y_{N-1}] computed from the joint covariance.
  ModelConfig cfg = default_config(2, 1);
  const LinearModel model(cfg);
  const int n = 5;
  const int d = model.state_dim();
  const auto tilts = random_tilts(model, n, 21);
  const auto ys = random_measurements(n, 22);

  // Cov(x_i, x_j) for i <= j: P_{i|-1} (Aᵀ)^{j-i}.
  std::vector<Eigen::MatrixXd> p(static_cast<std::size_t>(n));
  p[0] = model.prior_cov();
  for (int i = 1; i < n; ++i) {
    p[static_cast<std::size_t>(i)] =
        model.transition() * p[static_cast<std::size_t>(i - 1)] * model.transition().transpose() + model.process_noise();
  }
  Eigen::MatrixXd sigma(2 * n, 2 * n), g(2 * n, d);
  Eigen::VectorXd y(2 * n);
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd ci = model.observation(tilts[static_cast<std::size_t>(i)]);
    y.segment<2>(2 * i) = ys[static_cast<std::size_t>(i)];
    Eigen::MatrixXd cross_i0 = p[0];  // Cov(x_i, x_0) = A^i P_0
    for (int k = 0; k < i; ++k) cross_i0 = model.transition() * cross_i0;
    g.middleRows(2 * i, 2) = ci * cross_i0;
    for (int j = 0; j < n; ++j) {
      const Eigen::MatrixXd cj = model.observation(tilts[static_cast<std::size_t>(j)]);
      const int lo = std::min(i, j), hi = std::max(i, j);
      Eigen::MatrixXd c_lo_hi = p[static_cast<std::size_t>(lo)];
      for (int k = lo; k < hi; ++k) c_lo_hi = c_lo_hi * model.transition().transpose();
      const Eigen::MatrixXd cij = i <= j ? c_lo_hi : Eigen::MatrixXd(c_lo_hi.transpose());
      sigma.block(2 * i, 2 * j, 2, 2) = ci * cij * cj.transpose();
    }
    sigma.block<2, 2>(2 * i, 2 * i) += model.measurement_noise();
  }
  const Eigen::VectorXd mean0 = g.transpose() * sigma.ldlt().solve(y);
  const Eigen::MatrixXd cov0 = p[0] - g.transpose() * sigma.ldlt().solve(g);

  const auto smoothed = rts_smooth(model, run_filter(model, tilts, ys));
  EXPECT_LE((smoothed.means[0] - mean0).norm(), 1e-7 * (1.0 + mean0.norm()));
  EXPECT_LE(oracle::rel_frobenius(smoothed.covs[0], cov0), 1e-7);
}

TEST(Likelihood, MatchesStackedGaussianDensity) {
  const LinearModel model(default_config(2, 1));
  const int n = 6;
  const auto tilts = random_tilts(model, n, 31);
  const auto ys = random_measurements(n, 32);
  std::vector<Eigen::MatrixXd> p(static_cast<std::size_t>(n));
  p[0] = model.prior_cov();
  for (int i = 1; i < n; ++i) {
    p[static_cast<std::size_t>(i)] =
        model.transition() * p[static_cast<std::size_t>(i - 1)] * model.transition().transpose() + model.process_noise();
  }
  Eigen::MatrixXd sigma(2 * n, 2 * n);
  Eigen::VectorXd y(2 * n);
  for (int i = 0; i < n; ++i) {
    y.segment<2>(2 * i) = ys[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) {
      const int lo = std::min(i, j), hi = std::max(i, j);
      Eigen::MatrixXd c_lo_hi = p[static_cast<std::size_t>(lo)];
      for (int k = lo; k < hi; ++k) c_lo_hi = c_lo_hi * model.transition().transpose();
      const Eigen::MatrixXd cij = i <= j ? c_lo_hi : Eigen::MatrixXd(c_lo_hi.transpose());
      sigma.block(2 * i, 2 * j, 2, 2) = model.observation(tilts[static_cast<std::size_t>(i)]) * cij *
                                        model.observation(tilts[static_cast<std::size_t>(j)]).transpose();
    }
    sigma.block<2, 2>(2 * i, 2 * i) += model.measurement_noise();
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma);
  const double log_det = ldlt.vectorD().array().log().sum();
  const double expected = -0.5 * (2 * n * std::log(2 * std::numbers::pi) + log_det + y.dot(ldlt.solve(y)));
  const double got = innovation_log_likelihood(model, tilts, ys);
  EXPECT_NEAR(got, expected, 1e-8 * std::abs(expected));
}
