#include <cmath>

#include <gtest/gtest.h>

#include "tiltab/em.hpp"
#include "tiltab/schedule.hpp"

using namespace tiltab;

namespace {

ShiftRecord simulate_record(const LinearModel& model, const Eigen::Matrix2d& true_noise, int n, std::uint64_t seed) {
  const TiltSequence seq = random_pattern(n, model.config().tilt_bounds.bounds(0, n), seed);
  auto rng = make_rng(seed, 1);
  const Eigen::VectorXd x0 = sample_prior(model, rng);
  SimulationNoise noise;
  noise.measurement_noise = true_noise;
  const auto sim = simulate_trajectory(model, seq.tilts, x0, substream_seed(seed, 2), noise);
  return {seq.tilts, sim.measurements};
}

double rel_error(const Eigen::Matrix2d& a, const Eigen::Matrix2d& ref) { return (a - ref).norm() / ref.norm(); }

}  // namespace

TEST(MStep, SingleShiftMeasurementHandExample) {
  const double r = 0.5;
  ModelConfig cfg = default_config(1, 0);
  cfg.measurement_noise = r * Eigen::Matrix2d::Identity();
  const LinearModel model(cfg);
  const std::vector<Tilt> tilts{Tilt{}};
  const std::vector<Eigen::Vector2d> ys{{2.0, -1.0}};
  const SmootherOutput smoothed = rts_smooth(model, run_filter(model, tilts, ys));
  const Eigen::Matrix2d got = em_mstep(model, tilts, ys, smoothed);
  const double shrink = r / (1.0 + r);
  const Eigen::Matrix2d expected = shrink * shrink * ys[0] * ys[0].transpose() + shrink * Eigen::Matrix2d::Identity();
  EXPECT_LE((got - expected).norm(), 1e-14);
}

TEST(MStep, RejectsMismatchedInput) {
  const LinearModel model(default_config(1, 0));
  const std::vector<Tilt> tilts(2);
  const std::vector<Eigen::Vector2d> ys(1, Eigen::Vector2d::Zero());
  EXPECT_THROW(em_mstep(model, tilts, ys, SmootherOutput{}), InvalidArgument);
}

TEST(Em, LikelihoodNeverDecreases) {
  const LinearModel model(default_config(2));
  const Eigen::Matrix2d truth = Eigen::Vector2d(2e-6, 0.5e-6).asDiagonal();
  const ShiftRecord record = simulate_record(model, truth, 150, 3);
  EmSettings settings = EmSettings::around(1e-6 * Eigen::Matrix2d::Identity());
  settings.max_iterations = 60;
  const EmResult result = em_fit(model, std::span<const ShiftRecord>(&record, 1), settings);
  ASSERT_EQ(result.runs.size(), 3u);
  for (const EmRun& run : result.runs) {
    ASSERT_FALSE(run.failed) << run.message;
    for (std::size_t i = 1; i < run.log_likelihood_trace.size(); ++i) {
      EXPECT_GE(run.log_likelihood_trace[i], run.log_likelihood_trace[i - 1] - 1e-9);
    }
  }
  for (const EmRun& run : result.runs) {
    EXPECT_LE(run.log_likelihood_trace.back(), result.log_likelihood_trace.back());
  }
}

TEST(Em, RecoversMeasurementNoise) {
  const LinearModel model(default_config());
  Eigen::Matrix2d truth;
  truth << 1.5e-6, 0.3e-6, 0.3e-6, 0.8e-6;
  for (std::uint64_t seed : {1u, 2u}) {
    const ShiftRecord record = simulate_record(model, truth, 600, seed);
    const EmResult result = em_fit(model, record.tilts, record.measurements, EmSettings::around(model.measurement_noise()));
    EXPECT_LE(rel_error(result.sigma_eps, truth), 0.2) << "seed " << seed;
    EXPECT_TRUE(std::isfinite(result.log_likelihood_trace.back()));
  }
}

TEST(Em, PoolsSeveralRecords) {
  const LinearModel model(default_config(2));
  const Eigen::Matrix2d truth = 3e-6 * Eigen::Matrix2d::Identity();
  const std::vector<ShiftRecord> records{simulate_record(model, truth, 200, 5), simulate_record(model, truth, 200, 6)};
  const EmResult pooled = em_fit(model, records, EmSettings::around(1e-6 * Eigen::Matrix2d::Identity()));
  EXPECT_LE(rel_error(pooled.sigma_eps, truth), 0.2);
  const double ll = log_likelihood(model.with_measurement_noise(pooled.sigma_eps), records);
  EXPECT_NEAR(ll, pooled.log_likelihood_trace.back(), 1e-9 * std::abs(ll));
}

TEST(Em, SettingsValidation) {
  const LinearModel model(default_config(1, 0));
  const ShiftRecord record{{Tilt{}}, {Eigen::Vector2d::Zero()}};
  EmSettings settings;
  settings.initializations = {};
  EXPECT_THROW(em_fit(model, std::span<const ShiftRecord>(&record, 1), settings), InvalidArgument);
  settings = EmSettings::around(Eigen::Matrix2d::Identity());
  settings.initializations[1] << 1, 2, 2, 1;
  EXPECT_THROW(em_fit(model, std::span<const ShiftRecord>(&record, 1), settings), InvalidArgument);
  EXPECT_THROW(em_fit(model, std::span<const ShiftRecord>{}, EmSettings::around(Eigen::Matrix2d::Identity())),
               InvalidArgument);
}
