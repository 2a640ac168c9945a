#pragma once

// Expectation-maximization for the measurement-noise covariance Σ_ε.
// E-step: RTS smoothing under the current Σ_ε. M-step: the closed-form
// average of smoothed residual outer products plus C P_{k|N-1} Cᵀ.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "tiltab/errors.hpp"
#include "tiltab/estimation.hpp"
#include "tiltab/state_space.hpp"

namespace tiltab {

// One recorded tilt experiment.
struct ShiftRecord {
  std::vector<Tilt> tilts;
  std::vector<Eigen::Vector2d> measurements;
};

struct EmSettings {
  int max_iterations = 200;
  double log_likelihood_tolerance = 1e-8;  // relative to max(1, |log-likelihood|)
  std::vector<Eigen::Matrix2d> initializations;
  double jitter = 1e-12;  // eigenvalue floor on every M-step output

  // 0.1x, 1x and 10x a rough guess.
  static EmSettings around(const Eigen::Matrix2d& guess) {
    EmSettings s;
    s.initializations = {0.1 * guess, guess, 10.0 * guess};
    return s;
  }
};

struct EmRun {
  Eigen::Matrix2d sigma_eps = Eigen::Matrix2d::Identity();
  std::vector<double> log_likelihood_trace;  // likelihood of each iterate, starting at the initialization
  int iterations = 0;
  bool converged = false;
  bool failed = false;
  std::string message;
};

struct EmResult {
  Eigen::Matrix2d sigma_eps = Eigen::Matrix2d::Identity();
  std::vector<double> log_likelihood_trace;
  int chosen_init = 0;
  std::vector<EmRun> runs;
};

namespace detail {

inline Eigen::Matrix2d floor_eigenvalues(const Eigen::Matrix2d& m, double floor) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(0.5 * (m + m.transpose()));
  const Eigen::Vector2d ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline void validate(const EmSettings& settings) {
  require(settings.max_iterations >= 1, "em: max_iterations must be >= 1");
  require(settings.log_likelihood_tolerance > 0.0, "em: tolerance must be positive");
  require(!settings.initializations.empty(), "em: at least one initialization is required");
  for (const auto& init : settings.initializations) {
    require(init.allFinite() && detail::is_symmetric(init) && detail::min_eigenvalue(init) > 0.0,
            "em: initializations must be symmetric positive definite");
  }
}

}  // namespace detail

// Unnormalized M-step sum over one record.
inline Eigen::Matrix2d em_mstep_sum(const LinearModel& model, std::span<const Tilt> tilts,
                                    std::span<const Eigen::Vector2d> measurements, const SmootherOutput& smoothed) {
  require(tilts.size() == measurements.size(), "em_mstep: tilts and measurements differ in length");
  require(smoothed.means.size() == tilts.size(), "em_mstep: smoother output does not cover every step");
  Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
  for (std::size_t k = 0; k < tilts.size(); ++k) {
    const Eigen::MatrixXd c = model.observation(tilts[k]);
    const Eigen::Vector2d e = measurements[k] - c * smoothed.means[k];
    acc += e * e.transpose() + c * smoothed.covs[k] * c.transpose();
  }
  return acc;
}

inline Eigen::Matrix2d em_mstep(const LinearModel& model, std::span<const Tilt> tilts,
                                std::span<const Eigen::Vector2d> measurements, const SmootherOutput& smoothed) {
  require(!tilts.empty(), "em_mstep: need at least one step");
  const Eigen::Matrix2d acc = em_mstep_sum(model, tilts, measurements, smoothed);
  return symmetrized(acc / static_cast<double>(tilts.size()));
}

inline double log_likelihood(const LinearModel& model, std::span<const ShiftRecord> records) {
  double ll = 0.0;
  for (const auto& r : records) ll += innovation_log_likelihood(model, r.tilts, r.measurements);
  return ll;
}

namespace detail {

struct EStep {
  std::vector<FilterOutput> filtered;
  double log_likelihood = 0.0;
};

inline EStep filter_records(const LinearModel& model, std::span<const ShiftRecord> records) {
  EStep e;
  for (const auto& r : records) {
    e.filtered.push_back(run_filter(model, r.tilts, r.measurements));
    e.log_likelihood += innovation_log_likelihood(e.filtered.back());
  }
  return e;
}

inline Eigen::Matrix2d maximize(const LinearModel& model, std::span<const ShiftRecord> records, const EStep& e,
                                double jitter) {
  Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
  std::size_t steps = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const SmootherOutput smoothed = rts_smooth(model, e.filtered[i], false);
    acc += em_mstep_sum(model, records[i].tilts, records[i].measurements, smoothed);
    steps += records[i].tilts.size();
  }
  require(steps > 0, "em: records contain no steps");
  return floor_eigenvalues(symmetrized(acc / static_cast<double>(steps)), jitter);
}

}  // namespace detail

// One E/M cycle over all records: returns the updated Σ_ε.
inline Eigen::Matrix2d em_iteration(const LinearModel& model, std::span<const ShiftRecord> records, double jitter) {
  return detail::maximize(model, records, detail::filter_records(model, records), jitter);
}

inline EmRun em_run(const LinearModel& model, std::span<const ShiftRecord> records, const Eigen::Matrix2d& init,
                    const EmSettings& settings) {
  EmRun run;
  run.sigma_eps = init;
  try {
    LinearModel current = model.with_measurement_noise(init);
    detail::EStep e = detail::filter_records(current, records);
    run.log_likelihood_trace.push_back(e.log_likelihood);
    for (int it = 0; it < settings.max_iterations; ++it) {
      const Eigen::Matrix2d next = detail::maximize(current, records, e, settings.jitter);
      const LinearModel candidate = model.with_measurement_noise(next);
      detail::EStep trial = detail::filter_records(candidate, records);
      if (!std::isfinite(trial.log_likelihood)) throw SingularInnovation("em: likelihood is not finite");
      const double ll_prev = e.log_likelihood;
      const double scale = settings.log_likelihood_tolerance * std::max(1.0, std::abs(ll_prev));
      const double gain = trial.log_likelihood - ll_prev;
      if (gain < 0.0) {
        // EM cannot lower the likelihood; a drop is rounding in the filter. Keep the last iterate.
        run.converged = -gain <= scale;
        if (!run.converged) run.message = "em: likelihood decreased by " + std::to_string(-gain);
        break;
      }
      current = candidate;
      e = std::move(trial);
      run.sigma_eps = next;
      run.log_likelihood_trace.push_back(e.log_likelihood);
      run.iterations = it + 1;
      if (gain <= scale) {
        run.converged = true;
        break;
      }
    }
  } catch (const std::exception& e) {
    run.failed = true;
    run.message = e.what();
  }
  return run;
}

// Runs EM from every initialization and keeps the highest final likelihood.
inline EmResult em_fit(const LinearModel& model, std::span<const ShiftRecord> records, const EmSettings& settings) {
  detail::validate(settings);
  require(!records.empty(), "em: at least one record is required");
  for (const auto& r : records) {
    require(r.tilts.size() == r.measurements.size(), "em: tilts and measurements differ in length");
  }
  EmResult result;
  int best = -1;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < settings.initializations.size(); ++i) {
    EmRun run = em_run(model, records, settings.initializations[i], settings);
    if (!run.failed && !run.log_likelihood_trace.empty() && run.log_likelihood_trace.back() > best_ll) {
      best_ll = run.log_likelihood_trace.back();
      best = static_cast<int>(i);
    }
    result.runs.push_back(std::move(run));
  }
  if (best < 0) {
    throw SingularInnovation("em: every initialization failed: " + result.runs.front().message);
  }
  const EmRun& chosen = result.runs[static_cast<std::size_t>(best)];
  result.sigma_eps = chosen.sigma_eps;
  result.log_likelihood_trace = chosen.log_likelihood_trace;
  result.chosen_init = best;
  return result;
}

inline EmResult em_fit(const LinearModel& model, const std::vector<Tilt>& tilts,
                       const std::vector<Eigen::Vector2d>& measurements, const EmSettings& settings) {
  const ShiftRecord record{tilts, measurements};
  return em_fit(model, std::span<const ShiftRecord>(&record, 1), settings);
}

}  // namespace tiltab
