#pragma once

// End-to-end workflow against the simulator: collect data, fit Σ_ε, design a
// tilt pattern, estimate, evaluate predicted vs realized accuracy and run the
// estimate/correct loop. Each command returns JSON so the CLI and the tests
// share one code path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tiltab/em.hpp"
#include "tiltab/errors.hpp"
#include "tiltab/estimation.hpp"
#include "tiltab/io.hpp"
#include "tiltab/random.hpp"
#include "tiltab/schedule.hpp"
#include "tiltab/state_space.hpp"

namespace tiltab::harness {

using io::Json;

enum class PatternKind { kGreedy, kRecedingHorizon, kLissajous, kRandom };

inline PatternKind parse_pattern_kind(const std::string& s) {
  if (s == "greedy") return PatternKind::kGreedy;
  if (s == "rho" || s.rfind("rho-", 0) == 0) return PatternKind::kRecedingHorizon;
  if (s == "lissajous") return PatternKind::kLissajous;
  if (s == "random") return PatternKind::kRandom;
  throw InvalidArgument("unknown pattern kind '" + s + "' (expected greedy, rho, rho-H, lissajous or random)");
}

struct OptimizeOptions {
  std::string kind = "greedy";
  int n_steps = 60;
  int horizon = 1;
  std::uint64_t seed = 0;
  int n_starts = 1000;
  int n_warm = 100;
  int ratio_a = 3;
  int ratio_b = 2;
  int threads = 0;
};

// Weighted trace trajectory of a fixed sequence under the model prior.
inline std::vector<double> cost_trajectory(const LinearModel& model, const TiltSequence& seq) {
  return covariance_trajectory(model, model.prior_cov(), seq.tilts).weighted_traces(model.default_weight());
}

inline ScheduleResult design_pattern(const LinearModel& model, const OptimizeOptions& opt) {
  require(opt.n_steps >= 1, "optimize: N must be >= 1");
  const std::vector<double> bounds = model.config().tilt_bounds.bounds(0, opt.n_steps);
  PatternKind kind = parse_pattern_kind(opt.kind);
  int horizon = opt.horizon;
  if (kind == PatternKind::kRecedingHorizon && opt.kind.size() > 4) {
    try {
      horizon = std::stoi(opt.kind.substr(4));
    } catch (const std::exception&) {
      throw InvalidArgument("optimize: cannot parse horizon in '" + opt.kind + "'");
    }
  }
  if (kind == PatternKind::kGreedy) horizon = 1;

  ScheduleResult result;
  switch (kind) {
    case PatternKind::kGreedy:
    case PatternKind::kRecedingHorizon: {
      require(horizon >= 1 && horizon <= opt.n_steps, "optimize: need 1 <= H <= N");
      RecedingHorizonSettings settings;
      settings.n_starts = opt.n_starts;
      settings.n_warm = std::min(opt.n_warm, opt.n_starts);
      settings.multistart.threads = opt.threads;
      result = receding_horizon(model, model.default_weight(), opt.n_steps, horizon, opt.seed, settings);
      break;
    }
    case PatternKind::kLissajous:
      result.sequence = lissajous_pattern(opt.n_steps, opt.ratio_a, opt.ratio_b, bounds);
      break;
    case PatternKind::kRandom:
      result.sequence = random_pattern(opt.n_steps, bounds, opt.seed);
      break;
  }
  if (kind == PatternKind::kLissajous || kind == PatternKind::kRandom) {
    result.cost_trajectory = cost_trajectory(model, result.sequence);
    result.cost = result.cost_trajectory.back();
  }
  return result;
}

inline Json cmd_optimize(const ModelConfig& config, const OptimizeOptions& opt) {
  const LinearModel model(config);
  const ScheduleResult result = design_pattern(model, opt);
  Json j = io::to_json(result);
  j["kind"] = opt.kind;
  j["N"] = opt.n_steps;
  if (parse_pattern_kind(opt.kind) == PatternKind::kRecedingHorizon ||
      parse_pattern_kind(opt.kind) == PatternKind::kGreedy) {
    j["H"] = opt.kind == "greedy" ? 1 : (opt.kind.size() > 4 ? std::stoi(opt.kind.substr(4)) : opt.horizon);
    j["n_starts"] = opt.n_starts;
  }
  if (parse_pattern_kind(opt.kind) == PatternKind::kLissajous) j["ratio"] = {opt.ratio_a, opt.ratio_b};
  j["seed"] = opt.seed;
  return j;
}

// Reads a pattern from a ScheduleResult/TiltSequence JSON or a k,tx,ty,bound CSV.
inline TiltSequence load_pattern(const std::string& path, const ModelConfig& config) {
  TiltSequence seq;
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    seq = io::sequence_from_csv(io::read_file(path));
  } else {
    seq = io::sequence_from_json(io::read_json(path));
  }
  require(!seq.tilts.empty(), "pattern '" + path + "' is empty");
  if (seq.bounds.empty()) seq.bounds = config.tilt_bounds.bounds(0, seq.size());
  require(seq.feasible(1e-9), "pattern '" + path + "' violates its tilt bounds");
  return seq;
}

inline io::ExperimentRecord simulate_experiment(const LinearModel& model, const TiltSequence& seq, std::uint64_t seed,
                                                int run, const SimulationNoise& noise = {}) {
  auto rng = make_rng(seed, 2 * static_cast<std::uint64_t>(run));
  const Eigen::VectorXd x0 = sample_prior(model, rng);
  const SimulatedTrajectory traj =
      simulate_trajectory(model, seq.tilts, x0, substream_seed(seed, 2 * static_cast<std::uint64_t>(run) + 1), noise);
  io::ExperimentRecord rec;
  rec.config = model.config();
  rec.sequence = seq;
  rec.measurements = traj.measurements;
  rec.truth = traj.states;
  rec.seed = seed;
  rec.run = run;
  for (int k = 0; k < seq.size(); ++k) rec.timestamps.push_back(k * model.config().sample_time);
  return rec;
}

inline std::vector<io::ExperimentRecord> cmd_simulate(const ModelConfig& config, const TiltSequence& seq, int n_runs,
                                                      std::uint64_t seed) {
  require(n_runs >= 1, "simulate: runs must be >= 1");
  const LinearModel model(config);
  std::vector<io::ExperimentRecord> out;
  for (int r = 0; r < n_runs; ++r) out.push_back(simulate_experiment(model, seq, seed, r));
  return out;
}

struct EstimateOutput {
  Json report;
  std::string filtered_csv;
  std::string smoothed_csv;
};

inline EstimateOutput cmd_estimate(const ModelConfig& config, const io::ExperimentRecord& rec, bool smooth = true) {
  const LinearModel model(config);
  const FilterOutput filtered = run_filter(model, rec.sequence.tilts, rec.measurements);
  const auto labels = model.layout().labels();
  EstimateOutput out;
  out.filtered_csv = io::trajectory_to_csv(labels, rec.sequence.tilts, rec.measurements, filtered.posterior_means,
                                           filtered.covariances.posterior);
  if (smooth) {
    const SmootherOutput smoothed = rts_smooth(model, filtered);
    out.smoothed_csv =
        io::trajectory_to_csv(labels, rec.sequence.tilts, rec.measurements, smoothed.means, smoothed.covs);
  }
  const Eigen::VectorXd& mean = filtered.posterior_means.back();
  const Eigen::MatrixXd& cov = filtered.covariances.posterior.back();
  const Eigen::VectorXd phys = model.to_physical(mean);
  const Eigen::VectorXd phys_sd = model.cov_to_physical(cov).diagonal().cwiseSqrt();
  Json states = Json::array();
  for (int i = 0; i < model.state_dim(); ++i) {
    Json s;
    s["label"] = labels[static_cast<std::size_t>(i)];
    s["estimate"] = phys(i);
    s["std"] = phys_sd(i);
    s["normalized_estimate"] = mean(i);
    s["normalized_std"] = std::sqrt(cov(i, i));
    if (rec.truth) s["normalized_truth"] = rec.truth->back()(i);
    states.push_back(s);
  }
  Json& j = out.report;
  j["schema_version"] = io::kSchemaVersion;
  j["steps"] = rec.sequence.size();
  j["final_time_index"] = rec.sequence.size() - 1;
  j["states"] = states;
  j["weighted_trace"] = filtered.covariances.weighted_traces(model.default_weight());
  j["log_likelihood"] = innovation_log_likelihood(filtered);
  return out;
}

inline Json cmd_emfit(const ModelConfig& config, const std::vector<io::ExperimentRecord>& records,
                      const EmSettings& settings) {
  require(!records.empty(), "emfit: at least one experiment is required");
  const LinearModel model(config);
  std::vector<ShiftRecord> data;
  for (const auto& r : records) data.push_back({r.sequence.tilts, r.measurements});
  const EmResult result = em_fit(model, data, settings);
  Json j = io::to_json(result);
  j["records"] = records.size();
  return j;
}

// Monte-Carlo comparison of KF-predicted and realized estimation accuracy.
struct PatternEvaluation {
  std::string name;
  Eigen::VectorXd predicted_std;  // √diag P_{N-1|N-1}
  Eigen::VectorXd realized_std;   // sample std of x̂_{N-1|N-1} − x_{N-1} over runs
  Eigen::VectorXd mean_error;
  std::vector<double> weighted_trace;
  double nees_mean = 0.0;
  double nees_lower = 0.0;  // 99% two-sided band for the mean NEES
  double nees_upper = 0.0;
  int runs = 0;
};

struct EvaluateOptions {
  int n_runs = 500;
  std::uint64_t seed = 0;
  SimulationNoise truth_noise;  // defaults to the model's own noise
};

inline PatternEvaluation evaluate_pattern(const LinearModel& model, const std::string& name, const TiltSequence& seq,
                                          const EvaluateOptions& opt, std::uint64_t pattern_stream) {
  require(opt.n_runs >= 2, "evaluate: runs must be >= 2");
  const int d = model.state_dim();
  const CovarianceTrajectory covs = covariance_trajectory(model, model.prior_cov(), seq.tilts);
  const Eigen::MatrixXd& p_final = covs.posterior.back();
  const Eigen::LDLT<Eigen::MatrixXd> p_ldlt(p_final);

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sum_sq = Eigen::VectorXd::Zero(d);
  double nees = 0.0;
  const std::uint64_t seed = substream_seed(opt.seed, pattern_stream);
  for (int r = 0; r < opt.n_runs; ++r) {
    const io::ExperimentRecord rec = simulate_experiment(model, seq, seed, r, opt.truth_noise);
    const FilterOutput f = run_filter(model, rec.sequence.tilts, rec.measurements);
    const Eigen::VectorXd err = f.posterior_means.back() - rec.truth->back();
    sum += err;
    sum_sq += err.cwiseProduct(err);
    nees += err.dot(p_ldlt.solve(err));
  }
  PatternEvaluation ev;
  ev.name = name;
  ev.runs = opt.n_runs;
  ev.predicted_std = p_final.diagonal().cwiseMax(0.0).cwiseSqrt();
  ev.mean_error = sum / opt.n_runs;
  ev.realized_std = ((sum_sq - opt.n_runs * ev.mean_error.cwiseProduct(ev.mean_error)) / (opt.n_runs - 1))
                        .cwiseMax(0.0)
                        .cwiseSqrt();
  ev.weighted_trace = covs.weighted_traces(model.default_weight());
  ev.nees_mean = nees / opt.n_runs;
  const boost::math::chi_squared dist(static_cast<double>(opt.n_runs) * d);
  ev.nees_lower = boost::math::quantile(dist, 0.005) / opt.n_runs;
  ev.nees_upper = boost::math::quantile(dist, 0.995) / opt.n_runs;
  return ev;
}

inline Json to_json(const PatternEvaluation& ev, const std::vector<std::string>& labels) {
  Json j;
  j["name"] = ev.name;
  j["runs"] = ev.runs;
  Json states = Json::array();
  for (Eigen::Index i = 0; i < ev.predicted_std.size(); ++i) {
    Json s;
    s["label"] = labels[static_cast<std::size_t>(i)];
    s["predicted_std"] = ev.predicted_std(i);
    s["realized_std"] = ev.realized_std(i);
    s["mean_error"] = ev.mean_error(i);
    states.push_back(s);
  }
  j["states"] = states;
  j["weighted_trace"] = ev.weighted_trace;
  j["nees_mean"] = ev.nees_mean;
  j["nees_band_99"] = {ev.nees_lower, ev.nees_upper};
  j["nees_consistent"] = ev.nees_mean >= ev.nees_lower && ev.nees_mean <= ev.nees_upper;
  return j;
}

struct EvaluateOutput {
  Json report;
  std::string csv;  // pattern,label,predicted_std,realized_std
  std::string trace_csv;  // k, one weighted-trace column per pattern
};

inline EvaluateOutput cmd_evaluate(const ModelConfig& config,
                                   const std::vector<std::pair<std::string, TiltSequence>>& patterns,
                                   const EvaluateOptions& opt) {
  require(!patterns.empty(), "evaluate: at least one pattern is required");
  const LinearModel model(config);
  const auto labels = model.layout().labels();
  EvaluateOutput out;
  Json list = Json::array();
  std::string csv = "pattern,label,predicted_std,realized_std\n";
  std::vector<PatternEvaluation> evals;
  for (std::size_t p = 0; p < patterns.size(); ++p) {
    evals.push_back(evaluate_pattern(model, patterns[p].first, patterns[p].second, opt, p));
    const auto& ev = evals.back();
    list.push_back(to_json(ev, labels));
    for (Eigen::Index i = 0; i < ev.predicted_std.size(); ++i) {
      csv += ev.name + "," + labels[static_cast<std::size_t>(i)] + "," + io::format_double(ev.predicted_std(i)) +
             "," + io::format_double(ev.realized_std(i)) + "\n";
    }
  }
  std::string trace = "k";
  for (const auto& ev : evals) trace += "," + ev.name;
  trace += "\n";
  std::size_t longest = 0;
  for (const auto& ev : evals) longest = std::max(longest, ev.weighted_trace.size());
  for (std::size_t k = 0; k < longest; ++k) {
    trace += std::to_string(k);
    for (const auto& ev : evals) {
      trace += ",";
      if (k < ev.weighted_trace.size()) trace += io::format_double(ev.weighted_trace[k]);
    }
    trace += "\n";
  }
  out.report["schema_version"] = io::kSchemaVersion;
  out.report["seed"] = opt.seed;
  out.report["runs"] = opt.n_runs;
  out.report["patterns"] = list;
  out.csv = std::move(csv);
  out.trace_csv = std::move(trace);
  return out;
}

// Magnitudes |c_mn| of every aberration coefficient (normalized units).
inline std::vector<double> aberration_magnitudes(const LinearModel& model, const Eigen::VectorXd& x) {
  std::vector<double> out;
  for (int i = 0; i < model.basis().size(); ++i) {
    out.push_back(std::abs(model.basis().coefficient(x.head(model.aberration_dim()), i)));
  }
  return out;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

struct CorrectionOptions {
  int rounds = 3;
  int n_runs = 50;
  std::uint64_t seed = 0;
};

struct CorrectionRun {
  std::vector<std::vector<double>> residuals;  // per round (0 = before correction), per coefficient
};

// Estimate with the pattern, subtract the aberration estimate from the truth,
// and repeat. Knowledge carries over: the next round starts from the
// predicted posterior with the corrected slots re-centred at zero.
inline CorrectionRun correction_loop(const LinearModel& model, const TiltSequence& seq, Eigen::VectorXd truth,
                                     int rounds, std::uint64_t seed, const io::ExperimentRecord* first = nullptr) {
  const int l = model.aberration_dim();
  CorrectionRun out;
  out.residuals.push_back(aberration_magnitudes(model, truth));
  Eigen::VectorXd mean = model.prior_mean();
  Eigen::MatrixXd cov = model.prior_cov();
  for (int round = 0; round < rounds; ++round) {
    std::vector<Eigen::VectorXd> states;
    std::vector<Eigen::Vector2d> ys;
    if (round == 0 && first) {
      ys = first->measurements;
      states = *first->truth;
    } else {
      const SimulatedTrajectory traj =
          simulate_trajectory(model, seq.tilts, truth, substream_seed(seed, static_cast<std::uint64_t>(round)));
      states = traj.states;
      ys = traj.measurements;
    }
    FilterState state{mean, cov, 0};
    for (std::size_t k = 0; k < seq.tilts.size(); ++k) {
      if (k > 0) state = kf_predict(state, model);
      state = kf_update(state, model, seq.tilts[k], ys[k]);
    }
    Eigen::VectorXd x_end = states.back();
    const Eigen::VectorXd correction = state.mean.head(l);
    x_end.head(l) -= correction;
    state.mean.head(l).setZero();
    out.residuals.push_back(aberration_magnitudes(model, x_end));

    // Advance one step so the next experiment starts after the correction.
    auto rng = make_rng(seed, 1000 + static_cast<std::uint64_t>(round));
    StandardNormal normal;
    Eigen::VectorXd xi(model.state_dim());
    for (int i = 0; i < xi.size(); ++i) xi(i) = normal(rng);
    truth = model.transition() * x_end + model.process_noise().diagonal().cwiseSqrt().cwiseProduct(xi);
    const FilterState next = kf_predict(state, model);
    mean = next.mean;
    cov = next.cov;
  }
  return out;
}

inline Json correction_report(const std::vector<CorrectionRun>& runs) {
  Json j;
  j["schema_version"] = io::kSchemaVersion;
  j["runs"] = runs.size();
  const std::size_t rounds = runs.front().residuals.size();
  std::vector<double> medians;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<double> all;
    for (const auto& run : runs) all.insert(all.end(), run.residuals[r].begin(), run.residuals[r].end());
    medians.push_back(median(all));
  }
  j["median_residual"] = medians;
  std::vector<double> ratio;
  for (double m : medians) ratio.push_back(medians.front() > 0.0 ? m / medians.front() : 0.0);
  j["median_residual_ratio"] = ratio;
  return j;
}

inline Json cmd_correct(const ModelConfig& config, const TiltSequence& seq, const CorrectionOptions& opt) {
  require(opt.rounds >= 1 && opt.n_runs >= 1, "correct: rounds and runs must be >= 1");
  const LinearModel model(config);
  std::vector<CorrectionRun> runs;
  for (int r = 0; r < opt.n_runs; ++r) {
    auto rng = make_rng(opt.seed, 2 * static_cast<std::uint64_t>(r));
    const Eigen::VectorXd x0 = sample_prior(model, rng);
    runs.push_back(correction_loop(model, seq, x0, opt.rounds, substream_seed(opt.seed, 2 * static_cast<std::uint64_t>(r) + 1)));
  }
  return correction_report(runs);
}

// Starts from a recorded experiment with ground truth: round 1 uses its
// measurements, later rounds are simulated.
inline Json cmd_correct(const ModelConfig& config, const io::ExperimentRecord& rec, int rounds) {
  require(rec.truth.has_value(), "correct: experiment has no ground truth (only simulated records can be corrected)");
  require(rounds >= 1, "correct: rounds must be >= 1");
  const LinearModel model(config);
  const CorrectionRun run =
      correction_loop(model, rec.sequence, rec.truth->front(), rounds, substream_seed(rec.seed, 0x434f5252ULL + rec.run),
                      &rec);
  return correction_report({run});
}

}  // namespace tiltab::harness
