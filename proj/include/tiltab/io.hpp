#pragma once

// JSON and CSV formats. Every JSON document carries "schema_version".
// Matrices are nested row-major arrays; tilt sequences are [[tx, ty], ...].

#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "tiltab/em.hpp"
#include "tiltab/errors.hpp"
#include "tiltab/estimation.hpp"
#include "tiltab/schedule.hpp"
#include "tiltab/state_space.hpp"

namespace tiltab::io {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

inline Json to_json(const Eigen::VectorXd& v) {
  Json j = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline Json to_json(const Eigen::MatrixXd& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    j.push_back(std::move(row));
  }
  return j;
}

inline Json to_json(const std::vector<double>& v) { return Json(v); }

inline Json to_json(const std::vector<Tilt>& tilts) {
  Json j = Json::array();
  for (const auto& t : tilts) j.push_back({t.tx, t.ty});
  return j;
}

inline Json to_json(const std::vector<Eigen::Vector2d>& ys) {
  Json j = Json::array();
  for (const auto& y : ys) j.push_back({y(0), y(1)});
  return j;
}

inline Json to_json(const std::vector<Eigen::VectorXd>& xs) {
  Json j = Json::array();
  for (const auto& x : xs) j.push_back(to_json(x));
  return j;
}

inline Eigen::VectorXd vector_from_json(const Json& j, const std::string& what) {
  require(j.is_array(), what + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    require(j[i].is_number(), what + ": expected numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& what) {
  require(j.is_array() && !j.empty(), what + ": expected a non-empty array of rows");
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    require(j[r].is_array() && j[r].size() == cols, what + ": rows must have equal length");
    for (std::size_t c = 0; c < cols; ++c) {
      require(j[r][c].is_number(), what + ": expected numbers");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

inline std::vector<Tilt> tilts_from_json(const Json& j) {
  require(j.is_array(), "tilts: expected an array of [tx, ty]");
  std::vector<Tilt> out;
  for (const auto& t : j) {
    require(t.is_array() && t.size() == 2 && t[0].is_number() && t[1].is_number(), "tilts: expected [tx, ty] pairs");
    out.push_back({t[0].get<double>(), t[1].get<double>()});
  }
  return out;
}

inline std::vector<Eigen::Vector2d> measurements_from_json(const Json& j) {
  require(j.is_array(), "measurements: expected an array of [y0, y1]");
  std::vector<Eigen::Vector2d> out;
  for (const auto& y : j) {
    require(y.is_array() && y.size() == 2 && y[0].is_number() && y[1].is_number(),
            "measurements: expected [y0, y1] pairs");
    out.emplace_back(y[0].get<double>(), y[1].get<double>());
  }
  return out;
}

inline void check_schema(const Json& j, const std::string& what) {
  require(j.is_object(), what + ": expected a JSON object");
  if (j.contains("schema_version")) {
    require(j["schema_version"].is_number_integer() && j["schema_version"].get<int>() <= kSchemaVersion,
            what + ": unsupported schema_version");
  }
}

// ---------------------------------------------------------------- config

inline Json to_json(const ModelConfig& cfg) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["max_order"] = cfg.max_order;
  j["drift_order"] = cfg.drift_order;
  j["sample_time"] = cfg.sample_time;
  j["state_scales"] = to_json(cfg.state_scales);
  j["measurement_scale"] = cfg.measurement_scale;
  j["process_noise_diag"] = to_json(cfg.process_noise_diag);
  j["measurement_noise"] = to_json(Eigen::MatrixXd(cfg.measurement_noise));
  j["prior_mean"] = to_json(cfg.prior_mean);
  j["prior_cov"] = to_json(cfg.prior_cov);
  Json bounds;
  bounds["max_tilt"] = cfg.tilt_bounds.max_tilt;
  bounds["ramp_steps"] = cfg.tilt_bounds.ramp_steps;
  bounds["explicit_bounds"] = cfg.tilt_bounds.explicit_bounds;
  j["tilt_bound_schedule"] = bounds;
  if (cfg.weight.size() != 0) j["weight"] = to_json(cfg.weight);
  return j;
}

// Missing fields take the defaults for the given (max_order, drift_order).
inline ModelConfig config_from_json(const Json& j) {
  check_schema(j, "config");
  const int max_order = j.value("max_order", 4);
  const int drift_order = j.value("drift_order", 2);
  require(max_order >= 1 && max_order <= kMaxSupportedOrder, "config: max_order must be in [1, 8]");
  require(drift_order >= 0 && drift_order <= 16, "config: drift_order must be in [0, 16]");
  ModelConfig cfg = default_config(max_order, drift_order);
  cfg.sample_time = j.value("sample_time", cfg.sample_time);
  if (j.contains("state_scales")) cfg.state_scales = vector_from_json(j["state_scales"], "state_scales");
  cfg.measurement_scale = j.value("measurement_scale", cfg.measurement_scale);
  if (j.contains("process_noise_diag")) {
    cfg.process_noise_diag = vector_from_json(j["process_noise_diag"], "process_noise_diag");
  }
  if (j.contains("measurement_noise")) {
    const Eigen::MatrixXd r = matrix_from_json(j["measurement_noise"], "measurement_noise");
    require(r.rows() == 2 && r.cols() == 2, "measurement_noise: must be 2 x 2");
    cfg.measurement_noise = r;
  }
  if (j.contains("prior_mean")) cfg.prior_mean = vector_from_json(j["prior_mean"], "prior_mean");
  if (j.contains("prior_cov")) cfg.prior_cov = matrix_from_json(j["prior_cov"], "prior_cov");
  if (j.contains("tilt_bound_schedule")) {
    const Json& b = j["tilt_bound_schedule"];
    require(b.is_object(), "tilt_bound_schedule: expected an object");
    cfg.tilt_bounds.max_tilt = b.value("max_tilt", cfg.tilt_bounds.max_tilt);
    cfg.tilt_bounds.ramp_steps = b.value("ramp_steps", cfg.tilt_bounds.ramp_steps);
    if (b.contains("explicit_bounds")) {
      const Eigen::VectorXd e = vector_from_json(b["explicit_bounds"], "explicit_bounds");
      cfg.tilt_bounds.explicit_bounds.assign(e.data(), e.data() + e.size());
    }
  }
  if (j.contains("weight")) cfg.weight = matrix_from_json(j["weight"], "weight");
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------- files

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json(const std::string& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw InvalidArgument("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline ModelConfig load_config(const std::string& path) { return config_from_json(read_json(path)); }

// ---------------------------------------------------------------- sequences

inline Json to_json(const TiltSequence& seq) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["tilts"] = to_json(seq.tilts);
  j["bounds"] = to_json(seq.bounds);
  return j;
}

inline TiltSequence sequence_from_json(const Json& j) {
  check_schema(j, "tilt sequence");
  require(j.contains("tilts"), "tilt sequence: missing 'tilts'");
  TiltSequence seq;
  seq.tilts = tilts_from_json(j["tilts"]);
  if (j.contains("bounds")) {
    const Eigen::VectorXd b = vector_from_json(j["bounds"], "bounds");
    seq.bounds.assign(b.data(), b.data() + b.size());
    require(seq.bounds.size() == seq.tilts.size(), "tilt sequence: bounds and tilts differ in length");
  }
  return seq;
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return ss.str();
}

inline std::string sequence_to_csv(const TiltSequence& seq) {
  std::ostringstream ss;
  ss << "k,tx,ty,bound\n";
  for (std::size_t k = 0; k < seq.tilts.size(); ++k) {
    ss << k << ',' << format_double(seq.tilts[k].tx) << ',' << format_double(seq.tilts[k].ty) << ','
       << format_double(k < seq.bounds.size() ? seq.bounds[k] : 0.0) << '\n';
  }
  return ss.str();
}

inline TiltSequence sequence_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "tilt csv: empty file");
  TiltSequence seq;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(row, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw InvalidArgument("tilt csv: cannot parse '" + cell + "'");
      }
    }
    require(values.size() == 4, "tilt csv: expected columns k,tx,ty,bound");
    seq.tilts.push_back({values[1], values[2]});
    seq.bounds.push_back(values[3]);
  }
  return seq;
}

// ---------------------------------------------------------------- results

inline Json to_json(const SolverDiagnostics& d) {
  Json j;
  j["starts_tried"] = d.starts_tried;
  j["best_start"] = d.best_start;
  j["iterations"] = d.iterations;
  j["converged"] = d.converged;
  j["gradient_norm"] = d.gradient_norm;
  if (!d.iteration_costs.empty()) j["iteration_costs"] = d.iteration_costs;
  return j;
}

inline Json to_json(const ScheduleResult& r) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["tilts"] = to_json(r.sequence.tilts);
  j["bounds"] = to_json(r.sequence.bounds);
  j["cost"] = r.cost;
  j["cost_trajectory"] = r.cost_trajectory;
  j["diagnostics"] = to_json(r.diagnostics);
  if (!r.step_diagnostics.empty()) {
    Json steps = Json::array();
    for (const auto& d : r.step_diagnostics) steps.push_back(to_json(d));
    j["step_diagnostics"] = steps;
  }
  return j;
}

inline Json to_json(const EmResult& r) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["sigma_eps"] = to_json(Eigen::MatrixXd(r.sigma_eps));
  j["log_likelihood_trace"] = r.log_likelihood_trace;
  j["chosen_init"] = r.chosen_init;
  Json runs = Json::array();
  for (const auto& run : r.runs) {
    Json rj;
    rj["sigma_eps"] = to_json(Eigen::MatrixXd(run.sigma_eps));
    rj["iterations"] = run.iterations;
    rj["converged"] = run.converged;
    rj["failed"] = run.failed;
    if (!run.message.empty()) rj["message"] = run.message;
    rj["final_log_likelihood"] =
        run.log_likelihood_trace.empty() ? Json(nullptr) : Json(run.log_likelihood_trace.back());
    runs.push_back(rj);
  }
  j["runs"] = runs;
  return j;
}

// ---------------------------------------------------------------- experiments

// A recorded (here: simulated) tilt experiment. Measurements are in
// normalized shift units; truth, when present, in normalized state units.
struct ExperimentRecord {
  ModelConfig config;
  TiltSequence sequence;
  std::vector<Eigen::Vector2d> measurements;
  std::optional<std::vector<Eigen::VectorXd>> truth;
  std::uint64_t seed = 0;
  int run = 0;
  std::vector<double> timestamps;  // seconds since the first measurement
};

inline Json to_json(const ExperimentRecord& rec) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = rec.seed;
  j["run"] = rec.run;
  j["config"] = to_json(rec.config);
  j["tilts"] = to_json(rec.sequence.tilts);
  j["bounds"] = to_json(rec.sequence.bounds);
  j["timestamps"] = rec.timestamps;
  j["measurements"] = to_json(rec.measurements);
  if (rec.truth) j["truth"] = to_json(*rec.truth);
  return j;
}

inline ExperimentRecord experiment_from_json(const Json& j) {
  check_schema(j, "experiment");
  require(j.contains("tilts") && j.contains("measurements"), "experiment: needs 'tilts' and 'measurements'");
  ExperimentRecord rec;
  if (j.contains("config")) rec.config = config_from_json(j["config"]);
  rec.sequence = sequence_from_json(j);
  rec.measurements = measurements_from_json(j["measurements"]);
  require(rec.measurements.size() == rec.sequence.tilts.size(), "experiment: tilts and measurements differ in length");
  rec.seed = j.value("seed", std::uint64_t{0});
  rec.run = j.value("run", 0);
  if (j.contains("timestamps")) {
    const Eigen::VectorXd t = vector_from_json(j["timestamps"], "timestamps");
    rec.timestamps.assign(t.data(), t.data() + t.size());
  }
  if (j.contains("truth")) {
    std::vector<Eigen::VectorXd> truth;
    for (const auto& x : j["truth"]) truth.push_back(vector_from_json(x, "truth"));
    require(truth.size() == rec.measurements.size(), "experiment: truth and measurements differ in length");
    rec.truth = std::move(truth);
  }
  return rec;
}

// One row per step: tilt, measurement, state means and covariance diagonal.
inline std::string trajectory_to_csv(const std::vector<std::string>& labels, std::span<const Tilt> tilts,
                                     std::span<const Eigen::Vector2d> measurements,
                                     const std::vector<Eigen::VectorXd>& means,
                                     const std::vector<Eigen::MatrixXd>& covs) {
  std::ostringstream ss;
  ss << "k,tx,ty,y0,y1";
  for (const auto& l : labels) ss << ",mean[" << l << "]";
  for (const auto& l : labels) ss << ",var[" << l << "]";
  ss << '\n';
  for (std::size_t k = 0; k < means.size(); ++k) {
    ss << k << ',' << format_double(tilts[k].tx) << ',' << format_double(tilts[k].ty) << ','
       << format_double(measurements[k](0)) << ',' << format_double(measurements[k](1));
    for (Eigen::Index i = 0; i < means[k].size(); ++i) ss << ',' << format_double(means[k](i));
    for (Eigen::Index i = 0; i < covs[k].rows(); ++i) ss << ',' << format_double(covs[k](i, i));
    ss << '\n';
  }
  return ss.str();
}

}  // namespace tiltab::io
