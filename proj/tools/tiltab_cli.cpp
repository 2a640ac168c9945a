// tiltab: command-line driver for the tilt-pattern workflow against the simulator.
//
// Exit codes: 0 success, 2 invalid input, 1 runtime failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tiltab/aberration.hpp"
#include "tiltab/errors.hpp"
#include "tiltab/harness.hpp"
#include "tiltab/io.hpp"

namespace fs = std::filesystem;
using tiltab::io::Json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool json = false;
};

tiltab::ModelConfig config_or_default(const std::string& path) {
  return path.empty() ? tiltab::default_config() : tiltab::io::load_config(path);
}

void emit(const Common& c, const Json& summary) {
  if (c.json) std::cout << summary.dump(2) << "\n";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

std::string pattern_name(const std::string& path) { return fs::path(path).stem().string(); }

tiltab::io::ExperimentRecord load_experiment(const std::string& path) {
  return tiltab::io::experiment_from_json(tiltab::io::read_json(path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tilt-pattern design, estimation and evaluation for beam-tilt aberration measurement"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&common](CLI::App* sub, bool with_seed) {
    sub->add_option("--config", common.config, "Model configuration JSON (default: built-in M=4, b=2)");
    sub->add_option("--out", common.out, "Output file or directory");
    if (with_seed) sub->add_option("--seed", common.seed, "Random seed");
    sub->add_flag("--json", common.json, "Print a JSON summary to stdout");
  };

  // optimize
  tiltab::harness::OptimizeOptions opt;
  std::string ratio = "3:2";
  std::string csv_out;
  auto* optimize = app.add_subcommand("optimize", "Design a tilt pattern");
  add_common(optimize, true);
  optimize->add_option("--kind", opt.kind, "greedy, rho, rho-H, lissajous or random")->capture_default_str();
  optimize->add_option("--N", opt.n_steps, "Pattern length")->capture_default_str();
  optimize->add_option("--H", opt.horizon, "Receding horizon length (kind=rho)")->capture_default_str();
  optimize->add_option("--starts", opt.n_starts, "Multi-start count per step")->capture_default_str();
  optimize->add_option("--warm", opt.n_warm, "Warm starts per step")->capture_default_str();
  optimize->add_option("--threads", opt.threads, "Worker threads (0 = hardware)")->capture_default_str();
  optimize->add_option("--ratio", ratio, "Lissajous frequency ratio a:b")->capture_default_str();
  optimize->add_option("--csv", csv_out, "Also write the pattern as k,tx,ty,bound CSV");

  // simulate
  std::string pattern;
  int runs = 1;
  auto* simulate = app.add_subcommand("simulate", "Simulate experiments with ground truth");
  add_common(simulate, true);
  simulate->add_option("--pattern", pattern, "Pattern file (JSON or CSV)")->required();
  simulate->add_option("--runs", runs, "Number of experiments")->capture_default_str();

  // estimate
  std::string experiment;
  bool no_smooth = false;
  auto* estimate = app.add_subcommand("estimate", "Kalman filter (and smoother) over one experiment");
  add_common(estimate, false);
  estimate->add_option("--experiment", experiment, "Experiment JSON")->required();
  estimate->add_flag("--no-smooth", no_smooth, "Skip the RTS smoother");

  // emfit
  std::vector<std::string> experiments;
  tiltab::EmSettings em_settings;
  auto* emfit = app.add_subcommand("emfit", "Fit the measurement-noise covariance by EM");
  add_common(emfit, false);
  emfit->add_option("--experiment", experiments, "Experiment JSON files")->required();
  emfit->add_option("--max-iterations", em_settings.max_iterations)->capture_default_str();
  emfit->add_option("--tolerance", em_settings.log_likelihood_tolerance)->capture_default_str();

  // evaluate
  std::vector<std::string> patterns;
  int eval_runs = 500;
  auto* evaluate = app.add_subcommand("evaluate", "Monte-Carlo predicted vs realized accuracy");
  add_common(evaluate, true);
  evaluate->add_option("--pattern", patterns, "Pattern files")->required();
  evaluate->add_option("--runs", eval_runs, "Monte-Carlo runs per pattern")->capture_default_str();

  // correct
  int rounds = 3;
  int correct_runs = 50;
  std::string correct_experiment;
  std::string correct_pattern;
  auto* correct = app.add_subcommand("correct", "Simulated estimate/correct rounds");
  add_common(correct, true);
  auto* exp_opt = correct->add_option("--experiment", correct_experiment, "Simulated experiment with ground truth");
  auto* pat_opt = correct->add_option("--pattern", correct_pattern, "Pattern for Monte-Carlo correction runs");
  exp_opt->excludes(pat_opt);
  correct->add_option("--rounds", rounds, "Estimate/correct rounds")->capture_default_str();
  correct->add_option("--runs", correct_runs, "Monte-Carlo runs (with --pattern)")->capture_default_str();

  // default-config
  int max_order = 4, drift_order = 2;
  auto* defaults = app.add_subcommand("default-config", "Write the default configuration");
  defaults->add_option("--out", common.out, "Output file (default: stdout)");
  defaults->add_option("--M", max_order, "Maximum aberration order")->capture_default_str();
  defaults->add_option("--b", drift_order, "Drift polynomial order")->capture_default_str();

  // phase-plate
  std::vector<std::string> coeffs;
  double wavelength = 1.97e-12, g_max = 1e9;
  int resolution = 128, plate_order = 4;
  auto* plate = app.add_subcommand("phase-plate", "Tabulate the wave aberration phase on a square grid");
  plate->add_option("--out", common.out, "CSV output (default: stdout)");
  plate->add_option("--M", plate_order, "Maximum aberration order")->capture_default_str();
  plate->add_option("--set", coeffs, "Coefficient m,n,re[,im] in metres (repeatable)");
  plate->add_option("--wavelength", wavelength, "Electron wavelength [m]")->capture_default_str();
  plate->add_option("--gmax", g_max, "Half-width of the frequency grid [1/m]")->capture_default_str();
  plate->add_option("--resolution", resolution, "Grid points per axis")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (optimize->parsed()) {
      const auto cfg = config_or_default(common.config);
      opt.seed = common.seed;
      const auto colon = ratio.find(':');
      tiltab::require(colon != std::string::npos, "--ratio must look like a:b");
      try {
        opt.ratio_a = std::stoi(ratio.substr(0, colon));
        opt.ratio_b = std::stoi(ratio.substr(colon + 1));
      } catch (const std::exception&) {
        throw tiltab::InvalidArgument("--ratio must look like a:b");
      }
      const Json result = tiltab::harness::cmd_optimize(cfg, opt);
      if (!common.out.empty()) tiltab::io::write_json(common.out, result);
      if (!csv_out.empty()) {
        tiltab::io::write_text(csv_out, tiltab::io::sequence_to_csv(tiltab::io::sequence_from_json(result)));
      }
      if (common.out.empty() && !common.json) std::cout << result.dump(2) << "\n";
      emit(common, {{"command", "optimize"}, {"kind", opt.kind}, {"N", opt.n_steps}, {"cost", result["cost"]},
                    {"out", common.out}});
    } else if (simulate->parsed()) {
      const auto cfg = config_or_default(common.config);
      const auto seq = tiltab::harness::load_pattern(pattern, cfg);
      const auto records = tiltab::harness::cmd_simulate(cfg, seq, runs, common.seed);
      const std::string dir = common.out.empty() ? "." : common.out;
      ensure_dir(dir);
      Json files = Json::array();
      for (const auto& rec : records) {
        std::ostringstream name;
        name << "run_" << std::setw(4) << std::setfill('0') << rec.run << ".json";
        const std::string path = (fs::path(dir) / name.str()).string();
        tiltab::io::write_json(path, tiltab::io::to_json(rec));
        files.push_back(path);
      }
      emit(common, {{"command", "simulate"}, {"runs", runs}, {"files", files}});
    } else if (estimate->parsed()) {
      const auto rec = load_experiment(experiment);
      const auto cfg = common.config.empty() ? rec.config : tiltab::io::load_config(common.config);
      const auto out = tiltab::harness::cmd_estimate(cfg, rec, !no_smooth);
      const std::string dir = common.out.empty() ? "." : common.out;
      ensure_dir(dir);
      tiltab::io::write_json((fs::path(dir) / "estimates.json").string(), out.report);
      tiltab::io::write_text((fs::path(dir) / "filtered.csv").string(), out.filtered_csv);
      if (!no_smooth) tiltab::io::write_text((fs::path(dir) / "smoothed.csv").string(), out.smoothed_csv);
      emit(common, out.report);
    } else if (emfit->parsed()) {
      std::vector<tiltab::io::ExperimentRecord> records;
      for (const auto& path : experiments) records.push_back(load_experiment(path));
      const auto cfg = common.config.empty() ? records.front().config : tiltab::io::load_config(common.config);
      tiltab::EmSettings settings = tiltab::EmSettings::around(cfg.measurement_noise);
      settings.max_iterations = em_settings.max_iterations;
      settings.log_likelihood_tolerance = em_settings.log_likelihood_tolerance;
      const Json result = tiltab::harness::cmd_emfit(cfg, records, settings);
      if (!common.out.empty()) tiltab::io::write_json(common.out, result);
      if (common.out.empty() && !common.json) std::cout << result.dump(2) << "\n";
      emit(common, result);
    } else if (evaluate->parsed()) {
      const auto cfg = config_or_default(common.config);
      std::vector<std::pair<std::string, tiltab::TiltSequence>> seqs;
      for (const auto& path : patterns) seqs.emplace_back(pattern_name(path), tiltab::harness::load_pattern(path, cfg));
      tiltab::harness::EvaluateOptions eval;
      eval.n_runs = eval_runs;
      eval.seed = common.seed;
      const auto out = tiltab::harness::cmd_evaluate(cfg, seqs, eval);
      const std::string dir = common.out.empty() ? "." : common.out;
      ensure_dir(dir);
      tiltab::io::write_json((fs::path(dir) / "evaluation.json").string(), out.report);
      tiltab::io::write_text((fs::path(dir) / "std.csv").string(), out.csv);
      tiltab::io::write_text((fs::path(dir) / "trace.csv").string(), out.trace_csv);
      emit(common, out.report);
    } else if (correct->parsed()) {
      Json result;
      if (!correct_experiment.empty()) {
        const auto rec = load_experiment(correct_experiment);
        const auto cfg = common.config.empty() ? rec.config : tiltab::io::load_config(common.config);
        result = tiltab::harness::cmd_correct(cfg, rec, rounds);
      } else {
        tiltab::require(!correct_pattern.empty(), "correct: pass --experiment or --pattern");
        const auto cfg = config_or_default(common.config);
        tiltab::harness::CorrectionOptions copt;
        copt.rounds = rounds;
        copt.n_runs = correct_runs;
        copt.seed = common.seed;
        result = tiltab::harness::cmd_correct(cfg, tiltab::harness::load_pattern(correct_pattern, cfg), copt);
      }
      if (!common.out.empty()) tiltab::io::write_json(common.out, result);
      if (common.out.empty() || common.json) std::cout << result.dump(2) << "\n";
    } else if (defaults->parsed()) {
      const Json cfg = tiltab::io::to_json(tiltab::default_config(max_order, drift_order));
      if (common.out.empty()) {
        std::cout << cfg.dump(2) << "\n";
      } else {
        tiltab::io::write_json(common.out, cfg);
      }
    } else if (plate->parsed()) {
      tiltab::AberrationVector c{tiltab::enumerate_basis(plate_order)};
      for (const auto& arg : coeffs) {
        std::vector<double> parts;
        std::stringstream ss(arg);
        std::string item;
        while (std::getline(ss, item, ',')) {
          try {
            parts.push_back(std::stod(item));
          } catch (const std::exception&) {
            throw tiltab::InvalidArgument("--set expects m,n,re[,im], got '" + arg + "'");
          }
        }
        tiltab::require(parts.size() == 3 || parts.size() == 4, "--set expects m,n,re[,im], got '" + arg + "'");
        const int i = c.basis.find(static_cast<int>(parts[0]), static_cast<int>(parts[1]));
        tiltab::require(i >= 0, "--set: coefficient not in the basis: '" + arg + "'");
        c.basis.set_coefficient(c.values, i, {parts[2], parts.size() == 4 ? parts[3] : 0.0});
      }
      const auto grid = tiltab::phase_plate_grid(c, wavelength, g_max, resolution);
      if (common.out.empty()) {
        tiltab::write_phase_plate_csv(std::cout, grid);
      } else {
        std::ofstream os(common.out, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write '" + common.out + "'");
        tiltab::write_phase_plate_csv(os, grid);
      }
    }
  } catch (const tiltab::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
