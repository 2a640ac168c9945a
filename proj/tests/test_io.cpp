#include <filesystem>

#include <gtest/gtest.h>

#include "tiltab/io.hpp"

using namespace tiltab;

namespace {

std::filesystem::path scratch_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "tiltab_test_io";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(ConfigJson, RoundTripKeepsEveryField) {
  ModelConfig cfg = default_config(3, 1);
  cfg.sample_time = 0.5;
  cfg.measurement_noise << 2e-6, 1e-7, 1e-7, 3e-6;
  cfg.tilt_bounds.explicit_bounds = {1e-4, 2e-4};
  cfg.process_noise_diag(2) = 4e-5;
  cfg.weight = Eigen::MatrixXd::Identity(cfg.state_dim(), cfg.state_dim());
  const ModelConfig back = io::config_from_json(io::to_json(cfg));
  EXPECT_EQ(back.max_order, 3);
  EXPECT_EQ(back.drift_order, 1);
  EXPECT_EQ(back.sample_time, 0.5);
  EXPECT_EQ(back.measurement_noise, cfg.measurement_noise);
  EXPECT_EQ(back.process_noise_diag, cfg.process_noise_diag);
  EXPECT_EQ(back.state_scales, cfg.state_scales);
  EXPECT_EQ(back.prior_cov, cfg.prior_cov);
  EXPECT_EQ(back.tilt_bounds.explicit_bounds, cfg.tilt_bounds.explicit_bounds);
  EXPECT_EQ(back.weight, cfg.weight);
}

TEST(ConfigJson, MissingFieldsTakeDefaults) {
  const ModelConfig cfg = io::config_from_json(io::Json::parse(R"({"max_order": 2})"));
  EXPECT_EQ(cfg.state_dim(), 10);
  EXPECT_EQ(cfg.measurement_noise, default_config(2).measurement_noise);
}

TEST(ConfigJson, RejectsInvalidInput) {
  EXPECT_THROW(io::config_from_json(io::Json::parse("[1, 2]")), InvalidArgument);
  EXPECT_THROW(io::config_from_json(io::Json::parse(R"({"max_order": 0})")), InvalidArgument);
  EXPECT_THROW(io::config_from_json(io::Json::parse(R"({"schema_version": 99})")), InvalidArgument);
  EXPECT_THROW(io::config_from_json(io::Json::parse(R"({"measurement_noise": [[1, 0, 0]]})")), InvalidArgument);
  EXPECT_THROW(io::config_from_json(io::Json::parse(R"({"measurement_noise": [[1, 0], [0, -1]]})")), InvalidArgument);
  EXPECT_THROW(io::config_from_json(io::Json::parse(R"({"state_scales": [1, 2]})")), InvalidArgument);
}

TEST(Files, ReadWriteAndErrors) {
  const auto path = (scratch_dir() / "cfg.json").string();
  io::write_json(path, io::to_json(default_config()));
  EXPECT_EQ(io::load_config(path).state_dim(), 19);
  io::write_text(path, "{not json");
  EXPECT_THROW(io::read_json(path), InvalidArgument);
  EXPECT_THROW(io::read_file((scratch_dir() / "missing.json").string()), InvalidArgument);
}

TEST(SequenceIo, JsonAndCsvRoundTripExactly) {
  const TiltSequence seq{{{1.0 / 3.0, -2e-3}, {0.0, 4.5e-4}}, {5e-4, 1e-3}};
  const TiltSequence j = io::sequence_from_json(io::to_json(seq));
  const TiltSequence c = io::sequence_from_csv(io::sequence_to_csv(seq));
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(j.tilts[k].tx, seq.tilts[k].tx);
    EXPECT_EQ(c.tilts[k].tx, seq.tilts[k].tx);
    EXPECT_EQ(c.tilts[k].ty, seq.tilts[k].ty);
    EXPECT_EQ(c.bounds[k], seq.bounds[k]);
  }
}

TEST(SequenceIo, RejectsMalformedInput) {
  EXPECT_THROW(io::sequence_from_csv(""), InvalidArgument);
  EXPECT_THROW(io::sequence_from_csv("k,tx,ty,bound\n0,abc,0,1\n"), InvalidArgument);
  EXPECT_THROW(io::sequence_from_csv("k,tx,ty,bound\n0,1,2\n"), InvalidArgument);
  EXPECT_THROW(io::sequence_from_json(io::Json::parse(R"({"bounds": [1]})")), InvalidArgument);
  EXPECT_THROW(io::sequence_from_json(io::Json::parse(R"({"tilts": [[0, 0]], "bounds": [1, 2]})")), InvalidArgument);
}

TEST(ExperimentIo, RoundTrip) {
  io::ExperimentRecord rec;
  rec.config = default_config(2, 1);
  rec.sequence = {{{1e-3, 0.0}, {0.0, 1e-3}}, {2e-3, 2e-3}};
  rec.measurements = {{0.1, 0.2}, {-0.3, 0.4}};
  rec.truth = std::vector<Eigen::VectorXd>{Eigen::VectorXd::Ones(8), Eigen::VectorXd::Zero(8)};
  rec.seed = 42;
  rec.run = 3;
  rec.timestamps = {0.0, 1.0};
  const io::ExperimentRecord back = io::experiment_from_json(io::to_json(rec));
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.run, 3);
  EXPECT_EQ(back.measurements[1], rec.measurements[1]);
  ASSERT_TRUE(back.truth.has_value());
  EXPECT_EQ((*back.truth)[0], (*rec.truth)[0]);
  EXPECT_EQ(back.config.state_dim(), 8);
  EXPECT_EQ(back.timestamps, rec.timestamps);
}

TEST(ExperimentIo, RejectsLengthMismatch) {
  EXPECT_THROW(io::experiment_from_json(io::Json::parse(R"({"tilts": [[0, 0]], "measurements": []})")),
               InvalidArgument);
  EXPECT_THROW(io::experiment_from_json(io::Json::parse(R"({"tilts": [[0, 0]]})")), InvalidArgument);
}

TEST(TrajectoryCsv, HeaderAndRows) {
  const std::vector<Tilt> tilts{{0.0, 0.0}};
  const std::vector<Eigen::Vector2d> ys{{1.0, 2.0}};
  const std::vector<Eigen::VectorXd> means{Eigen::Vector2d(3.0, 4.0)};
  const std::vector<Eigen::MatrixXd> covs{Eigen::Matrix2d::Identity()};
  const std::string csv = io::trajectory_to_csv({"a", "b"}, tilts, ys, means, covs);
  EXPECT_EQ(csv, "k,tx,ty,y0,y1,mean[a],mean[b],var[a],var[b]\n0,0,0,1,2,3,4,1,1\n");
}
