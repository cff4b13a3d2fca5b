#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mris/cli.hpp"

using namespace mris;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliRun : public ::testing::Test {
protected:
  void SetUp() override {
    setenv("MRIS_LOG_LEVEL", "quiet", 1);
    root_ = fs::temp_directory_path() / "mris_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    config_ = root_ / "run.conf";
    std::ofstream(config_) << "# tiny run\n"
                              "workdir = "
                           << (root_ / "work").string()
                           << "\nsubjects = 40\nquery_dim = 8\nheight = 4\nwidth = 4\n"
                              "split_db = 0.5\nsplit_downstream = 0.25\n"
                              "embedding_dim = 4\nhidden_dim = 8\nbatch_size = 8\n"
                              "epochs = 4\nk = 3\nprobe_epochs = 10\n";
  }
  void TearDown() override { fs::remove_all(root_); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin() + 1, {"--config", config_.string()});
    std::ostringstream out;
    err_.str("");
    return cli::run(args, out, err_);
  }

  fs::path work() const { return root_ / "work"; }

  fs::path root_, config_;
  std::ostringstream err_;
};

} // namespace

TEST(RunConfig, ParsesTextAndOverrides) {
  auto c = RunConfig::from_text("seed = 9  # comment\n\n  k=7\n");
  EXPECT_EQ(c.count("seed"), 9u);
  EXPECT_EQ(c.synthesis().k, 7u);
  EXPECT_EQ(c.training().batch_size, 64u);
  c.set("margin", "0.25");
  EXPECT_EQ(c.training().loss.margin, 0.25);
  EXPECT_NE(c.resolved().find("margin = 0.25\n"), std::string::npos);
}

TEST(RunConfig, DefaultsFollowTheRecipe) {
  const RunConfig c;
  const auto t = c.training();
  EXPECT_EQ(t.loss.margin, 0.1);
  EXPECT_EQ(t.batch_size, 64u);
  EXPECT_EQ(t.query_schedule.initial_lr, 1e-4);
  EXPECT_EQ(t.target_schedule.initial_lr, 1e-5);
  EXPECT_EQ(t.query_schedule.decay_factor, 0.8);
  EXPECT_EQ(t.query_schedule.decay_every, 150u);
  EXPECT_EQ(c.synthesis().k, 20u);
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(RunConfig::from_text("nonsense\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("unknown_key = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("epochs = -3\n").training(), ConfigError);
  EXPECT_THROW(RunConfig::from_text("margin = abc\n").training(), ConfigError);
  EXPECT_THROW(RunConfig::from_text("normalize_query = maybe\n").training(), ConfigError);
  EXPECT_THROW(RunConfig::from_text("reduction = max\n").training(), ConfigError);
  EXPECT_THROW(RunConfig::from_text("activation = gelu\n").training(), ConfigError);
  EXPECT_THROW(RunConfig::from_text("synthesize_split = nope\n").synthesize_split(), ConfigError);
  EXPECT_THROW(RunConfig::from_file("/nonexistent/mris.conf"), ConfigError);
}

TEST(EmbeddingFile, RoundTripAndCorruption) {
  const auto path = fs::temp_directory_path() / "mris_test.mrem";
  cli::EmbeddingFile f;
  f.dim = 3;
  f.ids = {{"a", 0}, {"b", 2}};
  f.embeddings = {{1, 2, 3}, {-1, 0.5f, 0}};
  cli::save_embeddings(f, path);
  const auto g = cli::load_embeddings(path);
  EXPECT_EQ(g.ids, f.ids);
  EXPECT_EQ(g.embeddings, f.embeddings);
  auto bytes = io::read_file(path);
  bytes[20] ^= 1;
  io::write_file(path, bytes);
  EXPECT_THROW(cli::load_embeddings(path), DataError);
  fs::remove(path);
}

TEST_F(CliRun, FullPipelineAndDeterminism) {
  for (const char* cmd : {"generate", "train", "embed", "index", "synthesize", "evaluate"})
    ASSERT_EQ(run({cmd}), 0) << cmd << ": " << err_.str();
  for (const char* f : {"data/manifest", "models/query.g0.mrse", "models/target.g0.mrse",
                        "models/train_log.g0.csv", "embeddings/target.g0.mrem",
                        "index/db.g0.mrdb", "synth/manifest", "synth/report.txt",
                        "reports/evaluation.csv", "reports/evaluation.txt",
                        "train.resolved.conf", "evaluate.resolved.conf"})
    EXPECT_TRUE(fs::exists(work() / f)) << f;

  const auto log = slurp(work() / "models/train_log.g0.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,loss,batches,samples,lr_query,lr_target");

  const auto csv = slurp(work() / "reports/evaluation.csv");
  EXPECT_NE(csv.find("recall@1,group0,"), std::string::npos);
  EXPECT_NE(csv.find("random_baseline_abs_error_pixel_median,all,"), std::string::npos);
  EXPECT_NE(csv.find("probe_accuracy_ground_truth,all,"), std::string::npos);

  const auto model = slurp(work() / "models/query.g0.mrse");
  ASSERT_EQ(run({"evaluate"}), 0);
  EXPECT_EQ(slurp(work() / "reports/evaluation.csv"), csv);
  ASSERT_EQ(run({"train"}), 0);
  EXPECT_EQ(slurp(work() / "models/query.g0.mrse"), model);

  const auto synth = load_dataset(work() / "synth");
  EXPECT_FALSE(synth.samples.empty());
  for (const auto& [id, split] : synth.subjects) EXPECT_EQ(split, Split::test);
}

TEST_F(CliRun, SeparateGroupsVariant) {
  ASSERT_EQ(run({"generate"}), 0);
  for (const char* cmd : {"train", "embed", "index", "evaluate"})
    ASSERT_EQ(run({cmd, "--groups", "2"}), 0) << cmd << ": " << err_.str();
  EXPECT_TRUE(fs::exists(work() / "index/db.g1.mrdb"));
  const auto csv = slurp(work() / "reports/evaluation.csv");
  EXPECT_NE(csv.find("recall@1,group1,"), std::string::npos);
}

TEST_F(CliRun, ExitCodes) {
  EXPECT_EQ(run({"train", "--batch_size", "1"}), 2);
  EXPECT_NE(err_.str().find("batch_size"), std::string::npos);
  EXPECT_EQ(run({"train", "--no_such_key", "1"}), 2);
  EXPECT_EQ(run({"train", "--epochs"}), 2);
  EXPECT_EQ(run({"train"}), 3); // no dataset yet
  EXPECT_NE(err_.str().find("generate"), std::string::npos);
  ASSERT_EQ(run({"generate"}), 0);
  EXPECT_EQ(run({"evaluate"}), 3); // no models yet
  EXPECT_EQ(run({"generate", "--groups", "3"}), 0); // groups only matter downstream
  EXPECT_EQ(run({"train", "--groups", "3"}), 2);    // 3 does not divide height 4

  // Database built for one embedding size, queried with a model of another.
  ASSERT_EQ(run({"train"}), 0);
  ASSERT_EQ(run({"embed"}), 0);
  ASSERT_EQ(run({"index"}), 0);
  ASSERT_EQ(run({"train", "--embedding_dim", "6"}), 0);
  EXPECT_EQ(run({"synthesize"}), 3);
  EXPECT_NE(err_.str().find("dim"), std::string::npos);

  std::ostringstream out, err;
  EXPECT_EQ(cli::run({"frobnicate"}, out, err), 2);
  EXPECT_EQ(cli::run({}, out, err), 2);
  EXPECT_EQ(cli::run({"--help"}, out, err), 0);
  EXPECT_EQ(cli::run({"generate", "--config", "/nonexistent.conf"}, out, err), 2);
}

TEST_F(CliRun, CorruptInputsAreDataErrors) {
  ASSERT_EQ(run({"generate"}), 0);
  ASSERT_EQ(run({"train"}), 0);
  auto bytes = io::read_file(work() / "models/target.g0.mrse");
  bytes[bytes.size() / 2] ^= 0x20;
  io::write_file(work() / "models/target.g0.mrse", bytes);
  EXPECT_EQ(run({"embed"}), 3);
  EXPECT_NE(err_.str().find("checksum"), std::string::npos);
}

TEST(LogLevel, FromEnvironment) {
  setenv("MRIS_LOG_LEVEL", "debug", 1);
  EXPECT_EQ(cli::log_level_from_env(), cli::LogLevel::debug);
  setenv("MRIS_LOG_LEVEL", "quiet", 1);
  EXPECT_EQ(cli::log_level_from_env(), cli::LogLevel::quiet);
  unsetenv("MRIS_LOG_LEVEL");
  EXPECT_EQ(cli::log_level_from_env(), cli::LogLevel::info);
}
