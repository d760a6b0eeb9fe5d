#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include "impromptu/pipeline.hpp"

using namespace impromptu;
using namespace impromptu::pipeline;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / (name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct RunResult {
  int code = -1;
  std::string err;
};

RunResult run_cli(const std::string& args, const fs::path& dir) {
  const auto err_path = dir / "stderr.txt";
  const std::string cmd = std::string(IMPROMPTU_BIN) + " " + args + " > /dev/null 2> " + err_path.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_path);
  std::stringstream ss;
  ss << in.rdbuf();
  r.err = ss.str();
  return r;
}

// last stderr line is the JSON error record
json error_record(const std::string& err) {
  std::istringstream in(err);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '{') last = line;
  }
  return json::parse(last);
}

json tiny_config(const fs::path& workdir) {
  return {
      {"workdir", workdir.string()},
      {"seed", 3},
      {"k", {5, 10}},
      {"synth",
       {{"enabled", true},
        {"n_sentences", 3000},
        {"seeds", {"cocaine", "heroin", "ketamine"}},
        {"planted_per_seed", 1},
        {"occurrences_per_term", 5}}},
      {"phrases", {{"threshold", 100.0}, {"min_count", 3}}},
      {"embed", {{"dim", 16}, {"epochs", 2}, {"workers", 1}}},
      {"coarse",
       {{"top_n", 2},
        {"model", {{"n_layers", 1}, {"n_heads", 2}, {"d_model", 16}, {"d_ff", 32}}},
        {"epochs", 1},
        {"batch_size", 32}}},
      {"fine",
       {{"top_n", 20},
        {"model", {{"n_layers", 1}, {"n_heads", 2}, {"d_model", 16}, {"d_ff", 32}}},
        {"epochs", 1},
        {"batch_size", 16},
        {"rounds", 1}}},
      {"devset", {{"per_seed_sentences", 3}}},
  };
}

}  // namespace

TEST(Config, ShippedConfigRoundTrips) {
  const auto c = PipelineConfig::load(fs::path(IMPROMPTU_SOURCE_DIR) / "configs/synthetic.json");
  EXPECT_TRUE(c.synth.enabled);
  EXPECT_EQ(c.k_list, (std::vector<std::size_t>{5, 10, 20, 50}));
  const auto j = c.to_json();
  EXPECT_EQ(PipelineConfig::from_json(j).to_json(), j);
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  try {
    PipelineConfig::from_json({{"workdir", "w"}, {"colour", 1}});
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("$.colour"), std::string::npos);
  }
  try {
    PipelineConfig::from_json({{"fine", {{"model", {{"layers", 2}}}}}});
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("$.fine.model.layers"), std::string::npos);
  }
  EXPECT_THROW(PipelineConfig::from_json({{"seed", "forty-two"}}), InputError);
  EXPECT_THROW(PipelineConfig::load("/nonexistent/config.json"), InputError);
}

TEST(Config, DefaultPaths) {
  PipelineConfig c;
  c.workdir = "/w";
  EXPECT_EQ(c.seeds_path(), fs::path("/w/seeds.txt"));
  EXPECT_EQ(c.gold_path(), fs::path("/w/gold.jsonl"));
  c.seeds = "/s.txt";
  EXPECT_EQ(c.seeds_path(), fs::path("/s.txt"));
}

TEST(StageSeed, DeterministicAndDistinct) {
  std::set<std::uint64_t> seen;
  for (const auto& s : stage_names()) {
    EXPECT_EQ(stage_seed(42, s), stage_seed(42, s));
    seen.insert(stage_seed(42, s));
  }
  EXPECT_EQ(seen.size(), stage_names().size());
  EXPECT_NE(stage_seed(42, "embed"), stage_seed(43, "embed"));
}

TEST(WriteFileAtomic, ReplacesContent) {
  TempDir d("atomic");
  const auto p = d.path / "sub" / "f.txt";
  write_file_atomic(p, "one");
  write_file_atomic(p, "two");
  std::ifstream in(p);
  std::string s;
  std::getline(in, s);
  EXPECT_EQ(s, "two");
  EXPECT_EQ(std::distance(fs::directory_iterator(d.path / "sub"), fs::directory_iterator()), 1);
}

TEST(Cli, UsageErrorsExitTwo) {
  TempDir d("cli_usage");
  EXPECT_EQ(run_cli("bogus", d.path).code, 2);
  EXPECT_EQ(error_record(run_cli("bogus", d.path).err)["message"], "unknown subcommand 'bogus'");
  EXPECT_EQ(run_cli("", d.path).code, 2);
  EXPECT_EQ(run_cli("embed extra", d.path).code, 2);
  EXPECT_EQ(run_cli("embed --k x", d.path).code, 2);
  EXPECT_EQ(run_cli("embed --provider carrier-pigeon", d.path).code, 2);
  EXPECT_EQ(run_cli("--help", d.path).code, 0);
}

TEST(Cli, MissingArtifactNamesProducer) {
  TempDir d("cli_missing");
  const auto r = run_cli("evaluate --workdir " + d.path.string(), d.path);
  EXPECT_EQ(r.code, 2);
  const auto rec = error_record(r.err);
  EXPECT_EQ(rec["error"], "input");
  EXPECT_EQ(rec["exit_code"], 2);
  const auto msg = rec["message"].get<std::string>();
  EXPECT_NE(msg.find("ranking.jsonl"), std::string::npos);
  EXPECT_NE(msg.find("score"), std::string::npos);
}

TEST(Cli, IngestEmbedIndexOnTextCorpus) {
  TempDir d("cli_text");
  {
    std::ofstream corpus(d.path / "corpus.txt");
    for (int i = 0; i < 60; ++i) corpus << "we bought some snow from the dealer " << i % 7 << "\n";
    std::ofstream seeds(d.path / "seeds.txt");
    seeds << "snow\n";
    std::ofstream cfg(d.path / "cfg.json");
    cfg << json{{"phrases", {{"min_count", 1}}}, {"embed", {{"dim", 8}, {"epochs", 1}}}}.dump();
  }
  const auto common = "--config " + (d.path / "cfg.json").string() + " --workdir " + (d.path / "w").string() +
                      " --corpus " + (d.path / "corpus.txt").string() + " --seeds " +
                      (d.path / "seeds.txt").string();
  for (const auto* stage : {"ingest", "embed", "index"}) {
    const auto r = run_cli(std::string(stage) + " " + common, d.path);
    EXPECT_EQ(r.code, 0) << stage << ": " << r.err;
  }
  for (const auto* f : {"corpus.jsonl", "vocab.jsonl", "embeddings.txt", "index.jsonl"}) {
    EXPECT_TRUE(fs::exists(d.path / "w" / f)) << f;
  }
}

TEST(Pipeline, ResumableSkipForceAndStaleness) {
  TempDir d("pipeline");
  const auto c = PipelineConfig::from_json(tiny_config(d.path / "w"));
  const auto first = run_pipeline(c, false);
  ASSERT_EQ(first.size(), stage_names().size() - 1);
  for (const auto& r : first) EXPECT_FALSE(r.skipped) << r.stage;
  const auto report = d.path / "w" / "report.json";
  ASSERT_TRUE(fs::exists(report));
  const auto stamp = fs::last_write_time(report);
  std::ifstream rin(report);
  const auto report_json = json::parse(rin);

  const auto second = run_pipeline(c, false);
  for (const auto& r : second) EXPECT_TRUE(r.skipped) << r.stage;
  EXPECT_EQ(fs::last_write_time(report), stamp);

  // forcing one stage rewrites its outputs only
  const auto forced = run_stage("evaluate", c, true);
  EXPECT_FALSE(forced.skipped);
  std::ifstream again(report);
  EXPECT_EQ(json::parse(again)["results"], report_json["results"]);

  // a newer upstream artifact makes downstream stages rerun
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  fs::last_write_time(d.path / "w" / "ranking.jsonl", fs::file_time_type::clock::now());
  EXPECT_TRUE(run_stage("score", c, false).skipped);
  EXPECT_FALSE(run_stage("evaluate", c, false).skipped);
  EXPECT_TRUE(run_stage("evaluate", c, false).skipped);
}
