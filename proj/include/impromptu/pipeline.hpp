#pragma once

// Stage graph over a work directory. Every stage reads and writes files there
// and is skipped when its outputs already exist, unless forced.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "impromptu/coarse.hpp"
#include "impromptu/datasets.hpp"
#include "impromptu/embed.hpp"
#include "impromptu/fine.hpp"
#include "impromptu/llmgen.hpp"
#include "impromptu/lm.hpp"

namespace impromptu::pipeline {

namespace fs = std::filesystem;

struct SynthConfig {
  bool enabled = false;
  datasets::SynthOptions base;
  int planted_per_seed = 2;
  int occurrences_per_term = 5;
};

struct PipelineConfig {
  fs::path corpus;     // raw text (one sentence per line) or corpus JSON-lines
  fs::path seeds;      // defaults to <workdir>/seeds.txt
  fs::path lexicon;    // optional; restricts fine candidates when given
  fs::path gold;       // defaults to <workdir>/gold.jsonl
  fs::path workdir = "work";
  corpus::Split corpus_split = corpus::Split::target;

  SynthConfig synth;

  double phrase_delta = 5.0;
  double phrase_threshold = 10.0;
  std::int64_t min_count = 5;

  embed::TrainOptions embed;

  std::size_t coarse_top_n = 100;
  lm::ModelConfig coarse_model;
  coarse::TrainOptions coarse_train;
  double filter_threshold = 0.5;

  std::size_t fine_top_n = 1000;
  lm::ModelConfig fine_model;
  fine::TrainOptions fine_train;
  int rounds = 1;
  double keep_fraction = 0.5;

  std::string provider = "template";  // template | file | external
  fs::path provider_file;
  llmgen::DevSetOptions devset;

  std::vector<std::size_t> k_list{5, 10, 20, 50, 100};
  std::uint64_t seed = 42;
  int threads = 0;  // 0 keeps the OpenMP default

  /// Unknown keys are rejected.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const fs::path& path);
  nlohmann::json to_json() const;

  fs::path seeds_path() const;
  fs::path gold_path() const;
  fs::path artifact(const std::string& name) const { return workdir / name; }
};

/// Subcommands in pipeline order ("synth" replaces "ingest" when enabled).
const std::vector<std::string>& stage_names();

struct StageResult {
  std::string stage;
  bool skipped = false;
  std::vector<fs::path> outputs;
};

StageResult run_stage(const std::string& stage, const PipelineConfig& config, bool force);

/// Runs every stage in order; returns one result per stage.
std::vector<StageResult> run_pipeline(const PipelineConfig& config, bool force);

// Artifact helpers shared by the stages, the CLI and the tests.

std::vector<std::string> read_term_list(const fs::path& path);
void write_term_list(const fs::path& path, const std::vector<std::string>& terms);

struct LoadedCorpus {
  corpus::Corpus corpus;
  std::size_t max_sentence_len = 0;
};
LoadedCorpus load_corpus(const PipelineConfig& config);

/// ModelConfig for this corpus: vocab_size set, max_len raised to fit the longest sentence.
lm::ModelConfig sized_config(lm::ModelConfig config, const LoadedCorpus& corpus);

/// Dev samples as model inputs; sentences longer than max_len are dropped.
std::vector<fine::DevItem> dev_items(const std::vector<llmgen::DevSample>& samples,
                                     const corpus::Vocabulary& vocab, int max_len);

/// Seeds of the stage-local generators, derived from the master seed.
std::uint64_t stage_seed(std::uint64_t master, const std::string& stage);

/// Writes `text` to `path` through a temporary file and rename.
void write_file_atomic(const fs::path& path, const std::string& text);

}  // namespace impromptu::pipeline
