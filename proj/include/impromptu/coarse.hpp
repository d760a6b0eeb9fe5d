#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "impromptu/datasets.hpp"
#include "impromptu/index.hpp"
#include "impromptu/lm.hpp"

namespace impromptu::coarse {

struct TrainOptions {
  int epochs = 10;
  int patience = 2;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  std::uint64_t seed = 42;
  bool parallel = true;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double dev_loss = 0;
  double dev_accuracy = 0;
};

struct CoarseModel {
  lm::ModelParams<float> params;
  double best_dev_loss = 0;
  int best_epoch = 0;
  double threshold = 0.5;
  std::vector<EpochLog> history;

  void save(const std::filesystem::path& path) const;
  static CoarseModel load(const std::filesystem::path& path);
};

/// Adam on loss_coarse; keeps the lowest-dev-loss epoch. Training stops once
/// `patience` consecutive epochs fail to improve it (patience 0 = one epoch).
/// Throws lm::TrainingDiverged on a non-finite loss.
CoarseModel train_coarse(const std::vector<datasets::MaskedSample>& train,
                         const std::vector<datasets::MaskedSample>& dev, const lm::ModelConfig& config,
                         const TrainOptions& options);

/// Mean coarse loss and 0.5-threshold accuracy in eval mode.
std::pair<double, double> evaluate_coarse(const lm::ModelParams<float>& params,
                                          const std::vector<datasets::MaskedSample>& samples);

struct Occurrence {
  std::string term;
  corpus::SentenceId sid = 0;
  std::int32_t pos = 0;
  double p = 0;
  auto operator<=>(const Occurrence&) const = default;
};

struct FilterResult {
  std::vector<Occurrence> kept;
  std::vector<Occurrence> scored;
  std::map<std::string, std::size_t> keep_counts;
};

/// p(euphemism) for each (sid, pos) with that token masked; parallel over occurrences.
std::vector<double> score_occurrences(const lm::ModelParams<float>& params, const corpus::Corpus& corpus,
                                      const std::vector<index::Posting>& sites);

/// Scores every occurrence of every candidate term and keeps those with
/// p >= threshold. Occurrences are ordered by (sid, pos).
FilterResult filter_candidates(const CoarseModel& model, const corpus::Corpus& corpus,
                               const std::set<std::string>& candidate_terms,
                               const index::InvertedIndex& index, double threshold);

void write_refined_jsonl(std::ostream& out, const std::vector<Occurrence>& occurrences);
std::vector<Occurrence> read_refined_jsonl(std::istream& in);

}  // namespace impromptu::coarse
