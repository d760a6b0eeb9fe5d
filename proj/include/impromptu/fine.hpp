#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "impromptu/coarse.hpp"
#include "impromptu/datasets.hpp"
#include "impromptu/eval.hpp"
#include "impromptu/lm.hpp"

namespace impromptu::fine {

using coarse::Occurrence;

/// Re-masks the restored sentence at floor(rate * len) uniformly chosen
/// positions (at least one), always including the sample's MLM target.
/// Throws InputError for sentences shorter than 2 or a rate outside (0,1].
datasets::MaskedSample mask_for_cam(const datasets::MaskedSample& sample, double rate, Rng& rng);

/// A dev sentence with its marked span masked.
struct DevItem {
  std::vector<corpus::TermId> tokens;
  std::vector<std::int32_t> positions;
  int label = 0;
};

/// Seed log-mass of each dev item (eval mode), parallel over items.
std::vector<double> dev_scores(const lm::ModelParams<float>& params, const std::vector<DevItem>& dev,
                               const std::vector<corpus::TermId>& seeds);

struct TrainOptions {
  int epochs = 5;
  int patience = 2;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double cam_rate = 0.5;
  /// 0 disables the augmentation branch.
  double cam_weight = 1.0;
  std::uint64_t seed = 42;
  bool parallel = true;
  /// Called after every epoch with the current parameters.
  std::function<void(int, const lm::ModelParams<float>&)> on_epoch;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  std::optional<double> dev_accuracy;
};

struct FineModel {
  lm::ModelParams<float> params;
  int best_epoch = 0;
  std::optional<double> best_dev_accuracy;
  std::vector<EpochLog> history;

  void save(const std::filesystem::path& path) const;
  static FineModel load(const std::filesystem::path& path);
};

/// Trains MLM + cam_weight * CAM on the samples (one MLM target each). With a
/// dev set the epoch with the best dev accuracy is kept (a later tie replaces
/// it without resetting patience); without one the last epoch is kept.
FineModel train_fine(const std::vector<datasets::MaskedSample>& samples, const lm::ModelConfig& config,
                     const std::vector<DevItem>& dev, const std::vector<corpus::TermId>& seeds,
                     const TrainOptions& options);

/// Seed log-mass at each occurrence with that token masked; parallel over occurrences.
std::vector<double> occurrence_scores(const lm::ModelParams<float>& params, const corpus::Corpus& corpus,
                                      const std::vector<Occurrence>& occurrences,
                                      const std::vector<corpus::TermId>& seeds);

struct CandidateScore {
  std::string term;
  std::vector<double> occurrence_scores;  // in (sid, pos) order
  double score = 0;                       // mean of occurrence_scores
  std::size_t n_occ() const { return occurrence_scores.size(); }
};

/// Per-term mean seed log-mass, sorted by score descending then term ascending.
std::vector<CandidateScore> score_candidates(const lm::ModelParams<float>& params,
                                             const corpus::Corpus& corpus,
                                             std::vector<Occurrence> occurrences,
                                             const std::vector<corpus::TermId>& seeds);

/// Drops `exclude` terms and converts to the ranking file form.
std::vector<eval::RankedTerm> to_ranking(const std::vector<CandidateScore>& scores,
                                         const std::set<std::string>& exclude);

struct RoundState {
  int round = 0;
  std::vector<Occurrence> occurrences;
  std::size_t n_discarded = 0;
  std::string checkpoint;
  std::optional<double> dev_accuracy;
  std::optional<double> planted_fraction;
  std::optional<double> discarded_planted_fraction;
  /// Fraction of occurrences that are neither seeds nor planted terms.
  std::optional<double> noise_estimate;
};

struct IterateOptions {
  int rounds = 1;
  double keep_fraction = 0.5;
  TrainOptions train;
  /// Where per-round checkpoints go; empty to skip writing them.
  std::filesystem::path checkpoint_dir;
  /// Used as the round-0 model instead of training one.
  const FineModel* round0_model = nullptr;
};

struct IterationResult {
  FineModel model;
  int selected_round = 0;
  std::vector<RoundState> history;
  /// Set when the kept set fell below the batch size.
  std::optional<std::string> stopped_early;

  nlohmann::json history_json() const;
};

/// Round 0 trains on all occurrences. Each later round keeps the top
/// ceil(keep_fraction * n) occurrences of the previous set by the current
/// model's score (ties by sentence id, position) and retrains from scratch.
/// The returned model is the round with the best dev accuracy (a tie goes to
/// the later round), or the last round when there is no dev set.
IterationResult iterate_training(const corpus::Corpus& corpus, std::vector<Occurrence> initial,
                                 const lm::ModelConfig& config, const std::vector<DevItem>& dev,
                                 const std::vector<std::string>& seeds, const IterateOptions& options,
                                 const datasets::GoldLabels* gold = nullptr);

/// One masked sample per occurrence, in the given order.
std::vector<datasets::MaskedSample> occurrence_samples(const corpus::Corpus& corpus,
                                                       const std::vector<Occurrence>& occurrences);

}  // namespace impromptu::fine
