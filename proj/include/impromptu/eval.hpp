#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "impromptu/datasets.hpp"
#include "impromptu/index.hpp"

namespace impromptu::eval {

/// n_imp_k / n_res_k * 1000, or 0 when nothing is flagged.
double precision_at_k(std::int64_t n_imp_k, std::int64_t n_res_k);

/// n_imp_k / n_imp_total; throws InvariantError when n_imp_total is 0.
double recall_at_k(std::int64_t n_imp_k, std::int64_t n_imp_total);

struct RankedTerm {
  std::string term;
  double score = 0.0;
  std::int64_t n_occ = 0;
};

struct Quartiles {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

/// Linear-interpolation quartiles (position (n-1)p in the sorted sample).
Quartiles rank_summary(std::vector<double> values);

struct KResult {
  std::size_t k = 0;
  /// Ranking length was below k; every candidate was flagged.
  bool saturated = false;
  std::vector<std::string> selected;
  std::int64_t n_res = 0;
  std::int64_t n_imp = 0;
  double precision_permille = 0.0;
  double recall = 0.0;
};

struct DetectionReport {
  std::vector<KResult> per_k;
  std::int64_t n_imp_total = 0;
  std::vector<std::int64_t> gold_ranks;
  Quartiles rank_quartiles;

  nlohmann::json to_json() const;
  /// One row per k: k, precision_permille, recall, n_res, n_imp.
  void write_csv(std::ostream& out) const;
};

/// 1-based rank of every gold term in `ranking`; absent terms get |ranking| + 1.
std::vector<std::int64_t> rank_positions(const std::vector<RankedTerm>& ranking,
                                         const datasets::GoldLabels& gold);

/// Flags the global top-k terms; every corpus occurrence of a flagged term
/// counts toward n_res and those at gold sites toward n_imp.
DetectionReport evaluate_detections(const std::vector<RankedTerm>& ranking,
                                    const datasets::GoldLabels& gold,
                                    const index::InvertedIndex& index,
                                    const std::vector<std::size_t>& k_list);

/// Predicts positive when a score is strictly above the median of all
/// scores and returns the fraction of correct predictions.
double dev_accuracy(const std::vector<double>& scores, const std::vector<int>& labels);

/// Expected recall of flagging k terms drawn uniformly from `pool`.
double random_baseline_recall(const std::vector<std::string>& pool, const datasets::GoldLabels& gold,
                              const index::InvertedIndex& index, std::size_t k);

void write_ranking_jsonl(std::ostream& out, const std::vector<RankedTerm>& ranking);
std::vector<RankedTerm> read_ranking_jsonl(std::istream& in);

}  // namespace impromptu::eval
