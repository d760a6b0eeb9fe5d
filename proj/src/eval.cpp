#include "impromptu/eval.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <unordered_map>

#include <fmt/format.h>

#include "impromptu/common.hpp"

namespace impromptu::eval {

using nlohmann::json;

double precision_at_k(std::int64_t n_imp_k, std::int64_t n_res_k) {
  if (n_res_k < 0 || n_imp_k < 0) throw InvariantError("precision_at_k: negative count");
  if (n_imp_k > n_res_k) throw InvariantError("precision_at_k: n_imp exceeds n_res");
  if (n_res_k == 0) return 0.0;
  return static_cast<double>(n_imp_k) / static_cast<double>(n_res_k) * 1000.0;
}

double recall_at_k(std::int64_t n_imp_k, std::int64_t n_imp_total) {
  if (n_imp_total <= 0) throw InvariantError("recall_at_k: no gold tokens");
  if (n_imp_k < 0 || n_imp_k > n_imp_total) throw InvariantError("recall_at_k: n_imp out of range");
  return static_cast<double>(n_imp_k) / static_cast<double>(n_imp_total);
}

Quartiles rank_summary(std::vector<double> v) {
  if (v.empty()) throw InvariantError("rank_summary: empty sample");
  std::sort(v.begin(), v.end());
  auto at = [&](double p) {
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {v.front(), at(0.25), at(0.5), at(0.75), v.back()};
}

std::vector<std::int64_t> rank_positions(const std::vector<RankedTerm>& ranking,
                                         const datasets::GoldLabels& gold) {
  std::unordered_map<std::string, std::int64_t> pos;
  for (std::size_t i = 0; i < ranking.size(); ++i) pos.emplace(ranking[i].term, static_cast<std::int64_t>(i) + 1);
  const auto absent = static_cast<std::int64_t>(ranking.size()) + 1;
  std::vector<std::int64_t> out;
  for (const auto& t : gold.terms) {
    auto it = pos.find(t.term);
    out.push_back(it == pos.end() ? absent : it->second);
  }
  return out;
}

namespace {

std::int64_t gold_hits(const std::vector<index::Posting>& postings, const datasets::GoldLabels& gold) {
  std::int64_t n = 0;
  for (const auto& p : postings) n += gold.is_site(p.sid, p.pos) ? 1 : 0;
  return n;
}

}  // namespace

DetectionReport evaluate_detections(const std::vector<RankedTerm>& ranking,
                                    const datasets::GoldLabels& gold,
                                    const index::InvertedIndex& idx,
                                    const std::vector<std::size_t>& k_list) {
  DetectionReport r;
  r.n_imp_total = static_cast<std::int64_t>(gold.total_sites());
  for (auto k : k_list) {
    if (k == 0) throw InputError("k values must be positive");
    KResult kr;
    kr.k = k;
    kr.saturated = k > ranking.size();
    const std::size_t take = std::min(k, ranking.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto& postings = idx.postings(ranking[i].term);
      kr.selected.push_back(ranking[i].term);
      kr.n_res += static_cast<std::int64_t>(postings.size());
      kr.n_imp += gold_hits(postings, gold);
    }
    kr.precision_permille = precision_at_k(kr.n_imp, kr.n_res);
    kr.recall = recall_at_k(kr.n_imp, r.n_imp_total);
    r.per_k.push_back(std::move(kr));
  }
  r.gold_ranks = rank_positions(ranking, gold);
  if (!r.gold_ranks.empty()) {
    r.rank_quartiles = rank_summary(std::vector<double>(r.gold_ranks.begin(), r.gold_ranks.end()));
  }
  return r;
}

json DetectionReport::to_json() const {
  json ks = json::array();
  for (const auto& k : per_k) {
    ks.push_back({{"k", k.k},
                  {"precision_permille", k.precision_permille},
                  {"recall", k.recall},
                  {"n_res", k.n_res},
                  {"n_imp", k.n_imp},
                  {"saturated", k.saturated},
                  {"selected", k.selected}});
  }
  const auto& q = rank_quartiles;
  return {{"results", ks},
          {"n_imp_total", n_imp_total},
          {"gold_ranks", gold_ranks},
          {"rank_quartiles", {{"min", q.min}, {"q1", q.q1}, {"median", q.median}, {"q3", q.q3}, {"max", q.max}}}};
}

void DetectionReport::write_csv(std::ostream& out) const {
  out << "k,precision_permille,recall,n_res,n_imp\n";
  for (const auto& k : per_k) {
    out << fmt::format("{},{:.4f},{:.4f},{},{}\n", k.k, k.precision_permille, k.recall, k.n_res, k.n_imp);
  }
}

double dev_accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty() || scores.size() != labels.size()) {
    throw InvariantError("dev_accuracy: needs equal, non-empty scores and labels");
  }
  const double median = rank_summary(scores).median;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] > median ? 1 : 0;
    correct += pred == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double random_baseline_recall(const std::vector<std::string>& pool, const datasets::GoldLabels& gold,
                              const index::InvertedIndex& idx, std::size_t k) {
  if (pool.empty()) return 0.0;
  const auto total = static_cast<std::int64_t>(gold.total_sites());
  std::int64_t in_pool = 0;
  for (const auto& t : pool) in_pool += gold_hits(idx.postings(t), gold);
  // each pool term is selected with probability min(k, |pool|) / |pool|
  const double p = static_cast<double>(std::min(k, pool.size())) / static_cast<double>(pool.size());
  return p * static_cast<double>(in_pool) / static_cast<double>(total);
}

void write_ranking_jsonl(std::ostream& out, const std::vector<RankedTerm>& ranking) {
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    const auto& r = ranking[i];
    out << json{{"term", r.term}, {"score", r.score}, {"n_occ", r.n_occ}, {"rank", i + 1}}.dump() << '\n';
  }
}

std::vector<RankedTerm> read_ranking_jsonl(std::istream& in) {
  std::vector<RankedTerm> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = json::parse(line);
    const auto rank = row.at("rank").get<std::size_t>();
    if (rank != out.size() + 1) throw InputError("ranking file: ranks must be 1, 2, 3, ...");
    out.push_back({row.at("term").get<std::string>(), row.at("score").get<double>(),
                   row.at("n_occ").get<std::int64_t>()});
  }
  return out;
}

}  // namespace impromptu::eval
