#include "impromptu/coarse.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "impromptu/kernels.hpp"

namespace impromptu::coarse {

using nlohmann::json;
using datasets::MaskedSample;

void CoarseModel::save(const std::filesystem::path& path) const {
  json hist = json::array();
  for (const auto& e : history) {
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_loss", e.dev_loss},
                    {"dev_accuracy", e.dev_accuracy}});
  }
  lm::save_checkpoint(params, path,
                      {{"kind", "coarse"},
                       {"best_dev_loss", best_dev_loss},
                       {"best_epoch", best_epoch},
                       {"threshold", threshold},
                       {"history", hist}});
}

CoarseModel CoarseModel::load(const std::filesystem::path& path) {
  auto ck = lm::load_checkpoint(path);
  if (ck.meta.value("kind", std::string()) != "coarse") {
    throw InputError("checkpoint " + path.string() + " is not a coarse model");
  }
  CoarseModel m{std::move(ck.params), ck.meta.at("best_dev_loss").get<double>(),
                ck.meta.value("best_epoch", 0), ck.meta.value("threshold", 0.5), {}};
  for (const auto& e : ck.meta.value("history", json::array())) {
    m.history.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                         e.at("dev_loss").get<double>(), e.at("dev_accuracy").get<double>()});
  }
  return m;
}

std::pair<double, double> evaluate_coarse(const lm::ModelParams<float>& params,
                                          const std::vector<MaskedSample>& samples) {
  if (samples.empty()) throw InvariantError("evaluate_coarse: empty set");
  std::vector<double> p1(samples.size());
  kernels::parallel_for(samples.size(), [&](std::size_t i) {
    p1[i] = lm::coarse_probability(params, std::span<const corpus::TermId>(samples[i].tokens));
  });
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int y = samples[i].label.value_or(-1);
    if (y != 0 && y != 1) throw InvariantError("evaluate_coarse: unlabeled sample");
    loss -= std::log(y == 1 ? p1[i] : 1.0 - p1[i]);
    correct += ((p1[i] >= 0.5) == (y == 1)) ? 1 : 0;
  }
  return {loss / static_cast<double>(samples.size()),
          static_cast<double>(correct) / static_cast<double>(samples.size())};
}

CoarseModel train_coarse(const std::vector<MaskedSample>& train, const std::vector<MaskedSample>& dev,
                         const lm::ModelConfig& config, const TrainOptions& o) {
  if (train.empty() || dev.empty()) throw InputError("train_coarse: train and dev sets must be non-empty");
  if (o.epochs < 1 || o.batch_size < 1 || o.patience < 0) throw InputError("train_coarse: bad schedule");
  {
    std::set<std::pair<corpus::SentenceId, std::vector<std::int32_t>>> seen;
    for (const auto& s : train) seen.emplace(s.sid, s.mask_positions);
    for (const auto& s : dev) {
      if (seen.count({s.sid, s.mask_positions})) throw InputError("train_coarse: train and dev overlap");
    }
  }
  Rng rng(o.seed);
  auto params = lm::ModelParams<float>::init(config, rng.next_u64());
  CoarseModel best{params, INFINITY, 0, 0.5, {}};
  lm::AdamState state;
  const lm::AdamOptions adam{o.lr};
  std::vector<std::size_t> order(train.size());
  int stale = 0;
  for (int epoch = 1; epoch <= o.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += o.batch_size) {
      lm::Batch b;
      b.kind = lm::LossKind::coarse;
      for (std::size_t i = start; i < std::min(order.size(), start + o.batch_size); ++i) {
        b.coarse.push_back(&train[order[i]]);
      }
      b.dropout_seed = rng.next_u64();
      try {
        sum += lm::backward_step(params, b, state, adam, o.parallel);
      } catch (const InvariantError& e) {
        throw lm::TrainingDiverged(std::string("coarse training diverged: ") + e.what(), best.params);
      }
      ++steps;
    }
    const auto [dev_loss, dev_acc] = evaluate_coarse(params, dev);
    best.history.push_back({epoch, sum / static_cast<double>(steps), dev_loss, dev_acc});
    spdlog::info("coarse epoch {} train_loss {:.4f} dev_loss {:.4f} dev_acc {:.3f}", epoch,
                 sum / static_cast<double>(steps), dev_loss, dev_acc);
    if (dev_loss < best.best_dev_loss) {
      best.params = params;
      best.best_dev_loss = dev_loss;
      best.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
    if (stale >= o.patience) break;
  }
  return best;
}

std::vector<double> score_occurrences(const lm::ModelParams<float>& params, const corpus::Corpus& c,
                                      const std::vector<index::Posting>& sites) {
  const auto mask = c.vocab->specials().mask;
  std::vector<double> out(sites.size());
  kernels::parallel_for(sites.size(), [&](std::size_t i) {
    const auto* s = c.find(sites[i].sid);
    if (!s) throw InvariantError("occurrence refers to unknown sentence");
    auto tokens = s->tokens;
    tokens.at(static_cast<std::size_t>(sites[i].pos)) = mask;
    out[i] = lm::coarse_probability(params, std::span<const corpus::TermId>(tokens));
  });
  return out;
}

FilterResult filter_candidates(const CoarseModel& model, const corpus::Corpus& c,
                               const std::set<std::string>& candidate_terms,
                               const index::InvertedIndex& idx, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InputError("filter threshold must lie in (0,1)");
  std::vector<std::pair<index::Posting, std::string>> sites;
  for (const auto& t : candidate_terms) {
    for (const auto& p : idx.postings(t)) sites.emplace_back(p, t);
  }
  std::sort(sites.begin(), sites.end());
  std::vector<index::Posting> positions;
  positions.reserve(sites.size());
  for (const auto& s : sites) positions.push_back(s.first);
  const auto probs = score_occurrences(model.params, c, positions);

  FilterResult r;
  for (const auto& t : candidate_terms) r.keep_counts[t] = 0;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    Occurrence o{sites[i].second, sites[i].first.sid, sites[i].first.pos, probs[i]};
    r.scored.push_back(o);
    if (probs[i] >= threshold) {
      ++r.keep_counts[o.term];
      r.kept.push_back(std::move(o));
    }
  }
  return r;
}

void write_refined_jsonl(std::ostream& out, const std::vector<Occurrence>& occ) {
  for (const auto& o : occ) {
    out << json{{"term", o.term}, {"sid", o.sid}, {"pos", o.pos}, {"p", o.p}}.dump() << '\n';
  }
}

std::vector<Occurrence> read_refined_jsonl(std::istream& in) {
  std::vector<Occurrence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = json::parse(line);
    out.push_back({row.at("term").get<std::string>(), row.at("sid").get<corpus::SentenceId>(),
                   row.at("pos").get<std::int32_t>(), row.value("p", 1.0)});
  }
  return out;
}

}  // namespace impromptu::coarse
