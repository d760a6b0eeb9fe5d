#include "impromptu/fine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "impromptu/kernels.hpp"

namespace impromptu::fine {

using nlohmann::json;
using datasets::MaskedSample;
using corpus::TermId;

MaskedSample mask_for_cam(const MaskedSample& sample, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw InputError("CAM mask rate must lie in (0,1]");
  const std::size_t len = sample.tokens.size();
  if (len < 2) throw InputError("CAM masking needs a sentence of at least 2 tokens");
  if (sample.mask_positions.size() != 1) throw InvariantError("CAM masking expects one MLM target");
  const auto target = sample.mask_positions[0];
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rate * static_cast<double>(len))));

  std::vector<std::int32_t> others;
  for (std::size_t i = 0; i < len; ++i) {
    if (static_cast<std::int32_t>(i) != target) others.push_back(static_cast<std::int32_t>(i));
  }
  // partial Fisher-Yates: the first k-1 entries become the sample
  for (std::size_t i = 0; i + 1 < k; ++i) {
    std::swap(others[i], others[i + rng.uniform_index(others.size() - i)]);
  }
  std::vector<std::int32_t> positions(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k - 1));
  positions.push_back(target);
  std::sort(positions.begin(), positions.end());

  const auto original = sample.restored();
  const auto mask = sample.tokens[static_cast<std::size_t>(target)];
  MaskedSample out;
  out.sid = sample.sid;
  out.tokens = original;
  out.label = sample.label;
  for (auto p : positions) {
    out.targets.push_back(original[static_cast<std::size_t>(p)]);
    out.tokens[static_cast<std::size_t>(p)] = mask;
  }
  out.mask_positions = std::move(positions);
  return out;
}

std::vector<double> dev_scores(const lm::ModelParams<float>& params, const std::vector<DevItem>& dev,
                               const std::vector<TermId>& seeds) {
  std::vector<double> out(dev.size());
  kernels::parallel_for(dev.size(), [&](std::size_t i) {
    out[i] = lm::seed_log_mass(params, std::span<const TermId>(dev[i].tokens),
                               std::span<const std::int32_t>(dev[i].positions), std::span<const TermId>(seeds));
  });
  return out;
}

void FineModel::save(const std::filesystem::path& path) const {
  json hist = json::array();
  for (const auto& e : history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"dev_accuracy", e.dev_accuracy ? json(*e.dev_accuracy) : json(nullptr)}});
  }
  lm::save_checkpoint(params, path,
                      {{"kind", "fine"},
                       {"best_epoch", best_epoch},
                       {"best_dev_accuracy", best_dev_accuracy ? json(*best_dev_accuracy) : json(nullptr)},
                       {"history", hist}});
}

FineModel FineModel::load(const std::filesystem::path& path) {
  auto ck = lm::load_checkpoint(path);
  if (ck.meta.value("kind", std::string()) != "fine") {
    throw InputError("checkpoint " + path.string() + " is not a fine model");
  }
  FineModel m{std::move(ck.params), ck.meta.value("best_epoch", 0), std::nullopt, {}};
  if (ck.meta.contains("best_dev_accuracy") && !ck.meta["best_dev_accuracy"].is_null()) {
    m.best_dev_accuracy = ck.meta["best_dev_accuracy"].get<double>();
  }
  for (const auto& e : ck.meta.value("history", json::array())) {
    EpochLog l{e.at("epoch").get<int>(), e.at("train_loss").get<double>(), std::nullopt};
    if (!e.at("dev_accuracy").is_null()) l.dev_accuracy = e.at("dev_accuracy").get<double>();
    m.history.push_back(l);
  }
  return m;
}

FineModel train_fine(const std::vector<MaskedSample>& samples, const lm::ModelConfig& config,
                     const std::vector<DevItem>& dev, const std::vector<TermId>& seeds,
                     const TrainOptions& o) {
  if (samples.empty()) throw InputError("train_fine: no training samples");
  if (o.epochs < 1 || o.batch_size < 1 || o.patience < 0) throw InputError("train_fine: bad schedule");
  if (!dev.empty() && seeds.empty()) throw InputError("train_fine: dev evaluation needs seeds");
  Rng rng(o.seed);
  auto params = lm::ModelParams<float>::init(config, rng.next_u64());
  FineModel best{params, 0, std::nullopt, {}};
  lm::AdamState state;
  const lm::AdamOptions adam{o.lr};
  std::vector<std::size_t> order(samples.size());
  std::vector<int> labels;
  for (const auto& d : dev) labels.push_back(d.label);
  int stale = 0;
  for (int epoch = 1; epoch <= o.epochs; ++epoch) {
    std::vector<lm::FinePair> pairs;
    pairs.reserve(samples.size());
    for (const auto& s : samples) {
      pairs.push_back({s, o.cam_weight > 0 ? mask_for_cam(s, o.cam_rate, rng) : MaskedSample{}});
    }
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += o.batch_size) {
      lm::Batch b;
      b.kind = lm::LossKind::fine;
      b.cam_weight = o.cam_weight;
      for (std::size_t i = start; i < std::min(order.size(), start + o.batch_size); ++i) {
        b.fine.push_back(&pairs[order[i]]);
      }
      b.dropout_seed = rng.next_u64();
      try {
        sum += lm::backward_step(params, b, state, adam, o.parallel);
      } catch (const InvariantError& e) {
        throw lm::TrainingDiverged(std::string("fine training diverged: ") + e.what(),
                                   epoch == 1 ? params : best.params);
      }
      ++steps;
    }
    EpochLog log{epoch, sum / static_cast<double>(steps), std::nullopt};
    if (!dev.empty()) log.dev_accuracy = eval::dev_accuracy(dev_scores(params, dev, seeds), labels);
    best.history.push_back(log);
    if (o.on_epoch) o.on_epoch(epoch, params);
    spdlog::info("fine epoch {} train_loss {:.4f} dev_acc {}", epoch, log.train_loss,
                 log.dev_accuracy ? fmt::format("{:.3f}", *log.dev_accuracy) : std::string("n/a"));
    if (dev.empty()) {
      best.params = params;
      best.best_epoch = epoch;
      continue;
    }
    const double acc = *log.dev_accuracy;
    if (!best.best_dev_accuracy || acc > *best.best_dev_accuracy) {
      stale = 0;
    } else {
      ++stale;
    }
    if (!best.best_dev_accuracy || acc >= *best.best_dev_accuracy) {
      best.params = params;
      best.best_epoch = epoch;
      best.best_dev_accuracy = acc;
    }
    if (stale >= o.patience) break;
  }
  return best;
}

std::vector<MaskedSample> occurrence_samples(const corpus::Corpus& c,
                                             const std::vector<Occurrence>& occurrences) {
  std::vector<MaskedSample> out;
  out.reserve(occurrences.size());
  const auto mask = c.vocab->specials().mask;
  for (const auto& o : occurrences) {
    const auto* s = c.find(o.sid);
    if (!s) throw InputError("occurrence refers to unknown sentence " + std::to_string(o.sid));
    if (o.pos < 0 || static_cast<std::size_t>(o.pos) >= s->tokens.size() ||
        c.vocab->term(s->tokens[static_cast<std::size_t>(o.pos)]) != o.term) {
      throw InputError("occurrence of '" + o.term + "' does not match sentence " + std::to_string(o.sid));
    }
    out.push_back(datasets::mask_positions(*s, {o.pos}, mask));
  }
  return out;
}

std::vector<double> occurrence_scores(const lm::ModelParams<float>& params, const corpus::Corpus& c,
                                      const std::vector<Occurrence>& occurrences,
                                      const std::vector<TermId>& seeds) {
  const auto samples = occurrence_samples(c, occurrences);
  std::vector<double> out(samples.size());
  kernels::parallel_for(samples.size(), [&](std::size_t i) {
    out[i] = lm::seed_log_mass(params, std::span<const TermId>(samples[i].tokens),
                               std::span<const std::int32_t>(samples[i].mask_positions),
                               std::span<const TermId>(seeds));
  });
  return out;
}

std::vector<CandidateScore> score_candidates(const lm::ModelParams<float>& params, const corpus::Corpus& c,
                                             std::vector<Occurrence> occurrences,
                                             const std::vector<TermId>& seeds) {
  if (seeds.empty()) throw InputError("score_candidates: no seeds");
  // canonical order makes the per-term sums independent of the input order
  std::sort(occurrences.begin(), occurrences.end(), [](const Occurrence& a, const Occurrence& b) {
    return std::tie(a.term, a.sid, a.pos) < std::tie(b.term, b.sid, b.pos);
  });
  occurrences.erase(std::unique(occurrences.begin(), occurrences.end(),
                                [](const Occurrence& a, const Occurrence& b) {
                                  return a.sid == b.sid && a.pos == b.pos;
                                }),
                    occurrences.end());
  const auto scores = occurrence_scores(params, c, occurrences, seeds);
  std::vector<CandidateScore> out;
  for (std::size_t i = 0; i < occurrences.size(); ++i) {
    if (out.empty() || out.back().term != occurrences[i].term) out.push_back({occurrences[i].term, {}, 0});
    out.back().occurrence_scores.push_back(scores[i]);
  }
  for (auto& s : out) {
    double sum = 0;
    for (double x : s.occurrence_scores) sum += x;
    s.score = sum / static_cast<double>(s.occurrence_scores.size());
  }
  std::stable_sort(out.begin(), out.end(), [](const CandidateScore& a, const CandidateScore& b) {
    return a.score != b.score ? a.score > b.score : a.term < b.term;
  });
  return out;
}

std::vector<eval::RankedTerm> to_ranking(const std::vector<CandidateScore>& scores,
                                         const std::set<std::string>& exclude) {
  std::vector<eval::RankedTerm> out;
  for (const auto& s : scores) {
    if (exclude.count(s.term)) continue;
    out.push_back({s.term, s.score, static_cast<std::int64_t>(s.n_occ())});
  }
  return out;
}

namespace {

struct SetAudit {
  std::optional<double> planted;
  std::optional<double> noise;
};

SetAudit audit(const std::vector<Occurrence>& occ, const datasets::GoldLabels* gold,
               const std::set<std::string>& seeds) {
  if (!gold || occ.empty()) return {};
  std::size_t planted = 0, signal = 0;
  for (const auto& o : occ) {
    const bool site = gold->is_site(o.sid, o.pos);
    planted += site ? 1 : 0;
    signal += (site || seeds.count(o.term)) ? 1 : 0;
  }
  const auto n = static_cast<double>(occ.size());
  return {static_cast<double>(planted) / n, 1.0 - static_cast<double>(signal) / n};
}

}  // namespace

IterationResult iterate_training(const corpus::Corpus& c, std::vector<Occurrence> current,
                                 const lm::ModelConfig& config, const std::vector<DevItem>& dev,
                                 const std::vector<std::string>& seed_terms, const IterateOptions& o,
                                 const datasets::GoldLabels* gold) {
  if (o.rounds < 0) throw InputError("rounds must be non-negative");
  if (!(o.keep_fraction > 0.0 && o.keep_fraction <= 1.0)) throw InputError("keep_fraction must lie in (0,1]");
  std::sort(current.begin(), current.end(), [](const Occurrence& a, const Occurrence& b) {
    return std::tie(a.sid, a.pos) < std::tie(b.sid, b.pos);
  });
  std::vector<TermId> seeds;
  for (const auto& s : seed_terms) seeds.push_back(c.vocab->require(s));
  const std::set<std::string> seed_set(seed_terms.begin(), seed_terms.end());

  IterationResult r;
  FineModel model;
  std::vector<Occurrence> discarded;
  for (int round = 0; round <= o.rounds; ++round) {
    if (round > 0) {
      const auto scores = occurrence_scores(model.params, c, current, seeds);
      std::vector<std::size_t> idx(current.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      const auto keep = static_cast<std::size_t>(std::ceil(o.keep_fraction * static_cast<double>(current.size())));
      if (keep < o.train.batch_size) {
        r.stopped_early = "round " + std::to_string(round) + " would keep " + std::to_string(keep) +
                          " occurrences, below the batch size " + std::to_string(o.train.batch_size);
        spdlog::warn("{}", *r.stopped_early);
        break;
      }
      std::vector<Occurrence> kept;
      discarded.clear();
      for (std::size_t i = 0; i < idx.size(); ++i) (i < keep ? kept : discarded).push_back(current[idx[i]]);
      std::sort(kept.begin(), kept.end(), [](const Occurrence& a, const Occurrence& b) {
        return std::tie(a.sid, a.pos) < std::tie(b.sid, b.pos);
      });
      current = std::move(kept);
    }
    spdlog::info("iteration round {}: {} training occurrences", round, current.size());
    auto opts = o.train;
    opts.seed = o.train.seed + static_cast<std::uint64_t>(round);
    if (round == 0 && o.round0_model) {
      model = *o.round0_model;
    } else {
      model = train_fine(occurrence_samples(c, current), config, dev, seeds, opts);
    }

    RoundState st;
    st.round = round;
    st.occurrences = current;
    st.n_discarded = discarded.size();
    st.dev_accuracy = model.best_dev_accuracy;
    const auto a = audit(current, gold, seed_set);
    st.planted_fraction = a.planted;
    st.noise_estimate = a.noise;
    if (round > 0) st.discarded_planted_fraction = audit(discarded, gold, seed_set).planted;
    if (!o.checkpoint_dir.empty()) {
      const auto path = o.checkpoint_dir / ("fine_round" + std::to_string(round) + ".ckpt");
      model.save(path);
      st.checkpoint = path.string();
    }
    const bool better = round == 0 || !model.best_dev_accuracy || !r.model.best_dev_accuracy ||
                        *model.best_dev_accuracy >= *r.model.best_dev_accuracy;
    if (better) {
      r.model = model;
      r.selected_round = round;
    }
    r.history.push_back(std::move(st));
  }
  return r;
}

json IterationResult::history_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rounds = json::array();
  for (const auto& s : history) {
    rounds.push_back({{"round", s.round},
                      {"n_occurrences", s.occurrences.size()},
                      {"n_discarded", s.n_discarded},
                      {"checkpoint", s.checkpoint},
                      {"dev_accuracy", opt(s.dev_accuracy)},
                      {"planted_fraction", opt(s.planted_fraction)},
                      {"discarded_planted_fraction", opt(s.discarded_planted_fraction)},
                      {"noise_estimate", opt(s.noise_estimate)}});
  }
  return {{"rounds", rounds},
          {"selected_round", selected_round},
          {"stopped_early", stopped_early ? json(*stopped_early) : json(nullptr)}};
}

}  // namespace impromptu::fine
