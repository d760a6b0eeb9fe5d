#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <unistd.h>

#include "helpers.hpp"
#include "impromptu/fine.hpp"

using namespace impromptu;
using namespace impromptu::fine;
using datasets::MaskedSample;
using impromptu::testing::make_corpus;

namespace {

// Drug sentences pair s0/s1/x0/x1 with "buy"/"sell" context; food sentences pair
// x2/x3 with "cook"/"eat".
corpus::Corpus toy_corpus(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < n; ++i) {
    const bool drug = i % 2 == 0;
    const std::string term = drug ? std::vector<std::string>{"s0", "s1", "x0", "x1"}[rng.uniform_index(4)]
                                   : std::vector<std::string>{"x2", "x3"}[rng.uniform_index(2)];
    std::string l = drug ? "we buy " : "we cook ";
    l += term + (drug ? " and sell it" : " and eat it");
    if (rng.uniform() < 0.5) l += " f" + std::to_string(rng.uniform_index(5));
    lines.push_back(l);
  }
  return make_corpus(lines);
}

lm::ModelConfig tiny(const corpus::Corpus& c) {
  lm::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.max_len = 12;
  cfg.vocab_size = static_cast<int>(c.vocab->size());
  cfg.dropout = 0.0;
  return cfg;
}

TrainOptions fast(int epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.patience = epochs;
  o.batch_size = 8;
  o.lr = 3e-3;
  o.seed = 5;
  return o;
}

std::vector<Occurrence> occurrences_of(const corpus::Corpus& c, const std::set<std::string>& terms) {
  const auto idx = index::build_inverted_index(c);
  std::vector<Occurrence> out;
  for (const auto& t : terms) {
    for (const auto& p : idx.postings(t)) out.push_back({t, p.sid, p.pos, 1.0});
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return std::pair(a.sid, a.pos) < std::pair(b.sid, b.pos); });
  return out;
}

// x0/x1 positions are positives, x2/x3 positions negatives
std::vector<DevItem> toy_dev(const corpus::Corpus& c) {
  std::vector<DevItem> dev;
  const auto mask = c.vocab->specials().mask;
  for (const auto& o : occurrences_of(c, {"x0", "x1", "x2", "x3"})) {
    DevItem d{c.find(o.sid)->tokens, {o.pos}, o.term == "x0" || o.term == "x1" ? 1 : 0};
    d.tokens[static_cast<std::size_t>(o.pos)] = mask;
    dev.push_back(std::move(d));
    if (dev.size() == 40) break;
  }
  return dev;
}

std::vector<corpus::TermId> seed_ids(const corpus::Corpus& c) {
  return {c.vocab->require("s0"), c.vocab->require("s1")};
}

MaskedSample sample_of_length(std::size_t len, std::int32_t target) {
  corpus::Sentence s{3, {}, corpus::Split::white, ""};
  for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(static_cast<corpus::TermId>(i));
  return datasets::mask_positions(s, {target}, 1000);
}

}  // namespace

TEST(MaskForCam, Examples) {
  Rng rng(1);
  const auto s10 = sample_of_length(10, 4);
  const auto m = mask_for_cam(s10, 0.5, rng);
  EXPECT_EQ(m.mask_positions.size(), 5u);
  EXPECT_TRUE(std::count(m.mask_positions.begin(), m.mask_positions.end(), 4));
  for (std::size_t i = 0; i < m.mask_positions.size(); ++i) {
    const auto p = static_cast<std::size_t>(m.mask_positions[i]);
    EXPECT_EQ(m.tokens[p], 1000);
    EXPECT_EQ(m.targets[i], static_cast<corpus::TermId>(p));
  }
  EXPECT_EQ(m.restored(), s10.restored());

  const auto m3 = mask_for_cam(sample_of_length(3, 2), 0.5, rng);
  EXPECT_EQ(m3.mask_positions, (std::vector<std::int32_t>{2}));

  EXPECT_THROW(mask_for_cam(sample_of_length(1, 0), 0.5, rng), InputError);
  EXPECT_THROW(mask_for_cam(s10, 0.0, rng), InputError);
  EXPECT_THROW(mask_for_cam(s10, 1.5, rng), InputError);
}

TEST(MaskForCam, CountAndTargetProperty) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const auto len = 2 + rng.uniform_index(60);
    const auto target = static_cast<std::int32_t>(rng.uniform_index(len));
    const double rate = 0.05 + 0.95 * rng.uniform();
    const auto m = mask_for_cam(sample_of_length(len, target), rate, rng);
    const auto expect = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rate * static_cast<double>(len))));
    EXPECT_EQ(m.mask_positions.size(), expect);
    EXPECT_TRUE(std::is_sorted(m.mask_positions.begin(), m.mask_positions.end()));
    EXPECT_EQ(std::adjacent_find(m.mask_positions.begin(), m.mask_positions.end()), m.mask_positions.end());
    EXPECT_TRUE(std::binary_search(m.mask_positions.begin(), m.mask_positions.end(), target));
  }
}

TEST(MaskForCam, PositionsAreUniform) {
  Rng rng(3);
  std::vector<int> hits(10, 0);
  const auto s = sample_of_length(10, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    for (auto p : mask_for_cam(s, 0.5, rng).mask_positions) ++hits[static_cast<std::size_t>(p)];
  }
  EXPECT_EQ(hits[0], n);
  // each other position is picked with probability 4/9
  for (std::size_t p = 1; p < 10; ++p) EXPECT_NEAR(hits[p] / static_cast<double>(n), 4.0 / 9.0, 0.02);
}

TEST(TrainFine, KeepsBestDevEpochLaterTieWins) {
  const auto c = toy_corpus(1, 120);
  const auto dev = toy_dev(c);
  const auto samples = occurrence_samples(c, occurrences_of(c, {"s0", "s1", "x0", "x1"}));
  std::vector<std::vector<float>> snapshots;
  auto o = fast(6);
  o.on_epoch = [&](int, const lm::ModelParams<float>& p) { snapshots.push_back(p.values); };
  const auto m = train_fine(samples, tiny(c), dev, seed_ids(c), o);
  ASSERT_EQ(m.history.size(), 6u);
  double best = -1;
  int best_epoch = 0;
  for (const auto& e : m.history) {
    ASSERT_TRUE(e.dev_accuracy);
    if (*e.dev_accuracy >= best) {
      best = *e.dev_accuracy;
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(m.best_epoch, best_epoch);
  EXPECT_EQ(*m.best_dev_accuracy, best);
  EXPECT_EQ(m.params.values, snapshots[static_cast<std::size_t>(best_epoch - 1)]);
}

TEST(TrainFine, WithoutDevKeepsLastEpoch) {
  const auto c = toy_corpus(2, 60);
  const auto samples = occurrence_samples(c, occurrences_of(c, {"s0", "x0"}));
  std::vector<float> last;
  auto o = fast(3);
  o.on_epoch = [&](int, const lm::ModelParams<float>& p) { last = p.values; };
  const auto m = train_fine(samples, tiny(c), {}, {}, o);
  EXPECT_EQ(m.best_epoch, 3);
  EXPECT_FALSE(m.best_dev_accuracy);
  EXPECT_EQ(m.params.values, last);
}

TEST(TrainFine, CamWeightZeroIgnoresCamMasks) {
  const auto c = toy_corpus(3, 60);
  const auto samples = occurrence_samples(c, occurrences_of(c, {"s0", "x0"}));
  auto a = fast(2), b = fast(2);
  a.cam_weight = b.cam_weight = 0.0;
  a.cam_rate = 0.2;
  b.cam_rate = 0.9;
  const auto ma = train_fine(samples, tiny(c), {}, {}, a);
  EXPECT_EQ(ma.params.values, train_fine(samples, tiny(c), {}, {}, b).params.values);
  EXPECT_NE(ma.params.values, train_fine(samples, tiny(c), {}, {}, fast(2)).params.values);
}

TEST(TrainFine, DeterministicAndSaveLoad) {
  const auto c = toy_corpus(4, 60);
  const auto dev = toy_dev(c);
  const auto samples = occurrence_samples(c, occurrences_of(c, {"s1", "x1"}));
  const auto a = train_fine(samples, tiny(c), dev, seed_ids(c), fast(2));
  const auto b = train_fine(samples, tiny(c), dev, seed_ids(c), fast(2));
  EXPECT_EQ(a.params.values, b.params.values);
  const auto path = std::filesystem::temp_directory_path() / ("fine_" + std::to_string(::getpid()));
  a.save(path);
  const auto r = FineModel::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(r.params.values, a.params.values);
  EXPECT_EQ(r.best_epoch, a.best_epoch);
  EXPECT_EQ(r.best_dev_accuracy, a.best_dev_accuracy);
  EXPECT_EQ(r.history.size(), a.history.size());
}

TEST(TrainFine, RejectsBadInput) {
  const auto c = toy_corpus(5, 20);
  const auto samples = occurrence_samples(c, occurrences_of(c, {"s0"}));
  EXPECT_THROW(train_fine({}, tiny(c), {}, {}, fast(1)), InputError);
  EXPECT_THROW(train_fine(samples, tiny(c), toy_dev(c), {}, fast(1)), InputError);
  EXPECT_THROW(train_fine(samples, tiny(c), {}, {}, fast(0)), InputError);
}

TEST(OccurrenceSamples, ValidatesTerms) {
  const auto c = toy_corpus(6, 10);
  const auto occ = occurrences_of(c, {"we"});
  const auto s = occurrence_samples(c, occ);
  ASSERT_EQ(s.size(), 10u);
  EXPECT_EQ(s[0].mask_positions, (std::vector<std::int32_t>{0}));
  EXPECT_THROW(occurrence_samples(c, {{"buy", 0, 0, 1}}), InputError);
  EXPECT_THROW(occurrence_samples(c, {{"we", 999, 0, 1}}), InputError);
  EXPECT_THROW(occurrence_samples(c, {{"we", 0, 40, 1}}), InputError);
}

TEST(ScoreCandidates, MeanOfOccurrenceScoresAndOrder) {
  const auto c = toy_corpus(7, 60);
  const auto m = train_fine(occurrence_samples(c, occurrences_of(c, {"s0", "s1"})), tiny(c), {}, {}, fast(2));
  const auto occ = occurrences_of(c, {"x0", "x2", "f1", "f3"});
  const auto scores = score_candidates(m.params, c, occ, seed_ids(c));
  const auto direct = occurrence_scores(m.params, c, occ, seed_ids(c));
  std::map<std::string, std::vector<double>> by_term;
  for (std::size_t i = 0; i < occ.size(); ++i) by_term[occ[i].term].push_back(direct[i]);
  ASSERT_EQ(scores.size(), by_term.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    EXPECT_EQ(s.occurrence_scores, by_term[s.term]);
    double sum = 0;
    for (double v : by_term[s.term]) sum += v;
    EXPECT_DOUBLE_EQ(s.score, sum / static_cast<double>(by_term[s.term].size()));
    if (i > 0) EXPECT_GE(scores[i - 1].score, s.score);
  }
}

TEST(ScoreCandidates, PermutationInvariantProperty) {
  const auto c = toy_corpus(8, 60);
  const auto m = train_fine(occurrence_samples(c, occurrences_of(c, {"s0"})), tiny(c), {}, {}, fast(1));
  auto occ = occurrences_of(c, {"x0", "x1", "x3", "we"});
  const auto ref = score_candidates(m.params, c, occ, seed_ids(c));
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(occ);
    const auto got = score_candidates(m.params, c, occ, seed_ids(c));
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_EQ(got[i].term, ref[i].term);
      EXPECT_EQ(got[i].score, ref[i].score);
    }
  }
}

TEST(ScoreCandidates, WholeVocabularyHasZeroLogMass) {
  const auto c = toy_corpus(9, 30);
  const auto m = train_fine(occurrence_samples(c, occurrences_of(c, {"s0"})), tiny(c), {}, {}, fast(1));
  std::vector<corpus::TermId> all;
  for (std::size_t i = 0; i < c.vocab->size(); ++i) all.push_back(static_cast<corpus::TermId>(i));
  for (const auto& s : score_candidates(m.params, c, occurrences_of(c, {"x0", "x2"}), all)) {
    EXPECT_NEAR(s.score, 0.0, 1e-5);
  }
  EXPECT_THROW(score_candidates(m.params, c, occurrences_of(c, {"x0"}), {}), InputError);
}

TEST(ToRanking, ExcludesTerms) {
  const std::vector<CandidateScore> s{{"a", {-1, -2}, -1.5}, {"b", {-3}, -3}};
  const auto r = to_ranking(s, {"a"});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].term, "b");
  EXPECT_EQ(r[0].n_occ, 1);
}

TEST(Iterate, ZeroRoundsIsOneTraining) {
  const auto c = toy_corpus(10, 60);
  IterateOptions o;
  o.rounds = 0;
  o.train = fast(2);
  const auto occ = occurrences_of(c, {"s0", "s1", "x0"});
  const auto r = iterate_training(c, occ, tiny(c), {}, {"s0", "s1"}, o);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.selected_round, 0);
  EXPECT_EQ(r.history[0].occurrences, occ);
  EXPECT_EQ(r.model.params.values,
            train_fine(occurrence_samples(c, occ), tiny(c), {}, {}, fast(2)).params.values);
}

TEST(Iterate, KeepAllLeavesSetUnchanged) {
  const auto c = toy_corpus(11, 60);
  IterateOptions o;
  o.rounds = 2;
  o.keep_fraction = 1.0;
  o.train = fast(1);
  const auto occ = occurrences_of(c, {"s0", "x1", "x2"});
  const auto r = iterate_training(c, occ, tiny(c), {}, {"s0"}, o);
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& h : r.history) {
    EXPECT_EQ(h.occurrences, occ);
    EXPECT_EQ(h.n_discarded, 0u);
  }
  EXPECT_EQ(r.selected_round, 2);
}

TEST(Iterate, InclusionChainAndSizesProperty) {
  Rng rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    const auto c = toy_corpus(100 + trial, 80);
    IterateOptions o;
    o.rounds = 2;
    o.keep_fraction = 0.4 + 0.5 * rng.uniform();
    o.train = fast(1);
    o.train.batch_size = 4;
    const auto r = iterate_training(c, occurrences_of(c, {"s0", "s1", "x0", "x2"}), tiny(c), toy_dev(c),
                                    {"s0", "s1"}, o);
    ASSERT_EQ(r.history.size(), 3u);
    for (std::size_t i = 1; i < r.history.size(); ++i) {
      const auto& prev = r.history[i - 1].occurrences;
      const auto& cur = r.history[i].occurrences;
      EXPECT_EQ(cur.size(), static_cast<std::size_t>(std::ceil(o.keep_fraction * static_cast<double>(prev.size()))));
      EXPECT_EQ(cur.size() + r.history[i].n_discarded, prev.size());
      const std::set<Occurrence> sp(prev.begin(), prev.end()), sc(cur.begin(), cur.end());
      EXPECT_TRUE(std::includes(sp.begin(), sp.end(), sc.begin(), sc.end()));
    }
    // the selected round has the best dev accuracy, and a later tie wins
    const auto sel = static_cast<std::size_t>(r.selected_round);
    for (std::size_t i = 0; i < r.history.size(); ++i) {
      if (i < sel) EXPECT_LE(*r.history[i].dev_accuracy, *r.history[sel].dev_accuracy);
      if (i > sel) EXPECT_LT(*r.history[i].dev_accuracy, *r.history[sel].dev_accuracy);
    }
    EXPECT_EQ(r.model.best_dev_accuracy, r.history[sel].dev_accuracy);
  }
}

TEST(Iterate, StopsBelowBatchSize) {
  const auto c = toy_corpus(13, 120);
  const auto occ = occurrences_of(c, {"s0", "s1"});
  std::size_t expected = 1, n = occ.size();
  while (expected <= 3 && (n = (n + 1) / 2) >= 8) ++expected;
  ASSERT_GE(expected, 2u);
  IterateOptions o;
  o.rounds = 3;
  o.keep_fraction = 0.5;
  o.train = fast(1);
  o.train.batch_size = 8;
  const auto r = iterate_training(c, occ, tiny(c), {}, {"s0"}, o);
  EXPECT_EQ(r.history.size(), std::min<std::size_t>(expected, 4));
  EXPECT_EQ(r.stopped_early.has_value(), expected <= 3);
  EXPECT_EQ(r.history_json()["rounds"].size(), r.history.size());
}

TEST(Iterate, GoldAuditAndRound0Reuse) {
  const auto c = toy_corpus(14, 40);
  const auto occ = occurrences_of(c, {"s0", "x0", "x2"});
  datasets::GoldLabels gold;
  datasets::GoldLabels::Term t{"x0", "s0", {}};
  std::size_t n_x0 = 0, n_s0 = 0;
  for (const auto& o : occ) {
    if (o.term == "x0") {
      t.sites.push_back({o.sid, o.pos});
      ++n_x0;
    }
    n_s0 += o.term == "s0" ? 1 : 0;
  }
  gold.terms.push_back(t);
  const auto base = train_fine(occurrence_samples(c, occ), tiny(c), {}, {}, fast(1));
  IterateOptions o;
  o.rounds = 0;
  o.round0_model = &base;
  const auto r = iterate_training(c, occ, tiny(c), {}, {"s0"}, o, &gold);
  EXPECT_EQ(r.model.params.values, base.params.values);
  const auto n = static_cast<double>(occ.size());
  EXPECT_DOUBLE_EQ(*r.history[0].planted_fraction, static_cast<double>(n_x0) / n);
  EXPECT_DOUBLE_EQ(*r.history[0].noise_estimate, 1.0 - static_cast<double>(n_x0 + n_s0) / n);
}

TEST(Iterate, RejectsBadOptions) {
  const auto c = toy_corpus(15, 20);
  IterateOptions o;
  o.keep_fraction = 0.0;
  EXPECT_THROW(iterate_training(c, {}, tiny(c), {}, {"s0"}, o), InputError);
  o.keep_fraction = 0.5;
  o.rounds = -1;
  EXPECT_THROW(iterate_training(c, {}, tiny(c), {}, {"s0"}, o), InputError);
}
