#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "impromptu/kernels.hpp"
#include "impromptu/lm.hpp"

using namespace impromptu;
using namespace impromptu::lm;
using datasets::MaskedSample;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_len = 10;
  c.vocab_size = 50;
  c.dropout = 0.0;
  return c;
}

constexpr TermId kMask = 46;  // vocab 50: regular ids 0..45, then mask, pad, unk, cls

std::vector<TermId> random_sentence(Rng& rng, std::size_t len) {
  std::vector<TermId> s(len);
  for (auto& t : s) t = static_cast<TermId>(rng.uniform_index(46));
  return s;
}

MaskedSample masked(std::vector<TermId> tokens, std::vector<std::int32_t> positions,
                    std::optional<int> label = std::nullopt) {
  corpus::Sentence s{0, std::move(tokens), corpus::Split::white, ""};
  return datasets::mask_positions(s, std::move(positions), kMask, label);
}

template <class Real>
void randomize(ModelParams<Real>& p, std::uint64_t seed, double sd) {
  Rng rng(seed);
  for (auto& v : p.values) v += static_cast<Real>(sd * rng.normal());
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  // floor for tensors whose true gradient is zero (key biases: softmax is shift invariant)
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-7});
  return std::sqrt(diff) / denom;
}

}  // namespace

TEST(ModelConfig, RejectsBadShapes) {
  auto c = tiny_config();
  c.d_model = 15;
  EXPECT_THROW(c.validate(), InputError);
  c = tiny_config();
  c.n_aug_layers = 3;
  EXPECT_THROW(c.validate(), InputError);
  EXPECT_NO_THROW(tiny_config().validate());
  EXPECT_EQ(ModelConfig::from_json(tiny_config().to_json()), tiny_config());
}

TEST(Encode, HiddenShapeExcludesCls) {
  auto c = tiny_config();
  c.d_model = 8;
  const auto p = ModelParams<float>::init(c, 1);
  const std::vector<TermId> s{1, 2, 3};
  const auto tr = encode(p, std::span<const TermId>(s));
  EXPECT_EQ(tr.n_tokens(), 3u);
  EXPECT_EQ(tr.token_hidden(2).size(), 8u);
  EXPECT_EQ(tr.hidden.size(), 4u * 8u);
}

TEST(Encode, EvalModeIsPure) {
  const auto p = ModelParams<float>::init(tiny_config(), 2);
  const std::vector<TermId> s{4, 5, 6, 7};
  EXPECT_EQ(encode(p, std::span<const TermId>(s)).hidden, encode(p, std::span<const TermId>(s)).hidden);
}

TEST(Encode, BatchOrderDoesNotMatter) {
  const auto p = ModelParams<float>::init(tiny_config(), 3);
  Rng rng(9);
  std::vector<std::vector<TermId>> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_sentence(rng, 3 + rng.uniform_index(5)));
  std::vector<std::vector<float>> fwd, rev;
  for (const auto& s : batch) fwd.push_back(encode(p, std::span<const TermId>(s)).hidden);
  for (auto it = batch.rbegin(); it != batch.rend(); ++it) rev.push_back(encode(p, std::span<const TermId>(*it)).hidden);
  for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_EQ(fwd[i], rev[batch.size() - 1 - i]);
}

TEST(Encode, RejectsOverlengthAndBadIds) {
  const auto p = ModelParams<float>::init(tiny_config(), 4);
  const std::vector<TermId> long_s(11, 1);
  EXPECT_THROW(encode(p, std::span<const TermId>(long_s)), InputError);
  const std::vector<TermId> bad{1, 50};
  EXPECT_THROW(encode(p, std::span<const TermId>(bad)), InputError);
  EXPECT_THROW(encode(p, std::span<const TermId>()), InputError);
}

TEST(Classify, NormalizedAndSymmetricWhenZeroed) {
  auto p = ModelParams<double>::init(tiny_config(), 5);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto s = random_sentence(rng, 1 + rng.uniform_index(10));
    const auto q = classify(p, encode(p, std::span<const TermId>(s)));
    EXPECT_NEAR(q[0] + q[1], 1.0, 1e-6);
  }
  for (auto name : {"cls.w1", "cls.b1", "cls.w2", "cls.b2"}) {
    for (auto& v : p.tensor(name)) v = 0;
  }
  const std::vector<TermId> s{1, 2};
  const auto q = classify(p, encode(p, std::span<const TermId>(s)));
  EXPECT_DOUBLE_EQ(q[0], 0.5);
  EXPECT_DOUBLE_EQ(q[1], 0.5);
}

TEST(MlmProbs, RowsSumToOne) {
  const auto p = ModelParams<float>::init(tiny_config(), 6);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const auto s = random_sentence(rng, 6);
    const std::vector<std::int32_t> pos{0, 3, 5};
    const auto probs = mlm_probs(p, encode(p, std::span<const TermId>(s)), std::span<const std::int32_t>(pos));
    ASSERT_EQ(probs.size(), 3u * 50u);
    for (int r = 0; r < 3; ++r) {
      double sum = 0;
      for (int j = 0; j < 50; ++j) sum += probs[static_cast<std::size_t>(r * 50 + j)];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(AugEncode, IdentityAtInit) {
  const auto p = ModelParams<double>::init(tiny_config(), 7);
  const std::vector<TermId> s{3, 9, 12, 40};
  auto tr = encode(p, std::span<const TermId>(s));
  aug_encode(p, tr);
  EXPECT_EQ(tr.aug_hidden, tr.hidden);
  const std::vector<std::int32_t> pos{1, 2};
  EXPECT_EQ(mlm_probs(p, tr, std::span<const std::int32_t>(pos), true),
            mlm_probs(p, tr, std::span<const std::int32_t>(pos), false));
}

TEST(AugEncode, GradientReachesAugAndEncoder) {
  auto p = ModelParams<double>::init(tiny_config(), 8);
  randomize(p, 1, 0.05);
  const std::vector<TermId> s{3, 9, 12, 40, 7};
  FinePair pair{masked(s, {2}), masked(s, {0, 2})};
  std::vector<double> g(p.values.size(), 0.0);
  fine_sample_grad(p, pair, 1.0, RunMode{}, 1.0, g.data());
  auto norm = [&](TensorGroup grp) {
    double n = 0;
    for (const auto& t : p.layout.tensors()) {
      if (t.group != grp) continue;
      for (std::size_t i = 0; i < t.size(); ++i) n += g[t.offset + i] * g[t.offset + i];
    }
    return n;
  };
  EXPECT_GT(norm(TensorGroup::aug), 0.0);
  EXPECT_GT(norm(TensorGroup::encoder), 0.0);
  EXPECT_GT(norm(TensorGroup::mlm), 0.0);
  EXPECT_EQ(norm(TensorGroup::cls), 0.0);
}

TEST(LossCoarse, KnownValues) {
  const std::vector<std::array<double, 2>> perfect{{0.0, 1.0}, {1.0, 0.0}};
  const std::vector<int> labels{1, 0};
  EXPECT_NEAR(loss_coarse(perfect, labels), 0.0, 1e-12);
  const std::vector<std::array<double, 2>> uniform{{0.5, 0.5}, {0.5, 0.5}};
  EXPECT_NEAR(loss_coarse(uniform, labels), 0.6931, 1e-4);
  // -(ln 0.8 + ln 0.25) / 2
  const std::vector<std::array<double, 2>> hand{{0.2, 0.8}, {0.25, 0.75}};
  EXPECT_NEAR(loss_coarse(hand, labels), -(std::log(0.8) + std::log(0.25)) / 2, 1e-12);
}

TEST(LossFine, KnownValues) {
  const std::size_t v = 6;
  std::vector<double> onehot(v, 0.0);
  onehot[2] = 1.0;
  std::vector<double> cam_perfect;
  for (int i = 0; i < 4; ++i) cam_perfect.insert(cam_perfect.end(), onehot.begin(), onehot.end());
  const std::vector<TermId> targets{2, 2, 2, 2};
  EXPECT_NEAR(loss_fine(onehot, 2, cam_perfect, targets, v), 0.0, 1e-12);

  const std::vector<double> uni(v, 1.0 / v);
  std::vector<double> cam_uni(4 * v, 1.0 / v);
  const std::vector<TermId> t4{0, 1, 2, 3};
  EXPECT_NEAR(loss_fine(uni, 5, cam_uni, t4, v), 2 * std::log(6.0), 1e-12);

  // -ln 0.5 + (-ln 0.25 - ln 0.5) / 2
  std::vector<double> m{0.5, 0.5, 0, 0, 0, 0};
  std::vector<double> c2{0.25, 0.75, 0, 0, 0, 0, 0.5, 0.5, 0, 0, 0, 0};
  const std::vector<TermId> t2{0, 1};
  EXPECT_NEAR(loss_fine(m, 0, c2, t2, v), std::log(2.0) + (std::log(4.0) + std::log(2.0)) / 2, 1e-12);

  EXPECT_THROW(loss_fine(m, 0, std::vector<double>{}, std::vector<TermId>{}, v), InvariantError);
}

TEST(LossFine, AugBypassDoublesMlmLoss) {
  const auto p = ModelParams<double>::init(tiny_config(), 9);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = random_sentence(rng, 8);
    const auto mlm = masked(s, {3});
    const auto tr = encode(p, std::span<const TermId>(mlm.tokens));
    const std::vector<std::int32_t> pos{3};
    const auto dist = mlm_probs(p, tr, std::span<const std::int32_t>(pos));
    std::vector<double> cam;
    std::vector<TermId> targets;
    for (int i = 0; i < 3; ++i) {
      cam.insert(cam.end(), dist.begin(), dist.end());
      targets.push_back(mlm.targets[0]);
    }
    const double single = -std::log(dist[static_cast<std::size_t>(mlm.targets[0])]);
    EXPECT_NEAR(loss_fine(dist, mlm.targets[0], cam, targets, 50), 2 * single, 1e-12);
  }
}

TEST(FineLoss, NoCamEqualsPureMlm) {
  const auto p = ModelParams<double>::init(tiny_config(), 10);
  const std::vector<TermId> s{3, 9, 12, 40, 7};
  FinePair pair{masked(s, {1}), masked(s, {1, 3})};
  const double with_zero = fine_sample_grad(p, pair, 0.0, RunMode{}, 1.0, nullptr);
  const auto tr = encode(p, std::span<const TermId>(pair.mlm.tokens));
  const std::vector<std::int32_t> pos{1};
  const auto dist = mlm_probs(p, tr, std::span<const std::int32_t>(pos));
  EXPECT_NEAR(with_zero, -std::log(dist[9]), 1e-12);
}

// Analytic gradients against central differences for every tensor.
TEST(GradientCheck, AllTensorsMatchFiniteDifferences) {
  auto p = ModelParams<double>::init(tiny_config(), 11);
  randomize(p, 2, 0.1);
  Rng rng(4);
  const auto s1 = random_sentence(rng, 7);
  const auto s2 = random_sentence(rng, 6);
  const auto coarse = masked(s1, {2}, 1);
  const FinePair pair{masked(s2, {4}), masked(s2, {0, 2, 4})};

  auto loss = [&](const ModelParams<double>& q, double* g) {
    return coarse_sample_grad(q, coarse, RunMode{}, 1.0, g) + fine_sample_grad(q, pair, 1.0, RunMode{}, 1.0, g);
  };
  std::vector<double> analytic(p.values.size(), 0.0);
  loss(p, analytic.data());

  const double h = 1e-3;
  for (const auto& t : p.layout.tensors()) {
    std::vector<double> a(t.size()), n(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t k = t.offset + i;
      const double orig = p.values[k];
      p.values[k] = orig + h;
      const double up = loss(p, nullptr);
      p.values[k] = orig - h;
      const double down = loss(p, nullptr);
      p.values[k] = orig;
      n[i] = (up - down) / (2 * h);
      a[i] = analytic[k];
    }
    EXPECT_LT(rel_err(a, n), 1e-4) << t.name;
  }
}

TEST(BatchGradient, ParallelMatchesSerialBitwise) {
  auto p = ModelParams<float>::init(tiny_config(), 12);
  Rng rng(5);
  std::vector<FinePair> pairs;
  for (int i = 0; i < 6; ++i) {
    const auto s = random_sentence(rng, 8);
    pairs.push_back({masked(s, {1}), masked(s, {1, 4, 6})});
  }
  auto c = tiny_config();
  c.dropout = 0.1;
  p.config = c;
  Batch b;
  b.kind = LossKind::fine;
  for (const auto& x : pairs) b.fine.push_back(&x);
  b.dropout_seed = 77;
  std::vector<float> g1, g2;
  const int saved = kernels::threads();
  kernels::set_threads(4);
  const double l1 = batch_gradient(p, b, g1, true);
  kernels::set_threads(1);
  const double l2 = batch_gradient(p, b, g2, false);
  kernels::set_threads(saved);
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(g1, g2);
}

TEST(BackwardStep, LossDecreasesOnMemorizableBatch) {
  auto p = ModelParams<float>::init(tiny_config(), 13);
  Rng rng(6);
  std::vector<FinePair> pairs;
  for (int i = 0; i < 4; ++i) {
    const auto s = random_sentence(rng, 6);
    pairs.push_back({masked(s, {2}), masked(s, {0, 2, 5})});
  }
  Batch b;
  b.kind = LossKind::fine;
  for (const auto& x : pairs) b.fine.push_back(&x);
  b.train = false;
  AdamState st;
  AdamOptions opt;
  opt.lr = 3e-3;
  std::vector<double> losses;
  for (int i = 0; i < 100; ++i) losses.push_back(backward_step(p, b, st, opt, false));
  // trend: each block of 20 steps ends lower than it started
  for (int k = 0; k + 20 <= 100; k += 20) EXPECT_LT(losses[static_cast<std::size_t>(k + 19)], losses[static_cast<std::size_t>(k)]);
  EXPECT_LT(losses.back(), 0.25 * losses.front());
}

TEST(BackwardStep, ZeroLrLeavesParamsUnchanged) {
  auto p = ModelParams<float>::init(tiny_config(), 14);
  const auto before = p.values;
  const auto s = masked({1, 2, 3, 4}, {1}, 1);
  Batch b;
  b.coarse.push_back(&s);
  b.train = false;
  AdamState st;
  AdamOptions opt;
  opt.lr = 0.0;
  backward_step(p, b, st, opt, false);
  EXPECT_EQ(p.values, before);
}

TEST(BackwardStep, NonFiniteLossThrowsAndKeepsParams) {
  auto p = ModelParams<float>::init(tiny_config(), 15);
  p.tensor("cls.b2")[0] = std::numeric_limits<float>::infinity();
  const auto before = p.values;
  const auto s = masked({1, 2, 3, 4}, {1}, 1);
  Batch b;
  b.coarse.push_back(&s);
  b.train = false;
  AdamState st;
  EXPECT_THROW(backward_step(p, b, st, AdamOptions{}, false), InvariantError);
  EXPECT_EQ(p.values, before);
  EXPECT_EQ(st.step, 0);
}

TEST(Memorize, SingleSentenceArgmaxIsGold) {
  auto p = ModelParams<float>::init(tiny_config(), 16);
  const std::vector<TermId> s{5, 17, 23, 8, 30};
  const FinePair pair{masked(s, {2}), masked(s, {2, 4})};
  Batch b;
  b.kind = LossKind::fine;
  b.fine.push_back(&pair);
  b.train = false;
  AdamState st;
  AdamOptions opt;
  opt.lr = 1e-2;
  for (int i = 0; i < 60; ++i) backward_step(p, b, st, opt, false);
  const auto tr = encode(p, std::span<const TermId>(pair.mlm.tokens));
  const std::vector<std::int32_t> pos{2};
  const auto probs = mlm_probs(p, tr, std::span<const std::int32_t>(pos));
  EXPECT_EQ(std::max_element(probs.begin(), probs.end()) - probs.begin(), 23);
}

TEST(SeedLogMass, WholeVocabularyIsLogOne) {
  const auto p = ModelParams<float>::init(tiny_config(), 17);
  std::vector<TermId> all(50);
  for (TermId i = 0; i < 50; ++i) all[static_cast<std::size_t>(i)] = i;
  const std::vector<TermId> s{1, kMask, 3};
  const std::vector<std::int32_t> pos{1};
  EXPECT_NEAR(seed_log_mass(p, std::span<const TermId>(s), std::span<const std::int32_t>(pos),
                            std::span<const TermId>(all)),
              0.0, 1e-6);
}

TEST(SeedLogMass, MatchesMlmProbs) {
  const auto p = ModelParams<double>::init(tiny_config(), 18);
  const std::vector<TermId> s{1, kMask, 3, kMask};
  const std::vector<std::int32_t> pos{1, 3};
  const std::vector<TermId> seeds{4, 9};
  const auto probs = mlm_probs(p, encode(p, std::span<const TermId>(s)), std::span<const std::int32_t>(pos));
  const double expected = (std::log(probs[4] + probs[9]) + std::log(probs[50 + 4] + probs[50 + 9])) / 2;
  EXPECT_NEAR(seed_log_mass(p, std::span<const TermId>(s), std::span<const std::int32_t>(pos),
                            std::span<const TermId>(seeds)),
              expected, 1e-9);
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() /
                              ("impromptu_ckpt_" + std::to_string(::getpid()));
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  auto p = ModelParams<float>::init(tiny_config(), 19);
  randomize(p, 3, 0.01);
  save_checkpoint(p, dir / "m.ckpt", {{"best_dev_loss", 0.25}});
  const auto ck = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(ck.params.values, p.values);
  EXPECT_EQ(ck.params.config, p.config);
  EXPECT_EQ(ck.meta.at("best_dev_loss").get<double>(), 0.25);
  const std::vector<TermId> s{1, 2, 3};
  const std::vector<std::int32_t> pos{1};
  EXPECT_EQ(mlm_probs(p, encode(p, std::span<const TermId>(s)), std::span<const std::int32_t>(pos)),
            mlm_probs(ck.params, encode(ck.params, std::span<const TermId>(s)), std::span<const std::int32_t>(pos)));
}

TEST_F(CheckpointTest, CorruptionIsAnErrorNotACrash) {
  const auto p = ModelParams<float>::init(tiny_config(), 20);
  save_checkpoint(p, dir / "m.ckpt");
  std::string blob;
  {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    blob.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << b;
  };
  std::string flipped = blob;
  flipped[flipped.size() / 2] ^= 0x40;
  write(flipped);
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), InputError);
  write(blob.substr(0, blob.size() - 100));
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), InputError);
  write("garbage");
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), InputError);
  std::string versioned = blob;
  versioned[8] = 9;
  write(versioned);
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), InputError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), InputError);
}

TEST_F(CheckpointTest, CrossConfigLoadRejected) {
  const auto p = ModelParams<float>::init(tiny_config(), 21);
  save_checkpoint(p, dir / "m.ckpt");
  auto other = tiny_config();
  other.d_model = 32;
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", &other), InputError);
  const auto same = tiny_config();
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", &same));
}
