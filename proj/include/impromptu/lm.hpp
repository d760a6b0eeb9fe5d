#pragma once

// Tiny pre-LN transformer encoder with a CLS classifier head, a weight-tied
// MLM head and a two-layer augmentation head, trained with hand-written
// backward passes. Every sequence is prefixed with the CLS id internally, so
// sentence position i lives at row i + 1 of the hidden states.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "impromptu/common.hpp"
#include "impromptu/corpus.hpp"
#include "impromptu/datasets.hpp"

namespace impromptu::lm {

using corpus::TermId;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  /// Longest sentence accepted, not counting the CLS slot.
  int max_len = 128;
  int vocab_size = 0;
  int n_aug_layers = 2;
  double dropout = 0.1;

  /// Throws InputError when the shape contract is violated.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

enum class TensorGroup { encoder, cls, mlm, aug };
std::string_view group_name(TensorGroup g);

struct TensorSpec {
  std::string name;
  TensorGroup group;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct BlockOffsets {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Fixed tensor order of the flat parameter vector (also the checkpoint order):
/// tok_emb, pos_emb, encoder blocks, lnf, aug blocks, mlm head, cls head.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& c);

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::size_t size() const { return size_; }
  const TensorSpec& find(std::string_view name) const;

  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0;
  std::size_t mlm_wt = 0, mlm_bt = 0, mlm_ln_g = 0, mlm_ln_b = 0, mlm_bias = 0;
  std::size_t cls_w1 = 0, cls_b1 = 0, cls_w2 = 0, cls_b2 = 0;
  std::vector<BlockOffsets> encoder;
  std::vector<BlockOffsets> aug;

 private:
  std::size_t add(const std::string& name, TensorGroup g, std::size_t rows, std::size_t cols);
  BlockOffsets add_block(const std::string& prefix, TensorGroup g, std::size_t d, std::size_t f);
  std::vector<TensorSpec> tensors_;
  std::size_t size_ = 0;
};

template <class Real>
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<Real> values;

  /// Embeddings N(0, 0.02), dense weights N(0, 1/fan_in), biases 0, LN gains 1.
  /// The augmentation blocks start as identity maps (output projections zeroed).
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  std::span<Real> tensor(std::string_view name);
  std::span<const Real> tensor(std::string_view name) const;

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out{config, layout, {}};
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

/// Dropout switch; masks are drawn from `rng` when training.
struct RunMode {
  bool train = false;
  Rng* rng = nullptr;
};

template <class Real>
struct LnCache {
  std::vector<Real> xhat;
  std::vector<Real> rstd;
};

template <class Real>
struct BlockCache {
  std::vector<Real> x_in, a, q, k, v, p, ctx, attn_drop, x_mid, b, h, g, ffn_drop;
  LnCache<Real> ln1, ln2;
};

template <class Real>
struct ForwardTrace {
  std::vector<TermId> ids;  // CLS-prefixed
  std::size_t rows = 0;     // ids.size()
  std::size_t d_model = 0;
  std::vector<Real> emb_drop;
  std::vector<BlockCache<Real>> blocks;
  LnCache<Real> final_ln;
  std::vector<Real> hidden;      // Ĥ, rows x d_model
  std::vector<BlockCache<Real>> aug_blocks;
  std::vector<Real> aug_hidden;  // H̄, empty until aug_encode

  /// Sentence length (CLS excluded).
  std::size_t n_tokens() const { return rows - 1; }
  std::span<const Real> token_hidden(std::size_t i) const {
    return {hidden.data() + (i + 1) * d_model, d_model};
  }
  std::span<const Real> cls_hidden() const { return {hidden.data(), d_model}; }
};

/// Throws InputError for an empty or overlength sentence or an id outside the vocabulary.
template <class Real>
ForwardTrace<Real> encode(const ModelParams<Real>& params, std::span<const TermId> tokens,
                          RunMode mode = {});

/// Runs the augmentation blocks on trace.hidden, filling trace.aug_hidden.
template <class Real>
void aug_encode(const ModelParams<Real>& params, ForwardTrace<Real>& trace, RunMode mode = {});

/// Two-way softmax over the CLS head; index 1 is the euphemism class.
template <class Real>
std::array<Real, 2> classify(const ModelParams<Real>& params, const ForwardTrace<Real>& trace);

/// Row-normalized vocabulary distributions at sentence positions, read from
/// H̄ when `use_aug` is set and from Ĥ otherwise. Shape |positions| x vocab.
template <class Real>
std::vector<Real> mlm_probs(const ModelParams<Real>& params, const ForwardTrace<Real>& trace,
                            std::span<const std::int32_t> positions, bool use_aug = false);

/// Mean negative log-likelihood of the gold class. probs holds rows of (p0, p1).
double loss_coarse(std::span<const std::array<double, 2>> probs, std::span<const int> labels);

/// Cross-entropy of the MLM distribution at its target plus cam_weight times
/// the mean cross-entropy over the N augmented positions. Throws InvariantError for N = 0.
double loss_fine(std::span<const double> mlm_dist, TermId mlm_target,
                 std::span<const double> cam_dists, std::span<const TermId> cam_targets,
                 std::size_t vocab_size, double cam_weight = 1.0);

/// One fine training item: the single-target MLM view and the CAM view of the same sentence.
struct FinePair {
  datasets::MaskedSample mlm;
  datasets::MaskedSample cam;
};

/// Loss of one coarse sample; adds scale * d(loss)/d(params) into grad when non-null.
template <class Real>
double coarse_sample_grad(const ModelParams<Real>& params, const datasets::MaskedSample& sample,
                          RunMode mode, std::type_identity_t<Real> scale,
                        std::type_identity_t<Real>* grad);

/// Loss of one fine pair (CAM pass skipped when cam_weight is 0).
template <class Real>
double fine_sample_grad(const ModelParams<Real>& params, const FinePair& pair, double cam_weight,
                        RunMode mode, std::type_identity_t<Real> scale,
                        std::type_identity_t<Real>* grad);

enum class LossKind { coarse, fine };

struct Batch {
  LossKind kind = LossKind::coarse;
  std::vector<const datasets::MaskedSample*> coarse;
  std::vector<const FinePair*> fine;
  double cam_weight = 1.0;
  bool train = true;
  /// Sample i draws its dropout masks from Rng(dropout_seed).fork(i).
  std::uint64_t dropout_seed = 0;
  std::size_t size() const { return kind == LossKind::coarse ? coarse.size() : fine.size(); }
};

/// Mean loss over the batch; grad (resized and zeroed) receives the mean
/// gradient. Per-sample gradients are summed in sample order, so the parallel
/// path is bit-identical to the serial one.
template <class Real>
double batch_gradient(const ModelParams<Real>& params, const Batch& batch, std::vector<Real>& grad,
                      bool parallel);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;
};

/// Computes the batch gradient and applies one Adam update. Returns the
/// pre-step loss. A non-finite loss or gradient throws InvariantError and
/// leaves params and state untouched.
template <class Real>
double backward_step(ModelParams<Real>& params, const Batch& batch, AdamState& state,
                     const AdamOptions& options, bool parallel);

/// Eval-mode log of the probability mass on `seeds`, averaged over the
/// masked positions of `tokens`.
template <class Real>
double seed_log_mass(const ModelParams<Real>& params, std::span<const TermId> tokens,
                     std::span<const std::int32_t> positions, std::span<const TermId> seeds);

/// Eval-mode p(euphemism) for a masked sentence.
template <class Real>
double coarse_probability(const ModelParams<Real>& params, std::span<const TermId> tokens);

/// Non-finite loss during training; carries the last good parameters.
class TrainingDiverged : public InvariantError {
 public:
  TrainingDiverged(const std::string& what, ModelParams<float> last_good)
      : InvariantError(what), last_good_(std::make_shared<const ModelParams<float>>(std::move(last_good))) {}
  const ModelParams<float>& last_good() const { return *last_good_; }

 private:
  std::shared_ptr<const ModelParams<float>> last_good_;
};

struct Checkpoint {
  ModelParams<float> params;
  nlohmann::json meta;
};

/// Layout: magic "IMPCKPT\0", u32 version, u32 header length, header JSON
/// {"config","meta","n_params"}, n_params little-endian float32 values in
/// ParamLayout order, u64 FNV-1a of the value bytes.
void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Throws InputError on a missing, truncated or corrupted file, a version
/// mismatch, or a config differing from `expected` when given.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace impromptu::lm
