#include "impromptu/lm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "impromptu/kernels.hpp"

namespace impromptu::lm {

namespace ks = kernels::serial;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config and layout

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_len < 1) {
    throw InputError("model config: sizes must be positive");
  }
  if (d_model % n_heads != 0) throw InputError("model config: d_model must be divisible by n_heads");
  if (n_aug_layers != 2) throw InputError("model config: the augmentation head has exactly 2 layers");
  if (vocab_size < 5) throw InputError("model config: vocab_size must cover the special ids");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("model config: dropout must be in [0,1)");
}

json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"n_heads", n_heads}, {"d_model", d_model}, {"d_ff", d_ff},
          {"max_len", max_len},   {"vocab_size", vocab_size}, {"n_aug_layers", n_aug_layers},
          {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_aug_layers = j.value("n_aug_layers", c.n_aug_layers);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

std::string_view group_name(TensorGroup g) {
  switch (g) {
    case TensorGroup::encoder: return "encoder";
    case TensorGroup::cls: return "cls";
    case TensorGroup::mlm: return "mlm";
    case TensorGroup::aug: return "aug";
  }
  return "?";
}

std::size_t ParamLayout::add(const std::string& name, TensorGroup g, std::size_t rows,
                             std::size_t cols) {
  tensors_.push_back({name, g, size_, rows, cols});
  size_ += rows * cols;
  return tensors_.back().offset;
}

BlockOffsets ParamLayout::add_block(const std::string& p, TensorGroup g, std::size_t d,
                                    std::size_t f) {
  BlockOffsets b{};
  b.ln1_g = add(p + ".ln1_g", g, 1, d);
  b.ln1_b = add(p + ".ln1_b", g, 1, d);
  b.wq = add(p + ".wq", g, d, d);
  b.bq = add(p + ".bq", g, 1, d);
  b.wk = add(p + ".wk", g, d, d);
  b.bk = add(p + ".bk", g, 1, d);
  b.wv = add(p + ".wv", g, d, d);
  b.bv = add(p + ".bv", g, 1, d);
  b.wo = add(p + ".wo", g, d, d);
  b.bo = add(p + ".bo", g, 1, d);
  b.ln2_g = add(p + ".ln2_g", g, 1, d);
  b.ln2_b = add(p + ".ln2_b", g, 1, d);
  b.w1 = add(p + ".w1", g, d, f);
  b.b1 = add(p + ".b1", g, 1, f);
  b.w2 = add(p + ".w2", g, f, d);
  b.b2 = add(p + ".b2", g, 1, d);
  return b;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  tok_emb = add("tok_emb", TensorGroup::encoder, v, d);
  pos_emb = add("pos_emb", TensorGroup::encoder, static_cast<std::size_t>(c.max_len) + 1, d);
  for (int l = 0; l < c.n_layers; ++l) {
    encoder.push_back(add_block("enc" + std::to_string(l), TensorGroup::encoder, d, f));
  }
  lnf_g = add("lnf_g", TensorGroup::encoder, 1, d);
  lnf_b = add("lnf_b", TensorGroup::encoder, 1, d);
  for (int l = 0; l < c.n_aug_layers; ++l) {
    aug.push_back(add_block("aug" + std::to_string(l), TensorGroup::aug, d, f));
  }
  mlm_wt = add("mlm.wt", TensorGroup::mlm, d, d);
  mlm_bt = add("mlm.bt", TensorGroup::mlm, 1, d);
  mlm_ln_g = add("mlm.ln_g", TensorGroup::mlm, 1, d);
  mlm_ln_b = add("mlm.ln_b", TensorGroup::mlm, 1, d);
  mlm_bias = add("mlm.out_bias", TensorGroup::mlm, 1, v);
  cls_w1 = add("cls.w1", TensorGroup::cls, d, d);
  cls_b1 = add("cls.b1", TensorGroup::cls, 1, d);
  cls_w2 = add("cls.w2", TensorGroup::cls, d, 2);
  cls_b2 = add("cls.b2", TensorGroup::cls, 1, 2);
}

const TensorSpec& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw InvariantError("no tensor named " + std::string(name));
}

template <class Real>
ModelParams<Real> ModelParams<Real>::init(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p{config, ParamLayout(config), {}};
  p.values.assign(p.layout.size(), Real(0));
  Rng rng(seed);
  for (const auto& t : p.layout.tensors()) {
    Real* x = p.values.data() + t.offset;
    const auto& n = t.name;
    const bool gain = n.ends_with("_g");
    const bool bias = t.rows == 1 && !gain;
    const bool identity_out = t.group == TensorGroup::aug && (n.ends_with(".wo") || n.ends_with(".w2"));
    if (gain) {
      std::fill(x, x + t.size(), Real(1));
    } else if (bias || identity_out) {
      // zero
    } else if (n == "tok_emb" || n == "pos_emb") {
      for (std::size_t i = 0; i < t.size(); ++i) x[i] = static_cast<Real>(0.02 * rng.normal());
    } else {
      const double sd = 1.0 / std::sqrt(static_cast<double>(t.rows));
      for (std::size_t i = 0; i < t.size(); ++i) x[i] = static_cast<Real>(sd * rng.normal());
    }
  }
  return p;
}

template <class Real>
std::span<Real> ModelParams<Real>::tensor(std::string_view name) {
  const auto& t = layout.find(name);
  return {values.data() + t.offset, t.size()};
}

template <class Real>
std::span<const Real> ModelParams<Real>::tensor(std::string_view name) const {
  const auto& t = layout.find(name);
  return {values.data() + t.offset, t.size()};
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

constexpr double kLnEps = 1e-5;

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.39894228040143267794);
  return cdf + x * pdf;
}

/// y[T,n] = x[T,k] W[k,n] + b
template <class Real>
void linear(std::size_t t, std::size_t k, std::size_t n, const Real* x, const Real* w,
            const Real* b, Real* y) {
  ks::gemm(t, n, k, x, w, y, false);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += b[j];
  }
}

/// dW += x^T dy, db += colsum(dy), dx (+)= dy W^T
template <class Real>
void linear_backward(std::size_t t, std::size_t k, std::size_t n, const Real* x, const Real* w,
                     const Real* dy, Real* dw, Real* db, Real* dx, bool accumulate_dx) {
  if (dw) {
    ks::gemm_at(k, n, t, x, dy, dw, true);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
    }
  }
  if (dx) ks::gemm_bt(t, k, n, dy, w, dx, accumulate_dx);
}

template <class Real>
void layer_norm(std::size_t t, std::size_t d, const Real* x, const Real* g, const Real* b, Real* y,
                LnCache<Real>& cache) {
  cache.xhat.resize(t * d);
  cache.rstd.resize(t);
  for (std::size_t i = 0; i < t; ++i) {
    const Real* xi = x + i * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<Real>(d);
    const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(kLnEps));
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const Real xh = (xi[j] - mean) * rstd;
      cache.xhat[i * d + j] = xh;
      y[i * d + j] = g[j] * xh + b[j];
    }
  }
}

/// dx (+)= LN backward of dy; dg, db accumulate when non-null.
template <class Real>
void layer_norm_backward(std::size_t t, std::size_t d, const LnCache<Real>& cache, const Real* g,
                         const Real* dy, Real* dg, Real* db, Real* dx, bool accumulate_dx) {
  std::vector<Real> dxh(d);
  for (std::size_t i = 0; i < t; ++i) {
    const Real* xh = cache.xhat.data() + i * d;
    const Real* dyi = dy + i * d;
    Real mean_dxh = 0, mean_dxh_xh = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dxh[j] = dyi[j] * g[j];
      mean_dxh += dxh[j];
      mean_dxh_xh += dxh[j] * xh[j];
      if (dg) {
        dg[j] += dyi[j] * xh[j];
        db[j] += dyi[j];
      }
    }
    mean_dxh /= static_cast<Real>(d);
    mean_dxh_xh /= static_cast<Real>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const Real v = cache.rstd[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
      dx[i * d + j] = accumulate_dx ? dx[i * d + j] + v : v;
    }
  }
}

template <class Real>
void draw_dropout(std::vector<Real>& mask, std::size_t n, double rate, RunMode mode) {
  if (!mode.train || rate <= 0.0) {
    mask.clear();
    return;
  }
  if (!mode.rng) throw InvariantError("training-mode forward needs a dropout rng");
  mask.resize(n);
  const Real keep = static_cast<Real>(1.0 / (1.0 - rate));
  for (auto& m : mask) m = mode.rng->uniform() < rate ? Real(0) : keep;
}

template <class Real>
void apply_mask(std::vector<Real>& x, const std::vector<Real>& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

struct Dims {
  std::size_t d, f, h, dh, v;
  explicit Dims(const ModelConfig& c)
      : d(static_cast<std::size_t>(c.d_model)),
        f(static_cast<std::size_t>(c.d_ff)),
        h(static_cast<std::size_t>(c.n_heads)),
        dh(static_cast<std::size_t>(c.d_model / c.n_heads)),
        v(static_cast<std::size_t>(c.vocab_size)) {}
};

template <class Real>
void attention(std::size_t t, const Dims& dm, const std::vector<Real>& q, const std::vector<Real>& k,
               const std::vector<Real>& v, std::vector<Real>& p, std::vector<Real>& ctx) {
  const std::size_t d = dm.d;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dm.dh));
  p.assign(dm.h * t * t, Real(0));
  ctx.assign(t * d, Real(0));
  for (std::size_t hh = 0; hh < dm.h; ++hh) {
    const std::size_t c0 = hh * dm.dh;
    Real* ph = p.data() + hh * t * t;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        ph[i * t + j] = scale * kernels::dot(q.data() + i * d + c0, k.data() + j * d + c0, dm.dh);
      }
    }
    ks::softmax_rows(t, t, ph);
    for (std::size_t i = 0; i < t; ++i) {
      Real* ci = ctx.data() + i * d + c0;
      for (std::size_t j = 0; j < t; ++j) {
        const Real w = ph[i * t + j];
        const Real* vj = v.data() + j * d + c0;
        for (std::size_t c = 0; c < dm.dh; ++c) ci[c] += w * vj[c];
      }
    }
  }
}

template <class Real>
void attention_backward(std::size_t t, const Dims& dm, const BlockCache<Real>& c,
                        const std::vector<Real>& dctx, std::vector<Real>& dq,
                        std::vector<Real>& dk, std::vector<Real>& dv) {
  const std::size_t d = dm.d;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dm.dh));
  dq.assign(t * d, Real(0));
  dk.assign(t * d, Real(0));
  dv.assign(t * d, Real(0));
  std::vector<Real> ds(t * t);
  for (std::size_t hh = 0; hh < dm.h; ++hh) {
    const std::size_t c0 = hh * dm.dh;
    const Real* ph = c.p.data() + hh * t * t;
    for (std::size_t i = 0; i < t; ++i) {
      const Real* dci = dctx.data() + i * d + c0;
      Real row = 0;
      for (std::size_t j = 0; j < t; ++j) {
        const Real dp = kernels::dot(dci, c.v.data() + j * d + c0, dm.dh);
        ds[i * t + j] = dp;
        row += dp * ph[i * t + j];
        Real* dvj = dv.data() + j * d + c0;
        const Real w = ph[i * t + j];
        for (std::size_t cc = 0; cc < dm.dh; ++cc) dvj[cc] += w * dci[cc];
      }
      for (std::size_t j = 0; j < t; ++j) ds[i * t + j] = ph[i * t + j] * (ds[i * t + j] - row) * scale;
    }
    for (std::size_t i = 0; i < t; ++i) {
      Real* dqi = dq.data() + i * d + c0;
      const Real* qi = c.q.data() + i * d + c0;
      for (std::size_t j = 0; j < t; ++j) {
        const Real s = ds[i * t + j];
        const Real* kj = c.k.data() + j * d + c0;
        Real* dkj = dk.data() + j * d + c0;
        for (std::size_t cc = 0; cc < dm.dh; ++cc) {
          dqi[cc] += s * kj[cc];
          dkj[cc] += s * qi[cc];
        }
      }
    }
  }
}

/// x (t x d) is replaced by the block output.
template <class Real>
void block_forward(const Real* w, const BlockOffsets& o, const Dims& dm, double dropout,
                   std::size_t t, std::vector<Real>& x, BlockCache<Real>& c, RunMode mode) {
  const std::size_t d = dm.d, f = dm.f;
  c.x_in = x;
  c.a.resize(t * d);
  layer_norm(t, d, x.data(), w + o.ln1_g, w + o.ln1_b, c.a.data(), c.ln1);
  c.q.resize(t * d);
  c.k.resize(t * d);
  c.v.resize(t * d);
  linear(t, d, d, c.a.data(), w + o.wq, w + o.bq, c.q.data());
  linear(t, d, d, c.a.data(), w + o.wk, w + o.bk, c.k.data());
  linear(t, d, d, c.a.data(), w + o.wv, w + o.bv, c.v.data());
  attention(t, dm, c.q, c.k, c.v, c.p, c.ctx);
  std::vector<Real> out(t * d);
  linear(t, d, d, c.ctx.data(), w + o.wo, w + o.bo, out.data());
  draw_dropout(c.attn_drop, t * d, dropout, mode);
  apply_mask(out, c.attn_drop);
  c.x_mid.resize(t * d);
  for (std::size_t i = 0; i < t * d; ++i) c.x_mid[i] = x[i] + out[i];

  c.b.resize(t * d);
  layer_norm(t, d, c.x_mid.data(), w + o.ln2_g, w + o.ln2_b, c.b.data(), c.ln2);
  c.h.resize(t * f);
  linear(t, d, f, c.b.data(), w + o.w1, w + o.b1, c.h.data());
  c.g.resize(t * f);
  for (std::size_t i = 0; i < t * f; ++i) c.g[i] = gelu(c.h[i]);
  linear(t, f, d, c.g.data(), w + o.w2, w + o.b2, out.data());
  draw_dropout(c.ffn_drop, t * d, dropout, mode);
  apply_mask(out, c.ffn_drop);
  for (std::size_t i = 0; i < t * d; ++i) x[i] = c.x_mid[i] + out[i];
}

/// dx holds d(out) on entry and d(x_in) on exit.
template <class Real>
void block_backward(const Real* w, Real* gw, const BlockOffsets& o, const Dims& dm,
                    std::size_t t, const BlockCache<Real>& c, std::vector<Real>& dx) {
  const std::size_t d = dm.d, f = dm.f;
  std::vector<Real> dmid = dx;
  std::vector<Real> dout = dx;
  apply_mask(dout, c.ffn_drop);
  std::vector<Real> dg(t * f);
  linear_backward(t, f, d, c.g.data(), w + o.w2, dout.data(), gw + o.w2, gw + o.b2, dg.data(), false);
  for (std::size_t i = 0; i < t * f; ++i) dg[i] *= gelu_grad(c.h[i]);
  std::vector<Real> db(t * d);
  linear_backward(t, d, f, c.b.data(), w + o.w1, dg.data(), gw + o.w1, gw + o.b1, db.data(), false);
  layer_norm_backward(t, d, c.ln2, w + o.ln2_g, db.data(), gw + o.ln2_g, gw + o.ln2_b, dmid.data(), true);

  dout = dmid;
  apply_mask(dout, c.attn_drop);
  std::vector<Real> dctx(t * d);
  linear_backward(t, d, d, c.ctx.data(), w + o.wo, dout.data(), gw + o.wo, gw + o.bo, dctx.data(), false);
  std::vector<Real> dq, dk, dv;
  attention_backward(t, dm, c, dctx, dq, dk, dv);
  std::vector<Real> da(t * d);
  linear_backward(t, d, d, c.a.data(), w + o.wq, dq.data(), gw + o.wq, gw + o.bq, da.data(), false);
  linear_backward(t, d, d, c.a.data(), w + o.wk, dk.data(), gw + o.wk, gw + o.bk, da.data(), true);
  linear_backward(t, d, d, c.a.data(), w + o.wv, dv.data(), gw + o.wv, gw + o.bv, da.data(), true);
  dx = std::move(dmid);
  layer_norm_backward(t, d, c.ln1, w + o.ln1_g, da.data(), gw + o.ln1_g, gw + o.ln1_b, dx.data(), true);
}

/// MLM head activations for a set of hidden rows.
template <class Real>
struct MlmCache {
  std::vector<std::size_t> rows;  // trace rows (sentence position + 1)
  std::vector<Real> hsel, z, gz, u, probs;
  LnCache<Real> ln;
  std::vector<double> log_norm;   // log partition per row
};

template <class Real>
void mlm_forward(const ModelParams<Real>& params, const std::vector<Real>& hidden,
                 std::vector<std::size_t> rows, MlmCache<Real>& c) {
  const Dims dm(params.config);
  const Real* w = params.values.data();
  const auto& L = params.layout;
  const std::size_t n = rows.size(), d = dm.d, v = dm.v;
  c.rows = std::move(rows);
  c.hsel.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(hidden.data() + c.rows[i] * d, d, c.hsel.data() + i * d);
  }
  c.z.resize(n * d);
  linear(n, d, d, c.hsel.data(), w + L.mlm_wt, w + L.mlm_bt, c.z.data());
  c.gz.resize(n * d);
  for (std::size_t i = 0; i < n * d; ++i) c.gz[i] = gelu(c.z[i]);
  c.u.resize(n * d);
  layer_norm(n, d, c.gz.data(), w + L.mlm_ln_g, w + L.mlm_ln_b, c.u.data(), c.ln);
  c.probs.resize(n * v);
  ks::gemm_bt(n, v, d, c.u.data(), w + L.tok_emb, c.probs.data(), false);
  c.log_norm.resize(n);
  const Real* bias = w + L.mlm_bias;
  for (std::size_t i = 0; i < n; ++i) {
    Real* row = c.probs.data() + i * v;
    for (std::size_t j = 0; j < v; ++j) row[j] += bias[j];
    const Real mx = *std::max_element(row, row + v);
    double sum = 0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    c.log_norm[i] = static_cast<double>(mx) + std::log(sum);
  }
}

/// Converts the cached logits to probabilities in place.
template <class Real>
void mlm_normalize(MlmCache<Real>& c, std::size_t v) {
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    Real* row = c.probs.data() + i * v;
    for (std::size_t j = 0; j < v; ++j) {
      row[j] = static_cast<Real>(std::exp(static_cast<double>(row[j]) - c.log_norm[i]));
    }
  }
}

/// dlogits (n x v) -> head parameter grads and d(hidden) rows.
template <class Real>
void mlm_backward(const ModelParams<Real>& params, const MlmCache<Real>& c,
                  const std::vector<Real>& dlogits, Real* gw, std::vector<Real>& dhidden) {
  const Dims dm(params.config);
  const Real* w = params.values.data();
  const auto& L = params.layout;
  const std::size_t n = c.rows.size(), d = dm.d, v = dm.v;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < v; ++j) gw[L.mlm_bias + j] += dlogits[i * v + j];
  }
  ks::gemm_at(v, d, n, dlogits.data(), c.u.data(), gw + L.tok_emb, true);
  std::vector<Real> du(n * d);
  ks::gemm(n, d, v, dlogits.data(), w + L.tok_emb, du.data(), false);
  std::vector<Real> dgz(n * d);
  layer_norm_backward(n, d, c.ln, w + L.mlm_ln_g, du.data(), gw + L.mlm_ln_g, gw + L.mlm_ln_b,
                      dgz.data(), false);
  for (std::size_t i = 0; i < n * d; ++i) dgz[i] *= gelu_grad(c.z[i]);
  std::vector<Real> dh(n * d);
  linear_backward(n, d, d, c.hsel.data(), w + L.mlm_wt, dgz.data(), gw + L.mlm_wt, gw + L.mlm_bt,
                  dh.data(), false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) dhidden[c.rows[i] * d + j] += dh[i * d + j];
  }
}

/// Cross-entropy of each cached row against its target, weighted; fills dlogits.
template <class Real>
double mlm_loss(const MlmCache<Real>& c, std::span<const TermId> targets, std::size_t v,
                double row_weight, Real scale, std::vector<Real>* dlogits) {
  const std::size_t n = c.rows.size();
  double loss = 0;
  if (dlogits) dlogits->assign(n * v, Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = static_cast<std::size_t>(targets[i]);
    const Real* logits = c.probs.data() + i * v;
    loss += row_weight * (c.log_norm[i] - static_cast<double>(logits[t]));
    if (dlogits) {
      const Real s = static_cast<Real>(row_weight) * scale;
      Real* dl = dlogits->data() + i * v;
      for (std::size_t j = 0; j < v; ++j) {
        dl[j] = s * static_cast<Real>(std::exp(static_cast<double>(logits[j]) - c.log_norm[i]));
      }
      dl[t] -= s;
    }
  }
  return loss;
}

template <class Real>
void encoder_backward(const ModelParams<Real>& params, const ForwardTrace<Real>& tr,
                      std::vector<Real> dhidden, Real* gw) {
  const Dims dm(params.config);
  const Real* w = params.values.data();
  const auto& L = params.layout;
  const std::size_t t = tr.rows, d = dm.d;
  std::vector<Real> dx(t * d);
  layer_norm_backward(t, d, tr.final_ln, w + L.lnf_g, dhidden.data(), gw + L.lnf_g, gw + L.lnf_b,
                      dx.data(), false);
  for (std::size_t l = L.encoder.size(); l-- > 0;) {
    block_backward(w, gw, L.encoder[l], dm, t, tr.blocks[l], dx);
  }
  apply_mask(dx, tr.emb_drop);
  for (std::size_t i = 0; i < t; ++i) {
    Real* te = gw + L.tok_emb + static_cast<std::size_t>(tr.ids[i]) * d;
    Real* pe = gw + L.pos_emb + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      te[j] += dx[i * d + j];
      pe[j] += dx[i * d + j];
    }
  }
}

/// d(aug_hidden) -> d(hidden), accumulating aug block grads.
template <class Real>
std::vector<Real> aug_backward(const ModelParams<Real>& params, const ForwardTrace<Real>& tr,
                               std::vector<Real> dx, Real* gw) {
  const Dims dm(params.config);
  const auto& L = params.layout;
  for (std::size_t l = L.aug.size(); l-- > 0;) {
    block_backward(params.values.data(), gw, L.aug[l], dm, tr.rows, tr.aug_blocks[l], dx);
  }
  return dx;
}

template <class Real>
std::vector<std::size_t> trace_rows(std::span<const std::int32_t> positions, const ForwardTrace<Real>& tr) {
  std::vector<std::size_t> rows;
  rows.reserve(positions.size());
  for (auto p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= tr.n_tokens()) {
      throw InvariantError("position " + std::to_string(p) + " outside the sentence");
    }
    rows.push_back(static_cast<std::size_t>(p) + 1);
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward API

template <class Real>
ForwardTrace<Real> encode(const ModelParams<Real>& params, std::span<const TermId> tokens,
                          RunMode mode) {
  const auto& cfg = params.config;
  if (tokens.empty()) throw InputError("cannot encode an empty sentence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_len)) {
    throw InputError("sentence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                     std::to_string(cfg.max_len));
  }
  const Dims dm(cfg);
  const auto cls = static_cast<TermId>(cfg.vocab_size - 1);
  ForwardTrace<Real> tr;
  tr.ids.reserve(tokens.size() + 1);
  tr.ids.push_back(cls);
  for (auto id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) throw InputError("token id " + std::to_string(id) + " outside the vocabulary");
    tr.ids.push_back(id);
  }
  tr.rows = tr.ids.size();
  tr.d_model = dm.d;
  const Real* w = params.values.data();
  const auto& L = params.layout;
  std::vector<Real> x(tr.rows * dm.d);
  for (std::size_t i = 0; i < tr.rows; ++i) {
    const Real* te = w + L.tok_emb + static_cast<std::size_t>(tr.ids[i]) * dm.d;
    const Real* pe = w + L.pos_emb + i * dm.d;
    for (std::size_t j = 0; j < dm.d; ++j) x[i * dm.d + j] = te[j] + pe[j];
  }
  draw_dropout(tr.emb_drop, x.size(), cfg.dropout, mode);
  apply_mask(x, tr.emb_drop);
  tr.blocks.resize(L.encoder.size());
  for (std::size_t l = 0; l < L.encoder.size(); ++l) {
    block_forward(w, L.encoder[l], dm, cfg.dropout, tr.rows, x, tr.blocks[l], mode);
  }
  tr.hidden.resize(x.size());
  layer_norm(tr.rows, dm.d, x.data(), w + L.lnf_g, w + L.lnf_b, tr.hidden.data(), tr.final_ln);
  return tr;
}

template <class Real>
void aug_encode(const ModelParams<Real>& params, ForwardTrace<Real>& tr, RunMode mode) {
  const Dims dm(params.config);
  const auto& L = params.layout;
  std::vector<Real> x = tr.hidden;
  tr.aug_blocks.resize(L.aug.size());
  for (std::size_t l = 0; l < L.aug.size(); ++l) {
    block_forward(params.values.data(), L.aug[l], dm, params.config.dropout, tr.rows, x,
                  tr.aug_blocks[l], mode);
  }
  tr.aug_hidden = std::move(x);
}

namespace {

template <class Real>
struct ClsCache {
  std::vector<Real> t;  // tanh activations
  std::array<Real, 2> p{};
};

template <class Real>
void cls_forward(const ModelParams<Real>& params, const ForwardTrace<Real>& tr, ClsCache<Real>& c) {
  const Dims dm(params.config);
  const Real* w = params.values.data();
  const auto& L = params.layout;
  c.t.resize(dm.d);
  linear(1, dm.d, dm.d, tr.hidden.data(), w + L.cls_w1, w + L.cls_b1, c.t.data());
  for (auto& x : c.t) x = std::tanh(x);
  Real logits[2];
  linear(1, dm.d, 2, c.t.data(), w + L.cls_w2, w + L.cls_b2, logits);
  ks::softmax_rows(1, 2, logits);
  c.p = {logits[0], logits[1]};
}

}  // namespace

template <class Real>
std::array<Real, 2> classify(const ModelParams<Real>& params, const ForwardTrace<Real>& tr) {
  ClsCache<Real> c;
  cls_forward(params, tr, c);
  return c.p;
}

template <class Real>
std::vector<Real> mlm_probs(const ModelParams<Real>& params, const ForwardTrace<Real>& tr,
                            std::span<const std::int32_t> positions, bool use_aug) {
  if (use_aug && tr.aug_hidden.empty()) throw InvariantError("mlm_probs: trace has no augmentation output");
  MlmCache<Real> c;
  mlm_forward(params, use_aug ? tr.aug_hidden : tr.hidden, trace_rows(positions, tr), c);
  mlm_normalize(c, static_cast<std::size_t>(params.config.vocab_size));
  return std::move(c.probs);
}

double loss_coarse(std::span<const std::array<double, 2>> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw InvariantError("loss_coarse: size mismatch");
  if (probs.empty()) throw InvariantError("loss_coarse: empty batch");
  double loss = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvariantError("loss_coarse: labels must be 0 or 1");
    loss -= std::log(probs[i][static_cast<std::size_t>(labels[i])]);
  }
  return loss / static_cast<double>(probs.size());
}

double loss_fine(std::span<const double> mlm_dist, TermId mlm_target,
                 std::span<const double> cam_dists, std::span<const TermId> cam_targets,
                 std::size_t vocab_size, double cam_weight) {
  const std::size_t n = cam_targets.size();
  if (n == 0) throw InvariantError("loss_fine: no augmented positions");
  if (mlm_dist.size() != vocab_size || cam_dists.size() != n * vocab_size) {
    throw InvariantError("loss_fine: distribution shape mismatch");
  }
  double cam = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cam -= std::log(cam_dists[i * vocab_size + static_cast<std::size_t>(cam_targets[i])]);
  }
  return -std::log(mlm_dist[static_cast<std::size_t>(mlm_target)]) + cam_weight * cam / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Per-sample gradients

template <class Real>
double coarse_sample_grad(const ModelParams<Real>& params, const datasets::MaskedSample& s,
                          RunMode mode, std::type_identity_t<Real> scale,
                          std::type_identity_t<Real>* grad) {
  if (!s.label) throw InvariantError("coarse sample without a label");
  const auto tr = encode(params, std::span<const TermId>(s.tokens), mode);
  ClsCache<Real> c;
  cls_forward(params, tr, c);
  const auto y = static_cast<std::size_t>(*s.label);
  const double loss = -std::log(static_cast<double>(c.p[y]));
  if (!grad) return loss;

  const Dims dm(params.config);
  const Real* w = params.values.data();
  const auto& L = params.layout;
  Real dl[2] = {c.p[0] * scale, c.p[1] * scale};
  dl[y] -= scale;
  std::vector<Real> dt(dm.d);
  linear_backward(1, dm.d, 2, c.t.data(), w + L.cls_w2, dl, grad + L.cls_w2, grad + L.cls_b2, dt.data(), false);
  for (std::size_t j = 0; j < dm.d; ++j) dt[j] *= Real(1) - c.t[j] * c.t[j];
  std::vector<Real> dhidden(tr.rows * dm.d, Real(0));
  linear_backward(1, dm.d, dm.d, tr.hidden.data(), w + L.cls_w1, dt.data(), grad + L.cls_w1,
                  grad + L.cls_b1, dhidden.data(), false);
  encoder_backward(params, tr, std::move(dhidden), grad);
  return loss;
}

template <class Real>
double fine_sample_grad(const ModelParams<Real>& params, const FinePair& pair, double cam_weight,
                        RunMode mode, std::type_identity_t<Real> scale,
                          std::type_identity_t<Real>* grad) {
  const Dims dm(params.config);
  if (pair.mlm.mask_positions.size() != 1) throw InvariantError("MLM view must have exactly one target");

  auto tr = encode(params, std::span<const TermId>(pair.mlm.tokens), mode);
  MlmCache<Real> mc;
  mlm_forward(params, tr.hidden, trace_rows(std::span<const std::int32_t>(pair.mlm.mask_positions), tr), mc);
  std::vector<Real> dlogits;
  double loss = mlm_loss(mc, std::span<const TermId>(pair.mlm.targets), dm.v, 1.0, scale,
                         grad ? &dlogits : nullptr);
  if (grad) {
    std::vector<Real> dhidden(tr.rows * dm.d, Real(0));
    mlm_backward(params, mc, dlogits, grad, dhidden);
    encoder_backward(params, tr, std::move(dhidden), grad);
  }
  if (cam_weight == 0.0) return loss;

  const std::size_t n = pair.cam.mask_positions.size();
  if (n == 0) throw InvariantError("CAM view has no masked positions");
  auto ct = encode(params, std::span<const TermId>(pair.cam.tokens), mode);
  aug_encode(params, ct, mode);
  MlmCache<Real> ac;
  mlm_forward(params, ct.aug_hidden, trace_rows(std::span<const std::int32_t>(pair.cam.mask_positions), ct), ac);
  loss += mlm_loss(ac, std::span<const TermId>(pair.cam.targets), dm.v,
                   cam_weight / static_cast<double>(n), scale, grad ? &dlogits : nullptr);
  if (grad) {
    std::vector<Real> daug(ct.rows * dm.d, Real(0));
    mlm_backward(params, ac, dlogits, grad, daug);
    encoder_backward(params, ct, aug_backward(params, ct, std::move(daug), grad), grad);
  }
  return loss;
}

template <class Real>
double batch_gradient(const ModelParams<Real>& params, const Batch& batch, std::vector<Real>& grad,
                      bool parallel) {
  const std::size_t b = batch.size();
  if (b == 0) throw InvariantError("empty batch");
  const std::size_t n = params.values.size();
  grad.assign(n, Real(0));
  const Real scale = Real(1) / static_cast<Real>(b);
  const Rng base(batch.dropout_seed);

  auto one = [&](std::size_t i, Real* g) {
    Rng rng = base.fork(i);
    const RunMode mode{batch.train, &rng};
    if (batch.kind == LossKind::coarse) return coarse_sample_grad(params, *batch.coarse[i], mode, scale, g);
    return fine_sample_grad(params, *batch.fine[i], batch.cam_weight, mode, scale, g);
  };

  std::vector<double> losses(b);
  if (parallel && kernels::threads() > 1) {
    std::vector<std::vector<Real>> bufs(b);
    kernels::parallel_for(b, [&](std::size_t k) {
      bufs[k].assign(n, Real(0));
      losses[k] = one(k, bufs[k].data());
    });
    const auto nn = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < nn; ++j) {
      Real acc = 0;
      for (std::size_t k = 0; k < b; ++k) acc += bufs[k][static_cast<std::size_t>(j)];
      grad[static_cast<std::size_t>(j)] = acc;
    }
  } else {
    std::vector<Real> buf(n);
    for (std::size_t k = 0; k < b; ++k) {
      std::fill(buf.begin(), buf.end(), Real(0));
      losses[k] = one(k, buf.data());
      for (std::size_t j = 0; j < n; ++j) grad[j] += buf[j];
    }
  }
  double total = 0;
  for (double l : losses) total += l;
  return total / static_cast<double>(b);
}

template <class Real>
double backward_step(ModelParams<Real>& params, const Batch& batch, AdamState& st,
                     const AdamOptions& opt, bool parallel) {
  std::vector<Real> grad;
  const double loss = batch_gradient(params, batch, grad, parallel);
  if (!std::isfinite(loss)) throw InvariantError("non-finite training loss");
  for (Real g : grad) {
    if (!std::isfinite(static_cast<double>(g))) throw InvariantError("non-finite gradient");
  }
  const std::size_t n = params.values.size();
  if (st.m.size() != n) {
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
    st.step = 0;
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(grad[i]);
    st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g;
    st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g * g;
    const double update = opt.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + opt.eps);
    params.values[i] = static_cast<Real>(static_cast<double>(params.values[i]) - update);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Inference helpers

template <class Real>
double seed_log_mass(const ModelParams<Real>& params, std::span<const TermId> tokens,
                     std::span<const std::int32_t> positions, std::span<const TermId> seeds) {
  if (positions.empty()) throw InvariantError("seed_log_mass: no positions");
  if (seeds.empty()) throw InvariantError("seed_log_mass: no seeds");
  const auto tr = encode(params, tokens);
  MlmCache<Real> c;
  mlm_forward(params, tr.hidden, trace_rows(positions, tr), c);
  const auto v = static_cast<std::size_t>(params.config.vocab_size);
  double total = 0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Real* logits = c.probs.data() + i * v;
    double mx = -INFINITY;
    for (auto s : seeds) mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(s)]));
    double sum = 0;
    for (auto s : seeds) sum += std::exp(static_cast<double>(logits[static_cast<std::size_t>(s)]) - mx);
    total += mx + std::log(sum) - c.log_norm[i];
  }
  return total / static_cast<double>(positions.size());
}

template <class Real>
double coarse_probability(const ModelParams<Real>& params, std::span<const TermId> tokens) {
  return static_cast<double>(classify(params, encode(params, tokens))[1]);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[8] = {'I', 'M', 'P', 'C', 'K', 'P', 'T', '\0'};
}

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                     const json& meta) {
  const json header = {{"config", params.config.to_json()},
                       {"meta", meta},
                       {"n_params", params.values.size()}};
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const auto hlen = static_cast<std::uint32_t>(h.size());
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const auto bytes = params.values.size() * sizeof(float);
  out.write(reinterpret_cast<const char*>(params.values.data()), static_cast<std::streamsize>(bytes));
  const std::uint64_t sum = fnv1a(params.values.data(), bytes);
  out.write(reinterpret_cast<const char*>(&sum), 8);
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, 8) != 0) {
    throw InputError(where + ": not a checkpoint file");
  }
  std::uint32_t version = 0, hlen = 0;
  std::memcpy(&version, blob.data() + 8, 4);
  std::memcpy(&hlen, blob.data() + 12, 4);
  if (version != kCheckpointVersion) {
    throw InputError(where + ": format version " + std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));
  }
  if (blob.size() < 16 + static_cast<std::size_t>(hlen)) throw InputError(where + ": truncated header");
  json header;
  try {
    header = json::parse(blob.substr(16, hlen));
  } catch (const json::exception& e) {
    throw InputError(where + ": corrupted header");
  }
  const auto config = ModelConfig::from_json(header.at("config"));
  if (expected && !(config == *expected)) throw InputError(where + ": model config mismatch");
  ParamLayout layout(config);
  const auto n = header.at("n_params").get<std::size_t>();
  if (n != layout.size()) throw InputError(where + ": parameter count does not match the config");
  const std::size_t body = 16 + hlen;
  const std::size_t bytes = n * sizeof(float);
  if (blob.size() != body + bytes + 8) throw InputError(where + ": truncated or oversized body");
  Checkpoint ck{ModelParams<float>{config, std::move(layout), std::vector<float>(n)},
                header.value("meta", json::object())};
  std::memcpy(ck.params.values.data(), blob.data() + body, bytes);
  std::uint64_t sum = 0;
  std::memcpy(&sum, blob.data() + body + bytes, 8);
  if (sum != fnv1a(ck.params.values.data(), bytes)) throw InputError(where + ": checksum mismatch");
  return ck;
}

// ---------------------------------------------------------------------------

#define IMPROMPTU_LM_INSTANTIATE(Real)                                                              \
  template struct ModelParams<Real>;                                                                \
  template ForwardTrace<Real> encode(const ModelParams<Real>&, std::span<const TermId>, RunMode);   \
  template void aug_encode(const ModelParams<Real>&, ForwardTrace<Real>&, RunMode);                 \
  template std::array<Real, 2> classify(const ModelParams<Real>&, const ForwardTrace<Real>&);       \
  template std::vector<Real> mlm_probs(const ModelParams<Real>&, const ForwardTrace<Real>&,         \
                                       std::span<const std::int32_t>, bool);                        \
  template double coarse_sample_grad(const ModelParams<Real>&, const datasets::MaskedSample&,       \
                                     RunMode, Real, Real*);                                         \
  template double fine_sample_grad(const ModelParams<Real>&, const FinePair&, double, RunMode,      \
                                   Real, Real*);                                                    \
  template double batch_gradient(const ModelParams<Real>&, const Batch&, std::vector<Real>&, bool); \
  template double backward_step(ModelParams<Real>&, const Batch&, AdamState&, const AdamOptions&,   \
                                bool);                                                              \
  template double seed_log_mass(const ModelParams<Real>&, std::span<const TermId>,                  \
                                std::span<const std::int32_t>, std::span<const TermId>);            \
  template double coarse_probability(const ModelParams<Real>&, std::span<const TermId>);

IMPROMPTU_LM_INSTANTIATE(float)
IMPROMPTU_LM_INSTANTIATE(double)

#undef IMPROMPTU_LM_INSTANTIATE

}  // namespace impromptu::lm
