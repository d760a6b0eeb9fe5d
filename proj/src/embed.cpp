#include "impromptu/embed.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <omp.h>

#include "impromptu/common.hpp"
#include "impromptu/kernels.hpp"

namespace impromptu::embed {

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::vector<std::string> terms,
                                 std::vector<float> data)
    : dim_(dim), terms_(std::move(terms)), data_(std::move(data)) {
  if (dim_ == 0) throw InvariantError("embedding dim must be positive");
  if (data_.size() != dim_ * terms_.size()) throw InvariantError("embedding data size mismatch");
  norms_.resize(terms_.size());
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    const float* v = data_.data() + i * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) s += static_cast<double>(v[j]) * v[j];
    norms_[i] = std::sqrt(s);
    rows_.emplace(terms_[i], i);
  }
}

std::span<const float> EmbeddingMatrix::vector(std::size_t row) const {
  return {data_.data() + row * dim_, dim_};
}

std::size_t EmbeddingMatrix::row_of(std::string_view term) const {
  auto it = rows_.find(std::string(term));
  if (it == rows_.end()) throw InputError("term '" + std::string(term) + "' has no embedding");
  return it->second;
}

bool EmbeddingMatrix::contains(std::string_view term) const {
  return rows_.count(std::string(term)) > 0;
}

void EmbeddingMatrix::write_text(std::ostream& out) const {
  out << "dim " << dim_ << " vocab " << terms_.size() << '\n';
  char buf[64];
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    out << terms_[i];
    const float* v = data_.data() + i * dim_;
    for (std::size_t j = 0; j < dim_; ++j) {
      auto res = std::to_chars(buf, buf + sizeof buf, v[j]);
      out << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

EmbeddingMatrix EmbeddingMatrix::read_text(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("embedding file is empty");
  std::istringstream header(line);
  std::string kw_dim, kw_vocab;
  std::size_t dim = 0, n = 0;
  if (!(header >> kw_dim >> dim >> kw_vocab >> n) || kw_dim != "dim" || kw_vocab != "vocab") {
    throw InputError("bad embedding header: '" + line + "'");
  }
  std::vector<std::string> terms;
  std::vector<float> data;
  terms.reserve(n);
  data.reserve(n * dim);
  while (terms.size() < n && std::getline(in, line)) {
    std::istringstream row(line);
    std::string term;
    row >> term;
    terms.push_back(term);
    for (std::size_t j = 0; j < dim; ++j) {
      std::string tok;
      if (!(row >> tok)) throw InputError("embedding row for '" + term + "' is short");
      float v = 0.0f;
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc{}) throw InputError("bad float '" + tok + "' in embedding file");
      data.push_back(v);
    }
  }
  if (terms.size() != n) throw InputError("embedding file has fewer rows than its header");
  return EmbeddingMatrix(dim, std::move(terms), std::move(data));
}

// ---------------------------------------------------------------------------

namespace {

struct SgnsState {
  std::size_t dim;
  std::vector<float> input;
  std::vector<float> output;
};

void train_pair(SgnsState& st, std::size_t center, std::size_t context,
                const std::vector<std::int32_t>& table, int negatives, float alpha, Rng& rng,
                std::vector<float>& grad) {
  const std::size_t dim = st.dim;
  float* in = st.input.data() + center * dim;
  std::fill(grad.begin(), grad.end(), 0.0f);
  for (int d = 0; d <= negatives; ++d) {
    std::size_t target;
    float label;
    if (d == 0) {
      target = context;
      label = 1.0f;
    } else {
      target = static_cast<std::size_t>(table[rng.uniform_index(table.size())]);
      if (target == context) continue;
      label = 0.0f;
    }
    float* out = st.output.data() + target * dim;
    float f = 0.0f;
    for (std::size_t j = 0; j < dim; ++j) f += in[j] * out[j];
    float sig;
    if (f > 6.0f) {
      sig = 1.0f;
    } else if (f < -6.0f) {
      sig = 0.0f;
    } else {
      sig = 1.0f / (1.0f + std::exp(-f));
    }
    const float g = (label - sig) * alpha;
    for (std::size_t j = 0; j < dim; ++j) grad[j] += g * out[j];
    for (std::size_t j = 0; j < dim; ++j) out[j] += g * in[j];
  }
  for (std::size_t j = 0; j < dim; ++j) in[j] += grad[j];
}

}  // namespace

EmbeddingMatrix train_embeddings(const corpus::Corpus& corpus, const TrainOptions& o) {
  if (o.dim <= 0 || o.window <= 0 || o.negatives <= 0 || o.epochs <= 0) {
    throw InputError("train_embeddings: dim, window, negatives and epochs must be positive");
  }
  const auto& vocab = *corpus.vocab;
  const std::size_t n_terms = vocab.n_terms();
  if (n_terms == 0 || corpus.sentences.empty()) throw InputError("nothing to train");

  std::vector<std::int64_t> counts(n_terms, 0);
  std::int64_t train_words = 0;
  for (const auto& s : corpus.sentences) {
    for (auto t : s.tokens) {
      if (!vocab.is_special(t)) {
        ++counts[static_cast<std::size_t>(t)];
        ++train_words;
      }
    }
  }
  if (train_words == 0) throw InputError("nothing to train");

  // unigram^0.75 noise table
  constexpr std::size_t kTableSize = 1 << 20;
  std::vector<std::int32_t> table(kTableSize);
  {
    double total = 0.0;
    for (auto c : counts) total += std::pow(static_cast<double>(c), 0.75);
    std::size_t i = 0;
    double cum = std::pow(static_cast<double>(counts[0]), 0.75) / total;
    for (std::size_t a = 0; a < kTableSize; ++a) {
      table[a] = static_cast<std::int32_t>(i);
      if (static_cast<double>(a + 1) / kTableSize > cum && i + 1 < n_terms) {
        ++i;
        cum += std::pow(static_cast<double>(counts[i]), 0.75) / total;
      }
    }
  }

  SgnsState st{static_cast<std::size_t>(o.dim), {}, {}};
  st.input.resize(n_terms * st.dim);
  st.output.assign(n_terms * st.dim, 0.0f);
  Rng init(o.seed);
  for (auto& v : st.input) v = static_cast<float>((init.uniform() - 0.5) / o.dim);

  const double total_steps = static_cast<double>(train_words) * o.epochs + 1.0;
  const double sample_thresh = o.subsample * static_cast<double>(train_words);
  const auto n_sent = static_cast<std::ptrdiff_t>(corpus.sentences.size());
  const int workers = std::max(1, o.workers);

  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    // Each worker owns a contiguous shard; the shard's progress drives its lr.
#pragma omp parallel num_threads(workers)
    {
      const int w = omp_get_thread_num();
      const int nw = omp_get_num_threads();
      const std::ptrdiff_t begin = n_sent * w / nw;
      const std::ptrdiff_t end = n_sent * (w + 1) / nw;
      Rng rng = Rng(o.seed).fork(static_cast<std::uint64_t>(epoch) * 1000003u + static_cast<std::uint64_t>(w) + 1);
      std::vector<float> grad(st.dim);
      std::vector<std::size_t> kept;
      double processed = static_cast<double>(train_words) * epoch;
      // estimate of words already processed by earlier shards in this epoch
      for (std::ptrdiff_t s = 0; s < begin; ++s) processed += static_cast<double>(corpus.sentences[static_cast<std::size_t>(s)].tokens.size());
      for (std::ptrdiff_t s = begin; s < end; ++s) {
        const auto& sent = corpus.sentences[static_cast<std::size_t>(s)];
        kept.clear();
        for (auto t : sent.tokens) {
          if (vocab.is_special(t)) continue;
          const auto id = static_cast<std::size_t>(t);
          if (o.subsample > 0) {
            const double f = static_cast<double>(counts[id]);
            const double keep = (std::sqrt(f / sample_thresh) + 1.0) * sample_thresh / f;
            if (keep < rng.uniform()) continue;
          }
          kept.push_back(id);
        }
        processed += static_cast<double>(sent.tokens.size());
        const float alpha =
            static_cast<float>(o.lr * std::max(1e-4, 1.0 - processed / total_steps));
        for (std::size_t i = 0; i < kept.size(); ++i) {
          const auto b = static_cast<std::size_t>(rng.uniform_index(static_cast<std::uint64_t>(o.window)));
          const std::size_t span = static_cast<std::size_t>(o.window) - b;
          const std::size_t lo = i >= span ? i - span : 0;
          const std::size_t hi = std::min(kept.size() - 1, i + span);
          for (std::size_t c = lo; c <= hi; ++c) {
            if (c == i) continue;
            // the context word's input vector predicts the center word
            train_pair(st, kept[c], kept[i], table, o.negatives, alpha, rng, grad);
          }
        }
      }
    }
  }
  std::vector<std::string> terms(vocab.terms().begin(), vocab.terms().end());
  return EmbeddingMatrix(st.dim, std::move(terms), std::move(st.input));
}

double cosine(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw InvariantError("cosine: dimension mismatch");
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
    uv += static_cast<double>(u[i]) * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw InvariantError("undefined similarity: zero vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::vector<Neighbor> nearest(const EmbeddingMatrix& m, const Query& query, std::size_t k,
                              const std::set<std::string>& exclude) {
  if (k < 1) throw InputError("nearest: k must be at least 1");
  std::vector<float> qvec;
  std::size_t self = m.size();
  if (const auto* term = std::get_if<std::string>(&query)) {
    self = m.row_of(*term);
    const auto v = m.vector(self);
    qvec.assign(v.begin(), v.end());
  } else {
    qvec = std::get<std::vector<float>>(query);
    if (qvec.size() != m.dim()) throw InputError("nearest: query dimension mismatch");
  }
  double qn = 0.0;
  for (float x : qvec) qn += static_cast<double>(x) * x;
  qn = std::sqrt(qn);
  if (qn == 0.0) throw InvariantError("undefined similarity: zero query vector");

  std::vector<double> scores(m.size());
  kernels::parallel::cosine_scan(qvec, qn, m.data(), m.norms(), m.dim(), scores);

  std::vector<std::size_t> rows;
  rows.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (i == self || scores[i] < -1.5 || exclude.count(m.terms()[i])) continue;
    rows.push_back(i);
  }
  const std::size_t take = std::min(k, rows.size());
  auto cmp = [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  };
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end(), cmp);
  std::vector<Neighbor> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({m.terms()[rows[i]], scores[rows[i]]});
  return out;
}

std::vector<float> mean_vector(const EmbeddingMatrix& m, const std::vector<std::string>& terms) {
  if (terms.empty()) throw InputError("mean_vector: empty term list");
  std::vector<double> acc(m.dim(), 0.0);
  for (const auto& t : terms) {
    const auto v = m.vector(m.row_of(t));
    for (std::size_t j = 0; j < m.dim(); ++j) acc[j] += v[j];
  }
  std::vector<float> out(m.dim());
  for (std::size_t j = 0; j < m.dim(); ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(terms.size()));
  return out;
}

}  // namespace impromptu::embed
