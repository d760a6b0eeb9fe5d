#include "impromptu/datasets.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

namespace impromptu::datasets {

using nlohmann::json;
using corpus::SentenceId;
using corpus::TermId;

std::vector<TermId> MaskedSample::restored() const {
  auto out = tokens;
  for (std::size_t i = 0; i < mask_positions.size(); ++i) {
    out[static_cast<std::size_t>(mask_positions[i])] = targets[i];
  }
  return out;
}

MaskedSample mask_positions(const corpus::Sentence& s, std::vector<std::int32_t> positions,
                            TermId mask_id, std::optional<int> label) {
  MaskedSample m;
  m.sid = s.id;
  m.tokens = s.tokens;
  m.label = label;
  for (auto p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= s.tokens.size()) {
      throw InvariantError("mask position out of range");
    }
    m.targets.push_back(s.tokens[static_cast<std::size_t>(p)]);
    m.tokens[static_cast<std::size_t>(p)] = mask_id;
  }
  m.mask_positions = std::move(positions);
  return m;
}

void write_samples_jsonl(std::ostream& out, const std::vector<MaskedSample>& samples,
                         const corpus::Corpus& c) {
  for (const auto& m : samples) {
    const auto* s = c.find(m.sid);
    if (!s) throw InvariantError("sample refers to unknown sentence " + std::to_string(m.sid));
    std::vector<std::string> words;
    for (auto t : m.tokens) words.push_back(c.vocab->term(t));
    json targets = json::array();
    for (auto t : m.targets) targets.push_back(c.vocab->term(t));
    json row = {{"id", m.sid},
                {"text", corpus::detokenize(words)},
                {"split", std::string(corpus::split_name(s->split))},
                {"mask_positions", m.mask_positions},
                {"targets", targets}};
    row["label"] = m.label ? json(*m.label) : json(nullptr);
    out << row.dump() << '\n';
  }
}

std::vector<MaskedSample> read_samples_jsonl(std::istream& in, const corpus::Corpus& c) {
  std::vector<MaskedSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = json::parse(line);
    const auto sid = row.at("id").get<SentenceId>();
    const auto* s = c.find(sid);
    if (!s) throw InputError("sample refers to unknown sentence " + std::to_string(sid));
    auto positions = row.at("mask_positions").get<std::vector<std::int32_t>>();
    std::optional<int> label;
    if (row.contains("label") && !row.at("label").is_null()) label = row.at("label").get<int>();
    auto m = mask_positions(*s, positions, c.vocab->specials().mask, label);
    const auto& targets = row.at("targets");
    if (targets.size() != m.targets.size()) throw InputError("sample target count mismatch");
    for (std::size_t i = 0; i < m.targets.size(); ++i) {
      if (c.vocab->term(m.targets[i]) != targets[i].get<std::string>()) {
        throw InputError("sample target disagrees with corpus at sentence " + std::to_string(sid));
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::set<std::string> GoldLabels::planted_terms() const {
  std::set<std::string> out;
  for (const auto& t : terms) out.insert(t.term);
  return out;
}

std::size_t GoldLabels::total_sites() const {
  std::size_t n = 0;
  for (const auto& t : terms) n += t.sites.size();
  return n;
}

bool GoldLabels::is_site(SentenceId sid, std::int32_t pos) const {
  for (const auto& t : terms) {
    if (std::binary_search(t.sites.begin(), t.sites.end(), index::Posting{sid, pos})) return true;
  }
  return false;
}

void GoldLabels::write_jsonl(std::ostream& out) const {
  for (const auto& t : terms) {
    json sites = json::array();
    for (const auto& p : t.sites) sites.push_back({p.sid, p.pos});
    out << json{{"term", t.term}, {"seed", t.seed}, {"sites", sites}}.dump() << '\n';
  }
}

GoldLabels GoldLabels::read_jsonl(std::istream& in) {
  GoldLabels g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = json::parse(line);
    Term t{row.at("term").get<std::string>(), row.value("seed", std::string()), {}};
    for (const auto& p : row.at("sites")) {
      t.sites.push_back({p.at(0).get<SentenceId>(), p.at(1).get<std::int32_t>()});
    }
    std::sort(t.sites.begin(), t.sites.end());
    g.terms.push_back(std::move(t));
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

std::string mint_term(Rng& rng, const std::set<std::string>& taken) {
  static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                  "s", "t", "v", "z", "br", "gr", "kr", "tr", "st", "pl"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::string t;
    const int syllables = 2 + static_cast<int>(rng.uniform_index(2));
    for (int i = 0; i < syllables; ++i) {
      t += kOnsets[rng.uniform_index(std::size(kOnsets))];
      t += kVowels[rng.uniform_index(std::size(kVowels))];
    }
    t += "x";
    if (!taken.count(t)) return t;
  }
  throw InvariantError("could not mint a fresh term");
}

}  // namespace

std::pair<corpus::Corpus, GoldLabels> plant_impromptu(const corpus::Corpus& c,
                                                      const std::vector<std::string>& seeds,
                                                      int n_terms_per_seed, int occ_per_term,
                                                      Rng& rng) {
  if (n_terms_per_seed < 0 || occ_per_term < 0) {
    throw InputError("plant_impromptu: counts must be non-negative");
  }
  GoldLabels gold;
  if (n_terms_per_seed == 0 || occ_per_term == 0) return {c, gold};

  auto text = c.to_text();
  std::set<std::string> taken(c.vocab->terms().begin(), c.vocab->terms().end());
  std::set<std::size_t> used_sentences;

  for (const auto& seed : seeds) {
    // sentence indices containing the seed, with the first position of it
    std::vector<std::pair<std::size_t, std::int32_t>> sites;
    for (std::size_t i = 0; i < text.sentences.size(); ++i) {
      if (used_sentences.count(i)) continue;
      const auto& toks = text.sentences[i].tokens;
      auto it = std::find(toks.begin(), toks.end(), seed);
      if (it != toks.end()) sites.emplace_back(i, static_cast<std::int32_t>(it - toks.begin()));
    }
    const auto needed = static_cast<std::size_t>(n_terms_per_seed) * static_cast<std::size_t>(occ_per_term);
    if (sites.size() < needed) {
      throw InputError("seed '" + seed + "' has " + std::to_string(sites.size()) +
                       " usable sentences; planting needs " + std::to_string(needed));
    }
    rng.shuffle(sites);
    for (int t = 0; t < n_terms_per_seed; ++t) {
      const auto term = mint_term(rng, taken);
      taken.insert(term);
      GoldLabels::Term g{term, seed, {}};
      for (int o = 0; o < occ_per_term; ++o) {
        const auto [idx, pos] = sites[static_cast<std::size_t>(t * occ_per_term + o)];
        auto& sent = text.sentences[idx];
        sent.tokens[static_cast<std::size_t>(pos)] = term;
        sent.split = corpus::Split::target;
        used_sentences.insert(idx);
        g.sites.push_back({sent.id, pos});
      }
      std::sort(g.sites.begin(), g.sites.end());
      gold.terms.push_back(std::move(g));
    }
  }
  auto vocab = std::make_shared<corpus::Vocabulary>(corpus::build_vocab(text, c.vocab->min_count()));
  for (const auto& g : gold.terms) {
    if (!vocab->find(g.term)) {
      throw InputError("planted term frequency " + std::to_string(occ_per_term) +
                       " is below the vocabulary min_count " + std::to_string(c.vocab->min_count()));
    }
  }
  return {corpus::encode(text, vocab), gold};
}

std::set<std::string> coarse_candidates(const embed::EmbeddingMatrix& matrix,
                                        const std::vector<std::string>& seeds, std::size_t top_n) {
  std::set<std::string> out;
  for (const auto& s : seeds) {
    for (auto& nb : embed::nearest(matrix, s, top_n)) out.insert(nb.term);
  }
  return out;
}

std::set<std::string> fine_candidates(const embed::EmbeddingMatrix& matrix,
                                      const std::vector<std::string>& seeds, std::size_t top_n) {
  std::set<std::string> out;
  for (auto& nb : embed::nearest(matrix, embed::mean_vector(matrix, seeds), top_n)) {
    out.insert(nb.term);
  }
  return out;
}

std::vector<MaskedSample> samples_for_terms(const corpus::Corpus& c, const index::InvertedIndex& idx,
                                            const std::set<std::string>& terms) {
  std::vector<index::Posting> sites;
  for (const auto& t : terms) {
    const auto& p = idx.postings(t);
    sites.insert(sites.end(), p.begin(), p.end());
  }
  std::sort(sites.begin(), sites.end());
  std::vector<MaskedSample> out;
  out.reserve(sites.size());
  for (const auto& p : sites) {
    out.push_back(mask_positions(*c.find(p.sid), {p.pos}, c.vocab->specials().mask));
  }
  return out;
}

CoarseDataset build_coarse_dataset(const corpus::Corpus& c, const embed::EmbeddingMatrix& matrix,
                                   const std::vector<std::string>& seeds, std::size_t top_n,
                                   Rng& rng) {
  if (top_n < 1) throw InputError("build_coarse_dataset: top_n must be at least 1");
  const auto candidates = coarse_candidates(matrix, seeds, top_n);
  const auto idx = index::build_inverted_index(c);
  auto positives = samples_for_terms(c, idx, candidates);
  for (auto& p : positives) p.label = 1;

  const auto with_candidate = index::postings_sentences(idx, {candidates.begin(), candidates.end()});
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < c.sentences.size(); ++i) {
    if (!with_candidate.count(c.sentences[i].id)) pool.push_back(i);
  }
  if (pool.size() < positives.size()) {
    throw InputError("build_coarse_dataset: " + std::to_string(positives.size()) +
                     " positives but only " + std::to_string(pool.size()) +
                     " candidate-free sentences for negatives");
  }
  rng.shuffle(pool);
  std::vector<MaskedSample> all = std::move(positives);
  const std::size_t n_pos = all.size();
  for (std::size_t i = 0; i < n_pos; ++i) {
    const auto& s = c.sentences[pool[i]];
    const auto pos = static_cast<std::int32_t>(rng.uniform_index(s.tokens.size()));
    all.push_back(mask_positions(s, {pos}, c.vocab->specials().mask, 0));
  }
  rng.shuffle(all);
  const std::size_t n_train = all.size() * 4 / 5;
  CoarseDataset out;
  out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  return out;
}

std::vector<MaskedSample> build_fine_corpus(const corpus::Corpus& c,
                                            const embed::EmbeddingMatrix& matrix,
                                            const std::vector<std::string>& seeds,
                                            std::size_t top_n) {
  if (top_n < 1) throw InputError("build_fine_corpus: top_n must be at least 1");
  const auto idx = index::build_inverted_index(c);
  return samples_for_terms(c, idx, fine_candidates(matrix, seeds, top_n));
}

}  // namespace impromptu::datasets
