#include "impromptu/index.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "impromptu/common.hpp"

namespace impromptu::index {

using nlohmann::json;

namespace {
const std::vector<Posting> kEmpty;
}

InvertedIndex::InvertedIndex(std::shared_ptr<const corpus::Vocabulary> vocab)
    : vocab_(std::move(vocab)), lists_(vocab_->n_terms()) {}

const std::vector<Posting>& InvertedIndex::postings(corpus::TermId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= lists_.size()) return kEmpty;
  return lists_[static_cast<std::size_t>(id)];
}

const std::vector<Posting>& InvertedIndex::postings(std::string_view term) const {
  auto id = vocab_->find(term);
  return id ? postings(*id) : kEmpty;
}

std::size_t InvertedIndex::total_postings() const {
  std::size_t n = 0;
  for (const auto& l : lists_) n += l.size();
  return n;
}

void InvertedIndex::write_jsonl(std::ostream& out) const {
  for (std::size_t t = 0; t < lists_.size(); ++t) {
    if (lists_[t].empty()) continue;
    json sites = json::array();
    for (const auto& p : lists_[t]) sites.push_back({p.sid, p.pos});
    out << json{{"term", vocab_->term(static_cast<corpus::TermId>(t))}, {"postings", sites}}.dump()
        << '\n';
  }
}

InvertedIndex InvertedIndex::read_jsonl(std::istream& in,
                                        std::shared_ptr<const corpus::Vocabulary> vocab) {
  InvertedIndex idx(std::move(vocab));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = json::parse(line);
    const auto id = idx.vocab_->require(row.at("term").get<std::string>());
    auto& list = idx.lists_[static_cast<std::size_t>(id)];
    for (const auto& p : row.at("postings")) {
      list.push_back({p.at(0).get<corpus::SentenceId>(), p.at(1).get<std::int32_t>()});
    }
    if (!std::is_sorted(list.begin(), list.end())) throw InputError("index postings out of order");
  }
  return idx;
}

InvertedIndex build_inverted_index(const corpus::Corpus& c) {
  InvertedIndex idx(c.vocab);
  for (const auto& s : c.sentences) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const auto t = s.tokens[i];
      if (c.vocab->is_special(t)) continue;
      idx.lists_[static_cast<std::size_t>(t)].push_back({s.id, static_cast<std::int32_t>(i)});
    }
  }
  return idx;
}

std::set<std::string> expand_seeds(const embed::EmbeddingMatrix& matrix, const std::string& seed,
                                   std::size_t k, int rounds) {
  if (k < 1 || rounds < 1) throw InputError("expand_seeds: k and rounds must be positive");
  matrix.row_of(seed);
  std::set<std::string> found;
  std::vector<std::string> frontier{seed};
  for (int r = 0; r < rounds && !frontier.empty(); ++r) {
    std::set<std::string> next;
    for (const auto& q : frontier) {
      for (auto& nb : embed::nearest(matrix, q, k)) {
        if (nb.term == seed) continue;
        if (found.insert(nb.term).second) next.insert(nb.term);
      }
    }
    frontier.assign(next.begin(), next.end());
  }
  return found;
}

std::set<std::string> lexicon_intersect(const std::set<std::string>& expanded,
                                        const std::set<std::string>& lexicon) {
  std::set<std::string> out;
  std::set_intersection(expanded.begin(), expanded.end(), lexicon.begin(), lexicon.end(),
                        std::inserter(out, out.end()));
  return out;
}

std::set<corpus::SentenceId> postings_sentences(const InvertedIndex& index,
                                                const std::vector<std::string>& terms) {
  std::set<corpus::SentenceId> out;
  for (const auto& t : terms) {
    for (const auto& p : index.postings(t)) out.insert(p.sid);
  }
  return out;
}

corpus::Corpus remove_sentences(const corpus::Corpus& c, const std::vector<std::string>& terms) {
  std::set<corpus::TermId> ids;
  for (const auto& t : terms) {
    if (auto id = c.vocab->find(t)) ids.insert(*id);
  }
  corpus::Corpus out;
  out.vocab = c.vocab;
  for (const auto& s : c.sentences) {
    const bool hit = std::any_of(s.tokens.begin(), s.tokens.end(),
                                 [&](corpus::TermId t) { return ids.count(t) > 0; });
    if (!hit) out.sentences.push_back(s);
  }
  return out;
}

std::vector<std::string> read_term_list(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
      line.pop_back();
    }
    std::size_t b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    std::string term = line.substr(b);
    // a multi-word entry is the merged phrase form
    for (auto& ch : term) {
      if (ch == ' ') ch = '_';
      else if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    }
    out.push_back(term);
  }
  return out;
}

}  // namespace impromptu::index
