#pragma once

#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "impromptu/corpus.hpp"
#include "impromptu/embed.hpp"

namespace impromptu::index {

struct Posting {
  corpus::SentenceId sid = 0;
  std::int32_t pos = 0;
  auto operator<=>(const Posting&) const = default;
};

/// term id -> postings sorted by (sentence id, position).
class InvertedIndex {
 public:
  InvertedIndex() = default;
  explicit InvertedIndex(std::shared_ptr<const corpus::Vocabulary> vocab);

  const std::vector<Posting>& postings(corpus::TermId id) const;
  /// Empty list for a term outside the vocabulary.
  const std::vector<Posting>& postings(std::string_view term) const;
  std::size_t total_postings() const;
  const corpus::Vocabulary& vocab() const { return *vocab_; }

  void write_jsonl(std::ostream& out) const;
  static InvertedIndex read_jsonl(std::istream& in, std::shared_ptr<const corpus::Vocabulary> vocab);

 private:
  friend InvertedIndex build_inverted_index(const corpus::Corpus&);
  std::shared_ptr<const corpus::Vocabulary> vocab_;
  std::vector<std::vector<Posting>> lists_;
};

/// Postings for every non-special term.
InvertedIndex build_inverted_index(const corpus::Corpus& corpus);

/// Frontier expansion: round 1 = nearest(seed, k); round r = union of
/// nearest(t, k) over the terms first discovered in round r-1. Returns the
/// deduplicated union over all rounds, seed excluded.
std::set<std::string> expand_seeds(const embed::EmbeddingMatrix& matrix, const std::string& seed,
                                   std::size_t k = 50, int rounds = 3);

std::set<std::string> lexicon_intersect(const std::set<std::string>& expanded,
                                        const std::set<std::string>& lexicon);

std::set<corpus::SentenceId> postings_sentences(const InvertedIndex& index,
                                                const std::vector<std::string>& terms);

/// Drops every sentence containing any listed term; survivors keep their ids.
corpus::Corpus remove_sentences(const corpus::Corpus& corpus, const std::vector<std::string>& terms);

/// One term or underscore-joined phrase per line; blank lines and '#' comments skipped.
std::vector<std::string> read_term_list(std::istream& in);

}  // namespace impromptu::index
