#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace impromptu::corpus {

enum class Split { target, dedup, white, synthetic };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

using SentenceId = std::int64_t;
using TermId = std::int32_t;

/// A tokenized sentence before vocabulary assignment.
struct TextSentence {
  SentenceId id = 0;
  std::vector<std::string> tokens;
  Split split = Split::white;
  std::string raw;
};

struct TextCorpus {
  std::vector<TextSentence> sentences;
  std::size_t skipped_malformed = 0;

  std::size_t token_count() const;
};

struct SpecialIds {
  TermId mask = -1;
  TermId pad = -1;
  TermId unknown = -1;
  TermId cls = -1;
};

/// Term <-> id bijection. Regular terms take ids [0, n_terms) ordered by
/// (frequency desc, term asc); the special ids follow.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> terms, std::vector<std::int64_t> counts,
             std::int64_t min_count, std::int64_t unknown_count = 0);

  std::size_t n_terms() const { return terms_.size(); }
  /// Total id space including specials.
  std::size_t size() const { return terms_.size() + 4; }
  const SpecialIds& specials() const { return specials_; }
  std::int64_t min_count() const { return min_count_; }

  bool is_special(TermId id) const { return id >= static_cast<TermId>(terms_.size()); }
  std::optional<TermId> find(std::string_view term) const;
  /// Known term id, or the unknown id.
  TermId lookup(std::string_view term) const;
  /// Throws InputError for a term not in the vocabulary.
  TermId require(std::string_view term) const;
  const std::string& term(TermId id) const;
  std::int64_t count(TermId id) const;
  const std::vector<std::string>& terms() const { return terms_; }

  void write_jsonl(std::ostream& out) const;
  static Vocabulary read_jsonl(std::istream& in);

 private:
  std::vector<std::string> terms_;
  std::vector<std::int64_t> counts_;
  std::unordered_map<std::string, TermId> index_;
  std::int64_t min_count_ = 1;
  std::int64_t unknown_count_ = 0;
  SpecialIds specials_;
  std::vector<std::string> special_names_;
};

struct Sentence {
  SentenceId id = 0;
  std::vector<TermId> tokens;
  Split split = Split::white;
  std::string raw;
};

/// Sentences encoded under one shared vocabulary; ids strictly increasing.
struct Corpus {
  std::vector<Sentence> sentences;
  std::shared_ptr<const Vocabulary> vocab;

  std::size_t token_count() const;
  /// Position of the sentence with this id, via binary search.
  const Sentence* find(SentenceId id) const;
  std::vector<std::string> decode(const Sentence& s) const;
  TextCorpus to_text() const;
};

/// Lowercase; split on whitespace and punctuation. Hyphens between word
/// characters and underscores (merged phrases) stay inside the token.
std::vector<std::string> tokenize(std::string_view text);

std::string detokenize(const std::vector<std::string>& tokens);

/// One sentence per non-empty line. Lines that are not valid UTF-8 are
/// skipped and counted in `skipped_malformed`.
TextCorpus ingest(std::istream& source, Split split, SentenceId first_id = 0);

/// Reads the corpus JSON-lines envelope {"id","text","split"[,"raw"]}.
TextCorpus read_text_jsonl(std::istream& in);
void write_jsonl(std::ostream& out, const TextCorpus& corpus);
void write_jsonl(std::ostream& out, const Corpus& corpus);

/// One left-to-right merging pass: (a, b) -> "a_b" when
/// (count(ab) - delta) * N / (count(a) * count(b)) > threshold.
TextCorpus merge_phrases(const TextCorpus& corpus, double delta = 5.0, double threshold = 10.0);

double phrase_score(std::int64_t count_ab, std::int64_t count_a, std::int64_t count_b,
                    std::int64_t n_tokens, double delta);

Vocabulary build_vocab(const TextCorpus& corpus, std::int64_t min_count = 5);

/// Unknown terms are replaced by the unknown id, never dropped.
Corpus encode(const TextCorpus& corpus, std::shared_ptr<const Vocabulary> vocab);

bool valid_utf8(std::string_view s);

}  // namespace impromptu::corpus
