#include "impromptu/corpus.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>

#include <nlohmann/json.hpp>

#include "impromptu/common.hpp"

namespace impromptu::corpus {

using nlohmann::json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::target: return "target";
    case Split::dedup: return "dedup";
    case Split::white: return "white";
    case Split::synthetic: return "synthetic";
  }
  return "white";
}

Split parse_split(std::string_view name) {
  if (name == "target") return Split::target;
  if (name == "dedup") return Split::dedup;
  if (name == "white") return Split::white;
  if (name == "synthetic") return Split::synthetic;
  throw InputError("unknown split tag '" + std::string(name) + "'");
}

std::size_t TextCorpus::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sentences) n += s.tokens.size();
  return n;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> terms, std::vector<std::int64_t> counts,
                       std::int64_t min_count, std::int64_t unknown_count)
    : terms_(std::move(terms)),
      counts_(std::move(counts)),
      min_count_(min_count),
      unknown_count_(unknown_count) {
  if (terms_.size() != counts_.size()) {
    throw InvariantError("vocabulary terms/counts size mismatch");
  }
  index_.reserve(terms_.size());
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    if (!index_.emplace(terms_[i], static_cast<TermId>(i)).second) {
      throw InvariantError("duplicate vocabulary term '" + terms_[i] + "'");
    }
  }
  const auto n = static_cast<TermId>(terms_.size());
  specials_ = SpecialIds{n, n + 1, n + 2, n + 3};
  special_names_ = {"[MASK]", "[PAD]", "[UNK]", "[CLS]"};
}

std::optional<TermId> Vocabulary::find(std::string_view term) const {
  auto it = index_.find(std::string(term));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TermId Vocabulary::lookup(std::string_view term) const {
  return find(term).value_or(specials_.unknown);
}

TermId Vocabulary::require(std::string_view term) const {
  auto id = find(term);
  if (!id) throw InputError("term '" + std::string(term) + "' is not in the vocabulary");
  return *id;
}

const std::string& Vocabulary::term(TermId id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < terms_.size()) return terms_[id];
  const auto k = static_cast<std::size_t>(id) - terms_.size();
  if (id >= 0 && k < special_names_.size()) return special_names_[k];
  throw InvariantError("term id " + std::to_string(id) + " out of range");
}

std::int64_t Vocabulary::count(TermId id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < counts_.size()) return counts_[id];
  if (id == specials_.unknown) return unknown_count_;
  return 0;
}

void Vocabulary::write_jsonl(std::ostream& out) const {
  json header = {{"specials",
                  {{"mask", specials_.mask},
                   {"pad", specials_.pad},
                   {"unk", specials_.unknown},
                   {"cls", specials_.cls}}},
                 {"n_terms", terms_.size()},
                 {"min_count", min_count_},
                 {"unk_count", unknown_count_}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    out << json{{"term", terms_[i]}, {"id", i}, {"count", counts_[i]}}.dump() << '\n';
  }
}

Vocabulary Vocabulary::read_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("vocabulary file is empty");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw InputError(std::string("bad vocabulary header: ") + e.what());
  }
  const auto n = header.at("n_terms").get<std::size_t>();
  std::vector<std::string> terms(n);
  std::vector<std::int64_t> counts(n, 0);
  std::vector<bool> seen(n, false);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    const auto id = row.at("id").get<std::size_t>();
    if (id >= n || seen[id]) throw InputError("bad vocabulary id " + std::to_string(id));
    seen[id] = true;
    terms[id] = row.at("term").get<std::string>();
    counts[id] = row.at("count").get<std::int64_t>();
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw InputError("vocabulary file is missing ids");
  }
  Vocabulary v(std::move(terms), std::move(counts), header.value("min_count", 1),
               header.value("unk_count", 0));
  const auto& sp = header.at("specials");
  if (sp.at("mask").get<TermId>() != v.specials_.mask ||
      sp.at("unk").get<TermId>() != v.specials_.unknown ||
      sp.at("pad").get<TermId>() != v.specials_.pad ||
      sp.at("cls").get<TermId>() != v.specials_.cls) {
    throw InputError("vocabulary special ids do not follow the term block");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Corpus

std::size_t Corpus::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sentences) n += s.tokens.size();
  return n;
}

const Sentence* Corpus::find(SentenceId id) const {
  auto it = std::lower_bound(sentences.begin(), sentences.end(), id,
                             [](const Sentence& s, SentenceId v) { return s.id < v; });
  if (it == sentences.end() || it->id != id) return nullptr;
  return &*it;
}

std::vector<std::string> Corpus::decode(const Sentence& s) const {
  std::vector<std::string> out;
  out.reserve(s.tokens.size());
  for (auto t : s.tokens) out.push_back(vocab->term(t));
  return out;
}

TextCorpus Corpus::to_text() const {
  TextCorpus out;
  out.sentences.reserve(sentences.size());
  for (const auto& s : sentences) {
    out.sentences.push_back(TextSentence{s.id, decode(s), s.split, s.raw});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization

namespace {

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
         c == '_' || c >= 0x80;
}

char lower(unsigned char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  const std::size_t n = text.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_word_byte(c)) {
      cur.push_back(lower(c));
    } else if (c == '-' && !cur.empty() && i + 1 < n &&
               is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
      cur.push_back('-');
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // overlong forms, surrogates, out of range
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
      return false;
    }
    i += len;
  }
  return true;
}

TextCorpus ingest(std::istream& source, Split split, SentenceId first_id) {
  TextCorpus out;
  SentenceId next = first_id;
  std::string line;
  while (std::getline(source, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) {
      ++out.skipped_malformed;
      continue;
    }
    auto tokens = tokenize(line);
    if (tokens.empty()) continue;
    out.sentences.push_back(TextSentence{next++, std::move(tokens), split, line});
  }
  return out;
}

TextCorpus read_text_jsonl(std::istream& in) {
  TextCorpus out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto text = row.at("text").get<std::string>();
    auto tokens = tokenize(text);
    if (tokens.empty()) continue;
    TextSentence s;
    s.id = row.at("id").get<SentenceId>();
    s.tokens = std::move(tokens);
    s.split = parse_split(row.value("split", std::string("white")));
    s.raw = row.contains("raw") ? row.at("raw").get<std::string>() : text;
    if (!out.sentences.empty() && s.id <= out.sentences.back().id) {
      throw InputError("corpus sentence ids must be strictly increasing (line " +
                       std::to_string(lineno) + ")");
    }
    out.sentences.push_back(std::move(s));
  }
  return out;
}

namespace {

void write_row(std::ostream& out, SentenceId id, const std::string& text, Split split,
               const std::string& raw) {
  json row = {{"id", id}, {"text", text}, {"split", std::string(split_name(split))}};
  if (raw != text) row["raw"] = raw;
  out << row.dump() << '\n';
}

}  // namespace

void write_jsonl(std::ostream& out, const TextCorpus& corpus) {
  for (const auto& s : corpus.sentences) write_row(out, s.id, detokenize(s.tokens), s.split, s.raw);
}

void write_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& s : corpus.sentences) {
    write_row(out, s.id, detokenize(corpus.decode(s)), s.split, s.raw);
  }
}

// ---------------------------------------------------------------------------
// Phrases and vocabulary

double phrase_score(std::int64_t count_ab, std::int64_t count_a, std::int64_t count_b,
                    std::int64_t n_tokens, double delta) {
  if (count_a <= 0 || count_b <= 0) return -1.0;
  return (static_cast<double>(count_ab) - delta) * static_cast<double>(n_tokens) /
         (static_cast<double>(count_a) * static_cast<double>(count_b));
}

TextCorpus merge_phrases(const TextCorpus& corpus, double delta, double threshold) {
  if (delta < 0) throw InputError("merge_phrases: delta must be non-negative");
  std::unordered_map<std::string, std::int64_t> unigram;
  std::map<std::pair<std::string, std::string>, std::int64_t> bigram;
  std::int64_t n_tokens = 0;
  for (const auto& s : corpus.sentences) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      ++unigram[s.tokens[i]];
      ++n_tokens;
      if (i + 1 < s.tokens.size()) ++bigram[{s.tokens[i], s.tokens[i + 1]}];
    }
  }
  auto mergeable = [&](const std::string& a, const std::string& b) {
    if (a.find('_') != std::string::npos || b.find('_') != std::string::npos) return false;
    auto it = bigram.find({a, b});
    if (it == bigram.end()) return false;
    return phrase_score(it->second, unigram[a], unigram[b], n_tokens, delta) > threshold;
  };

  TextCorpus out;
  out.skipped_malformed = corpus.skipped_malformed;
  out.sentences.reserve(corpus.sentences.size());
  for (const auto& s : corpus.sentences) {
    TextSentence m{s.id, {}, s.split, s.raw};
    m.tokens.reserve(s.tokens.size());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i + 1 < s.tokens.size() && mergeable(s.tokens[i], s.tokens[i + 1])) {
        m.tokens.push_back(s.tokens[i] + "_" + s.tokens[i + 1]);
        ++i;
      } else {
        m.tokens.push_back(s.tokens[i]);
      }
    }
    out.sentences.push_back(std::move(m));
  }
  return out;
}

Vocabulary build_vocab(const TextCorpus& corpus, std::int64_t min_count) {
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& s : corpus.sentences) {
    for (const auto& t : s.tokens) ++freq[t];
  }
  std::vector<std::pair<std::string, std::int64_t>> kept;
  std::int64_t unknown = 0;
  for (auto& [term, c] : freq) {
    if (c >= min_count) {
      kept.emplace_back(term, c);
    } else {
      unknown += c;
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> terms;
  std::vector<std::int64_t> counts;
  terms.reserve(kept.size());
  counts.reserve(kept.size());
  for (auto& [t, c] : kept) {
    terms.push_back(t);
    counts.push_back(c);
  }
  return Vocabulary(std::move(terms), std::move(counts), min_count, unknown);
}

Corpus encode(const TextCorpus& corpus, std::shared_ptr<const Vocabulary> vocab) {
  Corpus out;
  out.vocab = std::move(vocab);
  out.sentences.reserve(corpus.sentences.size());
  SentenceId last = 0;
  bool first = true;
  for (const auto& s : corpus.sentences) {
    if (s.tokens.empty()) throw InvariantError("sentence " + std::to_string(s.id) + " is empty");
    if (!first && s.id <= last) throw InvariantError("sentence ids must be strictly increasing");
    first = false;
    last = s.id;
    Sentence e{s.id, {}, s.split, s.raw};
    e.tokens.reserve(s.tokens.size());
    for (const auto& t : s.tokens) e.tokens.push_back(out.vocab->lookup(t));
    out.sentences.push_back(std::move(e));
  }
  return out;
}

}  // namespace impromptu::corpus
