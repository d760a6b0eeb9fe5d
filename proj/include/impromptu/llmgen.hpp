#pragma once

#include <chrono>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "impromptu/common.hpp"
#include "impromptu/corpus.hpp"
#include "impromptu/index.hpp"

namespace impromptu::llmgen {

enum class Label { euphemistic, benign };

struct DevSample {
  std::vector<std::string> text;
  std::int32_t mask_start = 0;
  std::int32_t mask_len = 1;
  Label label = Label::benign;
  std::string seed;
  /// The inserted euphemism (positives) or the marked ordinary word (negatives).
  std::string term;

  std::string joined() const;
  bool operator==(const DevSample&) const = default;
};

/// Request for one benign sentence matched to a positive sample.
struct BenignRequest {
  std::string seed;
  std::string euphemism;
  std::vector<std::string> positive_text;
  std::size_t index = 0;  // position of the pair in the dev set
  int attempt = 0;
};

/// A text generator. Benign sentences come back as plain text with the
/// ordinary counterpart word wrapped in square brackets.
class GenerationProvider {
 public:
  virtual ~GenerationProvider() = default;
  virtual std::string kind() const = 0;
  virtual std::vector<std::string> euphemisms(const std::string& seed, std::size_t n) = 0;
  virtual std::string benign_sentence(const BenignRequest& request) = 0;
};

/// Splits a numbered list "1. Coke 2. Blow 3. Nose candy" into items. Item
/// numbers must run 1, 2, 3, ... so "18. 7.5s" parses as "7.5s".
std::vector<std::string> parse_numbered_list(const std::string& text);

/// Reads a provider file. Lines "Seed | 1. a 2. b ..." give euphemism lists
/// (seeds match case-insensitively, "_" and " " alike); lines
/// "benign: text with [word]" form the benign sentence pool; '#' starts a comment.
class FileProvider : public GenerationProvider {
 public:
  explicit FileProvider(const std::filesystem::path& path);
  FileProvider(std::istream& in, std::string origin);
  std::string kind() const override { return "file"; }
  std::vector<std::string> euphemisms(const std::string& seed, std::size_t n) override;
  std::string benign_sentence(const BenignRequest& request) override;

  const std::map<std::string, std::vector<std::string>>& lists() const { return lists_; }
  std::size_t benign_pool_size() const { return benign_.size(); }

 private:
  void parse(std::istream& in);
  std::string origin_;
  std::map<std::string, std::vector<std::string>> lists_;
  std::vector<std::string> benign_;
};

/// An ordinary sentence with the word to mark.
struct MarkedSentence {
  std::vector<std::string> tokens;
  std::size_t mark = 0;
};

/// Offline generator: pseudo-word euphemisms derived from (rng seed, seed
/// term) and benign sentences drawn from a pool of marked ordinary sentences,
/// or from built-in frames when no pool is given.
class TemplateProvider : public GenerationProvider {
 public:
  explicit TemplateProvider(std::uint64_t rng_seed, std::vector<MarkedSentence> benign_pool = {});
  std::string kind() const override { return "template"; }
  std::vector<std::string> euphemisms(const std::string& seed, std::size_t n) override;
  std::string benign_sentence(const BenignRequest& request) override;

 private:
  std::uint64_t rng_seed_;
  std::vector<MarkedSentence> pool_;
};

struct ExternalConfig {
  std::string url;
  std::string api_key;
  std::chrono::seconds timeout{30};
  int max_attempts = 3;

  /// IMPROMPTU_PROVIDER_URL, IMPROMPTU_PROVIDER_KEY_VAR (name of the variable
  /// holding the key), IMPROMPTU_PROVIDER_TIMEOUT (seconds).
  static ExternalConfig from_env();
};

/// HTTP client: POST {"prompt": str, "n": int} -> {"choices": [str]}.
class ExternalProvider : public GenerationProvider {
 public:
  explicit ExternalProvider(ExternalConfig config);
  std::string kind() const override { return "external"; }
  std::vector<std::string> euphemisms(const std::string& seed, std::size_t n) override;
  std::string benign_sentence(const BenignRequest& request) override;

  std::vector<std::string> complete(const std::string& prompt, int n);

 private:
  ExternalConfig config_;
};

std::string euphemism_prompt(const std::string& seed, std::size_t n);
std::string benign_prompt(const BenignRequest& request);

/// Lowercased, whitespace-normalized term; empty if nothing usable remains.
std::string normalize_term(const std::string& term);

/// n_per_seed euphemisms per seed, normalized and de-duplicated, minus any
/// term in `exclude`. Seeds keep their input spelling as keys.
std::map<std::string, std::vector<std::string>> generate_euphemism_candidates(
    GenerationProvider& provider, const std::vector<std::string>& seeds, std::size_t n_per_seed,
    const std::set<std::string>& exclude = {});

/// Parses "text with [marked words]" into a benign sample; nullopt if there is
/// not exactly one non-empty bracketed span.
std::optional<DevSample> parse_marked(const std::string& text, const std::string& seed);

struct DevSetOptions {
  std::size_t per_seed_sentences = 3;
  std::size_t euphemisms_per_seed = 20;
  int max_attempts = 3;
  std::uint64_t seed = 42;
};

struct DevSet {
  std::vector<DevSample> samples;
  std::map<std::string, std::vector<std::string>> euphemisms;
};

/// Positives: per_seed_sentences corpus sentences per seed (via the index)
/// with the seed replaced by a generated euphemism. Negatives: one provider
/// benign sentence per positive. Rejected samples are regenerated up to
/// max_attempts times, then ProviderError.
DevSet build_dev_set(GenerationProvider& provider, const std::vector<std::string>& seeds,
                     const corpus::Corpus& corpus, const index::InvertedIndex& index,
                     const DevSetOptions& options, const std::set<std::string>& exclude = {});

struct Rejection {
  std::size_t index = 0;
  std::string reason;
};

struct Validation {
  std::vector<DevSample> accepted;
  std::vector<Rejection> rejected;
};

/// Lexical checks. `euphemisms` defaults to the terms of the positive samples.
Validation validate_dev_set(const std::vector<DevSample>& samples,
                            const std::set<std::string>* euphemisms = nullptr);

void write_dev_jsonl(std::ostream& out, const std::vector<DevSample>& samples);
std::vector<DevSample> read_dev_jsonl(std::istream& in);

}  // namespace impromptu::llmgen
