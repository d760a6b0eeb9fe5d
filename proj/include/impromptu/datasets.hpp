#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "impromptu/common.hpp"
#include "impromptu/corpus.hpp"
#include "impromptu/embed.hpp"
#include "impromptu/index.hpp"

namespace impromptu::datasets {

/// A sentence with some positions replaced by the mask id.
struct MaskedSample {
  corpus::SentenceId sid = 0;
  std::vector<corpus::TermId> tokens;
  std::vector<std::int32_t> mask_positions;
  std::vector<corpus::TermId> targets;
  std::optional<int> label;

  /// Tokens with the gold targets put back.
  std::vector<corpus::TermId> restored() const;
  bool operator==(const MaskedSample&) const = default;
};

MaskedSample mask_positions(const corpus::Sentence& s, std::vector<std::int32_t> positions,
                            corpus::TermId mask_id, std::optional<int> label = std::nullopt);

void write_samples_jsonl(std::ostream& out, const std::vector<MaskedSample>& samples,
                         const corpus::Corpus& corpus);
/// Rebuilds token ids from the corpus sentence; throws InputError if a
/// recorded target disagrees with the corpus.
std::vector<MaskedSample> read_samples_jsonl(std::istream& in, const corpus::Corpus& corpus);

struct GoldLabels {
  struct Term {
    std::string term;
    std::string seed;
    std::vector<index::Posting> sites;
  };
  std::vector<Term> terms;

  std::set<std::string> planted_terms() const;
  std::size_t total_sites() const;
  bool is_site(corpus::SentenceId sid, std::int32_t pos) const;

  void write_jsonl(std::ostream& out) const;
  static GoldLabels read_jsonl(std::istream& in);
};

/// Mints `n_terms_per_seed` new terms per seed and substitutes each into
/// `occ_per_term` distinct seed sentences (one seed occurrence each). The
/// vocabulary is rebuilt with the original min_count.
std::pair<corpus::Corpus, GoldLabels> plant_impromptu(const corpus::Corpus& corpus,
                                                      const std::vector<std::string>& seeds,
                                                      int n_terms_per_seed, int occ_per_term,
                                                      Rng& rng);

/// Union of each seed's top_n neighbours (a seed may appear as another seed's neighbour).
std::set<std::string> coarse_candidates(const embed::EmbeddingMatrix& matrix,
                                        const std::vector<std::string>& seeds, std::size_t top_n);

/// top_n neighbours of the mean seed vector; seeds are eligible.
std::set<std::string> fine_candidates(const embed::EmbeddingMatrix& matrix,
                                      const std::vector<std::string>& seeds, std::size_t top_n);

struct CoarseDataset {
  std::vector<MaskedSample> train;
  std::vector<MaskedSample> dev;
};

/// Positives: every candidate occurrence masked (label 1). Negatives: the
/// same number of distinct candidate-free sentences with one random token
/// masked (label 0). Shuffled, then split 80/20.
CoarseDataset build_coarse_dataset(const corpus::Corpus& corpus, const embed::EmbeddingMatrix& matrix,
                                   const std::vector<std::string>& seeds, std::size_t top_n, Rng& rng);

/// One sample per candidate occurrence, ordered by (sentence id, position).
std::vector<MaskedSample> build_fine_corpus(const corpus::Corpus& corpus,
                                            const embed::EmbeddingMatrix& matrix,
                                            const std::vector<std::string>& seeds,
                                            std::size_t top_n);

std::vector<MaskedSample> samples_for_terms(const corpus::Corpus& corpus,
                                            const index::InvertedIndex& index,
                                            const std::set<std::string>& terms);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct SynthOptions {
  std::size_t n_sentences = 5000;
  double drug_fraction = 0.3;
  double food_fraction = 0.15;
  std::vector<std::string> seeds{"cocaine", "heroin", "ketamine", "mescaline", "oxycodone"};
  std::uint64_t seed = 7;
};

/// Template-grammar corpus: drug-topic sentences (split dedup) around each
/// seed, food sentences sharing the same frames, and unrelated benign topics
/// (split white). Seeds must be among the built-in drug topics.
corpus::TextCorpus generate_base_corpus(const SynthOptions& options);

std::vector<std::string> builtin_drug_topics();

}  // namespace impromptu::datasets
