#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "impromptu/corpus.hpp"

namespace impromptu::embed {

/// Input (center-word) vectors, one per regular vocabulary term.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t dim, std::vector<std::string> terms, std::vector<float> data);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return terms_.size(); }
  const std::vector<std::string>& terms() const { return terms_; }
  std::span<const float> vector(std::size_t row) const;
  double norm(std::size_t row) const { return norms_[row]; }
  const float* data() const { return data_.data(); }
  std::span<const double> norms() const { return norms_; }
  /// Row index of a term; throws InputError when absent.
  std::size_t row_of(std::string_view term) const;
  bool contains(std::string_view term) const;

  /// Header "dim N vocab V", then "term f1 ... fN" per line.
  void write_text(std::ostream& out) const;
  static EmbeddingMatrix read_text(std::istream& in);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> terms_;
  std::vector<float> data_;
  std::vector<double> norms_;
  std::unordered_map<std::string, std::size_t> rows_;
};

struct TrainOptions {
  int dim = 100;
  int window = 5;
  int negatives = 5;
  int epochs = 5;
  double lr = 0.025;
  double subsample = 1e-3;
  std::uint64_t seed = 1;
  /// Hogwild workers; only workers == 1 is bit-reproducible.
  int workers = 1;
};

/// Skip-gram with negative sampling (unigram^0.75 noise, linear lr decay).
EmbeddingMatrix train_embeddings(const corpus::Corpus& corpus, const TrainOptions& options);

/// dot(u,v) / (|u||v|); throws InvariantError on a zero vector or size mismatch.
double cosine(std::span<const float> u, std::span<const float> v);

struct Neighbor {
  std::string term;
  double score = 0.0;
  bool operator==(const Neighbor&) const = default;
};

using Query = std::variant<std::string, std::vector<float>>;

/// Top-k by cosine, ties by row (= vocabulary id) ascending. The query term
/// and excluded terms are never returned.
std::vector<Neighbor> nearest(const EmbeddingMatrix& matrix, const Query& query, std::size_t k,
                              const std::set<std::string>& exclude = {});

std::vector<float> mean_vector(const EmbeddingMatrix& matrix, const std::vector<std::string>& terms);

}  // namespace impromptu::embed
