#pragma once

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "impromptu/common.hpp"
#include "impromptu/corpus.hpp"
#include "impromptu/embed.hpp"

namespace impromptu::testing {

/// One sentence per element, vocabulary built with `min_count`.
inline corpus::Corpus make_corpus(const std::vector<std::string>& lines, std::int64_t min_count = 1,
                                  corpus::Split split = corpus::Split::white) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  std::istringstream in(text);
  const auto t = corpus::ingest(in, split);
  auto vocab = std::make_shared<const corpus::Vocabulary>(corpus::build_vocab(t, min_count));
  return corpus::encode(t, vocab);
}

/// Matrix with entries drawn from {-2..2}, so exact cosine ties are common.
inline embed::EmbeddingMatrix coarse_grid_matrix(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<std::string> terms;
  std::vector<float> data;
  for (std::size_t i = 0; i < n; ++i) {
    terms.push_back("t" + std::to_string(i));
    bool nonzero = false;
    for (std::size_t j = 0; j < dim; ++j) {
      const auto v = static_cast<float>(static_cast<int>(rng.uniform_index(5)) - 2);
      nonzero |= v != 0.0f;
      data.push_back(v);
    }
    if (!nonzero) data.back() = 1.0f;
  }
  return embed::EmbeddingMatrix(dim, std::move(terms), std::move(data));
}

}  // namespace impromptu::testing
