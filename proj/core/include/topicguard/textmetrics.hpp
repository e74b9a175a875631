#pragma once

// Text similarity primitives: tokenizer, token-level ROUGE-L and cosine.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "topicguard/llm_client.hpp"

namespace topicguard {

// Lowercases (full Unicode case mapping), splits on Unicode White_Space,
// strips leading/trailing punctuation (general category P*) from each
// token and drops tokens that end up empty.
std::vector<std::string> tokenize(std::string_view text);

// Longest common subsequence length over token sequences.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

struct RougeL {
  double precision = 0.0;  // LCS / |candidate|, candidate = second argument
  double recall = 0.0;     // LCS / |reference|, reference = first argument
  double f = 0.0;          // balanced F-measure (beta = 1)
};

RougeL rouge_l(std::span<const std::string> reference, std::span<const std::string> candidate);
RougeL rouge_l(std::string_view reference, std::string_view candidate);

// ROUGE-L F-measure in [0, 1]; 0 when either side has no tokens.
double rouge_l_f(std::string_view a, std::string_view b);

// dot(u, v) / (|u| |v|), clamped to [-1, 1]. Throws PreconditionError on a
// dimension mismatch or an all-zero vector.
double cosine(std::span<const double> u, std::span<const double> v);
double cosine(const EmbeddingVector& u, const EmbeddingVector& v);

struct SimilarityVerdict {
  double rouge_l_f = 0.0;
  double cosine = 0.0;
  bool flagged = false;
};

struct PairVerdict {
  std::size_t i = 0;
  std::size_t j = 0;  // i < j
  SimilarityVerdict verdict;
};

// All n(n-1)/2 pairs in row-major (i, j) order; flagged when either score
// reaches its threshold.
std::vector<PairVerdict> pairwise_flags(std::span<const std::string> texts,
                                        std::span<const EmbeddingVector> embeddings,
                                        double rouge_threshold, double cosine_threshold,
                                        std::size_t max_parallel = 1);

// Yes/no judgement on the last non-empty line of a model reply, matched as
// standalone tokens. nullopt when the line holds neither or both.
std::optional<bool> final_yes_no(std::string_view reply);

}  // namespace topicguard
