#pragma once

#include <cstdint>
#include <vector>

#include "synthehr/grammar.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

struct CorruptionConfig {
  double p_mask = 0.15;
  double p_delete = 0.10;
  double p_infill = 0.2;  // chance that a run of codes gets one infill span
  double infill_lambda = 3.0;
  bool enable_span_shuffle = true;
  bool enable_modality_permute = true;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
};

struct CorruptionTrace {
  std::size_t n_masked = 0;
  std::size_t n_deleted = 0;
  std::size_t n_infilled_spans = 0;
  std::vector<int> infill_draws;  // raw Poisson draws, before truncation
};

// Applied per visit in this order: modality-block permutation, shuffle of the
// codes inside each block, infill, deletion, masking. Only code tokens are
// touched; every other token keeps its place relative to its block.
TokenSequence corrupt(const Vocabulary& vocab, const TokenSequence& tokens, const CorruptionConfig& config,
                      Rng& rng, CorruptionTrace* trace = nullptr);

struct CorruptionStats {
  std::size_t n_masked = 0;
  std::size_t n_deleted = 0;
  std::size_t n_infilled_spans = 0;
  bool operator==(const CorruptionStats&) const = default;
};

// Counts by aligning each (visit, modality) block of `after` with the same block
// of `before`. Within a block with r removed codes and m new <mask> tokens:
// r == m means m masks, m == 0 means r deletions, otherwise m - 1 masks plus a
// single infilled span.
CorruptionStats corruption_stats(const Vocabulary& vocab, const TokenSequence& before,
                                 const TokenSequence& after);

}  // namespace synthehr
