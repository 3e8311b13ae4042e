#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "synthehr/records.hpp"

namespace synthehr {

// Generative process with known conditionals, used as ground truth by tests.
//
// Modality 0 is the primary modality. Each visit draws its primary codes
// i.i.d. from a row of the first-order kernel selected by the previous visit's
// anchor (its first primary code); the first visit uses the initial row chosen
// by the class of categorical field 0. Every other modality k draws its codes
// i.i.d. from coupling[k][anchor]. Duplicate draws collapse, keeping the first
// occurrence, so the anchor is always listed first. Numerical baseline
// features are standard normal noise.
struct OracleSpec {
  std::vector<std::string> modality_names;
  std::vector<std::vector<std::string>> vocabularies;
  std::vector<int> categorical_cardinalities;
  int numerical_features = 0;
  std::vector<std::vector<double>> initial;                   // [class][primary code]
  std::vector<std::vector<double>> transition;                // [primary][primary]
  std::vector<std::vector<std::vector<double>>> coupling;     // [k][primary][code of k]; k = 0 unused
  std::vector<std::vector<double>> draw_counts;               // [k][n] = P(n draws)
  std::vector<double> visit_counts;                           // [T - 1] = P(T visits)
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
  Schema schema() const;
};

Corpus generate_oracle_corpus(const OracleSpec& spec, int n_patients);

// Class of categorical field 0 encoded in the baseline (0 when there are no
// categorical fields).
int oracle_class(const OracleSpec& spec, const BaselineFeatures& baseline);

// Distribution of the anchor (first primary code) of the visit after `history`.
std::vector<double> oracle_anchor_distribution(const OracleSpec& spec, const BaselineFeatures& baseline,
                                               std::span<const Visit> history);

// Probability that `code` of modality k appears in the visit following
// `history`. When `current` is given its anchor is treated as observed, which
// answers cross-modal queries for k > 0.
double oracle_prob(const OracleSpec& spec, const BaselineFeatures& baseline, std::span<const Visit> history,
                   int k, int code, const Visit* current = nullptr);

// Presets.

// One primary modality "dx"; each code has exactly one successor.
OracleSpec chain_oracle(int vocab_size, std::uint64_t seed);

// One primary modality "dx" with a uniform next-event distribution.
OracleSpec uniform_oracle(int vocab_size, std::uint64_t seed);

struct CoupledOracleOptions {
  int n_dx = 20;
  int n_lab = 20;
  double coupling = 0.9;      // mass a dx anchor places on its paired lab code
  int branching = 4;          // successors per dx code in the transition kernel
  double class_effect = 0.0;  // extra mass a class puts on its half of the dx codes
  int extra_lab_draws = 0;    // lab draws beyond the first, each with prob 1/2
  std::vector<double> visit_counts = {0.0, 0.4, 0.4, 0.2};
  std::uint64_t seed = 0;
};

// Modalities "dx" and "lab" with a dx -> lab coupling and one binary
// categorical field "group" that can shift the initial dx distribution.
OracleSpec coupled_oracle(const CoupledOracleOptions& options);

}  // namespace synthehr
