#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synthehr/model.hpp"

namespace synthehr {

struct NllSum {
  double nll = 0.0;
  int count = 0;
};

// Teacher-forces `codes` of modality k after the layout's decoder prefix
// (opening <k> first if the prefix does not already end with it) and sums
// −log p(code), with p renormalized over modality k's code tokens. lpl and mpl
// differ only in the layout they pass here.
NllSum modality_nll(const LanguageModel& model, const PromptLayout& layout, const BaselineFeatures& baseline, int k,
                    std::span<const int> codes);

// exp(−mean log p(target_i)) over the answer slot of `layout`. With a support
// range [begin, end) the probabilities are renormalized over it.
// Throws Error(kEmptySequence).
double ppl(const LanguageModel& model, const PromptLayout& layout, const BaselineFeatures& baseline,
           std::span<const TokenId> target, std::optional<std::pair<TokenId, TokenId>> support = std::nullopt);

// Longitudinal perplexity of modality k: total-token normalization over the
// visits where k is present. Throws Error(kNoEventsOfModality).
double lpl(const LanguageModel& model, const PatientRecord& record, int k);
// Cross-modal perplexity of modality k: per-visit mean NLL, averaged over the
// visits where k is present. Throws Error(kNoEventsOfModality).
double mpl(const LanguageModel& model, const PatientRecord& record, int k);
// Per visit, the mean of the per-modality NLLs over present modalities;
// exp of the mean over visits.
double mpl_combined(const LanguageModel& model, const PatientRecord& record);
// Full-vocabulary perplexity of every longitudinal answer (visit blocks in
// schema order, </v>, and the continuation token).
double record_ppl(const LanguageModel& model, const PatientRecord& record);

double median(std::vector<double> values);
// Half-width of the central 95% interval of bootstrap medians.
double bootstrap_median_ci95(std::span<const double> values, int resamples, std::uint64_t seed);

struct PatientPerplexity {
  std::string id;
  std::vector<std::optional<double>> lpl;  // per modality; empty when absent
  std::vector<std::optional<double>> mpl;
  std::optional<double> mpl_combined;
};

struct ModalityAggregate {
  std::string modality;
  std::size_t n = 0;  // patients with the modality
  double lpl_median = 0.0;
  double lpl_ci95 = 0.0;
  double mpl_median = 0.0;
  double mpl_ci95 = 0.0;
};

struct PerplexityReport {
  std::string label;
  std::vector<PatientPerplexity> patients;
  std::vector<ModalityAggregate> aggregate;
  double mpl_combined_median = 0.0;
  double mpl_combined_ci95 = 0.0;
};

struct EvaluationOptions {
  int bootstrap_resamples = 1000;
  std::uint64_t seed = 0;
  std::string label = "model";
};

PerplexityReport evaluate_corpus(const LanguageModel& model, const Corpus& corpus, const EvaluationOptions& options = {});

// Aggregate table plus raw per-patient values, as JSON.
void write_report(const PerplexityReport& report, const std::filesystem::path& path);
std::string report_json(const PerplexityReport& report);

}  // namespace synthehr
