#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "synthehr/model.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

enum class Strategy { kGreedy, kTopK, kNucleus, kBeam };

struct GenerationConfig {
  Strategy strategy = Strategy::kTopK;
  double temperature = 1.0;
  int top_k = 10;
  double top_p = 0.9;
  int beam_width = 4;
  int max_codes_per_modality = 20;
  int max_visits = 20;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
};

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

// Filtered, renormalized distribution that sample_next draws from. Greedy
// and beam put all mass on the argmax (lowest index on ties).
std::vector<double> filtered_distribution(std::span<const double> dist, const GenerationConfig& config);

// Throws Error(kEmptySupport) if filtering leaves no mass.
int sample_next(std::span<const double> dist, const GenerationConfig& config, Rng& rng);

struct ImputedVisit {
  Visit visit;
  bool end_of_record = false;  // the model closed the record after this visit
  bool truncated = false;      // a length bound cut decoding short
};

struct ImputedCodes {
  std::vector<int> codes;
  bool truncated = false;
};

// Decodes the next visit from the longitudinal prompt. With `force_end` the
// record is closed after this visit regardless of the model.
ImputedVisit impute_next_visit(const LanguageModel& model, std::span<const Visit> history,
                               const BaselineFeatures& baseline, const GenerationConfig& config, Rng& rng,
                               bool force_end = false);

// Decodes modality k of `current` inside the cloze slot. `forced` codes are
// teacher-forced at the start of the block and returned first.
ImputedCodes impute_modality(const LanguageModel& model, std::span<const Visit> history, const Visit& current, int k,
                             const BaselineFeatures& baseline, const GenerationConfig& config, Rng& rng,
                             std::span<const int> forced = {});

struct GeneratedRecord {
  PatientRecord record;
  bool truncated = false;
};

GeneratedRecord generate_record(const LanguageModel& model, const BaselineFeatures& baseline,
                                const GenerationConfig& config, Rng& rng);

// Record i uses the stream derive_seed(config.seed, i); records are ids "S000000", ...
Corpus generate_corpus(const LanguageModel& model, std::span<const BaselineFeatures> baselines,
                       const GenerationConfig& config, std::size_t* truncated = nullptr);

// Uniform draws, with replacement, of training-record baselines.
std::vector<BaselineFeatures> sample_baselines(const Corpus& train, std::size_t n, Rng& rng);

enum class CompletionAction { kKeepAll, kRemoveAll, kRemoveRandom };

struct SlotPolicy {
  CompletionAction action = CompletionAction::kKeepAll;
  double fraction = 0.0;  // for kRemoveRandom
};

struct CompletionPolicy {
  SlotPolicy default_policy;
  std::map<std::pair<int, int>, SlotPolicy> overrides;  // (visit, modality)
  std::map<int, SlotPolicy> modality_policy;            // applies to every visit
  std::uint64_t seed = 0;

  const SlotPolicy& at(int visit, int modality) const;
  // Throws Error(kInvalidSpec).
  void validate() const;
};

struct CompletedRecord {
  PatientRecord record;
  // imputed[t][k][i] marks code i of modality k in visit t as model output.
  std::vector<std::vector<std::vector<bool>>> imputed;
};

// Scans visits in time order: removes events per the policy, then re-imputes
// each touched modality (schema order) with the kept codes of that modality
// teacher-forced and all previously completed visits as history. Remove-random
// always keeps at least one original code.
CompletedRecord complete_record(const LanguageModel& model, const PatientRecord& real, const CompletionPolicy& policy,
                                const GenerationConfig& config);

// One JSON line per record listing the imputed codes.
void write_provenance(const Schema& schema, std::span<const CompletedRecord> records,
                      const std::filesystem::path& path);

}  // namespace synthehr
