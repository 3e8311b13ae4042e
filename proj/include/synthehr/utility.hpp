#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "synthehr/autograd.hpp"
#include "synthehr/generate.hpp"
#include "synthehr/records.hpp"

namespace synthehr {

struct UtilityConfig {
  int hidden = 64;
  int epochs = 30;
  double learning_rate = 1e-2;
  int batch_size = 16;
  int target_modality = 0;  // the "diagnosis" modality being predicted
  std::vector<int> ks{10, 20};
  int bootstrap_resamples = 1000;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
};

// Anything that scores the target-modality codes of visit t+1 from visits 0..t.
class NextVisitScorer {
 public:
  virtual ~NextVisitScorer() = default;
  // Row t holds the scores for visit t+1; one row per transition of the record.
  virtual std::vector<std::vector<double>> transition_scores(const PatientRecord& record) const = 0;
};

// Single-layer LSTM over multi-hot visit vectors (all modalities) with a
// sigmoid output per target-modality code.
class LstmPredictor : public NextVisitScorer {
 public:
  LstmPredictor() = default;
  // Throws Error(kInsufficientHistory) when no record has two visits.
  void fit(const Corpus& corpus, const UtilityConfig& config, std::vector<double>* epoch_loss = nullptr);
  std::vector<std::vector<double>> transition_scores(const PatientRecord& record) const override;
  // Flattened weights, for reproducibility checks.
  std::vector<double> weights() const;

 private:
  // Logits for every transition of the batch, rows ordered by (step, record).
  ag::Tensor forward_logits(std::span<const PatientRecord* const> batch, Matrix* targets) const;
  Schema schema_;
  std::vector<int> offset_;
  int input_dim_ = 0;
  int hidden_ = 0;
  int target_ = 0;
  std::vector<ag::Tensor> params_;  // W, U, b, W_out, b_out
};

LstmPredictor train_predictor(const Corpus& corpus, const UtilityConfig& config,
                              std::vector<double>* epoch_loss = nullptr);

struct RecallEntry {
  int k = 0;
  double recall = 0.0;
  double ci95 = 0.0;  // half-width of the central 95% bootstrap interval of the mean
  std::size_t transitions = 0;
};

// Per transition |top-k ∩ truth| / |truth| (denominator not capped at k);
// transitions whose next visit has no target-modality code are skipped. Ties
// in the ranking go to the lower code index.
RecallEntry recall_at_k(const NextVisitScorer& predictor, const Corpus& test, int k, int target_modality = 0,
                        int bootstrap_resamples = 1000, std::uint64_t seed = 0);
// Same, from precomputed per-transition recalls.
RecallEntry recall_from_values(std::span<const double> per_transition, int k, int bootstrap_resamples,
                               std::uint64_t seed);
std::vector<double> transition_recalls(const NextVisitScorer& predictor, const Corpus& test, int k,
                                       int target_modality = 0);

struct UtilityArm {
  std::size_t n_syn = 0;
  std::size_t n_real = 0;
};

struct UtilityResult {
  std::string label;  // "syn", "real-<n>" or "syn+real-<n>"
  std::size_t n_syn = 0;
  std::size_t n_real = 0;
  std::size_t training_size = 0;
  std::vector<RecallEntry> recall;
};

std::string arm_label(const UtilityArm& arm);
// Predictor seed of an arm, derived from the arm sizes only.
std::uint64_t arm_seed(std::uint64_t seed, const UtilityArm& arm);

// Generates max(n_syn) records once (baselines drawn from real_train); arm i
// uses the first n_syn of them and the first n_real records of real_train, so
// arms are nested. Every arm trains a fresh predictor seeded from the arm
// sizes. Throws Error(kInvalidSpec) when a test id reaches a training corpus.
std::vector<UtilityResult> run_utility_suite(const LanguageModel& model, const Corpus& real_train,
                                             const Corpus& real_test, std::span<const UtilityArm> arms,
                                             const UtilityConfig& config, const GenerationConfig& generation);
// Variant with the synthetic pool supplied by the caller.
std::vector<UtilityResult> run_utility_suite(const Corpus& synthetic_pool, const Corpus& real_train,
                                             const Corpus& real_test, std::span<const UtilityArm> arms,
                                             const UtilityConfig& config);
UtilityResult run_utility_arm(const Corpus& synthetic_pool, const Corpus& real_train, const Corpus& real_test,
                              const UtilityArm& arm, const UtilityConfig& config);

double spearman(std::span<const double> x, std::span<const double> y);

// One row per arm; columns label, n_syn, n_real, training_size, recall@k, ci95@k.
void write_utility_results(std::span<const UtilityResult> results, const std::filesystem::path& path);
std::string utility_results_json(std::span<const UtilityResult> results);

}  // namespace synthehr
