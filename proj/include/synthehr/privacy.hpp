#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "synthehr/model.hpp"
#include "synthehr/train.hpp"

namespace synthehr {

// ---- membership inference -------------------------------------------------

// A sequence model of the same family trained only on next-visit prediction.
std::unique_ptr<Transformer> train_shadow(const Corpus& synthetic, const ModelConfig& model_config,
                                          TrainConfig train_config);

// Per record: log lpl and log mpl per modality (log |C_k| when the modality is
// absent, i.e. the uniform value), log of the full-vocabulary record
// perplexity, and log(1 + number of events).
std::vector<double> mi_features(const LanguageModel& shadow, const PatientRecord& record);
std::vector<std::string> mi_feature_names(const Schema& schema);

struct MiDataset {
  Matrix features;  // one row per record
  std::vector<int> labels;
  std::vector<std::string> ids;
};

// Rows for in_set (label 1) then out_set (label 0). Throws Error(kSizeMismatch)
// unless the sets have equal size.
MiDataset build_mi_dataset(const LanguageModel& shadow, const Corpus& in_set, const Corpus& out_set);
Matrix feature_matrix(const LanguageModel& shadow, const Corpus& corpus);

// Uniform sample without replacement.
Corpus sample_records(const Corpus& corpus, std::size_t n, std::uint64_t seed);

struct MlpConfig {
  int hidden = 32;
  int epochs = 300;
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

// Three-layer feed-forward binary classifier on standardized features.
class MlpClassifier {
 public:
  void fit(const Matrix& features, std::span<const int> labels, const MlpConfig& config);
  std::vector<double> predict(const Matrix& features) const;  // P(label = 1)

 private:
  std::vector<double> mean_, scale_;
  std::vector<ag::Tensor> params_;
  Matrix standardize(const Matrix& features) const;
  ag::Tensor logits(const Matrix& x) const;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct MembershipAttackResult {
  std::vector<std::string> ids;
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = member (D1)
  std::vector<RocPoint> roc;
  double auc = 0.0;
};

// Thresholds at every distinct score, descending; ties move together.
// Throws Error(kDegenerateLabels) without both classes.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
double auc_rank(std::span<const double> scores, std::span<const int> labels);
double auc_trapezoid(std::span<const RocPoint> roc);
MembershipAttackResult score_membership(std::span<const double> scores, std::span<const int> labels,
                                        std::vector<std::string> ids = {});

// Trains the attack classifier on `dataset` and scores D1 ∪ D2 using the
// shadow model's features.
MembershipAttackResult run_membership_attack(const MiDataset& dataset, const LanguageModel& shadow,
                                             const Corpus& eval_members, const Corpus& eval_nonmembers,
                                             const MlpConfig& config);

// ---- attribute inference --------------------------------------------------

// Probability that `code` of modality k is present in visit t of a record in
// which some codes were hidden. Implementations only ever see masked records.
class AttributeImputer {
 public:
  virtual ~AttributeImputer() = default;
  virtual double presence_probability(const PatientRecord& masked, int t, int k, int code) const = 0;
};

using ImputerFactory = std::function<std::shared_ptr<const AttributeImputer>(const Corpus& training)>;

// Smoothed pairwise co-occurrence within visits: the mean over observed codes
// o of P(code | o), or the marginal visit frequency when nothing is observed.
class CooccurrenceImputer : public AttributeImputer {
 public:
  explicit CooccurrenceImputer(const Corpus& corpus, double alpha = 1.0);
  double presence_probability(const PatientRecord& masked, int t, int k, int code) const override;

 private:
  Schema schema_;
  std::vector<int> offset_;
  std::vector<double> marginal_;  // per global code
  std::vector<double> pair_;      // [a * n + b]: visits containing both
  std::vector<double> single_;    // visits containing a
  double visits_ = 0.0;
  double alpha_;
};

// Cloze-slot probability from a sequence model: observed codes of modality k
// are teacher-forced and the next-code distribution is renormalized over the
// remaining codes of k.
class LanguageModelImputer : public AttributeImputer {
 public:
  explicit LanguageModelImputer(std::shared_ptr<const LanguageModel> model) : model_(std::move(model)) {}
  double presence_probability(const PatientRecord& masked, int t, int k, int code) const override;

 private:
  std::shared_ptr<const LanguageModel> model_;
};

ImputerFactory cooccurrence_imputer_factory(double alpha = 1.0);
ImputerFactory language_model_imputer_factory(const ModelConfig& model_config, const TrainConfig& train_config);

struct SweepArm {
  std::vector<double> tpr;
  std::vector<double> fpr;
};

struct AttributeAttackResult {
  std::vector<double> deltas;
  SweepArm treatment;  // imputer trained on D_S
  SweepArm control;    // imputer trained on D_2
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
};

struct AttributeQuery {
  std::size_t record = 0;
  int visit = 0;
  int modality = 0;
  int code = 0;
  int label = 0;  // 1 = hidden true code, 0 = sampled absent code
};

// Hides each code of each D1 record with probability hide_fraction and pairs
// every hidden code with one absent code of the same modality.
std::vector<AttributeQuery> attribute_queries(const Corpus& records, double hide_fraction, std::uint64_t seed,
                                              std::vector<PatientRecord>* masked);

// Decision rule: present iff log P̂ − log P0 ≥ δ (probabilities floored at
// 1e-300). Throws Error(kEmptyGrid).
SweepArm sweep(std::span<const double> log_odds, std::span<const int> labels, std::span<const double> deltas);

AttributeAttackResult run_attribute_attack(const Corpus& synthetic, const Corpus& train_real, const Corpus& test_real,
                                           std::span<const double> delta_grid, double hide_fraction,
                                           std::uint64_t seed, const ImputerFactory& factory);

// Same, with explicit imputers for the three roles.
AttributeAttackResult run_attribute_attack(const AttributeImputer& treatment, const AttributeImputer& prior,
                                           const AttributeImputer& control, const Corpus& train_real,
                                           std::span<const double> delta_grid, double hide_fraction,
                                           std::uint64_t seed);

void write_membership_result(const MembershipAttackResult& result, const std::filesystem::path& path);
void write_attribute_result(const AttributeAttackResult& result, const std::filesystem::path& path);

}  // namespace synthehr
