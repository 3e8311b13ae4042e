#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "synthehr/corruption.hpp"
#include "synthehr/model.hpp"

namespace synthehr {

struct TrainConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int epochs = 50;
  int warmup_epochs = 3;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double longitudinal_fraction = 0.5;  // remainder are cloze examples, when the visit has 2+ modalities
  int max_val_records = 256;
  std::string selection_metric = "val_ppl";  // or "last"
  CorruptionConfig corruption;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
};

// One teacher-forced training example: the decoder reads `decoder` and row i
// is trained to predict targets[i] (−1 rows carry no loss).
struct TrainingExample {
  TokenSequence encoder;
  std::vector<TokenId> decoder;
  std::vector<int> targets;
};

// Next-visit example for visit t: the answer lists the visit's blocks in
// `modality_order`, closes the visit, then emits </s> after the last visit or
// <v> when another visit follows.
TrainingExample longitudinal_example(const Vocabulary& vocab, const PatientRecord& record, int t,
                                     std::span<const int> modality_order);
// Cloze example for modality k of visit t.
TrainingExample crossmodal_example(const Vocabulary& vocab, const PatientRecord& record, int t, int k);

// Every uncorrupted example of a record: one longitudinal example per visit
// (schema order) and one cloze example per present (visit, modality).
std::vector<TrainingExample> evaluation_examples(const Vocabulary& vocab, const PatientRecord& record);

// exp(total NLL / total answer tokens) over evaluation_examples of the records.
double validation_perplexity(const Transformer& model, std::span<const PatientRecord> records);

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double val_ppl = 0.0;
  double learning_rate = 0.0;
  bool best = false;
};

struct TrainResult {
  std::unique_ptr<Transformer> model;  // selected checkpoint
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_ppl = 0.0;
  double initial_loss = 0.0;  // mean loss of the first step
};

std::string epoch_log_json(const EpochLog& entry);

// Throws Error(kSchemaMismatch) when the corpora disagree, Error(kNonFiniteLoss)
// when a step produces a non-finite loss. When `log` is given every epoch is
// written to it as one JSON line.
TrainResult train_model(const Corpus& train, const Corpus& val, const ModelConfig& model_config,
                        const TrainConfig& config, std::ostream* log = nullptr);

// AdamW with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<ag::Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  void zero_grad();
  // Scales gradients so their global norm is at most `clip` (≤0 disables) and
  // returns the pre-clip norm.
  double clip_gradients(double clip);
  void step(double learning_rate);

 private:
  std::vector<ag::Tensor> params_;
  std::vector<Matrix> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
};

}  // namespace synthehr
