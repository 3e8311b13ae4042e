#include "synthehr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"

namespace synthehr {

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidSpec, m); };
  if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
  if (weight_decay < 0.0) bad("weight_decay must be nonnegative");
  if (batch_size < 1) bad("batch_size must be at least 1");
  if (epochs < 1) bad("epochs must be at least 1");
  if (warmup_epochs < 0) bad("warmup_epochs must be nonnegative");
  if (longitudinal_fraction < 0.0 || longitudinal_fraction > 1.0) bad("longitudinal_fraction must lie in [0, 1]");
  if (selection_metric != "val_ppl" && selection_metric != "last") bad("selection_metric must be val_ppl or last");
  corruption.validate();
}

namespace {

TrainingExample finish(PromptLayout layout, const std::vector<TokenId>& answer) {
  std::vector<TokenId> full = layout.decoder_prefix;
  full.insert(full.end(), answer.begin(), answer.end());
  TrainingExample ex;
  ex.encoder = std::move(layout.encoder);
  ex.decoder.assign(full.begin(), full.end() - 1);
  ex.targets.assign(ex.decoder.size(), -1);
  for (std::size_t i = layout.decoder_prefix.size() - 1; i < ex.decoder.size(); ++i) ex.targets[i] = full[i + 1];
  return ex;
}

}  // namespace

TrainingExample longitudinal_example(const Vocabulary& vocab, const PatientRecord& record, int t,
                                     std::span<const int> modality_order) {
  const std::span<const Visit> history(record.visits.data(), static_cast<std::size_t>(t));
  auto layout = build_longitudinal_prompt(vocab, history);
  std::vector<TokenId> answer;
  const Visit& v = record.visits[t];
  for (int k : modality_order) {
    if (!v.has(k)) continue;
    answer.push_back(vocab.modality_open(k));
    for (int c : v.codes[k]) answer.push_back(vocab.code_token(k, c));
    answer.push_back(vocab.modality_close(k));
  }
  answer.push_back(Vocabulary::kVisitClose);
  answer.push_back(t + 1 == static_cast<int>(record.visits.size()) ? Vocabulary::kEos : Vocabulary::kVisitOpen);
  return finish(std::move(layout), answer);
}

TrainingExample crossmodal_example(const Vocabulary& vocab, const PatientRecord& record, int t, int k) {
  const std::span<const Visit> history(record.visits.data(), static_cast<std::size_t>(t));
  auto layout = build_crossmodal_prompt(vocab, history, record.visits[t], k);
  std::vector<TokenId> answer;
  for (int c : record.visits[t].codes[k]) answer.push_back(vocab.code_token(k, c));
  answer.push_back(vocab.modality_close(k));
  return finish(std::move(layout), answer);
}

std::vector<TrainingExample> evaluation_examples(const Vocabulary& vocab, const PatientRecord& record) {
  std::vector<int> order(static_cast<std::size_t>(vocab.modality_count()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainingExample> out;
  for (int t = 0; t < static_cast<int>(record.visits.size()); ++t) {
    out.push_back(longitudinal_example(vocab, record, t, order));
    for (int k = 0; k < vocab.modality_count(); ++k)
      if (record.visits[t].has(k)) out.push_back(crossmodal_example(vocab, record, t, k));
  }
  return out;
}

double validation_perplexity(const Transformer& model, std::span<const PatientRecord> records) {
  const int n = static_cast<int>(records.size());
  std::vector<double> nll(n, 0.0), count(n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    ag::NoGradGuard guard;
    for (const auto& ex : evaluation_examples(model.vocabulary(), records[i])) {
      nll[i] += model.sequence_loss(ex.encoder, records[i].baseline, ex.decoder, ex.targets)->value.data[0];
      count[i] += static_cast<double>(std::count_if(ex.targets.begin(), ex.targets.end(), [](int t) { return t >= 0; }));
    }
  }
  const double total = std::accumulate(nll.begin(), nll.end(), 0.0);
  const double tokens = std::accumulate(count.begin(), count.end(), 0.0);
  if (tokens == 0.0) throw Error(ErrorCode::kEmptySequence, "validation set has no answer tokens");
  return std::exp(total / tokens);
}

std::string epoch_log_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["step"] = e.step;
  j["train_loss"] = e.train_loss;
  j["val_ppl"] = e.val_ppl;
  j["lr"] = e.learning_rate;
  j["best"] = e.best;
  return j.dump();
}

AdamW::AdamW(std::vector<ag::Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p->grad = Matrix();
}

double AdamW::clip_gradients(double clip) {
  double sq = 0.0;
  for (auto& p : params_)
    for (double g : p->grad.data) sq += g * g;
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (auto& p : params_)
      for (double& g : p->grad.data) g *= s;
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& val = p.value.data;
    if (weight_decay_ > 0.0)
      for (double& x : val) x -= lr * weight_decay_ * x;
    if (p.grad.data.size() != val.size()) continue;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double g = p.grad.data[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      val[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

TrainResult train_model(const Corpus& train, const Corpus& val, const ModelConfig& model_config,
                        const TrainConfig& config, std::ostream* log) {
  config.validate();
  if (!val.empty() && !(val.schema == train.schema))
    throw Error(ErrorCode::kSchemaMismatch, "training and validation corpora have different schemas");
  if (train.empty()) throw Error(ErrorCode::kEmptySequence, "training corpus is empty");

  Vocabulary vocab(train.schema);
  auto model = std::make_unique<Transformer>(vocab, model_config, compute_numeric_stats(train));
  std::vector<ag::Tensor> params;
  for (auto& [name, t] : model->named_parameters()) params.push_back(t);
  AdamW opt(params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);

  Rng rng(derive_seed(config.seed, "train"));
  const int N = static_cast<int>(train.records.size());
  const int K = vocab.modality_count();
  const long steps_per_epoch = (N + config.batch_size - 1) / config.batch_size;
  const long warmup_steps = static_cast<long>(config.warmup_epochs) * steps_per_epoch;

  std::vector<PatientRecord> val_records(val.records.begin(),
                                         val.records.begin() + std::min<std::size_t>(val.records.size(),
                                                                                     static_cast<std::size_t>(config.max_val_records)));

  TrainResult result;
  std::vector<Matrix> best_values;
  double best = std::numeric_limits<double>::infinity();
  long step = 0;
  std::vector<int> perm(N);
  std::iota(perm.begin(), perm.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    double epoch_loss = 0.0, epoch_tokens = 0.0;
    double lr = config.learning_rate;
    for (long b = 0; b < steps_per_epoch; ++b) {
      std::vector<TrainingExample> batch;
      std::vector<const PatientRecord*> owners;
      for (long i = b * config.batch_size; i < std::min<long>(N, (b + 1) * config.batch_size); ++i) {
        const PatientRecord& rec = train.records[perm[i]];
        const int T = static_cast<int>(rec.visits.size());
        const int t = std::uniform_int_distribution<int>(0, T - 1)(rng);
        // A cloze example needs a sibling modality in the visit to condition on.
        std::vector<int> present;
        for (int k = 0; k < K; ++k)
          if (rec.visits[t].has(k)) present.push_back(k);
        const bool cloze = std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= config.longitudinal_fraction;
        TrainingExample ex;
        if (cloze && present.size() >= 2) {
          const int k = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)];
          ex = crossmodal_example(vocab, rec, t, k);
        } else {
          std::vector<int> order(K);
          std::iota(order.begin(), order.end(), 0);
          std::shuffle(order.begin(), order.end(), rng);
          ex = longitudinal_example(vocab, rec, t, order);
        }
        ex.encoder = corrupt(vocab, ex.encoder, config.corruption, rng);
        batch.push_back(std::move(ex));
        owners.push_back(&rec);
      }
      double tokens = 0.0;
      for (const auto& ex : batch)
        tokens += static_cast<double>(std::count_if(ex.targets.begin(), ex.targets.end(), [](int t) { return t >= 0; }));
      if (tokens == 0.0) continue;

      lr = warmup_steps > 0 ? config.learning_rate * std::min(1.0, static_cast<double>(step + 1) / warmup_steps)
                            : config.learning_rate;
      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto loss = model->sequence_loss(batch[i].encoder, owners[i]->baseline, batch[i].decoder, batch[i].targets);
        const double value = loss->value.data[0];
        if (!std::isfinite(value))
          throw Error(ErrorCode::kNonFiniteLoss, "epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                                     " record " + owners[i]->id + " loss " + std::to_string(value));
        batch_loss += value;
        ag::backward(ag::scale(loss, 1.0 / tokens));
      }
      const double grad_norm = opt.clip_gradients(config.grad_clip);
      if (!std::isfinite(grad_norm))
        throw Error(ErrorCode::kNonFiniteLoss, "non-finite gradient norm at step " + std::to_string(step));
      opt.step(lr);
      if (step == 0) result.initial_loss = batch_loss / tokens;
      epoch_loss += batch_loss;
      epoch_tokens += tokens;
      ++step;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.step = step;
    entry.train_loss = epoch_tokens > 0 ? epoch_loss / epoch_tokens : 0.0;
    entry.learning_rate = lr;
    entry.val_ppl = val_records.empty() ? std::exp(entry.train_loss) : validation_perplexity(*model, val_records);
    const bool improved = config.selection_metric == "last" || entry.val_ppl < best;
    if (improved) {
      best = entry.val_ppl;
      result.best_epoch = epoch;
      best_values.clear();
      for (const auto& p : params) best_values.push_back(p->value);
    }
    entry.best = improved;
    result.log.push_back(entry);
    if (log) *log << epoch_log_json(entry) << '\n' << std::flush;
  }

  if (best_values.size() == params.size())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  opt.zero_grad();
  result.best_val_ppl = best;
  result.model = std::move(model);
  return result;
}

}  // namespace synthehr
