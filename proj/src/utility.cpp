#include "synthehr/utility.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/rng.hpp"
#include "synthehr/train.hpp"

namespace synthehr {

void UtilityConfig::validate() const {
  if (hidden < 1) throw Error(ErrorCode::kInvalidSpec, "utility.hidden must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::kInvalidSpec, "utility.epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidSpec, "utility.learning_rate must be > 0");
  if (batch_size < 1) throw Error(ErrorCode::kInvalidSpec, "utility.batch_size must be >= 1");
  if (target_modality < 0) throw Error(ErrorCode::kInvalidSpec, "utility.target_modality must be >= 0");
  if (ks.empty()) throw Error(ErrorCode::kInvalidSpec, "utility.ks is empty");
  for (int k : ks)
    if (k < 1) throw Error(ErrorCode::kInvalidSpec, "utility.ks entries must be >= 1");
  if (bootstrap_resamples < 0) throw Error(ErrorCode::kInvalidSpec, "utility.bootstrap_resamples must be >= 0");
}

ag::Tensor LstmPredictor::forward_logits(std::span<const PatientRecord* const> batch, Matrix* targets) const {
  const int B = static_cast<int>(batch.size());
  const int H = hidden_;
  const int C = schema_.vocab_size(target_);
  int steps = 0;
  for (const auto* r : batch) steps = std::max(steps, static_cast<int>(r->visits.size()) - 1);

  std::vector<int> valid;
  for (int t = 0; t < steps; ++t)
    for (int b = 0; b < B; ++b)
      if (t + 1 < static_cast<int>(batch[b]->visits.size())) valid.push_back(t * B + b);
  if (targets) {
    *targets = Matrix(static_cast<int>(valid.size()), C);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      const int t = valid[i] / B, b = valid[i] % B;
      for (int c : batch[b]->visits[t + 1].codes[target_]) (*targets)(static_cast<int>(i), c) = 1.0;
    }
  }
  if (valid.empty()) return nullptr;

  ag::Tensor h = ag::constant(Matrix(B, H));
  ag::Tensor c = ag::constant(Matrix(B, H));
  std::vector<ag::Tensor> hs;
  for (int t = 0; t < steps; ++t) {
    Matrix x(B, input_dim_);
    for (int b = 0; b < B; ++b) {
      if (t >= static_cast<int>(batch[b]->visits.size())) continue;
      const auto& v = batch[b]->visits[t];
      for (int k = 0; k < schema_.modality_count(); ++k)
        for (int code : v.codes[k]) x(b, offset_[k] + code) = 1.0;
    }
    const auto z = ag::add_row(ag::add(ag::matmul(ag::constant(std::move(x)), params_[0]), ag::matmul(h, params_[1])),
                               params_[2]);
    const auto i = ag::sigmoid(ag::slice_cols(z, 0, H));
    const auto f = ag::sigmoid(ag::slice_cols(z, H, H));
    const auto g = ag::tanh(ag::slice_cols(z, 2 * H, H));
    const auto o = ag::sigmoid(ag::slice_cols(z, 3 * H, H));
    c = ag::add(ag::mul(f, c), ag::mul(i, g));
    h = ag::mul(o, ag::tanh(c));
    hs.push_back(h);
  }
  const auto all = ag::concat_rows(hs);
  const auto picked = ag::gather_rows(all, valid);
  return ag::add_row(ag::matmul(picked, params_[3]), params_[4]);
}

void LstmPredictor::fit(const Corpus& corpus, const UtilityConfig& config, std::vector<double>* epoch_loss) {
  config.validate();
  if (config.target_modality >= corpus.schema.modality_count())
    throw Error(ErrorCode::kUnknownModality, "utility target modality " + std::to_string(config.target_modality));
  std::vector<const PatientRecord*> usable;
  for (const auto& r : corpus.records)
    if (r.visits.size() >= 2) usable.push_back(&r);
  if (usable.empty()) throw Error(ErrorCode::kInsufficientHistory, "no record has two or more visits");

  schema_ = corpus.schema;
  target_ = config.target_modality;
  hidden_ = config.hidden;
  offset_.clear();
  input_dim_ = 0;
  for (int k = 0; k < schema_.modality_count(); ++k) {
    offset_.push_back(input_dim_);
    input_dim_ += schema_.vocab_size(k);
  }
  const int H = hidden_, C = schema_.vocab_size(target_);

  Rng rng(derive_seed(config.seed, "lstm"));
  auto init = [&](int r, int c, double stddev) {
    Matrix m(r, c);
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& x : m.data) x = nd(rng);
    return ag::parameter(std::move(m));
  };
  Matrix bias(1, 4 * H);
  for (int j = H; j < 2 * H; ++j) bias(0, j) = 1.0;  // forget gate open at start
  params_ = {init(input_dim_, 4 * H, 1.0 / std::sqrt(static_cast<double>(input_dim_))),
             init(H, 4 * H, 1.0 / std::sqrt(static_cast<double>(H))), ag::parameter(std::move(bias)),
             init(H, C, 1.0 / std::sqrt(static_cast<double>(H))), ag::parameter(Matrix(1, C))};

  AdamW opt(params_, 0.9, 0.999, 1e-8, 0.0);
  if (epoch_loss) epoch_loss->clear();
  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(usable.begin(), usable.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < usable.size(); s += config.batch_size) {
      const std::size_t n = std::min<std::size_t>(config.batch_size, usable.size() - s);
      Matrix targets;
      opt.zero_grad();
      const auto logits = forward_logits(std::span(usable.data() + s, n), &targets);
      const auto loss = ag::bce_with_logits(logits, targets);
      const double value = loss->value.data[0];
      if (!std::isfinite(value)) throw Error(ErrorCode::kNonFiniteLoss, "predictor loss is not finite");
      ag::backward(loss);
      opt.clip_gradients(5.0);
      opt.step(config.learning_rate);
      total += value;
      ++batches;
    }
    if (epoch_loss) epoch_loss->push_back(total / batches);
  }
  for (auto& p : params_) p->grad = Matrix();
}

std::vector<std::vector<double>> LstmPredictor::transition_scores(const PatientRecord& record) const {
  if (params_.empty()) throw Error(ErrorCode::kInvalidSpec, "predictor is not trained");
  if (record.visits.size() < 2) return {};
  ag::NoGradGuard guard;
  const PatientRecord* batch[] = {&record};
  const auto logits = forward_logits(batch, nullptr);
  std::vector<std::vector<double>> out(logits->value.rows);
  for (int r = 0; r < logits->value.rows; ++r) {
    out[r].resize(logits->value.cols);
    for (int c = 0; c < logits->value.cols; ++c) out[r][c] = 1.0 / (1.0 + std::exp(-logits->value(r, c)));
  }
  return out;
}

std::vector<double> LstmPredictor::weights() const {
  std::vector<double> w;
  for (const auto& p : params_) w.insert(w.end(), p->value.data.begin(), p->value.data.end());
  return w;
}

LstmPredictor train_predictor(const Corpus& corpus, const UtilityConfig& config, std::vector<double>* epoch_loss) {
  LstmPredictor p;
  p.fit(corpus, config, epoch_loss);
  return p;
}

std::vector<double> transition_recalls(const NextVisitScorer& predictor, const Corpus& test, int k,
                                       int target_modality) {
  if (k < 1) throw Error(ErrorCode::kInvalidSpec, "recall@k needs k >= 1");
  std::vector<double> out;
  for (const auto& rec : test.records) {
    const auto scores = predictor.transition_scores(rec);
    for (std::size_t t = 0; t + 1 < rec.visits.size() && t < scores.size(); ++t) {
      const auto& truth = rec.visits[t + 1].codes.at(target_modality);
      if (truth.empty()) continue;
      const auto& s = scores[t];
      std::vector<int> idx(s.size());
      std::iota(idx.begin(), idx.end(), 0);
      const std::size_t top = std::min<std::size_t>(k, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                        [&](int a, int b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
      std::size_t hits = 0;
      for (std::size_t i = 0; i < top; ++i)
        if (std::find(truth.begin(), truth.end(), idx[i]) != truth.end()) ++hits;
      out.push_back(static_cast<double>(hits) / static_cast<double>(truth.size()));
    }
  }
  return out;
}

RecallEntry recall_from_values(std::span<const double> v, int k, int bootstrap_resamples, std::uint64_t seed) {
  RecallEntry e;
  e.k = k;
  e.transitions = v.size();
  if (v.empty()) return e;
  const double n = static_cast<double>(v.size());
  e.recall = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (bootstrap_resamples < 1) return e;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
  std::vector<double> means(bootstrap_resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[pick(rng)];
    m = s / n;
  }
  std::sort(means.begin(), means.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  e.ci95 = 0.5 * (q(0.975) - q(0.025));
  return e;
}

RecallEntry recall_at_k(const NextVisitScorer& predictor, const Corpus& test, int k, int target_modality,
                        int bootstrap_resamples, std::uint64_t seed) {
  const auto v = transition_recalls(predictor, test, k, target_modality);
  return recall_from_values(v, k, bootstrap_resamples, derive_seed(seed, "recall@" + std::to_string(k)));
}

std::string arm_label(const UtilityArm& arm) {
  if (arm.n_real == 0) return "syn";
  if (arm.n_syn == 0) return "real-" + std::to_string(arm.n_real);
  return "syn+real-" + std::to_string(arm.n_real);
}

std::uint64_t arm_seed(std::uint64_t seed, const UtilityArm& arm) {
  return derive_seed(seed, "arm:" + std::to_string(arm.n_syn) + ":" + std::to_string(arm.n_real));
}

UtilityResult run_utility_arm(const Corpus& synthetic_pool, const Corpus& real_train, const Corpus& real_test,
                              const UtilityArm& arm, const UtilityConfig& config) {
  if (arm.n_syn > synthetic_pool.size())
    throw Error(ErrorCode::kInvalidSpec, "arm asks for " + std::to_string(arm.n_syn) + " synthetic records, pool has " +
                                             std::to_string(synthetic_pool.size()));
  if (arm.n_real > real_train.size())
    throw Error(ErrorCode::kInvalidSpec, "arm asks for " + std::to_string(arm.n_real) + " real records, train has " +
                                             std::to_string(real_train.size()));
  if (arm.n_syn + arm.n_real == 0) throw Error(ErrorCode::kInvalidSpec, "arm has no training records");
  Corpus train{real_train.schema, {}};
  train.records.insert(train.records.end(), synthetic_pool.records.begin(),
                       synthetic_pool.records.begin() + static_cast<std::ptrdiff_t>(arm.n_syn));
  train.records.insert(train.records.end(), real_train.records.begin(),
                       real_train.records.begin() + static_cast<std::ptrdiff_t>(arm.n_real));

  std::set<std::string> test_ids;
  for (const auto& r : real_test.records) test_ids.insert(r.id);
  for (const auto& r : train.records)
    if (test_ids.count(r.id)) throw Error(ErrorCode::kInvalidSpec, "test record " + r.id + " reached a training corpus");

  UtilityConfig cfg = config;
  cfg.seed = arm_seed(config.seed, arm);
  const auto predictor = train_predictor(train, cfg);
  UtilityResult res;
  res.label = arm_label(arm);
  res.n_syn = arm.n_syn;
  res.n_real = arm.n_real;
  res.training_size = train.size();
  for (int k : config.ks)
    res.recall.push_back(
        recall_at_k(predictor, real_test, k, config.target_modality, config.bootstrap_resamples, cfg.seed));
  return res;
}

std::vector<UtilityResult> run_utility_suite(const Corpus& synthetic_pool, const Corpus& real_train,
                                             const Corpus& real_test, std::span<const UtilityArm> arms,
                                             const UtilityConfig& config) {
  config.validate();
  if (!(real_train.schema == real_test.schema) || !(synthetic_pool.schema == real_train.schema))
    throw Error(ErrorCode::kSchemaMismatch, "utility corpora must share a schema");
  std::vector<UtilityResult> out(arms.size());
  for (std::size_t i = 0; i < arms.size(); ++i) out[i] = run_utility_arm(synthetic_pool, real_train, real_test, arms[i], config);
  return out;
}

std::vector<UtilityResult> run_utility_suite(const LanguageModel& model, const Corpus& real_train,
                                             const Corpus& real_test, std::span<const UtilityArm> arms,
                                             const UtilityConfig& config, const GenerationConfig& generation) {
  std::size_t n_max = 0;
  for (const auto& a : arms) n_max = std::max(n_max, a.n_syn);
  Corpus pool{real_train.schema, {}};
  if (n_max > 0) {
    Rng rng(derive_seed(generation.seed, "utility-baselines"));
    const auto baselines = sample_baselines(real_train, n_max, rng);
    pool = generate_corpus(model, baselines, generation);
  }
  return run_utility_suite(pool, real_train, real_test, arms, config);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(ErrorCode::kSizeMismatch, "spearman needs paired samples");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
      for (std::size_t m = i; m < j; ++m) r[idx[m]] = 0.5 * static_cast<double>(i + j - 1);
      i = j;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string utility_results_json(std::span<const UtilityResult> results) {
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json row;
    row["label"] = r.label;
    row["n_syn"] = r.n_syn;
    row["n_real"] = r.n_real;
    row["training_size"] = r.training_size;
    for (const auto& e : r.recall) {
      row["recall@" + std::to_string(e.k)] = e.recall;
      row["ci95@" + std::to_string(e.k)] = e.ci95;
      row["transitions"] = e.transitions;
    }
    rows.push_back(row);
  }
  return nlohmann::ordered_json{{"arms", rows}}.dump(2);
}

void write_utility_results(std::span<const UtilityResult> results, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << utility_results_json(results) << '\n';
}

}  // namespace synthehr
