#include "synthehr/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/metrics.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

std::unique_ptr<Transformer> train_shadow(const Corpus& synthetic, const ModelConfig& model_config,
                                          TrainConfig train_config) {
  train_config.longitudinal_fraction = 1.0;
  return train_model(synthetic, Corpus{synthetic.schema, {}}, model_config, train_config).model;
}

std::vector<std::string> mi_feature_names(const Schema& schema) {
  std::vector<std::string> out;
  for (int k = 0; k < schema.modality_count(); ++k) {
    out.push_back("log_lpl_" + schema.modality_name(k));
    out.push_back("log_mpl_" + schema.modality_name(k));
  }
  out.push_back("log_ppl");
  out.push_back("log1p_events");
  return out;
}

std::vector<double> mi_features(const LanguageModel& shadow, const PatientRecord& record) {
  const auto& schema = shadow.vocabulary().schema();
  std::vector<double> f;
  std::size_t events = 0;
  for (const auto& v : record.visits) events += v.event_count();
  for (int k = 0; k < schema.modality_count(); ++k) {
    bool present = false;
    for (const auto& v : record.visits) present = present || v.has(k);
    if (!present) {
      const double uniform = std::log(static_cast<double>(schema.vocab_size(k)));
      f.push_back(uniform);
      f.push_back(uniform);
      continue;
    }
    f.push_back(std::log(lpl(shadow, record, k)));
    f.push_back(std::log(mpl(shadow, record, k)));
  }
  f.push_back(std::log(record_ppl(shadow, record)));
  f.push_back(std::log1p(static_cast<double>(events)));
  return f;
}

Matrix feature_matrix(const LanguageModel& shadow, const Corpus& corpus) {
  const int n = static_cast<int>(corpus.records.size());
  const int d = static_cast<int>(mi_feature_names(shadow.vocabulary().schema()).size());
  Matrix out(n, d);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto f = mi_features(shadow, corpus.records[i]);
    std::copy(f.begin(), f.end(), out.row(i));
  }
  return out;
}

MiDataset build_mi_dataset(const LanguageModel& shadow, const Corpus& in_set, const Corpus& out_set) {
  if (in_set.size() != out_set.size())
    throw Error(ErrorCode::kSizeMismatch, "in-set has " + std::to_string(in_set.size()) + " records, out-set " +
                                              std::to_string(out_set.size()));
  const Matrix a = feature_matrix(shadow, in_set);
  const Matrix b = feature_matrix(shadow, out_set);
  MiDataset ds;
  ds.features = Matrix(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), ds.features.data.begin());
  std::copy(b.data.begin(), b.data.end(), ds.features.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  for (const auto& r : in_set.records) {
    ds.labels.push_back(1);
    ds.ids.push_back(r.id);
  }
  for (const auto& r : out_set.records) {
    ds.labels.push_back(0);
    ds.ids.push_back(r.id);
  }
  return ds;
}

Corpus sample_records(const Corpus& corpus, std::size_t n, std::uint64_t seed) {
  if (n > corpus.size())
    throw Error(ErrorCode::kSizeMismatch, "cannot sample " + std::to_string(n) + " of " + std::to_string(corpus.size()));
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Corpus out{corpus.schema, {}};
  for (std::size_t i = 0; i < n; ++i) out.records.push_back(corpus.records[idx[i]]);
  return out;
}

// ---- classifier ----

Matrix MlpClassifier::standardize(const Matrix& x) const {
  Matrix out = x;
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out(r, c) = (x(r, c) - mean_[c]) / scale_[c];
  return out;
}

ag::Tensor MlpClassifier::logits(const Matrix& x) const {
  auto h = ag::relu(ag::add_row(ag::matmul(ag::constant(x), params_[0]), params_[1]));
  h = ag::relu(ag::add_row(ag::matmul(h, params_[2]), params_[3]));
  return ag::add_row(ag::matmul(h, params_[4]), params_[5]);
}

void MlpClassifier::fit(const Matrix& features, std::span<const int> labels, const MlpConfig& config) {
  if (static_cast<int>(labels.size()) != features.rows) throw Error(ErrorCode::kSizeMismatch, "one label per row required");
  const bool pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool neg = std::count(labels.begin(), labels.end(), 0) > 0;
  if (!pos || !neg) throw Error(ErrorCode::kDegenerateLabels, "classifier needs both classes");
  const int n = features.rows, d = features.cols, H = config.hidden;
  mean_.assign(d, 0.0);
  scale_.assign(d, 0.0);
  for (int c = 0; c < d; ++c) {
    for (int r = 0; r < n; ++r) mean_[c] += features(r, c);
    mean_[c] /= n;
    for (int r = 0; r < n; ++r) scale_[c] += (features(r, c) - mean_[c]) * (features(r, c) - mean_[c]);
    scale_[c] = std::sqrt(scale_[c] / n);
    if (!(scale_[c] > 1e-12)) scale_[c] = 1.0;
  }
  Rng rng(derive_seed(config.seed, "mlp"));
  auto init = [&](int r, int c) {
    Matrix m(r, c);
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(r)));
    for (auto& x : m.data) x = nd(rng);
    return ag::parameter(std::move(m));
  };
  params_ = {init(d, H), ag::parameter(Matrix(1, H)), init(H, H), ag::parameter(Matrix(1, H)), init(H, 1),
             ag::parameter(Matrix(1, 1))};
  const Matrix x = standardize(features);
  Matrix y(n, 1);
  for (int r = 0; r < n; ++r) y(r, 0) = labels[r];
  AdamW opt(params_, 0.9, 0.999, 1e-8, config.weight_decay);
  for (int e = 0; e < config.epochs; ++e) {
    opt.zero_grad();
    ag::backward(ag::bce_with_logits(logits(x), y));
    opt.step(config.learning_rate);
  }
  for (auto& p : params_) p->grad = Matrix();
}

std::vector<double> MlpClassifier::predict(const Matrix& features) const {
  ag::NoGradGuard guard;
  const auto z = logits(standardize(features));
  std::vector<double> out(z->value.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-z->value.data[i]));
  return out;
}

// ---- ROC / AUC ----

namespace {
void check_labels(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::kSizeMismatch, "one label per score required");
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size()))
    throw Error(ErrorCode::kDegenerateLabels, "ROC needs both positive and negative labels");
}
}  // namespace

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_labels(scores, labels);
  const double n1 = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n0 = static_cast<double>(labels.size()) - n1;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> roc{{0.0, 0.0}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    roc.push_back({fp / n0, tp / n1});
    i = j;
  }
  return roc;
}

double auc_rank(std::span<const double> scores, std::span<const int> labels) {
  check_labels(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t m = i; m < j; ++m)
      if (labels[idx[m]] == 1) {
        rank_sum += avg;
        n1 += 1.0;
      }
    i = j;
  }
  const double n0 = static_cast<double>(n) - n1;
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

double auc_trapezoid(std::span<const RocPoint> roc) {
  double a = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) a += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
  return a;
}

MembershipAttackResult score_membership(std::span<const double> scores, std::span<const int> labels,
                                        std::vector<std::string> ids) {
  MembershipAttackResult r;
  r.scores.assign(scores.begin(), scores.end());
  r.labels.assign(labels.begin(), labels.end());
  r.ids = std::move(ids);
  r.roc = roc_curve(scores, labels);
  r.auc = auc_rank(scores, labels);
  return r;
}

MembershipAttackResult run_membership_attack(const MiDataset& dataset, const LanguageModel& shadow,
                                             const Corpus& eval_members, const Corpus& eval_nonmembers,
                                             const MlpConfig& config) {
  MlpClassifier clf;
  clf.fit(dataset.features, dataset.labels, config);
  const Matrix a = feature_matrix(shadow, eval_members);
  const Matrix b = feature_matrix(shadow, eval_nonmembers);
  auto sa = clf.predict(a);
  const auto sb = clf.predict(b);
  std::vector<int> labels(sa.size(), 1);
  labels.resize(sa.size() + sb.size(), 0);
  std::vector<std::string> ids;
  for (const auto& r : eval_members.records) ids.push_back(r.id);
  for (const auto& r : eval_nonmembers.records) ids.push_back(r.id);
  sa.insert(sa.end(), sb.begin(), sb.end());
  return score_membership(sa, labels, std::move(ids));
}

// ---- attribute inference ----

CooccurrenceImputer::CooccurrenceImputer(const Corpus& corpus, double alpha) : schema_(corpus.schema), alpha_(alpha) {
  int n = 0;
  for (int k = 0; k < schema_.modality_count(); ++k) {
    offset_.push_back(n);
    n += schema_.vocab_size(k);
  }
  marginal_.assign(n, 0.0);
  single_.assign(n, 0.0);
  pair_.assign(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<int> g;
  for (const auto& rec : corpus.records)
    for (const auto& v : rec.visits) {
      g.clear();
      for (int k = 0; k < schema_.modality_count(); ++k)
        for (int c : v.codes[k]) g.push_back(offset_[k] + c);
      for (int a : g) {
        single_[a] += 1.0;
        for (int b : g) pair_[static_cast<std::size_t>(a) * n + b] += 1.0;
      }
      visits_ += 1.0;
    }
  for (int a = 0; a < n; ++a) marginal_[a] = (single_[a] + alpha_ * 0.5) / (visits_ + alpha_);
}

double CooccurrenceImputer::presence_probability(const PatientRecord& masked, int t, int k, int code) const {
  const int n = static_cast<int>(marginal_.size());
  const int gc = offset_.at(k) + code;
  const auto& v = masked.visits.at(t);
  double sum = 0.0;
  int m = 0;
  for (int j = 0; j < schema_.modality_count(); ++j)
    for (int c : v.codes[j]) {
      const int o = offset_[j] + c;
      if (o == gc) return 1.0;
      sum += (pair_[static_cast<std::size_t>(gc) * n + o] + alpha_ * marginal_[gc]) / (single_[o] + alpha_);
      ++m;
    }
  return m == 0 ? marginal_[gc] : sum / m;
}

double LanguageModelImputer::presence_probability(const PatientRecord& masked, int t, int k, int code) const {
  const auto& vocab = model_->vocabulary();
  const Visit& current = masked.visits.at(t);
  const auto& observed = current.codes.at(k);
  if (std::find(observed.begin(), observed.end(), code) != observed.end()) return 1.0;
  auto layout = build_crossmodal_prompt(vocab, std::span(masked.visits.data(), t), current, k);
  std::vector<TokenId> decoder = layout.decoder_prefix;
  for (int c : observed) decoder.push_back(vocab.code_token(k, c));
  const auto ctx = model_->encode(layout.encoder, masked.baseline);
  const Matrix lp = model_->next_token_logprobs(*ctx, decoder);
  const double* row = lp.row(lp.rows - 1);
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<char> seen(vocab.schema().vocab_size(k), 0);
  for (int c : observed) seen[c] = 1;
  for (int c = 0; c < vocab.schema().vocab_size(k); ++c)
    if (!seen[c]) mx = std::max(mx, row[vocab.code_token(k, c)]);
  double z = 0.0;
  for (int c = 0; c < vocab.schema().vocab_size(k); ++c)
    if (!seen[c]) z += std::exp(row[vocab.code_token(k, c)] - mx);
  return std::exp(row[vocab.code_token(k, code)] - mx) / z;
}

ImputerFactory cooccurrence_imputer_factory(double alpha) {
  return [alpha](const Corpus& c) { return std::make_shared<const CooccurrenceImputer>(c, alpha); };
}

ImputerFactory language_model_imputer_factory(const ModelConfig& model_config, const TrainConfig& train_config) {
  return [model_config, train_config](const Corpus& c) {
    std::shared_ptr<const LanguageModel> m = train_model(c, Corpus{c.schema, {}}, model_config, train_config).model;
    return std::make_shared<const LanguageModelImputer>(std::move(m));
  };
}

std::vector<AttributeQuery> attribute_queries(const Corpus& records, double hide_fraction, std::uint64_t seed,
                                              std::vector<PatientRecord>* masked) {
  if (hide_fraction < 0.0 || hide_fraction > 1.0) throw Error(ErrorCode::kInvalidSpec, "hide_fraction must lie in [0, 1]");
  Rng rng(seed);
  std::bernoulli_distribution hide(hide_fraction);
  std::vector<AttributeQuery> out;
  if (masked) masked->clear();
  const auto& schema = records.schema;
  for (std::size_t i = 0; i < records.records.size(); ++i) {
    PatientRecord m = records.records[i];
    for (int t = 0; t < static_cast<int>(m.visits.size()); ++t)
      for (int k = 0; k < schema.modality_count(); ++k) {
        const auto truth = records.records[i].visits[t].codes[k];
        std::vector<int> kept;
        for (int c : truth) {
          if (!hide(rng)) {
            kept.push_back(c);
            continue;
          }
          out.push_back({i, t, k, c, 1});
          std::vector<int> absent;
          for (int a = 0; a < schema.vocab_size(k); ++a)
            if (std::find(truth.begin(), truth.end(), a) == truth.end()) absent.push_back(a);
          if (!absent.empty())
            out.push_back({i, t, k, absent[std::uniform_int_distribution<std::size_t>(0, absent.size() - 1)(rng)], 0});
        }
        m.visits[t].codes[k] = kept;
      }
    if (masked) masked->push_back(std::move(m));
  }
  return out;
}

SweepArm sweep(std::span<const double> log_odds, std::span<const int> labels, std::span<const double> deltas) {
  if (deltas.empty()) throw Error(ErrorCode::kEmptyGrid, "delta grid is empty");
  if (!std::is_sorted(deltas.begin(), deltas.end())) throw Error(ErrorCode::kInvalidSpec, "delta grid must be ascending");
  double n1 = 0.0, n0 = 0.0;
  for (int l : labels) (l == 1 ? n1 : n0) += 1.0;
  if (n1 == 0.0 || n0 == 0.0) throw Error(ErrorCode::kDegenerateLabels, "attribute sweep needs positives and negatives");
  SweepArm arm;
  for (double d : deltas) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < log_odds.size(); ++i)
      if (log_odds[i] >= d) (labels[i] == 1 ? tp : fp) += 1.0;
    arm.tpr.push_back(tp / n1);
    arm.fpr.push_back(fp / n0);
  }
  return arm;
}

AttributeAttackResult run_attribute_attack(const AttributeImputer& treatment, const AttributeImputer& prior,
                                           const AttributeImputer& control, const Corpus& train_real,
                                           std::span<const double> delta_grid, double hide_fraction,
                                           std::uint64_t seed) {
  if (delta_grid.empty()) throw Error(ErrorCode::kEmptyGrid, "delta grid is empty");
  std::vector<PatientRecord> masked;
  const auto queries = attribute_queries(train_real, hide_fraction, seed, &masked);
  const int n = static_cast<int>(queries.size());
  std::vector<double> s_t(n), s_c(n);
  std::vector<int> labels(n);
  auto logp = [](double p) { return std::log(std::max(p, 1e-300)); };
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& q = queries[i];
    const auto& rec = masked[q.record];
    const double p0 = logp(prior.presence_probability(rec, q.visit, q.modality, q.code));
    s_t[i] = logp(treatment.presence_probability(rec, q.visit, q.modality, q.code)) - p0;
    s_c[i] = logp(control.presence_probability(rec, q.visit, q.modality, q.code)) - p0;
    labels[i] = q.label;
  }
  AttributeAttackResult r;
  r.deltas.assign(delta_grid.begin(), delta_grid.end());
  r.treatment = sweep(s_t, labels, delta_grid);
  r.control = sweep(s_c, labels, delta_grid);
  r.n_positive = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  r.n_negative = labels.size() - r.n_positive;
  return r;
}

AttributeAttackResult run_attribute_attack(const Corpus& synthetic, const Corpus& train_real, const Corpus& test_real,
                                           std::span<const double> delta_grid, double hide_fraction,
                                           std::uint64_t seed, const ImputerFactory& factory) {
  if (delta_grid.empty()) throw Error(ErrorCode::kEmptyGrid, "delta grid is empty");
  if (!(synthetic.schema == train_real.schema) || !(test_real.schema == train_real.schema))
    throw Error(ErrorCode::kSchemaMismatch, "attack corpora must share a schema");
  const auto treatment = factory(synthetic);
  const auto prior = factory(train_real);
  const auto control = factory(test_real);
  return run_attribute_attack(*treatment, *prior, *control, train_real, delta_grid, hide_fraction, seed);
}

namespace {
nlohmann::ordered_json finite_or_string(double x) {
  if (std::isfinite(x)) return x;
  return x > 0 ? "inf" : "-inf";
}
}  // namespace

void write_membership_result(const MembershipAttackResult& r, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["auc"] = r.auc;
  auto roc = nlohmann::ordered_json::array();
  for (const auto& p : r.roc) roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}});
  j["roc"] = roc;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.scores.size(); ++i)
    rows.push_back({{"id", i < r.ids.size() ? r.ids[i] : std::to_string(i)}, {"score", r.scores[i]}, {"label", r.labels[i]}});
  j["scores"] = rows;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_attribute_result(const AttributeAttackResult& r, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["n_positive"] = r.n_positive;
  j["n_negative"] = r.n_negative;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.deltas.size(); ++i)
    rows.push_back({{"delta", finite_or_string(r.deltas[i])},
                    {"treatment_tpr", r.treatment.tpr[i]},
                    {"treatment_fpr", r.treatment.fpr[i]},
                    {"control_tpr", r.control.tpr[i]},
                    {"control_fpr", r.control.fpr[i]}});
  j["sweep"] = rows;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace synthehr
