#include "synthehr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

namespace {

double log_sum_exp(const double* x, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

std::vector<int> visits_with(const PatientRecord& record, int k) {
  std::vector<int> out;
  for (int t = 0; t < static_cast<int>(record.visits.size()); ++t)
    if (record.visits[t].has(k)) out.push_back(t);
  return out;
}

void check_modality(const LanguageModel& model, int k) {
  if (k < 0 || k >= model.vocabulary().modality_count())
    throw Error(ErrorCode::kUnknownModality, "modality index " + std::to_string(k));
}

}  // namespace

NllSum modality_nll(const LanguageModel& model, const PromptLayout& layout, const BaselineFeatures& baseline, int k,
                    std::span<const int> codes) {
  const auto& vocab = model.vocabulary();
  check_modality(model, k);
  NllSum out;
  if (codes.empty()) return out;
  std::vector<TokenId> decoder = layout.decoder_prefix;
  if (decoder.empty() || decoder.back() != vocab.modality_open(k)) decoder.push_back(vocab.modality_open(k));
  const int first = static_cast<int>(decoder.size()) - 1;
  for (std::size_t i = 0; i + 1 < codes.size(); ++i) decoder.push_back(vocab.code_token(k, codes[i]));
  const auto ctx = model.encode(layout.encoder, baseline);
  const Matrix lp = model.next_token_logprobs(*ctx, decoder);
  const TokenId begin = vocab.code_begin(k);
  const int width = vocab.code_end(k) - begin;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const double* row = lp.row(first + static_cast<int>(i));
    const double norm = log_sum_exp(row + begin, width);
    out.nll -= row[vocab.code_token(k, codes[i])] - norm;
    ++out.count;
  }
  return out;
}

double ppl(const LanguageModel& model, const PromptLayout& layout, const BaselineFeatures& baseline,
           std::span<const TokenId> target, std::optional<std::pair<TokenId, TokenId>> support) {
  if (target.empty()) throw Error(ErrorCode::kEmptySequence, "perplexity of an empty sequence");
  if (!support) {
    const auto lp = token_logprobs(model, layout, baseline, target);
    return std::exp(-std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size()));
  }
  const auto& vocab = model.vocabulary();
  for (TokenId t : target)
    if (t < 0 || t >= vocab.size()) throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(t));
  std::vector<TokenId> decoder = layout.decoder_prefix;
  decoder.insert(decoder.end(), target.begin(), target.end() - 1);
  const auto ctx = model.encode(layout.encoder, baseline);
  const Matrix lp = model.next_token_logprobs(*ctx, decoder);
  const int first = static_cast<int>(layout.decoder_prefix.size()) - 1;
  const auto [b, e] = *support;
  double nll = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double* row = lp.row(first + static_cast<int>(i));
    nll -= row[target[i]] - log_sum_exp(row + b, e - b);
  }
  return std::exp(nll / static_cast<double>(target.size()));
}

double lpl(const LanguageModel& model, const PatientRecord& record, int k) {
  check_modality(model, k);
  const auto ts = visits_with(record, k);
  if (ts.empty()) throw Error(ErrorCode::kNoEventsOfModality, "record " + record.id + " has no events of modality " +
                                                                  model.vocabulary().schema().modality_name(k));
  double nll = 0.0;
  int count = 0;
  for (int t : ts) {
    const auto layout = build_longitudinal_prompt(model.vocabulary(), std::span(record.visits.data(), t));
    const auto s = modality_nll(model, layout, record.baseline, k, record.visits[t].codes[k]);
    nll += s.nll;
    count += s.count;
  }
  return std::exp(nll / count);
}

double mpl(const LanguageModel& model, const PatientRecord& record, int k) {
  check_modality(model, k);
  const auto ts = visits_with(record, k);
  if (ts.empty()) throw Error(ErrorCode::kNoEventsOfModality, "record " + record.id + " has no events of modality " +
                                                                  model.vocabulary().schema().modality_name(k));
  double total = 0.0;
  for (int t : ts) {
    const auto layout =
        build_crossmodal_prompt(model.vocabulary(), std::span(record.visits.data(), t), record.visits[t], k);
    const auto s = modality_nll(model, layout, record.baseline, k, record.visits[t].codes[k]);
    total += s.nll / s.count;
  }
  return std::exp(total / static_cast<double>(ts.size()));
}

double mpl_combined(const LanguageModel& model, const PatientRecord& record) {
  const int K = model.vocabulary().modality_count();
  double total = 0.0;
  int visits = 0;
  for (int t = 0; t < static_cast<int>(record.visits.size()); ++t) {
    double visit_nll = 0.0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
      if (!record.visits[t].has(k)) continue;
      const auto layout =
          build_crossmodal_prompt(model.vocabulary(), std::span(record.visits.data(), t), record.visits[t], k);
      const auto s = modality_nll(model, layout, record.baseline, k, record.visits[t].codes[k]);
      visit_nll += s.nll / s.count;
      ++present;
    }
    if (present == 0) continue;
    total += visit_nll / present;
    ++visits;
  }
  if (visits == 0) throw Error(ErrorCode::kNoEventsOfModality, "record " + record.id + " has no events");
  return std::exp(total / visits);
}

double record_ppl(const LanguageModel& model, const PatientRecord& record) {
  const auto& vocab = model.vocabulary();
  double nll = 0.0;
  std::size_t count = 0;
  for (int t = 0; t < static_cast<int>(record.visits.size()); ++t) {
    const auto layout = build_longitudinal_prompt(vocab, std::span(record.visits.data(), t));
    std::vector<TokenId> answer;
    append_visit(vocab, record.visits[t], answer);
    answer.erase(answer.begin());  // the prefix already opened the visit
    answer.push_back(t + 1 == static_cast<int>(record.visits.size()) ? Vocabulary::kEos : Vocabulary::kVisitOpen);
    const auto lp = token_logprobs(model, layout, record.baseline, answer);
    nll -= std::accumulate(lp.begin(), lp.end(), 0.0);
    count += lp.size();
  }
  if (count == 0) throw Error(ErrorCode::kEmptySequence, "record " + record.id + " has no visits");
  return std::exp(nll / static_cast<double>(count));
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error(ErrorCode::kEmptySequence, "median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {
double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
}  // namespace

double bootstrap_median_ci95(std::span<const double> values, int resamples, std::uint64_t seed) {
  if (values.empty() || resamples < 1) return 0.0;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> meds(resamples), sample(values.size());
  for (int r = 0; r < resamples; ++r) {
    for (auto& x : sample) x = values[pick(rng)];
    meds[r] = median(sample);
  }
  std::sort(meds.begin(), meds.end());
  return 0.5 * (quantile_sorted(meds, 0.975) - quantile_sorted(meds, 0.025));
}

PerplexityReport evaluate_corpus(const LanguageModel& model, const Corpus& corpus, const EvaluationOptions& options) {
  const int K = model.vocabulary().modality_count();
  const int n = static_cast<int>(corpus.records.size());
  PerplexityReport report;
  report.label = options.label;
  report.patients.resize(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& rec = corpus.records[i];
    auto& row = report.patients[i];
    row.id = rec.id;
    row.lpl.resize(K);
    row.mpl.resize(K);
    bool any = false;
    for (int k = 0; k < K; ++k) {
      if (visits_with(rec, k).empty()) continue;
      row.lpl[k] = lpl(model, rec, k);
      row.mpl[k] = mpl(model, rec, k);
      any = true;
    }
    if (any) row.mpl_combined = mpl_combined(model, rec);
  }
  for (int k = 0; k < K; ++k) {
    std::vector<double> l, m;
    for (const auto& p : report.patients) {
      if (p.lpl[k]) l.push_back(*p.lpl[k]);
      if (p.mpl[k]) m.push_back(*p.mpl[k]);
    }
    ModalityAggregate agg;
    agg.modality = model.vocabulary().schema().modality_name(k);
    agg.n = l.size();
    if (!l.empty()) {
      agg.lpl_median = median(l);
      agg.lpl_ci95 = bootstrap_median_ci95(l, options.bootstrap_resamples, derive_seed(options.seed, "lpl:" + agg.modality));
      agg.mpl_median = median(m);
      agg.mpl_ci95 = bootstrap_median_ci95(m, options.bootstrap_resamples, derive_seed(options.seed, "mpl:" + agg.modality));
    }
    report.aggregate.push_back(agg);
  }
  std::vector<double> c;
  for (const auto& p : report.patients)
    if (p.mpl_combined) c.push_back(*p.mpl_combined);
  if (!c.empty()) {
    report.mpl_combined_median = median(c);
    report.mpl_combined_ci95 = bootstrap_median_ci95(c, options.bootstrap_resamples, derive_seed(options.seed, "mpl_combined"));
  }
  return report;
}

std::string report_json(const PerplexityReport& report) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json row;
  row["label"] = report.label;
  for (const auto& a : report.aggregate)
    row[a.modality] = {{"n", a.n},
                       {"lpl", a.lpl_median},
                       {"lpl_ci95", a.lpl_ci95},
                       {"mpl", a.mpl_median},
                       {"mpl_ci95", a.mpl_ci95}};
  row["mpl_combined"] = {{"median", report.mpl_combined_median}, {"ci95", report.mpl_combined_ci95}};
  j["table"] = nlohmann::ordered_json::array({row});
  auto patients = nlohmann::ordered_json::array();
  for (const auto& p : report.patients) {
    nlohmann::ordered_json pj;
    pj["id"] = p.id;
    for (std::size_t k = 0; k < report.aggregate.size(); ++k) {
      if (!p.lpl[k]) continue;
      pj[report.aggregate[k].modality] = {{"lpl", *p.lpl[k]}, {"mpl", *p.mpl[k]}};
    }
    if (p.mpl_combined) pj["mpl_combined"] = *p.mpl_combined;
    patients.push_back(pj);
  }
  j["patients"] = patients;
  return j.dump(2);
}

void write_report(const PerplexityReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << report_json(report) << '\n';
}

}  // namespace synthehr
