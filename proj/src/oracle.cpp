#include "synthehr/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "synthehr/error.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

namespace {

void check_row(const std::vector<double>& row, std::size_t width, const std::string& what) {
  if (row.size() != width)
    throw Error(ErrorCode::kInvalidSpec, what + " has width " + std::to_string(row.size()) + ", expected " +
                                             std::to_string(width));
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error(ErrorCode::kInvalidSpec, what + " has a negative entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::kInvalidSpec, what + " is not normalized");
}

std::vector<std::string> code_names(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

int draw(const std::vector<double>& row, Rng& rng) {
  std::discrete_distribution<int> dist(row.begin(), row.end());
  return dist(rng);
}

// P(code appears) when n ~ counts draws are taken i.i.d. from a row with mass q on it.
double inclusion(const std::vector<double>& counts, double q) {
  double p = 0.0;
  for (std::size_t n = 0; n < counts.size(); ++n)
    p += counts[n] * (1.0 - std::pow(1.0 - q, static_cast<double>(n)));
  return p;
}

}  // namespace

void OracleSpec::validate() const {
  const std::size_t K = modality_names.size();
  if (K == 0) throw Error(ErrorCode::kInvalidSpec, "at least one modality required");
  if (vocabularies.size() != K) throw Error(ErrorCode::kInvalidSpec, "one vocabulary per modality required");
  for (const auto& v : vocabularies)
    if (v.empty()) throw Error(ErrorCode::kInvalidSpec, "empty vocabulary");
  const std::size_t n0 = vocabularies[0].size();
  const std::size_t n_classes =
      categorical_cardinalities.empty() ? 1 : static_cast<std::size_t>(categorical_cardinalities[0]);
  for (int c : categorical_cardinalities)
    if (c < 1) throw Error(ErrorCode::kInvalidSpec, "categorical cardinality must be positive");
  if (numerical_features < 0) throw Error(ErrorCode::kInvalidSpec, "negative numerical feature count");
  if (initial.size() != n_classes)
    throw Error(ErrorCode::kInvalidSpec, "initial needs one row per class of categorical field 0");
  for (std::size_t c = 0; c < initial.size(); ++c) check_row(initial[c], n0, "initial[" + std::to_string(c) + "]");
  if (transition.size() != n0) throw Error(ErrorCode::kInvalidSpec, "transition needs one row per primary code");
  for (std::size_t i = 0; i < n0; ++i) check_row(transition[i], n0, "transition[" + std::to_string(i) + "]");
  if (coupling.size() != K) throw Error(ErrorCode::kInvalidSpec, "coupling needs one table per modality");
  for (std::size_t k = 1; k < K; ++k) {
    if (coupling[k].size() != n0)
      throw Error(ErrorCode::kInvalidSpec, "coupling[" + std::to_string(k) + "] needs one row per primary code");
    for (std::size_t i = 0; i < n0; ++i)
      check_row(coupling[k][i], vocabularies[k].size(),
                "coupling[" + std::to_string(k) + "][" + std::to_string(i) + "]");
  }
  if (draw_counts.size() != K) throw Error(ErrorCode::kInvalidSpec, "draw_counts needs one row per modality");
  for (std::size_t k = 0; k < K; ++k)
    check_row(draw_counts[k], draw_counts[k].size(), "draw_counts[" + std::to_string(k) + "]");
  if (draw_counts[0].empty() || draw_counts[0][0] != 0.0)
    throw Error(ErrorCode::kInvalidSpec, "the primary modality needs at least one draw per visit");
  if (visit_counts.empty()) throw Error(ErrorCode::kInvalidSpec, "visit_counts is empty");
  check_row(visit_counts, visit_counts.size(), "visit_counts");
}

Schema OracleSpec::schema() const {
  int m_c = 0;
  std::vector<CategoricalField> fields;
  for (std::size_t i = 0; i < categorical_cardinalities.size(); ++i) {
    fields.push_back({"cat" + std::to_string(i), categorical_cardinalities[i]});
    m_c += categorical_cardinalities[i];
  }
  if (!fields.empty()) fields[0].name = "group";
  std::vector<std::string> nums;
  for (int i = 0; i < numerical_features; ++i) nums.push_back("num" + std::to_string(i));
  return Schema(modality_names, vocabularies, m_c, numerical_features, fields, nums);
}

int oracle_class(const OracleSpec& spec, const BaselineFeatures& baseline) {
  if (spec.categorical_cardinalities.empty()) return 0;
  for (int c = 0; c < spec.categorical_cardinalities[0]; ++c)
    if (baseline.categorical.at(c) == 1) return c;
  return 0;
}

Corpus generate_oracle_corpus(const OracleSpec& spec, int n_patients) {
  spec.validate();
  Corpus corpus{spec.schema(), {}};
  const int K = static_cast<int>(spec.modality_names.size());
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int n = 0; n < n_patients; ++n) {
    PatientRecord rec;
    char id[32];
    std::snprintf(id, sizeof(id), "P%06d", n);
    rec.id = id;
    for (int card : spec.categorical_cardinalities) {
      std::uniform_int_distribution<int> cls(0, card - 1);
      const int chosen = cls(rng);
      for (int c = 0; c < card; ++c) rec.baseline.categorical.push_back(c == chosen ? 1 : 0);
    }
    for (int i = 0; i < spec.numerical_features; ++i) rec.baseline.numerical.push_back(normal(rng));

    const int T = draw(spec.visit_counts, rng) + 1;
    const std::vector<double>* row = &spec.initial[oracle_class(spec, rec.baseline)];
    for (int t = 0; t < T; ++t) {
      Visit visit(K);
      const int n0 = draw(spec.draw_counts[0], rng);
      for (int d = 0; d < n0; ++d) {
        const int c = draw(*row, rng);
        if (std::find(visit.codes[0].begin(), visit.codes[0].end(), c) == visit.codes[0].end())
          visit.codes[0].push_back(c);
      }
      const int anchor = visit.codes[0].front();
      for (int k = 1; k < K; ++k) {
        const int nk = draw(spec.draw_counts[k], rng);
        for (int d = 0; d < nk; ++d) {
          const int c = draw(spec.coupling[k][anchor], rng);
          if (std::find(visit.codes[k].begin(), visit.codes[k].end(), c) == visit.codes[k].end())
            visit.codes[k].push_back(c);
        }
      }
      rec.visits.push_back(std::move(visit));
      row = &spec.transition[anchor];
    }
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

std::vector<double> oracle_anchor_distribution(const OracleSpec& spec, const BaselineFeatures& baseline,
                                               std::span<const Visit> history) {
  if (history.empty()) return spec.initial[oracle_class(spec, baseline)];
  const auto& last = history.back();
  if (last.codes.empty() || last.codes[0].empty())
    throw Error(ErrorCode::kInvalidSpec, "history visit lacks a primary anchor");
  return spec.transition.at(last.codes[0].front());
}

double oracle_prob(const OracleSpec& spec, const BaselineFeatures& baseline, std::span<const Visit> history,
                   int k, int code, const Visit* current) {
  const auto anchor_row = oracle_anchor_distribution(spec, baseline, history);
  if (k == 0) {
    // The anchor is the first draw, so primary inclusion follows the draw-count mixture directly.
    return inclusion(spec.draw_counts[0], anchor_row.at(code));
  }
  if (current != nullptr && current->has(0))
    return inclusion(spec.draw_counts[k], spec.coupling[k][current->codes[0].front()].at(code));
  // Marginalize over the unobserved anchor of the next visit.
  double p = 0.0;
  for (std::size_t a = 0; a < anchor_row.size(); ++a)
    if (anchor_row[a] > 0.0) p += anchor_row[a] * inclusion(spec.draw_counts[k], spec.coupling[k][a].at(code));
  return p;
}

OracleSpec chain_oracle(int vocab_size, std::uint64_t seed) {
  OracleSpec s;
  s.modality_names = {"dx"};
  s.vocabularies = {code_names("D", vocab_size)};
  s.initial = {std::vector<double>(vocab_size, 1.0 / vocab_size)};
  std::vector<int> successor(vocab_size);
  std::iota(successor.begin(), successor.end(), 0);
  Rng rng(derive_seed(seed, "chain"));
  std::shuffle(successor.begin(), successor.end(), rng);
  s.transition.assign(vocab_size, std::vector<double>(vocab_size, 0.0));
  for (int i = 0; i < vocab_size; ++i) s.transition[i][successor[i]] = 1.0;
  s.coupling = {{}};
  s.draw_counts = {{0.0, 1.0}};
  s.visit_counts = {0.0, 0.4, 0.4, 0.2};
  s.seed = seed;
  return s;
}

OracleSpec uniform_oracle(int vocab_size, std::uint64_t seed) {
  OracleSpec s;
  s.modality_names = {"dx"};
  s.vocabularies = {code_names("D", vocab_size)};
  s.initial = {std::vector<double>(vocab_size, 1.0 / vocab_size)};
  s.transition.assign(vocab_size, std::vector<double>(vocab_size, 1.0 / vocab_size));
  s.coupling = {{}};
  s.draw_counts = {{0.0, 1.0}};
  s.visit_counts = {0.0, 0.5, 0.5};
  s.seed = seed;
  return s;
}

OracleSpec coupled_oracle(const CoupledOracleOptions& o) {
  OracleSpec s;
  s.modality_names = {"dx", "lab"};
  s.vocabularies = {code_names("D", o.n_dx), code_names("L", o.n_lab)};
  s.categorical_cardinalities = {2};
  s.numerical_features = 1;
  Rng rng(derive_seed(o.seed, "coupled"));

  s.initial.assign(2, std::vector<double>(o.n_dx, 0.0));
  const int half = o.n_dx / 2;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < o.n_dx; ++i) {
      const bool own = c == 0 ? i < half : i >= half;
      const int own_size = c == 0 ? half : o.n_dx - half;
      s.initial[c][i] = (1.0 - o.class_effect) / o.n_dx + (own ? o.class_effect / own_size : 0.0);
    }
  }

  s.transition.assign(o.n_dx, std::vector<double>(o.n_dx, 0.0));
  std::vector<int> codes(o.n_dx);
  std::iota(codes.begin(), codes.end(), 0);
  const int branching = std::clamp(o.branching, 1, o.n_dx);
  for (int i = 0; i < o.n_dx; ++i) {
    std::shuffle(codes.begin(), codes.end(), rng);
    for (int b = 0; b < branching; ++b) s.transition[i][codes[b]] = 1.0 / branching;
  }

  s.coupling.resize(2);
  s.coupling[1].assign(o.n_dx, std::vector<double>(o.n_lab, 0.0));
  for (int i = 0; i < o.n_dx; ++i) {
    const int paired = i % o.n_lab;
    for (int j = 0; j < o.n_lab; ++j)
      s.coupling[1][i][j] = j == paired ? o.coupling : (1.0 - o.coupling) / (o.n_lab - 1);
  }

  s.draw_counts = {{0.0, 1.0}, {}};
  if (o.extra_lab_draws <= 0) {
    s.draw_counts[1] = {0.0, 1.0};
  } else {
    // 1 + Binomial(extra, 1/2) draws.
    s.draw_counts[1].assign(o.extra_lab_draws + 2, 0.0);
    for (int e = 0; e <= o.extra_lab_draws; ++e) {
      double c = 1.0;
      for (int i = 0; i < e; ++i) c = c * (o.extra_lab_draws - i) / (i + 1);
      s.draw_counts[1][e + 1] = c * std::pow(0.5, o.extra_lab_draws);
    }
  }
  s.visit_counts = o.visit_counts;
  s.seed = o.seed;
  return s;
}

}  // namespace synthehr
