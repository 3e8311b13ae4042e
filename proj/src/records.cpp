#include "synthehr/records.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

using nlohmann::json;

std::size_t Visit::event_count() const {
  std::size_t n = 0;
  for (const auto& c : codes) n += c.size();
  return n;
}

Schema::Schema(std::vector<std::string> modalities, std::vector<std::vector<std::string>> vocabularies,
               int m_c, int m_u, std::vector<CategoricalField> categorical_fields,
               std::vector<std::string> numerical_fields)
    : modalities_(std::move(modalities)),
      vocabularies_(std::move(vocabularies)),
      m_c_(m_c),
      m_u_(m_u),
      categorical_fields_(std::move(categorical_fields)),
      numerical_fields_(std::move(numerical_fields)) {
  if (modalities_.empty()) throw Error(ErrorCode::kSchemaMismatch, "schema needs at least one modality");
  if (modalities_.size() != vocabularies_.size())
    throw Error(ErrorCode::kSchemaMismatch, "one vocabulary per modality required");
  if (m_c_ < 0 || m_u_ < 0) throw Error(ErrorCode::kSchemaMismatch, "negative baseline width");
  std::unordered_set<std::string> names;
  for (const auto& name : modalities_) {
    if (name.empty()) throw Error(ErrorCode::kSchemaMismatch, "empty modality name");
    if (!names.insert(name).second) throw Error(ErrorCode::kSchemaMismatch, "duplicate modality '" + name + "'");
  }
  if (!categorical_fields_.empty()) {
    int total = 0;
    for (const auto& f : categorical_fields_) total += f.cardinality;
    if (total != m_c_)
      throw Error(ErrorCode::kSchemaMismatch, "categorical cardinalities sum to " + std::to_string(total) +
                                                  " but m_c is " + std::to_string(m_c_));
  }
  if (!numerical_fields_.empty() && static_cast<int>(numerical_fields_.size()) != m_u_)
    throw Error(ErrorCode::kSchemaMismatch, "numerical field names do not match m_u");
  code_lookup_.resize(vocabularies_.size());
  for (std::size_t k = 0; k < vocabularies_.size(); ++k) {
    for (std::size_t i = 0; i < vocabularies_[k].size(); ++i) {
      if (!code_lookup_[k].emplace(vocabularies_[k][i], static_cast<int>(i)).second)
        throw Error(ErrorCode::kSchemaMismatch,
                    "duplicate code '" + vocabularies_[k][i] + "' in modality " + modalities_[k]);
    }
  }
}

std::optional<int> Schema::find_modality(std::string_view name) const {
  for (std::size_t k = 0; k < modalities_.size(); ++k)
    if (modalities_[k] == name) return static_cast<int>(k);
  return std::nullopt;
}

int Schema::total_codes() const {
  int n = 0;
  for (const auto& v : vocabularies_) n += static_cast<int>(v.size());
  return n;
}

std::optional<int> Schema::find_code(int k, std::string_view code) const {
  const auto& table = code_lookup_.at(k);
  auto it = table.find(std::string(code));
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Schema::hash() const { return fnv1a64(schema_to_json(*this)); }

std::vector<double> NumericStats::normalize(const std::vector<double>& raw) const {
  if (raw.size() != mean.size())
    throw Error(ErrorCode::kDimensionMismatch, "numerical baseline has " + std::to_string(raw.size()) +
                                                   " entries, expected " + std::to_string(mean.size()));
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mean[i]) / stddev[i];
  return out;
}

NumericStats compute_numeric_stats(const Corpus& corpus) {
  const auto m = static_cast<std::size_t>(corpus.schema.m_u());
  NumericStats stats{std::vector<double>(m, 0.0), std::vector<double>(m, 1.0)};
  if (corpus.empty() || m == 0) return stats;
  const double n = static_cast<double>(corpus.size());
  for (const auto& r : corpus.records)
    for (std::size_t i = 0; i < m; ++i) stats.mean[i] += r.baseline.numerical[i];
  for (auto& v : stats.mean) v /= n;
  std::vector<double> var(m, 0.0);
  for (const auto& r : corpus.records)
    for (std::size_t i = 0; i < m; ++i) {
      const double d = r.baseline.numerical[i] - stats.mean[i];
      var[i] += d * d;
    }
  for (std::size_t i = 0; i < m; ++i) {
    const double sd = std::sqrt(var[i] / n);
    stats.stddev[i] = sd > 1e-12 ? sd : 1.0;
  }
  return stats;
}

void validate_record(const Schema& schema, const PatientRecord& record) {
  const auto& b = record.baseline;
  if (static_cast<int>(b.categorical.size()) != schema.m_c())
    throw Error(ErrorCode::kSchemaMismatch, "record " + record.id + ": categorical baseline has " +
                                                std::to_string(b.categorical.size()) + " entries, schema m_c is " +
                                                std::to_string(schema.m_c()));
  if (static_cast<int>(b.numerical.size()) != schema.m_u())
    throw Error(ErrorCode::kSchemaMismatch, "record " + record.id + ": numerical baseline has " +
                                                std::to_string(b.numerical.size()) + " entries, schema m_u is " +
                                                std::to_string(schema.m_u()));
  for (int v : b.categorical)
    if (v != 0 && v != 1)
      throw Error(ErrorCode::kSchemaMismatch, "record " + record.id + ": categorical entries must be 0 or 1");
  for (double v : b.numerical)
    if (!std::isfinite(v))
      throw Error(ErrorCode::kSchemaMismatch, "record " + record.id + ": non-finite numerical feature");
  if (record.visits.empty()) throw Error(ErrorCode::kMalformedLine, "record " + record.id + " has no visits");
  for (std::size_t t = 0; t < record.visits.size(); ++t) {
    const auto& visit = record.visits[t];
    if (static_cast<int>(visit.codes.size()) != schema.modality_count())
      throw Error(ErrorCode::kSchemaMismatch, "record " + record.id + ": visit " + std::to_string(t) +
                                                  " has wrong modality count");
    for (int k = 0; k < schema.modality_count(); ++k) {
      std::unordered_set<int> seen;
      for (int c : visit.codes[k]) {
        if (c < 0 || c >= schema.vocab_size(k))
          throw Error(ErrorCode::kUnknownCode, "record " + record.id + ": code index " + std::to_string(c) +
                                                   " outside modality " + schema.modality_name(k));
        if (!seen.insert(c).second)
          throw Error(ErrorCode::kMalformedLine, "record " + record.id + ": duplicate code '" +
                                                     schema.code_name(k, c) + "' in modality " +
                                                     schema.modality_name(k));
      }
    }
  }
}

void validate_corpus(const Corpus& corpus) {
  std::unordered_set<std::string> ids;
  for (const auto& r : corpus.records) {
    validate_record(corpus.schema, r);
    if (!ids.insert(r.id).second) throw Error(ErrorCode::kMalformedLine, "duplicate record id '" + r.id + "'");
  }
}

std::string schema_to_json(const Schema& schema) {
  json j;
  j["modalities"] = json::array();
  for (int k = 0; k < schema.modality_count(); ++k)
    j["modalities"].push_back({{"name", schema.modality_name(k)}, {"vocabulary", schema.vocabulary(k)}});
  j["m_c"] = schema.m_c();
  j["m_u"] = schema.m_u();
  j["categorical"] = json::array();
  for (const auto& f : schema.categorical_fields())
    j["categorical"].push_back({{"name", f.name}, {"cardinality", f.cardinality}});
  j["numerical"] = schema.numerical_fields();
  return j.dump();
}

Schema schema_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
    std::vector<std::string> names;
    std::vector<std::vector<std::string>> vocabs;
    for (const auto& m : j.at("modalities")) {
      names.push_back(m.at("name").get<std::string>());
      vocabs.push_back(m.at("vocabulary").get<std::vector<std::string>>());
    }
    std::vector<CategoricalField> cats;
    if (j.contains("categorical"))
      for (const auto& c : j["categorical"])
        cats.push_back({c.at("name").get<std::string>(), c.at("cardinality").get<int>()});
    std::vector<std::string> nums;
    if (j.contains("numerical")) nums = j["numerical"].get<std::vector<std::string>>();
    return Schema(std::move(names), std::move(vocabs), j.at("m_c").get<int>(), j.at("m_u").get<int>(),
                  std::move(cats), std::move(nums));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchemaMismatch, std::string("invalid schema: ") + e.what());
  }
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << content;
}

struct RawVisit {
  std::vector<std::pair<std::string, std::vector<std::string>>> events;
};

struct RawRecord {
  std::string id;
  std::vector<int> categorical;
  std::vector<double> numerical;
  std::vector<RawVisit> visits;
};

RawRecord parse_raw(const std::string& line, std::size_t line_no) {
  const auto where = "line " + std::to_string(line_no);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedLine, where + ": " + e.what());
  }
  try {
    RawRecord r;
    r.id = j.at("id").get<std::string>();
    const auto& base = j.at("baseline");
    r.categorical = base.at("categorical").get<std::vector<int>>();
    r.numerical = base.at("numerical").get<std::vector<double>>();
    for (const auto& v : j.at("visits")) {
      if (!v.is_object()) throw Error(ErrorCode::kMalformedLine, where + ": visit must be an object");
      RawVisit rv;
      for (auto it = v.begin(); it != v.end(); ++it)
        rv.events.emplace_back(it.key(), it.value().get<std::vector<std::string>>());
      r.visits.push_back(std::move(rv));
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedLine, where + ": " + e.what());
  }
}

}  // namespace

Corpus parse_corpus(std::string_view text, const std::optional<Schema>& schema) {
  std::vector<std::pair<std::size_t, RawRecord>> raws;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    ++line_no;
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      if (end == text.size()) break;
      continue;
    }
    raws.emplace_back(line_no, parse_raw(line, line_no));
    if (end == text.size()) break;
  }

  Schema resolved;
  if (schema) {
    resolved = *schema;
  } else {
    // Infer in order of first appearance.
    std::vector<std::string> names;
    std::vector<std::vector<std::string>> vocabs;
    std::vector<std::unordered_set<std::string>> seen;
    int m_c = 0, m_u = 0;
    if (!raws.empty()) {
      m_c = static_cast<int>(raws.front().second.categorical.size());
      m_u = static_cast<int>(raws.front().second.numerical.size());
    }
    for (const auto& [ln, r] : raws)
      for (const auto& v : r.visits)
        for (const auto& [name, codes] : v.events) {
          auto it = std::find(names.begin(), names.end(), name);
          std::size_t k = static_cast<std::size_t>(it - names.begin());
          if (it == names.end()) {
            names.push_back(name);
            vocabs.emplace_back();
            seen.emplace_back();
          }
          for (const auto& c : codes)
            if (seen[k].insert(c).second) vocabs[k].push_back(c);
        }
    if (names.empty()) throw Error(ErrorCode::kSchemaMismatch, "cannot infer a schema from an empty corpus");
    resolved = Schema(std::move(names), std::move(vocabs), m_c, m_u);
  }

  Corpus corpus{resolved, {}};
  corpus.records.reserve(raws.size());
  std::unordered_set<std::string> ids;
  for (auto& [ln, raw] : raws) {
    const auto where = "line " + std::to_string(ln);
    PatientRecord rec;
    rec.id = raw.id;
    rec.baseline.categorical = std::move(raw.categorical);
    rec.baseline.numerical = std::move(raw.numerical);
    for (const auto& rv : raw.visits) {
      Visit visit(resolved.modality_count());
      for (const auto& [name, codes] : rv.events) {
        auto k = resolved.find_modality(name);
        if (!k) throw Error(ErrorCode::kSchemaMismatch, where + ": unknown modality '" + name + "'");
        for (const auto& c : codes) {
          auto idx = resolved.find_code(*k, c);
          if (!idx)
            throw Error(ErrorCode::kUnknownCode, where + ": code '" + c + "' not in " + name + " vocabulary");
          visit.codes[*k].push_back(*idx);
        }
      }
      rec.visits.push_back(std::move(visit));
    }
    try {
      validate_record(resolved, rec);
    } catch (const Error& e) {
      throw Error(e.code(), where + ": " + e.what());
    }
    if (!ids.insert(rec.id).second)
      throw Error(ErrorCode::kMalformedLine, where + ": duplicate record id '" + rec.id + "'");
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, const std::optional<Schema>& schema) {
  return parse_corpus(read_file(path), schema);
}

Schema load_schema(const std::filesystem::path& path) { return schema_from_json(read_file(path)); }

void write_schema(const Schema& schema, const std::filesystem::path& path) {
  write_file(path, json::parse(schema_to_json(schema)).dump(2) + "\n");
}

std::string record_to_json_line(const Schema& schema, const PatientRecord& record) {
  nlohmann::ordered_json out;
  out["id"] = record.id;
  out["baseline"] = nlohmann::ordered_json{{"categorical", record.baseline.categorical},
                                           {"numerical", record.baseline.numerical}};
  out["visits"] = nlohmann::ordered_json::array();
  for (const auto& visit : record.visits) {
    nlohmann::ordered_json v = nlohmann::ordered_json::object();
    for (int k = 0; k < schema.modality_count(); ++k) {
      if (!visit.has(k)) continue;
      std::vector<std::string> names;
      for (int c : visit.codes[k]) names.push_back(schema.code_name(k, c));
      v[schema.modality_name(k)] = names;
    }
    out["visits"].push_back(std::move(v));
  }
  return out.dump();
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : corpus.records) {
    text += record_to_json_line(corpus.schema, r);
    text += '\n';
  }
  write_file(path, text);
}

CorpusSplits split_corpus(const Corpus& corpus, const std::array<double, 3>& fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f > 0.0)) throw Error(ErrorCode::kDegenerateFraction, "split fractions must be positive");
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-6)
    throw Error(ErrorCode::kDegenerateFraction, "split fractions must sum to 1");
  const std::size_t n = corpus.size();
  // The epsilon keeps exact ratios such as 2301/46520 from flooring one short.
  auto floor_count = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const std::size_t n_val = floor_count(fractions[1]);
  const std::size_t n_test = floor_count(fractions[2]);
  if (n_val == 0 || n_test == 0 || n_val + n_test >= n)
    throw Error(ErrorCode::kDegenerateFraction,
                "split of " + std::to_string(n) + " records leaves an empty part");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  CorpusSplits out{{corpus.schema, {}}, {corpus.schema, {}}, {corpus.schema, {}}};
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = corpus.records[order[i]];
    if (i < n_train)
      out.train.records.push_back(r);
    else if (i < n_train + n_val)
      out.val.records.push_back(r);
    else
      out.test.records.push_back(r);
  }
  return out;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats s;
  s.patients = corpus.size();
  const int K = corpus.schema.modality_count();
  std::vector<std::vector<char>> used(K);
  s.modalities.resize(K);
  for (int k = 0; k < K; ++k) {
    used[k].assign(corpus.schema.vocab_size(k), 0);
    s.modalities[k].name = corpus.schema.modality_name(k);
    s.modalities[k].vocab_size = corpus.schema.vocab_size(k);
  }
  for (const auto& r : corpus.records) {
    s.visits += r.visits.size();
    for (const auto& v : r.visits)
      for (int k = 0; k < K; ++k) {
        s.modalities[k].events += v.codes[k].size();
        for (int c : v.codes[k]) used[k][c] = 1;
      }
  }
  for (int k = 0; k < K; ++k) {
    s.events += s.modalities[k].events;
    s.modalities[k].distinct_codes =
        static_cast<std::size_t>(std::count(used[k].begin(), used[k].end(), 1));
  }
  if (s.patients > 0) {
    s.events_per_patient_exact = static_cast<double>(s.events) / static_cast<double>(s.patients);
    s.events_per_patient = std::lround(s.events_per_patient_exact);
  }
  return s;
}

}  // namespace synthehr
