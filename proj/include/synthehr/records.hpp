#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace synthehr {

struct ModalityId {
  int index = 0;
  std::string name;
};

// A code is addressed by its modality and its index in that modality's vocabulary.
struct EventCode {
  int modality = 0;
  int code = 0;
  bool operator==(const EventCode&) const = default;
};

// Events of one admission. codes[k] lists modality k's code indices in stored
// order; an empty list means the modality is absent from the visit.
struct Visit {
  std::vector<std::vector<int>> codes;

  Visit() = default;
  explicit Visit(int n_modalities) : codes(static_cast<std::size_t>(n_modalities)) {}

  bool has(int k) const { return k < static_cast<int>(codes.size()) && !codes[k].empty(); }
  std::size_t event_count() const;
  bool operator==(const Visit&) const = default;
};

struct BaselineFeatures {
  std::vector<int> categorical;   // multi-hot, length m_c
  std::vector<double> numerical;  // raw values, length m_u
  bool operator==(const BaselineFeatures&) const = default;
};

struct PatientRecord {
  std::string id;
  BaselineFeatures baseline;
  std::vector<Visit> visits;
  bool operator==(const PatientRecord&) const = default;
};

struct CategoricalField {
  std::string name;
  int cardinality = 0;
  bool operator==(const CategoricalField&) const = default;
};

class Schema {
 public:
  Schema() = default;
  Schema(std::vector<std::string> modalities, std::vector<std::vector<std::string>> vocabularies,
         int m_c, int m_u, std::vector<CategoricalField> categorical_fields = {},
         std::vector<std::string> numerical_fields = {});

  int modality_count() const { return static_cast<int>(modalities_.size()); }
  const std::vector<std::string>& modalities() const { return modalities_; }
  const std::string& modality_name(int k) const { return modalities_.at(k); }
  ModalityId modality(int k) const { return {k, modalities_.at(k)}; }
  std::optional<int> find_modality(std::string_view name) const;

  const std::vector<std::string>& vocabulary(int k) const { return vocabularies_.at(k); }
  int vocab_size(int k) const { return static_cast<int>(vocabularies_.at(k).size()); }
  int total_codes() const;
  std::optional<int> find_code(int k, std::string_view code) const;
  const std::string& code_name(int k, int code) const { return vocabularies_.at(k).at(code); }

  int m_c() const { return m_c_; }
  int m_u() const { return m_u_; }
  const std::vector<CategoricalField>& categorical_fields() const { return categorical_fields_; }
  const std::vector<std::string>& numerical_fields() const { return numerical_fields_; }

  // Stable 64-bit hash of the canonical serialized form.
  std::uint64_t hash() const;

  bool operator==(const Schema& other) const {
    return modalities_ == other.modalities_ && vocabularies_ == other.vocabularies_ &&
           m_c_ == other.m_c_ && m_u_ == other.m_u_ &&
           categorical_fields_ == other.categorical_fields_ &&
           numerical_fields_ == other.numerical_fields_;
  }

 private:
  std::vector<std::string> modalities_;
  std::vector<std::vector<std::string>> vocabularies_;
  int m_c_ = 0;
  int m_u_ = 0;
  std::vector<CategoricalField> categorical_fields_;
  std::vector<std::string> numerical_fields_;
  std::vector<std::unordered_map<std::string, int>> code_lookup_;
};

struct Corpus {
  Schema schema;
  std::vector<PatientRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

// Per-feature mean/std of the raw numerical baseline, used to normalize at
// featurization time. A zero std is stored as 1.
struct NumericStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  std::vector<double> normalize(const std::vector<double>& raw) const;
  bool operator==(const NumericStats&) const = default;
};

NumericStats compute_numeric_stats(const Corpus& corpus);

// Throws Error (unknown-code / schema-mismatch / malformed-line) on violation.
void validate_record(const Schema& schema, const PatientRecord& record);
void validate_corpus(const Corpus& corpus);

Schema load_schema(const std::filesystem::path& path);
void write_schema(const Schema& schema, const std::filesystem::path& path);
std::string schema_to_json(const Schema& schema);
Schema schema_from_json(std::string_view text);

// Line-delimited records. Without a schema the modalities and vocabularies are
// inferred in order of first appearance.
Corpus load_corpus(const std::filesystem::path& path, const std::optional<Schema>& schema = std::nullopt);
Corpus parse_corpus(std::string_view text, const std::optional<Schema>& schema = std::nullopt);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
std::string record_to_json_line(const Schema& schema, const PatientRecord& record);

struct CorpusSplits {
  Corpus train;
  Corpus val;
  Corpus test;
};

// val and test take floor(N * fraction); the remainder goes to train.
CorpusSplits split_corpus(const Corpus& corpus, const std::array<double, 3>& fractions,
                          std::uint64_t seed);

struct ModalityUsage {
  std::string name;
  std::size_t events = 0;
  std::size_t distinct_codes = 0;
  std::size_t vocab_size = 0;
};

struct CorpusStats {
  std::size_t patients = 0;
  std::size_t visits = 0;
  std::size_t events = 0;
  long events_per_patient = 0;  // rounded for display
  double events_per_patient_exact = 0.0;
  std::vector<ModalityUsage> modalities;
};

CorpusStats corpus_stats(const Corpus& corpus);

}  // namespace synthehr
