#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "synthehr/records.hpp"

namespace synthehr {

using TokenId = int;

enum class TokenRole {
  kPad,
  kBos,
  kEos,
  kMask,
  kVisitOpen,
  kVisitClose,
  kModalityOpen,
  kModalityClose,
  kCode,
};

struct TokenInfo {
  TokenRole role = TokenRole::kPad;
  int modality = -1;
  int code = -1;
};

// Token ids are dense: the six specials, then an open/close pair per modality
// in schema order, then each modality's codes in vocabulary order. Code tokens
// are atomic and are written to the vocabulary file as "<modality>:<code>".
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kVisitOpen = 4;
  static constexpr TokenId kVisitClose = 5;

  explicit Vocabulary(Schema schema);

  int size() const { return static_cast<int>(tokens_.size()); }
  const Schema& schema() const { return schema_; }
  int modality_count() const { return schema_.modality_count(); }

  TokenId modality_open(int k) const { return 6 + 2 * k; }
  TokenId modality_close(int k) const { return 7 + 2 * k; }
  TokenId code_token(int k, int code) const { return code_begin_.at(k) + code; }
  TokenId code_begin(int k) const { return code_begin_.at(k); }
  TokenId code_end(int k) const { return code_begin_.at(k) + schema_.vocab_size(k); }

  // Throws Error(kUnknownToken) for ids outside the vocabulary.
  TokenInfo info(TokenId id) const;
  bool is_code(TokenId id) const { return id >= code_begin_.front() && id < size(); }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token_string(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;

  // Human-readable rendering with bare code names, e.g. "<s> <v> <dx> D1 </dx> </v> </s>".
  std::string render(std::span<const TokenId> ids) const;

  void write(const std::filesystem::path& path) const;
  static std::vector<std::string> read_tokens(const std::filesystem::path& path);

 private:
  Schema schema_;
  std::vector<TokenId> code_begin_;
  std::vector<std::string> tokens_;
};

struct SpanTag {
  int visit = -1;     // index of the enclosing visit, -1 outside visits
  int modality = -1;  // enclosing modality block, -1 outside blocks
  TokenRole role = TokenRole::kPad;
  bool operator==(const SpanTag&) const = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<SpanTag> spans;
  bool operator==(const TokenSequence&) const = default;
};

// Recomputes span annotations from ids alone. Does not validate the grammar.
std::vector<SpanTag> annotate(const Vocabulary& vocab, std::span<const TokenId> ids);
TokenSequence make_sequence(const Vocabulary& vocab, std::vector<TokenId> ids);

// <s> ( <v> ( <mod> code* </mod> )* </v> )* </s>, modalities in schema order,
// empty modalities omitted.
TokenSequence serialize(const Vocabulary& vocab, const PatientRecord& record);
std::vector<TokenId> serialize_visits(const Vocabulary& vocab, std::span<const Visit> visits);
void append_visit(const Vocabulary& vocab, const Visit& visit, std::vector<TokenId>& out);
void append_visit(const Vocabulary& vocab, const Visit& visit, std::span<const int> modality_order,
                  std::vector<TokenId>& out);

// Inverse of serialize. Modality blocks may appear in any order but at most
// once per visit; <mask> placeholders inside blocks are skipped. Throws
// GrammarError naming the first offending position.
PatientRecord parse(const Vocabulary& vocab, std::span<const TokenId> ids);
inline PatientRecord parse(const Vocabulary& vocab, const TokenSequence& tokens) {
  return parse(vocab, tokens.ids);
}

enum class TargetKind { kNextVisit, kModality };

struct TargetSpec {
  TargetKind kind = TargetKind::kNextVisit;
  int visit = 0;       // index of the target visit in the record
  int modality = -1;   // set for kModality
  bool operator==(const TargetSpec&) const = default;
};

struct PromptLayout {
  TokenSequence encoder;                // context [X]
  TargetSpec target;                    // what the answer slot [Z] denotes
  std::vector<TokenId> decoder_prefix;  // tokens preceding the answer
};

// Prefix prompt: the encoder carries the history, the decoder starts a new visit.
PromptLayout build_longitudinal_prompt(const Vocabulary& vocab, std::span<const Visit> history);

// Cloze prompt: the encoder carries the history plus the current visit without
// modality k, whose block holds a single <mask>; the decoder opens block k.
// Throws Error(kUnknownModality).
PromptLayout build_crossmodal_prompt(const Vocabulary& vocab, std::span<const Visit> history,
                                     const Visit& current, int k);

}  // namespace synthehr
