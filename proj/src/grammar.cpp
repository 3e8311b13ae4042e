#include "synthehr/grammar.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "synthehr/error.hpp"

namespace synthehr {

Vocabulary::Vocabulary(Schema schema) : schema_(std::move(schema)) {
  tokens_ = {"<pad>", "<s>", "</s>", "<mask>", "<v>", "</v>"};
  const int K = schema_.modality_count();
  for (int k = 0; k < K; ++k) {
    tokens_.push_back("<" + schema_.modality_name(k) + ">");
    tokens_.push_back("</" + schema_.modality_name(k) + ">");
  }
  for (int k = 0; k < K; ++k) {
    code_begin_.push_back(static_cast<TokenId>(tokens_.size()));
    for (const auto& code : schema_.vocabulary(k)) tokens_.push_back(schema_.modality_name(k) + ":" + code);
  }
}

TokenInfo Vocabulary::info(TokenId id) const {
  if (id < 0 || id >= size()) throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(id));
  switch (id) {
    case kPad: return {TokenRole::kPad};
    case kBos: return {TokenRole::kBos};
    case kEos: return {TokenRole::kEos};
    case kMask: return {TokenRole::kMask};
    case kVisitOpen: return {TokenRole::kVisitOpen};
    case kVisitClose: return {TokenRole::kVisitClose};
    default: break;
  }
  if (id < code_begin_.front()) {
    const int k = (id - 6) / 2;
    return {(id - 6) % 2 == 0 ? TokenRole::kModalityOpen : TokenRole::kModalityClose, k};
  }
  const auto it = std::upper_bound(code_begin_.begin(), code_begin_.end(), id);
  const int k = static_cast<int>(it - code_begin_.begin()) - 1;
  return {TokenRole::kCode, k, id - code_begin_[k]};
}

const std::string& Vocabulary::token_string(TokenId id) const {
  if (id < 0 || id >= size()) throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) return std::nullopt;
  return static_cast<TokenId>(it - tokens_.begin());
}

std::string Vocabulary::render(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    const auto ti = info(ids[i]);
    out += ti.role == TokenRole::kCode ? schema_.code_name(ti.modality, ti.code) : tokens_[ids[i]];
  }
  return out;
}

void Vocabulary::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::vector<std::string> Vocabulary::read_tokens(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::vector<SpanTag> annotate(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::vector<SpanTag> spans;
  spans.reserve(ids.size());
  int visit = -1;
  int next_visit = 0;
  int modality = -1;
  for (TokenId id : ids) {
    const auto ti = vocab.info(id);
    SpanTag tag{visit, modality, ti.role};
    switch (ti.role) {
      case TokenRole::kVisitOpen:
        visit = next_visit++;
        tag.visit = visit;
        break;
      case TokenRole::kVisitClose:
        visit = -1;
        modality = -1;
        break;
      case TokenRole::kModalityOpen:
        modality = ti.modality;
        tag.modality = modality;
        break;
      case TokenRole::kModalityClose:
        modality = -1;
        break;
      case TokenRole::kCode:
        tag.modality = ti.modality;
        break;
      default:
        break;
    }
    spans.push_back(tag);
  }
  return spans;
}

TokenSequence make_sequence(const Vocabulary& vocab, std::vector<TokenId> ids) {
  TokenSequence seq;
  seq.spans = annotate(vocab, ids);
  seq.ids = std::move(ids);
  return seq;
}

void append_visit(const Vocabulary& vocab, const Visit& visit, std::span<const int> modality_order,
                  std::vector<TokenId>& out) {
  out.push_back(Vocabulary::kVisitOpen);
  for (int k : modality_order) {
    if (!visit.has(k)) continue;
    out.push_back(vocab.modality_open(k));
    for (int c : visit.codes[k]) out.push_back(vocab.code_token(k, c));
    out.push_back(vocab.modality_close(k));
  }
  out.push_back(Vocabulary::kVisitClose);
}

void append_visit(const Vocabulary& vocab, const Visit& visit, std::vector<TokenId>& out) {
  std::vector<int> order(static_cast<std::size_t>(vocab.modality_count()));
  std::iota(order.begin(), order.end(), 0);
  append_visit(vocab, visit, order, out);
}

std::vector<TokenId> serialize_visits(const Vocabulary& vocab, std::span<const Visit> visits) {
  std::vector<TokenId> ids{Vocabulary::kBos};
  for (const auto& v : visits) append_visit(vocab, v, ids);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

TokenSequence serialize(const Vocabulary& vocab, const PatientRecord& record) {
  for (const auto& v : record.visits) {
    if (static_cast<int>(v.codes.size()) != vocab.modality_count())
      throw Error(ErrorCode::kSchemaMismatch, "visit modality count does not match vocabulary");
    for (int k = 0; k < vocab.modality_count(); ++k)
      for (int c : v.codes[k])
        if (c < 0 || c >= vocab.schema().vocab_size(k))
          throw Error(ErrorCode::kUnknownCode, "code index " + std::to_string(c) + " in modality " +
                                                   vocab.schema().modality_name(k));
  }
  return make_sequence(vocab, serialize_visits(vocab, record.visits));
}

PatientRecord parse(const Vocabulary& vocab, std::span<const TokenId> ids) {
  const int K = vocab.modality_count();
  auto token_name = [&](std::size_t i) {
    return ids[i] >= 0 && ids[i] < vocab.size() ? vocab.token_string(ids[i]) : std::to_string(ids[i]);
  };
  auto role_at = [&](std::size_t i) -> TokenInfo {
    if (ids[i] < 0 || ids[i] >= vocab.size()) throw GrammarError(i, "unknown token id " + std::to_string(ids[i]));
    return vocab.info(ids[i]);
  };

  PatientRecord rec;
  if (ids.empty()) throw GrammarError(0, "empty sequence");
  if (ids[0] != Vocabulary::kBos) throw GrammarError(0, "expected <s>, found " + token_name(0));
  std::size_t i = 1;
  while (true) {
    if (i >= ids.size()) throw GrammarError(i, "missing </s>");
    const auto ti = role_at(i);
    if (ti.role == TokenRole::kEos) {
      if (i + 1 != ids.size()) throw GrammarError(i + 1, "tokens after </s>");
      break;
    }
    if (ti.role != TokenRole::kVisitOpen) throw GrammarError(i, "expected <v> or </s>, found " + token_name(i));
    ++i;
    Visit visit(K);
    std::vector<char> seen(K, 0);
    while (true) {
      if (i >= ids.size()) throw GrammarError(i, "unterminated visit");
      const auto vi = role_at(i);
      if (vi.role == TokenRole::kVisitClose) {
        ++i;
        break;
      }
      if (vi.role != TokenRole::kModalityOpen)
        throw GrammarError(i, "expected a modality block or </v>, found " + token_name(i));
      const int k = vi.modality;
      if (seen[k]) throw GrammarError(i, "modality " + vocab.schema().modality_name(k) + " repeated in visit");
      seen[k] = 1;
      ++i;
      while (true) {
        if (i >= ids.size()) throw GrammarError(i, "unterminated modality block");
        const auto ci = role_at(i);
        if (ci.role == TokenRole::kModalityClose && ci.modality == k) {
          ++i;
          break;
        }
        if (ci.role == TokenRole::kMask) {
          ++i;
          continue;
        }
        if (ci.role != TokenRole::kCode || ci.modality != k)
          throw GrammarError(i, "unexpected " + token_name(i) + " inside <" +
                                    vocab.schema().modality_name(k) + "> block");
        auto& codes = visit.codes[k];
        if (std::find(codes.begin(), codes.end(), ci.code) != codes.end())
          throw GrammarError(i, "duplicate code " + token_name(i));
        codes.push_back(ci.code);
        ++i;
      }
    }
    rec.visits.push_back(std::move(visit));
  }
  return rec;
}

PromptLayout build_longitudinal_prompt(const Vocabulary& vocab, std::span<const Visit> history) {
  PromptLayout layout;
  layout.encoder = make_sequence(vocab, serialize_visits(vocab, history));
  layout.target = {TargetKind::kNextVisit, static_cast<int>(history.size()), -1};
  layout.decoder_prefix = {Vocabulary::kBos, Vocabulary::kVisitOpen};
  return layout;
}

PromptLayout build_crossmodal_prompt(const Vocabulary& vocab, std::span<const Visit> history,
                                     const Visit& current, int k) {
  if (k < 0 || k >= vocab.modality_count())
    throw Error(ErrorCode::kUnknownModality, "modality index " + std::to_string(k));
  std::vector<TokenId> ids{Vocabulary::kBos};
  for (const auto& v : history) append_visit(vocab, v, ids);
  ids.push_back(Vocabulary::kVisitOpen);
  for (int m = 0; m < vocab.modality_count(); ++m) {
    if (m == k) {
      ids.push_back(vocab.modality_open(k));
      ids.push_back(Vocabulary::kMask);
      ids.push_back(vocab.modality_close(k));
      continue;
    }
    if (!current.has(m)) continue;
    ids.push_back(vocab.modality_open(m));
    for (int c : current.codes[m]) ids.push_back(vocab.code_token(m, c));
    ids.push_back(vocab.modality_close(m));
  }
  ids.push_back(Vocabulary::kVisitClose);
  ids.push_back(Vocabulary::kEos);

  PromptLayout layout;
  layout.encoder = make_sequence(vocab, std::move(ids));
  layout.target = {TargetKind::kModality, static_cast<int>(history.size()), k};
  layout.decoder_prefix = {Vocabulary::kBos, vocab.modality_open(k)};
  return layout;
}

}  // namespace synthehr
