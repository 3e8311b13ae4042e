#include "synthehr/corruption.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "synthehr/error.hpp"

namespace synthehr {

void CorruptionConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(p_mask) || !prob(p_delete) || !prob(p_infill))
    throw Error(ErrorCode::kInvalidSpec, "corruption probabilities must lie in [0, 1]");
  if (!(infill_lambda > 0.0)) throw Error(ErrorCode::kInvalidSpec, "infill_lambda must be positive");
}

namespace {

struct Item {
  TokenId open = -1;  // -1 for a loose token that is not a modality block
  std::vector<TokenId> content;
  TokenId close = -1;
};

bool flip(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::bernoulli_distribution(p)(rng);
}

void corrupt_block(const Vocabulary& vocab, std::vector<TokenId>& content, const CorruptionConfig& cfg, Rng& rng,
                   CorruptionTrace& trace) {
  if (cfg.enable_span_shuffle) {
    std::vector<std::size_t> pos;
    std::vector<TokenId> codes;
    for (std::size_t i = 0; i < content.size(); ++i)
      if (vocab.is_code(content[i])) {
        pos.push_back(i);
        codes.push_back(content[i]);
      }
    std::shuffle(codes.begin(), codes.end(), rng);
    for (std::size_t j = 0; j < pos.size(); ++j) content[pos[j]] = codes[j];
  }

  if (cfg.p_infill > 0.0) {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < content.size()) {
      if (!vocab.is_code(content[i])) {
        out.push_back(content[i++]);
        continue;
      }
      std::size_t j = i;
      while (j < content.size() && vocab.is_code(content[j])) ++j;
      const int run = static_cast<int>(j - i);
      int len = 0;
      int start = 0;
      if (flip(rng, cfg.p_infill)) {
        const int draw = std::poisson_distribution<int>(cfg.infill_lambda)(rng);
        trace.infill_draws.push_back(draw);
        len = std::min(draw, run);
        if (len > 0) start = std::uniform_int_distribution<int>(0, run - len)(rng);
      }
      for (int r = 0; r < run; ++r) {
        if (len > 0 && r == start) {
          out.push_back(Vocabulary::kMask);
          ++trace.n_infilled_spans;
        }
        if (len > 0 && r >= start && r < start + len) continue;
        out.push_back(content[i + r]);
      }
      i = j;
    }
    content = std::move(out);
  }

  if (cfg.p_delete > 0.0) {
    std::vector<TokenId> out;
    for (TokenId id : content) {
      if (vocab.is_code(id) && flip(rng, cfg.p_delete)) {
        ++trace.n_deleted;
        continue;
      }
      out.push_back(id);
    }
    content = std::move(out);
  }

  if (cfg.p_mask > 0.0) {
    for (TokenId& id : content)
      if (vocab.is_code(id) && flip(rng, cfg.p_mask)) {
        id = Vocabulary::kMask;
        ++trace.n_masked;
      }
  }
}

}  // namespace

TokenSequence corrupt(const Vocabulary& vocab, const TokenSequence& tokens, const CorruptionConfig& config, Rng& rng,
                      CorruptionTrace* trace) {
  config.validate();
  CorruptionTrace local;
  CorruptionTrace& tr = trace ? *trace : local;
  const auto& ids = tokens.ids;
  std::vector<TokenId> out;
  out.reserve(ids.size());

  std::size_t i = 0;
  while (i < ids.size()) {
    if (ids[i] != Vocabulary::kVisitOpen) {
      out.push_back(ids[i++]);
      continue;
    }
    out.push_back(ids[i++]);
    std::vector<Item> items;
    while (i < ids.size() && ids[i] != Vocabulary::kVisitClose) {
      const auto ti = vocab.info(ids[i]);
      if (ti.role != TokenRole::kModalityOpen) {
        items.push_back({-1, {ids[i++]}, -1});
        continue;
      }
      Item item;
      item.open = ids[i++];
      const TokenId close = vocab.modality_close(ti.modality);
      while (i < ids.size() && ids[i] != close) item.content.push_back(ids[i++]);
      if (i < ids.size()) item.close = ids[i++];
      items.push_back(std::move(item));
    }
    if (config.enable_modality_permute) std::shuffle(items.begin(), items.end(), rng);
    for (auto& item : items) {
      if (item.open >= 0) corrupt_block(vocab, item.content, config, rng, tr);
      if (item.open >= 0) out.push_back(item.open);
      out.insert(out.end(), item.content.begin(), item.content.end());
      if (item.close >= 0) out.push_back(item.close);
    }
    if (i < ids.size()) out.push_back(ids[i++]);
  }
  return make_sequence(vocab, std::move(out));
}

namespace {

struct BlockCount {
  std::size_t codes = 0;
  std::size_t masks = 0;
};

std::map<std::pair<int, int>, BlockCount> block_counts(const TokenSequence& seq) {
  std::map<std::pair<int, int>, BlockCount> out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const auto& s = seq.spans[i];
    if (s.visit < 0 || s.modality < 0) continue;
    auto& c = out[{s.visit, s.modality}];
    if (s.role == TokenRole::kCode) ++c.codes;
    if (s.role == TokenRole::kMask) ++c.masks;
  }
  return out;
}

}  // namespace

CorruptionStats corruption_stats(const Vocabulary& vocab, const TokenSequence& before, const TokenSequence& after) {
  (void)vocab;
  const auto b = block_counts(before);
  const auto a = block_counts(after);
  CorruptionStats stats;
  for (const auto& [key, cb] : b) {
    BlockCount ca;
    if (auto it = a.find(key); it != a.end()) ca = it->second;
    const std::size_t removed = cb.codes > ca.codes ? cb.codes - ca.codes : 0;
    const std::size_t masks = ca.masks > cb.masks ? ca.masks - cb.masks : 0;
    if (removed == 0) continue;
    if (masks == 0) {
      stats.n_deleted += removed;
    } else if (masks >= removed) {
      stats.n_masked += removed;
    } else {
      stats.n_masked += masks - 1;
      stats.n_infilled_spans += 1;
    }
  }
  return stats;
}

}  // namespace synthehr
