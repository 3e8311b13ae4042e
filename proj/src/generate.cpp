#include "synthehr/generate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"

namespace synthehr {

void GenerationConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidSpec, m); };
  if (!(temperature > 0.0)) bad("temperature must be positive");
  if (top_k < 1) bad("top_k must be at least 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) bad("top_p must lie in (0, 1]");
  if (beam_width < 1) bad("beam_width must be at least 1");
  if (max_codes_per_modality < 1) bad("max_codes_per_modality must be at least 1");
  if (max_visits < 1) bad("max_visits must be at least 1");
}

Strategy parse_strategy(const std::string& name) {
  if (name == "greedy") return Strategy::kGreedy;
  if (name == "top_k") return Strategy::kTopK;
  if (name == "nucleus") return Strategy::kNucleus;
  if (name == "beam") return Strategy::kBeam;
  throw Error(ErrorCode::kInvalidSpec, "unknown strategy " + name);
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kTopK: return "top_k";
    case Strategy::kNucleus: return "nucleus";
    case Strategy::kBeam: return "beam";
  }
  return "unknown";
}

namespace {

int argmax(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Indices by descending value, ties by ascending index.
std::vector<int> rank_desc(std::span<const double> v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
  return idx;
}

}  // namespace

std::vector<double> filtered_distribution(std::span<const double> dist, const GenerationConfig& config) {
  const int n = static_cast<int>(dist.size());
  if (n == 0) throw Error(ErrorCode::kEmptySupport, "empty distribution");
  double total = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error(ErrorCode::kEmptySupport, "distribution has invalid entries");
    total += p;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::kEmptySupport, "distribution has no mass");
  std::vector<double> q(n, 0.0);
  if (config.strategy == Strategy::kGreedy || config.strategy == Strategy::kBeam) {
    q[argmax(dist)] = 1.0;
    return q;
  }
  const double inv_t = 1.0 / config.temperature;
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    if (dist[i] > 0.0) mx = std::max(mx, std::log(dist[i]) * inv_t);
  for (int i = 0; i < n; ++i) q[i] = dist[i] > 0.0 ? std::exp(std::log(dist[i]) * inv_t - mx) : 0.0;
  double z = std::accumulate(q.begin(), q.end(), 0.0);
  for (double& x : q) x /= z;

  if (config.strategy == Strategy::kTopK) {
    const auto order = rank_desc(q);
    for (std::size_t r = static_cast<std::size_t>(config.top_k); r < order.size(); ++r) q[order[r]] = 0.0;
  } else if (config.strategy == Strategy::kNucleus && config.top_p < 1.0) {
    const auto order = rank_desc(q);
    double cum = 0.0;
    std::size_t keep = order.size();
    for (std::size_t r = 0; r < order.size(); ++r) {
      cum += q[order[r]];
      if (cum >= config.top_p - 1e-12) {
        keep = r + 1;
        break;
      }
    }
    for (std::size_t r = keep; r < order.size(); ++r) q[order[r]] = 0.0;
  }
  z = std::accumulate(q.begin(), q.end(), 0.0);
  if (!(z > 0.0)) throw Error(ErrorCode::kEmptySupport, "filtering removed every token");
  for (double& x : q) x /= z;
  return q;
}

int sample_next(std::span<const double> dist, const GenerationConfig& config, Rng& rng) {
  const auto q = filtered_distribution(dist, config);
  if (config.strategy == Strategy::kGreedy || config.strategy == Strategy::kBeam) return argmax(q);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  int last = -1;
  for (int i = 0; i < static_cast<int>(q.size()); ++i) {
    if (q[i] <= 0.0) continue;
    cum += q[i];
    last = i;
    if (u < cum) return i;
  }
  return last;
}

namespace {

// Grammar state for constrained decoding of one visit or one modality block.
struct DecodeState {
  bool visit_mode = true;
  bool force_end = false;
  int max_codes = 20;
  int block = -1;
  int n_codes = 0;
  int n_blocks = 0;
  bool visit_closed = false;
  bool finished = false;
  bool end_of_record = false;
  bool truncated = false;
  std::vector<char> used_mod;
  std::vector<char> used_code;
  Visit visit;
};

DecodeState visit_state(const Vocabulary& vocab, const GenerationConfig& cfg, bool force_end) {
  DecodeState s;
  s.force_end = force_end;
  s.max_codes = cfg.max_codes_per_modality;
  s.used_mod.assign(vocab.modality_count(), 0);
  s.visit = Visit(vocab.modality_count());
  return s;
}

void open_block(const Vocabulary& vocab, DecodeState& s, int k) {
  s.block = k;
  s.n_codes = 0;
  s.used_mod[k] = 1;
  s.used_code.assign(vocab.schema().vocab_size(k), 0);
}

DecodeState block_state(const Vocabulary& vocab, const GenerationConfig& cfg, int k) {
  auto s = visit_state(vocab, cfg, false);
  s.visit_mode = false;
  open_block(vocab, s, k);
  return s;
}

std::vector<TokenId> legal_tokens(const Vocabulary& vocab, DecodeState& s) {
  std::vector<TokenId> out;
  if (s.finished) return out;
  if (s.visit_closed) {
    if (!s.force_end) out.push_back(Vocabulary::kVisitOpen);
    out.push_back(Vocabulary::kEos);
    std::sort(out.begin(), out.end());
    return out;
  }
  if (s.block < 0) {
    if (s.n_blocks > 0) out.push_back(Vocabulary::kVisitClose);
    for (int k = 0; k < vocab.modality_count(); ++k)
      if (!s.used_mod[k]) out.push_back(vocab.modality_open(k));
    return out;
  }
  const int k = s.block;
  if (s.n_codes > 0) out.push_back(vocab.modality_close(k));
  if (s.n_codes >= s.max_codes) {
    s.truncated = true;
    return out;
  }
  for (int c = 0; c < vocab.schema().vocab_size(k); ++c)
    if (!s.used_code[c]) out.push_back(vocab.code_token(k, c));
  return out;
}

void advance(const Vocabulary& vocab, DecodeState& s, TokenId tok) {
  if (s.visit_closed) {
    s.end_of_record = tok == Vocabulary::kEos;
    s.finished = true;
    return;
  }
  const auto info = vocab.info(tok);
  switch (info.role) {
    case TokenRole::kVisitClose:
      s.visit_closed = true;
      break;
    case TokenRole::kModalityOpen:
      open_block(vocab, s, info.modality);
      break;
    case TokenRole::kModalityClose:
      s.block = -1;
      ++s.n_blocks;
      if (!s.visit_mode) s.finished = true;
      break;
    case TokenRole::kCode:
      s.used_code[info.code] = 1;
      s.visit.codes[info.modality].push_back(info.code);
      ++s.n_codes;
      break;
    default:
      throw Error(ErrorCode::kGrammarViolation, "illegal token during decoding");
  }
}

// Probabilities of the legal tokens, renormalized among themselves.
std::vector<double> legal_distribution(const Matrix& logprobs, std::span<const TokenId> legal) {
  const int row = logprobs.rows - 1;
  std::vector<double> lp(legal.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < legal.size(); ++i) {
    lp[i] = logprobs(row, legal[i]);
    mx = std::max(mx, lp[i]);
  }
  if (!std::isfinite(mx)) throw Error(ErrorCode::kNumericOverflow, "no finite log-probability among legal tokens");
  double z = 0.0;
  for (double& x : lp) {
    x = std::exp(x - mx);
    z += x;
  }
  for (double& x : lp) x /= z;
  return lp;
}

DecodeState run_sampling(const LanguageModel& model, const EncodedContext& ctx, std::vector<TokenId> decoder,
                         DecodeState state, const GenerationConfig& config, Rng& rng) {
  const auto& vocab = model.vocabulary();
  while (true) {
    const auto legal = legal_tokens(vocab, state);
    if (legal.empty()) break;
    TokenId tok = legal.front();
    if (legal.size() > 1) {
      const auto dist = legal_distribution(model.next_token_logprobs(ctx, decoder), legal);
      tok = legal[sample_next(dist, config, rng)];
    }
    advance(vocab, state, tok);
    decoder.push_back(tok);
  }
  return state;
}

struct Beam {
  std::vector<TokenId> decoder;
  DecodeState state;
  double score = 0.0;
};

DecodeState run_beam(const LanguageModel& model, const EncodedContext& ctx, std::vector<TokenId> decoder,
                     DecodeState state, const GenerationConfig& config) {
  const auto& vocab = model.vocabulary();
  std::vector<Beam> beams{{std::move(decoder), std::move(state), 0.0}};
  while (true) {
    std::vector<Beam> pool;
    bool any_open = false;
    for (auto& b : beams) {
      auto legal = legal_tokens(vocab, b.state);
      if (legal.empty()) {
        pool.push_back(b);
        continue;
      }
      any_open = true;
      std::vector<double> dist(1, 1.0);
      if (legal.size() > 1) dist = legal_distribution(model.next_token_logprobs(ctx, b.decoder), legal);
      for (std::size_t i = 0; i < legal.size(); ++i) {
        if (dist[i] <= 0.0) continue;
        Beam nb = b;
        advance(vocab, nb.state, legal[i]);
        nb.decoder.push_back(legal[i]);
        nb.score += std::log(dist[i]);
        pool.push_back(std::move(nb));
      }
    }
    if (!any_open) break;
    std::stable_sort(pool.begin(), pool.end(), [](const Beam& a, const Beam& b) { return a.score > b.score; });
    if (pool.size() > static_cast<std::size_t>(config.beam_width)) pool.resize(config.beam_width);
    beams = std::move(pool);
  }
  return beams.front().state;
}

DecodeState run_decode(const LanguageModel& model, const EncodedContext& ctx, std::vector<TokenId> decoder,
                       DecodeState state, const GenerationConfig& config, Rng& rng) {
  if (config.strategy == Strategy::kBeam) return run_beam(model, ctx, std::move(decoder), std::move(state), config);
  return run_sampling(model, ctx, std::move(decoder), std::move(state), config, rng);
}

}  // namespace

ImputedVisit impute_next_visit(const LanguageModel& model, std::span<const Visit> history,
                               const BaselineFeatures& baseline, const GenerationConfig& config, Rng& rng,
                               bool force_end) {
  config.validate();
  const auto& vocab = model.vocabulary();
  const auto layout = build_longitudinal_prompt(vocab, history);
  const auto ctx = model.encode(layout.encoder, baseline);
  auto s = run_decode(model, *ctx, layout.decoder_prefix, visit_state(vocab, config, force_end), config, rng);
  return {std::move(s.visit), s.end_of_record, s.truncated};
}

ImputedCodes impute_modality(const LanguageModel& model, std::span<const Visit> history, const Visit& current, int k,
                             const BaselineFeatures& baseline, const GenerationConfig& config, Rng& rng,
                             std::span<const int> forced) {
  config.validate();
  const auto& vocab = model.vocabulary();
  const auto layout = build_crossmodal_prompt(vocab, history, current, k);
  const auto ctx = model.encode(layout.encoder, baseline);
  auto state = block_state(vocab, config, k);
  auto decoder = layout.decoder_prefix;
  for (int c : forced) {
    if (c < 0 || c >= vocab.schema().vocab_size(k) || state.used_code[c])
      throw Error(ErrorCode::kUnknownCode, "forced code " + std::to_string(c) + " invalid for modality " +
                                               vocab.schema().modality_name(k));
    const TokenId tok = vocab.code_token(k, c);
    advance(vocab, state, tok);
    decoder.push_back(tok);
  }
  auto s = run_decode(model, *ctx, std::move(decoder), std::move(state), config, rng);
  return {std::move(s.visit.codes[k]), s.truncated};
}

GeneratedRecord generate_record(const LanguageModel& model, const BaselineFeatures& baseline,
                                const GenerationConfig& config, Rng& rng) {
  GeneratedRecord out;
  out.record.baseline = baseline;
  while (true) {
    const bool last = static_cast<int>(out.record.visits.size()) + 1 >= config.max_visits;
    auto v = impute_next_visit(model, out.record.visits, baseline, config, rng, last);
    out.truncated = out.truncated || v.truncated;
    out.record.visits.push_back(std::move(v.visit));
    if (v.end_of_record || last) break;
  }
  return out;
}

Corpus generate_corpus(const LanguageModel& model, std::span<const BaselineFeatures> baselines,
                       const GenerationConfig& config, std::size_t* truncated) {
  config.validate();
  Corpus corpus;
  corpus.schema = model.vocabulary().schema();
  const int n = static_cast<int>(baselines.size());
  corpus.records.resize(n);
  std::vector<char> cut(n, 0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    auto g = generate_record(model, baselines[i], config, rng);
    char id[32];
    std::snprintf(id, sizeof id, "S%06d", i);
    g.record.id = id;
    corpus.records[i] = std::move(g.record);
    cut[i] = g.truncated;
  }
  if (truncated) *truncated = static_cast<std::size_t>(std::count(cut.begin(), cut.end(), 1));
  return corpus;
}

std::vector<BaselineFeatures> sample_baselines(const Corpus& train, std::size_t n, Rng& rng) {
  if (train.empty()) throw Error(ErrorCode::kEmptySequence, "no training records to draw baselines from");
  std::vector<BaselineFeatures> out;
  out.reserve(n);
  std::uniform_int_distribution<std::size_t> pick(0, train.records.size() - 1);
  for (std::size_t i = 0; i < n; ++i) out.push_back(train.records[pick(rng)].baseline);
  return out;
}

const SlotPolicy& CompletionPolicy::at(int visit, int modality) const {
  if (auto it = overrides.find({visit, modality}); it != overrides.end()) return it->second;
  if (auto it = modality_policy.find(modality); it != modality_policy.end()) return it->second;
  return default_policy;
}

void CompletionPolicy::validate() const {
  auto check = [](const SlotPolicy& p) {
    if (p.fraction < 0.0 || p.fraction > 1.0) throw Error(ErrorCode::kInvalidSpec, "removal fraction must lie in [0, 1]");
  };
  check(default_policy);
  for (const auto& [key, p] : overrides) check(p);
  for (const auto& [key, p] : modality_policy) check(p);
}

CompletedRecord complete_record(const LanguageModel& model, const PatientRecord& real, const CompletionPolicy& policy,
                                const GenerationConfig& config) {
  policy.validate();
  const int K = model.vocabulary().modality_count();
  Rng rng(derive_seed(policy.seed, real.id));
  CompletedRecord out;
  out.record.id = real.id;
  out.record.baseline = real.baseline;
  for (int t = 0; t < static_cast<int>(real.visits.size()); ++t) {
    const Visit& orig = real.visits[t];
    Visit kept = orig;
    std::vector<char> touched(K, 0);
    for (int k = 0; k < K; ++k) {
      const auto& codes = orig.codes[k];
      if (codes.empty()) continue;
      const auto& p = policy.at(t, k);
      if (p.action == CompletionAction::kRemoveAll) {
        kept.codes[k].clear();
        touched[k] = 1;
      } else if (p.action == CompletionAction::kRemoveRandom) {
        const int n = static_cast<int>(codes.size());
        const int remove = std::min(n - 1, static_cast<int>(std::floor(p.fraction * n + 0.5)));
        if (remove <= 0) continue;
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<char> drop(n, 0);
        for (int i = 0; i < remove; ++i) drop[idx[i]] = 1;
        kept.codes[k].clear();
        for (int i = 0; i < n; ++i)
          if (!drop[i]) kept.codes[k].push_back(codes[i]);
        touched[k] = 1;
      }
    }
    std::vector<std::vector<bool>> flags(K);
    for (int k = 0; k < K; ++k) flags[k].assign(kept.codes[k].size(), false);
    for (int k = 0; k < K; ++k) {
      if (!touched[k]) continue;
      const std::vector<int> forced = kept.codes[k];
      Visit context = kept;
      context.codes[k].clear();
      auto imputed = impute_modality(model, out.record.visits, context, k, real.baseline, config, rng, forced);
      kept.codes[k] = std::move(imputed.codes);
      flags[k].assign(kept.codes[k].size(), true);
      for (std::size_t i = 0; i < forced.size(); ++i) flags[k][i] = false;
    }
    out.record.visits.push_back(std::move(kept));
    out.imputed.push_back(std::move(flags));
  }
  return out;
}

void write_provenance(const Schema& schema, std::span<const CompletedRecord> records,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.record.id;
    auto imputed = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < r.imputed.size(); ++t)
      for (int k = 0; k < schema.modality_count(); ++k) {
        std::vector<std::string> codes;
        for (std::size_t i = 0; i < r.imputed[t][k].size(); ++i)
          if (r.imputed[t][k][i]) codes.push_back(schema.code_name(k, r.record.visits[t].codes[k][i]));
        if (!codes.empty())
          imputed.push_back({{"visit", t}, {"modality", schema.modality_name(k)}, {"codes", codes}});
      }
    j["imputed"] = imputed;
    out << j.dump() << '\n';
  }
}

}  // namespace synthehr
