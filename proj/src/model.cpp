#include "synthehr/model.hpp"

#include <cmath>
#include <random>

#include "synthehr/error.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidSpec, m); };
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) bad("d_model must be a positive multiple of n_heads");
  if (n_encoder_layers < 0 || n_decoder_layers < 0) bad("layer counts must be nonnegative");
  if (d_ff < 1) bad("d_ff must be positive");
  if (n_prompt_tokens < 1) bad("n_prompt_tokens must be at least 1");
  if (d0 < 0) bad("d0 must be nonnegative");
  if (max_positions < 4) bad("max_positions too small");
}

ag::Tensor featurize(const PromptFeaturizerParams& params, std::span<const double> x, int n_prompt, int d_model) {
  if (static_cast<int>(x.size()) != params.W0->value.rows)
    throw Error(ErrorCode::kDimensionMismatch, "baseline has " + std::to_string(x.size()) + " features, featurizer expects " +
                                                   std::to_string(params.W0->value.rows));
  if (params.W1->value.cols != n_prompt * d_model)
    throw Error(ErrorCode::kDimensionMismatch, "W1 width is not n_prompt * d_model");
  Matrix row(1, static_cast<int>(x.size()));
  std::copy(x.begin(), x.end(), row.data.begin());
  auto h = ag::add(ag::matmul(ag::constant(std::move(row)), params.W0), params.b);
  return ag::reshape(ag::matmul(h, params.W1), n_prompt, d_model);
}

std::vector<double> token_logprobs(const LanguageModel& model, const PromptLayout& layout,
                                   const BaselineFeatures& baseline, std::span<const TokenId> target) {
  const auto& vocab = model.vocabulary();
  for (TokenId t : target)
    if (t < 0 || t >= vocab.size()) throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(t));
  if (target.empty()) return {};
  std::vector<TokenId> decoder = layout.decoder_prefix;
  decoder.insert(decoder.end(), target.begin(), target.end() - 1);
  auto ctx = model.encode(layout.encoder, baseline);
  const Matrix lp = model.next_token_logprobs(*ctx, decoder);
  const int first = static_cast<int>(layout.decoder_prefix.size()) - 1;
  std::vector<double> out(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) out[i] = lp(first + static_cast<int>(i), target[i]);
  return out;
}

namespace {

Matrix randn(int r, int c, double std, Rng& rng) {
  Matrix m(r, c);
  std::normal_distribution<double> nd(0.0, std);
  for (auto& x : m.data) x = nd(rng);
  return m;
}

AttentionParams make_attention(int d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {ag::parameter(randn(d, d, s, rng)), ag::parameter(Matrix(1, d)), ag::parameter(randn(d, d, s, rng)),
          ag::parameter(Matrix(1, d)),        ag::parameter(randn(d, d, s, rng)), ag::parameter(Matrix(1, d)),
          ag::parameter(randn(d, d, s, rng)), ag::parameter(Matrix(1, d))};
}

PromptFeaturizerParams make_featurizer(int m, int d0, int d1, Rng& rng) {
  if (m == 0) return {};
  return {ag::parameter(randn(m, d0, 1.0 / std::sqrt(static_cast<double>(m)), rng)), ag::parameter(Matrix(1, d0)),
          ag::parameter(randn(d0, d1, 1.0 / std::sqrt(static_cast<double>(d0)), rng))};
}

ag::Tensor ones(int d) { return ag::parameter(Matrix(1, d, 1.0)); }
ag::Tensor zeros(int d) { return ag::parameter(Matrix(1, d)); }

ag::Tensor linear(const ag::Tensor& x, const ag::Tensor& W, const ag::Tensor& b) {
  return ag::add_row(ag::matmul(x, W), b);
}

ag::Tensor mha(const ag::Tensor& xq, const ag::Tensor& xkv, const AttentionParams& p, int heads, bool causal) {
  auto q = linear(xq, p.Wq, p.bq);
  auto k = linear(xkv, p.Wk, p.bk);
  auto v = linear(xkv, p.Wv, p.bv);
  return linear(ag::attention(q, k, v, heads, causal), p.Wo, p.bo);
}

void add_attention_names(std::vector<std::pair<std::string, ag::Tensor>>& out, const std::string& prefix,
                         const AttentionParams& a) {
  out.push_back({prefix + ".Wq", a.Wq});
  out.push_back({prefix + ".bq", a.bq});
  out.push_back({prefix + ".Wk", a.Wk});
  out.push_back({prefix + ".bk", a.bk});
  out.push_back({prefix + ".Wv", a.Wv});
  out.push_back({prefix + ".bv", a.bv});
  out.push_back({prefix + ".Wo", a.Wo});
  out.push_back({prefix + ".bo", a.bo});
}

struct TransformerContext : EncodedContext {
  ag::Tensor memory;
  ag::Tensor decoder_prompt;
};

}  // namespace

Transformer::Transformer(Vocabulary vocab, ModelConfig config, NumericStats numeric_stats)
    : vocab_(std::move(vocab)), config_(config), stats_(std::move(numeric_stats)) {
  config_.validate();
  const auto& schema = vocab_.schema();
  if (static_cast<int>(stats_.mean.size()) != schema.m_u()) {
    stats_.mean.assign(schema.m_u(), 0.0);
    stats_.stddev.assign(schema.m_u(), 1.0);
  }
  Rng rng(derive_seed(config_.seed, "init"));
  const int d = config_.d_model, V = vocab_.size(), F = config_.d_ff, P = config_.max_positions;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  params_.E_tok = ag::parameter(randn(V, d, sd, rng));
  params_.out_bias = ag::parameter(Matrix(1, V));
  params_.pos_enc = ag::parameter(randn(P, d, 0.1, rng));
  params_.pos_dec = ag::parameter(randn(P, d, 0.1, rng));
  for (int l = 0; l < config_.n_encoder_layers; ++l) {
    EncoderLayer L;
    L.ln1_g = ones(d);
    L.ln1_b = zeros(d);
    L.self_attn = make_attention(d, rng);
    L.ln2_g = ones(d);
    L.ln2_b = zeros(d);
    L.W1 = ag::parameter(randn(d, F, sd, rng));
    L.b1 = zeros(F);
    L.W2 = ag::parameter(randn(F, d, 1.0 / std::sqrt(static_cast<double>(F)), rng));
    L.b2 = zeros(d);
    params_.encoder.push_back(std::move(L));
  }
  for (int l = 0; l < config_.n_decoder_layers; ++l) {
    DecoderLayer L;
    L.ln1_g = ones(d);
    L.ln1_b = zeros(d);
    L.self_attn = make_attention(d, rng);
    L.ln2_g = ones(d);
    L.ln2_b = zeros(d);
    L.cross_attn = make_attention(d, rng);
    L.ln3_g = ones(d);
    L.ln3_b = zeros(d);
    L.W1 = ag::parameter(randn(d, F, sd, rng));
    L.b1 = zeros(F);
    L.W2 = ag::parameter(randn(F, d, 1.0 / std::sqrt(static_cast<double>(F)), rng));
    L.b2 = zeros(d);
    params_.decoder.push_back(std::move(L));
  }
  params_.enc_ln_g = ones(d);
  params_.enc_ln_b = zeros(d);
  params_.dec_ln_g = ones(d);
  params_.dec_ln_b = zeros(d);
  const int d0 = config_.hidden_width(), d1 = config_.n_prompt_tokens * d;
  params_.enc_cat = make_featurizer(schema.m_c(), d0, d1, rng);
  params_.enc_num = make_featurizer(schema.m_u(), d0, d1, rng);
  params_.dec_cat = make_featurizer(schema.m_c(), d0, d1, rng);
  params_.dec_num = make_featurizer(schema.m_u(), d0, d1, rng);
}

std::vector<std::pair<std::string, ag::Tensor>> Transformer::named_parameters() const {
  std::vector<std::pair<std::string, ag::Tensor>> out;
  out.push_back({"tok_emb", params_.E_tok});
  out.push_back({"out_bias", params_.out_bias});
  out.push_back({"pos_enc", params_.pos_enc});
  out.push_back({"pos_dec", params_.pos_dec});
  for (std::size_t l = 0; l < params_.encoder.size(); ++l) {
    const auto& L = params_.encoder[l];
    const std::string p = "enc." + std::to_string(l);
    out.push_back({p + ".ln1.g", L.ln1_g});
    out.push_back({p + ".ln1.b", L.ln1_b});
    add_attention_names(out, p + ".self", L.self_attn);
    out.push_back({p + ".ln2.g", L.ln2_g});
    out.push_back({p + ".ln2.b", L.ln2_b});
    out.push_back({p + ".ff.W1", L.W1});
    out.push_back({p + ".ff.b1", L.b1});
    out.push_back({p + ".ff.W2", L.W2});
    out.push_back({p + ".ff.b2", L.b2});
  }
  for (std::size_t l = 0; l < params_.decoder.size(); ++l) {
    const auto& L = params_.decoder[l];
    const std::string p = "dec." + std::to_string(l);
    out.push_back({p + ".ln1.g", L.ln1_g});
    out.push_back({p + ".ln1.b", L.ln1_b});
    add_attention_names(out, p + ".self", L.self_attn);
    out.push_back({p + ".ln2.g", L.ln2_g});
    out.push_back({p + ".ln2.b", L.ln2_b});
    add_attention_names(out, p + ".cross", L.cross_attn);
    out.push_back({p + ".ln3.g", L.ln3_g});
    out.push_back({p + ".ln3.b", L.ln3_b});
    out.push_back({p + ".ff.W1", L.W1});
    out.push_back({p + ".ff.b1", L.b1});
    out.push_back({p + ".ff.W2", L.W2});
    out.push_back({p + ".ff.b2", L.b2});
  }
  out.push_back({"enc.ln.g", params_.enc_ln_g});
  out.push_back({"enc.ln.b", params_.enc_ln_b});
  out.push_back({"dec.ln.g", params_.dec_ln_g});
  out.push_back({"dec.ln.b", params_.dec_ln_b});
  auto feat = [&](const std::string& name, const PromptFeaturizerParams& f) {
    if (!f.W0) return;
    out.push_back({"prompt." + name + ".W0", f.W0});
    out.push_back({"prompt." + name + ".b", f.b});
    out.push_back({"prompt." + name + ".W1", f.W1});
  };
  feat("enc.cat", params_.enc_cat);
  feat("enc.num", params_.enc_num);
  feat("dec.cat", params_.dec_cat);
  feat("dec.num", params_.dec_num);
  return out;
}

std::unique_ptr<Transformer> Transformer::clone() const {
  auto copy = std::make_unique<Transformer>(vocab_, config_, stats_);
  auto src = named_parameters();
  auto dst = copy->named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].second->value = src[i].second->value;
  return copy;
}

void Transformer::zero_featurizers() {
  for (auto* f : {&params_.enc_cat, &params_.enc_num, &params_.dec_cat, &params_.dec_num}) {
    if (!f->W0) continue;
    for (auto* t : {&f->W0, &f->b, &f->W1})
      std::fill((*t)->value.data.begin(), (*t)->value.data.end(), 0.0);
  }
}

int Transformer::prompt_rows() const {
  int n = 0;
  if (params_.enc_cat.W0) n += config_.n_prompt_tokens;
  if (params_.enc_num.W0) n += config_.n_prompt_tokens;
  return n;
}

std::vector<double> Transformer::categorical_input(const BaselineFeatures& baseline) const {
  if (static_cast<int>(baseline.categorical.size()) != vocab_.schema().m_c())
    throw Error(ErrorCode::kDimensionMismatch, "categorical baseline length " + std::to_string(baseline.categorical.size()) +
                                                   ", schema m_c " + std::to_string(vocab_.schema().m_c()));
  return {baseline.categorical.begin(), baseline.categorical.end()};
}

std::vector<double> Transformer::numerical_input(const BaselineFeatures& baseline) const {
  if (static_cast<int>(baseline.numerical.size()) != vocab_.schema().m_u())
    throw Error(ErrorCode::kDimensionMismatch, "numerical baseline length " + std::to_string(baseline.numerical.size()) +
                                                   ", schema m_u " + std::to_string(vocab_.schema().m_u()));
  return stats_.normalize(baseline.numerical);
}

ag::Tensor Transformer::featurize_prompt(const BaselineFeatures& baseline, Side side) const {
  const auto& cat = side == Side::kEncoder ? params_.enc_cat : params_.dec_cat;
  const auto& num = side == Side::kEncoder ? params_.enc_num : params_.dec_num;
  const auto xc = categorical_input(baseline);
  const auto xn = numerical_input(baseline);
  std::vector<ag::Tensor> parts;
  if (cat.W0) parts.push_back(featurize(cat, xc, config_.n_prompt_tokens, config_.d_model));
  if (num.W0) parts.push_back(featurize(num, xn, config_.n_prompt_tokens, config_.d_model));
  if (parts.empty()) return ag::constant(Matrix(0, config_.d_model));
  if (parts.size() == 1) return parts.front();
  return ag::concat_rows(parts);
}

ag::Tensor Transformer::embed_inputs(std::span<const TokenId> ids, const BaselineFeatures& baseline, Side side) const {
  auto prompt = featurize_prompt(baseline, side);
  auto tokens = ag::gather_rows(params_.E_tok, ids);
  if (prompt->value.rows == 0) return tokens;
  std::vector<ag::Tensor> parts{prompt, tokens};
  return ag::concat_rows(parts);
}

ag::Tensor Transformer::run_encoder(const ag::Tensor& encoder_input) const {
  const int P = prompt_rows();
  const int L = encoder_input->value.rows - P;
  const int M = config_.max_positions;
  if (L > M) throw Error(ErrorCode::kDimensionMismatch, "encoder input longer than max_positions");
  std::vector<int> pos(L);
  for (int i = 0; i < L; ++i) pos[i] = M - L + i;
  auto tok = ag::add(ag::slice_rows(encoder_input, P, L), ag::gather_rows(params_.pos_enc, pos));
  ag::Tensor x = tok;
  if (P > 0) {
    std::vector<ag::Tensor> parts{ag::slice_rows(encoder_input, 0, P), tok};
    x = ag::concat_rows(parts);
  }
  const int H = config_.n_heads;
  for (const auto& Lr : params_.encoder) {
    auto h = ag::layer_norm(x, Lr.ln1_g, Lr.ln1_b);
    x = ag::add(x, mha(h, h, Lr.self_attn, H, false));
    h = ag::layer_norm(x, Lr.ln2_g, Lr.ln2_b);
    x = ag::add(x, linear(ag::gelu(linear(h, Lr.W1, Lr.b1)), Lr.W2, Lr.b2));
  }
  return ag::layer_norm(x, params_.enc_ln_g, params_.enc_ln_b);
}

ag::Tensor Transformer::run_decoder(const ag::Tensor& decoder_input, const ag::Tensor& memory) const {
  const int P = prompt_rows();
  const int L = decoder_input->value.rows - P;
  if (L > config_.max_positions) throw Error(ErrorCode::kDimensionMismatch, "decoder input longer than max_positions");
  std::vector<int> pos(L);
  for (int i = 0; i < L; ++i) pos[i] = i;
  auto tok = ag::add(ag::slice_rows(decoder_input, P, L), ag::gather_rows(params_.pos_dec, pos));
  ag::Tensor x = tok;
  if (P > 0) {
    std::vector<ag::Tensor> parts{ag::slice_rows(decoder_input, 0, P), tok};
    x = ag::concat_rows(parts);
  }
  const int H = config_.n_heads;
  for (const auto& Lr : params_.decoder) {
    auto h = ag::layer_norm(x, Lr.ln1_g, Lr.ln1_b);
    x = ag::add(x, mha(h, h, Lr.self_attn, H, true));
    h = ag::layer_norm(x, Lr.ln2_g, Lr.ln2_b);
    x = ag::add(x, mha(h, memory, Lr.cross_attn, H, false));
    h = ag::layer_norm(x, Lr.ln3_g, Lr.ln3_b);
    x = ag::add(x, linear(ag::gelu(linear(h, Lr.W1, Lr.b1)), Lr.W2, Lr.b2));
  }
  x = ag::layer_norm(ag::slice_rows(x, P, L), params_.dec_ln_g, params_.dec_ln_b);
  return ag::add_row(ag::matmul_nt(x, params_.E_tok), params_.out_bias);
}

Matrix Transformer::forward(const ag::Tensor& encoder_input, const ag::Tensor& decoder_input) const {
  ag::NoGradGuard guard;
  Matrix out = run_decoder(decoder_input, run_encoder(encoder_input))->value;
  kernels::log_softmax_rows(out);
  for (auto& x : out.data) x = std::exp(x);
  return out;
}

std::vector<TokenId> Transformer::clip_encoder(std::span<const TokenId> ids) const {
  const std::size_t M = static_cast<std::size_t>(config_.max_positions);
  if (ids.size() <= M) return {ids.begin(), ids.end()};
  // Keep <s> and the most recent tokens.
  std::vector<TokenId> out{ids.front()};
  out.insert(out.end(), ids.end() - static_cast<std::ptrdiff_t>(M - 1), ids.end());
  return out;
}

ag::Tensor Transformer::sequence_loss(const TokenSequence& encoder, const BaselineFeatures& baseline,
                                      std::span<const TokenId> decoder, std::span<const int> targets) const {
  const auto enc_ids = clip_encoder(encoder.ids);
  auto memory = run_encoder(embed_inputs(enc_ids, baseline, Side::kEncoder));
  auto logits = run_decoder(embed_inputs(decoder, baseline, Side::kDecoder), memory);
  return ag::cross_entropy(logits, targets);
}

std::shared_ptr<const EncodedContext> Transformer::encode(const TokenSequence& encoder,
                                                          const BaselineFeatures& baseline) const {
  ag::NoGradGuard guard;
  auto ctx = std::make_shared<TransformerContext>();
  const auto enc_ids = clip_encoder(encoder.ids);
  ctx->memory = run_encoder(embed_inputs(enc_ids, baseline, Side::kEncoder));
  ctx->decoder_prompt = featurize_prompt(baseline, Side::kDecoder);
  return ctx;
}

Matrix Transformer::next_token_logprobs(const EncodedContext& context, std::span<const TokenId> decoder) const {
  ag::NoGradGuard guard;
  const auto& ctx = dynamic_cast<const TransformerContext&>(context);
  auto tokens = ag::gather_rows(params_.E_tok, decoder);
  ag::Tensor input = tokens;
  if (ctx.decoder_prompt->value.rows > 0) {
    std::vector<ag::Tensor> parts{ctx.decoder_prompt, tokens};
    input = ag::concat_rows(parts);
  }
  Matrix out = run_decoder(input, ctx.memory)->value;
  kernels::log_softmax_rows(out);
  return out;
}

}  // namespace synthehr
