#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "synthehr/autograd.hpp"
#include "synthehr/grammar.hpp"
#include "synthehr/records.hpp"

namespace synthehr {

enum class Side { kEncoder, kDecoder };

struct ModelConfig {
  int d_model = 128;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int n_prompt_tokens = 1;
  int d0 = 0;  // featurizer hidden width; 0 means d_model
  int max_positions = 512;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidSpec).
  void validate() const;
  int hidden_width() const { return d0 > 0 ? d0 : d_model; }
};

// E = (x W0 + b) W1, reshaped to n_prompt × d_model.
struct PromptFeaturizerParams {
  ag::Tensor W0;  // m × d0
  ag::Tensor b;   // 1 × d0
  ag::Tensor W1;  // d0 × (n_prompt · d_model)
};

ag::Tensor featurize(const PromptFeaturizerParams& params, std::span<const double> x, int n_prompt, int d_model);

// Opaque per-call state produced by LanguageModel::encode.
struct EncodedContext {
  virtual ~EncodedContext() = default;
};

// Anything that can score decoder continuations given an encoder context.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::shared_ptr<const EncodedContext> encode(const TokenSequence& encoder,
                                                       const BaselineFeatures& baseline) const = 0;
  // Row i holds log p(· | decoder[0..i]) over the whole vocabulary.
  virtual Matrix next_token_logprobs(const EncodedContext& context, std::span<const TokenId> decoder) const = 0;
};

// Teacher-forced log p(target_i | prefix, target_<i) for the answer slot of `layout`.
// Throws Error(kUnknownToken).
std::vector<double> token_logprobs(const LanguageModel& model, const PromptLayout& layout,
                                   const BaselineFeatures& baseline, std::span<const TokenId> target);

struct AttentionParams {
  ag::Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
};

struct EncoderLayer {
  ag::Tensor ln1_g, ln1_b;
  AttentionParams self_attn;
  ag::Tensor ln2_g, ln2_b;
  ag::Tensor W1, b1, W2, b2;
};

struct DecoderLayer {
  ag::Tensor ln1_g, ln1_b;
  AttentionParams self_attn;
  ag::Tensor ln2_g, ln2_b;
  AttentionParams cross_attn;
  ag::Tensor ln3_g, ln3_b;
  ag::Tensor W1, b1, W2, b2;
};

struct ModelParams {
  ag::Tensor E_tok;    // |vocab| × d_model, shared by encoder, decoder and output
  ag::Tensor out_bias; // 1 × |vocab|
  ag::Tensor pos_enc;  // max_positions × d_model, right-aligned
  ag::Tensor pos_dec;  // max_positions × d_model
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  ag::Tensor enc_ln_g, enc_ln_b, dec_ln_g, dec_ln_b;
  // Absent (null W0) when the schema has no fields of that kind.
  PromptFeaturizerParams enc_cat, enc_num, dec_cat, dec_num;
};

class Transformer : public LanguageModel {
 public:
  Transformer(Vocabulary vocab, ModelConfig config, NumericStats numeric_stats);

  const Vocabulary& vocabulary() const override { return vocab_; }
  const ModelConfig& config() const { return config_; }
  const NumericStats& numeric_stats() const { return stats_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Stable names in a fixed order; used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, ag::Tensor>> named_parameters() const;
  std::unique_ptr<Transformer> clone() const;
  void zero_featurizers();

  // Prompt rows per side: n_prompt for each featurizer that exists.
  int prompt_rows() const;
  // [E_cat; E_num] for one side. Throws Error(kDimensionMismatch).
  ag::Tensor featurize_prompt(const BaselineFeatures& baseline, Side side) const;
  // [prompt block; E_tok rows of ids] without positions.
  ag::Tensor embed_inputs(std::span<const TokenId> ids, const BaselineFeatures& baseline, Side side) const;

  // Encoder memory for embedded input; positions are added to token rows.
  ag::Tensor run_encoder(const ag::Tensor& encoder_input) const;
  // Logits (token rows only) for embedded decoder input attending to memory.
  ag::Tensor run_decoder(const ag::Tensor& decoder_input, const ag::Tensor& memory) const;
  // Next-token distributions for every decoder token row.
  Matrix forward(const ag::Tensor& encoder_input, const ag::Tensor& decoder_input) const;

  // Summed NLL of targets[i] at decoder row i (targets < 0 ignored).
  ag::Tensor sequence_loss(const TokenSequence& encoder, const BaselineFeatures& baseline,
                           std::span<const TokenId> decoder, std::span<const int> targets) const;

  std::shared_ptr<const EncodedContext> encode(const TokenSequence& encoder,
                                               const BaselineFeatures& baseline) const override;
  Matrix next_token_logprobs(const EncodedContext& context, std::span<const TokenId> decoder) const override;

 private:
  Vocabulary vocab_;
  ModelConfig config_;
  NumericStats stats_;
  ModelParams params_;

  std::vector<double> categorical_input(const BaselineFeatures& baseline) const;
  std::vector<double> numerical_input(const BaselineFeatures& baseline) const;
  std::vector<TokenId> clip_encoder(std::span<const TokenId> ids) const;
};

}  // namespace synthehr
