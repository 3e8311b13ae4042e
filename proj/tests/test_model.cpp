#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "synthehr/checkpoint.hpp"
#include "synthehr/error.hpp"
#include "synthehr/model.hpp"
#include "test_support.hpp"

using namespace synthehr;
namespace fs = std::filesystem;

namespace {
ModelConfig tiny(int d = 8) {
  ModelConfig c;
  c.d_model = d;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 64;
  c.seed = 3;
  return c;
}

struct Fixture {
  Schema schema = testsupport::small_schema(6, 5, 2, 2);
  Vocabulary vocab{schema};
  NumericStats stats{{0.0, 0.0}, {1.0, 1.0}};
  Transformer model{vocab, tiny(), stats};
  PatientRecord record;
  BaselineFeatures other;

  Fixture() {
    Rng rng(7);
    record = testsupport::random_record(schema, rng, 3, 3);
    other = record.baseline;
    other.categorical = {record.baseline.categorical[1], record.baseline.categorical[0]};
    other.numerical = {record.baseline.numerical[0] + 1.0, record.baseline.numerical[1] - 2.0};
  }
};

Matrix random_matrix(int r, int c, Rng& rng) {
  Matrix m(r, c);
  std::normal_distribution<double> nd;
  for (auto& x : m.data) x = nd(rng);
  return m;
}
}  // namespace

TEST_CASE("featurizer arithmetic") {
  PromptFeaturizerParams p;
  Matrix I(2, 2);
  I(0, 0) = I(1, 1) = 1.0;
  p.W0 = ag::constant(I);
  p.b = ag::constant(Matrix(1, 2));
  p.W1 = ag::constant(I);
  const std::vector<double> x{1.0, 0.0};
  const auto e = featurize(p, x, 1, 2)->value;
  CHECK(e.rows == 1);
  CHECK(e(0, 0) == 1.0);
  CHECK(e(0, 1) == 0.0);

  Rng rng(1);
  p.W0 = ag::constant(random_matrix(2, 2, rng));
  p.W1 = ag::constant(random_matrix(2, 2, rng));
  const std::vector<double> zero{0.0, 0.0};
  const auto ez = featurize(p, zero, 1, 2)->value;
  for (double v : ez.data) CHECK(v == 0.0);

  // random parameters against a hand-rolled product, two prompt tokens
  const int m = 3, d0 = 4, d = 5, n = 2;
  p.W0 = ag::constant(random_matrix(m, d0, rng));
  p.b = ag::constant(random_matrix(1, d0, rng));
  p.W1 = ag::constant(random_matrix(d0, n * d, rng));
  const std::vector<double> xr{0.3, -1.2, 2.0};
  const auto out = featurize(p, xr, n, d)->value;
  REQUIRE(out.rows == n);
  REQUIRE(out.cols == d);
  for (int j = 0; j < n * d; ++j) {
    double s = 0.0;
    for (int h = 0; h < d0; ++h) {
      double hidden = p.b->value(0, h);
      for (int i = 0; i < m; ++i) hidden += xr[i] * p.W0->value(i, h);
      s += hidden * p.W1->value(h, j);
    }
    CHECK(testsupport::relative_error(out(j / d, j % d), s) < 1e-6);
  }
}

TEST_CASE("embed_inputs layout") {
  Fixture f;
  const auto seq = serialize(f.vocab, f.record);
  const int P = f.model.prompt_rows();
  CHECK(P == 2);
  const auto a = f.model.embed_inputs(seq.ids, f.record.baseline, Side::kEncoder)->value;
  CHECK(a.rows == P + static_cast<int>(seq.ids.size()));
  const auto b = f.model.embed_inputs(seq.ids, f.other, Side::kEncoder)->value;
  bool prompt_differs = false;
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) {
      if (r < P) prompt_differs |= a(r, c) != b(r, c);
      else CHECK(a(r, c) == b(r, c));
    }
  CHECK(prompt_differs);

  // zero baseline and zero biases: prompt rows vanish, token rows are the plain lookup
  auto& params = f.model.params();
  for (auto* fp : {&params.enc_cat, &params.enc_num}) std::fill(fp->b->value.data.begin(), fp->b->value.data.end(), 0.0);
  BaselineFeatures zero{{0, 0}, {0.0, 0.0}};
  const auto z = f.model.embed_inputs(seq.ids, zero, Side::kEncoder)->value;
  for (int r = 0; r < P; ++r)
    for (int c = 0; c < z.cols; ++c) CHECK(z(r, c) == 0.0);
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    for (int c = 0; c < z.cols; ++c) CHECK(z(P + static_cast<int>(i), c) == params.E_tok->value(seq.ids[i], c));

  BaselineFeatures wrong{{1}, {0.0, 0.0}};
  CHECK_THROWS_AS(f.model.embed_inputs(seq.ids, wrong, Side::kEncoder), Error);
}

TEST_CASE("forward distributions, causality and loss") {
  Fixture f;
  const auto layout = build_longitudinal_prompt(f.vocab, std::span(f.record.visits.data(), 1));
  std::vector<TokenId> dec = layout.decoder_prefix;
  const auto rest = serialize(f.vocab, f.record).ids;
  dec.insert(dec.end(), rest.begin() + 2, rest.end());
  const auto enc = f.model.embed_inputs(layout.encoder.ids, f.record.baseline, Side::kEncoder);
  const auto probs = f.model.forward(enc, f.model.embed_inputs(dec, f.record.baseline, Side::kDecoder));
  REQUIRE(probs.rows == static_cast<int>(dec.size()));
  for (int r = 0; r < probs.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < probs.cols; ++c) s += probs(r, c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }

  for (std::size_t j = 1; j < dec.size(); ++j) {
    auto changed = dec;
    changed[j] = changed[j] == f.vocab.code_token(0, 0) ? f.vocab.code_token(0, 1) : f.vocab.code_token(0, 0);
    const auto p2 = f.model.forward(enc, f.model.embed_inputs(changed, f.record.baseline, Side::kDecoder));
    for (int r = 0; r < probs.rows; ++r) {
      bool same = true;
      for (int c = 0; c < probs.cols; ++c) same &= probs(r, c) == p2(r, c);
      if (r < static_cast<int>(j)) CHECK(same);
      else CHECK_FALSE(same);
    }
  }

  std::vector<int> targets(dec.size(), -1);
  double expect = 0.0;
  for (std::size_t i = 0; i + 1 < dec.size(); ++i) {
    targets[i] = dec[i + 1];
    expect -= std::log(probs(static_cast<int>(i), dec[i + 1]));
  }
  const double loss = f.model.sequence_loss(layout.encoder, f.record.baseline, dec, targets)->value.data[0];
  CHECK(testsupport::relative_error(loss, expect) < 1e-6);

  // rows without a target add nothing
  double parts = 0.0;
  for (std::size_t i = 0; i + 1 < dec.size(); ++i) {
    std::vector<int> one(dec.size(), -1);
    one[i] = targets[i];
    parts += f.model.sequence_loss(layout.encoder, f.record.baseline, dec, one)->value.data[0];
  }
  CHECK(testsupport::relative_error(loss, parts) < 1e-9);
}

TEST_CASE("token_logprobs") {
  Fixture f;
  const auto layout = build_longitudinal_prompt(f.vocab, {});
  const auto target = serialize(f.vocab, f.record).ids;
  std::vector<TokenId> answer(target.begin() + 2, target.end());

  const auto uni = testsupport::uniform_model(f.vocab);
  for (double lp : token_logprobs(*uni, layout, f.record.baseline, answer))
    CHECK(lp == doctest::Approx(-std::log(static_cast<double>(f.vocab.size()))).epsilon(1e-12));

  const auto lps = token_logprobs(f.model, layout, f.record.baseline, answer);
  std::vector<TokenId> dec = layout.decoder_prefix;
  dec.insert(dec.end(), answer.begin(), answer.end() - 1);
  std::vector<int> targets(dec.size(), -1);
  for (std::size_t i = 0; i < answer.size(); ++i) targets[layout.decoder_prefix.size() - 1 + i] = answer[i];
  const double nll = f.model.sequence_loss(layout.encoder, f.record.baseline, dec, targets)->value.data[0];
  double s = 0.0;
  for (double lp : lps) {
    CHECK(std::isfinite(lp));
    s -= lp;
  }
  CHECK(testsupport::relative_error(s, nll) < 1e-6);

  std::vector<TokenId> shorter(answer.begin(), answer.end() - 1);
  const auto lps2 = token_logprobs(f.model, layout, f.record.baseline, shorter);
  for (std::size_t i = 0; i < lps2.size(); ++i) CHECK(lps2[i] == lps[i]);

  std::vector<TokenId> bad{f.vocab.size() + 3};
  CHECK_THROWS_AS(token_logprobs(f.model, layout, f.record.baseline, bad), Error);
}

TEST_CASE("featurizer and embedding gradients match finite differences") {
  Fixture f;
  const auto layout = build_crossmodal_prompt(f.vocab, std::span(f.record.visits.data(), 1), f.record.visits.back(), 0);
  std::vector<TokenId> dec = layout.decoder_prefix;
  dec.push_back(f.vocab.code_token(0, 2));
  dec.push_back(f.vocab.code_token(0, 4));
  std::vector<int> targets(dec.size(), -1);
  targets[1] = f.vocab.code_token(0, 2);
  targets[2] = f.vocab.code_token(0, 4);
  targets[3] = f.vocab.modality_close(0);

  auto& p = f.model.params();
  std::vector<ag::Tensor> tensors;
  for (auto* fp : {&p.enc_cat, &p.enc_num, &p.dec_cat, &p.dec_num}) {
    tensors.push_back(fp->W0);
    tensors.push_back(fp->b);
    tensors.push_back(fp->W1);
  }
  tensors.push_back(p.E_tok);
  for (auto& t : f.model.named_parameters()) t.second->grad = Matrix();
  ag::backward(f.model.sequence_loss(layout.encoder, f.record.baseline, dec, targets));

  Rng rng(11);
  int checked = 0, worst_ok = 0;
  const double h = 1e-5;
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    auto& t = tensors[ti];
    const int picks = ti + 1 == tensors.size() ? 40 : 6;
    for (int n = 0; n < picks; ++n) {
      std::size_t i = std::uniform_int_distribution<std::size_t>(0, t->value.data.size() - 1)(rng);
      if (ti + 1 == tensors.size()) {
        // E_tok: bias the pick toward rows that take part in the loss
        const TokenId rows[] = {dec[0], dec[1], dec[2], targets[3], layout.encoder.ids[3]};
        i = static_cast<std::size_t>(rows[n % 5]) * t->value.cols + (n / 5) % t->value.cols;
      }
      const double orig = t->value.data[i];
      ag::NoGradGuard g;
      t->value.data[i] = orig + h;
      const double up = f.model.sequence_loss(layout.encoder, f.record.baseline, dec, targets)->value.data[0];
      t->value.data[i] = orig - h;
      const double down = f.model.sequence_loss(layout.encoder, f.record.baseline, dec, targets)->value.data[0];
      t->value.data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = t->grad.data.empty() ? 0.0 : t->grad.data[i];
      const double rel = std::abs(analytic - numeric) / std::max(std::abs(numeric) + std::abs(analytic), 1e-7);
      CHECK(rel <= 1e-4);
      worst_ok += rel <= 1e-4;
      ++checked;
    }
  }
  CHECK(checked >= 100);
  CHECK(worst_ok == checked);
}

TEST_CASE("zeroed featurizers make outputs baseline-independent") {
  Fixture f;
  f.model.zero_featurizers();
  const auto layout = build_longitudinal_prompt(f.vocab, std::span(f.record.visits.data(), 1));
  const auto a = f.model.next_token_logprobs(*f.model.encode(layout.encoder, f.record.baseline), layout.decoder_prefix);
  const auto b = f.model.next_token_logprobs(*f.model.encode(layout.encoder, f.other), layout.decoder_prefix);
  CHECK(a == b);
}

TEST_CASE("initialization is seed-deterministic") {
  Fixture f;
  Transformer again(f.vocab, tiny(), f.stats);
  auto pa = f.model.named_parameters(), pb = again.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second->value == pb[i].second->value);
  }
}

TEST_CASE("checkpoint round trip and schema checks") {
  Fixture f;
  const auto dir = fs::temp_directory_path() / "synthehr_model_test";
  fs::create_directories(dir);
  const auto path = dir / "m.ckpt";
  save_checkpoint(f.model, path);
  CHECK(fs::exists(vocabulary_path(path)));
  CHECK(checkpoint_schema_hash(path) == f.schema.hash());
  const auto back = load_checkpoint(path);
  CHECK(back->config().d_model == f.model.config().d_model);
  CHECK(back->numeric_stats() == f.model.numeric_stats());
  auto pa = f.model.named_parameters(), pb = back->named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->value == pb[i].second->value);
  const auto layout = build_longitudinal_prompt(f.vocab, f.record.visits);
  CHECK(f.model.next_token_logprobs(*f.model.encode(layout.encoder, f.record.baseline), layout.decoder_prefix) ==
        back->next_token_logprobs(*back->encode(layout.encoder, f.record.baseline), layout.decoder_prefix));

  {
    std::ofstream v(vocabulary_path(path), std::ios::app);
    v << "extra\n";
  }
  try {
    load_checkpoint(path);
    FAIL("loaded a checkpoint with a tampered vocabulary");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSchemaHashMismatch);
  }
}

TEST_CASE("invalid configurations") {
  ModelConfig c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.d_model = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}
