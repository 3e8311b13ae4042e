#include <doctest.h>

#include <sstream>

#include "synthehr/error.hpp"
#include "synthehr/oracle.hpp"
#include "synthehr/train.hpp"
#include "test_support.hpp"

using namespace synthehr;

namespace {
ModelConfig small_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_positions = 64;
  c.seed = 1;
  return c;
}

TrainConfig fast_train(int epochs) {
  TrainConfig t;
  t.learning_rate = 3e-3;
  t.batch_size = 8;
  t.epochs = epochs;
  t.warmup_epochs = 1;
  t.seed = 2;
  return t;
}

PatientRecord two_visits() {
  PatientRecord r;
  r.id = "p";
  r.baseline = {{1}, {}};
  Visit a(2), b(2);
  a.codes[0] = {3, 1};
  a.codes[1] = {0};
  b.codes[0] = {2};
  r.visits = {a, b};
  return r;
}
}  // namespace

TEST_CASE("longitudinal and cloze example layouts") {
  const auto schema = testsupport::small_schema(5, 4, 1, 0);
  const Vocabulary vocab(schema);
  const auto rec = two_visits();

  const std::vector<int> order{1, 0};
  const auto ex = longitudinal_example(vocab, rec, 0, order);
  const std::vector<TokenId> expect_dec{Vocabulary::kBos,       Vocabulary::kVisitOpen,  vocab.modality_open(1),
                                        vocab.code_token(1, 0), vocab.modality_close(1), vocab.modality_open(0),
                                        vocab.code_token(0, 3), vocab.code_token(0, 1),  vocab.modality_close(0),
                                        Vocabulary::kVisitClose};
  CHECK(ex.decoder == expect_dec);
  REQUIRE(ex.targets.size() == expect_dec.size());
  CHECK(ex.targets[0] == -1);
  for (std::size_t i = 1; i + 1 < expect_dec.size(); ++i) CHECK(ex.targets[i] == expect_dec[i + 1]);
  CHECK(ex.targets.back() == Vocabulary::kVisitOpen);
  CHECK(ex.encoder.ids == std::vector<TokenId>{Vocabulary::kBos, Vocabulary::kEos});

  const auto last = longitudinal_example(vocab, rec, 1, order);
  CHECK(last.targets.back() == Vocabulary::kEos);
  CHECK(last.encoder.ids.size() == 2 + 9);

  const auto cz = crossmodal_example(vocab, rec, 0, 0);
  CHECK(cz.decoder == std::vector<TokenId>{Vocabulary::kBos, vocab.modality_open(0), vocab.code_token(0, 3),
                                           vocab.code_token(0, 1)});
  CHECK(cz.targets == std::vector<int>{-1, vocab.code_token(0, 3), vocab.code_token(0, 1), vocab.modality_close(0)});

  // one longitudinal example per visit plus one cloze per present block
  CHECK(evaluation_examples(vocab, rec).size() == 2 + 3);
}

TEST_CASE("AdamW step arithmetic") {
  auto x = ag::parameter(Matrix(1, 1, 1.0));
  AdamW opt({x}, 0.9, 0.999, 1e-8, 0.01);
  x->grad = Matrix(1, 1, 2.0);
  opt.step(0.1);
  // first step: bias-corrected moments give g/|g|; decay shrinks x by lr*wd
  const double expect = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
  CHECK(x->value(0, 0) == doctest::Approx(expect).epsilon(1e-14));

  x->grad = Matrix(1, 1, 3.0);
  CHECK(opt.clip_gradients(1.0) == doctest::Approx(3.0));
  CHECK(x->grad(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("training lowers the loss and is deterministic") {
  const auto spec = chain_oracle(10, 4);
  const auto corpus = generate_oracle_corpus(spec, 20);
  std::ostringstream log_a, log_b;
  const auto a = train_model(corpus, corpus, small_model(), fast_train(15), &log_a);
  const auto b = train_model(corpus, corpus, small_model(), fast_train(15), &log_b);
  REQUIRE(a.log.size() == 15);
  CHECK(a.log.back().train_loss < 0.5 * a.log.front().train_loss);
  CHECK(a.log.back().val_ppl < a.log.front().val_ppl);
  CHECK(log_a.str() == log_b.str());
  CHECK(a.best_epoch >= 1);
  CHECK(a.best_val_ppl == doctest::Approx(validation_perplexity(*a.model, corpus.records)).epsilon(1e-12));
  CHECK(a.log[a.best_epoch - 1].val_ppl == a.best_val_ppl);
  for (const auto& e : a.log) CHECK(e.val_ppl >= a.best_val_ppl);
}

TEST_CASE("a single record is memorized") {
  // single-modality visits: the answer order is fixed, so the target is deterministic
  Corpus one;
  one.schema = testsupport::small_schema(5, 4, 1, 0);
  PatientRecord r = two_visits();
  r.visits[0].codes[1].clear();
  Visit c(2);
  c.codes[0] = {4, 0};
  r.visits.push_back(c);
  one.records = {r};
  auto cfg = fast_train(200);
  cfg.batch_size = 1;
  cfg.learning_rate = 1e-2;
  cfg.selection_metric = "last";
  const auto res = train_model(one, Corpus{}, small_model(), cfg);
  CHECK(res.log.back().train_loss < 0.1);

  const Vocabulary vocab(one.schema);
  const std::vector<int> order{0, 1};
  double nll = 0.0, tokens = 0.0;
  for (int t = 0; t < 3; ++t) {
    const auto ex = longitudinal_example(vocab, r, t, order);
    nll += res.model->sequence_loss(ex.encoder, r.baseline, ex.decoder, ex.targets)->value.data[0];
    tokens += static_cast<double>(std::count_if(ex.targets.begin(), ex.targets.end(), [](int v) { return v >= 0; }));
  }
  CHECK(nll / tokens < 0.1);
}

TEST_CASE("training errors") {
  const auto corpus = generate_oracle_corpus(chain_oracle(10, 4), 5);
  Corpus other = corpus;
  other.schema = testsupport::small_schema(5, 4, 1, 0);
  CHECK_THROWS_AS(train_model(corpus, other, small_model(), fast_train(1)), Error);
  auto bad = fast_train(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(train_model(corpus, corpus, small_model(), bad), Error);
  try {
    train_model(Corpus{corpus.schema, {}}, Corpus{}, small_model(), fast_train(1));
    FAIL("empty corpus accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptySequence);
  }
}
