#include <doctest.h>

#include <map>

#include <boost/math/distributions/poisson.hpp>

#include "synthehr/corruption.hpp"
#include "synthehr/error.hpp"
#include "test_support.hpp"

using namespace synthehr;

namespace {
CorruptionConfig off() {
  CorruptionConfig c;
  c.p_mask = c.p_delete = c.p_infill = 0.0;
  c.enable_span_shuffle = c.enable_modality_permute = false;
  return c;
}

// visit -> modality -> sorted codes
std::map<std::pair<int, int>, std::vector<TokenId>> block_multisets(const TokenSequence& s) {
  std::map<std::pair<int, int>, std::vector<TokenId>> out;
  for (std::size_t i = 0; i < s.ids.size(); ++i)
    if (s.spans[i].role == TokenRole::kCode) out[{s.spans[i].visit, s.spans[i].modality}].push_back(s.ids[i]);
  for (auto& [key, v] : out) std::sort(v.begin(), v.end());
  return out;
}
}  // namespace

TEST_CASE("all-off config is the identity") {
  const Schema schema = testsupport::small_schema(10, 8);
  const Vocabulary vocab(schema);
  Rng data(1), rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto s = serialize(vocab, testsupport::random_record(schema, data, 4, 5));
    CHECK(corrupt(vocab, s, off(), rng) == s);
    CHECK(corruption_stats(vocab, s, s) == CorruptionStats{});
  }
}

TEST_CASE("deleting everything keeps the structure") {
  const Schema schema({"dx"}, {{"D1", "D2"}}, 0, 0);
  const Vocabulary vocab(schema);
  PatientRecord r;
  Visit v(1);
  v.codes[0] = {0, 1};
  r.visits.push_back(v);
  auto cfg = off();
  cfg.p_delete = 1.0;
  Rng rng(3);
  const auto s = serialize(vocab, r);
  const auto out = corrupt(vocab, s, cfg, rng);
  CHECK(vocab.render(out.ids) == "<s> <v> <dx> </dx> </v> </s>");
  CHECK(corruption_stats(vocab, s, out).n_deleted == 2);
}

TEST_CASE("single deletion is counted") {
  const Schema schema({"dx"}, {{"D1", "D2", "D3"}}, 0, 0);
  const Vocabulary vocab(schema);
  const auto before = make_sequence(vocab, {1, 4, vocab.modality_open(0), vocab.code_token(0, 0), vocab.code_token(0, 1),
                                            vocab.code_token(0, 2), vocab.modality_close(0), 5, 2});
  auto ids = before.ids;
  ids.erase(ids.begin() + 4);
  const auto st = corruption_stats(vocab, before, make_sequence(vocab, ids));
  CHECK(st.n_deleted == 1);
  CHECK(st.n_masked == 0);
  CHECK(st.n_infilled_spans == 0);
}

TEST_CASE("corrupted output always parses and shuffles conserve multisets") {
  const Schema schema = testsupport::small_schema(15, 12);
  const Vocabulary vocab(schema);
  Rng data(5), rng(6);
  auto cfg = off();
  cfg.enable_span_shuffle = cfg.enable_modality_permute = true;
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = serialize(vocab, testsupport::random_record(schema, data, 4, 6));
    const auto out = corrupt(vocab, s, cfg, rng);
    if (block_multisets(s) != block_multisets(out)) ++violations;
    CHECK_NOTHROW(parse(vocab, out));
  }
  CHECK(violations == 0);

  CorruptionConfig full;
  for (int i = 0; i < 1000; ++i) {
    const auto s = serialize(vocab, testsupport::random_record(schema, data, 4, 6));
    const auto out = corrupt(vocab, s, full, rng);
    CHECK_NOTHROW(parse(vocab, out));
    CHECK(std::count(out.ids.begin(), out.ids.end(), Vocabulary::kVisitOpen) ==
          std::count(s.ids.begin(), s.ids.end(), Vocabulary::kVisitOpen));
  }
}

TEST_CASE("corruption is deterministic given the rng state") {
  const Schema schema = testsupport::small_schema(15, 12);
  const Vocabulary vocab(schema);
  Rng data(7);
  const auto s = serialize(vocab, testsupport::random_record(schema, data, 4, 6));
  Rng a(42), b(42);
  CHECK(corrupt(vocab, s, CorruptionConfig{}, a) == corrupt(vocab, s, CorruptionConfig{}, b));
}

TEST_CASE("mask fraction matches p_mask") {
  const Schema schema = testsupport::small_schema(15, 12);
  const Vocabulary vocab(schema);
  Rng data(8), rng(9);
  auto cfg = off();
  cfg.p_mask = 0.15;
  double masked = 0, total = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = serialize(vocab, testsupport::random_record(schema, data, 3, 5));
    const auto out = corrupt(vocab, s, cfg, rng);
    const auto st = corruption_stats(vocab, s, out);
    masked += static_cast<double>(st.n_masked);
    total += static_cast<double>(std::count_if(s.ids.begin(), s.ids.end(), [&](TokenId t) { return vocab.is_code(t); }));
  }
  CHECK(std::abs(masked / total - 0.15) < 0.02);
}

TEST_CASE("infill span lengths are Poisson(3)") {
  std::vector<std::string> codes;
  for (int i = 0; i < 40; ++i) codes.push_back("C" + std::to_string(i));
  const Schema schema({"dx"}, {codes}, 0, 0);
  const Vocabulary vocab(schema);
  PatientRecord r;
  Visit v(1);
  for (int i = 0; i < 40; ++i) v.codes[0].push_back(i);
  r.visits.push_back(v);
  const auto s = serialize(vocab, r);
  auto cfg = off();
  cfg.p_infill = 1.0;
  Rng rng(10);
  std::vector<int> draws;
  while (draws.size() < 10000) {
    CorruptionTrace trace;
    const auto out = corrupt(vocab, s, cfg, rng, &trace);
    REQUIRE(trace.infill_draws.size() == 1);
    const int d = trace.infill_draws[0];
    const auto removed = 40 - std::count_if(out.ids.begin(), out.ids.end(), [&](TokenId t) { return vocab.is_code(t); });
    CHECK(removed == std::min(d, 40));
    CHECK(std::count(out.ids.begin(), out.ids.end(), Vocabulary::kMask) == (d > 0 ? 1 : 0));
    draws.push_back(d);
  }
  boost::math::poisson_distribution<> pois(3.0);
  const int top = 10;  // last cell pools the tail
  std::vector<double> obs(top + 1), exp(top + 1);
  for (int d : draws) obs[std::min(d, top)] += 1;
  for (int k = 0; k < top; ++k) exp[k] = 10000 * boost::math::pdf(pois, k);
  exp[top] = 10000 * boost::math::cdf(boost::math::complement(pois, top - 1));
  CHECK(testsupport::chi_square_pvalue(obs, exp) > 0.01);
}

TEST_CASE("invalid configs are rejected") {
  CorruptionConfig c;
  c.p_mask = 1.5;
  CHECK_THROWS_AS(c.validate(), Error);
  c = CorruptionConfig{};
  c.infill_lambda = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
}
