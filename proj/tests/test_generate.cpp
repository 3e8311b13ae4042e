#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/generate.hpp"
#include "synthehr/grammar.hpp"
#include "test_support.hpp"

using namespace synthehr;

namespace {
GenerationConfig cfg(Strategy s) {
  GenerationConfig c;
  c.strategy = s;
  c.max_visits = 6;
  c.max_codes_per_modality = 5;
  c.seed = 4;
  return c;
}

std::vector<double> random_dist(Rng& rng, int n) {
  std::vector<double> d(n);
  std::exponential_distribution<double> e;
  double s = 0.0;
  for (auto& x : d) s += (x = e(rng));
  for (auto& x : d) x /= s;
  return d;
}

void check_well_formed(const Vocabulary& vocab, const PatientRecord& r, int max_visits, int max_codes) {
  REQUIRE_FALSE(r.visits.empty());
  CHECK(static_cast<int>(r.visits.size()) <= max_visits);
  const auto seq = serialize(vocab, r);
  CHECK(parse(vocab, seq.ids) == PatientRecord{"", {}, r.visits});
  for (const auto& v : r.visits) {
    bool any = false;
    for (int k = 0; k < vocab.modality_count(); ++k) {
      any |= v.has(k);
      CHECK(static_cast<int>(v.codes[k].size()) <= max_codes);
      CHECK(std::set<int>(v.codes[k].begin(), v.codes[k].end()).size() == v.codes[k].size());
    }
    CHECK(any);
  }
}
}  // namespace

TEST_CASE("filtered distribution arithmetic") {
  const std::vector<double> d{0.5, 0.3, 0.2};
  auto c = cfg(Strategy::kTopK);
  c.top_k = 2;
  auto f = filtered_distribution(d, c);
  CHECK(f[0] == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(f[1] == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(f[2] == 0.0);

  c = cfg(Strategy::kNucleus);
  c.top_p = 0.8;
  f = filtered_distribution(d, c);
  CHECK(f[0] == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(f[2] == 0.0);
  c.top_p = 0.81;
  f = filtered_distribution(d, c);
  CHECK(f[2] == doctest::Approx(0.2).epsilon(1e-12));

  for (auto s : {Strategy::kGreedy, Strategy::kBeam}) {
    f = filtered_distribution(d, cfg(s));
    CHECK(f == std::vector<double>{1.0, 0.0, 0.0});
  }

  c = cfg(Strategy::kTopK);
  c.top_k = 3;
  c.temperature = 2.0;
  f = filtered_distribution(d, c);
  const double z = std::sqrt(0.5) + std::sqrt(0.3) + std::sqrt(0.2);
  for (int i = 0; i < 3; ++i) CHECK(f[i] == doctest::Approx(std::sqrt(d[i]) / z).epsilon(1e-12));

  // ties go to the lower index
  const std::vector<double> tie{0.25, 0.25, 0.5};
  c.temperature = 1.0;
  c.top_k = 2;
  f = filtered_distribution(tie, c);
  CHECK(f == std::vector<double>{1.0 / 3.0, 0.0, 2.0 / 3.0});
}

TEST_CASE("top-k with k = 1 is greedy") {
  Rng rng(1), draw(2);
  auto c = cfg(Strategy::kTopK);
  c.top_k = 1;
  for (int i = 0; i < 200; ++i) {
    const auto d = random_dist(rng, 17);
    const int argmax = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    CHECK(sample_next(d, c, draw) == argmax);
    CHECK(sample_next(d, cfg(Strategy::kGreedy), draw) == argmax);
  }
}

TEST_CASE("nucleus with p = 1 is plain sampling") {
  Rng rng(3);
  const auto d = random_dist(rng, 12);
  auto nuc = cfg(Strategy::kNucleus);
  nuc.top_p = 1.0;
  auto full = cfg(Strategy::kTopK);
  full.top_k = 12;
  const auto f = filtered_distribution(d, nuc);
  for (int i = 0; i < 12; ++i) CHECK(f[i] == doctest::Approx(d[i]).epsilon(1e-12));

  const int n = 20000;
  Rng ra(5), rb(6);
  std::vector<double> a, b, counts(12, 0.0), expected(12);
  for (int i = 0; i < n; ++i) {
    const int x = sample_next(d, nuc, ra);
    a.push_back(x);
    counts[x] += 1.0;
    b.push_back(sample_next(d, full, rb));
  }
  for (int i = 0; i < 12; ++i) expected[i] = n * d[i];
  CHECK(testsupport::chi_square_pvalue(counts, expected) > 0.001);
  CHECK(testsupport::ks_two_sample_pvalue(a, b) > 0.001);
}

TEST_CASE("sampling errors") {
  Rng rng(1);
  const std::vector<double> zero(4, 0.0);
  try {
    sample_next(zero, cfg(Strategy::kTopK), rng);
    FAIL("sampled from an empty support");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptySupport);
  }
  auto c = cfg(Strategy::kTopK);
  c.top_k = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = cfg(Strategy::kNucleus);
  c.top_p = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = cfg(Strategy::kTopK);
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(parse_strategy(strategy_name(Strategy::kNucleus)) == Strategy::kNucleus);
  CHECK_THROWS_AS(parse_strategy("bogus"), Error);
}

TEST_CASE("beam of width one is greedy") {
  const Vocabulary vocab(testsupport::small_schema(6, 5, 2, 0));
  const auto model = testsupport::hashed_model(vocab, 9);
  BaselineFeatures base{{1, 0}, {}};
  auto beam = cfg(Strategy::kBeam);
  beam.beam_width = 1;
  for (int i = 0; i < 5; ++i) {
    Rng a(i), b(i + 100);
    base.categorical = {i % 2, 1 - i % 2};
    const auto g = generate_record(*model, base, cfg(Strategy::kGreedy), a);
    const auto bm = generate_record(*model, base, beam, b);
    CHECK(g.record.visits == bm.record.visits);
  }
}

TEST_CASE("generated records respect the grammar and length bounds") {
  const Vocabulary vocab(testsupport::small_schema(6, 5, 2, 0));
  const auto uni = testsupport::uniform_model(vocab);
  const BaselineFeatures base{{1, 0}, {}};
  for (auto s : {Strategy::kTopK, Strategy::kNucleus, Strategy::kGreedy, Strategy::kBeam}) {
    Rng rng(11);
    auto c = cfg(s);
    c.top_k = 40;
    for (int i = 0; i < 20; ++i) {
      const auto g = generate_record(*uni, base, c, rng);
      check_well_formed(vocab, g.record, c.max_visits, c.max_codes_per_modality);
    }
  }

  auto one = cfg(Strategy::kTopK);
  one.max_visits = 1;
  one.max_codes_per_modality = 2;
  Rng rng(12);
  bool truncated = false;
  for (int i = 0; i < 30; ++i) {
    const auto g = generate_record(*uni, base, one, rng);
    CHECK(g.record.visits.size() == 1);
    check_well_formed(vocab, g.record, 1, 2);
    truncated |= g.truncated;
  }
  CHECK(truncated);
}

TEST_CASE("decoding masks tokens of the wrong modality") {
  const Vocabulary vocab(testsupport::small_schema(6, 5, 2, 0));
  const TokenId lab0 = vocab.code_token(1, 0);
  const int V = vocab.size();
  // almost all mass on one lab code, whatever the context
  const auto pushy = std::make_shared<testsupport::CallbackModel>(vocab, [V, lab0](auto, const auto&, auto) {
    std::vector<double> row(V, std::log(0.01 / (V - 1)));
    row[lab0] = std::log(0.99);
    return row;
  });
  const BaselineFeatures base{{1, 0}, {}};
  Rng rng(3);
  Visit current(2);
  current.codes[1] = {2};
  for (int i = 0; i < 20; ++i) {
    const auto out = impute_modality(*pushy, {}, current, 0, base, cfg(Strategy::kTopK), rng);
    REQUIRE_FALSE(out.codes.empty());
    for (int c : out.codes) CHECK((c >= 0 && c < 6));
    const auto rec = generate_record(*pushy, base, cfg(Strategy::kTopK), rng);
    check_well_formed(vocab, rec.record, 6, 5);
  }

  // teacher-forced codes come first and are never repeated
  const std::vector<int> forced{4, 1};
  const auto out = impute_modality(*pushy, {}, current, 0, base, cfg(Strategy::kGreedy), rng, forced);
  REQUIRE(out.codes.size() >= 2);
  CHECK(out.codes[0] == 4);
  CHECK(out.codes[1] == 1);
  CHECK(std::set<int>(out.codes.begin(), out.codes.end()).size() == out.codes.size());
}

TEST_CASE("corpus generation is deterministic") {
  const Vocabulary vocab(testsupport::small_schema(6, 5, 2, 0));
  const auto model = testsupport::hashed_model(vocab, 2);
  std::vector<BaselineFeatures> bases(12, BaselineFeatures{{0, 1}, {}});
  const auto a = generate_corpus(*model, bases, cfg(Strategy::kTopK));
  const auto b = generate_corpus(*model, bases, cfg(Strategy::kTopK));
  REQUIRE(a.size() == 12);
  CHECK(a.records == b.records);
  CHECK(a.records[0].id == "S000000");
  auto other = cfg(Strategy::kTopK);
  other.seed = 5;
  CHECK_FALSE(generate_corpus(*model, bases, other).records == a.records);

  Corpus train;
  train.schema = vocab.schema();
  Rng r(1);
  for (int i = 0; i < 5; ++i) train.records.push_back(testsupport::random_record(train.schema, r, 2, 2));
  Rng s1(7), s2(7);
  const auto draws = sample_baselines(train, 50, s1);
  CHECK(draws.size() == 50);
  CHECK(draws == sample_baselines(train, 50, s2));
  for (const auto& d : draws)
    CHECK(std::any_of(train.records.begin(), train.records.end(), [&](const auto& rec) { return rec.baseline == d; }));
}

TEST_CASE("record completion") {
  const Schema schema = testsupport::small_schema(6, 5, 2, 0);
  const Vocabulary vocab(schema);
  const auto model = testsupport::hashed_model(vocab, 3);
  Rng rng(8);
  const auto real = testsupport::random_record(schema, rng, 4, 3, "R1");

  CompletionPolicy keep;
  const auto same = complete_record(*model, real, keep, cfg(Strategy::kTopK));
  CHECK(same.record == real);
  for (const auto& v : same.imputed)
    for (const auto& m : v)
      for (bool b : m) CHECK_FALSE(b);

  // remove-all on one slot only touches that slot
  PatientRecord two = real;
  while (two.visits.size() < 2) two.visits.push_back(two.visits[0]);
  two.visits[1].codes[1] = {0, 3};
  CompletionPolicy one;
  one.overrides[{1, 1}] = {CompletionAction::kRemoveAll, 0.0};
  const auto done = complete_record(*model, two, one, cfg(Strategy::kTopK));
  REQUIRE(done.record.visits.size() == two.visits.size());
  for (std::size_t t = 0; t < two.visits.size(); ++t)
    for (int k = 0; k < 2; ++k) {
      if (t == 1 && k == 1) {
        CHECK_FALSE(done.record.visits[t].codes[k].empty());
        for (bool b : done.imputed[t][k]) CHECK(b);
      } else {
        CHECK(done.record.visits[t].codes[k] == two.visits[t].codes[k]);
        for (bool b : done.imputed[t][k]) CHECK_FALSE(b);
      }
    }

  // remove-random keeps at least one original code and marks the rest
  CompletionPolicy rnd;
  rnd.default_policy = {CompletionAction::kRemoveRandom, 1.0};
  rnd.seed = 3;
  const auto part = complete_record(*model, two, rnd, cfg(Strategy::kTopK));
  for (std::size_t t = 0; t < two.visits.size(); ++t)
    for (int k = 0; k < 2; ++k) {
      if (!two.visits[t].has(k)) {
        CHECK_FALSE(part.record.visits[t].has(k));
        continue;
      }
      const auto& flags = part.imputed[t][k];
      REQUIRE_FALSE(flags.empty());
      CHECK_FALSE(flags[0]);
      const int kept = part.record.visits[t].codes[k][0];
      CHECK(std::find(two.visits[t].codes[k].begin(), two.visits[t].codes[k].end(), kept) != two.visits[t].codes[k].end());
    }
  CHECK(complete_record(*model, two, rnd, cfg(Strategy::kTopK)).record == part.record);

  const auto path = std::filesystem::temp_directory_path() / "synthehr_provenance.jsonl";
  const std::vector<CompletedRecord> recs{done};
  write_provenance(schema, recs, path);
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  CHECK(j["id"] == "R1");
  REQUIRE(j["imputed"].size() == 1);
  CHECK(j["imputed"][0]["visit"] == 1);
  CHECK(j["imputed"][0]["modality"] == "lab");
  CHECK(j["imputed"][0]["codes"].size() == done.record.visits[1].codes[1].size());

  CompletionPolicy bad;
  bad.default_policy = {CompletionAction::kRemoveRandom, 1.5};
  CHECK_THROWS_AS(bad.validate(), Error);
}
