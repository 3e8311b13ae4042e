#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "synthehr/error.hpp"
#include "synthehr/oracle.hpp"
#include "synthehr/records.hpp"
#include "test_support.hpp"

using namespace synthehr;
namespace fs = std::filesystem;

namespace {
Schema dx_schema() { return Schema({"dx"}, {{"D1", "D2", "D3"}}, 0, 0); }

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "synthehr_records_test";
  fs::create_directories(dir);
  return dir / name;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIo;
}
}  // namespace

TEST_CASE("minimal one-line corpus") {
  const auto c = parse_corpus(R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"dx":["D1"]}]})", dx_schema());
  REQUIRE(c.size() == 1);
  CHECK(c.records[0].visits.size() == 1);
  CHECK(c.records[0].visits[0].codes[0] == std::vector<int>{0});
}

TEST_CASE("unknown code is reported by name") {
  try {
    parse_corpus(R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"dx":["D999"]}]})", dx_schema());
    FAIL("accepted an unknown code");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUnknownCode);
    CHECK(std::string(e.what()).find("D999") != std::string::npos);
  }
}

TEST_CASE("malformed line reports its line number") {
  const std::string text =
      R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"dx":["D1"]}]})"
      "\n{not json\n";
  try {
    parse_corpus(text, dx_schema());
    FAIL("accepted a malformed line");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMalformedLine);
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("schema violations are rejected, not repaired") {
  CHECK(code_of([] {
          parse_corpus(R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"dx":["D1","D1"]}]})",
                       dx_schema());
        }) == ErrorCode::kMalformedLine);
  CHECK(code_of([] {
          parse_corpus(R"({"id":"p1","baseline":{"categorical":[1],"numerical":[]},"visits":[{"dx":["D1"]}]})",
                       dx_schema());
        }) == ErrorCode::kSchemaMismatch);
  CHECK(code_of([] {
          parse_corpus(R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"med":["M1"]}]})",
                       dx_schema());
        }) == ErrorCode::kSchemaMismatch);
}

TEST_CASE("write/load round trip") {
  Rng rng(3);
  const Schema schema = testsupport::small_schema(6, 5, 2, 2);
  Corpus c{schema, {}};
  for (int i = 0; i < 40; ++i) c.records.push_back(testsupport::random_record(schema, rng, 4, 3, "p" + std::to_string(i)));
  const auto path = temp_file("roundtrip.jsonl");
  write_corpus(c, path);
  const auto back = load_corpus(path, schema);
  CHECK(back.schema == schema);
  CHECK(back.records == c.records);

  const auto spath = temp_file("schema.json");
  write_schema(schema, spath);
  CHECK(load_schema(spath) == schema);
  CHECK(load_schema(spath).hash() == schema.hash());
}

TEST_CASE("split sizes, disjointness and determinism") {
  Corpus c{dx_schema(), {}};
  for (int i = 0; i < 10; ++i) {
    PatientRecord r;
    r.id = "p" + std::to_string(i);
    Visit v(1);
    v.codes[0] = {i % 3};
    r.visits.push_back(v);
    c.records.push_back(r);
  }
  const auto s = split_corpus(c, {0.8, 0.1, 0.1}, 7);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& r : part->records) CHECK(ids.insert(r.id).second);
  CHECK(ids.size() == 10);

  const auto again = split_corpus(c, {0.8, 0.1, 0.1}, 7);
  CHECK(again.train.records == s.train.records);
  CHECK(again.val.records == s.val.records);
  CHECK(again.test.records == s.test.records);

  CHECK(code_of([&] { split_corpus(c, {0.98, 0.01, 0.01}, 7); }) == ErrorCode::kDegenerateFraction);
  CHECK(code_of([&] { split_corpus(c, {1.0, 0.0, 0.0}, 7); }) == ErrorCode::kDegenerateFraction);
}

TEST_CASE("split rounding reproduces the published counts") {
  // The three published split sizes add up to 46,515, five short of the
  // published patient count, so only val and test can match on 46,520.
  auto corpus_of = [](std::size_t n) {
    Corpus c{dx_schema(), {}};
    c.records.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      c.records[i].id = std::to_string(i);
      Visit v(1);
      v.codes[0] = {0};
      c.records[i].visits.push_back(v);
    }
    return c;
  };
  const double total = 39581.0 + 2301.0 + 4633.0;
  const std::array<double, 3> f{39581 / total, 2301 / total, 4633 / total};
  const auto exact = split_corpus(corpus_of(46515), f, 1);
  CHECK(exact.train.size() == 39581);
  CHECK(exact.val.size() == 2301);
  CHECK(exact.test.size() == 4633);
  const auto full = split_corpus(corpus_of(46520), f, 1);
  CHECK(full.val.size() == 2301);
  CHECK(full.test.size() == 4633);
  CHECK(full.train.size() == 46520 - 2301 - 4633);
}

TEST_CASE("corpus_stats") {
  const auto c = parse_corpus(
      R"({"id":"p1","baseline":{"categorical":[],"numerical":[]},"visits":[{"dx":["D1","D2"]},{"dx":["D3"]}]})",
      dx_schema());
  const auto st = corpus_stats(c);
  CHECK(st.patients == 1);
  CHECK(st.visits == 2);
  CHECK(st.events == 3);
  CHECK(st.events_per_patient == 3);

  CoupledOracleOptions o;
  o.seed = 4;
  const auto oc = generate_oracle_corpus(coupled_oracle(o), 100);
  std::size_t visits = 0, events = 0;
  std::vector<std::set<int>> used(2);
  std::vector<std::size_t> per_mod(2);
  for (const auto& r : oc.records)
    for (const auto& v : r.visits) {
      ++visits;
      for (int k = 0; k < 2; ++k) {
        events += v.codes[k].size();
        per_mod[k] += v.codes[k].size();
        used[k].insert(v.codes[k].begin(), v.codes[k].end());
      }
    }
  const auto os = corpus_stats(oc);
  CHECK(os.patients == 100);
  CHECK(os.visits == visits);
  CHECK(os.events == events);
  CHECK(os.events_per_patient == std::lround(static_cast<double>(events) / 100.0));
  for (int k = 0; k < 2; ++k) {
    CHECK(os.modalities[k].events == per_mod[k]);
    CHECK(os.modalities[k].distinct_codes == used[k].size());
  }
}

TEST_CASE("numeric stats normalize to zero mean and unit spread") {
  const Schema schema = testsupport::small_schema(3, 3, 0, 2);
  Rng rng(5);
  Corpus c{schema, {}};
  for (int i = 0; i < 50; ++i) c.records.push_back(testsupport::random_record(schema, rng, 2, 2, std::to_string(i)));
  const auto st = compute_numeric_stats(c);
  double mean = 0.0, sq = 0.0;
  for (const auto& r : c.records) {
    const auto z = st.normalize(r.baseline.numerical);
    mean += z[0];
    sq += z[0] * z[0];
  }
  CHECK(std::abs(mean / 50) < 1e-12);
  CHECK(sq / 50 == doctest::Approx(1.0).epsilon(1e-9));
}
