#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"
#include "synthehr/oracle.hpp"
#include "synthehr/utility.hpp"
#include "test_support.hpp"

using namespace synthehr;

namespace {
// Scores every transition with a caller-supplied function of (record, t).
class FnScorer : public NextVisitScorer {
 public:
  using Fn = std::function<std::vector<double>(const PatientRecord&, std::size_t)>;
  explicit FnScorer(Fn fn) : fn_(std::move(fn)) {}
  std::vector<std::vector<double>> transition_scores(const PatientRecord& r) const override {
    std::vector<std::vector<double>> out;
    for (std::size_t t = 0; t + 1 < r.visits.size(); ++t) out.push_back(fn_(r, t));
    return out;
  }

 private:
  Fn fn_;
};

PatientRecord chain_record(std::vector<std::vector<int>> dx, const std::string& id = "r") {
  PatientRecord r;
  r.id = id;
  for (auto& c : dx) {
    Visit v(1);
    v.codes[0] = std::move(c);
    r.visits.push_back(std::move(v));
  }
  return r;
}

Schema dx_schema(int n) {
  std::vector<std::string> codes;
  for (int i = 0; i < n; ++i) codes.push_back("D" + std::to_string(i));
  return Schema({"dx"}, {codes}, 0, 0, {}, {});
}

UtilityConfig quick(std::uint64_t seed = 1) {
  UtilityConfig c;
  c.epochs = 30;
  c.ks = {1, 5};
  c.bootstrap_resamples = 200;
  c.seed = seed;
  return c;
}
}  // namespace

TEST_CASE("recall fixtures") {
  const Schema schema = dx_schema(6);
  // scores favour 0 > 1 > ... > 5
  const FnScorer fixed([](const PatientRecord&, std::size_t) { return std::vector<double>{6, 5, 4, 3, 2, 1}; });
  Corpus test{schema, {chain_record({{0}, {0, 1}, {2, 5}, {3}}), chain_record({{1}, {5, 4, 0}, {2}})}};
  test.records[1].visits.back().codes[0] = {};  // empty truth is skipped
  // transitions: {0,1} k=2 → 1; {2,5} → 0; {3} → 0; {5,4,0} → 1/3
  const auto v = transition_recalls(fixed, test, 2, 0);
  REQUIRE(v.size() == 4);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 0.0);
  CHECK(v[2] == 0.0);
  CHECK(v[3] == doctest::Approx(1.0 / 3.0));
  const auto e = recall_at_k(fixed, test, 2, 0, 0, 1);
  CHECK(e.transitions == 4);
  CHECK(e.recall == doctest::Approx((1.0 + 1.0 / 3.0) / 4.0));

  // the denominator is the true set size even when it exceeds k
  const auto k1 = transition_recalls(fixed, Corpus{schema, {chain_record({{0}, {0, 1, 2}})}}, 1, 0);
  CHECK(k1 == std::vector<double>{1.0 / 3.0});

  // an oracle scorer recalls everything
  const FnScorer truth([](const PatientRecord& r, std::size_t t) {
    std::vector<double> s(6, 0.0);
    for (int c : r.visits[t + 1].codes[0]) s[c] = 1.0;
    return s;
  });
  CHECK(recall_at_k(truth, test, 3, 0, 0, 0).recall == 1.0);

  // recall@k never drops as k grows
  double prev = 0.0;
  for (int k = 1; k <= 6; ++k) {
    const double r = recall_at_k(fixed, test, k, 0, 0, 0).recall;
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev == 1.0);
  CHECK_THROWS_AS(transition_recalls(fixed, test, 0, 0), Error);
}

TEST_CASE("random scores recall k / |C|") {
  const Schema schema = dx_schema(100);
  Rng data(1);
  std::uniform_int_distribution<int> code(0, 99);
  Corpus test{schema, {}};
  for (int i = 0; i < 5000; ++i) test.records.push_back(chain_record({{code(data)}, {code(data)}, {code(data)}}));
  const FnScorer random([](const PatientRecord& r, std::size_t t) {
    Rng rng(testsupport::hash_ids(std::vector<TokenId>{r.visits[0].codes[0][0], static_cast<TokenId>(t)},
                                  std::vector<TokenId>{r.visits[1].codes[0][0], r.visits[2].codes[0][0]}, 5));
    std::vector<double> s(100);
    std::uniform_real_distribution<double> u;
    for (auto& x : s) x = u(rng);
    return s;
  });
  const auto e = recall_at_k(random, test, 10, 0, 500, 3);
  CHECK(e.transitions == 10000);
  CHECK(e.recall == doctest::Approx(0.1).epsilon(0.1));
  CHECK(e.ci95 > 0.0);
  CHECK(e.ci95 < 0.01);
}

TEST_CASE("bootstrap interval shrinks with the square root of n") {
  Rng rng(4);
  std::bernoulli_distribution b(0.3);
  std::vector<double> small(400), large(1600);
  for (auto& x : small) x = b(rng);
  for (auto& x : large) x = b(rng);
  const double cs = recall_from_values(small, 5, 2000, 1).ci95;
  const double cl = recall_from_values(large, 5, 2000, 1).ci95;
  CHECK(cl / cs == doctest::Approx(0.5).epsilon(0.2));
  CHECK(recall_from_values(small, 5, 2000, 1).ci95 == cs);
  CHECK(recall_from_values(small, 5, 0, 1).ci95 == 0.0);
  CHECK(recall_from_values({}, 5, 10, 1).transitions == 0);
}

TEST_CASE("LSTM learns the chain oracle") {
  const auto corpus = generate_oracle_corpus(chain_oracle(50, 11), 120);
  std::vector<double> losses;
  auto cfg = quick(2);
  const auto p = train_predictor(corpus, cfg, &losses);
  REQUIRE(losses.size() == 30);
  CHECK(losses.back() < 0.5 * losses.front());

  const auto spec = chain_oracle(50, 11);
  int hits = 0, total = 0;
  for (const auto& r : corpus.records) {
    const auto s = p.transition_scores(r);
    REQUIRE(s.size() == r.visits.size() - 1);
    for (std::size_t t = 0; t < s.size(); ++t) {
      const int argmax = static_cast<int>(std::max_element(s[t].begin(), s[t].end()) - s[t].begin());
      hits += argmax == r.visits[t + 1].codes[0][0];
      ++total;
    }
  }
  REQUIRE(total > 100);
  CHECK(static_cast<double>(hits) / total >= 0.95);

  const auto again = train_predictor(corpus, cfg);
  const auto wa = p.weights(), wb = again.weights();
  REQUIRE(wa.size() == wb.size());
  for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i] == wb[i]);
}

TEST_CASE("insufficient history") {
  const Corpus single{dx_schema(5), {chain_record({{1}}), chain_record({{2, 3}})}};
  try {
    train_predictor(single, quick());
    FAIL("trained without any transition");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInsufficientHistory);
  }
}

TEST_CASE("utility arms") {
  const auto spec = chain_oracle(20, 3);
  const auto all = generate_oracle_corpus(spec, 90);
  Corpus train{all.schema, {all.records.begin(), all.records.begin() + 40}};
  Corpus test{all.schema, {all.records.begin() + 40, all.records.begin() + 70}};
  Corpus pool{all.schema, {all.records.begin() + 70, all.records.end()}};
  for (auto& r : pool.records) r.id = "S" + r.id;
  auto cfg = quick(5);
  cfg.epochs = 5;

  // a real-only arm is plain training with the arm's seed
  const UtilityArm real_only{0, 25};
  const auto res = run_utility_arm(pool, train, test, real_only, cfg);
  CHECK(res.label == "real-25");
  CHECK(res.training_size == 25);
  auto plain_cfg = cfg;
  plain_cfg.seed = arm_seed(cfg.seed, real_only);
  const auto plain = train_predictor(Corpus{train.schema, {train.records.begin(), train.records.begin() + 25}}, plain_cfg);
  REQUIRE(res.recall.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto direct = recall_at_k(plain, test, cfg.ks[i], 0, cfg.bootstrap_resamples, plain_cfg.seed);
    CHECK(res.recall[i].recall == direct.recall);
    CHECK(res.recall[i].ci95 == direct.ci95);
  }

  const std::vector<UtilityArm> arms{{0, 10}, {20, 10}, {20, 0}};
  const auto suite = run_utility_suite(pool, train, test, arms, cfg);
  REQUIRE(suite.size() == 3);
  CHECK(suite[1].label == "syn+real-10");
  CHECK(suite[2].label == "syn");
  CHECK(suite[1].training_size == 30);
  const auto suite2 = run_utility_suite(pool, train, test, arms, cfg);
  for (std::size_t i = 0; i < 3; ++i) CHECK(suite[i].recall[0].recall == suite2[i].recall[0].recall);

  // leaking a test record into the pool is refused
  Corpus leaky = pool;
  leaky.records[0] = test.records[0];
  CHECK_THROWS_AS(run_utility_arm(leaky, train, test, {5, 5}, cfg), Error);
  CHECK_THROWS_AS(run_utility_arm(pool, train, test, {100, 0}, cfg), Error);
  CHECK_THROWS_AS(run_utility_arm(pool, train, test, {0, 0}, cfg), Error);

  const auto path = std::filesystem::temp_directory_path() / "synthehr_utility.json";
  write_utility_results(suite, path);
  std::ifstream in(path);
  const auto j = nlohmann::json::parse(in);
  CHECK(j.dump() == nlohmann::json::parse(utility_results_json(suite)).dump());
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5}, up{2, 4, 5, 9, 10}, down{5, 4, 3, 2, 1};
  CHECK(spearman(x, up) == doctest::Approx(1.0));
  CHECK(spearman(x, down) == doctest::Approx(-1.0));
  // with ties: ranks (1, 2.5, 2.5, 4)
  const std::vector<double> a{1, 2, 3, 4}, b{1, 2, 2, 3};
  const double ra[] = {1, 2, 3, 4}, rb[] = {1, 2.5, 2.5, 4};
  double ma = 2.5, mb = 2.5, sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 4; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  CHECK(spearman(a, b) == doctest::Approx(sab / std::sqrt(saa * sbb)).epsilon(1e-12));
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), Error);
}
