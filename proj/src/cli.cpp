#include "synthehr/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "synthehr/checkpoint.hpp"
#include "synthehr/metrics.hpp"
#include "synthehr/rng.hpp"

namespace synthehr {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void invalid(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::kConfigInvalid, path + ": " + what);
}

// Typed access to one JSON object; remembers consumed keys so unknown ones can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) invalid(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) invalid(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) invalid(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
            invalid(field(key), "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) invalid(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) invalid(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      invalid(field(key), e.what());
    }
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), field(key));
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) invalid(field(it.key()), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

double parse_real(const json& v, const std::string& path) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  invalid(path, "expected a number, \"inf\" or \"-inf\"");
}

std::size_t parse_size(const json& v, const std::string& path) {
  if (v.is_string() && v.get<std::string>() == "all") return kAllRecords;
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  invalid(path, "expected a non-negative integer or \"all\"");
}

SlotPolicy parse_slot(Section s) {
  SlotPolicy p;
  std::string action = "keep_all";
  s.get("action", action);
  if (action == "keep_all") p.action = CompletionAction::kKeepAll;
  else if (action == "remove_all") p.action = CompletionAction::kRemoveAll;
  else if (action == "remove_random") p.action = CompletionAction::kRemoveRandom;
  else invalid(s.field("action"), "expected keep_all, remove_all or remove_random");
  s.get("fraction", p.fraction);
  s.finish();
  return p;
}

template <typename F>
void checked(const std::string& path, F&& validate) {
  try {
    validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kInvalidSpec) invalid(path, e.what());
    throw;
  }
}

void parse_model(Section s, ModelConfig& m) {
  s.get("d_model", m.d_model);
  s.get("n_encoder_layers", m.n_encoder_layers);
  s.get("n_decoder_layers", m.n_decoder_layers);
  s.get("n_heads", m.n_heads);
  s.get("d_ff", m.d_ff);
  s.get("n_prompt_tokens", m.n_prompt_tokens);
  s.get("d0", m.d0);
  s.get("max_positions", m.max_positions);
  s.finish();
}

void parse_train(Section s, TrainConfig& t) {
  s.get("learning_rate", t.learning_rate);
  s.get("weight_decay", t.weight_decay);
  s.get("batch_size", t.batch_size);
  s.get("epochs", t.epochs);
  s.get("warmup_epochs", t.warmup_epochs);
  s.get("grad_clip", t.grad_clip);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("adam_eps", t.adam_eps);
  s.get("longitudinal_fraction", t.longitudinal_fraction);
  s.get("max_val_records", t.max_val_records);
  s.get("selection_metric", t.selection_metric);
  if (s.has("corruption")) {
    auto c = s.child("corruption");
    c.get("p_mask", t.corruption.p_mask);
    c.get("p_delete", t.corruption.p_delete);
    c.get("p_infill", t.corruption.p_infill);
    c.get("infill_lambda", t.corruption.infill_lambda);
    c.get("enable_span_shuffle", t.corruption.enable_span_shuffle);
    c.get("enable_modality_permute", t.corruption.enable_modality_permute);
    c.finish();
  }
  s.finish();
}

void parse_generation(Section s, RunConfig& c) {
  auto& g = c.generation;
  if (s.has("strategy")) {
    std::string name;
    s.get("strategy", name);
    try {
      g.strategy = parse_strategy(name);
    } catch (const Error&) {
      invalid(s.field("strategy"), "expected greedy, top_k, nucleus or beam");
    }
  }
  s.get("temperature", g.temperature);
  s.get("top_k", g.top_k);
  s.get("top_p", g.top_p);
  s.get("beam_width", g.beam_width);
  s.get("max_codes_per_modality", g.max_codes_per_modality);
  s.get("max_visits", g.max_visits);
  s.get("n", c.generate.n);
  s.get("mode", c.generate.mode);
  if (c.generate.mode != "scratch" && c.generate.mode != "complete")
    invalid(s.field("mode"), "expected scratch or complete");
  if (s.has("completion")) {
    auto p = s.child("completion");
    if (p.has("default")) c.generate.completion.default_policy = parse_slot(p.child("default"));
    if (p.has("modalities")) {
      const auto& mods = p.raw("modalities");
      if (!mods.is_object()) invalid(p.field("modalities"), "expected an object keyed by modality index");
      for (auto it = mods.begin(); it != mods.end(); ++it) {
        int k = 0;
        try {
          k = std::stoi(it.key());
        } catch (const std::exception&) {
          invalid(p.field("modalities." + it.key()), "key must be a modality index");
        }
        c.generate.completion.modality_policy[k] = parse_slot(Section(it.value(), p.field("modalities." + it.key())));
      }
    }
    p.finish();
  }
  s.finish();
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    invalid("<root>", std::string("not valid JSON: ") + e.what());
  }
  RunConfig c;
  c.base_dir = base_dir;
  Section s(root, "");
  s.get("seed", c.seed);
  std::string out_dir = c.output_dir.string();
  s.get("output_dir", out_dir);
  c.output_dir = out_dir;
  if (s.has("schema")) {
    std::string p;
    s.get("schema", p);
    c.schema = p;
  }
  if (s.has("corpora")) {
    auto cs = s.child("corpora");
    for (const auto& [key, value] : s.raw("corpora").items()) {
      std::string p;
      cs.get(key, p);
      c.corpora[key] = p;
    }
  }
  if (s.has("model")) parse_model(s.child("model"), c.model);
  checked("model", [&] { c.model.validate(); });
  if (s.has("train")) parse_train(s.child("train"), c.train);
  checked("train", [&] { c.train.validate(); });
  if (s.has("generate")) parse_generation(s.child("generate"), c);
  checked("generate", [&] {
    c.generation.validate();
    c.generate.completion.validate();
  });
  if (s.has("evaluate")) {
    auto e = s.child("evaluate");
    e.get("corpus", c.evaluate.corpus);
    e.get("bootstrap_resamples", c.evaluate.bootstrap_resamples);
    if (c.evaluate.bootstrap_resamples < 0) invalid(e.field("bootstrap_resamples"), "must be >= 0");
    e.finish();
  }
  if (s.has("attack")) {
    auto a = s.child("attack");
    if (a.has("mi")) {
      auto m = a.child("mi");
      m.get("hidden", c.mi.mlp.hidden);
      m.get("epochs", c.mi.mlp.epochs);
      m.get("learning_rate", c.mi.mlp.learning_rate);
      m.get("weight_decay", c.mi.mlp.weight_decay);
      if (m.has("scores_file")) {
        std::string p;
        m.get("scores_file", p);
        c.mi.scores_file = p;
      }
      if (c.mi.mlp.hidden < 1) invalid(m.field("hidden"), "must be >= 1");
      if (c.mi.mlp.epochs < 1) invalid(m.field("epochs"), "must be >= 1");
      m.finish();
    }
    if (a.has("ai")) {
      auto m = a.child("ai");
      if (m.has("deltas")) {
        const auto& d = m.raw("deltas");
        if (!d.is_array() || d.empty()) invalid(m.field("deltas"), "expected a non-empty array");
        c.ai.deltas.clear();
        for (std::size_t i = 0; i < d.size(); ++i)
          c.ai.deltas.push_back(parse_real(d[i], m.field("deltas[" + std::to_string(i) + "]")));
        if (!std::is_sorted(c.ai.deltas.begin(), c.ai.deltas.end())) invalid(m.field("deltas"), "must be ascending");
      }
      m.get("sentinels", c.ai.sentinels);
      m.get("hide_fraction", c.ai.hide_fraction);
      m.get("imputer", c.ai.imputer);
      m.get("alpha", c.ai.alpha);
      if (c.ai.hide_fraction <= 0.0 || c.ai.hide_fraction > 1.0) invalid(m.field("hide_fraction"), "must lie in (0, 1]");
      if (c.ai.imputer != "model" && c.ai.imputer != "cooccurrence")
        invalid(m.field("imputer"), "expected model or cooccurrence");
      if (!(c.ai.alpha > 0.0)) invalid(m.field("alpha"), "must be > 0");
      m.finish();
    }
    a.finish();
  }
  if (s.has("utility")) {
    auto u = s.child("utility");
    auto& uc = c.utility.config;
    u.get("hidden", uc.hidden);
    u.get("epochs", uc.epochs);
    u.get("learning_rate", uc.learning_rate);
    u.get("batch_size", uc.batch_size);
    u.get("target_modality", uc.target_modality);
    u.get("ks", uc.ks);
    u.get("bootstrap_resamples", uc.bootstrap_resamples);
    if (u.has("arms")) {
      const auto& arms = u.raw("arms");
      if (!arms.is_array() || arms.empty()) invalid(u.field("arms"), "expected a non-empty array");
      c.utility.arms.clear();
      for (std::size_t i = 0; i < arms.size(); ++i) {
        const std::string path = u.field("arms[" + std::to_string(i) + "]");
        Section arm(arms[i], path);
        UtilityArm a;
        if (arm.has("n_syn")) a.n_syn = parse_size(arm.raw("n_syn"), arm.field("n_syn"));
        if (arm.has("n_real")) a.n_real = parse_size(arm.raw("n_real"), arm.field("n_real"));
        if (a.n_syn == kAllRecords) invalid(arm.field("n_syn"), "\"all\" is only valid for n_real");
        arm.finish();
        c.utility.arms.push_back(a);
      }
    }
    u.finish();
    checked("utility", [&] { uc.validate(); });
  }
  if (s.has("oracle")) {
    auto o = s.child("oracle");
    auto& oc = c.oracle;
    o.get("preset", oc.preset);
    if (oc.preset != "chain" && oc.preset != "uniform" && oc.preset != "coupled")
      invalid(o.field("preset"), "expected chain, uniform or coupled");
    o.get("vocab_size", oc.vocab_size);
    o.get("n_patients", oc.n_patients);
    o.get("n_dx", oc.coupled.n_dx);
    o.get("n_lab", oc.coupled.n_lab);
    o.get("coupling", oc.coupled.coupling);
    o.get("branching", oc.coupled.branching);
    o.get("class_effect", oc.coupled.class_effect);
    o.get("extra_lab_draws", oc.coupled.extra_lab_draws);
    if (o.has("splits")) {
      std::vector<double> sp;
      o.get("splits", sp);
      if (sp.size() != 3) invalid(o.field("splits"), "expected [train, val, test]");
      oc.splits = {sp[0], sp[1], sp[2]};
    }
    if (oc.vocab_size < 1) invalid(o.field("vocab_size"), "must be >= 1");
    if (oc.n_patients < 1) invalid(o.field("n_patients"), "must be >= 1");
    o.finish();
  }
  s.finish();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) invalid("--config", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigInvalid:
    case ErrorCode::kInvalidSpec:
      return 2;
    case ErrorCode::kUnknownCode:
    case ErrorCode::kSchemaMismatch:
    case ErrorCode::kMalformedLine:
    case ErrorCode::kDegenerateFraction:
    case ErrorCode::kGrammarViolation:
    case ErrorCode::kUnknownModality:
    case ErrorCode::kUnknownToken:
    case ErrorCode::kEmptySequence:
    case ErrorCode::kNoEventsOfModality:
    case ErrorCode::kSizeMismatch:
    case ErrorCode::kDegenerateLabels:
    case ErrorCode::kInsufficientHistory:
    case ErrorCode::kSchemaHashMismatch:
    case ErrorCode::kIo:
      return 3;
    case ErrorCode::kNumericOverflow:
    case ErrorCode::kNonFiniteLoss:
      return 4;
    default:
      return 1;
  }
}

std::uint64_t command_seed(const RunConfig& config, std::string_view command) {
  return derive_seed(config.seed, command);
}

namespace {

fs::path resolve(const RunConfig& c, const fs::path& p) { return p.is_absolute() ? p : c.base_dir / p; }

fs::path output_dir(const RunConfig& c) {
  const auto dir = resolve(c, c.output_dir);
  fs::create_directories(dir);
  return dir;
}

fs::path require_corpus_path(const RunConfig& c, const std::string& name) {
  const auto it = c.corpora.find(name);
  if (it == c.corpora.end()) invalid("corpora." + name, "required by this command");
  const auto p = resolve(c, it->second);
  if (!fs::exists(p)) invalid("corpora." + name, "file not found: " + p.string());
  return p;
}

std::optional<Schema> config_schema(const RunConfig& c) {
  if (!c.schema) return std::nullopt;
  const auto p = resolve(c, *c.schema);
  if (!fs::exists(p)) invalid("schema", "file not found: " + p.string());
  return load_schema(p);
}

// Corpora of one command share a schema: the configured one, else the one
// inferred from the training corpus.
Corpus load_named(const RunConfig& c, const std::string& name, const std::optional<Schema>& schema) {
  return load_corpus(require_corpus_path(c, name), schema);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// manifest.json is the only file that carries wall-clock time.
void update_manifest(const fs::path& dir, const std::string& command, const RunConfig& c,
                     const std::vector<fs::path>& outputs) {
  const auto path = dir / "manifest.json";
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      m = nlohmann::ordered_json::parse(in);
    } catch (const json::exception&) {
      m = nlohmann::ordered_json::object();
    }
  }
  nlohmann::ordered_json entry;
  entry["seed"] = c.seed;
  entry["command_seed"] = command_seed(c, command);
  auto files = nlohmann::ordered_json::array();
  for (const auto& o : outputs) files.push_back(o.filename().string());
  entry["outputs"] = files;
  entry["timestamp"] = utc_timestamp();
  m[command] = entry;
  write_text(path, m.dump(2) + "\n");
}

std::unique_ptr<Transformer> load_model_for(const RunConfig& c, const fs::path& checkpoint,
                                            const std::optional<Schema>& schema) {
  if (!fs::exists(checkpoint)) invalid("--checkpoint", "file not found: " + checkpoint.string());
  auto model = load_checkpoint(checkpoint);
  if (schema && !(model->vocabulary().schema() == *schema))
    throw Error(ErrorCode::kSchemaHashMismatch, "checkpoint schema differs from the configured schema");
  (void)c;
  return model;
}

}  // namespace

fs::path cmd_oracle_corpus(const RunConfig& c, std::ostream& out) {
  const auto seed = command_seed(c, "oracle-corpus");
  OracleSpec spec;
  if (c.oracle.preset == "chain") spec = chain_oracle(c.oracle.vocab_size, seed);
  else if (c.oracle.preset == "uniform") spec = uniform_oracle(c.oracle.vocab_size, seed);
  else {
    auto o = c.oracle.coupled;
    o.seed = seed;
    spec = coupled_oracle(o);
  }
  const Corpus corpus = generate_oracle_corpus(spec, c.oracle.n_patients);
  const auto splits = split_corpus(corpus, c.oracle.splits, derive_seed(seed, "split"));
  const auto dir = output_dir(c);
  write_schema(corpus.schema, dir / "schema.json");
  write_corpus(splits.train, dir / "train.jsonl");
  write_corpus(splits.val, dir / "val.jsonl");
  write_corpus(splits.test, dir / "test.jsonl");
  update_manifest(dir, "oracle-corpus", c,
                  {dir / "schema.json", dir / "train.jsonl", dir / "val.jsonl", dir / "test.jsonl"});
  out << "oracle corpus: " << splits.train.size() << " train, " << splits.val.size() << " val, "
      << splits.test.size() << " test records in " << dir.string() << "\n";
  return dir;
}

fs::path cmd_train(const RunConfig& c, std::ostream& out) {
  const auto schema = config_schema(c);
  Corpus train = load_named(c, "train", schema);
  Corpus val{train.schema, {}};
  if (c.corpora.count("val")) val = load_named(c, "val", train.schema);
  const auto seed = command_seed(c, "train");
  ModelConfig mc = c.model;
  mc.seed = derive_seed(seed, "init");
  TrainConfig tc = c.train;
  tc.seed = derive_seed(seed, "steps");
  tc.corruption.seed = derive_seed(seed, "corruption");

  const auto dir = output_dir(c);
  const auto log_path = dir / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc | std::ios::binary);
  if (!log) throw Error(ErrorCode::kIo, "cannot write " + log_path.string());
  const auto result = train_model(train, val, mc, tc, &log);
  log.close();
  const auto ckpt = dir / "model.ckpt";
  save_checkpoint(*result.model, ckpt);
  update_manifest(dir, "train", c, {ckpt, vocabulary_path(ckpt), log_path});
  out << "trained " << result.log.size() << " epochs; best epoch " << result.best_epoch << " (val ppl "
      << result.best_val_ppl << "); checkpoint " << ckpt.string() << "\n";
  return ckpt;
}

fs::path cmd_generate(const RunConfig& c, const fs::path& checkpoint, std::ostream& out) {
  const auto schema = config_schema(c);
  const auto model = load_model_for(c, checkpoint, schema);
  const auto seed = command_seed(c, "generate");
  GenerationConfig g = c.generation;
  g.seed = derive_seed(seed, "decode");
  const auto dir = output_dir(c);
  const auto corpus_path = dir / "synthetic.jsonl";
  const auto prov_path = dir / "synthetic.provenance.jsonl";

  if (c.generate.mode == "scratch") {
    Corpus train = load_named(c, "train", model->vocabulary().schema());
    Rng rng(derive_seed(seed, "baselines"));
    const auto baselines = sample_baselines(train, c.generate.n, rng);
    std::size_t truncated = 0;
    const Corpus syn = generate_corpus(*model, baselines, g, &truncated);
    write_corpus(syn, corpus_path);
    std::string prov;
    for (const auto& r : syn.records) prov += nlohmann::ordered_json{{"id", r.id}, {"source", "scratch"}}.dump() + "\n";
    write_text(prov_path, prov);
    out << "generated " << syn.size() << " records (" << truncated << " truncated) to " << corpus_path.string() << "\n";
  } else {
    Corpus input = load_named(c, "input", model->vocabulary().schema());
    CompletionPolicy policy = c.generate.completion;
    policy.seed = derive_seed(seed, "completion");
    std::vector<CompletedRecord> done(input.size());
    const int n = static_cast<int>(input.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) done[i] = complete_record(*model, input.records[i], policy, g);
    Corpus syn{input.schema, {}};
    for (const auto& d : done) syn.records.push_back(d.record);
    write_corpus(syn, corpus_path);
    write_provenance(syn.schema, done, prov_path);
    out << "completed " << syn.size() << " records to " << corpus_path.string() << "\n";
  }
  update_manifest(dir, "generate", c, {corpus_path, prov_path});
  return corpus_path;
}

fs::path cmd_evaluate(const RunConfig& c, const fs::path& checkpoint, std::ostream& out) {
  const auto schema = config_schema(c);
  const auto model = load_model_for(c, checkpoint, schema);
  const Corpus corpus = load_named(c, c.evaluate.corpus, model->vocabulary().schema());
  EvaluationOptions opt;
  opt.bootstrap_resamples = c.evaluate.bootstrap_resamples;
  opt.seed = command_seed(c, "evaluate");
  opt.label = c.evaluate.corpus;
  const auto report = evaluate_corpus(*model, corpus, opt);
  const auto dir = output_dir(c);
  const auto path = dir / "evaluation.json";
  write_report(report, path);
  update_manifest(dir, "evaluate", c, {path});
  out << std::left << std::setw(12) << "modality" << std::setw(8) << "n" << std::setw(22) << "lpl (median ± ci95)"
      << "mpl (median ± ci95)\n";
  for (const auto& a : report.aggregate) {
    std::ostringstream l, m;
    l << std::setprecision(4) << a.lpl_median << " ± " << a.lpl_ci95;
    m << std::setprecision(4) << a.mpl_median << " ± " << a.mpl_ci95;
    out << std::left << std::setw(12) << a.modality << std::setw(8) << a.n << std::setw(22) << l.str() << m.str() << "\n";
  }
  return path;
}

fs::path cmd_attack_mi(const RunConfig& c, std::ostream& out) {
  const auto dir = output_dir(c);
  const auto path = dir / "attack_mi.json";
  MembershipAttackResult result;
  if (c.mi.scores_file) {
    const auto p = resolve(c, *c.mi.scores_file);
    if (!fs::exists(p)) invalid("attack.mi.scores_file", "file not found: " + p.string());
    std::ifstream in(p);
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::string> ids;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        const auto j = json::parse(line);
        scores.push_back(j.at("score").get<double>());
        labels.push_back(j.at("label").get<int>());
        ids.push_back(j.contains("id") ? j.at("id").get<std::string>() : std::to_string(n - 1));
      } catch (const json::exception& e) {
        throw Error(ErrorCode::kMalformedLine, p.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    result = score_membership(scores, labels, std::move(ids));
  } else {
    const auto schema = config_schema(c);
    const Corpus train = load_named(c, "train", schema);
    const Corpus test = load_named(c, "test", train.schema);
    const Corpus syn = load_named(c, "synthetic", train.schema);
    const auto seed = command_seed(c, "attack-mi");
    ModelConfig mc = c.model;
    mc.seed = derive_seed(seed, "shadow-init");
    TrainConfig tc = c.train;
    tc.seed = derive_seed(seed, "shadow-steps");
    tc.corruption.seed = derive_seed(seed, "shadow-corruption");
    const auto shadow = train_shadow(syn, mc, tc);
    const Corpus in_set = sample_records(syn, test.size(), derive_seed(seed, "in-set"));
    const auto dataset = build_mi_dataset(*shadow, in_set, test);
    MlpConfig mlp = c.mi.mlp;
    mlp.seed = derive_seed(seed, "classifier");
    result = run_membership_attack(dataset, *shadow, train, test, mlp);
  }
  write_membership_result(result, path);
  update_manifest(dir, "attack-mi", c, {path});
  out << "membership inference AUC " << std::setprecision(6) << result.auc << " over " << result.scores.size()
      << " records\n";
  return path;
}

fs::path cmd_attack_ai(const RunConfig& c, std::ostream& out) {
  const auto schema = config_schema(c);
  const Corpus train = load_named(c, "train", schema);
  const Corpus test = load_named(c, "test", train.schema);
  const Corpus syn = load_named(c, "synthetic", train.schema);
  const auto seed = command_seed(c, "attack-ai");
  std::vector<double> deltas = c.ai.deltas;
  if (c.ai.sentinels) {
    deltas.insert(deltas.begin(), -std::numeric_limits<double>::infinity());
    deltas.push_back(std::numeric_limits<double>::infinity());
  }
  ImputerFactory factory;
  if (c.ai.imputer == "cooccurrence") {
    factory = cooccurrence_imputer_factory(c.ai.alpha);
  } else {
    ModelConfig mc = c.model;
    mc.seed = derive_seed(seed, "imputer-init");
    TrainConfig tc = c.train;
    tc.seed = derive_seed(seed, "imputer-steps");
    tc.corruption.seed = derive_seed(seed, "imputer-corruption");
    factory = language_model_imputer_factory(mc, tc);
  }
  const auto result =
      run_attribute_attack(syn, train, test, deltas, c.ai.hide_fraction, derive_seed(seed, "queries"), factory);
  const auto dir = output_dir(c);
  const auto path = dir / "attack_ai.json";
  write_attribute_result(result, path);
  update_manifest(dir, "attack-ai", c, {path});
  out << "attribute inference: " << result.n_positive << " hidden codes, " << result.n_negative << " absent codes\n";
  out << std::left << std::setw(10) << "delta" << std::setw(14) << "treat TPR" << std::setw(14) << "treat FPR"
      << std::setw(14) << "ctrl TPR" << "ctrl FPR\n";
  for (std::size_t i = 0; i < result.deltas.size(); ++i)
    out << std::left << std::setprecision(4) << std::setw(10) << result.deltas[i] << std::setw(14)
        << result.treatment.tpr[i] << std::setw(14) << result.treatment.fpr[i] << std::setw(14)
        << result.control.tpr[i] << result.control.fpr[i] << "\n";
  return path;
}

fs::path cmd_utility(const RunConfig& c, const std::optional<fs::path>& checkpoint, std::ostream& out) {
  const auto schema = config_schema(c);
  const Corpus train = load_named(c, "train", schema);
  const Corpus test = load_named(c, "test", train.schema);
  const auto seed = command_seed(c, "utility");
  std::vector<UtilityArm> arms = c.utility.arms;
  std::size_t n_syn = 0;
  for (auto& a : arms) {
    if (a.n_real == kAllRecords) a.n_real = train.size();
    n_syn = std::max(n_syn, a.n_syn);
  }
  UtilityConfig uc = c.utility.config;
  uc.seed = derive_seed(seed, "predictor");
  Corpus pool{train.schema, {}};
  if (n_syn > 0) {
    if (c.corpora.count("synthetic")) {
      pool = load_named(c, "synthetic", train.schema);
    } else {
      if (!checkpoint) invalid("corpora.synthetic", "arms need synthetic records: give a synthetic corpus or --checkpoint");
      const auto model = load_model_for(c, *checkpoint, train.schema);
      GenerationConfig g = c.generation;
      g.seed = derive_seed(seed, "decode");
      Rng rng(derive_seed(seed, "baselines"));
      pool = generate_corpus(*model, sample_baselines(train, n_syn, rng), g);
    }
  }
  const auto results = run_utility_suite(pool, train, test, arms, uc);
  const auto dir = output_dir(c);
  const auto path = dir / "utility.json";
  write_utility_results(results, path);
  update_manifest(dir, "utility", c, {path});
  out << std::left << std::setw(18) << "arm" << std::setw(8) << "n_syn" << std::setw(8) << "n_real";
  for (int k : uc.ks) out << std::setw(20) << ("recall@" + std::to_string(k));
  out << "\n";
  for (const auto& r : results) {
    out << std::left << std::setw(18) << r.label << std::setw(8) << r.n_syn << std::setw(8) << r.n_real;
    for (const auto& e : r.recall) {
      std::ostringstream cell;
      cell << std::setprecision(4) << e.recall << " ± " << e.ci95;
      out << std::setw(20) << cell.str();
    }
    out << "\n";
  }
  return path;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic multimodal patient-record generation and evaluation"};
  app.require_subcommand(1);
  std::string config_path, checkpoint, out_dir, mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "global seed (overrides seed)");
  };
  auto* oracle = app.add_subcommand("oracle-corpus", "write an oracle corpus with known conditionals");
  add_common(oracle);
  oracle->add_option("--n", n, "number of patients");
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train);
  auto* generate = app.add_subcommand("generate", "generate or complete records");
  add_common(generate);
  generate->add_option("--checkpoint", checkpoint, "model checkpoint");
  generate->add_option("--n", n, "number of records (scratch mode)");
  generate->add_option("--mode", mode, "scratch or complete")->check(CLI::IsMember({"scratch", "complete"}));
  auto* evaluate = app.add_subcommand("evaluate", "perplexity report");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "model checkpoint");
  auto* mi = app.add_subcommand("attack-mi", "membership inference attack");
  add_common(mi);
  auto* ai = app.add_subcommand("attack-ai", "attribute inference attack");
  add_common(ai);
  auto* utility = app.add_subcommand("utility", "next-visit prediction utility arms");
  add_common(utility);
  utility->add_option("--checkpoint", checkpoint, "model checkpoint used to generate synthetic records");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig c = load_run_config(config_path);
    if (seed) c.seed = *seed;
    if (!out_dir.empty()) {
      c.output_dir = fs::absolute(out_dir);
    }
    auto ckpt = [&]() -> fs::path {
      if (!checkpoint.empty()) return fs::absolute(checkpoint);
      return resolve(c, c.output_dir) / "model.ckpt";
    };
    if (oracle->parsed()) {
      if (n) c.oracle.n_patients = static_cast<int>(*n);
      cmd_oracle_corpus(c, out);
    } else if (train->parsed()) {
      cmd_train(c, out);
    } else if (generate->parsed()) {
      if (n) c.generate.n = *n;
      if (!mode.empty()) c.generate.mode = mode;
      cmd_generate(c, ckpt(), out);
    } else if (evaluate->parsed()) {
      cmd_evaluate(c, ckpt(), out);
    } else if (mi->parsed()) {
      cmd_attack_mi(c, out);
    } else if (ai->parsed()) {
      cmd_attack_ai(c, out);
    } else if (utility->parsed()) {
      std::optional<fs::path> cp;
      if (!checkpoint.empty()) cp = fs::absolute(checkpoint);
      else if (fs::exists(ckpt())) cp = ckpt();
      cmd_utility(c, cp, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace synthehr
