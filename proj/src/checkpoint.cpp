#include "synthehr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "synthehr/error.hpp"

namespace synthehr {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'H', 'R', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error(ErrorCode::kIo, "truncated checkpoint " + path.string());
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

struct Header {
  nlohmann::json json;
  std::streamoff data_offset = 0;
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw Error(ErrorCode::kIo, "not a checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::kIo, "unsupported checkpoint version " + std::to_string(version));
  const auto len = get<std::uint64_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw Error(ErrorCode::kIo, "truncated checkpoint header");
  Header h;
  try {
    h.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIo, std::string("bad checkpoint header: ") + e.what());
  }
  h.data_offset = in.tellg();
  return h;
}

}  // namespace

std::filesystem::path vocabulary_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".vocab";
  return p;
}

void save_checkpoint(const Transformer& model, const std::filesystem::path& path) {
  const auto& cfg = model.config();
  const auto& schema = model.vocabulary().schema();
  nlohmann::ordered_json h;
  h["format"] = "synthehr-checkpoint";
  h["schema"] = nlohmann::ordered_json::parse(schema_to_json(schema));
  h["schema_hash"] = hex64(schema.hash());
  h["vocabulary_file"] = vocabulary_path(path).filename().string();
  h["vocab_size"] = model.vocabulary().size();
  h["model"] = {{"d_model", cfg.d_model},
                {"n_encoder_layers", cfg.n_encoder_layers},
                {"n_decoder_layers", cfg.n_decoder_layers},
                {"n_heads", cfg.n_heads},
                {"d_ff", cfg.d_ff},
                {"n_prompt_tokens", cfg.n_prompt_tokens},
                {"d0", cfg.d0},
                {"max_positions", cfg.max_positions},
                {"seed", cfg.seed}};
  h["numeric_stats"] = {{"mean", model.numeric_stats().mean}, {"stddev", model.numeric_stats().stddev}};
  auto named = model.named_parameters();
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  for (const auto& [name, t] : named) dir.push_back({{"name", name}, {"rows", t->value.rows}, {"cols", t->value.cols}});
  h["tensors"] = dir;
  const std::string text = h.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named)
    out.write(reinterpret_cast<const char*>(t->value.data.data()),
              static_cast<std::streamsize>(t->value.data.size() * sizeof(double)));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
  model.vocabulary().write(vocabulary_path(path));
}

std::uint64_t checkpoint_schema_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  const auto h = read_header(in, path);
  return std::stoull(h.json.at("schema_hash").get<std::string>(), nullptr, 16);
}

std::unique_ptr<Transformer> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  const auto h = read_header(in, path);
  try {
    const Schema schema = schema_from_json(h.json.at("schema").dump());
    if (hex64(schema.hash()) != h.json.at("schema_hash").get<std::string>())
      throw Error(ErrorCode::kSchemaHashMismatch, "schema hash does not match stored schema");
    Vocabulary vocab(schema);
    const auto vocab_file = path.parent_path() / h.json.at("vocabulary_file").get<std::string>();
    if (Vocabulary::read_tokens(vocab_file) != vocab.tokens())
      throw Error(ErrorCode::kSchemaHashMismatch, "vocabulary file " + vocab_file.string() + " does not match schema");

    const auto& m = h.json.at("model");
    ModelConfig cfg;
    cfg.d_model = m.at("d_model");
    cfg.n_encoder_layers = m.at("n_encoder_layers");
    cfg.n_decoder_layers = m.at("n_decoder_layers");
    cfg.n_heads = m.at("n_heads");
    cfg.d_ff = m.at("d_ff");
    cfg.n_prompt_tokens = m.at("n_prompt_tokens");
    cfg.d0 = m.at("d0");
    cfg.max_positions = m.at("max_positions");
    cfg.seed = m.at("seed");
    NumericStats stats;
    stats.mean = h.json.at("numeric_stats").at("mean").get<std::vector<double>>();
    stats.stddev = h.json.at("numeric_stats").at("stddev").get<std::vector<double>>();

    auto model = std::make_unique<Transformer>(vocab, cfg, stats);
    auto named = model->named_parameters();
    const auto& dir = h.json.at("tensors");
    if (dir.size() != named.size()) throw Error(ErrorCode::kIo, "tensor directory does not match architecture");
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto& t = named[i].second->value;
      if (dir[i].at("name") != named[i].first || dir[i].at("rows") != t.rows || dir[i].at("cols") != t.cols)
        throw Error(ErrorCode::kIo, "tensor " + named[i].first + " does not match the directory");
      if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double))))
        throw Error(ErrorCode::kIo, "truncated tensor data in " + path.string());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIo, std::string("bad checkpoint header: ") + e.what());
  }
}

}  // namespace synthehr
