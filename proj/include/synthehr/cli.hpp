#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "synthehr/error.hpp"
#include "synthehr/generate.hpp"
#include "synthehr/model.hpp"
#include "synthehr/oracle.hpp"
#include "synthehr/privacy.hpp"
#include "synthehr/train.hpp"
#include "synthehr/utility.hpp"

namespace synthehr {

// Arm size meaning "every record of the corpus".
inline constexpr std::size_t kAllRecords = static_cast<std::size_t>(-1);

struct RunConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::optional<std::filesystem::path> schema;
  std::map<std::string, std::filesystem::path> corpora;  // by name: train, val, test, synthetic, input, or any other

  ModelConfig model;
  TrainConfig train;
  GenerationConfig generation;

  struct Generate {
    std::size_t n = 100;
    std::string mode = "scratch";  // or "complete"
    CompletionPolicy completion;
  } generate;

  struct Evaluate {
    std::string corpus = "test";
    int bootstrap_resamples = 1000;
  } evaluate;

  struct Mi {
    MlpConfig mlp;
    std::optional<std::filesystem::path> scores_file;
  } mi;

  struct Ai {
    std::vector<double> deltas{-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0};
    bool sentinels = true;
    double hide_fraction = 0.2;
    std::string imputer = "model";  // or "cooccurrence"
    double alpha = 1.0;
  } ai;

  struct Utility {
    UtilityConfig config;
    std::vector<UtilityArm> arms{{0, kAllRecords}};
  } utility;

  struct Oracle {
    std::string preset = "chain";  // chain | uniform | coupled
    int vocab_size = 50;
    int n_patients = 300;
    CoupledOracleOptions coupled;
    std::array<double, 3> splits{0.8, 0.1, 0.1};
  } oracle;
};

// Throws Error(kConfigInvalid) whose message starts with the offending field path.
RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

// Process exit status for an error: 2 config-invalid, 3 data error, 4 numeric failure, 1 otherwise.
int exit_code_for(ErrorCode code);

// Named substream of the run seed for one command.
std::uint64_t command_seed(const RunConfig& config, std::string_view command);

std::filesystem::path cmd_oracle_corpus(const RunConfig& config, std::ostream& out);
std::filesystem::path cmd_train(const RunConfig& config, std::ostream& out);
std::filesystem::path cmd_generate(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& out);
std::filesystem::path cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& out);
std::filesystem::path cmd_attack_mi(const RunConfig& config, std::ostream& out);
std::filesystem::path cmd_attack_ai(const RunConfig& config, std::ostream& out);
std::filesystem::path cmd_utility(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                                  std::ostream& out);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace synthehr
