#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include "synthehr/model.hpp"

namespace synthehr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: 8-byte magic, u32 version, u64 header length, a JSON
// header (schema, schema hash, vocabulary file name, hyperparameters,
// normalizer, tensor directory), then the tensors as raw little-endian
// doubles in directory order. The vocabulary is written next to the
// checkpoint as "<checkpoint>.vocab".
void save_checkpoint(const Transformer& model, const std::filesystem::path& path);

// Throws Error(kIo) for unreadable or malformed files and
// Error(kSchemaHashMismatch) if the stored vocabulary disagrees with the schema.
std::unique_ptr<Transformer> load_checkpoint(const std::filesystem::path& path);

// Schema hash recorded in a checkpoint, without loading the weights.
std::uint64_t checkpoint_schema_hash(const std::filesystem::path& path);

std::filesystem::path vocabulary_path(const std::filesystem::path& checkpoint);

}  // namespace synthehr
