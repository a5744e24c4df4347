#pragma once

// Named-tensor container files.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "CLRCKPT\0"
//   bytes 8..11   format version (uint32)
//   bytes 12..19  manifest length M (uint64)
//   next M bytes  UTF-8 JSON manifest: {"metadata": {...},
//                 "tensors": [{"name", "shape", "offset"}, ...]}
//   payload       row-major IEEE-754 binary32 values of each tensor, back to
//                 back, offsets counted from the start of the payload.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "color/experts.hpp"
#include "color/vit.hpp"

namespace color {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    NamedTensors tensors;

    const Tensor& tensor(const std::string& name) const;
    bool contains(const std::string& name) const;
};

// Throws ContractError for duplicate names or values off the binary32 grid.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
// Throws FormatError (with byte offset) or VersionError.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Only the manifest; does not read tensor payloads into memory.
nlohmann::json read_manifest(const std::string& path);

// FNV-1a over the serialized bytes; used to compare snapshots.
std::uint64_t fingerprint(const std::vector<std::uint8_t>& bytes);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Appends every tensor of `source` under `prefix` (e.g. "backbone.").
void append_tensors(Checkpoint& checkpoint, const NamedTensors& source, const std::string& prefix);
// Copies tensors named prefix + name into `target`, checking shapes.
void fill_tensors(const Checkpoint& checkpoint, const NamedTensors& target, const std::string& prefix);

Checkpoint backbone_checkpoint(const ViTParams& backbone);
// Rebuilds a frozen backbone from a checkpoint written by backbone_checkpoint.
ViTParams backbone_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix = "backbone.");

Checkpoint expert_checkpoint(const Expert& expert, const ModelConfig& config);
// Rebuilds a sealed expert; `info` holds dataset_id, rank and label_map.
Expert expert_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix, const nlohmann::json& info,
                              const ModelConfig& config);
nlohmann::json expert_info(const Expert& expert);

}  // namespace color
