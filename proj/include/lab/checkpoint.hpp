#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "lab/model.hpp"

namespace lab {

inline constexpr int kCheckpointSchemaVersion = 1;

// Training-loop state carried alongside the model: epoch index, the named RNG
// stream states, and the heavy-ball velocity buffers (keyed by parameter
// name), everything a resume needs to reproduce the trajectory bit-exactly.
struct CheckpointMeta {
    int epoch = 0;
    std::map<std::string, uint64_t> rng_states;
    std::map<std::string, Tensor> velocities;
};

// JSON layout is documented in docs/formats.md. Doubles are written with 17
// significant digits, so save -> load round-trips bit-exactly.
void save_checkpoint(const ModelState& state, const CheckpointMeta& meta, const std::string& path);

struct LoadedCheckpoint {
    ModelState state;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace lab
