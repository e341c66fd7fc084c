#pragma once

#include <memory>
#include <optional>
#include <string>

#include "hmoe/checkpoint.hpp"
#include "hmoe/model.hpp"
#include "hmoe/optim.hpp"

namespace hmoe {

struct Checkpoint {
    ModelConfig config;
    std::unique_ptr<Model> model;
    std::optional<AdamState> adam;
    std::string rng_state;  // serialized training RNG, empty if absent
    // Every key=value line of the config block (includes the run snapshot the
    // trainer embeds, e.g. task.* keys for reconstructing the dataset).
    std::vector<std::pair<std::string, std::string>> config_kv;
};

std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::vector<std::pair<std::string, std::string>>& kv);

void save_checkpoint(const std::string& path, Model& model, const AdamState* adam,
                     const std::string& rng_state, const std::string& extra_config_text = "");
Checkpoint load_checkpoint(const std::string& path);

// Overwrites the model's parameters from a container; every tensor must match
// an existing parameter in name and shape, and none may be missing.
void load_params_into(Model& model, const TensorContainer& container);

}  // namespace hmoe
