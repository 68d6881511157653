#pragma once

#include <filesystem>
#include <memory>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dtune/checkpoint.hpp"
#include "dtune/config.hpp"
#include "dtune/model.hpp"

namespace dtune {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config validation.
/// Failures print one JSON line ({"error", "message"[, "path"]}) to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Saves a frozen backbone as its own checkpoint and returns a reference to it.
BackboneRef save_backbone(const TensorMap& backbone, const nlohmann::json& config,
                          const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object());
/// Loads a referenced backbone; CorruptionError if its tensors no longer hash to the reference.
TensorMap load_backbone(const BackboneRef& ref);

struct LoadedModel {
    ExperimentConfig config;
    nlohmann::json extra;
    std::unique_ptr<DomainModel> model;
    torch::Tensor concept_image;  // [3, H, W]; undefined for pretrained checkpoints
    std::string config_hash;
};

/// Model checkpoints carry the validated experiment config, the model
/// architecture actually built (in `extra.model`), the backbone reference and,
/// for personalized models, the concept image as tensor "concept.image".
void save_model(const DomainModel& model, const nlohmann::json& config, const BackboneRef& backbone,
                const std::filesystem::path& dir, nlohmann::json extra = nlohmann::json::object(),
                const torch::Tensor& concept_image = {});
LoadedModel load_model(const std::filesystem::path& dir);

/// FNV-1a hash (hex) of a file's bytes; for a directory, of its manifest.
std::string file_hash(const std::filesystem::path& path);

}  // namespace dtune
