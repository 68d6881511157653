#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dtune/model.hpp"
#include "dtune/sprite.hpp"
#include "dtune/trainer.hpp"

namespace dtune {

inline constexpr int kConfigSchemaVersion = 1;

/// The complete default experiment record. Every key a user config may set
/// appears here; a null default accepts a number or null ("use the preset").
nlohmann::json default_config();

/// Overlays `user` on the defaults. Unknown keys, type mismatches and
/// out-of-range values raise ValidationError carrying the JSON key path.
nlohmann::json validate_config(const nlohmann::json& user);

/// Reads and validates a config file; ValidationError for malformed JSON too.
nlohmann::json load_config(const std::filesystem::path& path);

/// FNV-1a over the canonical (sorted-key) dump, excluding output_dir.
std::string config_hash(const nlohmann::json& cfg);

/// Typed views of a validated config.
struct ExperimentConfig {
    nlohmann::json raw;
    std::uint64_t seed = 0;
    std::string output_dir;
    int n_identities = 64;
    int images_per = 16;
    int resolution = 32;
    DomainRanges ranges;
    BackboneTrainConfig backbone;
    ModelConfig model;
    PretrainConfig pretrain;
    PersonalizeConfig personalize;
    bool use_mask = true;
    AblationFlags flags;
    nlohmann::json analysis;

    /// Named sub-stream of the global seed.
    std::uint64_t stream(const char* name) const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& validated);

/// Output root: DTUNE_OUTPUT_ROOT if set, else the config's output_dir.
std::filesystem::path output_root(const ExperimentConfig& cfg);

}  // namespace dtune
