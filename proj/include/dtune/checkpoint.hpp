#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dtune {

/// Host copy of one named parameter tensor (float32, row-major).
struct HostTensor {
    std::vector<int64_t> shape;
    std::vector<float> values;
    bool operator==(const HostTensor&) const = default;

    int64_t numel() const;
};

using TensorMap = std::map<std::string, HostTensor>;

/// Module path of a tensor name: its first dotted component.
std::string module_of(const std::string& name);

/// Stable content hash (hex) of a tensor's shape and bytes.
std::string tensor_hash(const HostTensor& t);
/// Hash over every tensor whose name starts with `prefix` (all if empty).
std::string map_hash(const TensorMap& m, const std::string& prefix = "");

std::string hex64(std::uint64_t v);

/// Reference to a separately stored frozen backbone checkpoint.
struct BackboneRef {
    std::string path;
    std::string hash;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    std::string config_hash;
    TensorMap tensors;
    std::optional<BackboneRef> backbone;
    nlohmann::json extra = nlohmann::json::object();
};

/// Writes manifest.json plus one little-endian float32 blob per tensor into a
/// fresh directory. Directories are write-once: an existing manifest is an
/// IoError.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);

/// Loads and verifies sizes and hashes; any mismatch between manifest and
/// blobs raises CorruptionError naming the tensor.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dtune
