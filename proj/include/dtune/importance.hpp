#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtune/checkpoint.hpp"

namespace dtune {

/// Parameter tensor in double precision; checkpoint tensors convert exactly.
struct ParamTensor {
    std::vector<int64_t> shape;
    std::vector<double> values;
};
using ParamMap = std::map<std::string, ParamTensor>;

ParamMap to_param_map(const TensorMap& m);

/// mean|tuned - base| / mean|base| over every tensor of one named layer.
/// `defined` is false when mean|base| < 1e-12; `score` is then NaN.
struct LayerScore {
    std::string layer_id;
    double score = 0.0;
    bool defined = true;
    int64_t n_params = 0;
};

/// Layer a tensor belongs to: its name without the final component
/// ("denoiser.mid.cross.q.weight" -> "denoiser.mid.cross.q").
std::string layer_of(const std::string& tensor_name);

/// Layer id -> tensor names, ordered by layer id.
std::map<std::string, std::vector<std::string>> layers_of(const ParamMap& m);

/// Location groups: "cross", "self", "other"; block groups: "down", "mid", "up", "other".
std::string location_group(const std::string& layer_id);
std::string block_group(const std::string& layer_id);
/// "q", "k", "v", "o" for attention projections, empty otherwise.
std::string matrix_type(const std::string& layer_id);

LayerScore layer_score(const ParamMap& base, const ParamMap& tuned, const std::string& layer_id);

struct GroupAggregate {
    double score = 0.0;  // mean of the defined member scores (0 when none)
    int n_layers = 0;
    int n_defined = 0;
};

struct ImportanceReport {
    int n_tuned = 0;
    std::vector<LayerScore> layers;  // per-layer means across tuned models, by layer id
    std::map<std::string, GroupAggregate> by_location;
    std::map<std::string, GroupAggregate> by_block;
    /// location ("cross" / "self") -> matrix type -> aggregate
    std::map<std::string, std::map<std::string, GroupAggregate>> by_matrix;
};

/// Averages every layer's score over the tuned models. Throws ContractError
/// naming the first tuned checkpoint whose structure differs from `base`.
ImportanceReport aggregate(const ParamMap& base, const std::vector<ParamMap>& tuned,
                           const std::vector<std::string>& labels = {});

/// Defined layers by descending score, ties broken by layer id.
std::vector<std::string> rank_layers(const ImportanceReport& report);
std::vector<std::string> rank_layers(const std::vector<LayerScore>& scores);

nlohmann::json report_to_json(const ImportanceReport& report);
void write_scores_csv(const std::filesystem::path& path, const ImportanceReport& report);

}  // namespace dtune
