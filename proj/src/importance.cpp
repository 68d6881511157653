#include "dtune/importance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dtune/errors.hpp"

namespace dtune {

namespace {

constexpr double kUndefinedBelow = 1e-12;

std::vector<std::string> components(const std::string& id) {
    std::vector<std::string> out;
    std::stringstream ss(id);
    std::string part;
    while (std::getline(ss, part, '.')) out.push_back(part);
    return out;
}

bool has_component(const std::string& id, const std::string& c) {
    const auto parts = components(id);
    return std::find(parts.begin(), parts.end(), c) != parts.end();
}

void add(GroupAggregate& g, const LayerScore& s) {
    ++g.n_layers;
    if (!s.defined) return;
    g.score += s.score;  // summed here, divided in finish()
    ++g.n_defined;
}

void finish(GroupAggregate& g) {
    if (g.n_defined > 0) g.score /= g.n_defined;
}

nlohmann::json group_json(const GroupAggregate& g) {
    return {{"score", g.score}, {"n_layers", g.n_layers}, {"n_defined", g.n_defined}};
}

}  // namespace

ParamMap to_param_map(const TensorMap& m) {
    ParamMap out;
    for (const auto& [name, t] : m) out[name] = ParamTensor{t.shape, std::vector<double>(t.values.begin(), t.values.end())};
    return out;
}

std::string layer_of(const std::string& tensor_name) {
    const auto dot = tensor_name.rfind('.');
    return dot == std::string::npos ? tensor_name : tensor_name.substr(0, dot);
}

std::map<std::string, std::vector<std::string>> layers_of(const ParamMap& m) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [name, _] : m) out[layer_of(name)].push_back(name);
    return out;
}

std::string location_group(const std::string& layer_id) {
    if (has_component(layer_id, "cross")) return "cross";
    if (has_component(layer_id, "self")) return "self";
    return "other";
}

std::string block_group(const std::string& layer_id) {
    for (const char* b : {"down", "mid", "up"}) {
        if (has_component(layer_id, b)) return b;
    }
    return "other";
}

std::string matrix_type(const std::string& layer_id) {
    if (location_group(layer_id) == "other") return "";
    const auto parts = components(layer_id);
    const auto& last = parts.back();
    if (last == "q" || last == "k" || last == "v" || last == "o") return last;
    return "";
}

LayerScore layer_score(const ParamMap& base, const ParamMap& tuned, const std::string& layer_id) {
    LayerScore s;
    s.layer_id = layer_id;
    double sum_delta = 0.0;
    double sum_base = 0.0;
    int found = 0;
    for (const auto& [name, b] : base) {
        if (layer_of(name) != layer_id) continue;
        ++found;
        auto it = tuned.find(name);
        if (it == tuned.end()) throw ContractError("layer " + layer_id + ": tensor " + name + " missing from tuned map");
        if (it->second.shape != b.shape) throw ContractError("layer " + layer_id + ": shape mismatch in " + name);
        for (size_t i = 0; i < b.values.size(); ++i) {
            sum_delta += std::fabs(it->second.values[i] - b.values[i]);
            sum_base += std::fabs(b.values[i]);
        }
        s.n_params += static_cast<int64_t>(b.values.size());
    }
    if (found == 0) throw ContractError("layer " + layer_id + " not found in base map");
    if (s.n_params == 0 || sum_base / static_cast<double>(s.n_params) < kUndefinedBelow) {
        s.defined = false;
        s.score = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    s.score = sum_delta / sum_base;  // both means share the element count
    return s;
}

ImportanceReport aggregate(const ParamMap& base, const std::vector<ParamMap>& tuned,
                           const std::vector<std::string>& labels) {
    if (tuned.empty()) throw ContractError("importance: at least one tuned checkpoint is required");
    for (size_t i = 0; i < tuned.size(); ++i) {
        const std::string label = i < labels.size() ? labels[i] : "#" + std::to_string(i);
        bool ok = tuned[i].size() == base.size();
        std::string first;
        for (const auto& [name, b] : base) {
            auto it = tuned[i].find(name);
            if (it == tuned[i].end() || it->second.shape != b.shape) {
                ok = false;
                first = name;
                break;
            }
        }
        if (!ok) {
            throw ContractError("tuned checkpoint " + label + " differs structurally from the base" +
                                (first.empty() ? std::string(" (tensor count)") : " at " + first));
        }
    }
    ImportanceReport r;
    r.n_tuned = static_cast<int>(tuned.size());
    for (const auto& [layer, _] : layers_of(base)) {
        LayerScore mean;
        mean.layer_id = layer;
        for (const auto& t : tuned) {
            const auto s = layer_score(base, t, layer);
            mean.n_params = s.n_params;
            mean.defined = s.defined;
            mean.score += s.score;
        }
        mean.score /= static_cast<double>(tuned.size());
        r.layers.push_back(mean);
    }
    for (const auto& s : r.layers) {
        const auto loc = location_group(s.layer_id);
        add(r.by_location[loc], s);
        add(r.by_block[block_group(s.layer_id)], s);
        const auto mt = matrix_type(s.layer_id);
        if (!mt.empty()) add(r.by_matrix[loc][mt], s);
    }
    for (auto& [_, g] : r.by_location) finish(g);
    for (auto& [_, g] : r.by_block) finish(g);
    for (auto& [_, types] : r.by_matrix) {
        for (auto& [__, g] : types) finish(g);
    }
    return r;
}

std::vector<std::string> rank_layers(const std::vector<LayerScore>& scores) {
    std::vector<const LayerScore*> defined;
    for (const auto& s : scores) {
        if (s.defined) defined.push_back(&s);
    }
    std::sort(defined.begin(), defined.end(), [](const LayerScore* a, const LayerScore* b) {
        if (a->score != b->score) return a->score > b->score;
        return a->layer_id < b->layer_id;
    });
    std::vector<std::string> out;
    for (const auto* s : defined) out.push_back(s->layer_id);
    return out;
}

std::vector<std::string> rank_layers(const ImportanceReport& report) { return rank_layers(report.layers); }

nlohmann::json report_to_json(const ImportanceReport& report) {
    nlohmann::json j;
    j["n_tuned"] = report.n_tuned;
    j["ranking"] = rank_layers(report);
    nlohmann::json layers = nlohmann::json::array();
    nlohmann::json undefined = nlohmann::json::array();
    for (const auto& s : report.layers) {
        nlohmann::json l = {{"layer_id", s.layer_id}, {"n_params", s.n_params}};
        if (s.defined) {
            l["score"] = s.score;
        } else {
            l["score"] = "undefined";
            undefined.push_back(s.layer_id);
        }
        layers.push_back(l);
    }
    j["layers"] = layers;
    j["undefined"] = undefined;
    for (const auto& [g, a] : report.by_location) j["by_location"][g] = group_json(a);
    for (const auto& [g, a] : report.by_block) j["by_block"][g] = group_json(a);
    for (const auto& [loc, types] : report.by_matrix) {
        for (const auto& [t, a] : types) j["by_matrix"][loc][t] = group_json(a);
    }
    return j;
}

void write_scores_csv(const std::filesystem::path& path, const ImportanceReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(12);
    os << "layer_id,location,block,matrix,n_params,score\n";
    for (const auto& s : report.layers) {
        os << s.layer_id << ',' << location_group(s.layer_id) << ',' << block_group(s.layer_id) << ','
           << matrix_type(s.layer_id) << ',' << s.n_params << ',';
        if (s.defined) {
            os << s.score;
        } else {
            os << "undefined";
        }
        os << '\n';
    }
}

}  // namespace dtune
