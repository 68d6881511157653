#include "dtune/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dtune/checkpoint.hpp"
#include "dtune/errors.hpp"
#include "dtune/rng.hpp"

namespace dtune {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const char* type_name(const json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number_integer()) return "integer";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

bool same_kind(const json& def, const json& v) {
    if (def.is_null()) return v.is_null() || v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    return false;
}

json merge(const json& def, const json& user, const std::string& path) {
    if (def.is_object()) {
        if (!user.is_object()) throw ValidationError(path, "expected an object, got " + std::string(type_name(user)));
        json out = def;
        for (const auto& [k, v] : user.items()) {
            const auto p = join(path, k);
            if (!def.contains(k)) throw ValidationError(p, "unknown key");
            out[k] = merge(def[k], v, p);
        }
        return out;
    }
    if (def.is_array()) {
        if (!user.is_array()) throw ValidationError(path, "expected an array, got " + std::string(type_name(user)));
        for (size_t i = 0; i < user.size(); ++i) {
            if (!def.empty() && !same_kind(def[0], user[i])) {
                throw ValidationError(path + "[" + std::to_string(i) + "]",
                                      std::string("expected ") + type_name(def[0]) + ", got " + type_name(user[i]));
            }
        }
        return user;
    }
    if (!same_kind(def, user)) {
        throw ValidationError(path, std::string("expected ") + (def.is_null() ? "number or null" : type_name(def)) +
                                        ", got " + type_name(user));
    }
    return user;
}

void require(bool ok, const std::string& path, const std::string& what) {
    if (!ok) throw ValidationError(path, what);
}

void check_ranges(const json& c) {
    require(c["schema_version"].get<int>() == kConfigSchemaVersion, "schema_version",
            "unsupported schema version (expected " + std::to_string(kConfigSchemaVersion) + ")");
    const auto& d = c["domain"];
    const int res = d["resolution"].get<int>();
    require(res == 32 || res == 64, "domain.resolution", "must be 32 or 64");
    require(d["n_identities"].get<int>() >= 1, "domain.n_identities", "must be >= 1");
    require(d["images_per"].get<int>() >= 1, "domain.images_per", "must be >= 1");
    require(d["texture_freq_min"].get<double>() > 0 && d["texture_freq_max"] >= d["texture_freq_min"],
            "domain.texture_freq_min", "texture range must be positive and ordered");
    require(d["scale_min"].get<double>() > 0 && d["scale_max"] >= d["scale_min"], "domain.scale_min",
            "scale range must be positive and ordered");
    require(d["background_min"].get<double>() >= 0 && d["background_max"].get<double>() <= 1 &&
                d["background_max"] >= d["background_min"],
            "domain.background_min", "background range must lie in [0, 1]");
    const auto& m = c["model"];
    require(m["resolution"].get<int>() == res, "model.resolution", "must equal domain.resolution");
    require(m["seq_len"].get<int>() == kSeqLen, "model.seq_len", "must equal the prompt length " + std::to_string(kSeqLen));
    require(m["vocab_size"].get<int>() >= kVocabSize, "model.vocab_size", "too small for the prompt vocabulary");
    require(m["timesteps"].get<int>() >= 2, "model.timesteps", "must be >= 2");
    require(m["sampler_steps"].get<int>() >= 1 && m["sampler_steps"].get<int>() <= m["timesteps"].get<int>(),
            "model.sampler_steps", "must be in [1, timesteps]");
    require(!m["channels"].empty(), "model.channels", "must be nonempty");
    require(m["beta_start"].get<double>() > 0 && m["beta_end"].get<double>() < 1 &&
                m["beta_end"].get<double>() > m["beta_start"].get<double>(),
            "model.beta_start", "betas must satisfy 0 < beta_start < beta_end < 1");
    try {
        offset_mode_from(m["offsets"]["mode"].get<std::string>());
    } catch (const ContractError&) {
        throw ValidationError("model.offsets.mode", "must be one of regularized, direct, hyper, none");
    }
    for (const char* k : {"steps", "batch_size", "device_count"}) {
        require(c["pretrain"][k].get<int>() >= (std::string(k) == "steps" ? 0 : 1), join("pretrain", k), "out of range");
    }
    require(c["pretrain"]["base_lr"].get<double>() > 0, "pretrain.base_lr", "must be positive");
    require(c["pretrain"]["lambda_reg"].get<double>() >= 0, "pretrain.lambda_reg", "must be >= 0");
    const auto& p = c["personalize"];
    const auto preset = p["preset"].get<std::string>();
    require(preset == "face_like" || preset == "generic", "personalize.preset", "must be face_like or generic");
    require(p["template_id"].get<int>() >= 0 && p["template_id"].get<int>() < kTemplateCount, "personalize.template_id",
            "unknown prompt template");
    require(p["batch_size"].get<int>() >= 1, "personalize.batch_size", "must be >= 1");
    require(p["device_count"].get<int>() >= 1, "personalize.device_count", "must be >= 1");
    if (!p["steps"].is_null()) require(p["steps"].get<double>() >= 0, "personalize.steps", "must be >= 0");
    if (!p["base_lr"].is_null()) require(p["base_lr"].get<double>() > 0, "personalize.base_lr", "must be positive");
    if (!p["lambda_reg"].is_null()) require(p["lambda_reg"].get<double>() >= 0, "personalize.lambda_reg", "must be >= 0");
    AblationFlags f;
    const auto& a = c["ablation"];
    f.no_tuning = a["no_tuning"];
    f.tune_components_only = a["tune_components_only"];
    f.tune_denoiser_only = a["tune_denoiser_only"];
    f.encoder_only = a["encoder_only"];
    f.direct_offsets = a["direct_offsets"];
    f.hypernetwork = a["hypernetwork"];
    f.validate();
    const auto& an = c["analysis"];
    require(an["t_stop"].get<int>() >= 0 && an["t_stop"].get<int>() <= m["timesteps"].get<int>(), "analysis.t_stop",
            "must be in [0, timesteps]");
    require(!an["curve_seeds"].empty(), "analysis.curve_seeds", "needs at least one seed");
    require(an["eval_identities"].get<int>() >= 1, "analysis.eval_identities", "must be >= 1");
    require(an["max_steps"].get<int>() >= 1, "analysis.max_steps", "must be >= 1");
    require(an["threshold_fraction"].get<double>() > 0, "analysis.threshold_fraction", "must be positive");
}

}  // namespace

json default_config() {
    const DomainRanges r;
    const BackboneTrainConfig b;
    const PretrainConfig p;
    ModelConfig m;
    json mj = model_config_to_json(m);
    mj.erase("backbone");
    json bj = model_config_to_json(m)["backbone"];
    bj.erase("n_classes");
    return {
        {"schema_version", kConfigSchemaVersion},
        {"seed", 0},
        {"output_dir", "runs"},
        {"domain",
         {{"n_identities", 64},
          {"images_per", 16},
          {"resolution", 32},
          {"texture_freq_min", r.texture_freq_min},
          {"texture_freq_max", r.texture_freq_max},
          {"scale_min", r.scale_min},
          {"scale_max", r.scale_max},
          {"rotation_max_deg", r.rotation_max_deg},
          {"position_jitter", r.position_jitter},
          {"background_min", r.background_min},
          {"background_max", r.background_max}}},
        {"backbone",
         {{"n_identities", b.n_identities},
          {"images_per", b.images_per},
          {"steps", b.steps},
          {"batch_size", b.batch_size},
          {"lr", b.lr},
          {"architecture", bj}}},
        {"model", mj},
        {"pretrain",
         {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"device_count", p.device_count},
          {"base_lr", p.base_lr},
          {"lambda_reg", p.lambda_reg}}},
        {"personalize",
         {{"preset", "face_like"},
          {"steps", nullptr},
          {"base_lr", nullptr},
          {"lambda_reg", nullptr},
          {"batch_size", 16},
          {"device_count", 1},
          {"template_id", 0},
          {"use_mask", true}}},
        {"ablation",
         {{"no_tuning", false},
          {"tune_components_only", false},
          {"tune_denoiser_only", false},
          {"no_iterative_refinement", false},
          {"no_embedding_reg", false},
          {"direct_offsets", false},
          {"encoder_only", false},
          {"hypernetwork", false}}},
        {"analysis",
         {{"t_stop", 100},
          {"curve_seeds", {0, 1, 2}},
          {"eval_identities", 5},
          {"eval_seeds", {0, 1, 2, 3, 4}},
          {"samples_per_identity", 4},
          {"reference_renders", 8},
          {"max_steps", 200},
          {"threshold_fraction", 0.9}}},
    };
}

json validate_config(const json& user) {
    auto merged = merge(default_config(), user.is_null() ? json::object() : user, "");
    check_ranges(merged);
    return merged;
}

json load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ValidationError("", std::string("config is not valid JSON: ") + e.what());
    }
    return validate_config(j);
}

std::string config_hash(const json& cfg) {
    json c = cfg;
    c.erase("output_dir");
    return hex64(fnv1a64(c.dump()));
}

std::uint64_t ExperimentConfig::stream(const char* name) const { return derive_seed(seed, name); }

ExperimentConfig experiment_from_json(const json& c) {
    ExperimentConfig e;
    e.raw = c;
    e.seed = c["seed"].get<std::uint64_t>();
    e.output_dir = c["output_dir"].get<std::string>();
    const auto& d = c["domain"];
    e.n_identities = d["n_identities"];
    e.images_per = d["images_per"];
    e.resolution = d["resolution"];
    e.ranges.texture_freq_min = d["texture_freq_min"];
    e.ranges.texture_freq_max = d["texture_freq_max"];
    e.ranges.scale_min = d["scale_min"];
    e.ranges.scale_max = d["scale_max"];
    e.ranges.rotation_max_deg = d["rotation_max_deg"];
    e.ranges.position_jitter = d["position_jitter"];
    e.ranges.background_min = d["background_min"];
    e.ranges.background_max = d["background_max"];

    const auto& b = c["backbone"];
    e.backbone.n_identities = b["n_identities"];
    e.backbone.images_per = b["images_per"];
    e.backbone.steps = b["steps"];
    e.backbone.batch_size = b["batch_size"];
    e.backbone.lr = b["lr"];
    e.backbone.seed = derive_seed(e.seed, "backbone");

    json mj = c["model"];
    mj["backbone"] = b["architecture"];
    mj["backbone"]["n_classes"] = e.backbone.n_identities;
    e.model = model_config_from_json(mj);

    const auto& a = c["ablation"];
    e.flags.no_tuning = a["no_tuning"];
    e.flags.tune_components_only = a["tune_components_only"];
    e.flags.tune_denoiser_only = a["tune_denoiser_only"];
    e.flags.no_iterative_refinement = a["no_iterative_refinement"];
    e.flags.no_embedding_reg = a["no_embedding_reg"];
    e.flags.direct_offsets = a["direct_offsets"];
    e.flags.encoder_only = a["encoder_only"];
    e.flags.hypernetwork = a["hypernetwork"];

    const auto& p = c["pretrain"];
    e.pretrain.steps = p["steps"];
    e.pretrain.batch_size = p["batch_size"];
    e.pretrain.device_count = p["device_count"];
    e.pretrain.base_lr = p["base_lr"];
    e.pretrain.lambda_reg = p["lambda_reg"];
    e.pretrain.seed = derive_seed(e.seed, "pretrain");

    const auto& q = c["personalize"];
    e.personalize = q["preset"] == "generic" ? PersonalizeConfig::generic() : PersonalizeConfig::face_like();
    if (!q["steps"].is_null()) e.personalize.steps = q["steps"].get<int>();
    if (!q["base_lr"].is_null()) e.personalize.base_lr = q["base_lr"];
    if (!q["lambda_reg"].is_null()) e.personalize.lambda_reg = q["lambda_reg"];
    e.personalize.batch_size = q["batch_size"];
    e.personalize.device_count = q["device_count"];
    e.personalize.template_id = q["template_id"];
    e.personalize.seed = derive_seed(e.seed, "personalize");
    e.personalize.flags = e.flags;
    e.use_mask = q["use_mask"];
    e.analysis = c["analysis"];
    return e;
}

std::filesystem::path output_root(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("DTUNE_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
    return cfg.output_dir;
}

}  // namespace dtune
