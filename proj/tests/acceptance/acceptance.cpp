// Acceptance runner: one PASS/FAIL line per criterion, details in
// <cache>/acceptance_report.json. Trained artifacts are cached under
// <cache>/pretrain-<config hash> and reused on later runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dtune/analysis.hpp"
#include "dtune/checkpoint.hpp"
#include "dtune/cli.hpp"
#include "dtune/config.hpp"
#include "dtune/errors.hpp"
#include "dtune/experiments.hpp"
#include "dtune/importance.hpp"
#include "dtune/model.hpp"
#include "dtune/rng.hpp"
#include "dtune/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtune;

namespace {

struct Outcome {
    bool pass = false;
    json details = json::object();
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

torch::Tensor sprite_image(std::uint64_t seed, int template_id = 0) {
    const auto id = generate_identity(seed);
    const auto ctx = sample_context(prompt_template(template_id), 32, {}, seed);
    return image_to_tensor(render(id, ctx, 32).image)[0];
}

// 1. Fresh offsets leave sampling unchanged.
Outcome zero_offset_identity() {
    Outcome o;
    DomainModel model(ModelConfig{}, 101);
    const auto img = sprite_image(5);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto with = model.sample(img, 0, seed);
        torch::Tensor without;
        {
            torch::NoGradGuard ng;
            auto ci = model.encode_concept(img);
            auto cond = model.provider(ci, 0, nullptr);
            NoisePredictor fn = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
                return model.predict(z, t, c, nullptr);
            };
            SamplerOptions opts;
            opts.steps = model.config().sampler_steps;
            opts.seed = seed;
            without = sample(fn, model.schedule(), cond, opts, 32, model.dtype());
        }
        worst = std::max(worst, (with - without).abs().max().item<double>());
    }
    o.details = {{"max_abs_diff", worst}, {"seeds", 10}};
    o.pass = worst <= 1e-6;
    return o;
}

// 2. Rank of a materialized offset.
Outcome rank_bound() {
    Outcome o;
    double worst3 = 0.0, worst1 = 0.0;
    OffsetOptions opts;
    torch::manual_seed(202);
    for (int draw = 0; draw < 100; ++draw) {
        OffsetSpec s(64, 64, opts, true);
        s->to(torch::kFloat64);
        torch::NoGradGuard ng;
        for (auto& p : s->parameters()) p.normal_();
        auto sv = torch::linalg_svdvals(s->materialize());
        worst3 = std::max(worst3, sv[3].item<double>() / sv[0].item<double>());
        for (auto& p : s->named_parameters()) {
            if (p.key().find("bias") != std::string::npos) p.value().zero_();
        }
        sv = torch::linalg_svdvals(s->materialize());
        worst1 = std::max(worst1, sv[1].item<double>() / sv[0].item<double>());
    }
    o.details = {{"draws", 100}, {"max_sigma4_over_sigma1", worst3}, {"max_sigma2_over_sigma1_no_bias", worst1}};
    o.pass = worst3 < 1e-6 && worst1 < 1e-6;
    return o;
}

// 3. Analytic against central-difference gradients of the tuning loss.
Outcome gradient_check() {
    Outcome o;
    DomainModel model(ModelConfig{}, 303);
    model.set_dtype(torch::kFloat64);
    torch::manual_seed(303);
    {
        // Move off the zero-initialized layers so every group has a nonzero gradient.
        torch::NoGradGuard ng;
        for (auto& p : model.encoder->parameters()) p.add_(torch::randn_like(p) * 0.05);
        for (auto& p : model.offsets->parameters()) p.add_(torch::randn_like(p) * 0.05);
    }
    const int B = 2;
    auto ci = model.encode_concept(sprite_image(9).to(torch::kFloat64)).expand(B);
    auto [tokens, slot] = prompt_tensors(0, B);
    auto t = torch::tensor({37, 151}, torch::kLong);
    auto eps = torch::randn({B, 3, 32, 32}, torch::kFloat64);
    const double lambda = 0.1;
    auto loss_value = [&]() {
        torch::NoGradGuard ng;
        return model.loss(ci, tokens, slot, t, eps, {}, lambda).total.item<double>();
    };

    std::map<std::string, std::vector<std::pair<std::string, torch::Tensor>>> pools;
    for (auto& p : model.denoiser->named_parameters()) pools["denoiser"].emplace_back("denoiser." + p.key(), p.value());
    for (auto& p : model.encoder->named_parameters()) pools["encoder"].emplace_back("encoder." + p.key(), p.value());
    for (auto& p : model.offsets->named_parameters()) {
        const bool is_v0 = p.key().find("v0") != std::string::npos;
        pools[is_v0 ? "v0" : "offset_maps"].emplace_back("offsets." + p.key(), p.value());
    }

    std::mt19937_64 rng(303);
    struct Pick {
        std::string group, name;
        torch::Tensor param;
        int64_t index;
    };
    std::vector<Pick> picks;
    for (const char* g : {"v0", "offset_maps", "encoder", "denoiser"}) {
        auto& pool = pools[g];
        for (int k = 0; k < 5; ++k) {
            auto& [name, p] = pool[rng() % pool.size()];
            picks.push_back({g, name, p, static_cast<int64_t>(rng() % static_cast<std::uint64_t>(p.numel()))});
        }
    }

    for (auto& p : model.denoiser->parameters()) p.mutable_grad() = torch::Tensor();
    for (auto& p : model.encoder->parameters()) p.mutable_grad() = torch::Tensor();
    for (auto& p : model.offsets->parameters()) p.mutable_grad() = torch::Tensor();
    model.loss(ci, tokens, slot, t, eps, {}, lambda).total.backward();

    const double h = 1e-5;
    // Rounding in the central difference is about eps * |L| / h; relative error
    // is measured against at least ten times that, since smaller gradients are unresolvable.
    const double l0 = loss_value();
    const double floor = 10.0 * std::numeric_limits<double>::epsilon() * std::abs(l0) / h;
    double worst = 0.0;
    json rows = json::array();
    for (auto& pk : picks) {
        auto flat = pk.param.data().view(-1);
        const double analytic = pk.param.grad().reshape(-1)[pk.index].item<double>();
        const double x0 = flat[pk.index].item<double>();
        flat[pk.index] = x0 + h;
        const double up = loss_value();
        flat[pk.index] = x0 - h;
        const double down = loss_value();
        flat[pk.index] = x0;
        const double fd = (up - down) / (2 * h);
        const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), floor});
        worst = std::max(worst, rel);
        rows.push_back({{"group", pk.group}, {"param", pk.name}, {"index", pk.index}, {"analytic", analytic},
                        {"finite_difference", fd}, {"rel_error", rel}});
    }
    o.details = {{"max_rel_error", worst}, {"loss", l0}, {"denominator_floor", floor}, {"checks", rows}};
    o.pass = worst <= 1e-3;
    return o;
}

// 4. Importance-score oracle.
Outcome importance_oracle() {
    Outcome o;
    auto vec = [](std::vector<double> v) {
        ParamMap m;
        m["L.w"] = ParamTensor{{static_cast<int64_t>(v.size())}, std::move(v)};
        return m;
    };
    const auto base = vec({1, -1, 2, -2});
    const auto tuned = vec({1.1, -1, 2, -2.4});
    const double s = layer_score(base, tuned, "L").score;
    const double expected = 0.125 / 1.5;
    const double same = layer_score(base, base, "L").score;
    double worst_cov = 0.0;
    for (double k : {0.5, 2.0, 10.0}) {
        auto scaled = base;
        for (size_t i = 0; i < 4; ++i) {
            scaled["L.w"].values[i] += k * (tuned.at("L.w").values[i] - base.at("L.w").values[i]);
        }
        worst_cov = std::max(worst_cov, std::abs(layer_score(base, scaled, "L").score - k * s));
    }
    o.details = {{"score", s}, {"identical_score", same}, {"max_covariance_error", worst_cov}};
    o.pass = std::abs(s - expected) <= 1e-9 && same == 0.0 && worst_cov <= 1e-9;
    return o;
}

// 5. Composition and regularizer algebra.
Outcome embedding_algebra() {
    Outcome o;
    torch::manual_seed(505);
    const int64_t d = 128;
    const double s = 0.1;
    auto domain = torch::randn({d}, torch::kFloat64);
    double worst_dist = 0.0, worst_reg = 0.0;
    for (int i = 0; i < 1000; ++i) {
        auto off = torch::randn({1, d}, torch::kFloat64) * std::exp(torch::randn({1}).item<double>());
        const auto e = compose_embedding(off, domain, s);
        const double n = off.norm().item<double>();
        const double dist = (e.e_c - domain).norm().item<double>();
        worst_dist = std::max(worst_dist, std::abs(dist - s * n) / (s * n));
        const double reg = embedding_reg_loss(off).item<double>();
        worst_reg = std::max(worst_reg, std::abs(reg - n * n) / (n * n));
    }
    o.details = {{"max_rel_distance_error", worst_dist}, {"max_rel_reg_error", worst_reg}};
    o.pass = worst_dist <= 1e-9 && worst_reg <= 1e-9;
    return o;
}

struct Artifacts {
    ExperimentConfig ec;
    std::unique_ptr<DomainModel> pretrained;
    fs::path dir;
};

// Only the sections that shape the pretrained model key the cache, so analysis
// and personalization settings can change without retraining.
json pretrain_key(const json& cfg) {
    json k;
    for (const char* s : {"schema_version", "seed", "domain", "backbone", "model", "pretrain"}) k[s] = cfg[s];
    return k;
}

Artifacts pretrained_artifacts(const fs::path& cache, const json& cfg, std::ostream& log) {
    const auto hash = config_hash(pretrain_key(cfg));
    const fs::path dir = cache / ("pretrain-" + hash);
    if (!fs::exists(dir / "manifest.json")) {
        fs::remove_all(dir);
        fs::create_directories(cache);
        const fs::path cfg_path = cache / ("config-" + hash + ".json");
        std::ofstream(cfg_path) << cfg.dump(2) << '\n';
        std::cout << "training backbone and pretraining into " << dir << " (cached afterwards)" << std::endl;
        std::vector<std::string> args{"dtune", "pretrain", "--config", cfg_path.string(), "--out", dir.string()};
        std::vector<const char*> argv;
        for (auto& a : args) argv.push_back(a.c_str());
        const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), log, log);
        if (rc != 0) throw std::runtime_error("pretraining failed; see the acceptance log");
    }
    auto loaded = load_model(dir);
    if (config_hash(pretrain_key(loaded.config.raw)) != hash) {
        throw CorruptionError("cached pretrained model at " + dir.string() + " does not match its config");
    }
    return {experiment_from_json(cfg), std::move(loaded.model), dir};
}

std::vector<HeldOutConcept> held_out(const ExperimentConfig& ec) {
    const int n = ec.analysis["eval_identities"].get<int>();
    const int refs = ec.analysis["reference_renders"].get<int>();
    return held_out_concepts(n, ec.stream("heldout"), ec.personalize.template_id, ec.resolution, ec.ranges, refs);
}

// 6. Steps to threshold: personalize against the embedding-only baseline.
Outcome tuning_benefit(const Artifacts& a) {
    Outcome o;
    std::vector<std::uint64_t> seeds;
    for (const auto& s : a.ec.analysis["eval_seeds"]) seeds.push_back(s.get<std::uint64_t>());
    const int max_steps = a.ec.analysis["max_steps"].get<int>();
    const double fraction = a.ec.analysis["threshold_fraction"].get<double>();
    const auto b = benchmark_steps(*a.pretrained, held_out(a.ec), seeds, a.ec.personalize, max_steps, fraction,
                                   a.ec.use_mask);
    auto j = benchmark_to_json(b);
    j["threshold_fraction"] = fraction;
    j["max_steps"] = max_steps;
    j["effective_lr"] = a.ec.personalize.effective_lr();
    o.details = j;
    o.pass = b.tuned_median < b.baseline_median;
    return o;
}

// 7. Concept similarity gain after the preset's tuning steps.
Outcome few_step_efficacy(const Artifacts& a) {
    Outcome o;
    const int samples = a.ec.analysis["samples_per_identity"].get<int>();
    PersonalizeConfig pc = a.ec.personalize;
    std::vector<double> gains;
    json rows = json::array();
    for (const auto& c : held_out(a.ec)) {
        const auto seed = derive_seed(a.ec.stream("eval"), static_cast<std::uint64_t>(c.identity_id));
        auto before = a.pretrained->clone();
        const double s0 = sample_similarity(*before, c, pc.template_id, samples, seed);
        auto res = personalize(*a.pretrained, c.image, pc, a.ec.use_mask ? c.mask : torch::Tensor());
        const double s1 = sample_similarity(*res.model, c, pc.template_id, samples, seed);
        gains.push_back(s1 - s0);
        rows.push_back({{"identity_id", c.identity_id}, {"steps", res.steps}, {"similarity_step0", s0},
                        {"similarity_tuned", s1}, {"gain", s1 - s0}});
    }
    const double med = median(gains);
    o.details = {{"steps", pc.steps}, {"lambda_reg", pc.lambda_reg}, {"median_gain", med}, {"identities", rows}};
    o.pass = med >= 0.05;
    return o;
}

// 8. Freezing the per-timestep embedding.
Outcome refinement_machinery(const Artifacts& a) {
    Outcome o;
    auto& m = *a.pretrained;
    const auto concept_img = held_out(a.ec).front().image;
    const int tpl = a.ec.personalize.template_id;
    bool exact = true;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto frozen0 = refinement_freeze_sample(m, concept_img, tpl, 0, seed).image;
        const auto def = m.sample(concept_img, tpl, seed);
        exact = exact && torch::equal(frozen0.to(def.dtype()), def);
    }
    const auto full = refinement_freeze_sample(m, concept_img, tpl, m.schedule().steps, 0).image;
    const auto none = refinement_freeze_sample(m, concept_img, tpl, 0, 0).image;
    const double l2 = (full - none).to(torch::kFloat64).norm().item<double>();
    o.details = {{"t_stop0_bit_exact_5_seeds", exact}, {"l2_t_stop_T_vs_0", l2}};
    o.pass = exact && l2 > 0.0;
    return o;
}

// 9. Every ablation flag changes exactly the groups it declares.
Outcome ablation_reachability(const Artifacts& a) {
    Outcome o;
    PersonalizeConfig pc = a.ec.personalize;
    pc.steps = 50;
    const auto c = held_out(a.ec).front();
    bool ok = true;
    json rows = json::array();
    for (const auto& name : ablation_names()) {
        const auto row = run_ablation(*a.pretrained, c, pc, ablation_from_name(name), 0, a.ec.use_mask);
        auto trained = row.trained_groups, changed = row.changed_groups;
        std::sort(trained.begin(), trained.end());
        std::sort(changed.begin(), changed.end());
        const bool match = trained == changed;
        ok = ok && match;
        rows.push_back({{"ablation", name}, {"trained_groups", trained}, {"changed_groups", changed}, {"match", match}});
    }
    o.details = {{"steps", pc.steps}, {"runs", rows}};
    o.pass = ok;
    return o;
}

// 10. Checkpoint persistence and corruption handling.
Outcome persistence(const Artifacts& a, const fs::path& cache) {
    Outcome o;
    const fs::path root = cache / "persistence";
    fs::remove_all(root);
    Checkpoint ck;
    ck.config = a.ec.raw;
    ck.config_hash = config_hash(a.ec.raw);
    ck.tensors = a.pretrained->export_tensors(true);
    save_checkpoint(ck, root / "clean");
    const auto back = load_checkpoint(root / "clean");
    const bool round_trip = back.tensors == ck.tensors && back.config == ck.config;

    // Each corruption must surface as CorruptionError; anything else counts as a failure.
    const std::vector<std::pair<std::string, std::function<void(const fs::path&)>>> corruptions = {
        {"truncate", [](const fs::path& p) { fs::resize_file(p, fs::file_size(p) - 3); }},
        {"append", [](const fs::path& p) { std::ofstream(p, std::ios::app | std::ios::binary) << "xx"; }},
        {"flip_byte",
         [](const fs::path& p) {
             std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
             f.seekg(0);
             char c = 0;
             f.read(&c, 1);
             c = static_cast<char>(c ^ 0x5a);
             f.seekp(0);
             f.write(&c, 1);
         }},
        {"delete", [](const fs::path& p) { fs::remove(p); }},
        {"empty", [](const fs::path& p) { fs::resize_file(p, 0); }},
    };
    json cases = json::array();
    bool all_detected = true;
    int idx = 0;
    for (const auto& [label, corrupt] : corruptions) {
        const fs::path dir = root / label;
        save_checkpoint(ck, dir);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "tensors/%05d.bin", (idx++ * 37) % static_cast<int>(ck.tensors.size()));
        corrupt(dir / buf);
        std::string outcome;
        try {
            load_checkpoint(dir);
            outcome = "not detected";
        } catch (const CorruptionError& e) {
            outcome = std::string("corruption: ") + e.what();
        } catch (const std::exception& e) {
            outcome = std::string("wrong error: ") + e.what();
        }
        const bool detected = outcome.rfind("corruption", 0) == 0;
        all_detected = all_detected && detected;
        cases.push_back({{"corruption", label}, {"blob", buf}, {"outcome", outcome}});
    }
    fs::remove_all(root);
    o.details = {{"round_trip_bit_exact", round_trip}, {"n_tensors", ck.tensors.size()}, {"corruptions", cases}};
    o.pass = round_trip && all_detected;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Acceptance criteria"};
    std::string cache = "acceptance_cache";
    std::string config_path;
    std::vector<int> only;
    app.add_option("--cache", cache, "Directory for cached artifacts and the report");
    app.add_option("--config", config_path, "Experiment config (defaults otherwise)");
    app.add_option("--only", only, "Run only these criteria");
    CLI11_PARSE(app, argc, argv);

    const fs::path cache_dir = fs::absolute(cache);
    fs::create_directories(cache_dir);
    std::ofstream log(cache_dir / "acceptance.log", std::ios::app);
    const json cfg = config_path.empty() ? validate_config(json::object()) : load_config(config_path);

    std::optional<Artifacts> artifacts;
    auto need = [&]() -> const Artifacts& {
        if (!artifacts) artifacts = pretrained_artifacts(cache_dir, cfg, log);
        return *artifacts;
    };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"zero-offset identity", zero_offset_identity},
        {"rank bound", rank_bound},
        {"gradient verification", gradient_check},
        {"importance-score oracle", importance_oracle},
        {"embedding algebra", embedding_algebra},
        {"domain-tuning benefit", [&] { return tuning_benefit(need()); }},
        {"few-step efficacy", [&] { return few_step_efficacy(need()); }},
        {"refinement machinery", [&] { return refinement_machinery(need()); }},
        {"ablation reachability", [&] { return ablation_reachability(need()); }},
        {"persistence", [&] { return persistence(need(), cache_dir); }},
    };

    json report = {{"config_hash", config_hash(cfg)}, {"criteria", json::array()}};
    int failed = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out.pass = false;
            out.details = {{"exception", e.what()}};
        }
        const double secs = seconds_since(t0);
        failed += out.pass ? 0 : 1;
        std::ostringstream line;
        line << (out.pass ? "PASS" : "FAIL") << "  " << number << ". " << criteria[i].first << "  (" << std::fixed;
        line.precision(1);
        line << secs << " s)";
        std::cout << line.str() << std::endl;
        report["criteria"].push_back(
            {{"number", number}, {"name", criteria[i].first}, {"pass", out.pass}, {"seconds", secs}, {"details", out.details}});
        std::ofstream(cache_dir / "acceptance_report.json") << report.dump(2) << '\n';
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
