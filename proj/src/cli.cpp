#include "dtune/cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include <CLI11.hpp>

#include "dtune/analysis.hpp"
#include "dtune/errors.hpp"
#include "dtune/experiments.hpp"
#include "dtune/importance.hpp"
#include "dtune/png_io.hpp"
#include "dtune/rng.hpp"
#include "dtune/trainer.hpp"

namespace dtune {

namespace fs = std::filesystem;
using nlohmann::json;

std::string file_hash(const fs::path& path) {
    const fs::path p = fs::is_directory(path) ? path / "manifest.json" : path;
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read " + p.string());
    const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(bytes));
}

BackboneRef save_backbone(const TensorMap& backbone, const json& config, const fs::path& dir, const json& extra) {
    Checkpoint c;
    c.config = config;
    c.config_hash = config_hash(config);
    c.tensors = backbone;
    c.extra = extra;
    c.extra["kind"] = "backbone";
    save_checkpoint(c, dir);
    return {fs::absolute(dir).lexically_normal().string(), map_hash(backbone)};
}

TensorMap load_backbone(const BackboneRef& ref) {
    auto ck = load_checkpoint(ref.path);
    TensorMap bb;
    for (auto& [name, t] : ck.tensors) {
        if (module_of(name) == "backbone") bb.emplace(name, std::move(t));
    }
    if (map_hash(bb) != ref.hash) {
        throw CorruptionError("backbone at " + ref.path + " does not match its reference hash " + ref.hash);
    }
    return bb;
}

void save_model(const DomainModel& model, const json& config, const BackboneRef& backbone, const fs::path& dir,
                json extra, const torch::Tensor& concept_image) {
    Checkpoint c;
    c.config = config;
    c.config_hash = config_hash(config);
    c.tensors = model.export_tensors(false);
    if (concept_image.defined()) c.tensors["concept.image"] = to_host(concept_image.to(torch::kFloat32));
    c.backbone = backbone;
    extra["model"] = model_config_to_json(model.config());
    c.extra = std::move(extra);
    save_checkpoint(c, dir);
    std::ofstream os(dir / "config.json");
    os << config.dump(2) << '\n';
}

LoadedModel load_model(const fs::path& dir) {
    auto ck = load_checkpoint(dir);
    if (!ck.backbone) throw StructureError("checkpoint " + dir.string() + " has no backbone reference");
    LoadedModel out;
    out.config = experiment_from_json(validate_config(ck.config));
    out.config_hash = ck.config_hash;
    out.extra = ck.extra;
    ModelConfig mc = ck.extra.contains("model") ? model_config_from_json(ck.extra["model"]) : out.config.model;
    const auto bb = load_backbone(*ck.backbone);
    out.model = std::make_unique<DomainModel>(mc, out.config.stream("init"), &bb);
    if (auto it = ck.tensors.find("concept.image"); it != ck.tensors.end()) {
        out.concept_image = from_host(it->second);
        ck.tensors.erase(it);
    }
    out.model->import_tensors(ck.tensors);
    return out;
}

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

struct RunRecord {
    std::string command;
    std::vector<std::string> argv;
    std::string config_hash;
    json inputs = json::object();
    json outputs = json::array();
    fs::path manifest;
    double start = now_seconds();

    void input(const std::string& role, const fs::path& p) { inputs[role] = {{"path", p.string()}, {"hash", file_hash(p)}}; }
    void output(const fs::path& p) { outputs.push_back(p.string()); }

    void write(const json& status) const {
        if (manifest.empty()) return;
        json j = {{"command", command},
                  {"argv", argv},
                  {"config_hash", config_hash},
                  {"inputs", inputs},
                  {"outputs", outputs},
                  {"version", {{"dtune", kVersion}, {"torch", TORCH_VERSION}}},
                  {"started_at", start},
                  {"wall_clock_s", now_seconds() - start},
                  {"status", status}};
        std::ofstream os(manifest);
        if (!os) throw IoError("cannot write " + manifest.string());
        os << j.dump(2) << '\n';
    }
};

struct Options {
    std::string config, out, ckpt, image, mask, backbone, data, base, csv, ablation;
    std::vector<std::string> tuned, references;
    std::vector<std::uint64_t> seeds;
    int steps = -1;
    int prompt = -1;
    int batch = 1;
    int samples = -1;
    int t_stop = -1;
    int n_identities = -1;
    int images_per = -1;
    std::uint64_t seed = 0;
    bool no_mask = false;
    bool benchmark = false;
};

json resolve_config(const std::string& path) { return path.empty() ? validate_config(json::object()) : load_config(path); }

torch::Tensor read_image(const std::string& path) { return image_to_tensor(read_png_image(path))[0]; }

fs::path default_out(const ExperimentConfig& ec, const std::string& command, const std::string& hash) {
    return output_root(ec) / (command + "-" + hash.substr(0, 8));
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + p.string());
    os << j.dump(2) << '\n';
}

void prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

TensorMap backbone_map(Backbone& b) {
    TensorMap m;
    for (const auto& p : b->named_parameters(true)) m.emplace("backbone." + p.key(), to_host(p.value()));
    return m;
}

std::vector<DatasetItem> dataset_for(const ExperimentConfig& ec, const std::string& data_dir, RunRecord& run) {
    if (!data_dir.empty()) {
        run.input("data", fs::path(data_dir) / "manifest.jsonl");
        return load_items(data_dir);
    }
    return render_items(plan_dataset(ec.n_identities, ec.images_per, ec.stream("data"), ec.resolution, ec.ranges));
}

struct Pretrained {
    std::unique_ptr<DomainModel> model;
    BackboneRef ref;
};

// Backbone (given or trained), dataset (given or rendered), then joint pretraining.
Pretrained pretrain_into(const json& cfg, const ExperimentConfig& ec, const fs::path& dir, const Options& o,
                         RunRecord& run) {
    if (fs::exists(dir / "manifest.json")) throw IoError("checkpoint directory already written: " + dir.string());
    prepare_dir(dir);
    Pretrained p;
    TensorMap bb;
    if (!o.backbone.empty()) {
        run.input("backbone", o.backbone);
        auto ck = load_checkpoint(o.backbone);
        for (auto& [name, t] : ck.tensors) {
            if (module_of(name) == "backbone") bb.emplace(name, std::move(t));
        }
        p.ref = {fs::absolute(o.backbone).lexically_normal().string(), map_hash(bb)};
    } else {
        auto r = train_backbone(ec.model.backbone, ec.backbone);
        bb = backbone_map(r.backbone);
        p.ref = save_backbone(bb, cfg, dir / "backbone", {{"train_accuracy", r.train_accuracy}});
        run.output(dir / "backbone");
    }
    const auto items = dataset_for(ec, o.data, run);
    p.model = std::make_unique<DomainModel>(ec.flags.apply(ec.model), ec.stream("init"), &bb);
    PretrainConfig pc = ec.pretrain;
    pc.flags = ec.flags;
    const auto trace = pretrain(*p.model, items, pc);
    save_model(*p.model, cfg, p.ref, dir,
               {{"kind", "pretrained"}, {"steps", pc.steps}, {"final_loss", trace.empty() ? 0.0 : trace.back().total}});
    write_loss_csv(dir / "loss.csv", trace);
    run.output(dir);
    run.output(dir / "loss.csv");
    return p;
}

torch::Tensor concept_image_for(const LoadedModel& m, const Options& o, RunRecord& run) {
    if (!o.image.empty()) {
        run.input("image", o.image);
        return read_image(o.image);
    }
    if (m.concept_image.defined()) return m.concept_image;
    throw ContractError("no concept image: pass --image or use a personalized checkpoint");
}

int template_for(const LoadedModel& m, const Options& o) {
    if (o.prompt >= 0) return o.prompt;
    if (m.extra.contains("template_id")) return m.extra["template_id"].get<int>();
    return m.config.personalize.template_id;
}

void save_images(const torch::Tensor& imgs, const fs::path& dir, const std::string& stem, RunRecord& run,
                 json* hashes = nullptr) {
    for (int64_t i = 0; i < imgs.size(0); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%03lld.png", stem.c_str(), static_cast<long long>(i));
        const auto p = dir / name;
        write_png(p, tensor_to_image(imgs[i].to(torch::kFloat32)));
        run.output(p);
        if (hashes != nullptr) hashes->push_back(file_hash(p));
    }
}

// ---------------------------------------------------------------------------

json cmd_generate_data(const Options& o, RunRecord& run) {
    json cfg = resolve_config(o.config);
    if (o.n_identities > 0) cfg["domain"]["n_identities"] = o.n_identities;
    if (o.images_per > 0) cfg["domain"]["images_per"] = o.images_per;
    cfg = validate_config(cfg);
    const auto ec = experiment_from_json(cfg);
    run.config_hash = config_hash(cfg);
    const fs::path dir = o.out.empty() ? default_out(ec, "data", run.config_hash) : fs::path(o.out);
    prepare_dir(dir);
    run.manifest = dir / "run.json";
    const auto m = make_dataset(dir, ec.n_identities, ec.images_per, ec.stream("data"), ec.resolution, ec.ranges);
    run.output(dir / "manifest.jsonl");
    return {{"dir", dir.string()}, {"records", m.records.size()}};
}

json cmd_train_backbone(const Options& o, RunRecord& run) {
    json cfg = resolve_config(o.config);
    if (o.steps >= 0) cfg["backbone"]["steps"] = o.steps;
    cfg = validate_config(cfg);
    const auto ec = experiment_from_json(cfg);
    run.config_hash = config_hash(cfg);
    const fs::path dir = o.out.empty() ? default_out(ec, "backbone", run.config_hash) : fs::path(o.out);
    if (fs::exists(dir / "manifest.json")) throw IoError("checkpoint directory already written: " + dir.string());
    prepare_dir(dir);
    run.manifest = dir / "run.json";
    auto r = train_backbone(ec.model.backbone, ec.backbone);
    const auto ref = save_backbone(backbone_map(r.backbone), cfg, dir, {{"train_accuracy", r.train_accuracy}});
    std::ofstream os(dir / "loss.csv");
    os << "step,loss\n";
    for (size_t i = 0; i < r.loss_trace.size(); ++i) os << i << ',' << r.loss_trace[i] << '\n';
    run.output(dir);
    run.output(dir / "loss.csv");
    return {{"dir", dir.string()}, {"train_accuracy", r.train_accuracy}, {"hash", ref.hash}};
}

json cmd_pretrain(const Options& o, RunRecord& run) {
    json cfg = resolve_config(o.config);
    if (o.steps >= 0) cfg["pretrain"]["steps"] = o.steps;
    cfg = validate_config(cfg);
    const auto ec = experiment_from_json(cfg);
    run.config_hash = config_hash(cfg);
    const fs::path dir = o.out.empty() ? default_out(ec, "pretrain", run.config_hash) : fs::path(o.out);
    run.manifest = dir / "run.json";
    if (fs::exists(dir / "manifest.json")) {
        run.manifest.clear();
        throw IoError("checkpoint directory already written: " + dir.string());
    }
    auto p = pretrain_into(cfg, ec, dir, o, run);
    return {{"dir", dir.string()}, {"backbone", p.ref.path}};
}

json cmd_personalize(const Options& o, RunRecord& run) {
    run.input("ckpt", o.ckpt);
    auto m = load_model(o.ckpt);
    json cfg = o.config.empty() ? m.config.raw : load_config(o.config);
    if (!o.config.empty()) run.input("config", o.config);
    if (o.steps >= 0) cfg["personalize"]["steps"] = o.steps;
    if (o.prompt >= 0) cfg["personalize"]["template_id"] = o.prompt;
    if (o.no_mask) cfg["personalize"]["use_mask"] = false;
    if (!o.ablation.empty()) {
        const auto f = ablation_from_name(o.ablation);
        cfg["ablation"] = {{"no_tuning", f.no_tuning},
                           {"tune_components_only", f.tune_components_only},
                           {"tune_denoiser_only", f.tune_denoiser_only},
                           {"no_iterative_refinement", f.no_iterative_refinement},
                           {"no_embedding_reg", f.no_embedding_reg},
                           {"direct_offsets", f.direct_offsets},
                           {"encoder_only", f.encoder_only},
                           {"hypernetwork", f.hypernetwork}};
    }
    cfg = validate_config(cfg);
    const auto ec = experiment_from_json(cfg);
    run.config_hash = config_hash(cfg);
    const fs::path dir = o.out.empty() ? default_out(ec, "personalize", run.config_hash) : fs::path(o.out);
    if (fs::exists(dir / "manifest.json")) throw IoError("checkpoint directory already written: " + dir.string());
    prepare_dir(dir);
    run.manifest = dir / "run.json";

    if (o.image.empty()) throw ContractError("personalize needs --image");
    run.input("image", o.image);
    const auto img = read_image(o.image);
    torch::Tensor mask;
    if (ec.use_mask && !o.mask.empty()) {
        run.input("mask", o.mask);
        mask = mask_to_tensor(read_png_mask(o.mask));
    }
    PersonalizeConfig pc = ec.personalize;
    pc.flags = ec.flags;
    auto res = personalize(*m.model, img, pc, mask);
    json extra = {{"kind", "personalized"},
                  {"template_id", pc.template_id},
                  {"image_hash", res.image_hash},
                  {"steps", res.steps},
                  {"ablation", ablation_label(pc.flags)},
                  {"trained_groups", pc.flags.trained_groups()},
                  {"base_checkpoint", file_hash(o.ckpt)}};
    const auto ck = load_checkpoint(o.ckpt);
    save_model(*res.model, cfg, *ck.backbone, dir, extra, img);
    write_loss_csv(dir / "loss.csv", res.trace);
    run.output(dir);
    run.output(dir / "loss.csv");
    return {{"dir", dir.string()}, {"steps", res.steps}, {"final_loss", res.trace.empty() ? 0.0 : res.trace.back().diffusion}};
}

json cmd_sample(const Options& o, RunRecord& run) {
    run.input("ckpt", o.ckpt);
    auto m = load_model(o.ckpt);
    run.config_hash = m.config_hash;
    const fs::path dir = o.out.empty() ? default_out(m.config, "sample", m.config_hash) : fs::path(o.out);
    prepare_dir(dir);
    run.manifest = dir / "run.json";
    const auto img = concept_image_for(m, o, run);
    if (o.batch < 1) throw ContractError("--batch must be >= 1");
    const int tpl = template_for(m, o);
    torch::NoGradGuard no_grad;
    auto imgs = m.model->sample(img, tpl, derive_seed(o.seed, "sampler"), o.batch, o.t_stop);
    json hashes = json::array();
    save_images(imgs, dir, "sample", run, &hashes);
    return {{"dir", dir.string()}, {"template_id", tpl}, {"hashes", hashes}};
}

json cmd_analyze_importance(const Options& o, RunRecord& run) {
    if (o.tuned.empty()) throw ContractError("analyze-importance needs at least one --tuned checkpoint");
    auto denoiser_only = [](TensorMap m) {
        for (auto it = m.begin(); it != m.end();) it = module_of(it->first) == "denoiser" ? std::next(it) : m.erase(it);
        return to_param_map(m);
    };
    run.input("base", o.base);
    const auto base = load_checkpoint(o.base);
    run.config_hash = base.config_hash;
    std::vector<ParamMap> tuned;
    for (size_t i = 0; i < o.tuned.size(); ++i) {
        run.input("tuned." + std::to_string(i), o.tuned[i]);
        tuned.push_back(denoiser_only(load_checkpoint(o.tuned[i]).tensors));
    }
    const auto report = aggregate(denoiser_only(base.tensors), tuned, o.tuned);
    const fs::path out = o.out.empty() ? fs::path("importance.json") : fs::path(o.out);
    if (out.has_parent_path()) prepare_dir(out.parent_path());
    run.manifest = out.string() + ".run.json";
    write_json(out, report_to_json(report));
    run.output(out);
    if (!o.csv.empty()) {
        write_scores_csv(o.csv, report);
        run.output(o.csv);
    }
    const auto ranking = rank_layers(report);
    return {{"report", out.string()}, {"n_tuned", report.n_tuned}, {"top", ranking.empty() ? json() : json(ranking.front())}};
}

json cmd_analyze_refinement(const Options& o, RunRecord& run) {
    run.input("ckpt", o.ckpt);
    auto m = load_model(o.ckpt);
    run.config_hash = m.config_hash;
    const fs::path dir = o.out.empty() ? default_out(m.config, "refinement", m.config_hash) : fs::path(o.out);
    prepare_dir(dir);
    run.manifest = dir / "run.json";
    const auto img = concept_image_for(m, o, run);
    const int tpl = template_for(m, o);
    const int t_stop = o.t_stop >= 0 ? o.t_stop : m.config.analysis["t_stop"].get<int>();
    torch::NoGradGuard no_grad;
    const auto seed = derive_seed(o.seed, "sampler");
    const auto frozen = refinement_freeze_sample(*m.model, img, tpl, t_stop, seed);
    const auto plain = refinement_freeze_sample(*m.model, img, tpl, 0, seed);
    write_png(dir / "frozen.png", tensor_to_image(frozen.image.to(torch::kFloat32)));
    write_png(dir / "default.png", tensor_to_image(plain.image.to(torch::kFloat32)));
    {
        std::ofstream os(dir / "trace.csv");
        os.precision(10);
        os << "t,offset_norm,distance,frozen\n";
        for (const auto& r : frozen.records) os << r.t << ',' << r.offset_norm << ',' << r.distance << ',' << r.frozen << '\n';
    }
    std::vector<std::uint64_t> seeds = o.seeds;
    if (seeds.empty()) seeds = m.config.analysis["curve_seeds"].get<std::vector<std::uint64_t>>();
    const auto curve = embedding_distance_curve(*m.model, img, tpl, seeds);
    write_curve_csv(dir / "curve.csv", curve);
    write_curve_png(dir / "curve.png", {curve});
    const double l2 = (frozen.image - plain.image).to(torch::kFloat64).norm().item<double>();
    json summary = {{"t_stop", t_stop}, {"template_id", tpl}, {"l2_vs_default", l2}, {"steps", frozen.records.size()}};
    write_json(dir / "summary.json", summary);
    for (const char* f : {"frozen.png", "default.png", "trace.csv", "curve.csv", "curve.png", "summary.json"}) run.output(dir / f);
    return summary;
}

json cmd_evaluate(const Options& o, RunRecord& run) {
    run.input("ckpt", o.ckpt);
    auto m = load_model(o.ckpt);
    run.config_hash = m.config_hash;
    const auto& ec = m.config;
    const fs::path dir = o.out.empty() ? default_out(ec, "evaluate", m.config_hash) : fs::path(o.out);
    prepare_dir(dir);
    run.manifest = dir / "run.json";
    const int tpl = template_for(m, o);
    json summary = {{"template_id", tpl}};
    std::vector<std::pair<std::string, std::string>> metrics;

    const bool have_image = !o.image.empty() || m.concept_image.defined();
    if (!have_image && !o.benchmark) throw ContractError("evaluate needs a concept image or --benchmark");
    if (have_image) {
        const auto img = concept_image_for(m, o, run);
        const int n = o.samples > 0 ? o.samples : ec.analysis["samples_per_identity"].get<int>();
        torch::Tensor gen;
        {
            torch::NoGradGuard no_grad;
            gen = m.model->sample(img, tpl, derive_seed(o.seed, "sampler"), n).to(torch::kFloat32);
        }
        save_images(gen, dir, "eval", run);
        std::vector<torch::Tensor> refs;
        for (size_t i = 0; i < o.references.size(); ++i) {
            run.input("reference." + std::to_string(i), o.references[i]);
            refs.push_back(read_image(o.references[i]).unsqueeze(0));
        }
        if (refs.empty()) refs.push_back(img.unsqueeze(0).to(torch::kFloat32));
        const double sim = concept_similarity(m.model->backbone, gen, torch::cat(refs, 0));
        summary["concept_similarity"] = sim;
        metrics.emplace_back("concept_similarity", std::to_string(sim));
        if (has_adherence_checker(tpl)) {
            const double adh = prompt_adherence(gen, tpl);
            summary["prompt_adherence"] = adh;
            metrics.emplace_back("prompt_adherence", std::to_string(adh));
        }
    }
    if (o.benchmark) {
        const auto& a = ec.analysis;
        const auto concepts = held_out_concepts(a["eval_identities"].get<int>(), ec.stream("heldout"), tpl, ec.resolution,
                                                ec.ranges, a["reference_renders"].get<int>());
        PersonalizeConfig pc = ec.personalize;
        pc.template_id = tpl;
        pc.flags = ec.flags;
        const auto b = benchmark_steps(*m.model, concepts, a["eval_seeds"].get<std::vector<std::uint64_t>>(), pc,
                                       a["max_steps"].get<int>(), a["threshold_fraction"].get<double>(), ec.use_mask);
        write_json(dir / "benchmark.json", benchmark_to_json(b));
        std::ofstream os(dir / "benchmark.csv");
        os << "identity_id,seed,threshold,tuned_steps,baseline_steps\n";
        auto cell = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string("not reached"); };
        for (const auto& r : b.runs) {
            os << r.identity_id << ',' << r.seed << ',' << r.threshold << ',' << cell(r.tuned_steps) << ','
               << cell(r.baseline_steps) << '\n';
        }
        run.output(dir / "benchmark.json");
        run.output(dir / "benchmark.csv");
        summary["steps_to_threshold"] = {{"tuned_median", b.tuned_median}, {"baseline_median", b.baseline_median}};
        metrics.emplace_back("steps_to_threshold_tuned_median", std::to_string(b.tuned_median));
        metrics.emplace_back("steps_to_threshold_baseline_median", std::to_string(b.baseline_median));
    }
    std::ofstream os(dir / "metrics.csv");
    os << "metric,value\n";
    for (const auto& [k, v] : metrics) os << k << ',' << v << '\n';
    write_json(dir / "summary.json", summary);
    run.output(dir / "metrics.csv");
    run.output(dir / "summary.json");
    return summary;
}

json cmd_reproduce_ablation(const Options& o, RunRecord& run) {
    json cfg = resolve_config(o.config);
    if (!o.config.empty()) run.input("config", o.config);
    if (o.steps >= 0) cfg["personalize"]["steps"] = o.steps;
    cfg = validate_config(cfg);
    const auto ec = experiment_from_json(cfg);
    run.config_hash = config_hash(cfg);
    const fs::path dir = o.out.empty() ? default_out(ec, "ablation", run.config_hash) : fs::path(o.out);
    prepare_dir(dir);
    run.manifest = dir / "run.json";

    std::unique_ptr<DomainModel> pre;
    if (!o.ckpt.empty()) {
        run.input("ckpt", o.ckpt);
        pre = std::move(load_model(o.ckpt).model);
    } else {
        pre = std::move(pretrain_into(cfg, ec, dir / "pretrained", o, run).model);
    }
    const int tpl = ec.personalize.template_id;
    const auto concept_in = held_out_concepts(1, ec.stream("heldout"), tpl, ec.resolution, ec.ranges,
                                              ec.analysis["reference_renders"].get<int>())[0];
    const int samples = o.samples >= 0 ? o.samples : ec.analysis["samples_per_identity"].get<int>();
    std::vector<std::string> names{"full"};
    for (const auto& n : ablation_names()) names.push_back(n);

    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += (s.empty() ? "" : "+") + x;
        return s.empty() ? std::string("-") : s;
    };
    std::ofstream os(dir / "ablation.csv");
    os.precision(10);
    os << "ablation,trained_groups,changed_groups,steps,final_loss,similarity\n";
    json rows = json::array();
    for (const auto& name : names) {
        const auto row = run_ablation(*pre, concept_in, ec.personalize, ablation_from_name(name), samples, ec.use_mask);
        os << name << ',' << join(row.trained_groups) << ',' << join(row.changed_groups) << ',' << row.steps << ','
           << row.final_loss << ',' << row.similarity << '\n';
        rows.push_back({{"ablation", name},
                        {"trained_groups", row.trained_groups},
                        {"changed_groups", row.changed_groups},
                        {"steps", row.steps},
                        {"final_loss", row.final_loss},
                        {"similarity", row.similarity}});
    }
    os.close();
    write_json(dir / "summary.json", {{"identity_id", concept_in.identity_id}, {"rows", rows}});
    run.output(dir / "ablation.csv");
    run.output(dir / "summary.json");
    return {{"dir", dir.string()}, {"rows", rows.size()}};
}

json error_json(const std::string& kind, const std::string& message, const std::string* path = nullptr) {
    json j = {{"error", kind}, {"message", message}};
    if (path != nullptr) j["path"] = *path;
    return j;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Encoder-based domain tuning for few-step diffusion personalization on a sprite domain", "dtune"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    Options o;

    auto config_opt = [&](CLI::App* s) { s->add_option("--config", o.config, "experiment config JSON"); };
    auto out_opt = [&](CLI::App* s, const char* what) { s->add_option("--out", o.out, what); };

    auto* gd = app.add_subcommand("generate-data", "render a sprite dataset with its JSON-lines manifest");
    config_opt(gd);
    out_opt(gd, "dataset directory");
    gd->add_option("--n-identities", o.n_identities);
    gd->add_option("--images-per", o.images_per);

    auto* tb = app.add_subcommand("train-backbone", "train the frozen feature backbone / probe");
    config_opt(tb);
    out_opt(tb, "checkpoint directory");
    tb->add_option("--steps", o.steps);

    auto* pt = app.add_subcommand("pretrain", "domain pretraining of denoiser, encoder and offsets");
    config_opt(pt);
    out_opt(pt, "checkpoint directory");
    pt->add_option("--backbone", o.backbone, "backbone checkpoint (trained in-process if omitted)");
    pt->add_option("--data", o.data, "dataset directory (rendered in memory if omitted)");
    pt->add_option("--steps", o.steps);

    auto* ps = app.add_subcommand("personalize", "few-step tuning on a single concept image");
    ps->add_option("--ckpt", o.ckpt, "pretrained checkpoint")->required();
    ps->add_option("--image", o.image, "concept image (PNG)")->required();
    ps->add_option("--mask", o.mask, "concept mask (PNG)");
    config_opt(ps);
    out_opt(ps, "checkpoint directory");
    ps->add_option("--steps", o.steps);
    ps->add_option("--prompt", o.prompt, "prompt template id");
    ps->add_option("--ablation", o.ablation, "ablation flag name");
    ps->add_flag("--no-mask", o.no_mask);

    auto* sm = app.add_subcommand("sample", "generate images from a checkpoint");
    sm->add_option("--ckpt", o.ckpt)->required();
    sm->add_option("--prompt", o.prompt, "prompt template id");
    sm->add_option("--seed", o.seed);
    sm->add_option("--image", o.image, "concept image (defaults to the personalized concept)");
    sm->add_option("--batch", o.batch);
    sm->add_option("--t-stop", o.t_stop, "freeze the concept embedding after this timestep");
    out_opt(sm, "output directory");

    auto* ai = app.add_subcommand("analyze-importance", "per-layer weight-change importance scores");
    ai->add_option("--base", o.base)->required();
    ai->add_option("--tuned", o.tuned)->required();
    ai->add_option("--out", o.out, "report JSON");
    ai->add_option("--csv", o.csv, "per-layer scores CSV");

    auto* ar = app.add_subcommand("analyze-refinement", "t_stop freezing and embedding-distance curves");
    ar->add_option("--ckpt", o.ckpt)->required();
    ar->add_option("--image", o.image);
    ar->add_option("--prompt", o.prompt);
    ar->add_option("--t-stop", o.t_stop);
    ar->add_option("--seed", o.seed);
    ar->add_option("--seeds", o.seeds, "seeds averaged in the distance curve");
    out_opt(ar, "output directory");

    auto* ev = app.add_subcommand("evaluate", "concept similarity, prompt adherence and step benchmarks");
    ev->add_option("--ckpt", o.ckpt)->required();
    ev->add_option("--image", o.image);
    ev->add_option("--references", o.references, "reference renders of the concept");
    ev->add_option("--prompt", o.prompt);
    ev->add_option("--samples", o.samples);
    ev->add_option("--seed", o.seed);
    ev->add_flag("--benchmark", o.benchmark, "steps-to-threshold against the embedding-only baseline");
    out_opt(ev, "output directory");

    auto* ra = app.add_subcommand("reproduce-ablation", "one personalization run per ablation flag");
    config_opt(ra);
    ra->add_option("--ckpt", o.ckpt, "pretrained checkpoint (pretrained in-process if omitted)");
    ra->add_option("--backbone", o.backbone);
    ra->add_option("--data", o.data);
    ra->add_option("--steps", o.steps);
    ra->add_option("--samples", o.samples);
    out_opt(ra, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        err << error_json("usage", e.what()).dump() << std::endl;
        return 2;
    }

    RunRecord run;
    run.argv.assign(argv, argv + argc);
    json result;
    try {
        if (gd->parsed()) run.command = "generate-data", result = cmd_generate_data(o, run);
        else if (tb->parsed()) run.command = "train-backbone", result = cmd_train_backbone(o, run);
        else if (pt->parsed()) run.command = "pretrain", result = cmd_pretrain(o, run);
        else if (ps->parsed()) run.command = "personalize", result = cmd_personalize(o, run);
        else if (sm->parsed()) run.command = "sample", result = cmd_sample(o, run);
        else if (ai->parsed()) run.command = "analyze-importance", result = cmd_analyze_importance(o, run);
        else if (ar->parsed()) run.command = "analyze-refinement", result = cmd_analyze_refinement(o, run);
        else if (ev->parsed()) run.command = "evaluate", result = cmd_evaluate(o, run);
        else if (ra->parsed()) run.command = "reproduce-ablation", result = cmd_reproduce_ablation(o, run);
        run.write("ok");
        if (!run.manifest.empty()) result["manifest"] = run.manifest.string();
        out << result.dump() << std::endl;
        return 0;
    } catch (const ValidationError& e) {
        const auto j = error_json(e.kind(), e.what(), &e.path());
        err << j.dump() << std::endl;
        return 3;
    } catch (const Error& e) {
        const auto j = error_json(e.kind(), e.what());
        if (!run.manifest.empty() && !fs::exists(run.manifest) && fs::exists(run.manifest.parent_path())) {
            try {
                run.write(j);
            } catch (const Error&) {
            }
        }
        err << j.dump() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        err << error_json("internal", e.what()).dump() << std::endl;
        return 1;
    }
}

}  // namespace dtune
