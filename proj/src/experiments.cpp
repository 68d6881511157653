#include "dtune/experiments.hpp"

#include <algorithm>

#include "dtune/analysis.hpp"
#include "dtune/errors.hpp"
#include "dtune/rng.hpp"

namespace dtune {

std::vector<HeldOutConcept> held_out_concepts(int n, std::uint64_t seed, int template_id, int resolution,
                                              const DomainRanges& ranges, int n_references) {
    if (n < 1 || n_references < 1) throw ContractError("held_out_concepts needs n >= 1 and n_references >= 1");
    const auto& tpl = prompt_template(template_id);
    const auto plan = plan_dataset(n, 1, seed, resolution, ranges);
    std::vector<HeldOutConcept> out;
    for (const auto& rec : plan.records) {
        HeldOutConcept c;
        c.identity_id = rec.identity_id;
        c.identity = rec.identity;
        std::vector<torch::Tensor> refs;
        for (int j = 0; j <= n_references; ++j) {
            const auto ctx = sample_context(tpl, resolution, ranges, derive_seed(derive_seed(rec.identity.seed, "heldout"), static_cast<std::uint64_t>(j)));
            const auto r = render(rec.identity, ctx, resolution);
            if (j == 0) {
                c.image = image_to_tensor(r.image)[0];
                c.mask = mask_to_tensor(r.mask);
            } else {
                refs.push_back(image_to_tensor(r.image));
            }
        }
        c.references = torch::cat(refs, 0);
        out.push_back(std::move(c));
    }
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of an empty set");
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace {

// Stops once the smoothed prefix reaches the threshold. Smoothing is causal,
// so a decision on a prefix of at least `window` points is final.
struct ThresholdWatch {
    double threshold = 0.0;
    bool from_first = false;
    double fraction = 1.0;
    std::vector<double> trace;
    std::optional<int> hit;

    bool operator()(const StepLoss& s) {
        if (from_first && trace.empty()) threshold = fraction * s.diffusion;
        trace.push_back(s.diffusion);
        if (trace.size() >= 5) hit = steps_to_threshold(trace, threshold);
        return !hit.has_value();
    }
    void finish() {
        if (!hit && !trace.empty()) hit = steps_to_threshold(trace, threshold);
    }
};

}  // namespace

StepBenchmark benchmark_steps(const DomainModel& pretrained, const std::vector<HeldOutConcept>& concepts,
                              const std::vector<std::uint64_t>& seeds, const PersonalizeConfig& cfg, int max_steps,
                              double fraction, bool use_mask) {
    if (concepts.empty() || seeds.empty()) throw ContractError("benchmark_steps needs concepts and seeds");
    if (max_steps < 1) throw ContractError("benchmark_steps needs max_steps >= 1");
    StepBenchmark out;
    std::vector<double> tuned, base;
    for (const auto& c : concepts) {
        for (auto seed : seeds) {
            PersonalizeConfig pc = cfg;
            pc.steps = max_steps;
            pc.seed = seed;
            const auto mask = use_mask ? c.mask : torch::Tensor();

            ThresholdWatch bw;
            bw.from_first = true;
            bw.fraction = fraction;
            baseline_embedding_only(pretrained, c.image, pc.template_id, max_steps, pc.effective_lr(), seed, mask,
                                    [&](const StepLoss& s) { return bw(s); });
            bw.finish();

            ThresholdWatch tw;
            tw.threshold = bw.threshold;
            personalize(pretrained, c.image, pc, mask, [&](const StepLoss& s) { return tw(s); });
            tw.finish();

            ThresholdRun r;
            r.identity_id = c.identity_id;
            r.seed = seed;
            r.threshold = bw.threshold;
            r.tuned_steps = tw.hit;
            r.baseline_steps = bw.hit;
            r.tuned_trace = tw.trace;
            r.baseline_trace = bw.trace;
            tuned.push_back(tw.hit ? *tw.hit : max_steps + 1);
            base.push_back(bw.hit ? *bw.hit : max_steps + 1);
            out.runs.push_back(std::move(r));
        }
    }
    out.tuned_median = median(tuned);
    out.baseline_median = median(base);
    return out;
}

nlohmann::json benchmark_to_json(const StepBenchmark& b) {
    nlohmann::json runs = nlohmann::json::array();
    auto opt = [](const std::optional<int>& v) { return v ? nlohmann::json(*v) : nlohmann::json("not reached"); };
    for (const auto& r : b.runs) {
        runs.push_back({{"identity_id", r.identity_id},
                        {"seed", r.seed},
                        {"threshold", r.threshold},
                        {"tuned_steps", opt(r.tuned_steps)},
                        {"baseline_steps", opt(r.baseline_steps)}});
    }
    return {{"tuned_median", b.tuned_median}, {"baseline_median", b.baseline_median}, {"runs", runs}};
}

double sample_similarity(DomainModel& model, const HeldOutConcept& concept_in, int template_id, int samples,
                         std::uint64_t seed) {
    auto imgs = model.sample(concept_in.image, template_id, seed, samples);
    return concept_similarity(model.backbone, imgs.to(torch::kFloat32), concept_in.references);
}

AblationRow run_ablation(const DomainModel& pretrained, const HeldOutConcept& concept_in, PersonalizeConfig cfg,
                         const AblationFlags& flags, int samples, bool use_mask) {
    flags.validate();
    cfg.flags = flags;
    AblationRow row;
    row.label = ablation_label(flags);
    row.trained_groups = flags.trained_groups();
    const auto before = model_for_flags(pretrained, flags);
    auto res = personalize(pretrained, concept_in.image, cfg, use_mask ? concept_in.mask : torch::Tensor());
    for (const char* g : {"denoiser", "encoder", "offsets"}) {
        if (before->group_hash(g) != res.model->group_hash(g)) row.changed_groups.emplace_back(g);
    }
    row.steps = res.steps;
    row.final_loss = res.trace.empty() ? 0.0 : res.trace.back().diffusion;
    if (samples > 0) {
        row.similarity = sample_similarity(*res.model, concept_in, cfg.template_id, samples, derive_seed(cfg.seed, "sampler"));
    }
    return row;
}

}  // namespace dtune
