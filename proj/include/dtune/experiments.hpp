#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dtune/model.hpp"
#include "dtune/sprite.hpp"
#include "dtune/trainer.hpp"

namespace dtune {

/// A concept image with its mask and further renders of the same identity.
struct HeldOutConcept {
    int identity_id = 0;
    SpriteIdentity identity;
    torch::Tensor image;       // [3, H, W]
    torch::Tensor mask;        // [1, 1, H, W]
    torch::Tensor references;  // [R, 3, H, W], rendered under the same template
};

/// Identities drawn from `seed`; a seed distinct from the training data's
/// yields identities outside the training set.
std::vector<HeldOutConcept> held_out_concepts(int n, std::uint64_t seed, int template_id, int resolution = 32,
                                              const DomainRanges& ranges = {}, int n_references = 8);

struct ThresholdRun {
    int identity_id = 0;
    std::uint64_t seed = 0;
    double threshold = 0.0;
    std::optional<int> tuned_steps;
    std::optional<int> baseline_steps;
    std::vector<double> tuned_trace;
    std::vector<double> baseline_trace;
};

struct StepBenchmark {
    std::vector<ThresholdRun> runs;
    double tuned_median = 0.0;     // "not reached" counts as max_steps + 1
    double baseline_median = 0.0;
};

/// Runs personalize and the embedding-only baseline at the same effective
/// learning rate and noise stream. The threshold for each (concept, seed) is
/// `fraction` times the baseline's first-step diffusion loss. Both methods
/// stop once their smoothed loss reaches it or after `max_steps`.
StepBenchmark benchmark_steps(const DomainModel& pretrained, const std::vector<HeldOutConcept>& concepts,
                              const std::vector<std::uint64_t>& seeds, const PersonalizeConfig& cfg, int max_steps,
                              double fraction, bool use_mask = true);

nlohmann::json benchmark_to_json(const StepBenchmark& b);

/// Concept similarity of `samples` generations against the concept's references.
double sample_similarity(DomainModel& model, const HeldOutConcept& concept_in, int template_id, int samples,
                         std::uint64_t seed);

struct AblationRow {
    std::string label;
    std::vector<std::string> trained_groups;
    std::vector<std::string> changed_groups;  // groups whose hash moved during tuning
    double final_loss = 0.0;
    double similarity = 0.0;
    int steps = 0;
};

/// Tunes one concept under `flags` and reports which parameter groups changed.
AblationRow run_ablation(const DomainModel& pretrained, const HeldOutConcept& concept_in, PersonalizeConfig cfg,
                         const AblationFlags& flags, int samples, bool use_mask = true);

double median(std::vector<double> v);

}  // namespace dtune
