#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dtune/model.hpp"

namespace dtune {

struct RefinementTrace {
    std::vector<ProviderRecord> records;  // one per sampler step
    double scale = 0.0;
    torch::Tensor image;  // [1, 3, H, W] in [0, 1]
};

/// Samples with the per-timestep provider, reusing the last embedding after
/// the step at t <= t_stop. t_stop = 0 leaves the pipeline unchanged; t_stop = T
/// freezes after the first prediction. RangeError outside [0, T].
RefinementTrace refinement_freeze_sample(DomainModel& model, const torch::Tensor& image01, int template_id, int t_stop,
                                         std::uint64_t seed);

struct DistanceCurve {
    std::vector<int> t;
    std::vector<double> distance;     // mean ||e_c - domain_embedding|| over seeds
    std::vector<double> offset_norm;  // mean ||offset|| over seeds
};

DistanceCurve embedding_distance_curve(DomainModel& model, const torch::Tensor& image01, int template_id,
                                       const std::vector<std::uint64_t>& seeds);

void write_curve_csv(const std::filesystem::path& path, const DistanceCurve& curve);
/// Line plot of one or more curves (distance against denoising timestep).
void write_curve_png(const std::filesystem::path& path, const std::vector<DistanceCurve>& curves);

/// Mean pairwise cosine of the probe's penultimate features over all (a, b) pairs.
double concept_similarity(Backbone& probe, const torch::Tensor& images_a, const torch::Tensor& images_b);

/// Whether the template has an analytic attribute checker.
bool has_adherence_checker(int template_id);
/// Fraction of images whose border color matches the template's background
/// (nearest of the template backgrounds and within 0.3 in RGB distance).
/// UnsupportedError for templates without a checker.
double prompt_adherence(const torch::Tensor& images, int template_id);

/// Trailing-window mean (window 5, shorter at the start); traces shorter than
/// the window are returned unchanged.
std::vector<double> smooth_trace(const std::vector<double>& trace, int window = 5);
/// First index whose smoothed value is <= threshold; nullopt when never reached.
std::optional<int> steps_to_threshold(const std::vector<double>& trace, double threshold, int window = 5);

}  // namespace dtune
