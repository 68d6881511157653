#include "dtune/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dtune/errors.hpp"
#include "dtune/png_io.hpp"

namespace dtune {

RefinementTrace refinement_freeze_sample(DomainModel& model, const torch::Tensor& image01, int template_id, int t_stop,
                                         std::uint64_t seed) {
    const int T = model.schedule().steps;
    if (t_stop < 0 || t_stop > T) throw RangeError("t_stop must be in [0, " + std::to_string(T) + "]");
    RefinementTrace out;
    out.scale = model.config().encoder.scale;
    out.image = model.sample(image01, template_id, seed, 1, t_stop, &out.records);
    return out;
}

DistanceCurve embedding_distance_curve(DomainModel& model, const torch::Tensor& image01, int template_id,
                                       const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ContractError("embedding_distance_curve needs at least one seed");
    DistanceCurve c;
    for (auto seed : seeds) {
        std::vector<ProviderRecord> trace;
        model.sample(image01, template_id, seed, 1, -1, &trace);
        if (c.t.empty()) {
            for (const auto& r : trace) c.t.push_back(r.t);
            c.distance.assign(trace.size(), 0.0);
            c.offset_norm.assign(trace.size(), 0.0);
        }
        for (size_t i = 0; i < trace.size(); ++i) {
            c.distance[i] += trace[i].distance / static_cast<double>(seeds.size());
            c.offset_norm[i] += trace[i].offset_norm / static_cast<double>(seeds.size());
        }
    }
    return c;
}

void write_curve_csv(const std::filesystem::path& path, const DistanceCurve& curve) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(10);
    os << "t,distance,offset_norm\n";
    for (size_t i = 0; i < curve.t.size(); ++i) os << curve.t[i] << ',' << curve.distance[i] << ',' << curve.offset_norm[i] << '\n';
}

void write_curve_png(const std::filesystem::path& path, const std::vector<DistanceCurve>& curves) {
    constexpr int W = 360, H = 220, L = 30, R = 10, Tm = 10, Bm = 25;
    std::vector<std::uint8_t> rgb(static_cast<size_t>(W) * H * 3, 255);
    auto put = [&](int x, int y, std::array<std::uint8_t, 3> c) {
        if (x < 0 || y < 0 || x >= W || y >= H) return;
        auto* p = &rgb[(static_cast<size_t>(y) * W + x) * 3];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    };
    auto line = [&](int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
        const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
        const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            put(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) { err += dy; x0 += sx; }
            if (e2 <= dx) { err += dx; y0 += sy; }
        }
    };
    double tmax = 1.0, dmax = 0.0;
    for (const auto& c : curves) {
        for (int t : c.t) tmax = std::max(tmax, static_cast<double>(t));
        for (double d : c.distance) dmax = std::max(dmax, d);
    }
    if (dmax <= 0.0) dmax = 1.0;
    const std::array<std::uint8_t, 3> axis{0, 0, 0};
    line(L, Tm, L, H - Bm, axis);
    line(L, H - Bm, W - R, H - Bm, axis);
    const std::vector<std::array<std::uint8_t, 3>> palette{{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}};
    // x runs from t = T (left) to t = 0 (right), the order of denoising.
    auto px = [&](double t) { return L + static_cast<int>(std::lround((1.0 - t / tmax) * (W - L - R))); };
    auto py = [&](double d) { return H - Bm - static_cast<int>(std::lround(d / dmax * (H - Tm - Bm))); };
    for (size_t k = 0; k < curves.size(); ++k) {
        const auto& c = curves[k];
        for (size_t i = 1; i < c.t.size(); ++i) {
            line(px(c.t[i - 1]), py(c.distance[i - 1]), px(c.t[i]), py(c.distance[i]), palette[k % palette.size()]);
        }
    }
    write_png_rgb8(path, H, W, rgb);
}

double concept_similarity(Backbone& probe, const torch::Tensor& images_a, const torch::Tensor& images_b) {
    if (images_a.size(0) == 0 || images_b.size(0) == 0) throw ContractError("concept_similarity needs nonempty sets");
    torch::NoGradGuard no_grad;
    const auto dtype = probe->parameters().front().scalar_type();
    auto fa = probe->forward(images_a.to(dtype)).embedding.to(torch::kFloat64);
    auto fb = probe->forward(images_b.to(dtype)).embedding.to(torch::kFloat64);
    fa = fa / fa.norm(2, 1, true).clamp_min(1e-300);
    fb = fb / fb.norm(2, 1, true).clamp_min(1e-300);
    const double c = torch::matmul(fa, fb.t()).mean().item<double>();
    return std::clamp(c, -1.0, 1.0);
}

bool has_adherence_checker(int template_id) { return prompt_template(template_id).background.has_value(); }

double prompt_adherence(const torch::Tensor& images, int template_id) {
    const auto& tpl = prompt_template(template_id);
    if (!tpl.background) throw UnsupportedError("unsupported template for prompt adherence: \"" + tpl.text + "\"");
    auto imgs = images.dim() == 3 ? images.unsqueeze(0) : images;
    imgs = imgs.to(torch::kFloat64);
    const auto H = imgs.size(2), W = imgs.size(3);
    const int64_t ring = std::max<int64_t>(1, H / 16);
    auto border = torch::ones({H, W}, torch::kBool);
    border.slice(0, ring, H - ring).slice(1, ring, W - ring).fill_(false);
    std::vector<std::array<double, 3>> colors;
    int target = -1;
    for (const auto& t : prompt_templates()) {
        if (!t.background) continue;
        if (t.id == template_id) target = static_cast<int>(colors.size());
        colors.push_back({t.background->r, t.background->g, t.background->b});
    }
    int ok = 0;
    for (int64_t n = 0; n < imgs.size(0); ++n) {
        auto px = imgs[n].flatten(1).index({torch::indexing::Slice(), border.flatten()});  // [3, P]
        auto mean = px.mean(1);
        std::array<double, 3> m{mean[0].item<double>(), mean[1].item<double>(), mean[2].item<double>()};
        int best = 0;
        double best_d = 1e300, target_d = 0.0;
        for (size_t k = 0; k < colors.size(); ++k) {
            const double d = std::sqrt(std::pow(m[0] - colors[k][0], 2) + std::pow(m[1] - colors[k][1], 2) +
                                       std::pow(m[2] - colors[k][2], 2));
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(k);
            }
            if (static_cast<int>(k) == target) target_d = d;
        }
        if (best == target && target_d < 0.3) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(imgs.size(0));
}

std::vector<double> smooth_trace(const std::vector<double>& trace, int window) {
    if (static_cast<int>(trace.size()) < window) return trace;
    std::vector<double> out(trace.size());
    double sum = 0.0;
    for (size_t i = 0; i < trace.size(); ++i) {
        sum += trace[i];
        if (i >= static_cast<size_t>(window)) sum -= trace[i - static_cast<size_t>(window)];
        out[i] = sum / static_cast<double>(std::min<size_t>(i + 1, static_cast<size_t>(window)));
    }
    return out;
}

std::optional<int> steps_to_threshold(const std::vector<double>& trace, double threshold, int window) {
    if (trace.empty()) throw ContractError("steps_to_threshold: empty trace");
    const auto s = smooth_trace(trace, window);
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] <= threshold) return static_cast<int>(i);
    }
    return std::nullopt;
}

}  // namespace dtune
