#include "dtune/sprite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dtune/errors.hpp"
#include "dtune/png_io.hpp"
#include "dtune/rng.hpp"

namespace dtune {

namespace {

constexpr int kSupersample = 4;
constexpr double kSquareHalfSide = 0.8;
constexpr double kTriangleRadius = 1.1;
constexpr double kStarOuter = 1.15;
constexpr double kStarInner = 0.5;
constexpr double kMaxCircumradius = kStarOuter;

struct Vec2 {
    double x;
    double y;
};

std::vector<Vec2> triangle_polygon() {
    std::vector<Vec2> pts;
    for (int i = 0; i < 3; ++i) {
        const double a = std::numbers::pi / 2.0 + i * 2.0 * std::numbers::pi / 3.0;
        pts.push_back({kTriangleRadius * std::cos(a), kTriangleRadius * std::sin(a)});
    }
    return pts;
}

std::vector<Vec2> star_polygon() {
    std::vector<Vec2> pts;
    for (int i = 0; i < 10; ++i) {
        const double r = (i % 2 == 0) ? kStarOuter : kStarInner;
        const double a = std::numbers::pi / 2.0 + i * std::numbers::pi / 5.0;
        pts.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return pts;
}

// Even-odd crossing test.
bool inside_polygon(const std::vector<Vec2>& poly, double x, double y) {
    bool in = false;
    for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y > y) != (b.y > y)) {
            const double xc = (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x;
            if (x < xc) in = !in;
        }
    }
    return in;
}

bool inside_shape(Shape s, double x, double y) {
    static const std::vector<Vec2> tri = triangle_polygon();
    static const std::vector<Vec2> star = star_polygon();
    switch (s) {
        case Shape::kCircle: return x * x + y * y <= 1.0;
        case Shape::kSquare: return std::abs(x) <= kSquareHalfSide && std::abs(y) <= kSquareHalfSide;
        case Shape::kTriangle: return inside_polygon(tri, x, y);
        case Shape::kStar: return inside_polygon(star, x, y);
    }
    return false;
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

nlohmann::json rgb_json(const Rgb& c) { return nlohmann::json::array({c.r, c.g, c.b}); }
Rgb rgb_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

Rgb random_color(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

std::string numbered(const char* dir, int i, int j) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s/%05d_%03d.png", dir, i, j);
    return buf;
}

}  // namespace

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::kCircle: return "circle";
        case Shape::kTriangle: return "triangle";
        case Shape::kSquare: return "square";
        case Shape::kStar: return "star";
    }
    return "?";
}

std::int64_t Mask::area() const {
    std::int64_t n = 0;
    for (auto v : data) n += v ? 1 : 0;
    return n;
}

double shape_circumradius(Shape s) {
    switch (s) {
        case Shape::kCircle: return 1.0;
        case Shape::kSquare: return kSquareHalfSide * std::numbers::sqrt2;
        case Shape::kTriangle: return kTriangleRadius;
        case Shape::kStar: return kStarOuter;
    }
    return 1.0;
}

double shape_local_area(Shape s) {
    switch (s) {
        case Shape::kCircle: return std::numbers::pi;
        case Shape::kSquare: return 4.0 * kSquareHalfSide * kSquareHalfSide;
        case Shape::kTriangle: return 3.0 * std::sqrt(3.0) / 4.0 * kTriangleRadius * kTriangleRadius;
        case Shape::kStar: return 5.0 * kStarOuter * kStarInner * std::sin(std::numbers::pi / 5.0);
    }
    return 0.0;
}

double base_radius_px(int resolution) { return 0.25 * resolution; }

double analytic_area_fraction(Shape s, double scale) {
    // The canvas is 4 x 4 sprite radii.
    return shape_local_area(s) * scale * scale / 16.0;
}

SpriteIdentity generate_identity(std::uint64_t seed, const DomainRanges& ranges) {
    Rng rng(derive_seed(seed, "identity"));
    SpriteIdentity id;
    id.shape = static_cast<Shape>(rng.below(kShapeCount));
    id.primary = random_color(rng, 0.0, 1.0);
    id.secondary = random_color(rng, 0.0, 1.0);
    id.texture_freq = rng.uniform(ranges.texture_freq_min, ranges.texture_freq_max);
    id.seed = seed;
    return id;
}

Rendered render(const SpriteIdentity& id, const RenderContext& ctx, int resolution) {
    if (resolution != 32 && resolution != 64) {
        throw ContractError("resolution must be 32 or 64, got " + std::to_string(resolution));
    }
    if (!(ctx.scale > 0.0)) throw ContractError("render context scale must be positive");
    if (!(id.texture_freq > 0.0)) throw ContractError("texture_freq must be positive");

    const double half = 0.5 * resolution;
    const double radius_px = base_radius_px(resolution) * ctx.scale;
    const double reach = shape_circumradius(id.shape) * radius_px;
    if (reach + std::abs(ctx.dx) > half || reach + std::abs(ctx.dy) > half) {
        std::ostringstream os;
        os << "sprite leaves the canvas: reach " << reach << " px, offset (" << ctx.dx << ", " << ctx.dy
           << "), half-canvas " << half;
        throw BoundsError(os.str());
    }

    const double theta = ctx.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    const double cx = half + ctx.dx;
    const double cy = half + ctx.dy;
    constexpr int kSubs = kSupersample * kSupersample;

    Rendered out{Image(resolution, resolution), Mask(resolution, resolution)};
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            int covered = 0;
            Rgb fg{0.0, 0.0, 0.0};
            for (int sy = 0; sy < kSupersample; ++sy) {
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double px = x + (sx + 0.5) / kSupersample - cx;
                    const double py = y + (sy + 0.5) / kSupersample - cy;
                    // Undo rotation and scale to get sprite-local coordinates.
                    const double lx = (ct * px + st * py) / radius_px;
                    const double ly = (-st * px + ct * py) / radius_px;
                    if (!inside_shape(id.shape, lx, ly)) continue;
                    ++covered;
                    const double t = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * id.texture_freq * lx);
                    const Rgb c = lerp(id.primary, id.secondary, t);
                    fg.r += c.r;
                    fg.g += c.g;
                    fg.b += c.b;
                }
            }
            Rgb pixel = ctx.background;
            if (covered > 0) {
                const Rgb mean{fg.r / covered, fg.g / covered, fg.b / covered};
                if (2 * covered > kSubs) {
                    pixel = mean;
                    out.mask.at(y, x) = 1;
                } else {
                    pixel = lerp(ctx.background, mean, static_cast<double>(covered) / kSubs);
                }
            }
            out.image.at(y, x, 0) = static_cast<float>(std::clamp(pixel.r, 0.0, 1.0));
            out.image.at(y, x, 1) = static_cast<float>(std::clamp(pixel.g, 0.0, 1.0));
            out.image.at(y, x, 2) = static_cast<float>(std::clamp(pixel.b, 0.0, 1.0));
        }
    }
    return out;
}

Image quantize8(const Image& img) {
    Image q = img;
    for (auto& v : q.data) {
        const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        v = static_cast<float>(static_cast<std::uint8_t>(std::lround(c * 255.0f))) / 255.0f;
    }
    return q;
}

const std::vector<PromptTemplate>& prompt_templates() {
    // Vocabulary: 0 <pad>, 1 a, 2 photo, 3 of, 4 S*, 5 on, 6 red, 7 green,
    // 8 blue, 9 white, 10 background, 11 rotated, 12 small, 13 large.
    static const std::vector<PromptTemplate> kTemplates = {
        {0, "a photo of S*", {1, 2, 3, 4, 0, 0, 0, 0}, 3, std::nullopt},
        {1, "S* on red background", {4, 5, 6, 10, 0, 0, 0, 0}, 0, Rgb{0.85, 0.15, 0.15}},
        {2, "S* on green background", {4, 5, 7, 10, 0, 0, 0, 0}, 0, Rgb{0.15, 0.7, 0.2}},
        {3, "S* on blue background", {4, 5, 8, 10, 0, 0, 0, 0}, 0, Rgb{0.15, 0.25, 0.85}},
        {4, "S* on white background", {4, 5, 9, 10, 0, 0, 0, 0}, 0, Rgb{0.95, 0.95, 0.95}},
        {5, "rotated S*", {11, 4, 0, 0, 0, 0, 0, 0}, 1, std::nullopt},
        {6, "a small S*", {1, 12, 4, 0, 0, 0, 0, 0}, 2, std::nullopt},
        {7, "a large S*", {1, 13, 4, 0, 0, 0, 0, 0}, 2, std::nullopt},
    };
    return kTemplates;
}

const PromptTemplate& prompt_template(int id) {
    const auto& all = prompt_templates();
    if (id < 0 || id >= static_cast<int>(all.size())) {
        throw RangeError("template id out of range: " + std::to_string(id));
    }
    return all[static_cast<size_t>(id)];
}

RenderContext sample_context(const PromptTemplate& tpl, int resolution, const DomainRanges& ranges,
                             std::uint64_t seed) {
    Rng rng(derive_seed(seed, "context"));
    RenderContext ctx;
    ctx.background = random_color(rng, ranges.background_min, ranges.background_max);
    ctx.rotation_deg = rng.uniform(-ranges.rotation_max_deg, ranges.rotation_max_deg);
    ctx.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    const double jitter = ranges.position_jitter * resolution / 32.0;
    ctx.dx = rng.uniform(-jitter, jitter);
    ctx.dy = rng.uniform(-jitter, jitter);

    if (tpl.background) ctx.background = *tpl.background;
    switch (tpl.id) {
        case 5: {
            const double mag = rng.uniform(35.0, 55.0);
            ctx.rotation_deg = rng.uniform() < 0.5 ? -mag : mag;
            break;
        }
        case 6: ctx.scale = rng.uniform(0.55, 0.7); break;
        case 7: ctx.scale = rng.uniform(1.25, 1.4); break;
        default: break;
    }
    const double room = 0.5 * resolution - kMaxCircumradius * base_radius_px(resolution) * ctx.scale;
    const double limit = std::max(0.0, room - 1e-9);
    ctx.dx = std::clamp(ctx.dx, -limit, limit);
    ctx.dy = std::clamp(ctx.dy, -limit, limit);
    return ctx;
}

nlohmann::json record_to_json(const DatasetRecord& r, int resolution) {
    nlohmann::json j;
    j["identity_id"] = r.identity_id;
    j["shape"] = static_cast<int>(r.identity.shape);
    j["primary"] = rgb_json(r.identity.primary);
    j["secondary"] = rgb_json(r.identity.secondary);
    j["texture_freq"] = r.identity.texture_freq;
    j["identity_seed"] = r.identity.seed;
    j["background"] = rgb_json(r.context.background);
    j["position"] = nlohmann::json::array({r.context.dx, r.context.dy});
    j["rotation"] = r.context.rotation_deg;
    j["scale"] = r.context.scale;
    j["template_id"] = r.template_id;
    j["resolution"] = resolution;
    j["image"] = r.image_path;
    j["mask"] = r.mask_path;
    return j;
}

DatasetRecord record_from_json(const nlohmann::json& j) {
    DatasetRecord r;
    r.identity_id = j.at("identity_id").get<int>();
    const int shape = j.at("shape").get<int>();
    if (shape < 0 || shape >= kShapeCount) throw ContractError("invalid shape id in manifest");
    r.identity.shape = static_cast<Shape>(shape);
    r.identity.primary = rgb_from(j.at("primary"));
    r.identity.secondary = rgb_from(j.at("secondary"));
    r.identity.texture_freq = j.at("texture_freq").get<double>();
    r.identity.seed = j.at("identity_seed").get<std::uint64_t>();
    r.context.background = rgb_from(j.at("background"));
    r.context.dx = j.at("position").at(0).get<double>();
    r.context.dy = j.at("position").at(1).get<double>();
    r.context.rotation_deg = j.at("rotation").get<double>();
    r.context.scale = j.at("scale").get<double>();
    r.template_id = j.at("template_id").get<int>();
    r.image_path = j.at("image").get<std::string>();
    r.mask_path = j.at("mask").get<std::string>();
    return r;
}

std::string serialize_manifest(const DatasetManifest& m) {
    std::string out;
    for (const auto& r : m.records) {
        out += record_to_json(r, m.resolution).dump();
        out += '\n';
    }
    return out;
}

DatasetManifest parse_manifest(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (first) {
            m.resolution = j.at("resolution").get<int>();
            first = false;
        }
        m.records.push_back(record_from_json(j));
    }
    return m;
}

DatasetManifest plan_dataset(int n_identities, int images_per, std::uint64_t seed, int resolution,
                             const DomainRanges& ranges) {
    if (n_identities < 1 || images_per < 1) throw ContractError("dataset needs n_identities >= 1 and images_per >= 1");
    DatasetManifest m;
    m.resolution = resolution;
    m.records.reserve(static_cast<size_t>(n_identities) * images_per);
    for (int i = 0; i < n_identities; ++i) {
        const SpriteIdentity id = generate_identity(derive_seed(seed, 1, static_cast<std::uint64_t>(i)), ranges);
        for (int j = 0; j < images_per; ++j) {
            const std::uint64_t s = derive_seed(seed, 2 + static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
            Rng rng(s);
            DatasetRecord r;
            r.identity_id = i;
            r.identity = id;
            r.template_id = static_cast<int>(rng.below(kTemplateCount));
            r.context = sample_context(prompt_template(r.template_id), resolution, ranges, s);
            r.image_path = numbered("images", i, j);
            r.mask_path = numbered("masks", i, j);
            m.records.push_back(std::move(r));
        }
    }
    return m;
}

DatasetManifest make_dataset(const std::filesystem::path& dir, int n_identities, int images_per, std::uint64_t seed,
                             int resolution, const DomainRanges& ranges) {
    DatasetManifest m = plan_dataset(n_identities, images_per, seed, resolution, ranges);
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    std::filesystem::create_directories(dir / "masks", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    for (const auto& r : m.records) {
        const Rendered out = render(r.identity, r.context, resolution);
        write_png(dir / r.image_path, out.image);
        write_png(dir / r.mask_path, out.mask);
    }
    std::ofstream os(dir / "manifest.jsonl", std::ios::binary);
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << serialize_manifest(m);
    if (!os) throw IoError("manifest write failed in " + dir.string());
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.jsonl", std::ios::binary);
    if (!is) throw IoError("cannot read manifest in " + dir.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_manifest(ss.str());
}

std::vector<DatasetItem> render_items(const DatasetManifest& m) {
    std::vector<DatasetItem> items;
    items.reserve(m.records.size());
    for (const auto& r : m.records) {
        Rendered out = render(r.identity, r.context, m.resolution);
        items.push_back({r, quantize8(out.image), std::move(out.mask)});
    }
    return items;
}

std::vector<DatasetItem> load_items(const std::filesystem::path& dir) {
    const DatasetManifest m = load_manifest(dir);
    std::vector<DatasetItem> items;
    items.reserve(m.records.size());
    for (const auto& r : m.records) {
        items.push_back({r, read_png_image(dir / r.image_path), read_png_mask(dir / r.mask_path)});
    }
    return items;
}

}  // namespace dtune
