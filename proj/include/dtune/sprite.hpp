#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dtune {

enum class Shape : std::uint8_t { kCircle = 0, kTriangle = 1, kSquare = 2, kStar = 3 };
inline constexpr int kShapeCount = 4;

const char* shape_name(Shape s);

struct Rgb {
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;
    bool operator==(const Rgb&) const = default;
};

/// One concept of the domain. Equal fields render identically.
struct SpriteIdentity {
    Shape shape = Shape::kCircle;
    Rgb primary;
    Rgb secondary;
    double texture_freq = 1.0;
    std::uint64_t seed = 0;
    bool operator==(const SpriteIdentity&) const = default;
};

/// Pose and background of one rendering. Position is in pixels relative to
/// the canvas center at the render resolution.
struct RenderContext {
    Rgb background{0.5, 0.5, 0.5};
    double dx = 0.0;
    double dy = 0.0;
    double rotation_deg = 0.0;
    double scale = 1.0;
    bool operator==(const RenderContext&) const = default;
};

/// Parameter ranges of the generator; together they define "the domain".
struct DomainRanges {
    double texture_freq_min = 0.5;
    double texture_freq_max = 2.5;
    double scale_min = 0.85;
    double scale_max = 1.1;
    double rotation_max_deg = 15.0;
    double position_jitter = 2.0;  // pixels at 32x32, scaled with resolution
    double background_min = 0.1;
    double background_max = 0.9;
    bool operator==(const DomainRanges&) const = default;
};

/// HWC float image with values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0f) {}

    float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    std::int64_t area() const;
    bool operator==(const Mask&) const = default;
};

struct Rendered {
    Image image;
    Mask mask;
};

SpriteIdentity generate_identity(std::uint64_t seed, const DomainRanges& ranges = {});

/// Renders with 4x4 supersampling. Pixels with at least half coverage are
/// foreground (mask = 1) and carry the pure sprite color; partially covered
/// background pixels are blended. Throws BoundsError if the sprite would leave
/// the canvas and ContractError for unsupported resolutions.
Rendered render(const SpriteIdentity& id, const RenderContext& ctx, int resolution);

/// Circumradius of the shape primitive in local units (sprite radius = 1).
double shape_circumradius(Shape s);
/// Analytic area of the shape primitive in local units.
double shape_local_area(Shape s);
/// Analytic sprite area as a fraction of the canvas.
double analytic_area_fraction(Shape s, double scale);

/// Sprite radius in pixels at scale 1.
double base_radius_px(int resolution);

/// Quantizes to 8 bits and back; what a PNG round trip produces.
Image quantize8(const Image& img);

// ---------------------------------------------------------------------------
// Prompt vocabulary

inline constexpr int kSeqLen = 8;
inline constexpr int kVocabSize = 16;
inline constexpr int kPlaceholderToken = 4;
inline constexpr int kTemplateCount = 8;

struct PromptTemplate {
    int id = 0;
    std::string text;
    std::array<int, kSeqLen> token_ids{};
    int placeholder_index = 0;
    std::optional<Rgb> background;  // set for "S* on <color> background"
};

const std::vector<PromptTemplate>& prompt_templates();
const PromptTemplate& prompt_template(int id);

/// Samples a context consistent with the template (e.g. its background color).
RenderContext sample_context(const PromptTemplate& tpl, int resolution, const DomainRanges& ranges,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetRecord {
    int identity_id = 0;
    SpriteIdentity identity;
    RenderContext context;
    int template_id = 0;
    std::string image_path;
    std::string mask_path;
    bool operator==(const DatasetRecord&) const = default;
};

struct DatasetManifest {
    int resolution = 32;
    std::vector<DatasetRecord> records;
    bool operator==(const DatasetManifest&) const = default;
};

nlohmann::json record_to_json(const DatasetRecord& r, int resolution);
DatasetRecord record_from_json(const nlohmann::json& j);

/// JSON-lines serialization, one record per line.
std::string serialize_manifest(const DatasetManifest& m);
DatasetManifest parse_manifest(const std::string& text);

/// Pure description of a dataset; identity i is drawn from a seed derived from
/// (seed, i) so the first k identities do not depend on n_identities.
DatasetManifest plan_dataset(int n_identities, int images_per, std::uint64_t seed, int resolution = 32,
                             const DomainRanges& ranges = {});

/// Renders every record and writes manifest.jsonl plus PNG images and masks.
DatasetManifest make_dataset(const std::filesystem::path& dir, int n_identities, int images_per,
                             std::uint64_t seed, int resolution = 32, const DomainRanges& ranges = {});

DatasetManifest load_manifest(const std::filesystem::path& dir);

struct DatasetItem {
    DatasetRecord record;
    Image image;
    Mask mask;
};

/// In-memory materialization, bit-identical to loading the written PNGs.
std::vector<DatasetItem> render_items(const DatasetManifest& m);
std::vector<DatasetItem> load_items(const std::filesystem::path& dir);

}  // namespace dtune
