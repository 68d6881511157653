#include "dtune/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "dtune/errors.hpp"

namespace dtune {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_raw(const std::filesystem::path& path, int height, int width, int color_type, int channels,
                   const std::uint8_t* pixels) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels + static_cast<size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, int channels, int& height, int& width) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<std::uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) {
        png_set_gray_to_rgb(png);
    }
    if (channels == 1 && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
                          color == PNG_COLOR_TYPE_PALETTE)) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);
    if (static_cast<int>(png_get_channels(png, info)) != channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unexpected channel count in " + path.string());
    }
    out.resize(static_cast<size_t>(height) * width * channels);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = out.data() + static_cast<size_t>(y) * width * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

std::uint8_t to_u8(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> buf(img.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = to_u8(img.data[i]);
    write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 3, buf.data());
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> buf(mask.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = mask.data[i] ? 255 : 0;
    write_png_raw(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 1, buf.data());
}

void write_png_rgb8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(height) * width * 3) throw ContractError("rgb buffer size mismatch");
    write_png_raw(path, height, width, PNG_COLOR_TYPE_RGB, 3, rgb.data());
}

Image read_png_image(const std::filesystem::path& path) {
    int h = 0, w = 0;
    auto raw = read_png_raw(path, 3, h, w);
    Image img(h, w);
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

Mask read_png_mask(const std::filesystem::path& path) {
    int h = 0, w = 0;
    auto raw = read_png_raw(path, 1, h, w);
    Mask m(h, w);
    for (size_t i = 0; i < raw.size(); ++i) m.data[i] = raw[i] >= 128 ? 1 : 0;
    return m;
}

}  // namespace dtune
