#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "facediff/errors.hpp"
#include "facediff/tensor.hpp"

namespace facediff {

/// Write an image in [-1,1] as an 8-bit RGB PNG via
/// pixel = round((x + 1) * 127.5), clamped to [0, 255].
inline void write_png_rgb8(const std::string& path, const ImageTensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("write_png_rgb8: expected [3,H,W], got " + image.shape_str());
    }
    long H = image.dim(1), W = image.dim(2);

    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("write_png_rgb8: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png_rgb8: libpng init failed");
    }
    std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png_rgb8: libpng error writing " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            for (long c = 0; c < 3; ++c) {
                double v = std::round((image.at3(c, y, x) + 1.0) * 127.5);
                v = std::min(255.0, std::max(0.0, v));
                row[static_cast<size_t>(x * 3 + c)] = static_cast<unsigned char>(v);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

/// Read a PNG as [3,H,W] in [-1,1]. Grayscale/palette/alpha inputs are
/// expanded/stripped to 8-bit RGB.
inline ImageTensor read_png_rgb8(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("read_png_rgb8: cannot open " + path);
    unsigned char header[8];
    if (std::fread(header, 1, 8, fp) != 8 || png_sig_cmp(header, 0, 8) != 0) {
        std::fclose(fp);
        throw IoError("read_png_rgb8: not a PNG file: " + path);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png_rgb8: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png_rgb8: malformed PNG: " + path);
    }
    png_init_io(png, fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_read_update_info(png, info);

    long W = static_cast<long>(png_get_image_width(png, info));
    long H = static_cast<long>(png_get_image_height(png, info));
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png_rgb8: cannot normalize to RGB: " + path);
    }
    std::vector<unsigned char> pixels(static_cast<size_t>(H * W * 3));
    std::vector<png_bytep> rows(static_cast<size_t>(H));
    for (long y = 0; y < H; ++y) rows[static_cast<size_t>(y)] = pixels.data() + y * W * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    ImageTensor out({3, H, W});
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            for (long c = 0; c < 3; ++c) {
                out.at3(c, y, x) = static_cast<double>(pixels[static_cast<size_t>((y * W + x) * 3 + c)]) / 127.5 - 1.0;
            }
        }
    }
    return out;
}

/// Bilinear resize of [3,H,W] to [3,size,size] (align-corners-off sampling).
inline ImageTensor bilinear_resize(const ImageTensor& image, long size) {
    if (image.rank() != 3) throw DimensionError("bilinear_resize: expected [C,H,W]");
    long C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (H == size && W == size) return image;
    ImageTensor out({C, size, size});
    double sy = static_cast<double>(H) / static_cast<double>(size);
    double sx = static_cast<double>(W) / static_cast<double>(size);
    for (long y = 0; y < size; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        long y0 = static_cast<long>(std::floor(fy));
        double wy = fy - static_cast<double>(y0);
        long y0c = std::clamp(y0, 0L, H - 1), y1c = std::clamp(y0 + 1, 0L, H - 1);
        for (long x = 0; x < size; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            long x0 = static_cast<long>(std::floor(fx));
            double wx = fx - static_cast<double>(x0);
            long x0c = std::clamp(x0, 0L, W - 1), x1c = std::clamp(x0 + 1, 0L, W - 1);
            for (long c = 0; c < C; ++c) {
                double v = (1 - wy) * ((1 - wx) * image.at3(c, y0c, x0c) + wx * image.at3(c, y0c, x1c)) +
                           wy * ((1 - wx) * image.at3(c, y1c, x0c) + wx * image.at3(c, y1c, x1c));
                out.at3(c, y, x) = v;
            }
        }
    }
    return out;
}

struct FolderLoadResult {
    std::vector<ImageTensor> images;
    std::vector<std::string> filenames;       // successfully loaded, sorted
    std::vector<std::string> errors;          // one message per failed file
};

/// Load every *.png under `path` in lexicographic order, resized to
/// size x size and mapped to [-1,1]. Bad files are reported in the result
/// and skipped; loading continues.
inline FolderLoadResult load_image_folder(const std::string& path, long size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) throw IoError("load_image_folder: not a directory: " + path);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());

    FolderLoadResult res;
    for (const auto& name : names) {
        try {
            ImageTensor img = read_png_rgb8((fs::path(path) / name).string());
            res.images.push_back(bilinear_resize(img, size));
            res.filenames.push_back(name);
        } catch (const Error& e) {
            res.errors.push_back(name + ": " + e.what());
        }
    }
    return res;
}

}  // namespace facediff
