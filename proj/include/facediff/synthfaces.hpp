#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "facediff/errors.hpp"
#include "facediff/image_io.hpp"
#include "facediff/rng.hpp"
#include "facediff/tensor.hpp"

// Procedural face generator with exact labels (identity parameters, region
// masks, gaze). Faces are ellipse-and-shape compositions over a seeded
// textured background; geometry is controlled by an 8-dim identity vector
// while pose/gaze/lighting vary freely without touching identity geometry.

namespace facediff {

enum class Region : int { Skin = 0, Eyes = 1, Nose = 2, Mouth = 3, Background = 4 };
constexpr int kNumRegions = 5;
inline const char* region_name(int r) {
    static const char* names[kNumRegions] = {"skin", "eyes", "nose", "mouth", "background"};
    return names[r];
}

struct FaceParams {
    std::array<double, 8> identity_vector{};  // each in [-1, 1]
    double pose_yaw = 0.0;                    // radians, [-0.5, 0.5]
    std::array<double, 3> gaze{0.0, 0.0, 1.0};  // unit, z > 0
    double lighting = 1.0;                    // [0.5, 1.5]
    std::uint64_t background_seed = 0;

    void validate() const {
        for (size_t i = 0; i < identity_vector.size(); ++i) {
            if (!(identity_vector[i] >= -1.0 && identity_vector[i] <= 1.0)) {
                throw ContractError("FaceParams: identity_vector[" + std::to_string(i) + "] outside [-1, 1]");
            }
        }
        if (!(pose_yaw >= -0.5 && pose_yaw <= 0.5)) throw ContractError("FaceParams: pose_yaw outside [-0.5, 0.5]");
        double n = std::sqrt(gaze[0] * gaze[0] + gaze[1] * gaze[1] + gaze[2] * gaze[2]);
        if (std::abs(n - 1.0) > 1e-6) throw ContractError("FaceParams: gaze must be a unit vector");
        if (gaze[2] <= 0.0) throw ContractError("FaceParams: gaze must point toward the camera (z > 0)");
        if (!(lighting >= 0.5 && lighting <= 1.5)) throw ContractError("FaceParams: lighting outside [0.5, 1.5]");
    }
};

struct LabeledFace {
    ImageTensor image;       // [3,S,S] in [-1,1]
    FaceParams params;
    Tensor gt_masks;         // [5,S,S] binary, disjoint, covering
    std::array<double, 3> gt_gaze{};
};

namespace synth_detail {

// deterministic 64-bit hash -> [0,1)
inline double hash01(std::uint64_t x) {
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ULL;
    x ^= x >> 33;
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

struct Geometry {
    double cx, cy;            // oval center
    double a, b;              // oval half-axes
    double eye_y, eye_dx;     // eye row and half-spacing (from oval center)
    double eye_rx_l, eye_rx_r, eye_ry;
    double eye_shift;         // lateral eye offset from yaw
    double pupil_r, pupil_du, pupil_dv;
    double nose_y, nose_rx, nose_ry;
    double mouth_y, mouth_rx, mouth_ry;
    std::array<double, 3> skin, sclera, pupil, nose_c, mouth_c;
};

inline Geometry face_geometry(const FaceParams& p) {
    const auto& iv = p.identity_vector;
    Geometry g;
    double yaw = std::sin(p.pose_yaw);
    double shift = 0.30 * yaw;

    g.a = (0.60 + 0.08 * iv[0]) * (1.0 - 0.10 * std::abs(yaw));
    g.b = 0.74 + 0.08 * iv[1];
    g.cx = 0.5 * shift;
    g.cy = 0.02;

    g.eye_y = g.cy - 0.24 * g.b / 0.74;
    g.eye_dx = g.a * (0.38 + 0.07 * iv[2]);
    double er = 0.105 + 0.025 * iv[3];
    g.eye_rx_l = er * (1.0 + 0.35 * yaw);
    g.eye_rx_r = er * (1.0 - 0.35 * yaw);
    g.eye_ry = 0.62 * er;
    g.eye_shift = 0.40 * shift;

    g.pupil_r = 0.50 * er;
    double gz = std::max(p.gaze[2], 0.35);
    g.pupil_du = std::clamp(0.60 * er * p.gaze[0] / gz, -0.55 * er, 0.55 * er);
    g.pupil_dv = std::clamp(0.60 * er * p.gaze[1] / gz, -0.45 * er, 0.45 * er);

    g.nose_y = g.cy + 0.10;
    g.nose_rx = 0.10 + 0.04 * iv[4];
    g.nose_ry = 0.15;

    g.mouth_y = g.cy + 0.40 * g.b / 0.74;
    g.mouth_rx = (0.26 + 0.08 * iv[5]) * 0.55;
    g.mouth_ry = 0.055;

    double tone = 0.42 + 0.14 * iv[6];
    double hue = iv[7];
    g.skin = {tone + 0.08 + 0.04 * hue, tone * 0.85, tone * 0.72 - 0.03 * hue};
    g.sclera = {0.62, 0.62, 0.60};
    g.pupil = {0.055, 0.05, 0.05};
    g.nose_c = {g.skin[0] * 0.80, g.skin[1] * 0.80, g.skin[2] * 0.80};
    g.mouth_c = {0.42, 0.15, 0.15};
    return g;
}

inline bool in_ellipse(double u, double v, double cx, double cy, double rx, double ry) {
    double du = (u - cx) / rx, dv = (v - cy) / ry;
    return du * du + dv * dv <= 1.0;
}

/// Region of a point in normalized coordinates (priority ordering).
inline Region classify(const Geometry& g, double u, double v) {
    double exl = g.cx - g.eye_dx + g.eye_shift;
    double exr = g.cx + g.eye_dx + g.eye_shift;
    if (in_ellipse(u, v, exl, g.eye_y, g.eye_rx_l, g.eye_ry) ||
        in_ellipse(u, v, exr, g.eye_y, g.eye_rx_r, g.eye_ry)) {
        return Region::Eyes;
    }
    if (in_ellipse(u, v, g.cx + 0.3 * g.eye_shift, g.nose_y, g.nose_rx, g.nose_ry)) return Region::Nose;
    if (in_ellipse(u, v, g.cx + 0.3 * g.eye_shift, g.mouth_y, g.mouth_rx, g.mouth_ry)) return Region::Mouth;
    if (in_ellipse(u, v, g.cx, g.cy, g.a, g.b)) return Region::Skin;
    return Region::Background;
}

/// Background color at a point: smooth value-noise plus fine hash texture.
inline std::array<double, 3> background_color(std::uint64_t seed, double u, double v, long py, long px) {
    // 5x5 lattice of seeded values, bilinear interpolation
    double fu = (u + 1.0) * 0.5 * 4.0;
    double fv = (v + 1.0) * 0.5 * 4.0;
    long iu = std::clamp(static_cast<long>(std::floor(fu)), 0L, 3L);
    long iv_ = std::clamp(static_cast<long>(std::floor(fv)), 0L, 3L);
    double wu = fu - static_cast<double>(iu), wv = fv - static_cast<double>(iv_);
    auto lattice = [&](long yy, long xx) {
        return 0.18 + 0.24 * hash01(seed * 31 + static_cast<std::uint64_t>(yy * 5 + xx) + 1);
    };
    double val = (1 - wv) * ((1 - wu) * lattice(iv_, iu) + wu * lattice(iv_, iu + 1)) +
                 wv * ((1 - wu) * lattice(iv_ + 1, iu) + wu * lattice(iv_ + 1, iu + 1));
    // fine texture so backgrounds carry local contrast
    val += 0.05 * (hash01(seed ^ (static_cast<std::uint64_t>(py) << 21) ^ static_cast<std::uint64_t>(px)) - 0.5);
    val = std::clamp(val, 0.05, 0.6);
    return {0.85 * val, 0.90 * val, val + 0.05};
}

inline std::array<double, 3> shade(const Geometry& g, std::uint64_t bg_seed, double u, double v, long py, long px) {
    double exl = g.cx - g.eye_dx + g.eye_shift;
    double exr = g.cx + g.eye_dx + g.eye_shift;
    // pupils sit inside the eye ellipses, offset by gaze, clipped to the eye
    if (in_ellipse(u, v, exl, g.eye_y, g.eye_rx_l, g.eye_ry) &&
        in_ellipse(u, v, exl + g.pupil_du, g.eye_y + g.pupil_dv, g.pupil_r, g.pupil_r)) {
        return g.pupil;
    }
    if (in_ellipse(u, v, exr, g.eye_y, g.eye_rx_r, g.eye_ry) &&
        in_ellipse(u, v, exr + g.pupil_du, g.eye_y + g.pupil_dv, g.pupil_r, g.pupil_r)) {
        return g.pupil;
    }
    switch (classify(g, u, v)) {
        case Region::Eyes:
            return g.sclera;
        case Region::Nose:
            return g.nose_c;
        case Region::Mouth:
            return g.mouth_c;
        case Region::Skin: {
            // soft radial falloff toward the oval rim
            double du = (u - g.cx) / g.a, dv = (v - g.cy) / g.b;
            double r2 = du * du + dv * dv;
            double f = 1.0 - 0.18 * r2;
            return {g.skin[0] * f, g.skin[1] * f, g.skin[2] * f};
        }
        case Region::Background:
        default:
            return background_color(bg_seed, u, v, py, px);
    }
}

}  // namespace synth_detail

/// Deterministic rasterization. Image colors are anti-aliased by 3x3
/// supersampling; masks are binary by pixel-center classification, disjoint
/// by priority (eyes > nose > mouth > skin > background) and cover the image.
inline LabeledFace render_face(const FaceParams& params, long size) {
    if (size < 16) throw ContractError("render_face: size must be >= 16, got " + std::to_string(size));
    params.validate();
    synth_detail::Geometry g = synth_detail::face_geometry(params);

    LabeledFace face;
    face.params = params;
    face.gt_gaze = params.gaze;
    face.image = ImageTensor({3, size, size});
    face.gt_masks = Tensor({kNumRegions, size, size});

    const int ss = 3;  // supersampling grid
    double inv = 1.0 / static_cast<double>(size);
    for (long y = 0; y < size; ++y) {
        for (long x = 0; x < size; ++x) {
            std::array<double, 3> acc{0.0, 0.0, 0.0};
            for (int sy = 0; sy < ss; ++sy) {
                for (int sx = 0; sx < ss; ++sx) {
                    double u = ((static_cast<double>(x) + (sx + 0.5) / ss) * inv) * 2.0 - 1.0;
                    double v = ((static_cast<double>(y) + (sy + 0.5) / ss) * inv) * 2.0 - 1.0;
                    auto c = synth_detail::shade(g, params.background_seed, u, v, y, x);
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            }
            for (int k = 0; k < 3; ++k) {
                double c01 = std::clamp(acc[k] / (ss * ss) * params.lighting, 0.0, 1.0);
                face.image.at3(k, y, x) = 2.0 * c01 - 1.0;
            }
            double uc = ((static_cast<double>(x) + 0.5) * inv) * 2.0 - 1.0;
            double vc = ((static_cast<double>(y) + 0.5) * inv) * 2.0 - 1.0;
            int region = static_cast<int>(synth_detail::classify(g, uc, vc));
            face.gt_masks.at3(region, y, x) = 1.0;
        }
    }
    return face;
}

struct SynthDataset {
    std::vector<LabeledFace> faces;
    std::vector<int> identity_index;  // per face, into identities
    std::vector<std::array<double, 8>> identities;
};

/// Draw n_identities identity vectors, then n faces sampling (identity,
/// pose, gaze, lighting, background) from the seed. Fully deterministic.
inline SynthDataset make_dataset(long n, long n_identities, std::uint64_t seed, long size) {
    if (n_identities < 1) throw ContractError("make_dataset: n_identities must be >= 1");
    if (n < n_identities) throw ContractError("make_dataset: n must be >= n_identities");
    Rng rng(seed);
    SynthDataset ds;
    for (long k = 0; k < n_identities; ++k) {
        std::array<double, 8> iv{};
        for (auto& v : iv) v = rng.uniform(-1.0, 1.0);
        ds.identities.push_back(iv);
    }
    for (long i = 0; i < n; ++i) {
        FaceParams p;
        int idx = static_cast<int>(rng.uniform_int(0, n_identities - 1));
        p.identity_vector = ds.identities[static_cast<size_t>(idx)];
        p.pose_yaw = rng.uniform(-0.5, 0.5);
        double gx, gy;
        do {
            gx = rng.uniform(-0.7, 0.7);
            gy = rng.uniform(-0.7, 0.7);
        } while (gx * gx + gy * gy > 0.49);
        double gz = std::sqrt(1.0 - gx * gx - gy * gy);
        double norm = std::sqrt(gx * gx + gy * gy + gz * gz);
        p.gaze = {gx / norm, gy / norm, gz / norm};
        p.lighting = rng.uniform(0.5, 1.5);
        p.background_seed = rng.next_u64();
        ds.faces.push_back(render_face(p, size));
        ds.identity_index.push_back(idx);
    }
    return ds;
}

/// Export as PNGs plus a sidecar manifest, one line per image:
/// filename identity_index pose_yaw gaze_x gaze_y gaze_z lighting
inline void export_dataset(const SynthDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw IoError("export_dataset: cannot write manifest in " + dir);
    manifest.precision(17);
    for (size_t i = 0; i < ds.faces.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "face_%05zu.png", i);
        write_png_rgb8((fs::path(dir) / name).string(), ds.faces[i].image);
        const auto& p = ds.faces[i].params;
        manifest << name << ' ' << ds.identity_index[i] << ' ' << p.pose_yaw << ' ' << p.gaze[0] << ' '
                 << p.gaze[1] << ' ' << p.gaze[2] << ' ' << p.lighting << '\n';
    }
}

struct ManifestRecord {
    std::string filename;
    int identity_index = 0;
    double pose_yaw = 0.0;
    std::array<double, 3> gaze{};
    double lighting = 1.0;
};

inline std::vector<ManifestRecord> read_manifest(const std::string& dir) {
    std::ifstream in(std::filesystem::path(dir) / "manifest.txt");
    if (!in) throw IoError("read_manifest: cannot open manifest in " + dir);
    std::vector<ManifestRecord> records;
    ManifestRecord r;
    while (in >> r.filename >> r.identity_index >> r.pose_yaw >> r.gaze[0] >> r.gaze[1] >> r.gaze[2] >> r.lighting) {
        records.push_back(r);
    }
    return records;
}

}  // namespace facediff
