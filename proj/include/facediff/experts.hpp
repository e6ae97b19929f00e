#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/errors.hpp"
#include "facediff/nn_ops.hpp"
#include "facediff/rng.hpp"
#include "facediff/synthfaces.hpp"
#include "facediff/tensor.hpp"

// Frozen surrogate encoders standing in for the pretrained identity /
// parsing / gaze experts. Weights are a pure function of surrogate_seed,
// every encoder is deterministic and differentiable in the image, and none
// of the weights participate in training.
//
// The identity path standardizes its input (so global lighting cancels) and
// pools conv features under a center-weighted window; the parsing and gaze
// paths combine fixed blob/edge responses with spatial gates so that the
// region channels fire on the structures they are named after.

namespace facediff {

struct ExpertConfig {
    long d_id = 128;
    long d_parse = 64;
    long n_regions = 5;
    std::uint64_t surrogate_seed = 7;
    long image_size = 32;  // expected input resolution; set by the trainer

    void validate() const {
        if (d_id < 1) throw ConfigError("ExpertConfig: d_id must be >= 1");
        if (d_parse < 1) throw ConfigError("ExpertConfig: d_parse must be >= 1");
        if (n_regions < 1) throw ConfigError("ExpertConfig: n_regions must be >= 1");
        if (image_size < 16 || image_size % 4 != 0) {
            throw ConfigError("ExpertConfig: image_size must be >= 16 and divisible by 4");
        }
    }
};

/// Conditioning payload for one source image.
struct ConditionBundle {
    Tensor e_id;          // [d_id], unit norm
    Tensor e_parse;       // [n_regions, d_parse]
    Tensor region_masks;  // [n_regions, S, S], per-pixel scores summing to 1
    Tensor e_gaze;        // [3], unit norm
};

class ExpertEncoders {
public:
    explicit ExpertEncoders(const ExpertConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.surrogate_seed);
        long S = cfg_.image_size;

        auto conv_init = [&rng](std::vector<long> shape) {
            Tensor w(std::move(shape));
            double stddev = 1.0 / std::sqrt(static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3)));
            rng.fill_normal(w, stddev);
            return w;
        };
        wi1_ = conv_init({12, 3, 3, 3});
        wi2_ = conv_init({24, 12, 3, 3});
        wid_out_ = Tensor({36, cfg_.d_id});
        rng.fill_normal(wid_out_, 1.0 / 6.0);
        // tiny fixed direction keeping the embedding defined on constant
        // images (projection would be exactly zero there)
        id_floor_ = Tensor({cfg_.d_id});
        rng.fill_normal(id_floor_);
        double fn = 0.0;
        for (long i = 0; i < id_floor_.numel(); ++i) fn += id_floor_[i] * id_floor_[i];
        fn = std::sqrt(fn);
        for (long i = 0; i < id_floor_.numel(); ++i) id_floor_[i] *= 1e-6 / fn;

        wp1_ = conv_init({16, 3, 3, 3});
        wp2_ = conv_init({cfg_.d_parse, 16, 3, 3});

        axis_gain_ = Tensor({2, 1});
        axis_gain_[0] = 15.0;
        axis_gain_[1] = 8.0;
        gaze_mix_ = Tensor({2, 2});
        gaze_mix_[0] = 1.0 + 0.05 * rng.normal();
        gaze_mix_[1] = 0.05 * rng.normal();
        gaze_mix_[2] = 0.05 * rng.normal();
        gaze_mix_[3] = 1.0 + 0.05 * rng.normal();

        lum_w_ = Tensor({1, 3, 1, 1});
        lum_w_[0] = lum_w_[1] = lum_w_[2] = 1.0 / 3.0;
        box3_ = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
        box7_ = Tensor::full({1, 1, 7, 7}, 1.0 / 49.0);

        // coordinate and gate maps in normalized [-1,1] coordinates
        coord_u_ = Tensor({S, S});
        coord_v_ = Tensor({S, S});
        prior_eye_ = Tensor({S, S});
        prior_gaze_band_ = Tensor({S, S});
        band_left_ = Tensor({S, S});
        band_right_ = Tensor({S, S});
        prior_nose_ = Tensor({S, S});
        prior_mouth_ = Tensor({S, S});
        prior_border_ = Tensor({S, S});
        for (long y = 0; y < S; ++y) {
            for (long x = 0; x < S; ++x) {
                double u = (static_cast<double>(x) + 0.5) / static_cast<double>(S) * 2.0 - 1.0;
                double v = (static_cast<double>(y) + 0.5) / static_cast<double>(S) * 2.0 - 1.0;
                long i = y * S + x;
                coord_u_[i] = u;
                coord_v_[i] = v;
                // lateral face-interior gate: suppresses background flanks
                double face_gate = std::exp(-std::pow(u / 0.50, 4.0));
                double du = (std::abs(u) - 0.26) / 0.16;
                double dv = (v + 0.21) / 0.14;
                prior_eye_[i] = std::exp(-du * du - dv * dv) * face_gate;
                double gu = u / 0.33, gv = (v + 0.22) / 0.16;
                prior_gaze_band_[i] = std::exp(-gu * gu * gu * gu - gv * gv);
                // flat-top per-side gates: constant weight across the whole
                // eye so compact (pupil) and extended (sclera) masses feel
                // the same gate and centroid differences isolate the pupil
                auto sig = [](double t) { return 1.0 / (1.0 + std::exp(-t)); };
                double vq = (v + 0.22) / 0.20;
                double vgate = std::exp(-vq * vq * vq * vq);
                band_right_[i] = sig((u - 0.07) / 0.025) * sig((0.44 - u) / 0.03) * vgate;
                band_left_[i] = sig((-u - 0.07) / 0.025) * sig((0.44 + u) / 0.03) * vgate;
                double nu = u / 0.22, nv = (v - 0.12) / 0.20;
                prior_nose_[i] = std::exp(-nu * nu - nv * nv);
                double mu = u / 0.30, mv = (v - 0.42) / 0.18;
                prior_mouth_[i] = std::exp(-mu * mu - mv * mv) * face_gate;
                double rr = u * u / (0.80 * 0.80) + v * v / (0.92 * 0.92);
                prior_border_[i] = 1.0 - std::exp(-std::pow(rr, 3.0));
            }
        }
        long Sh = S / 2, Sq = S / 4;
        pool_half_ = make_center_gauss(Sh, 0.55);
        pool_quarter_ = make_center_gauss(Sq, 0.45);
    }

    const ExpertConfig& config() const { return cfg_; }

    // ---- graph builders (differentiable in the image) -------------------

    ad::Value encode_identity_g(const ad::Value& image) const {
        auto z = ad::standardize(image);
        auto x = ad::reshape(z, {1, 3, cfg_.image_size, cfg_.image_size});
        auto h1 = ad::tanh_(ad::conv2d(x, ad::constant(wi1_), nullptr, 1, 1));
        auto p1 = ad::avg_pool2d(h1, 2);
        auto h2 = ad::tanh_(ad::conv2d(p1, ad::constant(wi2_), nullptr, 1, 1));
        auto p2 = ad::avg_pool2d(h2, 2);
        long Sh = cfg_.image_size / 2, Sq = cfg_.image_size / 4;
        auto f_deep = ad::weighted_pool(ad::reshape(p2, {24, Sq, Sq}), pool_quarter_);
        auto f_mid = ad::weighted_pool(ad::reshape(p1, {12, Sh, Sh}), pool_half_);
        auto feat = ad::concat_rows({ad::reshape(f_deep, {24, 1}), ad::reshape(f_mid, {12, 1})});
        auto proj = ad::matmul(ad::constant(wid_out_t()), feat);  // [d_id, 1]
        auto shifted = ad::add(ad::reshape(proj, {cfg_.d_id}), ad::constant(id_floor_));
        return ad::l2_normalize(shifted);
    }

    /// (tokens [n_regions, d_parse], masks [n_regions, S, S])
    std::pair<ad::Value, ad::Value> encode_parsing_g(const ad::Value& image) const {
        long S = cfg_.image_size;
        auto z = ad::standardize(image);
        auto x = ad::reshape(z, {1, 3, S, S});

        auto h = ad::tanh_(ad::conv2d(x, ad::constant(wp1_), nullptr, 1, 1));
        auto featmap = ad::reshape(ad::tanh_(ad::conv2d(h, ad::constant(wp2_), nullptr, 1, 1)),
                                   {cfg_.d_parse, S, S});

        auto logits = region_logits(x);  // [n_regions, S, S]
        auto masks = ad::softmax_channels(logits);

        std::vector<ad::Value> tokens;
        long plane = S * S;
        auto masks_mat = ad::reshape(masks, {cfg_.n_regions, plane});
        for (long r = 0; r < cfg_.n_regions; ++r) {
            auto row = slice_rows(masks_mat, r);                        // [1, plane]
            auto mask_img = ad::reshape(row, {S, S});
            auto tok = ad::masked_pool(featmap, mask_img);              // [d_parse]
            tokens.push_back(ad::reshape(tok, {1, cfg_.d_parse}));
        }
        return {ad::concat_rows(tokens), masks};
    }

    ad::Value encode_gaze_g(const ad::Value& image) const {
        long S = cfg_.image_size;
        auto z = ad::standardize(image);
        auto x = ad::reshape(z, {1, 3, S, S});
        auto lum = ad::reshape(ad::conv2d(x, ad::constant(lum_w_), nullptr, 1, 0), {S, S});

        // Soft-argmin/argmax of luminance inside each eye's half of the eye
        // band: the pupil is the darkest in-band structure, the sclera the
        // brightest, so the per-eye centroid difference tracks the pupil
        // offset. Side-separated so one eye cannot capture both centroids.
        auto coords = ad::constant(coord_stack());  // [2,S,S]
        auto dark_w = ad::exp_(ad::mul_scalar(lum, -5.0));
        auto bright_w = ad::exp_(ad::mul_scalar(lum, 5.0));
        std::vector<ad::Value> deltas;
        for (const Tensor& side : {band_left_, band_right_}) {
            auto wd = ad::mul(dark_w, ad::constant(side));
            auto wb = ad::mul(bright_w, ad::constant(side));
            auto cd = ad::masked_pool(coords, wd);  // [2]
            auto cb = ad::masked_pool(coords, wb);
            deltas.push_back(ad::sub(cd, cb));
        }
        auto delta = ad::axpby(0.5, deltas[0], 0.5, deltas[1]);
        auto mixed = ad::matmul(ad::constant(gaze_mix_), ad::reshape(delta, {2, 1}));  // [2,1]
        // horizontal pupil travel is well resolved at desk resolution, the
        // vertical one is sub-pixel; weight accordingly before normalizing
        auto scaled = ad::mul(mixed, ad::constant(axis_gain_));
        auto zc = ad::constant(Tensor::full({1, 1}, 0.25));
        auto raw = ad::concat_rows({scaled, zc});             // [3,1]
        return ad::l2_normalize(ad::reshape(raw, {3}));
    }

    // ---- plain-tensor API ------------------------------------------------

    Tensor encode_identity(const ImageTensor& image) const {
        Tensor img = validated(image);
        ad::NoGradGuard ng;
        return encode_identity_g(ad::constant(img))->val;
    }

    std::pair<Tensor, Tensor> encode_parsing(const ImageTensor& image) const {
        Tensor img = validated(image);
        ad::NoGradGuard ng;
        auto [tokens, masks] = encode_parsing_g(ad::constant(img));
        return {tokens->val, masks->val};
    }

    Tensor encode_gaze(const ImageTensor& image) const {
        Tensor img = validated(image);
        ad::NoGradGuard ng;
        return encode_gaze_g(ad::constant(img))->val;
    }

    ConditionBundle build_condition(const ImageTensor& source) const {
        ConditionBundle b;
        b.e_id = encode_identity(source);
        auto pm = encode_parsing(source);
        b.e_parse = pm.first;
        b.region_masks = pm.second;
        b.e_gaze = encode_gaze(source);
        return b;
    }

    /// Accepts [3,S,S] or [1,3,S,S] at the configured size.
    Tensor validated(const ImageTensor& image) const {
        long S = cfg_.image_size;
        if (image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 3 && image.dim(2) == S && image.dim(3) == S) {
            Tensor out({3, S, S});
            for (long i = 0; i < out.numel(); ++i) out[i] = image[i];
            return out;
        }
        if (image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == S && image.dim(2) == S) return image;
        throw DimensionError("expert encoder: expected [3," + std::to_string(S) + "," + std::to_string(S) +
                             "] image, got " + image.shape_str());
    }

private:
    static Tensor make_center_gauss(long S, double sigma) {
        Tensor w({S, S});
        for (long y = 0; y < S; ++y) {
            for (long x = 0; x < S; ++x) {
                double u = (static_cast<double>(x) + 0.5) / static_cast<double>(S) * 2.0 - 1.0;
                double v = (static_cast<double>(y) + 0.5) / static_cast<double>(S) * 2.0 - 1.0;
                w[y * S + x] = std::exp(-(u * u + v * v) / (2.0 * sigma * sigma));
            }
        }
        return w;
    }

    Tensor wid_out_t() const {
        Tensor t({cfg_.d_id, 36});
        for (long i = 0; i < 36; ++i) {
            for (long j = 0; j < cfg_.d_id; ++j) t[j * 36 + i] = wid_out_[i * cfg_.d_id + j];
        }
        return t;
    }


    Tensor coord_stack() const {
        long S = cfg_.image_size;
        Tensor c({2, S, S});
        for (long i = 0; i < S * S; ++i) {
            c[i] = coord_u_[i];
            c[S * S + i] = coord_v_[i];
        }
        return c;
    }

    /// Row r of a matrix as [1, cols].
    static ad::Value slice_rows(const ad::Value& m, long r) {
        long cols = m->val.dim(1);
        Tensor out({1, cols});
        for (long j = 0; j < cols; ++j) out[j] = m->val[r * cols + j];
        return ad::make_node(std::move(out), {m}, [m, r, cols](ad::Node& n) {
            m->ensure_grad();
            for (long j = 0; j < cols; ++j) m->grad[r * cols + j] += n.grad[j];
        });
    }

    /// Region score logits from fixed blob/edge features, all strictly
    /// feature-gated so a constant image yields exactly uniform scores.
    ad::Value region_logits(const ad::Value& x4) const {
        long S = cfg_.image_size;
        auto lum = ad::conv2d(x4, ad::constant(lum_w_), nullptr, 1, 0);
        auto b3 = ad::conv2d(lum, ad::constant(box3_), nullptr, 1, 1);
        auto b7 = ad::conv2d(lum, ad::constant(box7_), nullptr, 1, 3);
        auto dark = ad::reshape(ad::sub(b7, b3), {S, S});
        // smooth |.| that is exactly zero at zero, so constant images give
        // exactly uniform region scores
        auto blob = ad::add_scalar(ad::smooth_abs(dark, 1e-4), -1e-2);

        // local gradient energy (smooth): central differences via fixed convs
        Tensor kx({1, 1, 3, 3}), ky({1, 1, 3, 3});
        kx[3] = -0.5;
        kx[5] = 0.5;
        ky[1] = -0.5;
        ky[7] = 0.5;
        auto gx = ad::conv2d(lum, ad::constant(kx), nullptr, 1, 1);
        auto gy = ad::conv2d(lum, ad::constant(ky), nullptr, 1, 1);
        auto edge = ad::reshape(ad::add(ad::mul(gx, gx), ad::mul(gy, gy)), {S, S});

        auto gatec = [&](const ad::Value& f, const Tensor& prior, double gain) {
            return ad::mul_scalar(ad::mul(f, ad::constant(prior)), gain);
        };
        std::vector<ad::Value> parts;
        // order: skin, eyes, nose, mouth, background
        Tensor face_prior({S, S});
        for (long i = 0; i < S * S; ++i) face_prior[i] = 1.0 - prior_border_[i];
        parts.push_back(ad::reshape(gatec(blob, neg_of(face_prior), 1.5), {1, S * S}));  // skin: smooth face interior
        parts.push_back(ad::reshape(gatec(blob, prior_eye_, 9.0), {1, S * S}));
        parts.push_back(ad::reshape(gatec(blob, prior_nose_, 3.0), {1, S * S}));
        parts.push_back(ad::reshape(gatec(blob, prior_mouth_, 4.0), {1, S * S}));
        parts.push_back(ad::reshape(gatec(edge, prior_border_, 3.0), {1, S * S}));
        // n_regions beyond the 5 semantic channels get zero logits
        for (long r = 5; r < cfg_.n_regions; ++r) {
            parts.push_back(ad::constant(Tensor({1, S * S})));
        }
        if (cfg_.n_regions < 5) parts.resize(static_cast<size_t>(cfg_.n_regions));
        return ad::reshape(ad::concat_rows(parts), {cfg_.n_regions, S, S});
    }

    static Tensor neg_of(const Tensor& t) {
        Tensor o(t.shape());
        for (long i = 0; i < t.numel(); ++i) o[i] = -t[i];
        return o;
    }

    ExpertConfig cfg_;
    Tensor wi1_, wi2_, wid_out_, id_floor_;
    Tensor wp1_, wp2_;
    Tensor gaze_mix_, axis_gain_;
    Tensor lum_w_, box3_, box7_;
    Tensor coord_u_, coord_v_;
    Tensor prior_eye_, prior_gaze_band_, band_left_, band_right_, prior_nose_, prior_mouth_, prior_border_;
    Tensor pool_half_, pool_quarter_;
};

}  // namespace facediff
