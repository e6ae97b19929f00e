#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/errors.hpp"
#include "facediff/experts.hpp"
#include "facediff/nn_ops.hpp"
#include "facediff/rng.hpp"
#include "facediff/tensor.hpp"

// Condition-token construction (per-modality affine projections into the
// shared d_model space) and multi-head scaled-dot-product cross-attention
// from flattened feature-map queries to the condition tokens. Attention
// output re-enters the feature map through a residual add, so zeroing the
// output projection turns the block into the identity map.

namespace facediff {

enum class Modality { Identity, Parsing, Gaze };

struct ConditionTokens {
    Tensor tokens;                 // [N_tokens, d_model]
    std::vector<Modality> tags;    // one per token
};

struct AttentionParams {
    long n_heads = 4;
    long d_head = 32;
    long query_channels = 0;       // C_l of the feature map this block serves
    // ConcatProj: one affine map per modality into d_model
    Tensor w_id, b_id;             // [d_id, d_model], [d_model]
    Tensor w_parse, b_parse;       // [d_parse, d_model], [d_model]
    Tensor w_gaze, b_gaze;         // [3, d_model], [d_model]
    // attention projections (per-head blocks packed along columns)
    Tensor w_q;                    // [C_l, d_model]
    Tensor w_k, w_v;               // [d_model, d_model]
    Tensor w_o;                    // [d_model, C_l]

    long d_model() const { return n_heads * d_head; }

    void validate() const {
        long dm = d_model();
        auto want = [&](const Tensor& t, std::vector<long> shape, const char* name) {
            if (t.shape() != shape) {
                throw ConfigError(std::string("AttentionParams: ") + name + " has shape " + t.shape_str());
            }
        };
        if (n_heads < 1 || d_head < 1) throw ConfigError("AttentionParams: n_heads and d_head must be >= 1");
        if (w_id.rank() != 2 || w_id.dim(1) != dm) throw ConfigError("AttentionParams: identity projection width mismatch");
        if (w_parse.rank() != 2 || w_parse.dim(1) != dm) throw ConfigError("AttentionParams: parsing projection width mismatch");
        want(w_gaze, {3, dm}, "w_gaze");
        want(b_id, {dm}, "b_id");
        want(b_parse, {dm}, "b_parse");
        want(b_gaze, {dm}, "b_gaze");
        want(w_q, {query_channels, dm}, "w_q");
        want(w_k, {dm, dm}, "w_k");
        want(w_v, {dm, dm}, "w_v");
        want(w_o, {dm, query_channels}, "w_o");
    }
};

/// Graph-side view of the same parameters (leaves or constants).
struct AttentionWeights {
    ad::Value w_id, b_id, w_parse, b_parse, w_gaze, b_gaze;
    ad::Value w_q, w_k, w_v, w_o;
    long n_heads = 4;
    long d_head = 32;
};

inline AttentionWeights as_constants(const AttentionParams& p) {
    AttentionWeights w;
    w.w_id = ad::constant(p.w_id);
    w.b_id = ad::constant(p.b_id);
    w.w_parse = ad::constant(p.w_parse);
    w.b_parse = ad::constant(p.b_parse);
    w.w_gaze = ad::constant(p.w_gaze);
    w.b_gaze = ad::constant(p.b_gaze);
    w.w_q = ad::constant(p.w_q);
    w.w_k = ad::constant(p.w_k);
    w.w_v = ad::constant(p.w_v);
    w.w_o = ad::constant(p.w_o);
    w.n_heads = p.n_heads;
    w.d_head = p.d_head;
    return w;
}

/// Random initialization; the output projection starts at zero so every
/// attention block begins as the identity map.
inline AttentionParams init_attention_params(long query_channels, long d_id, long d_parse,
                                             long n_heads, long d_head, Rng& rng) {
    AttentionParams p;
    p.n_heads = n_heads;
    p.d_head = d_head;
    p.query_channels = query_channels;
    long dm = p.d_model();
    auto init = [&rng](std::vector<long> shape) {
        Tensor t(std::move(shape));
        double stddev = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
        rng.fill_normal(t, stddev);
        return t;
    };
    p.w_id = init({d_id, dm});
    p.b_id = Tensor({dm});
    p.w_parse = init({d_parse, dm});
    p.b_parse = Tensor({dm});
    p.w_gaze = init({3, dm});
    p.b_gaze = Tensor({dm});
    p.w_q = init({query_channels, dm});
    p.w_k = init({dm, dm});
    p.w_v = init({dm, dm});
    p.w_o = Tensor({dm, query_channels});
    return p;
}

/// Which modalities to keep when building tokens (ablation switches).
struct TokenFilter {
    bool identity = true;
    bool parsing = true;
    bool gaze = true;

    bool any() const { return identity || parsing || gaze; }
};

/// Token sequence [identity, parse_1..parse_N, gaze] filtered by `keep`,
/// each token an affine projection of exactly one modality embedding.
inline ad::Value concat_project_g(const ConditionBundle& bundle, const AttentionWeights& w,
                                  const TokenFilter& keep, std::vector<Modality>* tags_out = nullptr) {
    if (!keep.any()) throw ConfigError("concat_project: all condition modalities disabled");
    std::vector<ad::Value> rows;
    std::vector<Modality> tags;
    if (keep.identity) {
        auto e = ad::constant(bundle.e_id);
        rows.push_back(ad::linear(ad::reshape(e, {1, bundle.e_id.numel()}), w.w_id, w.b_id));
        tags.push_back(Modality::Identity);
    }
    if (keep.parsing) {
        auto e = ad::constant(bundle.e_parse);
        rows.push_back(ad::linear(e, w.w_parse, w.b_parse));
        for (long r = 0; r < bundle.e_parse.dim(0); ++r) tags.push_back(Modality::Parsing);
    }
    if (keep.gaze) {
        auto e = ad::constant(bundle.e_gaze);
        rows.push_back(ad::linear(ad::reshape(e, {1, 3}), w.w_gaze, w.b_gaze));
        tags.push_back(Modality::Gaze);
    }
    if (tags_out) *tags_out = tags;
    return ad::concat_rows(rows);
}

inline ConditionTokens concat_project(const ConditionBundle& bundle, const AttentionParams& params) {
    params.validate();
    if (bundle.e_id.numel() != params.w_id.dim(0)) {
        throw ConfigError("concat_project: identity embedding width " + std::to_string(bundle.e_id.numel()) +
                          " does not match projection input " + std::to_string(params.w_id.dim(0)));
    }
    if (bundle.e_parse.rank() != 2 || bundle.e_parse.dim(1) != params.w_parse.dim(0)) {
        throw ConfigError("concat_project: parsing token width mismatch");
    }
    if (bundle.e_gaze.numel() != 3) throw ConfigError("concat_project: gaze embedding must be a 3-vector");
    ad::NoGradGuard ng;
    ConditionTokens out;
    auto w = as_constants(params);
    out.tokens = concat_project_g(bundle, w, TokenFilter{}, &out.tags)->val;
    return out;
}

/// Multi-head cross-attention: queries are the flattened spatial positions
/// of F [C,H,W], keys/values come from the tokens, softmax temperature is
/// sqrt(d_head), heads are concatenated, projected by w_o and added
/// residually. Optionally collects per-head attention maps [HW, N].
inline ad::Value cross_attention_g(const ad::Value& feature, const ad::Value& tokens, const AttentionWeights& w,
                                   std::vector<Tensor>* attn_maps = nullptr) {
    if (feature->val.rank() != 3) throw DimensionError("cross_attention: feature map must be [C,H,W]");
    if (!tokens->val.all_finite()) throw NumericError("cross_attention: non-finite condition tokens");
    long H = feature->val.dim(1), W = feature->val.dim(2);

    auto x = ad::chw_to_hwc(feature);                     // [HW, C]
    auto q = ad::matmul(x, w.w_q);                        // [HW, dm]
    auto k = ad::matmul(tokens, w.w_k);                   // [N, dm]
    auto v = ad::matmul(tokens, w.w_v);                   // [N, dm]

    double temp = 1.0 / std::sqrt(static_cast<double>(w.d_head));
    std::vector<ad::Value> head_outs;
    for (long h = 0; h < w.n_heads; ++h) {
        auto qh = ad::slice_cols(q, h * w.d_head, w.d_head);
        auto kh = ad::slice_cols(k, h * w.d_head, w.d_head);
        auto vh = ad::slice_cols(v, h * w.d_head, w.d_head);
        auto scores = ad::mul_scalar(ad::matmul_nt(qh, kh), temp);  // [HW, N]
        auto attn = ad::softmax_rows(scores);
        if (attn_maps) attn_maps->push_back(attn->val);
        head_outs.push_back(ad::matmul(attn, vh));                  // [HW, d_head]
    }
    auto merged = w.n_heads == 1 ? head_outs[0] : ad::concat_cols(head_outs);  // [HW, dm]
    auto projected = ad::matmul(merged, w.w_o);                                // [HW, C]
    return ad::add(feature, ad::hwc_to_chw(projected, H, W));
}

inline ImageTensor cross_attention(const Tensor& feature, const ConditionTokens& tokens,
                                   const AttentionParams& params, std::vector<Tensor>* attn_maps = nullptr) {
    params.validate();
    if (feature.rank() != 3 || feature.dim(0) != params.query_channels) {
        throw DimensionError("cross_attention: feature map " + feature.shape_str() + " does not match query width " +
                             std::to_string(params.query_channels));
    }
    if (tokens.tokens.rank() != 2 || tokens.tokens.dim(1) != params.d_model()) {
        throw DimensionError("cross_attention: token width mismatch");
    }
    ad::NoGradGuard ng;
    auto w = as_constants(params);
    return cross_attention_g(ad::constant(feature), ad::constant(tokens.tokens), w, attn_maps)->val;
}

}  // namespace facediff
