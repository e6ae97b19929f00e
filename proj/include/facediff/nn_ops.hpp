#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <vector>

#include "facediff/autodiff.hpp"

// Matrix, convolution and normalization ops for the autodiff graph.
// Heavy lifting (GEMM) goes through Eigen; convolutions are im2col + GEMM
// and the backward pass recomputes the column buffer instead of caching it.

namespace facediff::ad {

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// out[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(const double* a, const double* b, double* out, long m, long k, long n, bool accumulate) {
    ECMap A(a, m, k), B(b, k, n);
    EMap O(out, m, n);
    if (accumulate) {
        O.noalias() += A * B;
    } else {
        O.noalias() = A * B;
    }
}

// out[M,N] (+)= A[M,K] * B[N,K]^T
inline void gemm_nt(const double* a, const double* b, double* out, long m, long k, long n, bool accumulate) {
    ECMap A(a, m, k), B(b, n, k);
    EMap O(out, m, n);
    if (accumulate) {
        O.noalias() += A * B.transpose();
    } else {
        O.noalias() = A * B.transpose();
    }
}

// out[M,N] (+)= A[K,M]^T * B[K,N]
inline void gemm_tn(const double* a, const double* b, double* out, long m, long k, long n, bool accumulate) {
    ECMap A(a, k, m), B(b, k, n);
    EMap O(out, m, n);
    if (accumulate) {
        O.noalias() += A.transpose() * B;
    } else {
        O.noalias() = A.transpose() * B;
    }
}

struct ConvDims {
    long B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad;
    long K() const { return Cin * kh * kw; }
    long M() const { return B * Ho * Wo; }
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, long stride, long pad) {
    if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + x.shape_str());
    if (w.rank() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw], got " + w.shape_str());
    if (x.dim(1) != w.dim(1)) {
        throw DimensionError("conv2d: channel mismatch, input " + x.shape_str() + " weight " + w.shape_str());
    }
    ConvDims d;
    d.B = x.dim(0);
    d.Cin = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.Ho <= 0 || d.Wo <= 0) throw DimensionError("conv2d: kernel larger than padded input");
    return d;
}

inline void im2col(const Tensor& x, const ConvDims& d, std::vector<double>& col) {
    col.assign(static_cast<size_t>(d.M() * d.K()), 0.0);
    long K = d.K();
    for (long b = 0; b < d.B; ++b) {
        for (long oy = 0; oy < d.Ho; ++oy) {
            for (long ox = 0; ox < d.Wo; ++ox) {
                double* row = col.data() + ((b * d.Ho + oy) * d.Wo + ox) * K;
                long iy0 = oy * d.stride - d.pad;
                long ix0 = ox * d.stride - d.pad;
                for (long ci = 0; ci < d.Cin; ++ci) {
                    const double* plane = x.data() + (b * d.Cin + ci) * d.H * d.W;
                    for (long ky = 0; ky < d.kh; ++ky) {
                        long iy = iy0 + ky;
                        if (iy < 0 || iy >= d.H) continue;
                        const double* src = plane + iy * d.W;
                        double* dst = row + (ci * d.kh + ky) * d.kw;
                        for (long kx = 0; kx < d.kw; ++kx) {
                            long ix = ix0 + kx;
                            if (ix >= 0 && ix < d.W) dst[kx] = src[ix];
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_accumulate(const std::vector<double>& col, const ConvDims& d, Tensor& dx) {
    long K = d.K();
    for (long b = 0; b < d.B; ++b) {
        for (long oy = 0; oy < d.Ho; ++oy) {
            for (long ox = 0; ox < d.Wo; ++ox) {
                const double* row = col.data() + ((b * d.Ho + oy) * d.Wo + ox) * K;
                long iy0 = oy * d.stride - d.pad;
                long ix0 = ox * d.stride - d.pad;
                for (long ci = 0; ci < d.Cin; ++ci) {
                    double* plane = dx.data() + (b * d.Cin + ci) * d.H * d.W;
                    for (long ky = 0; ky < d.kh; ++ky) {
                        long iy = iy0 + ky;
                        if (iy < 0 || iy >= d.H) continue;
                        double* dst = plane + iy * d.W;
                        const double* src = row + (ci * d.kh + ky) * d.kw;
                        for (long kx = 0; kx < d.kw; ++kx) {
                            long ix = ix0 + kx;
                            if (ix >= 0 && ix < d.W) dst[ix] += src[kx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + a->val.shape_str() + " x " + b->val.shape_str());
    }
    long m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    Tensor out({m, n});
    detail::gemm_nn(a->val.data(), b->val.data(), out.data(), m, k, n, false);
    return make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            detail::gemm_nt(nd.grad.data(), b->val.data(), a->grad.data(), m, n, k, true);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            detail::gemm_tn(a->val.data(), nd.grad.data(), b->grad.data(), k, m, n, true);
        }
    });
}

/// a[m,k] * b[n,k]^T -> [m,n]
inline Value matmul_nt(const Value& a, const Value& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(1)) {
        throw DimensionError("matmul_nt: incompatible shapes " + a->val.shape_str() + " x " + b->val.shape_str() + "^T");
    }
    long m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(0);
    Tensor out({m, n});
    detail::gemm_nt(a->val.data(), b->val.data(), out.data(), m, k, n, false);
    return make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            detail::gemm_nn(nd.grad.data(), b->val.data(), a->grad.data(), m, n, k, true);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB [n,k] = G^T [n,m] * A [m,k]
            detail::gemm_tn(nd.grad.data(), a->val.data(), b->grad.data(), n, m, k, true);
        }
    });
}

/// x[m,in] * W[in,out] + bias[out] broadcast over rows. Pass a null bias for
/// a pure linear map.
inline Value linear(const Value& x, const Value& w, const Value& bias) {
    if (x->val.rank() != 2 || w->val.rank() != 2 || x->val.dim(1) != w->val.dim(0)) {
        throw DimensionError("linear: incompatible shapes " + x->val.shape_str() + " x " + w->val.shape_str());
    }
    long m = x->val.dim(0), k = x->val.dim(1), n = w->val.dim(1);
    if (bias && bias->val.numel() != n) throw DimensionError("linear: bias size mismatch");
    Tensor out({m, n});
    detail::gemm_nn(x->val.data(), w->val.data(), out.data(), m, k, n, false);
    if (bias) {
        for (long i = 0; i < m; ++i) {
            for (long j = 0; j < n; ++j) out[i * n + j] += bias->val[j];
        }
    }
    std::vector<Value> parents = bias ? std::vector<Value>{x, w, bias} : std::vector<Value>{x, w};
    return make_node(std::move(out), std::move(parents), [x, w, bias, m, k, n](Node& nd) {
        if (x->requires_grad) {
            x->ensure_grad();
            detail::gemm_nt(nd.grad.data(), w->val.data(), x->grad.data(), m, n, k, true);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::gemm_tn(x->val.data(), nd.grad.data(), w->grad.data(), k, m, n, true);
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (long i = 0; i < m; ++i) {
                for (long j = 0; j < n; ++j) bias->grad[j] += nd.grad[i * n + j];
            }
        }
    });
}

/// [C,H,W] -> [H*W, C]
inline Value chw_to_hwc(const Value& a) {
    if (a->val.rank() != 3) throw DimensionError("chw_to_hwc: rank-3 input required");
    long C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
    long P = H * W;
    Tensor out({P, C});
    for (long c = 0; c < C; ++c) {
        const double* src = a->val.data() + c * P;
        for (long p = 0; p < P; ++p) out[p * C + c] = src[p];
    }
    return make_node(std::move(out), {a}, [a, C, P](Node& n) {
        a->ensure_grad();
        for (long c = 0; c < C; ++c) {
            double* dst = a->grad.data() + c * P;
            for (long p = 0; p < P; ++p) dst[p] += n.grad[p * C + c];
        }
    });
}

/// [H*W, C] -> [C,H,W]
inline Value hwc_to_chw(const Value& a, long H, long W) {
    if (a->val.rank() != 2 || a->val.dim(0) != H * W) throw DimensionError("hwc_to_chw: shape mismatch");
    long C = a->val.dim(1), P = H * W;
    Tensor out({C, H, W});
    for (long p = 0; p < P; ++p) {
        for (long c = 0; c < C; ++c) out[c * P + p] = a->val[p * C + c];
    }
    return make_node(std::move(out), {a}, [a, C, P](Node& n) {
        a->ensure_grad();
        for (long p = 0; p < P; ++p) {
            for (long c = 0; c < C; ++c) a->grad[p * C + c] += n.grad[c * P + p];
        }
    });
}

/// Row-wise softmax of a matrix.
inline Value softmax_rows(const Value& a) {
    if (a->val.rank() != 2) throw DimensionError("softmax_rows: rank-2 input required");
    long m = a->val.dim(0), n = a->val.dim(1);
    Tensor out({m, n});
    for (long i = 0; i < m; ++i) {
        const double* row = a->val.data() + i * n;
        double mx = row[0];
        for (long j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (long j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        for (long j = 0; j < n; ++j) out[i * n + j] = std::exp(row[j] - mx) / denom;
    }
    return make_node(std::move(out), {a}, [a, m, n](Node& nd) {
        a->ensure_grad();
        for (long i = 0; i < m; ++i) {
            const double* y = nd.val.data() + i * n;
            const double* g = nd.grad.data() + i * n;
            double dot = 0.0;
            for (long j = 0; j < n; ++j) dot += y[j] * g[j];
            double* ga = a->grad.data() + i * n;
            for (long j = 0; j < n; ++j) ga[j] += y[j] * (g[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution / pooling / resampling
// ---------------------------------------------------------------------------

/// 2D convolution, x[B,Cin,H,W] * w[Cout,Cin,kh,kw] (+ bias[Cout]).
inline Value conv2d(const Value& x, const Value& w, const Value& bias, long stride = 1, long pad = 1) {
    detail::ConvDims d = detail::conv_dims(x->val, w->val, stride, pad);
    if (bias && bias->val.numel() != d.Cout) throw DimensionError("conv2d: bias size mismatch");
    std::vector<double> col;
    detail::im2col(x->val, d, col);
    // out_mat [M, Cout] = col [M, K] * wflat [Cout, K]^T
    Tensor out_mat({d.M(), d.Cout});
    detail::gemm_nt(col.data(), w->val.data(), out_mat.data(), d.M(), d.K(), d.Cout, false);

    Tensor out({d.B, d.Cout, d.Ho, d.Wo});
    long plane = d.Ho * d.Wo;
    for (long b = 0; b < d.B; ++b) {
        for (long oy = 0; oy < d.Ho; ++oy) {
            for (long ox = 0; ox < d.Wo; ++ox) {
                long row = (b * d.Ho + oy) * d.Wo + ox;
                for (long co = 0; co < d.Cout; ++co) {
                    out.data()[(b * d.Cout + co) * plane + oy * d.Wo + ox] =
                        out_mat[row * d.Cout + co] + (bias ? bias->val[co] : 0.0);
                }
            }
        }
    }
    std::vector<Value> parents = bias ? std::vector<Value>{x, w, bias} : std::vector<Value>{x, w};
    return make_node(std::move(out), std::move(parents), [x, w, bias, d](Node& nd) {
        long plane = d.Ho * d.Wo;
        // gather gradient into [M, Cout]
        Tensor g_mat({d.M(), d.Cout});
        for (long b = 0; b < d.B; ++b) {
            for (long co = 0; co < d.Cout; ++co) {
                const double* g = nd.grad.data() + (b * d.Cout + co) * plane;
                for (long p = 0; p < plane; ++p) g_mat[(b * plane + p) * d.Cout + co] = g[p];
            }
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (long r = 0; r < d.M(); ++r) {
                for (long co = 0; co < d.Cout; ++co) bias->grad[co] += g_mat[r * d.Cout + co];
            }
        }
        if (w->requires_grad) {
            std::vector<double> col;
            detail::im2col(x->val, d, col);
            w->ensure_grad();
            // dW [Cout, K] += g_mat^T [Cout, M] * col [M, K]
            detail::gemm_tn(g_mat.data(), col.data(), w->grad.data(), d.Cout, d.M(), d.K(), true);
        }
        if (x->requires_grad) {
            x->ensure_grad();
            // dcol [M, K] = g_mat [M, Cout] * wflat [Cout, K]
            std::vector<double> dcol(static_cast<size_t>(d.M() * d.K()));
            detail::gemm_nn(g_mat.data(), w->val.data(), dcol.data(), d.M(), d.Cout, d.K(), false);
            detail::col2im_accumulate(dcol, d, x->grad);
        }
    });
}

/// Average pooling with square window k, stride k.
inline Value avg_pool2d(const Value& x, long k) {
    if (x->val.rank() != 4) throw DimensionError("avg_pool2d: rank-4 input required");
    long B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H % k != 0 || W % k != 0) throw DimensionError("avg_pool2d: size not divisible by window");
    long Ho = H / k, Wo = W / k;
    Tensor out({B, C, Ho, Wo});
    double inv = 1.0 / static_cast<double>(k * k);
    for (long bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.data() + bc * H * W;
        double* dst = out.data() + bc * Ho * Wo;
        for (long oy = 0; oy < Ho; ++oy) {
            for (long ox = 0; ox < Wo; ++ox) {
                double s = 0.0;
                for (long dy = 0; dy < k; ++dy) {
                    for (long dx = 0; dx < k; ++dx) s += src[(oy * k + dy) * W + ox * k + dx];
                }
                dst[oy * Wo + ox] = s * inv;
            }
        }
    }
    return make_node(std::move(out), {x}, [x, B, C, H, W, Ho, Wo, k, inv](Node& n) {
        x->ensure_grad();
        for (long bc = 0; bc < B * C; ++bc) {
            double* dst = x->grad.data() + bc * H * W;
            const double* g = n.grad.data() + bc * Ho * Wo;
            for (long oy = 0; oy < Ho; ++oy) {
                for (long ox = 0; ox < Wo; ++ox) {
                    double gv = g[oy * Wo + ox] * inv;
                    for (long dy = 0; dy < k; ++dy) {
                        for (long dx = 0; dx < k; ++dx) dst[(oy * k + dy) * W + ox * k + dx] += gv;
                    }
                }
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling of [B,C,H,W].
inline Value upsample_nearest2(const Value& x) {
    if (x->val.rank() != 4) throw DimensionError("upsample_nearest2: rank-4 input required");
    long B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({B, C, H * 2, W * 2});
    for (long bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.data() + bc * H * W;
        double* dst = out.data() + bc * 4 * H * W;
        for (long y = 0; y < 2 * H; ++y) {
            for (long xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
        }
    }
    return make_node(std::move(out), {x}, [x, B, C, H, W](Node& n) {
        x->ensure_grad();
        for (long bc = 0; bc < B * C; ++bc) {
            double* dst = x->grad.data() + bc * H * W;
            const double* g = n.grad.data() + bc * 4 * H * W;
            for (long y = 0; y < 2 * H; ++y) {
                for (long xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + xx / 2] += g[y * 2 * W + xx];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// GroupNorm over [B,C,H,W] with per-channel scale/shift.
inline Value group_norm(const Value& x, const Value& gamma, const Value& beta, long groups, double eps = 1e-5) {
    if (x->val.rank() != 4) throw DimensionError("group_norm: rank-4 input required");
    long B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (C % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
    if (gamma->val.numel() != C || beta->val.numel() != C) throw DimensionError("group_norm: scale/shift size mismatch");
    long cg = C / groups;       // channels per group
    long gs = cg * H * W;       // elements per group
    long plane = H * W;

    Tensor out({B, C, H, W});
    // cache per-(b,g) mean and inverse stddev for backward
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(B * groups * 2));
    for (long b = 0; b < B; ++b) {
        for (long g = 0; g < groups; ++g) {
            const double* src = x->val.data() + (b * C + g * cg) * plane;
            double mean = 0.0;
            for (long i = 0; i < gs; ++i) mean += src[i];
            mean /= static_cast<double>(gs);
            double var = 0.0;
            for (long i = 0; i < gs; ++i) {
                double dv = src[i] - mean;
                var += dv * dv;
            }
            var /= static_cast<double>(gs);
            double inv_std = 1.0 / std::sqrt(var + eps);
            (*stats)[(b * groups + g) * 2] = mean;
            (*stats)[(b * groups + g) * 2 + 1] = inv_std;
            for (long c = 0; c < cg; ++c) {
                long ch = g * cg + c;
                const double* sp = x->val.data() + (b * C + ch) * plane;
                double* dp = out.data() + (b * C + ch) * plane;
                double ga = gamma->val[ch], be = beta->val[ch];
                for (long i = 0; i < plane; ++i) dp[i] = ga * (sp[i] - mean) * inv_std + be;
            }
        }
    }
    return make_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, B, C, groups, cg, plane, gs](Node& nd) {
        for (long b = 0; b < B; ++b) {
            for (long g = 0; g < groups; ++g) {
                double mean = (*stats)[(b * groups + g) * 2];
                double inv_std = (*stats)[(b * groups + g) * 2 + 1];
                // h = grad * gamma (per element); dx = inv_std * (h - mean(h) - xhat * mean(h*xhat))
                double sum_h = 0.0, sum_hx = 0.0;
                for (long c = 0; c < cg; ++c) {
                    long ch = g * cg + c;
                    const double* gp = nd.grad.data() + (b * C + ch) * plane;
                    const double* sp = x->val.data() + (b * C + ch) * plane;
                    double ga = gamma->val[ch];
                    for (long i = 0; i < plane; ++i) {
                        double h = gp[i] * ga;
                        double xhat = (sp[i] - mean) * inv_std;
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                }
                double mh = sum_h / static_cast<double>(gs);
                double mhx = sum_hx / static_cast<double>(gs);
                for (long c = 0; c < cg; ++c) {
                    long ch = g * cg + c;
                    const double* gp = nd.grad.data() + (b * C + ch) * plane;
                    const double* sp = x->val.data() + (b * C + ch) * plane;
                    double ga = gamma->val[ch];
                    if (x->requires_grad) {
                        x->ensure_grad();
                        double* dx = x->grad.data() + (b * C + ch) * plane;
                        for (long i = 0; i < plane; ++i) {
                            double h = gp[i] * ga;
                            double xhat = (sp[i] - mean) * inv_std;
                            dx[i] += inv_std * (h - mh - xhat * mhx);
                        }
                    }
                    if (gamma->requires_grad) {
                        gamma->ensure_grad();
                        double acc = 0.0;
                        for (long i = 0; i < plane; ++i) acc += gp[i] * (sp[i] - mean) * inv_std;
                        gamma->grad[ch] += acc;
                    }
                    if (beta->requires_grad) {
                        beta->ensure_grad();
                        double acc = 0.0;
                        for (long i = 0; i < plane; ++i) acc += gp[i];
                        beta->grad[ch] += acc;
                    }
                }
            }
        }
    });
}

/// Add a per-channel vector v[C] to every spatial position of x[B,C,H,W].
/// v may be [C] (shared across batch) or [B,C].
inline Value add_channel_bias(const Value& x, const Value& v) {
    if (x->val.rank() != 4) throw DimensionError("add_channel_bias: rank-4 input required");
    long B = x->val.dim(0), C = x->val.dim(1), plane = x->val.dim(2) * x->val.dim(3);
    bool per_sample = v->val.numel() == B * C;
    if (!per_sample && v->val.numel() != C) throw DimensionError("add_channel_bias: bias size mismatch");
    Tensor out({B, C, x->val.dim(2), x->val.dim(3)});
    for (long b = 0; b < B; ++b) {
        for (long c = 0; c < C; ++c) {
            double bias = per_sample ? v->val[b * C + c] : v->val[c];
            const double* sp = x->val.data() + (b * C + c) * plane;
            double* dp = out.data() + (b * C + c) * plane;
            for (long i = 0; i < plane; ++i) dp[i] = sp[i] + bias;
        }
    }
    return make_node(std::move(out), {x, v}, [x, v, B, C, plane, per_sample](Node& n) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
        }
        if (v->requires_grad) {
            v->ensure_grad();
            for (long b = 0; b < B; ++b) {
                for (long c = 0; c < C; ++c) {
                    const double* g = n.grad.data() + (b * C + c) * plane;
                    double acc = 0.0;
                    for (long i = 0; i < plane; ++i) acc += g[i];
                    v->grad[per_sample ? b * C + c : c] += acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling variants used by the expert encoders / metrics
// ---------------------------------------------------------------------------

/// Fixed-weight spatial pooling: x[C,H,W], weights[H,W] (constant) -> [C],
/// out_c = sum(x_c * weights) / sum(weights).
inline Value weighted_pool(const Value& x, const Tensor& weights) {
    if (x->val.rank() != 3) throw DimensionError("weighted_pool: rank-3 input required");
    long C = x->val.dim(0), plane = x->val.dim(1) * x->val.dim(2);
    if (weights.numel() != plane) throw DimensionError("weighted_pool: weight map size mismatch");
    double wsum = weights.sum();
    if (wsum <= 0) throw ContractError("weighted_pool: weights must have positive sum");
    Tensor out({C});
    for (long c = 0; c < C; ++c) {
        const double* sp = x->val.data() + c * plane;
        double acc = 0.0;
        for (long i = 0; i < plane; ++i) acc += sp[i] * weights[i];
        out[c] = acc / wsum;
    }
    auto wcopy = std::make_shared<Tensor>(weights);
    return make_node(std::move(out), {x}, [x, wcopy, C, plane, wsum](Node& n) {
        x->ensure_grad();
        for (long c = 0; c < C; ++c) {
            double g = n.grad[c] / wsum;
            double* dp = x->grad.data() + c * plane;
            for (long i = 0; i < plane; ++i) dp[i] += g * (*wcopy)[i];
        }
    });
}

/// Mask-weighted pooling with gradients to both features and mask:
/// features[C,H,W], mask[H,W] -> [C], out_c = sum(f_c*m) / (sum(m)+eps).
inline Value masked_pool(const Value& features, const Value& mask, double eps = 1e-8) {
    if (features->val.rank() != 3) throw DimensionError("masked_pool: rank-3 features required");
    long C = features->val.dim(0), plane = features->val.dim(1) * features->val.dim(2);
    if (mask->val.numel() != plane) throw DimensionError("masked_pool: mask size mismatch");
    double msum = mask->val.sum() + eps;
    Tensor out({C});
    for (long c = 0; c < C; ++c) {
        const double* fp = features->val.data() + c * plane;
        double acc = 0.0;
        for (long i = 0; i < plane; ++i) acc += fp[i] * mask->val[i];
        out[c] = acc / msum;
    }
    return make_node(std::move(out), {features, mask}, [features, mask, C, plane, msum](Node& n) {
        if (features->requires_grad) {
            features->ensure_grad();
            for (long c = 0; c < C; ++c) {
                double g = n.grad[c] / msum;
                double* dp = features->grad.data() + c * plane;
                for (long i = 0; i < plane; ++i) dp[i] += g * mask->val[i];
            }
        }
        if (mask->requires_grad) {
            mask->ensure_grad();
            for (long i = 0; i < plane; ++i) {
                double acc = 0.0;
                for (long c = 0; c < C; ++c) {
                    acc += n.grad[c] * (features->val[c * plane + i] - n.val[c]) / msum;
                }
                mask->grad[i] += acc;
            }
        }
    });
}

/// Per-pixel softmax across the leading (region) axis of [R,H,W].
inline Value softmax_channels(const Value& x) {
    if (x->val.rank() != 3) throw DimensionError("softmax_channels: rank-3 input required");
    long R = x->val.dim(0), plane = x->val.dim(1) * x->val.dim(2);
    Tensor out({R, x->val.dim(1), x->val.dim(2)});
    for (long p = 0; p < plane; ++p) {
        double mx = x->val[p];
        for (long r = 1; r < R; ++r) mx = std::max(mx, x->val[r * plane + p]);
        double denom = 0.0;
        for (long r = 0; r < R; ++r) denom += std::exp(x->val[r * plane + p] - mx);
        for (long r = 0; r < R; ++r) out[r * plane + p] = std::exp(x->val[r * plane + p] - mx) / denom;
    }
    return make_node(std::move(out), {x}, [x, R, plane](Node& n) {
        x->ensure_grad();
        for (long p = 0; p < plane; ++p) {
            double dot = 0.0;
            for (long r = 0; r < R; ++r) dot += n.val[r * plane + p] * n.grad[r * plane + p];
            for (long r = 0; r < R; ++r) {
                x->grad[r * plane + p] += n.val[r * plane + p] * (n.grad[r * plane + p] - dot);
            }
        }
    });
}

/// Unit-normalize the channel vector at every spatial position of [C,H,W]
/// (perceptual-distance style), y = x / sqrt(sum_c x^2 + eps).
inline Value channel_l2_normalize(const Value& x, double eps = 1e-10) {
    if (x->val.rank() != 3) throw DimensionError("channel_l2_normalize: rank-3 input required");
    long C = x->val.dim(0), plane = x->val.dim(1) * x->val.dim(2);
    Tensor out(x->val.shape());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(plane));
    for (long p = 0; p < plane; ++p) {
        double s = eps;
        for (long c = 0; c < C; ++c) {
            double v = x->val[c * plane + p];
            s += v * v;
        }
        double nrm = std::sqrt(s);
        (*norms)[p] = nrm;
        for (long c = 0; c < C; ++c) out[c * plane + p] = x->val[c * plane + p] / nrm;
    }
    return make_node(std::move(out), {x}, [x, norms, C, plane](Node& n) {
        x->ensure_grad();
        for (long p = 0; p < plane; ++p) {
            double nrm = (*norms)[p];
            double dot = 0.0;
            for (long c = 0; c < C; ++c) dot += n.grad[c * plane + p] * n.val[c * plane + p];
            for (long c = 0; c < C; ++c) {
                x->grad[c * plane + p] += (n.grad[c * plane + p] - n.val[c * plane + p] * dot) / nrm;
            }
        }
    });
}

/// Per-region spatial sums: [R,H,W] -> [R].
inline Value sum_spatial(const Value& x) {
    if (x->val.rank() != 3) throw DimensionError("sum_spatial: rank-3 input required");
    long R = x->val.dim(0), plane = x->val.dim(1) * x->val.dim(2);
    Tensor out({R});
    for (long r = 0; r < R; ++r) {
        double acc = 0.0;
        for (long i = 0; i < plane; ++i) acc += x->val[r * plane + i];
        out[r] = acc;
    }
    return make_node(std::move(out), {x}, [x, R, plane](Node& n) {
        x->ensure_grad();
        for (long r = 0; r < R; ++r) {
            double g = n.grad[r];
            for (long i = 0; i < plane; ++i) x->grad[r * plane + i] += g;
        }
    });
}

/// Standardize a whole tensor to zero mean / unit variance (plus eps).
/// Used by the frozen encoders so that global brightness/contrast cancels.
inline Value standardize(const Value& x, double eps = 1e-5) {
    long n = x->val.numel();
    double mean = x->val.mean();
    double var = 0.0;
    for (long i = 0; i < n; ++i) {
        double d = x->val[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    double inv_std = 1.0 / (std::sqrt(var) + eps);
    Tensor out(x->val.shape());
    for (long i = 0; i < n; ++i) out[i] = (x->val[i] - mean) * inv_std;
    double std_ = std::sqrt(var);
    return make_node(std::move(out), {x}, [x, mean, std_, inv_std, n, eps](Node& nd) {
        x->ensure_grad();
        double gsum = 0.0, gxsum = 0.0;
        for (long i = 0; i < n; ++i) {
            gsum += nd.grad[i];
            gxsum += nd.grad[i] * (x->val[i] - mean);
        }
        double invn = 1.0 / static_cast<double>(n);
        // d/dx of (x - mean)/(std + eps); note the eps sits outside the sqrt
        double k = std_ > 0.0 ? gxsum * inv_std * inv_std * invn / std_ : 0.0;
        for (long i = 0; i < n; ++i) {
            x->grad[i] += inv_std * (nd.grad[i] - gsum * invn) - k * (x->val[i] - mean);
        }
    });
}

}  // namespace facediff::ad
