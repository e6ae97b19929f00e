#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "facediff/errors.hpp"
#include "facediff/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor-valued nodes.
// Nodes are created through the op functions below; calling backward() on a
// scalar root accumulates gradients into every reachable node that requires
// them. Creation order doubles as a topological order because ops only
// consume already-built values.

namespace facediff::ad {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily, same shape as val
    std::vector<Value> parents;
    std::function<void(Node&)> backprop;
    bool requires_grad = false;
    long seq = 0;

    void ensure_grad() {
        if (grad.numel() == 0) grad = Tensor(val.shape());
    }
};

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

/// Scoped switch that turns new nodes into plain values (no tape).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {
inline long next_seq() {
    thread_local long seq = 0;
    return ++seq;
}
}  // namespace detail

inline Value make_node(Tensor val, std::vector<Value> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->seq = detail::next_seq();
    if (grad_enabled()) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        }
    }
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

/// Constant (never differentiated).
inline Value constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->seq = detail::next_seq();
    return n;
}

/// Trainable leaf; gradients accumulate here.
inline Value leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = grad_enabled();
    n->seq = detail::next_seq();
    return n;
}

/// Backpropagate from a scalar root. Gradients accumulate (+=) into every
/// node with requires_grad; call zero_grad on leaves between uses.
inline void backward(const Value& root) {
    if (!root) throw ContractError("backward: null root");
    if (root->val.numel() != 1) throw ContractError("backward: root must be scalar, got " + root->val.shape_str());
    if (!root->requires_grad) return;

    // Collect reachable grad-requiring nodes; creation order is topological.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (Node* n : order) {
        if (n->backprop && n->grad.numel() != 0) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "add");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

inline Value sub(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "sub");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

inline Value mul(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "mul");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

inline Value div(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "div");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] / b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] / b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i)
                b->grad[i] -= n.grad[i] * a->val[i] / (b->val[i] * b->val[i]);
        }
    });
}

inline Value mul_scalar(const Value& a, double s) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] * s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * s;
    });
}

inline Value add_scalar(const Value& a, double s) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] + s;
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

/// alpha*a + beta*b
inline Value axpby(double alpha, const Value& a, double beta, const Value& b) {
    require_same_shape(a->val, b->val, "axpby");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = alpha * a->val[i] + beta * b->val[i];
    return make_node(std::move(out), {a, b}, [a, b, alpha, beta](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += alpha * n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < n.grad.numel(); ++i) b->grad[i] += beta * n.grad[i];
        }
    });
}

inline Value silu(const Value& a) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) {
        double x = a->val[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) {
            double x = a->val[i];
            double sg = 1.0 / (1.0 + std::exp(-x));
            a->grad[i] += n.grad[i] * sg * (1.0 + x * (1.0 - sg));
        }
    });
}

inline Value tanh_(const Value& a) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::tanh(a->val[i]);
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) {
            double y = std::tanh(a->val[i]);
            a->grad[i] += n.grad[i] * (1.0 - y * y);
        }
    });
}

/// Numerically stable softplus: log(1+exp(x)).
inline Value softplus(const Value& a) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) {
        double x = a->val[i];
        out[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) {
            double x = a->val[i];
            a->grad[i] += n.grad[i] / (1.0 + std::exp(-x));
        }
    });
}

inline Value exp_(const Value& a) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::exp(a->val[i]);
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * n.val[i];
    });
}

/// Smooth magnitude sqrt(x^2 + eps); gradient x / sqrt(x^2 + eps).
inline Value smooth_abs(const Value& a, double eps = 1e-4) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a->val[i] * a->val[i] + eps);
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * a->val[i] / n.val[i];
    });
}

/// Clamp with pass-through gradient strictly inside (lo, hi).
inline Value clamp(const Value& a, double lo, double hi) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, a->val[i]));
    return make_node(std::move(out), {a}, [a, lo, hi](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) {
            double x = a->val[i];
            if (x > lo && x < hi) a->grad[i] += n.grad[i];
        }
    });
}

/// arccos of input clamped to [-1, 1]; zero gradient at the saturated ends.
inline Value acos_clamped(const Value& a) {
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::acos(std::min(1.0, std::max(-1.0, a->val[i])));
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) {
            double x = a->val[i];
            if (x > -1.0 && x < 1.0) a->grad[i] += n.grad[i] * (-1.0 / std::sqrt(1.0 - x * x));
        }
    });
}

inline Value reshape(const Value& a, std::vector<long> shape) {
    Tensor out(std::move(shape));
    if (out.numel() != a->val.numel()) {
        throw DimensionError("reshape: element count mismatch " + a->val.shape_str() + " -> " + out.shape_str());
    }
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i];
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and scalar results
// ---------------------------------------------------------------------------

inline Value sum_all(const Value& a) {
    Tensor out = Tensor::scalar(a->val.sum());
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        double g = n.grad[0];
        for (long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
    });
}

inline Value mean_all(const Value& a) {
    double inv = 1.0 / static_cast<double>(a->val.numel());
    Tensor out = Tensor::scalar(a->val.sum() * inv);
    return make_node(std::move(out), {a}, [a, inv](Node& n) {
        a->ensure_grad();
        double g = n.grad[0] * inv;
        for (long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
    });
}

/// Mean squared error over all elements.
inline Value mse(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "mse");
    double inv = 1.0 / static_cast<double>(a->val.numel());
    double acc = 0.0;
    for (long i = 0; i < a->val.numel(); ++i) {
        double d = a->val[i] - b->val[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc * inv);
    return make_node(std::move(out), {a, b}, [a, b, inv](Node& n) {
        double g = n.grad[0] * 2.0 * inv;
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g * (a->val[i] - b->val[i]);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < b->grad.numel(); ++i) b->grad[i] -= g * (a->val[i] - b->val[i]);
        }
    });
}

/// Mean absolute difference over all elements (L1). Subgradient 0 at ties.
inline Value mean_abs_diff(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "mean_abs_diff");
    double inv = 1.0 / static_cast<double>(a->val.numel());
    double acc = 0.0;
    for (long i = 0; i < a->val.numel(); ++i) acc += std::abs(a->val[i] - b->val[i]);
    Tensor out = Tensor::scalar(acc * inv);
    return make_node(std::move(out), {a, b}, [a, b, inv](Node& n) {
        double g = n.grad[0] * inv;
        for (long i = 0; i < a->val.numel(); ++i) {
            double d = a->val[i] - b->val[i];
            double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad[i] += g * s;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad[i] -= g * s;
            }
        }
    });
}

/// Dot product of two equal-length vectors -> scalar.
inline Value dotv(const Value& a, const Value& b) {
    require_same_shape(a->val, b->val, "dotv");
    double acc = 0.0;
    for (long i = 0; i < a->val.numel(); ++i) acc += a->val[i] * b->val[i];
    Tensor out = Tensor::scalar(acc);
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        double g = n.grad[0];
        if (a->requires_grad) {
            a->ensure_grad();
            for (long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (long i = 0; i < b->grad.numel(); ++i) b->grad[i] += g * a->val[i];
        }
    });
}

/// L2-normalize a flat vector. Degenerate (near-zero) input is an error.
inline Value l2_normalize(const Value& a, double eps = 1e-12) {
    double nrm2 = 0.0;
    for (long i = 0; i < a->val.numel(); ++i) nrm2 += a->val[i] * a->val[i];
    double nrm = std::sqrt(nrm2);
    if (nrm < eps) throw DegenerateInputError("l2_normalize: zero vector");
    Tensor out(a->val.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->val[i] / nrm;
    return make_node(std::move(out), {a}, [a, nrm](Node& n) {
        a->ensure_grad();
        double gy = 0.0;
        for (long i = 0; i < n.grad.numel(); ++i) gy += n.grad[i] * n.val[i];
        for (long i = 0; i < n.grad.numel(); ++i) a->grad[i] += (n.grad[i] - n.val[i] * gy) / nrm;
    });
}

// ---------------------------------------------------------------------------
// Structure ops: concat / slice / stack
// ---------------------------------------------------------------------------

/// Concatenate matrices [r_i, d] along rows.
inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    long d = parts[0]->val.dim(1);
    long rows = 0;
    for (const auto& p : parts) {
        if (p->val.rank() != 2 || p->val.dim(1) != d) {
            throw DimensionError("concat_rows: inconsistent column count");
        }
        rows += p->val.dim(0);
    }
    Tensor out({rows, d});
    long off = 0;
    for (const auto& p : parts) {
        for (long i = 0; i < p->val.numel(); ++i) out[off + i] = p->val[i];
        off += p->val.numel();
    }
    return make_node(std::move(out), parts, [parts](Node& n) {
        long off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (long i = 0; i < p->val.numel(); ++i) p->grad[i] += n.grad[off + i];
            }
            off += p->val.numel();
        }
    });
}

/// Concatenate matrices [r, c_i] along columns.
inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    long r = parts[0]->val.dim(0);
    long cols = 0;
    for (const auto& p : parts) {
        if (p->val.rank() != 2 || p->val.dim(0) != r) {
            throw DimensionError("concat_cols: inconsistent row count");
        }
        cols += p->val.dim(1);
    }
    Tensor out({r, cols});
    long coff = 0;
    for (const auto& p : parts) {
        long c = p->val.dim(1);
        for (long i = 0; i < r; ++i) {
            for (long j = 0; j < c; ++j) out[i * cols + coff + j] = p->val[i * c + j];
        }
        coff += c;
    }
    return make_node(std::move(out), parts, [parts, r, cols](Node& n) {
        long coff = 0;
        for (const auto& p : parts) {
            long c = p->val.dim(1);
            if (p->requires_grad) {
                p->ensure_grad();
                for (long i = 0; i < r; ++i) {
                    for (long j = 0; j < c; ++j) p->grad[i * c + j] += n.grad[i * cols + coff + j];
                }
            }
            coff += c;
        }
    });
}

/// Columns [c0, c0+len) of a matrix.
inline Value slice_cols(const Value& a, long c0, long len) {
    if (a->val.rank() != 2) throw DimensionError("slice_cols: rank-2 input required");
    long r = a->val.dim(0), c = a->val.dim(1);
    if (c0 < 0 || c0 + len > c) throw IndexError("slice_cols: column range out of bounds");
    Tensor out({r, len});
    for (long i = 0; i < r; ++i) {
        for (long j = 0; j < len; ++j) out[i * len + j] = a->val[i * c + c0 + j];
    }
    return make_node(std::move(out), {a}, [a, c0, len, r, c](Node& n) {
        a->ensure_grad();
        for (long i = 0; i < r; ++i) {
            for (long j = 0; j < len; ++j) a->grad[i * c + c0 + j] += n.grad[i * len + j];
        }
    });
}

/// Concatenate along the channel axis of [B,C,H,W] tensors.
inline Value concat_channels(const Value& a, const Value& b) {
    if (a->val.rank() != 4 || b->val.rank() != 4) throw DimensionError("concat_channels: rank-4 inputs required");
    for (int i : {0, 2, 3}) {
        if (a->val.dim(i) != b->val.dim(i)) {
            throw DimensionError("concat_channels: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
        }
    }
    long B = a->val.dim(0), Ca = a->val.dim(1), Cb = b->val.dim(1), H = a->val.dim(2), W = a->val.dim(3);
    Tensor out({B, Ca + Cb, H, W});
    long plane = H * W;
    for (long bb = 0; bb < B; ++bb) {
        const double* pa = a->val.data() + bb * Ca * plane;
        const double* pb = b->val.data() + bb * Cb * plane;
        double* po = out.data() + bb * (Ca + Cb) * plane;
        std::copy(pa, pa + Ca * plane, po);
        std::copy(pb, pb + Cb * plane, po + Ca * plane);
    }
    return make_node(std::move(out), {a, b}, [a, b, B, Ca, Cb, plane](Node& n) {
        for (long bb = 0; bb < B; ++bb) {
            const double* g = n.grad.data() + bb * (Ca + Cb) * plane;
            if (a->requires_grad) {
                a->ensure_grad();
                double* ga = a->grad.data() + bb * Ca * plane;
                for (long i = 0; i < Ca * plane; ++i) ga[i] += g[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                double* gb = b->grad.data() + bb * Cb * plane;
                for (long i = 0; i < Cb * plane; ++i) gb[i] += g[Ca * plane + i];
            }
        }
    });
}

/// Single sample of a batch: [B,C,H,W] -> [C,H,W].
inline Value select_batch(const Value& a, long b) {
    if (a->val.rank() != 4) throw DimensionError("select_batch: rank-4 input required");
    long B = a->val.dim(0), C = a->val.dim(1), H = a->val.dim(2), W = a->val.dim(3);
    if (b < 0 || b >= B) throw IndexError("select_batch: index out of range");
    Tensor out({C, H, W});
    long sz = C * H * W;
    const double* src = a->val.data() + b * sz;
    std::copy(src, src + sz, out.data());
    return make_node(std::move(out), {a}, [a, b, sz](Node& n) {
        a->ensure_grad();
        double* dst = a->grad.data() + b * sz;
        for (long i = 0; i < sz; ++i) dst[i] += n.grad[i];
    });
}

/// Stack [C,H,W] samples into [B,C,H,W].
inline Value stack_batch(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("stack_batch: empty input");
    const auto& s0 = parts[0]->val.shape();
    for (const auto& p : parts) {
        if (p->val.shape() != s0) throw DimensionError("stack_batch: mismatched sample shapes");
    }
    long B = static_cast<long>(parts.size());
    long sz = parts[0]->val.numel();
    Tensor out({B, s0[0], s0[1], s0[2]});
    for (long b = 0; b < B; ++b) std::copy(parts[b]->val.data(), parts[b]->val.data() + sz, out.data() + b * sz);
    return make_node(std::move(out), parts, [parts, sz](Node& n) {
        for (size_t b = 0; b < parts.size(); ++b) {
            if (!parts[b]->requires_grad) continue;
            parts[b]->ensure_grad();
            const double* g = n.grad.data() + static_cast<long>(b) * sz;
            for (long i = 0; i < sz; ++i) parts[b]->grad[i] += g[i];
        }
    });
}

}  // namespace facediff::ad
