#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/rng.hpp"
#include "facediff/tensor.hpp"

namespace testutil {

using facediff::Tensor;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_err(double got, double want, double floor = 1e-8) {
    return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

/// Central finite-difference check of analytic gradients.
/// `forward` must build a fresh graph from `leaf` and return the scalar root.
/// Checks the gradient at `coords` (flat indices into the leaf tensor).
struct GradCheckResult {
    double max_rel_err = 0.0;
    long worst_coord = -1;
    double analytic = 0.0, numeric = 0.0;
};

inline GradCheckResult grad_check(
    const std::function<facediff::ad::Value(const facediff::ad::Value&)>& forward,
    Tensor at, const std::vector<long>& coords, double h = 1e-6) {
    namespace ad = facediff::ad;
    GradCheckResult res;

    auto leaf = ad::leaf(at);
    auto root = forward(leaf);
    ad::backward(root);
    Tensor analytic = leaf->grad;

    for (long c : coords) {
        double orig = at[c];
        at[c] = orig + h;
        double fp;
        {
            ad::NoGradGuard ng;
            fp = forward(ad::constant(at))->val[0];
        }
        at[c] = orig - h;
        double fm;
        {
            ad::NoGradGuard ng;
            fm = forward(ad::constant(at))->val[0];
        }
        at[c] = orig;
        double numeric = (fp - fm) / (2.0 * h);
        double e = rel_err(analytic[c], numeric, 1e-6);
        if (e > res.max_rel_err) {
            res.max_rel_err = e;
            res.worst_coord = c;
            res.analytic = analytic[c];
            res.numeric = numeric;
        }
    }
    return res;
}

inline std::vector<long> random_coords(facediff::Rng& rng, long numel, int count) {
    std::vector<long> out;
    for (int i = 0; i < count; ++i) out.push_back(rng.uniform_int(0, numel - 1));
    return out;
}

inline Tensor random_tensor(facediff::Rng& rng, std::vector<long> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("facediff_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
