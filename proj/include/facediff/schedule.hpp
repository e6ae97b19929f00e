#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "facediff/errors.hpp"
#include "facediff/tensor.hpp"

namespace facediff {

/// Per-timestep diffusion schedule. Timesteps are 1-indexed in every public
/// contract: beta(t), alpha(t), alpha_bar(t) for t in [1, T], with
/// alpha_bar_prev(1) == 1 representing the clean-data boundary.
struct NoiseSchedule {
    long T = 0;
    double s = 0.0;
    double beta_clip = 0.0;
    std::vector<double> beta;            // size T, index t-1
    std::vector<double> alpha;           // 1 - beta
    std::vector<double> alpha_bar;       // cumulative product of alpha
    std::vector<double> alpha_bar_prev;  // alpha_bar shifted, [0] == 1

    void check_t(long t) const {
        if (t < 1 || t > T) {
            throw IndexError("timestep " + std::to_string(t) + " out of range [1, " + std::to_string(T) + "]");
        }
    }

    double beta_at(long t) const {
        check_t(t);
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_at(long t) const {
        check_t(t);
        return alpha[static_cast<size_t>(t - 1)];
    }
    double alpha_bar_at(long t) const {
        check_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }
    double alpha_bar_prev_at(long t) const {
        check_t(t);
        return alpha_bar_prev[static_cast<size_t>(t - 1)];
    }

    /// Posterior ("small") variance beta-tilde at step t; zero at t == 1.
    double sigma2_at(long t) const {
        check_t(t);
        return beta_at(t) * (1.0 - alpha_bar_prev_at(t)) / (1.0 - alpha_bar_at(t));
    }
};

/// Cosine schedule: alpha_bar(t) = f(t)/f(0) with
/// f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), betas derived per step and
/// clipped at beta_clip, then alpha_bar rebuilt as the exact cumulative
/// product so that alpha(t) * alpha_bar_prev(t) == alpha_bar(t) holds.
inline NoiseSchedule make_cosine_schedule(long T, double s = 0.008, double beta_clip = 0.999) {
    if (T < 1) throw ConfigError("make_cosine_schedule: T must be >= 1, got " + std::to_string(T));
    if (!(s > 0.0 && s < 1.0)) throw ConfigError("make_cosine_schedule: s must be in (0, 1), got " + std::to_string(s));
    if (!(beta_clip > 0.0 && beta_clip < 1.0)) {
        throw ConfigError("make_cosine_schedule: beta_clip must be in (0, 1), got " + std::to_string(beta_clip));
    }
    NoiseSchedule sc;
    sc.T = T;
    sc.s = s;
    sc.beta_clip = beta_clip;
    sc.beta.resize(static_cast<size_t>(T));
    sc.alpha.resize(static_cast<size_t>(T));
    sc.alpha_bar.resize(static_cast<size_t>(T));
    sc.alpha_bar_prev.resize(static_cast<size_t>(T));

    auto f = [T, s](long t) {
        double arg = ((static_cast<double>(t) / static_cast<double>(T) + s) / (1.0 + s)) * M_PI / 2.0;
        double c = std::cos(arg);
        return c * c;
    };
    double f0 = f(0);
    double prev_ab = 1.0;  // alpha_bar at t-1, starting from the t=0 boundary
    double prod = 1.0;
    for (long t = 1; t <= T; ++t) {
        double ab = f(t) / f0;
        double b = 1.0 - ab / prev_ab;
        b = std::min(b, beta_clip);
        prev_ab = ab;
        double a = 1.0 - b;
        sc.alpha_bar_prev[static_cast<size_t>(t - 1)] = prod;
        prod *= a;
        sc.beta[static_cast<size_t>(t - 1)] = b;
        sc.alpha[static_cast<size_t>(t - 1)] = a;
        sc.alpha_bar[static_cast<size_t>(t - 1)] = prod;
    }
    return sc;
}

/// Forward corruption: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
inline ImageTensor forward_diffuse(const ImageTensor& x0, long t, const ImageTensor& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "forward_diffuse");
    double ab = sched.alpha_bar_at(t);
    double c0 = std::sqrt(ab);
    double c1 = std::sqrt(1.0 - ab);
    ImageTensor out(x0.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
    return out;
}

/// One ancestral reverse step:
/// x_{t-1} = (x_t - beta_t/sqrt(1-alpha_bar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * z.
/// z must be supplied for t > 1 and omitted at t == 1.
inline ImageTensor posterior_step(const ImageTensor& x_t, const ImageTensor& eps_pred, long t,
                                  const NoiseSchedule& sched, const ImageTensor* z = nullptr) {
    require_same_shape(x_t, eps_pred, "posterior_step");
    sched.check_t(t);
    if (t == 1 && z != nullptr) throw ContractError("posterior_step: noise z must be omitted at t = 1");
    if (t > 1 && z == nullptr) throw ContractError("posterior_step: noise z required for t > 1");
    if (z) require_same_shape(x_t, *z, "posterior_step noise");

    double beta = sched.beta_at(t);
    double ab = sched.alpha_bar_at(t);
    double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(t));
    double coef = beta / std::sqrt(1.0 - ab);
    double sigma = t > 1 ? std::sqrt(sched.sigma2_at(t)) : 0.0;

    ImageTensor out(x_t.shape());
    for (long i = 0; i < out.numel(); ++i) {
        double mean = inv_sqrt_alpha * (x_t[i] - coef * eps_pred[i]);
        out[i] = z ? mean + sigma * (*z)[i] : mean;
    }
    return out;
}

/// One-step clean-image estimate from (x_t, eps_pred), clamped to [-1, 1].
/// Refuses timesteps where alpha_bar has collapsed below 1e-8.
inline ImageTensor x0_estimate(const ImageTensor& x_t, const ImageTensor& eps_pred, long t, const NoiseSchedule& sched) {
    require_same_shape(x_t, eps_pred, "x0_estimate");
    double ab = sched.alpha_bar_at(t);
    if (ab < 1e-8) {
        throw NumericError("x0_estimate: alpha_bar(" + std::to_string(t) +
                           ") < 1e-8; use a larger timestep floor for expert losses");
    }
    double inv = 1.0 / std::sqrt(ab);
    double c = std::sqrt(1.0 - ab);
    ImageTensor out(x_t.shape());
    for (long i = 0; i < out.numel(); ++i) {
        double v = (x_t[i] - c * eps_pred[i]) * inv;
        out[i] = std::min(1.0, std::max(-1.0, v));
    }
    return out;
}

}  // namespace facediff
