#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "facediff/errors.hpp"
#include "facediff/tensor.hpp"

namespace facediff {

/// Seeded random source. Built on std::mt19937_64 (bit-exact across
/// implementations) with hand-rolled distributions on top, because the
/// standard distributions are not specified bit-for-bit and the trainer
/// needs checkpoint-exact resume of the random stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive, unbiased via rejection.
    long uniform_int(long lo, long hi) {
        if (lo > hi) throw ContractError("uniform_int: empty range");
        std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        if (range == 0) return static_cast<long>(engine_());  // full 64-bit range
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return lo + static_cast<long>(v % range);
    }

    /// Standard normal via Box-Muller. Consumes exactly two engine draws per
    /// call so the stream position is a pure function of call count.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    void fill_normal(Tensor& t) {
        for (long i = 0; i < t.numel(); ++i) t[i] = normal();
    }

    void fill_normal(Tensor& t, double stddev) {
        for (long i = 0; i < t.numel(); ++i) t[i] = stddev * normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (long i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Engine state as text (std::mt19937_64 streams portably).
    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw IntegrityError("Rng::deserialize: malformed engine state");
    }

    bool operator==(const Rng& o) const { return engine_ == o.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace facediff
