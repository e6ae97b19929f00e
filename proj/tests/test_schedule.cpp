#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "facediff/rng.hpp"
#include "facediff/schedule.hpp"
#include "support/testutil.hpp"

using namespace facediff;

namespace {

// Independent oracle: closed-form alpha_bar evaluated in extended precision,
// ignoring beta clipping (valid wherever clipping has not engaged).
long double cosine_alpha_bar_oracle(long t, long T, long double s) {
    auto f = [&](long double u) {
        long double arg = ((u / static_cast<long double>(T) + s) / (1.0L + s)) * static_cast<long double>(M_PI) / 2.0L;
        long double c = std::cos(arg);
        return c * c;
    };
    return f(static_cast<long double>(t)) / f(0.0L);
}

}  // namespace

TEST_CASE("cosine schedule matches the closed form and its invariants", "[schedule]") {
    auto sc = make_cosine_schedule(1000, 0.008, 0.999);
    REQUIRE(sc.T == 1000);

    SECTION("normalization at the t=0 boundary") {
        // alpha_bar_prev(1) is the t=0 boundary value f(0)/f(0) = 1.
        CHECK(sc.alpha_bar_prev_at(1) == 1.0);
        CHECK(sc.alpha_bar_at(1) == Catch::Approx(static_cast<double>(cosine_alpha_bar_oracle(1, 1000, 0.008L))).epsilon(1e-12));
    }

    SECTION("strictly decreasing, endpoint nearly zero") {
        for (long t = 2; t <= 1000; ++t) {
            REQUIRE(sc.alpha_bar_at(t) < sc.alpha_bar_at(t - 1));
        }
        CHECK(sc.alpha_bar_at(1000) < 1e-3);
        CHECK(sc.alpha_bar_at(1000) > 0.0);
    }

    SECTION("midpoint against the extended-precision oracle") {
        long double want = cosine_alpha_bar_oracle(500, 1000, 0.008L);
        CHECK(std::abs(sc.alpha_bar_at(500) - static_cast<double>(want)) < 1e-9);
        CHECK(sc.alpha_bar_at(500) == Catch::Approx(0.494).margin(5e-4));
    }

    SECTION("cumulative-product identity") {
        for (long t = 1; t <= 1000; ++t) {
            double lhs = sc.alpha_at(t) * sc.alpha_bar_prev_at(t);
            double rhs = sc.alpha_bar_at(t);
            REQUIRE(std::abs(lhs - rhs) <= 1e-12 * std::abs(rhs));
        }
    }

    SECTION("beta range and clipping") {
        for (long t = 1; t <= 1000; ++t) {
            REQUIRE(sc.beta_at(t) > 0.0);
            REQUIRE(sc.beta_at(t) <= 0.999);
        }
    }
}

TEST_CASE("cosine schedule holds for other (T, s)", "[schedule]") {
    for (long T : {1L, 10L, 250L}) {
        for (double s : {0.004, 0.008, 0.05}) {
            auto sc = make_cosine_schedule(T, s, 0.999);
            for (long t = 2; t <= T; ++t) REQUIRE(sc.alpha_bar_at(t) < sc.alpha_bar_at(t - 1));
            for (long t = 1; t <= T; ++t) {
                REQUIRE(sc.alpha_bar_at(t) > 0.0);
                REQUIRE(sc.alpha_bar_at(t) <= 1.0);
            }
        }
    }
}

TEST_CASE("schedule construction rejects bad arguments", "[schedule]") {
    CHECK_THROWS_AS(make_cosine_schedule(0, 0.008, 0.999), ConfigError);
    CHECK_THROWS_AS(make_cosine_schedule(1000, 0.0, 0.999), ConfigError);
    CHECK_THROWS_AS(make_cosine_schedule(1000, 1.5, 0.999), ConfigError);
    CHECK_THROWS_AS(make_cosine_schedule(1000, 0.008, 0.0), ConfigError);
    CHECK_THROWS_AS(make_cosine_schedule(1000, 0.008, 1.0), ConfigError);
    CHECK_THROWS_WITH(make_cosine_schedule(-3, 0.008, 0.999), Catch::Matchers::ContainsSubstring("T"));
}

TEST_CASE("forward_diffuse limits and moments", "[schedule]") {
    auto sc = make_cosine_schedule(1000, 0.008, 0.999);
    Rng rng(42);
    Tensor x0 = testutil::random_tensor(rng, {1, 3, 4, 4});
    Tensor eps = testutil::random_tensor(rng, {1, 3, 4, 4});

    SECTION("zero-noise limit: hand-built schedule with alpha_bar == 1") {
        NoiseSchedule id;
        id.T = 1;
        id.beta = {0.0};
        id.alpha = {1.0};
        id.alpha_bar = {1.0};
        id.alpha_bar_prev = {1.0};
        Tensor out = forward_diffuse(x0, 1, eps, id);
        for (long i = 0; i < out.numel(); ++i) REQUIRE(out[i] == x0[i]);
    }

    SECTION("pure-noise limit") {
        NoiseSchedule nz;
        nz.T = 1;
        nz.beta = {1.0};
        nz.alpha = {0.0};
        nz.alpha_bar = {0.0};
        nz.alpha_bar_prev = {1.0};
        Tensor out = forward_diffuse(x0, 1, eps, nz);
        for (long i = 0; i < out.numel(); ++i) REQUIRE(out[i] == eps[i]);
    }

    SECTION("Monte-Carlo variance at t = 500") {
        // x0 = 0 so the sample variance of x_t estimates 1 - alpha_bar(500).
        const long t = 500;
        const int draws = 10000;
        Tensor zero({1, 3, 2, 2});
        double mean = 0.0, m2 = 0.0;
        long count = 0;
        Rng noise(7);
        for (int d = 0; d < draws; ++d) {
            Tensor e({1, 3, 2, 2});
            noise.fill_normal(e);
            Tensor xt = forward_diffuse(zero, t, e, sc);
            for (long i = 0; i < xt.numel(); ++i) {
                ++count;
                double delta = xt[i] - mean;
                mean += delta / static_cast<double>(count);
                m2 += delta * (xt[i] - mean);
            }
        }
        double var = m2 / static_cast<double>(count - 1);
        double want = 1.0 - sc.alpha_bar_at(t);
        CHECK(testutil::rel_err(var, want) < 0.05);
        CHECK(std::abs(mean) < 0.02);
    }

    SECTION("errors") {
        Tensor wrong({1, 3, 4, 5});
        CHECK_THROWS_AS(forward_diffuse(x0, 500, wrong, sc), DimensionError);
        CHECK_THROWS_AS(forward_diffuse(x0, 0, eps, sc), IndexError);
        CHECK_THROWS_AS(forward_diffuse(x0, 1001, eps, sc), IndexError);
    }
}

TEST_CASE("posterior_step behaviour", "[schedule]") {
    auto sc = make_cosine_schedule(1000, 0.008, 0.999);
    Tensor zero({1, 3, 4, 4});

    SECTION("linearity through the origin") {
        Tensor z({1, 3, 4, 4});
        Tensor out = posterior_step(zero, zero, 500, sc, &z);
        for (long i = 0; i < out.numel(); ++i) REQUIRE(out[i] == 0.0);
    }

    SECTION("deterministic at t = 1") {
        Rng rng(3);
        Tensor x = testutil::random_tensor(rng, {1, 3, 4, 4});
        Tensor e = testutil::random_tensor(rng, {1, 3, 4, 4});
        Tensor a = posterior_step(x, e, 1, sc);
        Tensor b = posterior_step(x, e, 1, sc);
        for (long i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
    }

    SECTION("z contract") {
        Rng rng(4);
        Tensor x = testutil::random_tensor(rng, {1, 3, 4, 4});
        Tensor z = testutil::random_tensor(rng, {1, 3, 4, 4});
        CHECK_THROWS_AS(posterior_step(x, x, 1, sc, &z), ContractError);
        CHECK_THROWS_AS(posterior_step(x, x, 2, sc, nullptr), ContractError);
    }

    SECTION("posterior variance is the small beta-tilde and zero at t = 1") {
        CHECK(sc.sigma2_at(1) == 0.0);
        for (long t : {2L, 100L, 999L}) {
            double want = sc.beta_at(t) * (1.0 - sc.alpha_bar_prev_at(t)) / (1.0 - sc.alpha_bar_at(t));
            CHECK(sc.sigma2_at(t) == Catch::Approx(want));
            CHECK(sc.sigma2_at(t) < sc.beta_at(t));  // beta-tilde below beta
        }
    }
}

TEST_CASE("x0_estimate inverts the forward process", "[schedule]") {
    auto sc = make_cosine_schedule(1000, 0.008, 0.999);
    Rng rng(11);

    SECTION("oracle-noise inversion across timesteps") {
        for (long t : {1L, 250L, 500L, 900L}) {
            Tensor x0 = testutil::random_tensor(rng, {1, 3, 8, 8});
            Tensor eps({1, 3, 8, 8});
            rng.fill_normal(eps);
            Tensor xt = forward_diffuse(x0, t, eps, sc);
            Tensor rec = x0_estimate(xt, eps, t, sc);
            double worst = 0.0;
            for (long i = 0; i < rec.numel(); ++i) worst = std::max(worst, std::abs(rec[i] - x0[i]));
            CHECK(worst < 1e-5);
        }
    }

    SECTION("eps_pred = 0 recovers x0 from the scaled input") {
        long t = 250;
        Tensor x0 = testutil::random_tensor(rng, {1, 3, 4, 4});
        Tensor xt(x0.shape());
        double c = std::sqrt(sc.alpha_bar_at(t));
        for (long i = 0; i < xt.numel(); ++i) xt[i] = c * x0[i];
        Tensor zero(x0.shape());
        Tensor rec = x0_estimate(xt, zero, t, sc);
        for (long i = 0; i < rec.numel(); ++i) REQUIRE(rec[i] == Catch::Approx(x0[i]).margin(1e-12));
    }

    SECTION("clamps to [-1, 1]") {
        long t = 500;
        Tensor xt = Tensor::full({1, 3, 2, 2}, 5.0);
        Tensor zero({1, 3, 2, 2});
        Tensor rec = x0_estimate(xt, zero, t, sc);
        for (long i = 0; i < rec.numel(); ++i) REQUIRE(rec[i] == 1.0);
    }

    SECTION("tiny alpha_bar raises a stability error") {
        NoiseSchedule tiny;
        tiny.T = 1;
        tiny.beta = {0.999};
        tiny.alpha = {0.001};
        tiny.alpha_bar = {1e-9};
        tiny.alpha_bar_prev = {1.0};
        Tensor x({1, 3, 2, 2});
        CHECK_THROWS_AS(x0_estimate(x, x, 1, tiny), NumericError);
    }
}

TEST_CASE("posterior step with oracle noise walks down the corruption ladder", "[schedule]") {
    // Feeding the true noise of a single-step corruption at level t, the
    // posterior step should emit a sample distributed like the level t-1
    // corruption, so the expected reconstruction error decreases
    // monotonically over the sweep. Checked in expectation on a fixed seed
    // battery at a grid of timesteps.
    auto sc = make_cosine_schedule(200, 0.008, 0.999);
    Rng rng(21);
    const int trials = 32;
    const std::vector<long> grid = {200, 150, 100, 50, 25, 10, 2};
    std::vector<double> mean_err(grid.size(), 0.0);
    double x0_second_moment = 0.0;

    for (int trial = 0; trial < trials; ++trial) {
        Tensor x0 = testutil::random_tensor(rng, {1, 3, 6, 6}, -0.8, 0.8);
        for (long i = 0; i < x0.numel(); ++i) {
            x0_second_moment += x0[i] * x0[i] / static_cast<double>(x0.numel() * trials);
        }
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            long t = grid[gi];
            Tensor eps(x0.shape());
            rng.fill_normal(eps);
            Tensor xt = forward_diffuse(x0, t, eps, sc);
            Tensor z(x0.shape());
            rng.fill_normal(z);
            Tensor y = posterior_step(xt, eps, t, sc, &z);
            double err = 0.0;
            for (long i = 0; i < y.numel(); ++i) err += (y[i] - x0[i]) * (y[i] - x0[i]);
            mean_err[gi] += err / static_cast<double>(y.numel() * trials);
        }
    }
    for (size_t gi = 0; gi < grid.size(); ++gi) {
        // the step output matches the t-1 corruption moments:
        // y = sqrt(abar_prev) x0 + noise with variance (1 - abar_prev)
        double ab_prev = sc.alpha_bar_prev_at(grid[gi]);
        double shrink = 1.0 - std::sqrt(ab_prev);
        double want = shrink * shrink * x0_second_moment + (1.0 - ab_prev);
        CHECK(testutil::rel_err(mean_err[gi], want) < 0.15);
        if (gi > 0) REQUIRE(mean_err[gi] < mean_err[gi - 1]);
    }
}
