#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>

#include "facediff/experts.hpp"
#include "facediff/synthfaces.hpp"
#include "support/testutil.hpp"

using namespace facediff;
namespace ad = facediff::ad;

namespace {

double cosv(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (long i = 0; i < a.numel(); ++i) d += a[i] * b[i];
    return d;
}

double norm(const Tensor& a) { return std::sqrt(cosv(a, a)); }

std::array<double, 8> random_identity(Rng& rng) {
    std::array<double, 8> iv{};
    for (auto& v : iv) v = rng.uniform(-1.0, 1.0);
    return iv;
}

FaceParams random_appearance(Rng& rng, const std::array<double, 8>& iv) {
    FaceParams p;
    p.identity_vector = iv;
    p.pose_yaw = rng.uniform(-0.5, 0.5);
    double gx, gy;
    do {
        gx = rng.uniform(-0.7, 0.7);
        gy = rng.uniform(-0.7, 0.7);
    } while (gx * gx + gy * gy > 0.49);
    double gz = std::sqrt(1.0 - gx * gx - gy * gy);
    p.gaze = {gx, gy, gz};
    p.lighting = rng.uniform(0.5, 1.5);
    p.background_seed = rng.next_u64();
    return p;
}

}  // namespace

TEST_CASE("encoders are deterministic pure functions", "[experts]") {
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(11);
    auto face = render_face(random_appearance(rng, random_identity(rng)), 32);

    auto e1 = enc.encode_identity(face.image);
    auto e2 = enc.encode_identity(face.image);
    REQUIRE(e1.numel() == cfg.d_id);
    for (long i = 0; i < e1.numel(); ++i) REQUIRE(e1[i] == e2[i]);

    auto g1 = enc.encode_gaze(face.image);
    auto g2 = enc.encode_gaze(face.image);
    for (long i = 0; i < 3; ++i) REQUIRE(g1[i] == g2[i]);

    auto [t1, m1] = enc.encode_parsing(face.image);
    auto [t2, m2] = enc.encode_parsing(face.image);
    for (long i = 0; i < t1.numel(); ++i) REQUIRE(t1[i] == t2[i]);
    for (long i = 0; i < m1.numel(); ++i) REQUIRE(m1[i] == m2[i]);

    // same seed, fresh instance -> same weights -> same outputs
    ExpertEncoders enc2(cfg);
    auto e3 = enc2.encode_identity(face.image);
    for (long i = 0; i < e1.numel(); ++i) REQUIRE(e1[i] == e3[i]);

    // different surrogate seed -> different embedding
    ExpertConfig other = cfg;
    other.surrogate_seed = 12345;
    ExpertEncoders enc3(other);
    auto e4 = enc3.encode_identity(face.image);
    double same = 0;
    for (long i = 0; i < e1.numel(); ++i) same += std::abs(e1[i] - e4[i]);
    REQUIRE(same > 1e-6);
}

TEST_CASE("embedding norms and mask normalization", "[experts]") {
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(13);
    for (int i = 0; i < 5; ++i) {
        auto face = render_face(random_appearance(rng, random_identity(rng)), 32);
        CHECK(std::abs(norm(enc.encode_identity(face.image)) - 1.0) < 1e-6);
        CHECK(std::abs(norm(enc.encode_gaze(face.image)) - 1.0) < 1e-6);
        auto [tokens, masks] = enc.encode_parsing(face.image);
        REQUIRE(tokens.all_finite());
        long plane = 32 * 32;
        for (long p = 0; p < plane; ++p) {
            double s = 0.0;
            for (long r = 0; r < cfg.n_regions; ++r) {
                double v = masks[r * plane + p];
                REQUIRE(v >= 0.0);
                s += v;
            }
            REQUIRE(std::abs(s - 1.0) < 1e-5);
        }
    }
}

TEST_CASE("uniform gray image gives uniform region scores", "[experts]") {
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    for (double level : {0.0, 0.25, -0.5}) {
        Tensor gray = Tensor::full({3, 32, 32}, level);
        auto [tokens, masks] = enc.encode_parsing(gray);
        REQUIRE(tokens.all_finite());
        for (long i = 0; i < masks.numel(); ++i) {
            REQUIRE(masks[i] == Catch::Approx(1.0 / static_cast<double>(cfg.n_regions)).margin(1e-9));
        }
    }
}

TEST_CASE("identity embeddings separate identities from appearance", "[experts]") {
    // Monte-Carlo separation oracle on the synthetic generator: pairs of
    // renders of the same identity under different pose/gaze/lighting vs
    // pairs of different identities. Seed-pinned.
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(555);
    const int pairs = 200;
    double within = 0.0, between = 0.0;
    for (int i = 0; i < pairs; ++i) {
        auto ivA = random_identity(rng);
        auto ivB = random_identity(rng);
        auto a1 = render_face(random_appearance(rng, ivA), 32);
        auto a2 = render_face(random_appearance(rng, ivA), 32);
        auto b1 = render_face(random_appearance(rng, ivB), 32);
        auto eA1 = enc.encode_identity(a1.image);
        within += cosv(eA1, enc.encode_identity(a2.image)) / pairs;
        between += cosv(eA1, enc.encode_identity(b1.image)) / pairs;
    }
    INFO("within=" << within << " between=" << between);
    CHECK(within - between > 0.2);  // measured ~0.35 on this battery
    CHECK(within > between);
}

TEST_CASE("eye-region scores concentrate in the true eye boxes", "[experts]") {
    // Overlap oracle against the generator's ground-truth masks: the eye
    // channel's mass inside true eye pixels relative to a uniform spread.
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(777);
    double conc = 0.0, baseline = 0.0;
    const int faces = 100;
    long plane = 32 * 32;
    for (int i = 0; i < faces; ++i) {
        auto f = render_face(random_appearance(rng, random_identity(rng)), 32);
        auto [tokens, masks] = enc.encode_parsing(f.image);
        double mass_in = 0.0, mass_total = 0.0, box = 0.0;
        for (long p = 0; p < plane; ++p) {
            double m = masks[static_cast<long>(Region::Eyes) * plane + p];
            mass_total += m;
            if (f.gt_masks[static_cast<long>(Region::Eyes) * plane + p] > 0.5) {
                mass_in += m;
                box += 1.0;
            }
        }
        conc += mass_in / mass_total / faces;
        baseline += box / static_cast<double>(plane) / faces;
    }
    INFO("concentration=" << conc << " uniform baseline=" << baseline);
    CHECK(conc >= 2.0 * baseline);
}

TEST_CASE("gaze encoder output flips with rendered gaze", "[experts]") {
    // Sign-consistency oracle: laterally opposite ground-truth gaze pairs
    // must give surrogate outputs with negative mean dot product.
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(888);
    const int pairs = 100;
    double mean_dot = 0.0;
    for (int i = 0; i < pairs; ++i) {
        FaceParams p = random_appearance(rng, random_identity(rng));
        double gx = rng.uniform(0.3, 0.65);
        double gy = rng.uniform(-0.3, 0.3);
        if (gx * gx + gy * gy >= 0.49) gy *= 0.5;
        double gz = std::sqrt(1.0 - gx * gx - gy * gy);
        p.gaze = {gx, gy, gz};
        auto f1 = render_face(p, 32);
        p.gaze = {-gx, -gy, gz};
        auto f2 = render_face(p, 32);
        mean_dot += cosv(enc.encode_gaze(f1.image), enc.encode_gaze(f2.image)) / pairs;
    }
    INFO("mean opposite-gaze dot=" << mean_dot);
    CHECK(mean_dot < -0.2);  // measured ~ -0.6 on this battery
}

TEST_CASE("build_condition composes and satisfies bundle invariants", "[experts]") {
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Rng rng(31);
    auto face = render_face(random_appearance(rng, random_identity(rng)), 32);

    auto b1 = enc.build_condition(face.image);
    auto b2 = enc.build_condition(face.image);
    for (long i = 0; i < b1.e_id.numel(); ++i) REQUIRE(b1.e_id[i] == b2.e_id[i]);
    for (long i = 0; i < b1.e_gaze.numel(); ++i) REQUIRE(b1.e_gaze[i] == b2.e_gaze[i]);

    CHECK(std::abs(norm(b1.e_id) - 1.0) < 1e-6);
    CHECK(std::abs(norm(b1.e_gaze) - 1.0) < 1e-6);
    CHECK(b1.e_parse.dim(0) == cfg.n_regions);
    CHECK(b1.e_parse.dim(1) == cfg.d_parse);
    CHECK(b1.region_masks.dim(0) == cfg.n_regions);

    // clearly different identity parameters -> visibly different embeddings
    std::array<double, 8> ivA{}, ivB{};
    ivA.fill(0.8);
    ivB.fill(-0.8);
    FaceParams pa = random_appearance(rng, ivA);
    FaceParams pb = pa;
    pb.identity_vector = ivB;
    auto fA = render_face(pa, 32);
    auto fB = render_face(pb, 32);
    double c = cosv(enc.build_condition(fA.image).e_id, enc.build_condition(fB.image).e_id);
    CHECK(c < 0.99);
}

TEST_CASE("encoders are differentiable in the image", "[experts]") {
    // finite-difference gradient of output coordinates wrt 10 random pixels
    ExpertConfig cfg;
    cfg.image_size = 16;  // keep the check quick
    ExpertEncoders enc(cfg);
    Rng rng(99);
    auto face = render_face(random_appearance(rng, random_identity(rng)), 16);
    auto coords = testutil::random_coords(rng, face.image.numel(), 10);

    SECTION("identity") {
        long k = rng.uniform_int(0, cfg.d_id - 1);
        Tensor pick({cfg.d_id});
        pick[k] = 1.0;
        auto r = testutil::grad_check(
            [&](const ad::Value& img) { return ad::dotv(enc.encode_identity_g(img), ad::constant(pick)); },
            face.image, coords);
        INFO("worst " << r.max_rel_err << " analytic " << r.analytic << " numeric " << r.numeric);
        CHECK(r.max_rel_err < 1e-4);
    }
    SECTION("parsing tokens") {
        long k = rng.uniform_int(0, cfg.n_regions * cfg.d_parse - 1);
        Tensor pick({cfg.n_regions * cfg.d_parse});
        pick[k] = 1.0;
        auto r = testutil::grad_check(
            [&](const ad::Value& img) {
                auto [tokens, masks] = enc.encode_parsing_g(img);
                return ad::dotv(ad::reshape(tokens, {cfg.n_regions * cfg.d_parse}), ad::constant(pick));
            },
            face.image, coords);
        CHECK(r.max_rel_err < 1e-4);
    }
    SECTION("gaze") {
        for (long k : {0L, 1L, 2L}) {
            Tensor pick({3});
            pick[k] = 1.0;
            auto r = testutil::grad_check(
                [&](const ad::Value& img) { return ad::dotv(enc.encode_gaze_g(img), ad::constant(pick)); },
                face.image, coords);
            CHECK(r.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("encoder input validation", "[experts]") {
    ExpertConfig cfg;
    ExpertEncoders enc(cfg);
    Tensor wrong({3, 16, 16});
    CHECK_THROWS_AS(enc.encode_identity(wrong), DimensionError);
    CHECK_THROWS_AS(enc.encode_parsing(wrong), DimensionError);
    CHECK_THROWS_AS(enc.encode_gaze(wrong), DimensionError);

    // rank-4 single-sample input is accepted
    Tensor ok({1, 3, 32, 32});
    CHECK_NOTHROW(enc.encode_identity(ok));

    ExpertConfig bad;
    bad.d_id = 0;
    CHECK_THROWS_AS(ExpertEncoders(bad), ConfigError);
    bad = ExpertConfig{};
    bad.image_size = 18;
    CHECK_THROWS_AS(ExpertEncoders(bad), ConfigError);
}
