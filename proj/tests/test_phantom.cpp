#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "tpsplit/phantom.hpp"

using namespace tpsplit;

namespace {

void check_invariants(const Phantom& p) {
    const auto& m = p.vertebra.meta;
    std::size_t overlap = 0, mismatch = 0;
    for (std::size_t v = 0; v < m.voxel_count(); ++v) {
        overlap += p.body.data[v] && p.posterior.data[v];
        mismatch += (p.body.data[v] || p.posterior.data[v]) != (p.vertebra.data[v] != 0);
    }
    CHECK(overlap == 0);
    CHECK(mismatch == 0);
    const auto side = boundary_side_fractions(p);
    CHECK(side[0] >= 0.99);
    CHECK(side[1] >= 0.99);
    CHECK(p.body.count() > 0);
    CHECK(p.posterior.count() > 0);
}

}  // namespace

TEST_CASE("seed mixing and sampling") {
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
    CHECK(mix_seed(7, 3) == mix_seed(7, 3));
    Rng a(42), b(42);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    CHECK(lo >= 0.0);
    CHECK(hi < 1.0);
    CHECK(sum / 10000 == doctest::Approx(0.5).epsilon(0.02));
    // the engine itself is the standard 64-bit Mersenne Twister
    Rng c(5489);
    for (int i = 0; i < 9999; ++i) c.next();
    CHECK(c.next() == 9981545732273789042ULL);
}

TEST_CASE("default phantom") {
    const auto p = generate_phantom(PhantomParams{});
    CHECK(p.body.count() >= 1000);
    CHECK(p.body.count() <= 120000);
    CHECK(p.posterior.count() >= 1000);
    CHECK(p.posterior.count() <= 120000);
    check_invariants(p);
    CHECK_FALSE(p.label.empty());

    const auto again = generate_phantom(PhantomParams{});
    CHECK(again.vertebra.data == p.vertebra.data);
    CHECK(again.body.data == p.body.data);
    CHECK(again.posterior.data == p.posterior.data);
    CHECK(params_to_json(again.params) == params_to_json(p.params));
    CHECK(boundary_to_json(again.true_boundary) == boundary_to_json(p.true_boundary));
}

TEST_CASE("posterior elements lie behind the body") {
    const auto p = generate_phantom(PhantomParams{});
    const auto& m = p.vertebra.meta;
    double body_y = 0.0, post_y = 0.0;
    for (int k = 0; k < m.shape[2]; ++k)
        for (int j = 0; j < m.shape[1]; ++j)
            for (int i = 0; i < m.shape[0]; ++i) {
                const auto v = m.index(i, j, k);
                if (p.body.data[v]) body_y += m.world(1, j);
                if (p.posterior.data[v]) post_y += m.world(1, j);
            }
    CHECK(body_y / p.body.count() < post_y / p.posterior.count());
}

TEST_CASE("flat boundary separates strictly") {
    PhantomParams params;
    params.boundary_curve_amplitude_mm = 0.0;
    params.boundary_tilt = {0.0, 0.0};
    params.noise_amplitude_mm = 0.0;
    const auto p = generate_phantom(params);
    check_invariants(p);
    const auto& m = p.vertebra.meta;
    const double y0 = p.true_boundary(m.world(0, 10), m.world(2, 50));
    CHECK(p.true_boundary(m.world(0, 40), m.world(2, 3)) == doctest::Approx(y0).epsilon(1e-12));
    for (int k = 0; k < m.shape[2]; ++k)
        for (int j = 0; j < m.shape[1]; ++j)
            for (int i = 0; i < m.shape[0]; ++i) {
                const auto v = m.index(i, j, k);
                if (p.body.data[v]) CHECK(m.world(1, j) < y0);
                if (p.posterior.data[v]) CHECK(m.world(1, j) >= y0);
            }
}

TEST_CASE("shapes that leave the volume are rejected") {
    PhantomParams params;
    params.body_radius_mm = {40.0, 10.0};
    CHECK_THROWS(generate_phantom(params));
    params = {};
    params.offset_mm = {0.0, 0.0, 30.0};
    CHECK_THROWS(generate_phantom(params));
    params = {};
    params.arch_thickness_mm = -1.0;
    CHECK_THROWS_AS(generate_phantom(params), std::invalid_argument);
}

TEST_CASE("phantom batch") {
    const PhantomParams base;
    CHECK_THROWS_AS(phantom_batch(0, base, 1), std::invalid_argument);

    const auto one = phantom_batch(1, base, 99);
    REQUIRE(one.size() == 1);
    const auto direct = generate_phantom(jittered_params(base, 99, 0));
    CHECK(one[0].vertebra.data == direct.vertebra.data);
    CHECK(one[0].body.data == direct.body.data);

    const auto batch = phantom_batch(50, base, 7);
    REQUIRE(batch.size() == 50);
    std::set<std::string> labels;
    for (const auto& p : batch) {
        check_invariants(p);
        labels.insert(p.label);
    }
    CHECK(labels.size() >= 3);

    const auto other = phantom_batch(1, base, 8);
    CHECK(other[0].vertebra.data != batch[0].vertebra.data);

    // jitter stays within the configured ranges
    for (int i = 0; i < 20; ++i) {
        const auto jp = jittered_params(base, 3, i);
        const double scale = jp.body_radius_mm[0] / base.body_radius_mm[0];
        CHECK(scale >= 0.75);
        CHECK(scale <= 1.25);
        CHECK(jp.arch_thickness_mm / base.arch_thickness_mm == doctest::Approx(scale));
        CHECK(std::abs(jp.offset_mm[0]) <= 3.0);
        CHECK(jp.boundary_curve_amplitude_mm >= -1.0);
        CHECK(jp.boundary_curve_amplitude_mm <= 2.0);
        CHECK(std::abs(jp.boundary_tilt[0] - base.boundary_tilt[0]) <= 0.12);
    }
}

TEST_CASE("doubling spacing with halved shape keeps world-space shapes") {
    PhantomParams fine;
    PhantomParams coarse;
    coarse.volume = cubic_meta(32, 2.0);
    // align the two volumes' centers
    coarse.volume.origin = {0.5, 0.5, 0.5};
    const auto pf = generate_phantom(fine);
    const auto pc = generate_phantom(coarse);
    const auto& mf = pf.vertebra.meta;
    const auto& mc = pc.vertebra.meta;
    std::size_t checked = 0, bad = 0;
    for (int k = 0; k < 32; ++k)
        for (int j = 0; j < 32; ++j)
            for (int i = 0; i < 32; ++i) {
                const bool coarse_body = pc.body.data[mc.index(i, j, k)] != 0;
                // nearest fine voxel to this coarse center, plus its neighbours
                const int fi = 2 * i, fj = 2 * j, fk = 2 * k;
                bool any = false, all = true;
                for (int dk = 0; dk <= 1; ++dk)
                    for (int dj = 0; dj <= 1; ++dj)
                        for (int di = 0; di <= 1; ++di) {
                            const bool b = pf.body.data[mf.index(fi + di, fj + dj, fk + dk)] != 0;
                            any |= b;
                            all &= b;
                        }
                ++checked;
                // a coarse voxel may disagree only with a fine neighbourhood that straddles the boundary
                if ((coarse_body && !any) || (!coarse_body && all)) ++bad;
            }
    CHECK(checked == 32768);
    CHECK(bad == 0);
    CHECK(static_cast<double>(pc.body.count()) * 8.0 ==
          doctest::Approx(static_cast<double>(pf.body.count())).epsilon(0.1));
}

TEST_CASE("phantom directory round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "tpsplit_tests" / "phantom_io";
    std::filesystem::remove_all(dir);
    const auto p = phantom_batch(1, PhantomParams{}, 5)[0];
    save_phantom(dir, p);
    for (const char* f : {"vertebra.json", "vertebra.raw", "body.json", "body.raw", "posterior.json", "posterior.raw",
                          "params.json"}) {
        CHECK(std::filesystem::is_regular_file(dir / f));
    }
    const auto back = load_phantom(dir);
    CHECK(back.params == p.params);
    CHECK(back.label == p.label);
    CHECK(back.vertebra.data == p.vertebra.data);
    CHECK(back.body.data == p.body.data);
    CHECK(back.posterior.data == p.posterior.data);
    CHECK(back.true_boundary(3.0, 40.0) == p.true_boundary(3.0, 40.0));
}
