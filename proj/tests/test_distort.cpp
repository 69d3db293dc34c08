#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "fixtures.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/distort.hpp"
#include "qdiff/errors.hpp"

using namespace qdiff;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

bool same_values(const Patch3D& a, const Patch3D& b) {
    return a.same_dims(b) &&
           std::memcmp(a.values.data(), b.values.data(),
                       a.values.size() * sizeof(float)) == 0;
}

// Flat indices of cells where the two patches differ.
std::set<std::size_t> changed_cells(const Patch3D& before,
                                    const Patch3D& after) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < before.values.size(); ++i)
        if (before.values[i] != after.values[i]) out.insert(i);
    return out;
}

}  // namespace

TEST_CASE("layout for 7x7x20 has the documented 36-component shape") {
    Layout l = build_layout({7, 7, 20});
    CHECK(l.total_length == 36);
    REQUIRE(l.slots.size() == 8);

    auto check_slot = [&](std::size_t i, DistortionFamily fam,
                          std::size_t offset, std::size_t n) {
        CHECK(l.slots[i].family == fam);
        CHECK(l.slots[i].offset == offset);
        CHECK(l.slots[i].components.size() == n);
        CHECK(l.slots[i].components[0].kind == SlotKind::activation_switch);
        CHECK(l.slots[i].components[0].lo == 0.0);
        CHECK(l.slots[i].components[0].hi == 1.0);
    };
    check_slot(0, DistortionFamily::continuous_dropout, 0, 7);
    check_slot(1, DistortionFamily::discontinuous_dropout, 7, 8);
    check_slot(2, DistortionFamily::stripping, 15, 5);
    check_slot(3, DistortionFamily::band_loss, 20, 5);
    check_slot(4, DistortionFamily::salt_pepper, 25, 2);
    check_slot(5, DistortionFamily::gaussian_noise, 27, 5);
    check_slot(6, DistortionFamily::rotation, 32, 2);
    check_slot(7, DistortionFamily::zoom, 34, 2);

    CHECK(l.component(3).name == "row");
    CHECK(l.component(3).kind == SlotKind::coordinate);
    CHECK(l.component(3).hi == 7.0);
    CHECK(l.component(21).name == "count");
    CHECK(l.component(22).lo == 1.0);   // interior bands only
    CHECK(l.component(22).hi == 19.0);
    CHECK(l.component(33).name == "angle_deg");
    CHECK(l.component(33).lo == -45.0);
    CHECK(l.component(35).name == "factor");
    CHECK(l.component(35).identity == 1.0);
    CHECK(l.slot_index(DistortionFamily::band_loss) == 3);
    CHECK_THROWS_AS(l.component(36), ConfigError);
    CHECK_THROWS_AS(build_layout({0, 7, 20}), ConfigError);
}

TEST_CASE("layouts for thin-band patches drop the band-loss family") {
    Layout l = build_layout({5, 5, 2});
    CHECK(l.total_length == 31);
    CHECK(l.slots.size() == 7);
    CHECK(!l.slot_index(DistortionFamily::band_loss).has_value());
    CHECK(l.slots[3].family == DistortionFamily::salt_pepper);
    CHECK(l.slots[3].offset == 20);

    CHECK(build_layout({5, 5, 3}).total_length == 36 - 0);  // 3 bands keep it
    CHECK(build_layout({5, 5, 3}).slots.size() == 8);
}

TEST_CASE("default bounds mirror the layout and clamp componentwise") {
    Layout l = build_layout({7, 7, 20});
    DistortionBounds b = DistortionBounds::defaults(l);
    REQUIRE(b.ranges.size() == 36);
    for (std::size_t i = 0; i < 36; ++i) {
        CHECK(b.ranges[i].first == l.component(i).lo);
        CHECK(b.ranges[i].second == l.component(i).hi);
    }
    CHECK(b.clamp(0, -0.5) == 0.0);
    CHECK(b.clamp(0, 2.0) == 1.0);
    CHECK(b.clamp(33, -90.0) == -45.0);
    CHECK(b.clamp(33, 10.0) == 10.0);
}

TEST_CASE("continuous dropout fills exactly the addressed component") {
    Dims3 dims{5, 6, 3};
    Patch3D p = fixtures::random_patch(dims, 301, 0.2, 0.8);
    PatchStats ref = compute_stats(p);

    Patch3D line = apply_continuous_dropout(p, ComponentKind::line, 2, 0, 1, 1,
                                            FillKind::min_fill, ref);
    for (std::uint32_t i = 0; i < 5; ++i)
        for (std::uint32_t j = 0; j < 6; ++j)
            for (std::uint32_t k = 0; k < 3; ++k) {
                float want = i == 2 ? static_cast<float>(ref.min) : p.at(i, j, k);
                CHECK(line.at(i, j, k) == want);
            }

    Patch3D col = apply_continuous_dropout(p, ComponentKind::column, 0, 4, 1, 1,
                                           FillKind::max_fill, ref);
    for (std::uint32_t i = 0; i < 5; ++i)
        for (std::uint32_t j = 0; j < 6; ++j)
            for (std::uint32_t k = 0; k < 3; ++k) {
                float want = j == 4 ? static_cast<float>(ref.max) : p.at(i, j, k);
                CHECK(col.at(i, j, k) == want);
            }

    // region clips at the patch edge
    Patch3D reg = apply_continuous_dropout(p, ComponentKind::region, 3, 4, 4, 4,
                                           FillKind::min_fill, ref);
    for (std::uint32_t i = 0; i < 5; ++i)
        for (std::uint32_t j = 0; j < 6; ++j)
            for (std::uint32_t k = 0; k < 3; ++k) {
                bool in = i >= 3 && j >= 4;
                float want = in ? static_cast<float>(ref.min) : p.at(i, j, k);
                CHECK(reg.at(i, j, k) == want);
            }

    CHECK_THROWS_AS(apply_continuous_dropout(p, ComponentKind::line, 5, 0, 1, 1,
                                             FillKind::min_fill, ref),
                    ShapeError);
    CHECK_THROWS_AS(apply_continuous_dropout(p, ComponentKind::region, 0, 0, 0,
                                             2, FillKind::min_fill, ref),
                    ShapeError);
}

TEST_CASE("discontinuous dropout hits ceil(fraction*n) pixels inside the rect") {
    Dims3 dims{6, 6, 2};
    Patch3D p = fixtures::random_patch(dims, 302, 0.2, 0.8);
    PatchStats ref = compute_stats(p);

    Rng rng(17, 1);
    Patch3D out = apply_discontinuous_dropout(p, ComponentKind::region, 1, 1, 4,
                                              4, 0.25, FillKind::max_fill, ref,
                                              rng);
    // 16-pixel rect, fraction 0.25 -> 4 pixels, each filled across both bands
    std::set<std::size_t> pixels;
    for (std::uint32_t i = 0; i < 6; ++i)
        for (std::uint32_t j = 0; j < 6; ++j) {
            bool b0 = out.at(i, j, 0) != p.at(i, j, 0);
            bool b1 = out.at(i, j, 1) != p.at(i, j, 1);
            if (b0 || b1) {
                CHECK(i >= 1);
                CHECK(i <= 4);
                CHECK(j >= 1);
                CHECK(j <= 4);
                CHECK(out.at(i, j, 0) == static_cast<float>(ref.max));
                CHECK(out.at(i, j, 1) == static_cast<float>(ref.max));
                pixels.insert(i * 6 + j);
            }
        }
    CHECK(pixels.size() == 4);

    // same incoming rng state reproduces the same pick
    Rng rng2(17, 1);
    Patch3D out2 = apply_discontinuous_dropout(p, ComponentKind::region, 1, 1,
                                               4, 4, 0.25, FillKind::max_fill,
                                               ref, rng2);
    CHECK(same_values(out, out2));

    Rng rng3(17, 1);
    CHECK_THROWS_AS(apply_discontinuous_dropout(p, ComponentKind::line, 0, 0, 1,
                                                1, 0.0, FillKind::max_fill, ref,
                                                rng3),
                    ConfigError);
}

TEST_CASE("stripping matches its closed-form rescale") {
    Dims3 dims{4, 5, 2};
    Patch3D p = fixtures::random_patch(dims, 303, 0.1, 0.9);
    PatchStats ref = compute_stats(p);
    double m_d = ref.mean + 0.3;
    double sigma_d = 2.0 * ref.stddev;

    Patch3D out = apply_stripping(p, ComponentKind::column, 3, m_d, sigma_d, ref);
    double scale = sigma_d / ref.stddev;
    for (std::uint32_t i = 0; i < 4; ++i)
        for (std::uint32_t j = 0; j < 5; ++j)
            for (std::uint32_t k = 0; k < 2; ++k) {
                float want =
                    j == 3 ? static_cast<float>(
                                 scale * (p.at(i, j, k) - ref.mean) + m_d)
                           : p.at(i, j, k);
                CHECK(out.at(i, j, k) == want);
            }

    // sigma_d = 0 collapses the stripe onto m_d
    Patch3D flat = apply_stripping(p, ComponentKind::line, 1, 0.5, 0.0, ref);
    for (std::uint32_t j = 0; j < 5; ++j)
        for (std::uint32_t k = 0; k < 2; ++k)
            CHECK(flat.at(1, j, k) == 0.5f);

    // constant reference is a reported no-op
    Patch3D constant(3, 3, 2, 1.0f);
    bool degenerate = false;
    Patch3D same = apply_stripping(constant, ComponentKind::line, 0, 5.0, 1.0,
                                   compute_stats(constant), &degenerate);
    CHECK(degenerate);
    CHECK(same_values(same, constant));

    CHECK_THROWS_AS(apply_stripping(p, ComponentKind::region, 0, 0.0, 1.0, ref),
                    ConfigError);
}

TEST_CASE("band loss averages original neighbors without cascading") {
    Dims3 dims{2, 2, 4};
    Patch3D p = fixtures::random_patch(dims, 304, 0.0, 1.0);

    Patch3D out = apply_band_loss(p, {1, 2});
    for (std::uint32_t i = 0; i < 2; ++i)
        for (std::uint32_t j = 0; j < 2; ++j) {
            CHECK(out.at(i, j, 0) == p.at(i, j, 0));
            CHECK(out.at(i, j, 3) == p.at(i, j, 3));
            CHECK(out.at(i, j, 1) ==
                  static_cast<float>((static_cast<double>(p.at(i, j, 0)) +
                                      p.at(i, j, 2)) / 2.0));
            // band 2 must use the ORIGINAL band 1, not the averaged one
            CHECK(out.at(i, j, 2) ==
                  static_cast<float>((static_cast<double>(p.at(i, j, 1)) +
                                      p.at(i, j, 3)) / 2.0));
        }
    // order of the selection list does not matter
    CHECK(same_values(out, apply_band_loss(p, {2, 1})));

    std::uint32_t clamped = 0;
    Patch3D edge = apply_band_loss(p, {0, 3}, &clamped);
    CHECK(clamped == 2);  // 0 -> 1, 3 -> 2
    CHECK(same_values(edge, apply_band_loss(p, {1, 2})));

    Patch3D thin(2, 2, 2, 0.5f);
    CHECK_THROWS_AS(apply_band_loss(thin, {1}), ShapeError);
}

TEST_CASE("salt & pepper flips the right number of cells to the extremes") {
    Dims3 dims{5, 5, 4};
    Patch3D p = fixtures::random_patch(dims, 305, 0.2, 0.8);
    PatchStats ref = compute_stats(p);
    float mn = static_cast<float>(ref.min), mx = static_cast<float>(ref.max);

    Rng rng(23, 1);
    Patch3D out = apply_salt_pepper(p, 0.1, ref, rng);  // 10 of 100 cells
    auto flipped = changed_cells(p, out);
    CHECK(flipped.size() <= 10);
    CHECK(flipped.size() >= 8);  // only the min/max cells can self-collide
    for (std::size_t i : flipped)
        CHECK((out.values[i] == mn || out.values[i] == mx));

    Rng rs(23, 1);
    Patch3D salt = apply_salt_pepper(p, 0.1, ref, rs, SaltPepperForce::all_salt);
    for (std::size_t i : changed_cells(p, salt)) CHECK(salt.values[i] == mx);
    Rng rp(23, 1);
    Patch3D pep = apply_salt_pepper(p, 0.1, ref, rp, SaltPepperForce::all_pepper);
    for (std::size_t i : changed_cells(p, pep)) CHECK(pep.values[i] == mn);

    // a lower density from the same rng state picks a nested prefix
    Rng ra(23, 1), rb(23, 1);
    auto small = changed_cells(
        p, apply_salt_pepper(p, 0.05, ref, ra, SaltPepperForce::all_salt));
    auto big = changed_cells(
        p, apply_salt_pepper(p, 0.3, ref, rb, SaltPepperForce::all_salt));
    for (std::size_t i : small) CHECK(big.count(i) == 1);

    Rng rz(23, 1);
    CHECK_THROWS_AS(apply_salt_pepper(p, 0.0, ref, rz), ConfigError);
    CHECK_THROWS_AS(apply_salt_pepper(p, 1.5, ref, rz), ConfigError);
}

TEST_CASE("gaussian noise targets the documented pixel/band cross product") {
    Dims3 dims{4, 5, 6};  // 20 pixels, 6 bands
    Patch3D p = fixtures::random_patch(dims, 306, 0.0, 1.0);

    // sigma 0 makes every hit an exact +mu, so the target set is observable
    Rng r1(9, 1);
    Patch3D spec = apply_gaussian(p, GaussianAxis::spectral, 0.5, 0.0, 0.25, r1);
    std::set<std::uint32_t> pixels;
    for (std::uint32_t i = 0; i < 4; ++i)
        for (std::uint32_t j = 0; j < 5; ++j) {
            int bands_hit = 0;
            for (std::uint32_t k = 0; k < 6; ++k)
                if (spec.at(i, j, k) != p.at(i, j, k)) {
                    CHECK(spec.at(i, j, k) ==
                          static_cast<float>(p.at(i, j, k) + 0.5));
                    ++bands_hit;
                }
            if (bands_hit > 0) {
                CHECK(bands_hit == 6);  // spectral = whole spectrum
                pixels.insert(i * 5 + j);
            }
        }
    CHECK(pixels.size() == 5);  // ceil(0.25 * 20)

    Rng r2(9, 1);
    Patch3D spat = apply_gaussian(p, GaussianAxis::spatial, 0.5, 0.0, 0.4, r2);
    auto hits = changed_cells(p, spat);
    CHECK(hits.size() == 8 * 3);  // ceil(0.4*20) pixels x ceil(0.4*6) bands

    // nested pixel subsets for growing fractions under the same rng state
    Rng ra(9, 1), rb(9, 1);
    auto few = changed_cells(
        p, apply_gaussian(p, GaussianAxis::spectral, 0.5, 0.0, 0.1, ra));
    auto many = changed_cells(
        p, apply_gaussian(p, GaussianAxis::spectral, 0.5, 0.0, 0.6, rb));
    for (std::size_t i : few) CHECK(many.count(i) == 1);

    Rng rz(9, 1);
    CHECK_THROWS_AS(
        apply_gaussian(p, GaussianAxis::spectral, 0.0, -1.0, 0.5, rz),
        ConfigError);
    CHECK_THROWS_AS(
        apply_gaussian(p, GaussianAxis::spectral, 0.0, 1.0, 0.0, rz),
        ConfigError);
}

TEST_CASE("rotation is exact at quarter turns and mean-fills outside") {
    Dims3 dims{5, 5, 2};
    Patch3D p = fixtures::random_patch(dims, 307, 0.0, 1.0);
    PatchStats ref = compute_stats(p);

    CHECK(same_values(apply_rotation(p, 0.0, ref), p));

    Patch3D quarter = apply_rotation(p, 90.0, ref);
    for (std::uint32_t r = 0; r < 5; ++r)
        for (std::uint32_t c = 0; c < 5; ++c)
            for (std::uint32_t k = 0; k < 2; ++k)
                CHECK(quarter.at(r, c, k) == p.at(c, 4 - r, k));

    // two quarter turns = one half turn
    PatchStats qref = compute_stats(quarter);
    CHECK(same_values(apply_rotation(quarter, 90.0, qref),
                      apply_rotation(p, 180.0, ref)));

    Patch3D tilted = apply_rotation(p, 45.0, ref);
    float mean = static_cast<float>(ref.mean);
    CHECK(tilted.at(0, 0, 0) == mean);  // corner swings outside
    CHECK(tilted.at(0, 0, 1) == mean);
    CHECK(!same_values(tilted, p));
    CHECK(tilted.at(2, 2, 0) == p.at(2, 2, 0));  // center is a fixed point
}

TEST_CASE("zoom pairs output cells to exactly computable source cells") {
    Dims3 dims{4, 4, 2};
    Patch3D p = fixtures::random_patch(dims, 308, 0.0, 1.0);
    PatchStats ref = compute_stats(p);

    CHECK(same_values(apply_zoom(p, 1.0, ref), p));

    // factor 0.5 magnifies: rows/cols {0,1}->1 and {2,3}->2 (pixel doubling
    // of the middle 2x2 block)
    Patch3D mag = apply_zoom(p, 0.5, ref);
    auto src = [](std::uint32_t r) { return r < 2 ? 1u : 2u; };
    for (std::uint32_t r = 0; r < 4; ++r)
        for (std::uint32_t c = 0; c < 4; ++c)
            for (std::uint32_t k = 0; k < 2; ++k)
                CHECK(mag.at(r, c, k) == p.at(src(r), src(c), k));

    // factor 2 shrinks: only outputs whose doubled offset stays inside keep
    // source data, the rest take the original mean
    Patch3D shrunk = apply_zoom(p, 2.0, ref);
    float mean = static_cast<float>(ref.mean);
    for (std::uint32_t r = 0; r < 4; ++r)
        for (std::uint32_t c = 0; c < 4; ++c) {
            double sr = 1.5 + 2.0 * (r - 1.5), sc = 1.5 + 2.0 * (c - 1.5);
            long ri = static_cast<long>(std::floor(sr + 0.5));
            long ci = static_cast<long>(std::floor(sc + 0.5));
            bool inside = ri >= 0 && ci >= 0 && ri < 4 && ci < 4;
            for (std::uint32_t k = 0; k < 2; ++k)
                CHECK(shrunk.at(r, c, k) ==
                      (inside ? p.at(static_cast<std::uint32_t>(ri),
                                     static_cast<std::uint32_t>(ci), k)
                              : mean));
        }

    CHECK_THROWS_AS(apply_zoom(p, 0.0, ref), ConfigError);
}

TEST_CASE("decode of an all-zero vector is the identity") {
    Dims3 dims{7, 7, 20};
    Layout layout = build_layout(dims);
    DistortionBounds bounds = DistortionBounds::defaults(layout);
    std::vector<float> zeros(layout.total_length, 0.0f);
    for (int t = 0; t < 100; ++t) {
        Patch3D p = fixtures::random_patch(dims, 6000 + t, -3.0, 3.0);
        CHECK(same_values(decode(layout, bounds, zeros, p, t), p));
    }
}

TEST_CASE("decode is deterministic in (vector, patch, seed)") {
    Dims3 dims{6, 6, 5};
    Layout layout = build_layout(dims);
    DistortionBounds bounds = DistortionBounds::defaults(layout);
    Patch3D p = fixtures::random_patch(dims, 311, 0.0, 1.0);

    Rng rng(55, 3);
    std::vector<float> vec(layout.total_length);
    for (std::size_t i = 0; i < vec.size(); ++i) {
        const auto& [lo, hi] = bounds.ranges[i];
        vec[i] = static_cast<float>(rng.uniform(lo, hi));
    }
    Patch3D a = decode(layout, bounds, vec, p, 12345);
    Patch3D b = decode(layout, bounds, vec, p, 12345);
    CHECK(same_values(a, b));

    // stochastic families react to the decode seed: flip only salt & pepper
    std::vector<float> sp(layout.total_length, 0.0f);
    std::size_t off = layout.slots[*layout.slot_index(
        DistortionFamily::salt_pepper)].offset;
    sp[off] = 1.0f;
    sp[off + 1] = 0.05f;
    CHECK(!same_values(decode(layout, bounds, sp, p, 1),
                       decode(layout, bounds, sp, p, 2)));
}

TEST_CASE("decode clamps components into bounds before use") {
    Dims3 dims{5, 5, 4};
    Layout layout = build_layout(dims);
    DistortionBounds bounds = DistortionBounds::defaults(layout);
    Patch3D p = fixtures::random_patch(dims, 312, 0.0, 1.0);

    std::size_t off =
        layout.slots[*layout.slot_index(DistortionFamily::rotation)].offset;
    std::vector<float> wild(layout.total_length, 0.0f);
    wild[off] = 7.5f;        // any value >= 0.5 switches on
    wild[off + 1] = 500.0f;  // clamps to the +45 degree edge
    std::vector<float> edge(layout.total_length, 0.0f);
    edge[off] = 1.0f;
    edge[off + 1] = 45.0f;
    CHECK(same_values(decode(layout, bounds, wild, p, 9),
                      decode(layout, bounds, edge, p, 9)));

    std::vector<float> wrong_len(layout.total_length - 1, 0.0f);
    CHECK_THROWS_AS(decode(layout, bounds, wrong_len, p, 0), ShapeError);
    DistortionBounds short_bounds;
    short_bounds.ranges.assign(3, {0.0, 1.0});
    std::vector<float> zeros(layout.total_length, 0.0f);
    CHECK_THROWS_AS(decode(layout, short_bounds, zeros, p, 0), ConfigError);
    Patch3D other = fixtures::random_patch({4, 4, 4}, 1);
    CHECK_THROWS_AS(decode(layout, bounds, zeros, other, 0), ShapeError);
}

TEST_CASE("decode composes enabled families in registry order on original stats") {
    Dims3 dims{6, 6, 4};
    Layout layout = build_layout(dims);
    DistortionBounds bounds = DistortionBounds::defaults(layout);
    Patch3D p = fixtures::random_patch(dims, 313, 0.0, 1.0);
    PatchStats ref = compute_stats(p);

    std::vector<float> vec(layout.total_length, 0.0f);
    std::size_t cd =
        layout.slots[*layout.slot_index(DistortionFamily::continuous_dropout)]
            .offset;
    vec[cd] = 1.0f;
    vec[cd + 1] = 0.0f;  // line
    vec[cd + 2] = 0.0f;  // min fill
    vec[cd + 3] = 2.0f;  // row 2
    vec[cd + 4] = 0.0f;
    vec[cd + 5] = 1.0f;
    vec[cd + 6] = 1.0f;
    std::size_t rot =
        layout.slots[*layout.slot_index(DistortionFamily::rotation)].offset;
    vec[rot] = 0.9f;
    vec[rot + 1] = 30.0f;

    Patch3D got = decode(layout, bounds, vec, p, 77);
    Patch3D step1 = apply_continuous_dropout(p, ComponentKind::line, 2, 0, 1, 1,
                                             FillKind::min_fill, ref);
    Patch3D want = apply_rotation(step1, 30.0, ref);  // ref stays the original's
    CHECK(same_values(got, want));
}

TEST_CASE("decode discretizes selectors by min(floor(v), n-1)") {
    Dims3 dims{5, 5, 4};
    Layout layout = build_layout(dims);
    DistortionBounds bounds = DistortionBounds::defaults(layout);
    Patch3D p = fixtures::random_patch(dims, 314, 0.2, 0.8);
    PatchStats ref = compute_stats(p);

    auto dropout_with = [&](float comp_sel, float row, float col) {
        std::vector<float> vec(layout.total_length, 0.0f);
        vec[0] = 1.0f;
        vec[1] = comp_sel;
        vec[2] = 0.0f;
        vec[3] = row;
        vec[4] = col;
        vec[5] = 2.0f;
        vec[6] = 2.0f;
        return decode(layout, bounds, vec, p, 5);
    };
    // 2.7 -> option 2 (region); selector hi value 3.0 also lands on region
    Patch3D want_region = apply_continuous_dropout(
        p, ComponentKind::region, 1, 3, 2, 2, FillKind::min_fill, ref);
    CHECK(same_values(dropout_with(2.7f, 1.4f, 3.9f), want_region));
    CHECK(same_values(dropout_with(3.0f, 1.4f, 3.9f), want_region));
    // coordinate at the hi edge -> last row
    Patch3D want_last_line = apply_continuous_dropout(
        p, ComponentKind::line, 4, 0, 2, 2, FillKind::min_fill, ref);
    CHECK(same_values(dropout_with(0.9f, 5.0f, 0.0f), want_last_line));
}

TEST_CASE("bound tuning narrows parameters toward identity with converging audit") {
    Dims3 dims{5, 5, 4};
    Layout layout = build_layout(dims);
    DistortionBounds start = DistortionBounds::defaults(layout);
    PatchSet set = fixtures::random_patchset(dims, 3, 881, 0.0, 1.0);

    Rng rng(5, 1);
    TuneResult r = tune_bounds(layout, start, set, 32.0, 100, rng);
    REQUIRE(r.bounds.ranges.size() == layout.total_length);

    for (std::size_t i = 0; i < layout.total_length; ++i) {
        const SlotComponent& c = layout.component(i);
        auto [lo0, hi0] = start.ranges[i];
        auto [lo1, hi1] = r.bounds.ranges[i];
        if (c.kind != SlotKind::parameter) {
            CHECK(lo1 == lo0);
            CHECK(hi1 == hi0);
        } else {
            CHECK(std::abs(lo1 - c.identity) <=
                  std::abs(lo0 - c.identity) + 1e-12);
            CHECK(std::abs(hi1 - c.identity) <=
                  std::abs(hi0 - c.identity) + 1e-12);
            CHECK(lo1 <= hi1);
        }
    }

    // audit trail: per family, halvings count up from 0 and the last row
    // either converged or exhausted its 10 halvings
    std::map<DistortionFamily, std::vector<TuneResult::AuditRow>> byfam;
    for (const auto& row : r.trail) byfam[row.family].push_back(row);
    CHECK(byfam.size() == layout.slots.size());
    for (const auto& [fam, rows] : byfam) {
        for (std::size_t i = 0; i < rows.size(); ++i)
            CHECK(rows[i].halvings == i);
        const auto& last = rows.back();
        // a family with nothing to narrow (band_loss) may stop unconverged
        if (fam != DistortionFamily::band_loss)
            CHECK((last.converged || last.halvings == 10));
        if (last.converged) CHECK(last.median_psnr >= 32.0);
    }

    // scale-like families shrink per-sample errors monotonically, so their
    // audit medians cannot decrease
    for (DistortionFamily fam :
         {DistortionFamily::continuous_dropout, DistortionFamily::stripping,
          DistortionFamily::salt_pepper, DistortionFamily::gaussian_noise}) {
        const auto& rows = byfam[fam];
        for (std::size_t i = 1; i < rows.size(); ++i)
            CHECK(rows[i].median_psnr >= rows[i - 1].median_psnr - 1e-9);
    }

    // families without parameter components measure once and stop
    CHECK(byfam[DistortionFamily::band_loss].size() == 1);
    CHECK(byfam[DistortionFamily::band_loss][0].halvings == 0);

    // determinism
    Rng rng2(5, 1);
    TuneResult r2 = tune_bounds(layout, start, set, 32.0, 100, rng2);
    CHECK(r2.bounds.ranges == r.bounds.ranges);
    REQUIRE(r2.trail.size() == r.trail.size());
    for (std::size_t i = 0; i < r.trail.size(); ++i) {
        CHECK(r2.trail[i].family == r.trail[i].family);
        CHECK(r2.trail[i].halvings == r.trail[i].halvings);
        CHECK(r2.trail[i].median_psnr == r.trail[i].median_psnr);
        CHECK(r2.trail[i].converged == r.trail[i].converged);
    }

    Rng rng3(5, 1);
    CHECK_THROWS_AS(tune_bounds(layout, start, set, 32.0, 99, rng3),
                    ConfigError);
    CHECK_THROWS_AS(tune_bounds(layout, start, PatchSet{}, 32.0, 100, rng3),
                    ConfigError);
}

TEST_CASE("an already-quiet threshold leaves the bounds untouched") {
    Dims3 dims{4, 4, 3};
    Layout layout = build_layout(dims);
    DistortionBounds start = DistortionBounds::defaults(layout);
    PatchSet set = fixtures::random_patchset(dims, 2, 900, 0.0, 1.0);
    Rng rng(8, 1);
    TuneResult r = tune_bounds(layout, start, set, -10.0, 100, rng);
    CHECK(r.bounds.ranges == start.ranges);
    CHECK(r.trail.size() == layout.slots.size());  // one measurement each
    for (const auto& row : r.trail) {
        CHECK(row.halvings == 0);
        CHECK(row.converged);
    }
}

TEST_CASE("bounds files round-trip and are validated against the layout") {
    Dims3 dims{5, 5, 4};
    Layout layout = build_layout(dims);
    DistortionBounds b = DistortionBounds::defaults(layout);
    b.ranges[1] = {0.5, 2.5};   // narrow a selector
    b.ranges[33] = {-10, 10};   // narrow the rotation angle
    std::string path = temp_path("qdiff_test_bounds.json");
    save_bounds(b, layout, path);
    DistortionBounds back = load_bounds(path, layout);
    CHECK(back.ranges == b.ranges);

    // a layout with other dims rejects the file
    CHECK_THROWS_AS(load_bounds(path, build_layout({6, 6, 4})), FormatError);

    // widening a range beyond the layout default is rejected
    DistortionBounds wide = DistortionBounds::defaults(layout);
    wide.ranges[0] = {0.0, 2.0};
    save_bounds(wide, layout, path);
    CHECK_THROWS_AS(load_bounds(path, layout), FormatError);

    DistortionBounds mismatched;
    mismatched.ranges.assign(3, {0.0, 1.0});
    CHECK_THROWS_AS(save_bounds(mismatched, layout, path), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("dii records encode to the documented little-endian wire format") {
    DiiRecord rec;
    rec.rng_seed = 0x0102030405060708ull;
    rec.patch_index = 7;
    rec.vector = {1.0f, -2.5f, 0.0f, 3.25f, -0.125f, 100.0f, 0.5f, -1.0f};
    rec.original_label = 3;
    rec.mo_label = 1;
    rec.mq_label = 2;
    CHECK(rec.byte_size() == 60);

    std::vector<std::uint8_t> bytes = encode_dii_record(rec);
    REQUIRE(bytes.size() == 60);
    std::vector<std::uint8_t> head{0x08, 0x07, 0x06, 0x05, 0x04, 0x03,
                                   0x02, 0x01,              // seed LE
                                   0x07, 0x00, 0x00, 0x00,  // patch index
                                   0x08, 0x00, 0x00, 0x00}; // vector length
    CHECK(std::equal(head.begin(), head.end(), bytes.begin()));
    CHECK(get_f32(bytes.data() + 16) == 1.0f);
    CHECK(get_f32(bytes.data() + 20) == -2.5f);
    CHECK(get_u32(bytes.data() + 48) == 3);
    CHECK(get_u32(bytes.data() + 52) == 1);
    CHECK(get_u32(bytes.data() + 56) == 2);
}

TEST_CASE("dii files round-trip and reject corruption") {
    DiiRecord a;
    a.rng_seed = 42;
    a.patch_index = 0;
    a.vector = {0.5f, 1.5f};
    a.original_label = 0;
    a.mo_label = 0;
    a.mq_label = 1;
    DiiRecord b;
    b.rng_seed = 43;
    b.patch_index = 9;
    b.vector = {2.0f, 4.0f, 8.0f};
    b.original_label = 1;
    b.mo_label = 1;
    b.mq_label = 0;

    std::vector<std::uint8_t> file(kDiiMagic, kDiiMagic + 8);
    for (std::uint8_t byte : encode_dii_record(a)) file.push_back(byte);
    for (std::uint8_t byte : encode_dii_record(b)) file.push_back(byte);
    std::string path = temp_path("qdiff_test_dii.bin");
    write_file_bytes(path, file);

    auto records = read_dii_file(path);
    REQUIRE(records.size() == 2);
    CHECK(records[0].rng_seed == 42);
    CHECK(records[0].vector == a.vector);
    CHECK(records[0].mq_label == 1);
    CHECK(records[1].rng_seed == 43);
    CHECK(records[1].patch_index == 9);
    CHECK(records[1].vector == b.vector);

    file.resize(file.size() - 5);  // cut into the last record
    write_file_bytes(path, file);
    CHECK_THROWS_AS(read_dii_file(path), FormatError);

    write_file_bytes(path, std::vector<std::uint8_t>{1, 2, 3});
    CHECK_THROWS_AS(read_dii_file(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("family and slot-kind names round-trip") {
    for (DistortionFamily f :
         {DistortionFamily::continuous_dropout,
          DistortionFamily::discontinuous_dropout, DistortionFamily::stripping,
          DistortionFamily::band_loss, DistortionFamily::salt_pepper,
          DistortionFamily::gaussian_noise, DistortionFamily::rotation,
          DistortionFamily::zoom})
        CHECK(family_from_name(family_name(f)) == f);
    CHECK_THROWS_AS(family_from_name("sharpen"), FormatError);
    CHECK(std::string(slot_kind_name(SlotKind::activation_switch)) == "switch");
}
