#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "loco/metrics.hpp"
#include "loco/rng.hpp"

using loco::Rng;
using loco::Tensor;
using Catch::Approx;

namespace {

// Fully independent reference: boundary by direct neighbor checks, distances
// by all-pairs minimum, percentile by an inline sort-and-interpolate.
std::vector<std::array<double, 3>> brute_boundary(const Tensor& m,
                                                  const std::array<double, 3>& sp) {
    const size_t H = m.dim(0), W = m.dim(1), D = m.dim(2);
    auto at = [&](ptrdiff_t h, ptrdiff_t w, ptrdiff_t d) {
        if (h < 0 || w < 0 || d < 0 || h >= (ptrdiff_t)H || w >= (ptrdiff_t)W || d >= (ptrdiff_t)D)
            return 0.0;
        return m.raw()[(static_cast<size_t>(h) * W + static_cast<size_t>(w)) * D +
                       static_cast<size_t>(d)];
    };
    std::vector<std::array<double, 3>> out;
    for (ptrdiff_t h = 0; h < (ptrdiff_t)H; ++h)
        for (ptrdiff_t w = 0; w < (ptrdiff_t)W; ++w)
            for (ptrdiff_t d = 0; d < (ptrdiff_t)D; ++d) {
                if (at(h, w, d) == 0.0) continue;
                if (at(h - 1, w, d) == 0.0 || at(h + 1, w, d) == 0.0 || at(h, w - 1, d) == 0.0 ||
                    at(h, w + 1, d) == 0.0 || at(h, w, d - 1) == 0.0 || at(h, w, d + 1) == 0.0)
                    out.push_back({h * sp[0], w * sp[1], d * sp[2]});
            }
    return out;
}

double brute_hd95(const Tensor& a, const Tensor& b, const std::array<double, 3>& sp) {
    auto ba = brute_boundary(a, sp);
    auto bb = brute_boundary(b, sp);
    std::vector<double> dists;
    auto directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = 1e300;
            for (const auto& q : to) {
                const double d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                  (p[2] - q[2]) * (p[2] - q[2]);
                best = std::min(best, d2);
            }
            dists.push_back(std::sqrt(best));
        }
    };
    directed(ba, bb);
    directed(bb, ba);
    std::sort(dists.begin(), dists.end());
    const double pos = 0.95 * static_cast<double>(dists.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= dists.size()) return dists.back();
    return dists[lo] + (pos - static_cast<double>(lo)) * (dists[lo + 1] - dists[lo]);
}

Tensor random_mask(Rng& rng, size_t H, size_t W, size_t D) {
    Tensor m = Tensor::zeros({H, W, D});
    // union of a few random boxes/spheres; retry until non-empty
    while (true) {
        const int shapes = 1 + static_cast<int>(rng.next_below(3));
        for (int s = 0; s < shapes; ++s) {
            const double ch = rng.uniform(0, static_cast<double>(H - 1));
            const double cw = rng.uniform(0, static_cast<double>(W - 1));
            const double cd = rng.uniform(0, static_cast<double>(D - 1));
            const double r = rng.uniform(1.0, 1.0 + static_cast<double>(std::min({H, W, D})) / 3.0);
            const bool sphere = rng.next_below(2) == 0;
            for (size_t h = 0; h < H; ++h)
                for (size_t w = 0; w < W; ++w)
                    for (size_t d = 0; d < D; ++d) {
                        const double dh = h - ch, dw = w - cw, dd = d - cd;
                        const bool in = sphere ? (dh * dh + dw * dw + dd * dd <= r * r)
                                               : (std::fabs(dh) <= r && std::fabs(dw) <= r &&
                                                  std::fabs(dd) <= r);
                        if (in) m.raw()[(h * W + w) * D + d] = 1.0;
                    }
        }
        for (double v : m.data())
            if (v != 0.0) return m;
    }
}

}  // namespace

TEST_CASE("dsc matches hand-computed overlaps") {
    Tensor a = Tensor::zeros({2, 2, 2});
    Tensor b = Tensor::zeros({2, 2, 2});
    REQUIRE(loco::dsc(a, b) == 1.0);  // both empty: perfect agreement
    a.raw()[0] = 1.0;
    REQUIRE(loco::dsc(a, b) == 0.0);  // one empty
    b.raw()[0] = 1.0;
    REQUIRE(loco::dsc(a, b) == 1.0);
    a.raw()[1] = 1.0;  // |A|=2, |B|=1, inter=1 -> 2/3
    REQUIRE(loco::dsc(a, b) == Approx(2.0 / 3.0).epsilon(1e-15));
    REQUIRE_THROWS_AS(loco::dsc(a, Tensor::zeros({2, 2, 3})), loco::ShapeError);
}

TEST_CASE("percentile interpolates linearly") {
    std::vector<double> v{4.0, 1.0, 3.0, 2.0};
    REQUIRE(loco::percentile(v, 0.0) == 1.0);
    REQUIRE(loco::percentile(v, 1.0) == 4.0);
    REQUIRE(loco::percentile(v, 0.5) == Approx(2.5));
    REQUIRE(loco::percentile(v, 0.95) == Approx(3.85));
    REQUIRE_THROWS_AS(loco::percentile({}, 0.5), loco::MetricError);
    REQUIRE_THROWS_AS(loco::percentile(v, 1.5), loco::MetricError);
}

TEST_CASE("boundary voxels are the erosion complement") {
    Tensor m = Tensor::zeros({5, 5, 5});
    for (size_t h = 1; h <= 3; ++h)
        for (size_t w = 1; w <= 3; ++w)
            for (size_t d = 1; d <= 3; ++d) m.raw()[(h * 5 + w) * 5 + d] = 1.0;
    auto bv = loco::boundary_voxels(m);
    REQUIRE(bv.size() == 26);  // 3^3 cube minus its single interior voxel
    for (const auto& v : bv) REQUIRE_FALSE(v == std::array<size_t, 3>{2, 2, 2});

    // full-volume mask: everything except the single interior voxel touches
    // the border, and outside counts as background
    Tensor full = loco::Tensor::full({3, 3, 3}, 1.0);
    REQUIRE(loco::boundary_voxels(full).size() == 26);
    // a 1-thick slab is entirely boundary
    Tensor slab = loco::Tensor::full({1, 3, 3}, 1.0);
    REQUIRE(loco::boundary_voxels(slab).size() == 9);
}

TEST_CASE("hd95 of identical masks is zero and empty masks are an error") {
    Tensor m = Tensor::zeros({4, 4, 4});
    m.raw()[21] = 1.0;
    m.raw()[22] = 1.0;
    REQUIRE(loco::hd95(m, m, {1, 1, 1}) == 0.0);
    Tensor e = Tensor::zeros({4, 4, 4});
    REQUIRE_THROWS_AS(loco::hd95(m, e, {1, 1, 1}), loco::MetricError);
    REQUIRE_THROWS_AS(loco::hd95(e, m, {1, 1, 1}), loco::MetricError);
    REQUIRE_THROWS_AS(loco::hd95(m, m, {1, 0, 1}), loco::MetricError);
}

TEST_CASE("hd95 of two points equals their anisotropic distance") {
    Tensor a = Tensor::zeros({8, 8, 8});
    Tensor b = Tensor::zeros({8, 8, 8});
    a.raw()[(1 * 8 + 2) * 8 + 3] = 1.0;
    b.raw()[(4 * 8 + 6) * 8 + 3] = 1.0;
    const double want = std::sqrt(9.0 * 0.25 + 16.0 * 4.0);  // dh=3 sp=0.5, dw=4 sp=2
    REQUIRE(loco::hd95(a, b, {0.5, 2.0, 1.0}) == Approx(want).epsilon(1e-12));
}

TEST_CASE("hd95 matches the all-pairs oracle on random masks") {
    Rng rng(4242);
    int done = 0;
    while (done < 50) {
        const size_t H = 4 + rng.next_below(13);  // up to 16
        const size_t W = 4 + rng.next_below(13);
        const size_t D = 4 + rng.next_below(13);
        Tensor a = random_mask(rng, H, W, D);
        Tensor b = random_mask(rng, H, W, D);
        std::array<double, 3> sp{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                                 rng.uniform(0.5, 2.0)};
        const double lib = loco::hd95(a, b, sp);
        const double ref = brute_hd95(a, b, sp);
        REQUIRE(lib == Approx(ref).epsilon(1e-9).margin(1e-9));
        ++done;
    }
}

TEST_CASE("doubling the voxel spacing exactly doubles hd95") {
    Rng rng(777);
    for (int i = 0; i < 5; ++i) {
        Tensor a = random_mask(rng, 10, 10, 10);
        Tensor b = random_mask(rng, 10, 10, 10);
        const double one = loco::hd95(a, b, {1, 1, 1});
        const double two = loco::hd95(a, b, {2, 2, 2});
        REQUIRE(two == 2.0 * one);
    }
}
