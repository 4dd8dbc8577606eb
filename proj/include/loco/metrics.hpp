#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "loco/tensor.hpp"

namespace loco {

// Overlap and surface-distance metrics over binary masks [H, W, D]. Any
// non-zero voxel counts as foreground.

inline double dsc(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("dsc: mask shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    size_t na = 0, nb = 0, inter = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const bool fa = a.raw()[i] != 0.0;
        const bool fb = b.raw()[i] != 0.0;
        na += fa;
        nb += fb;
        inter += fa && fb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) throw MetricError("percentile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw MetricError("percentile rank must be in [0, 1]");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// Foreground voxels with at least one of their six face neighbors background;
// voxels on the volume border always qualify (outside counts as background).
inline std::vector<std::array<size_t, 3>> boundary_voxels(const Tensor& m) {
    if (m.ndim() != 3) throw ShapeError("boundary extraction expects a [H, W, D] mask");
    const size_t H = m.dim(0), W = m.dim(1), D = m.dim(2);
    auto fg = [&](size_t h, size_t w, size_t d) { return m.raw()[(h * W + w) * D + d] != 0.0; };
    std::vector<std::array<size_t, 3>> out;
    for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w)
            for (size_t d = 0; d < D; ++d) {
                if (!fg(h, w, d)) continue;
                const bool edge = h == 0 || h + 1 == H || w == 0 || w + 1 == W || d == 0 ||
                                  d + 1 == D;
                if (edge || !fg(h - 1, w, d) || !fg(h + 1, w, d) || !fg(h, w - 1, d) ||
                    !fg(h, w + 1, d) || !fg(h, w, d - 1) || !fg(h, w, d + 1))
                    out.push_back({h, w, d});
            }
    return out;
}

namespace detail {

inline constexpr double kEdtInf = 1e300;

// One exact 1D squared-distance pass (lower envelope of parabolas) with
// anisotropic sample spacing; f is read and overwritten at stride `stride`.
// Source positions whose value is still "infinite" carry no parabola, so rows
// without any seed simply stay infinite.
inline void edt_pass_1d(double* f, size_t n, size_t stride, double spacing, double* scratch_d,
                        double* scratch_z, int* scratch_v) {
    const double s2 = spacing * spacing;
    auto fv = [&](int i) { return f[static_cast<size_t>(i) * stride]; };

    int k = -1;  // index of the rightmost parabola in the envelope
    for (int q = 0; q < static_cast<int>(n); ++q) {
        if (fv(q) >= kEdtInf) continue;
        const double qq = static_cast<double>(q);
        double cut = 0.0;
        while (k >= 0) {
            const double vv = static_cast<double>(scratch_v[k]);
            cut = ((fv(q) + qq * qq * s2) - (fv(scratch_v[k]) + vv * vv * s2)) /
                  (2.0 * s2 * (qq - vv));
            if (cut <= scratch_z[k])
                --k;
            else
                break;
        }
        ++k;
        scratch_v[k] = q;
        scratch_z[k] = k == 0 ? -kEdtInf : cut;
        scratch_z[k + 1] = kEdtInf;
    }
    if (k < 0) return;  // no finite source in this line

    int j = 0;
    for (int q = 0; q < static_cast<int>(n); ++q) {
        while (scratch_z[j + 1] < static_cast<double>(q)) ++j;
        const double dq = static_cast<double>(q - scratch_v[j]);
        scratch_d[q] = dq * dq * s2 + fv(scratch_v[j]);
    }
    for (size_t q = 0; q < n; ++q) f[q * stride] = scratch_d[q];
}

// Exact anisotropic squared Euclidean distance to the given seed voxels.
inline std::vector<double> edt_sq(const std::vector<std::array<size_t, 3>>& seeds, size_t H,
                                  size_t W, size_t D, const std::array<double, 3>& spacing) {
    std::vector<double> g(H * W * D, kEdtInf);
    for (const auto& s : seeds) g[(s[0] * W + s[1]) * D + s[2]] = 0.0;
    const size_t nmax = std::max({H, W, D});
    std::vector<double> sd(nmax), sz(nmax + 1);
    std::vector<int> sv(nmax);
    // along D (stride 1)
    for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w)
            edt_pass_1d(&g[(h * W + w) * D], D, 1, spacing[2], sd.data(), sz.data(), sv.data());
    // along W (stride D)
    for (size_t h = 0; h < H; ++h)
        for (size_t d = 0; d < D; ++d)
            edt_pass_1d(&g[h * W * D + d], W, D, spacing[1], sd.data(), sz.data(), sv.data());
    // along H (stride W*D)
    for (size_t w = 0; w < W; ++w)
        for (size_t d = 0; d < D; ++d)
            edt_pass_1d(&g[w * D + d], H, W * D, spacing[0], sd.data(), sz.data(), sv.data());
    return g;
}

}  // namespace detail

// 95th-percentile symmetric surface distance between two masks: pools the
// directed nearest-boundary distances in both directions and takes the
// percentile of the pooled sample. Either mask empty is an error — a missing
// structure has no surface, which is different from a bad one.
inline double hd95(const Tensor& a, const Tensor& b, const std::array<double, 3>& spacing) {
    if (a.shape() != b.shape())
        throw ShapeError("hd95: mask shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    for (double s : spacing)
        if (!(s > 0.0)) throw MetricError("hd95: voxel spacing must be positive");
    const auto ba = boundary_voxels(a);
    const auto bb = boundary_voxels(b);
    if (ba.empty() || bb.empty()) throw MetricError("hd95: empty mask has no surface");
    const size_t H = a.dim(0), W = a.dim(1), D = a.dim(2);
    const auto da = detail::edt_sq(ba, H, W, D, spacing);  // distance TO a's boundary
    const auto db = detail::edt_sq(bb, H, W, D, spacing);
    std::vector<double> dists;
    dists.reserve(ba.size() + bb.size());
    for (const auto& v : ba) dists.push_back(std::sqrt(db[(v[0] * W + v[1]) * D + v[2]]));
    for (const auto& v : bb) dists.push_back(std::sqrt(da[(v[0] * W + v[1]) * D + v[2]]));
    return percentile(std::move(dists), 0.95);
}

}  // namespace loco
