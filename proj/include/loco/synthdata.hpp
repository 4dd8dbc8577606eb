#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "loco/checkpoint.hpp"
#include "loco/rng.hpp"
#include "loco/tensor.hpp"

namespace loco {

// Volumes are [1, H, W, D] with the axial (through-body) direction on the
// LAST axis; slice d at depth index z has normalized axial coordinate
// z / (D - 1). The synthetic "body" is a background intensity ramp along that
// axis with organ primitives added inside a task-specific axial band.

enum class Primitive { Sphere, Box, Ellipsoid, Tube };

inline const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::Sphere: return "sphere";
        case Primitive::Box: return "box";
        case Primitive::Ellipsoid: return "ellipsoid";
        case Primitive::Tube: return "tube";
    }
    return "?";
}

inline Primitive primitive_from_name(const std::string& s) {
    if (s == "sphere") return Primitive::Sphere;
    if (s == "box") return Primitive::Box;
    if (s == "ellipsoid") return Primitive::Ellipsoid;
    if (s == "tube") return Primitive::Tube;
    throw RecipeError("unknown primitive: " + s);
}

struct OrganSpec {
    std::string class_name;
    Primitive primitive = Primitive::Sphere;
    double min_radius = 2.0;  // half-extent range, voxels
    double max_radius = 4.0;
    double intensity = 0.3;  // additive offset inside the organ
};

struct SyntheticTaskRecipe {
    uint32_t task_id = 0;
    std::array<size_t, 3> shape{32, 32, 16};      // H, W, D
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // voxel size per axis
    double band_lo = 0.0, band_hi = 1.0;           // axial placement band
    std::vector<OrganSpec> organs;
    size_t samples = 10;
    double noise = 0.02;
    uint64_t seed = 0;

    // Axial voxel range [first, last] whose normalized coordinate lies in the
    // band.
    std::pair<size_t, size_t> band_voxels() const {
        const double dmax = static_cast<double>(shape[2] - 1);
        const size_t first = static_cast<size_t>(std::ceil(band_lo * dmax - 1e-9));
        const size_t last = static_cast<size_t>(std::floor(band_hi * dmax + 1e-9));
        return {first, last};
    }

    void validate() const {
        for (size_t e : shape)
            if (e < 2) throw RecipeError("volume extents must be at least 2 voxels");
        for (double s : spacing)
            if (!(s > 0.0)) throw RecipeError("voxel spacing must be positive");
        if (!(band_lo >= 0.0 && band_lo < band_hi && band_hi <= 1.0))
            throw RecipeError("axial band must satisfy 0 <= lo < hi <= 1");
        if (samples < 1) throw RecipeError("sample count must be >= 1");
        if (noise < 0.0) throw RecipeError("noise level must be >= 0");
        const auto [b0, b1] = band_voxels();
        if (b0 > b1) throw RecipeError("axial band contains no voxel slice");
        const size_t band_span = b1 - b0 + 1;
        std::map<std::string, int> seen;
        for (const auto& o : organs) {
            if (o.class_name.empty()) throw RecipeError("organ class name must not be empty");
            if (++seen[o.class_name] > 1)
                throw RecipeError("duplicate organ class: " + o.class_name);
            if (!(o.min_radius >= 1.0) || !(o.max_radius >= o.min_radius))
                throw RecipeError("organ radius range invalid for " + o.class_name);
            const size_t need = 2 * static_cast<size_t>(std::ceil(o.max_radius)) + 1;
            if (need > shape[0] || need > shape[1])
                throw RecipeError("organ " + o.class_name + " cannot fit in plane");
            if (need > band_span)
                throw RecipeError("organ " + o.class_name + " is larger than its axial band");
        }
    }
};

struct VolumeSample {
    Tensor image;                         // [1, H, W, D]
    std::map<std::string, Tensor> masks;  // class -> [H, W, D], values 0 or 1
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

namespace detail {

struct PlacedOrgan {
    double ch, cw, cd;      // center
    double rh, rw, rd;      // per-axis half extents
    Primitive primitive;
};

inline bool organ_covers(const PlacedOrgan& o, size_t h, size_t w, size_t d) {
    const double dh = static_cast<double>(h) - o.ch;
    const double dw = static_cast<double>(w) - o.cw;
    const double dd = static_cast<double>(d) - o.cd;
    switch (o.primitive) {
        case Primitive::Sphere:
        case Primitive::Ellipsoid: {
            const double q = (dh / o.rh) * (dh / o.rh) + (dw / o.rw) * (dw / o.rw) +
                             (dd / o.rd) * (dd / o.rd);
            return q <= 1.0;
        }
        case Primitive::Box:
            return std::fabs(dh) <= o.rh && std::fabs(dw) <= o.rw && std::fabs(dd) <= o.rd;
        case Primitive::Tube: {
            const double q = (dh / o.rh) * (dh / o.rh) + (dw / o.rw) * (dw / o.rw);
            return q <= 1.0 && std::fabs(dd) <= o.rd;
        }
    }
    return false;
}

}  // namespace detail

// Deterministic volume synthesis: sample i of a recipe depends only on
// (recipe.seed, i). Each listed organ appears exactly once per volume, fully
// inside the axial band; placements avoid already-placed organs on a
// best-effort basis (bounded retries, last candidate wins).
inline VolumeSample generate_sample(const SyntheticTaskRecipe& recipe, size_t index) {
    recipe.validate();
    const size_t H = recipe.shape[0], W = recipe.shape[1], D = recipe.shape[2];
    Rng rng(derive_seed(recipe.seed, index));

    VolumeSample s;
    s.spacing = recipe.spacing;
    s.image = Tensor::zeros({1, H, W, D});
    const double dmax = static_cast<double>(D - 1);
    for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w)
            for (size_t d = 0; d < D; ++d)
                s.image.raw()[(h * W + w) * D + d] = 0.15 + 0.55 * (static_cast<double>(d) / dmax);

    const auto [b0, b1] = recipe.band_voxels();
    std::vector<detail::PlacedOrgan> placed;
    for (const auto& organ : recipe.organs) {
        detail::PlacedOrgan cand{};
        cand.primitive = organ.primitive;
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            auto rad = [&] { return rng.uniform(organ.min_radius, organ.max_radius); };
            switch (organ.primitive) {
                case Primitive::Sphere: {
                    const double r = rad();
                    cand.rh = cand.rw = cand.rd = r;
                    break;
                }
                case Primitive::Box:
                case Primitive::Ellipsoid: {
                    cand.rh = rad();
                    cand.rw = rad();
                    cand.rd = rad();
                    break;
                }
                case Primitive::Tube: {
                    const double r = rad();
                    cand.rh = cand.rw = r;
                    cand.rd = rad();
                    break;
                }
            }
            auto center = [&](double rad_axis, double lo, double hi) {
                return rng.uniform(lo + rad_axis, hi - rad_axis);
            };
            cand.ch = center(cand.rh, 0.0, static_cast<double>(H - 1));
            cand.cw = center(cand.rw, 0.0, static_cast<double>(W - 1));
            cand.cd = center(cand.rd, static_cast<double>(b0), static_cast<double>(b1));

            ok = true;
            for (const auto& p : placed) {
                const double dist2 = (p.ch - cand.ch) * (p.ch - cand.ch) +
                                     (p.cw - cand.cw) * (p.cw - cand.cw) +
                                     (p.cd - cand.cd) * (p.cd - cand.cd);
                const double rr = std::max({p.rh, p.rw, p.rd}) + std::max({cand.rh, cand.rw, cand.rd});
                if (dist2 < rr * rr) {
                    ok = false;
                    break;
                }
            }
        }
        placed.push_back(cand);

        Tensor mask = Tensor::zeros({H, W, D});
        bool any = false;
        for (size_t h = 0; h < H; ++h)
            for (size_t w = 0; w < W; ++w)
                for (size_t d = 0; d < D; ++d)
                    if (detail::organ_covers(cand, h, w, d)) {
                        mask.raw()[(h * W + w) * D + d] = 1.0;
                        s.image.raw()[(h * W + w) * D + d] += organ.intensity;
                        any = true;
                    }
        if (!any) {
            // center voxel fallback; radii >= 1 make this unreachable in
            // practice but the non-empty guarantee must hold unconditionally
            const size_t h = static_cast<size_t>(std::lround(cand.ch));
            const size_t w = static_cast<size_t>(std::lround(cand.cw));
            const size_t d = static_cast<size_t>(std::lround(cand.cd));
            mask.raw()[(h * W + w) * D + d] = 1.0;
            s.image.raw()[(h * W + w) * D + d] += organ.intensity;
        }
        s.masks.emplace(organ.class_name, std::move(mask));
    }

    if (recipe.noise > 0.0)
        for (size_t i = 0; i < s.image.numel(); ++i)
            s.image.raw()[i] += rng.normal(0.0, recipe.noise);
    return s;
}

inline std::vector<VolumeSample> generate_dataset(const SyntheticTaskRecipe& recipe) {
    recipe.validate();
    std::vector<VolumeSample> out;
    out.reserve(recipe.samples);
    for (size_t i = 0; i < recipe.samples; ++i) out.push_back(generate_sample(recipe, i));
    return out;
}

// Stacks the sample's masks into a [C, H, W, D] target following the given
// class order.
inline Tensor stack_masks(const VolumeSample& s, const std::vector<std::string>& classes) {
    if (classes.empty()) throw ContractError("class list must not be empty");
    const Shape& ms = s.masks.begin()->second.shape();
    Tensor out = Tensor::zeros({classes.size(), ms[0], ms[1], ms[2]});
    const size_t plane = ms[0] * ms[1] * ms[2];
    for (size_t c = 0; c < classes.size(); ++c) {
        auto it = s.masks.find(classes[c]);
        if (it == s.masks.end()) throw ContractError("sample has no mask for class " + classes[c]);
        std::copy_n(it->second.raw(), plane, out.raw() + c * plane);
    }
    return out;
}

// Deterministic dataset split: 20% test, then validation and training carved
// from the remainder at a 1:4 ratio. Shuffling depends only on (n, seed).
struct SplitIndices {
    std::vector<size_t> train, val, test;
};

inline SplitIndices split_dataset(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(idx);
    SplitIndices s;
    const size_t n_test = n / 5;
    const size_t n_val = (n - n_test) / 5;
    s.test.assign(idx.begin(), idx.begin() + n_test);
    s.val.assign(idx.begin() + n_test, idx.begin() + n_test + n_val);
    s.train.assign(idx.begin() + n_test + n_val, idx.end());
    return s;
}

// --- on-disk volume format -------------------------------------------------
// magic "LVOL" | u32 version | u64 H, W, D | f64 spacing[3]
// | f32 image[H*W*D] | u32 class_count
// | per class: u32 name_len, name, ceil(H*W*D / 8) mask bytes (LSB-first,
//   row-major voxel order)

inline constexpr uint32_t kVolumeVersion = 1;

inline void write_lvol(const std::string& path, const VolumeSample& s) {
    if (s.image.ndim() != 4 || s.image.dim(0) != 1)
        throw ContractError("volume image must be [1, H, W, D]");
    detail::ByteWriter w(path);
    w.bytes("LVOL", 4);
    w.u32(kVolumeVersion);
    const size_t H = s.image.dim(1), W = s.image.dim(2), D = s.image.dim(3);
    w.u64(H);
    w.u64(W);
    w.u64(D);
    for (double sp : s.spacing) w.u64(std::bit_cast<uint64_t>(sp));
    const size_t n = H * W * D;
    for (size_t i = 0; i < n; ++i) {
        const float f = static_cast<float>(s.image.raw()[i]);
        uint32_t u;
        std::memcpy(&u, &f, 4);
        w.u32(u);
    }
    w.u32(static_cast<uint32_t>(s.masks.size()));
    for (const auto& [name, mask] : s.masks) {
        if (mask.numel() != n) throw ContractError("mask extent mismatch for class " + name);
        w.u32(static_cast<uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        std::vector<uint8_t> packed((n + 7) / 8, 0);
        for (size_t i = 0; i < n; ++i)
            if (mask.raw()[i] != 0.0) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
        w.bytes(packed.data(), packed.size());
    }
    w.finish();
}

inline VolumeSample read_lvol(const std::string& path) {
    detail::ByteReader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "LVOL", 4) != 0) throw FormatError("bad magic in " + path);
    const uint32_t version = r.u32();
    if (version != kVolumeVersion)
        throw FormatError("unsupported volume version " + std::to_string(version) + " in " + path);
    const uint64_t H = r.u64(), W = r.u64(), D = r.u64();
    if (H == 0 || W == 0 || D == 0 || H * W * D > (1ull << 34))
        throw FormatError("implausible volume extents in " + path);
    VolumeSample s;
    for (double& sp : s.spacing) sp = std::bit_cast<double>(r.u64());
    s.image = Tensor::zeros({1, H, W, D});
    const size_t n = H * W * D;
    for (size_t i = 0; i < n; ++i) {
        const uint32_t u = r.u32();
        float f;
        std::memcpy(&f, &u, 4);
        s.image.raw()[i] = static_cast<double>(f);
    }
    const uint32_t classes = r.u32();
    if (classes > 4096) throw FormatError("implausible class count in " + path);
    for (uint32_t c = 0; c < classes; ++c) {
        const uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > 4096) throw FormatError("implausible class name in " + path);
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        std::vector<uint8_t> packed((n + 7) / 8);
        r.read(packed.data(), packed.size());
        Tensor mask = Tensor::zeros({H, W, D});
        for (size_t i = 0; i < n; ++i)
            if (packed[i / 8] & (1u << (i % 8))) mask.raw()[i] = 1.0;
        if (!s.masks.emplace(name, std::move(mask)).second)
            throw FormatError("duplicate class " + name + " in " + path);
    }
    return s;
}

}  // namespace loco
