#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loco/errors.hpp"
#include "loco/tensor.hpp"

namespace loco {

// Least-squares fit of the normalized axial coordinate from per-slice
// intensity statistics. Predictions are clamped to [0, 1] and made monotone
// along the slice axis, so a volume always yields a usable score ramp even
// when individual slices are noisy.

inline std::vector<std::array<double, 2>> slice_stats(const Tensor& image) {
    if (image.ndim() != 4 || image.dim(0) != 1)
        throw ShapeError("slice statistics expect an image shaped [1, H, W, D]");
    const size_t D = image.dim(3);
    const size_t plane = image.dim(1) * image.dim(2);
    std::vector<std::array<double, 2>> stats(D);
    const double* x = image.raw();
    for (size_t d = 0; d < D; ++d) {
        double s = 0.0, s2 = 0.0;
        for (size_t p = 0; p < plane; ++p) {
            const double v = x[p * D + d];
            s += v;
            s2 += v * v;
        }
        const double mean = s / static_cast<double>(plane);
        const double var = std::max(0.0, s2 / static_cast<double>(plane) - mean * mean);
        stats[d] = {mean, std::sqrt(var)};
    }
    return stats;
}

// Pool-adjacent-violators projection onto monotone sequences (L2, unit
// weights).
inline std::vector<double> pav_isotonic(std::vector<double> v, bool increasing = true) {
    if (v.size() < 2) return v;
    if (!increasing) {
        std::reverse(v.begin(), v.end());
        v = pav_isotonic(std::move(v), true);
        std::reverse(v.begin(), v.end());
        return v;
    }
    struct Block {
        double sum;
        size_t n;
    };
    std::vector<Block> blocks;
    blocks.reserve(v.size());
    for (double x : v) {
        blocks.push_back({x, 1});
        while (blocks.size() > 1) {
            Block& a = blocks[blocks.size() - 2];
            Block& b = blocks.back();
            if (a.sum * static_cast<double>(b.n) <= b.sum * static_cast<double>(a.n)) break;
            a.sum += b.sum;
            a.n += b.n;
            blocks.pop_back();
        }
    }
    std::vector<double> out;
    out.reserve(v.size());
    for (const Block& b : blocks)
        out.insert(out.end(), b.n, b.sum / static_cast<double>(b.n));
    return out;
}

class AxisRegressor {
public:
    // images: [1, H, W, D] volumes; the target for slice d is d / (D - 1).
    void fit(const std::vector<Tensor>& images) {
        if (images.empty()) throw ContractError("axis fit needs at least one volume");
        double ata[3][3] = {};
        double aty[3] = {};
        for (const Tensor& img : images) {
            const auto stats = slice_stats(img);
            const size_t D = stats.size();
            if (D < 2) throw ShapeError("axis fit needs at least two axial slices");
            for (size_t d = 0; d < D; ++d) {
                const double row[3] = {stats[d][0], stats[d][1], 1.0};
                const double z = static_cast<double>(d) / static_cast<double>(D - 1);
                for (int i = 0; i < 3; ++i) {
                    for (int j = 0; j < 3; ++j) ata[i][j] += row[i] * row[j];
                    aty[i] += row[i] * z;
                }
            }
        }
        // tiny ridge keeps degenerate feature sets (e.g. constant std) solvable
        double diag_max = 0.0;
        for (int i = 0; i < 3; ++i) diag_max = std::max(diag_max, ata[i][i]);
        for (int i = 0; i < 3; ++i) ata[i][i] += 1e-10 * (1.0 + diag_max);
        solve3(ata, aty, w_.data());
        fitted_ = true;
    }

    bool fitted() const { return fitted_; }

    const std::array<double, 3>& coef() const { return w_; }
    void set_coef(const std::array<double, 3>& w) {
        w_ = w;
        fitted_ = true;
    }

    // Monotone per-slice scores in [0, 1]. The direction is taken from the
    // raw predictions' own trend so flipped volumes calibrate downward.
    std::vector<double> predict(const Tensor& image) const {
        if (!fitted_) throw ContractError("axis regressor used before fitting");
        const auto stats = slice_stats(image);
        const size_t D = stats.size();
        std::vector<double> raw(D);
        for (size_t d = 0; d < D; ++d)
            raw[d] = std::clamp(w_[0] * stats[d][0] + w_[1] * stats[d][1] + w_[2], 0.0, 1.0);
        double slope = 0.0;
        const double mid = static_cast<double>(D - 1) / 2.0;
        for (size_t d = 0; d < D; ++d) slope += (static_cast<double>(d) - mid) * raw[d];
        return pav_isotonic(std::move(raw), slope >= 0.0);
    }

private:
    static void solve3(double a[3][3], const double* b, double* x) {
        double m[3][4];
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) m[i][j] = a[i][j];
            m[i][3] = b[i];
        }
        for (int col = 0; col < 3; ++col) {
            int piv = col;
            for (int r = col + 1; r < 3; ++r)
                if (std::fabs(m[r][col]) > std::fabs(m[piv][col])) piv = r;
            if (std::fabs(m[piv][col]) < 1e-300) throw ContractError("axis fit is singular");
            for (int j = 0; j < 4; ++j) std::swap(m[col][j], m[piv][j]);
            for (int r = 0; r < 3; ++r) {
                if (r == col) continue;
                const double f = m[r][col] / m[col][col];
                for (int j = col; j < 4; ++j) m[r][j] -= f * m[col][j];
            }
        }
        for (int i = 0; i < 3; ++i) x[i] = m[i][3] / m[i][i];
    }

    std::array<double, 3> w_{0.0, 0.0, 0.0};
    bool fitted_ = false;
};

// --- axial occupancy profiles ------------------------------------------------

constexpr size_t kProfileBins = 64;
constexpr double kProfileMinWidth = 0.02;

struct AxialProfile {
    uint32_t task_id = 0;
    double low = 0.0;
    double high = 1.0;
    std::array<uint64_t, kProfileBins> hist{};
};

namespace detail {

inline size_t profile_bin(double score) {
    const auto b = static_cast<long long>(std::floor(score * static_cast<double>(kProfileBins)));
    return static_cast<size_t>(std::clamp<long long>(b, 0, kProfileBins - 1));
}

inline double hist_percentile(const std::array<uint64_t, kProfileBins>& hist, double q) {
    uint64_t total = 0;
    for (uint64_t h : hist) total += h;
    const double target = q * static_cast<double>(total);
    double cum = 0.0;
    for (size_t b = 0; b < kProfileBins; ++b) {
        if (hist[b] == 0) continue;
        const double next = cum + static_cast<double>(hist[b]);
        if (next >= target) {
            const double frac = (target - cum) / static_cast<double>(hist[b]);
            return (static_cast<double>(b) + std::clamp(frac, 0.0, 1.0)) /
                   static_cast<double>(kProfileBins);
        }
        cum = next;
    }
    return 1.0;
}

}  // namespace detail

// Union of the listed class masks; any positive voxel counts as foreground.
inline Tensor foreground_union(const std::map<std::string, Tensor>& masks,
                               const std::vector<std::string>& classes) {
    if (classes.empty()) throw ContractError("foreground union needs at least one class");
    auto first = masks.find(classes.front());
    if (first == masks.end()) throw ContractError("missing mask for class " + classes.front());
    Tensor out = Tensor::zeros(first->second.shape());
    for (const auto& name : classes) {
        auto it = masks.find(name);
        if (it == masks.end()) throw ContractError("missing mask for class " + name);
        if (it->second.shape() != out.shape())
            throw ShapeError("class masks disagree in shape");
        for (size_t i = 0; i < out.numel(); ++i)
            if (it->second.data()[i] > 0.0) out.raw()[i] = 1.0;
    }
    return out;
}

// Histogram of axial scores over foreground voxels, one entry per volume.
// The active range keeps the central 95% of the mass; a linear interpolation
// inside the boundary bins turns the discrete histogram into a continuous
// cut, and a minimum width keeps razor-thin structures usable.
inline AxialProfile build_profile(uint32_t task_id,
                                  const std::vector<std::vector<double>>& slice_scores,
                                  const std::vector<Tensor>& foreground) {
    if (slice_scores.size() != foreground.size() || slice_scores.empty())
        throw ContractError("profile needs matching score and mask lists");
    AxialProfile p;
    p.task_id = task_id;
    uint64_t total = 0;
    for (size_t v = 0; v < foreground.size(); ++v) {
        const Tensor& m = foreground[v];
        if (m.ndim() != 3) throw ShapeError("foreground masks must be [H, W, D]");
        const size_t D = m.dim(2);
        if (slice_scores[v].size() != D)
            throw ShapeError("slice scores do not match the mask depth");
        for (size_t i = 0; i < m.numel(); ++i) {
            if (m.data()[i] <= 0.0) continue;
            p.hist[detail::profile_bin(slice_scores[v][i % D])] += 1;
            ++total;
        }
    }
    if (total == 0) throw DegenerateProfileError("no foreground voxels for task " +
                                                 std::to_string(task_id));
    p.low = detail::hist_percentile(p.hist, 0.025);
    p.high = detail::hist_percentile(p.hist, 0.975);
    if (p.high - p.low < kProfileMinWidth) {
        const double mid = 0.5 * (p.low + p.high);
        p.low = mid - 0.5 * kProfileMinWidth;
        p.high = mid + 0.5 * kProfileMinWidth;
        if (p.low < 0.0) {
            p.high -= p.low;
            p.low = 0.0;
        }
        if (p.high > 1.0) {
            p.low -= p.high - 1.0;
            p.high = 1.0;
        }
    }
    return p;
}

// Zeroes every hyperplane along the last axis whose score falls outside
// [low, high]. Pure data transform (not recorded on any tape); idempotent.
inline Tensor mask_out_of_range(const Tensor& t, const std::vector<double>& slice_scores,
                                double low, double high) {
    if (t.ndim() < 1 || slice_scores.size() != t.dim(t.ndim() - 1))
        throw ShapeError("slice scores must match the last axis extent");
    const size_t D = slice_scores.size();
    std::vector<uint8_t> keep(D);
    for (size_t d = 0; d < D; ++d)
        keep[d] = slice_scores[d] >= low && slice_scores[d] <= high;
    Tensor out = Tensor::zeros(t.shape());
    for (size_t i = 0; i < t.numel(); ++i)
        out.raw()[i] = keep[i % D] ? t.data()[i] : 0.0;
    return out;
}

inline std::vector<uint8_t> slices_in_range(const std::vector<double>& slice_scores, double low,
                                            double high) {
    std::vector<uint8_t> keep(slice_scores.size());
    for (size_t d = 0; d < slice_scores.size(); ++d)
        keep[d] = slice_scores[d] >= low && slice_scores[d] <= high;
    return keep;
}

// --- entropy-gated ensembling --------------------------------------------

struct TaskPrediction {
    uint32_t task_id = 0;
    std::map<std::string, Tensor> probs;  // class -> [H, W, D]
    std::vector<uint8_t> slice_valid;     // empty => every slice is in range
};

struct FusedPrediction {
    std::map<std::string, Tensor> probs;  // winning probability per voxel
    std::map<std::string, Tensor> masks;  // probs thresholded at 0.5
};

inline double binary_entropy(double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
}

// Combines per-task sigmoid maps into one prediction per class name. At each
// voxel only tasks whose axial range covers the slice compete; among those
// the least-entropic (most confident) probability wins, with ties going to
// the lower task id. A class nobody may claim at a voxel stays background.
inline FusedPrediction entropy_ensemble(const std::vector<TaskPrediction>& preds) {
    if (preds.empty()) throw ContractError("ensemble needs at least one task");
    std::vector<const TaskPrediction*> order;
    order.reserve(preds.size());
    for (const auto& p : preds) order.push_back(&p);
    std::sort(order.begin(), order.end(),
              [](const TaskPrediction* a, const TaskPrediction* b) { return a->task_id < b->task_id; });
    for (size_t i = 1; i < order.size(); ++i)
        if (order[i]->task_id == order[i - 1]->task_id)
            throw ConflictError("duplicate task id " + std::to_string(order[i]->task_id) +
                                " in ensemble");

    Shape shape;
    std::map<std::string, std::vector<const TaskPrediction*>> claimants;
    for (const TaskPrediction* tp : order) {
        for (const auto& [name, prob] : tp->probs) {
            if (prob.ndim() != 3) throw ShapeError("task probabilities must be [H, W, D]");
            if (shape.empty()) shape = prob.shape();
            if (prob.shape() != shape) throw ShapeError("ensemble inputs disagree in shape");
            claimants[name].push_back(tp);
        }
        if (!tp->slice_valid.empty() && !shape.empty() && tp->slice_valid.size() != shape[2])
            throw ShapeError("slice validity does not match the volume depth");
    }
    if (shape.empty()) throw ContractError("ensemble needs at least one class map");

    const size_t D = shape[2];
    const size_t n = shape[0] * shape[1] * shape[2];
    FusedPrediction fused;
    for (const auto& [name, tasks] : claimants) {
        Tensor prob = Tensor::zeros(shape);
        Tensor mask = Tensor::zeros(shape);
        for (size_t i = 0; i < n; ++i) {
            const size_t d = i % D;
            bool any = false;
            double best_p = 0.0, best_h = 0.0;
            for (const TaskPrediction* tp : tasks) {
                if (!tp->slice_valid.empty() && !tp->slice_valid[d]) continue;
                const double p = tp->probs.at(name).data()[i];
                const double h = binary_entropy(p);
                if (!any || h < best_h) {
                    any = true;
                    best_p = p;
                    best_h = h;
                }
            }
            prob.raw()[i] = any ? best_p : 0.0;
            mask.raw()[i] = (any && best_p >= 0.5) ? 1.0 : 0.0;
        }
        fused.probs.emplace(name, std::move(prob));
        fused.masks.emplace(name, std::move(mask));
    }
    return fused;
}

// --- text round-trips ------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::ifstream open_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return in;
}

inline void expect_word(std::istream& in, const std::string& want, const std::string& path) {
    std::string got;
    if (!(in >> got) || got != want)
        throw FormatError("expected '" + want + "' in " + path);
}

}  // namespace detail

inline void write_profile(const std::string& path, const AxialProfile& p) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "axial-profile v1\n";
    out << "task " << p.task_id << "\n";
    out << "low " << detail::fmt_double(p.low) << "\n";
    out << "high " << detail::fmt_double(p.high) << "\n";
    out << "hist";
    for (uint64_t h : p.hist) out << ' ' << h;
    out << "\n";
    if (!out) throw IoError("failed writing " + path);
}

inline AxialProfile read_profile(const std::string& path) {
    std::ifstream in = detail::open_text(path);
    detail::expect_word(in, "axial-profile", path);
    detail::expect_word(in, "v1", path);
    AxialProfile p;
    detail::expect_word(in, "task", path);
    if (!(in >> p.task_id)) throw FormatError("bad task id in " + path);
    detail::expect_word(in, "low", path);
    if (!(in >> p.low)) throw FormatError("bad low bound in " + path);
    detail::expect_word(in, "high", path);
    if (!(in >> p.high)) throw FormatError("bad high bound in " + path);
    detail::expect_word(in, "hist", path);
    for (auto& h : p.hist)
        if (!(in >> h)) throw FormatError("bad histogram in " + path);
    if (!(p.low <= p.high && p.low >= 0.0 && p.high <= 1.0))
        throw FormatError("inconsistent profile bounds in " + path);
    return p;
}

inline void write_axis(const std::string& path, const AxisRegressor& reg) {
    if (!reg.fitted()) throw ContractError("cannot save an unfitted axis regressor");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "axis-regressor v1\ncoef";
    for (double w : reg.coef()) out << ' ' << detail::fmt_double(w);
    out << "\n";
    if (!out) throw IoError("failed writing " + path);
}

inline AxisRegressor read_axis(const std::string& path) {
    std::ifstream in = detail::open_text(path);
    detail::expect_word(in, "axis-regressor", path);
    detail::expect_word(in, "v1", path);
    detail::expect_word(in, "coef", path);
    std::array<double, 3> w{};
    for (double& v : w)
        if (!(in >> v)) throw FormatError("bad coefficients in " + path);
    AxisRegressor reg;
    reg.set_coef(w);
    return reg;
}

}  // namespace loco
