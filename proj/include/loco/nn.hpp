#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "loco/tensor.hpp"

namespace loco {

// AdamW with decoupled weight decay, applied uniformly to every registered
// parameter. Parameters must be trainable leaves when registered; moment
// buffers live here, so dropping the optimizer discards its state.
class AdamW {
public:
    explicit AdamW(double lr = 1e-4, double weight_decay = 3e-5, double beta1 = 0.9,
                   double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void add_param(const std::string& name, Tensor t) {
        if (!t.requires_grad())
            throw ContractError("optimizer: parameter '" + name + "' is frozen");
        if (!t.is_leaf())
            throw ContractError("optimizer: parameter '" + name + "' is not a leaf tensor");
        Slot s;
        s.name = name;
        s.t = std::move(t);
        s.m.assign(s.t.numel(), 0.0);
        s.v.assign(s.t.numel(), 0.0);
        slots_.push_back(std::move(s));
    }

    size_t size() const { return slots_.size(); }

    void zero_grads() {
        for (auto& s : slots_) s.t.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& s : slots_) {
            const auto* g = s.t.grad();
            if (!g) continue;
            auto& w = s.t.data();
            for (size_t i = 0; i < w.size(); ++i) {
                const double gi = (*g)[i];
                s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * gi;
                s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * gi * gi;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                w[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
            }
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor t;
        std::vector<double> m, v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    uint64_t t_ = 0;
    std::vector<Slot> slots_;
};

// Soft-Dice loss for one channel of probabilities against a binary target.
// The smoothing constant appears in numerator and denominator, so a perfect
// binary match yields exactly zero loss.
inline Tensor soft_dice_loss(const Tensor& prob, const Tensor& target, double smooth = 1e-6) {
    Tensor inter = sum(mul(prob, target));
    Tensor num = affine(inter, 2.0, smooth);
    Tensor den = affine(add(sum(prob), sum(target)), 1.0, smooth);
    return affine(div(num, den), -1.0, 1.0);
}

inline Tensor bce_loss(const Tensor& prob, const Tensor& target, double eps = 1e-7) {
    Tensor p = clamp(prob, eps, 1.0 - eps);
    Tensor one_minus_p = affine(p, -1.0, 1.0);
    Tensor one_minus_t = affine(target, -1.0, 1.0);
    Tensor ll = add(mul(target, log(p)), mul(one_minus_t, log(one_minus_p)));
    return scale(mean(ll), -1.0);
}

// Training objective: 0.5 * (mean per-channel soft-Dice + voxelwise BCE).
// prob and target are [C, ...spatial] with C the task's class count.
inline Tensor dice_bce_loss(const Tensor& prob, const Tensor& target) {
    detail::check_same_shape("dice_bce_loss", prob, target);
    const size_t C = prob.dim(0);
    Tensor dice_sum;
    for (size_t c = 0; c < C; ++c) {
        Tensor pc = slice(prob, 0, c, 1);
        Tensor tc = slice(target, 0, c, 1);
        Tensor dl = soft_dice_loss(pc, tc);
        dice_sum = c == 0 ? dl : add(dice_sum, dl);
    }
    Tensor dice_mean = scale(dice_sum, 1.0 / static_cast<double>(C));
    return scale(add(dice_mean, bce_loss(prob, target)), 0.5);
}

}  // namespace loco
