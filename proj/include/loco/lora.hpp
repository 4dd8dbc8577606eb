#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "loco/conv.hpp"
#include "loco/params.hpp"
#include "loco/tensor.hpp"

namespace loco {

// One low-rank update: a down-projection A (Gaussian init) and an
// up-projection B (zero init), applied with gain alpha / rank. Zero B makes a
// fresh adapter an exact no-op on the site's output.
struct LoraPair {
    Tensor B, A;
    uint32_t rank = 0;
    double alpha = 0.0;

    double gain() const { return alpha / static_cast<double>(rank); }
};

namespace detail {

inline void check_adapter_args(uint32_t rank, double alpha) {
    if (rank < 1) throw ContractError("adapter rank must be >= 1");
    if (!(alpha > 0.0)) throw ContractError("adapter alpha must be > 0");
}

}  // namespace detail

// Fully-connected site with a frozen-able base weight [d, c] (+ bias [d]) and
// per-task low-rank deltas B [d, r], A [r, c]. The delta path is kept as two
// thin products; base and delta are only summed at the output.
class LoraLinear {
public:
    LoraLinear() = default;
    LoraLinear(std::string name, size_t d, size_t c, Rng& rng)
        : name_(std::move(name)), d_(d), c_(c) {
        w_ = Tensor::randn({d, c}, rng, 0.02);
        b_ = Tensor::randn({d}, rng, 0.01);
    }

    const std::string& name() const { return name_; }
    size_t out_dim() const { return d_; }
    size_t in_dim() const { return c_; }

    void add_adapter(uint32_t task, uint32_t rank, double alpha, uint64_t task_seed) {
        detail::check_adapter_args(rank, alpha);
        if (rank > std::min(d_, c_) / 2)
            throw ContractError("adapter rank " + std::to_string(rank) + " exceeds min(" +
                                std::to_string(d_) + "," + std::to_string(c_) + ")/2 at site " + name_);
        if (adapters_.count(task)) throw ContractError("site " + name_ + " already has an adapter for task " +
                                                       std::to_string(task));
        Rng rng(derive_seed(task_seed, name_));
        LoraPair p;
        p.rank = rank;
        p.alpha = alpha;
        p.A = Tensor::randn({rank, c_}, rng, 0.02);
        p.B = Tensor::zeros({d_, rank});
        adapters_.emplace(task, std::move(p));
    }

    bool has_adapter(uint32_t task) const { return adapters_.count(task) != 0; }

    // Low-rank contribution alone, already scaled by alpha / rank.
    Tensor delta(const Tensor& x, uint32_t task) const {
        const LoraPair& p = adapter(task);
        Tensor down = linear(x, p.A);  // [n, r]
        Tensor up = linear(down, p.B);  // [n, d]
        return scale(up, p.gain());
    }

    // x [n, c] -> [n, d]; task < 0 disables the delta path.
    Tensor forward(const Tensor& x, int64_t task) const {
        Tensor base = linear(x, w_, b_);
        if (task < 0) return base;
        auto it = adapters_.find(static_cast<uint32_t>(task));
        if (it == adapters_.end()) return base;
        return add(base, delta(x, static_cast<uint32_t>(task)));
    }

    void collect_base(ParamMap& m) const {
        put_param(m, name_ + ".w", w_);
        put_param(m, name_ + ".b", b_);
    }

    void collect_adapter(uint32_t task, ParamMap& m) const {
        const LoraPair& p = adapter(task);
        put_param(m, name_ + ".lora" + std::to_string(task) + ".B", p.B);
        put_param(m, name_ + ".lora" + std::to_string(task) + ".A", p.A);
    }

    const LoraPair& adapter(uint32_t task) const {
        auto it = adapters_.find(task);
        if (it == adapters_.end())
            throw MissingAdapterError("site " + name_ + " has no adapter for task " +
                                      std::to_string(task));
        return it->second;
    }

private:
    std::string name_;
    size_t d_ = 0, c_ = 0;
    Tensor w_, b_;
    std::map<uint32_t, LoraPair> adapters_;
};

// Convolution site: base kernel [d, c, k, k, k] (+ bias [d]) with per-task
// deltas factored as B [d*k^2, r*k] times A [r*k, c*k]. The product reshapes
// to (d, k, k, c, k) and permutes to a dense [d, c, k, k, k] kernel, so the
// whole low-rank path stays on the tape.
class LoraConv3d {
public:
    LoraConv3d() = default;
    LoraConv3d(std::string name, size_t d, size_t c, size_t k, size_t stride, size_t pad, Rng& rng)
        : name_(std::move(name)), d_(d), c_(c), k_(k), stride_(stride), pad_(pad) {
        kernel_ = Tensor::randn({d, c, k, k, k}, rng, 0.02);
        b_ = Tensor::randn({d}, rng, 0.01);
    }

    const std::string& name() const { return name_; }
    size_t out_channels() const { return d_; }
    size_t in_channels() const { return c_; }
    size_t kernel_size() const { return k_; }

    void add_adapter(uint32_t task, uint32_t rank, double alpha, uint64_t task_seed) {
        detail::check_adapter_args(rank, alpha);
        if (adapters_.count(task))
            throw ContractError("site " + name_ + " already has an adapter for task " +
                                std::to_string(task));
        Rng rng(derive_seed(task_seed, name_));
        LoraPair p;
        p.rank = rank;
        p.alpha = alpha;
        p.A = Tensor::randn({rank * k_, c_ * k_}, rng, 0.02);
        p.B = Tensor::zeros({d_ * k_ * k_, rank * k_});
        adapters_.emplace(task, std::move(p));
    }

    bool has_adapter(uint32_t task) const { return adapters_.count(task) != 0; }

    // Dense kernel materialized from the factored pair, scaled by alpha / rank.
    Tensor delta_kernel(uint32_t task) const {
        const LoraPair& p = adapter(task);
        Tensor m = matmul(p.B, p.A);                       // [d*k^2, c*k]
        Tensor r = reshape(m, {d_, k_, k_, c_, k_});       // (d, kd, kh, c, kw)
        Tensor kk = permute(r, {0, 3, 1, 2, 4});           // (d, c, kd, kh, kw)
        return scale(kk, p.gain());
    }

    // x [c, D, H, W] -> [d, D', H', W']; task < 0 or no adapter: base only.
    // The im2col matrix is computed once and shared by base and delta paths.
    Tensor forward(const Tensor& x, int64_t task) const {
        const ConvDims cd = detail::conv_dims(x, k_, stride_, pad_);
        Tensor cols = im2col3d(x, k_, stride_, pad_);
        Tensor km = reshape(kernel_, {d_, kernel_.numel() / d_});
        Tensor y = matmul(km, cols);
        if (task >= 0) {
            auto it = adapters_.find(static_cast<uint32_t>(task));
            if (it != adapters_.end()) {
                Tensor dk = delta_kernel(static_cast<uint32_t>(task));
                Tensor dm = reshape(dk, {d_, dk.numel() / d_});
                y = add(y, matmul(dm, cols));
            }
        }
        y = reshape(y, {d_, cd.od, cd.oh, cd.ow});
        return add_channel_bias(y, b_);
    }

    void collect_base(ParamMap& m) const {
        put_param(m, name_ + ".k", kernel_);
        put_param(m, name_ + ".b", b_);
    }

    void collect_adapter(uint32_t task, ParamMap& m) const {
        const LoraPair& p = adapter(task);
        put_param(m, name_ + ".lora" + std::to_string(task) + ".B", p.B);
        put_param(m, name_ + ".lora" + std::to_string(task) + ".A", p.A);
    }

    const LoraPair& adapter(uint32_t task) const {
        auto it = adapters_.find(task);
        if (it == adapters_.end())
            throw MissingAdapterError("site " + name_ + " has no adapter for task " +
                                      std::to_string(task));
        return it->second;
    }

private:
    std::string name_;
    size_t d_ = 0, c_ = 0, k_ = 0, stride_ = 0, pad_ = 0;
    Tensor kernel_, b_;
    std::map<uint32_t, LoraPair> adapters_;
};

}  // namespace loco
