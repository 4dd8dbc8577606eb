#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "loco/lora.hpp"
#include "loco/nn.hpp"

namespace loco {

// Architecture hyper-parameters. Defaults describe the full-scale
// configuration; desk() shrinks every axis so the whole pipeline runs on one
// core. Adapter ranks/gains are grouped by site family: attention q/v
// projections, feed-forward layers, and the embedding/refinement convolutions.
struct PvtConfig {
    std::vector<size_t> dims{64, 128, 320, 512};
    std::vector<size_t> enc_depths{2, 3, 4, 3};
    std::vector<size_t> dec_depths{3, 4, 3};
    std::vector<size_t> heads{1, 2, 5, 8};
    std::vector<size_t> sr_ratios{4, 2, 2, 1};
    size_t ffn_ratio = 4;
    size_t in_channels = 1;
    size_t final_dim = 64;
    bool conv_pos_enc = true;
    double ln_eps = 1e-6;

    uint32_t rank_attn = 64, rank_ffn = 16, rank_conv = 16;
    double alpha_attn = 32.0, alpha_ffn = 8.0, alpha_conv = 8.0;
    bool adapt_attn = true, adapt_ffn = true, adapt_conv = true;

    void validate() const {
        const size_t s = dims.size();
        if (s < 2) throw ConfigError("model needs at least two stages");
        if (enc_depths.size() != s || heads.size() != s || sr_ratios.size() != s)
            throw ConfigError("dims, enc_depths, heads and sr_ratios must have equal length");
        if (dec_depths.size() != s - 1)
            throw ConfigError("dec_depths must have one entry per non-bottleneck stage");
        for (size_t i = 0; i < s; ++i) {
            if (dims[i] == 0 || enc_depths[i] == 0 || heads[i] == 0 || sr_ratios[i] == 0)
                throw ConfigError("stage extents must be positive");
            if (dims[i] % heads[i] != 0)
                throw ConfigError("dims[" + std::to_string(i) + "] not divisible by its head count");
        }
        for (size_t d : dec_depths)
            if (d == 0) throw ConfigError("decoder depths must be positive");
        if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
        if (in_channels == 0 || final_dim == 0) throw ConfigError("channel counts must be positive");
        if (rank_attn < 1 || rank_ffn < 1 || rank_conv < 1) throw ConfigError("ranks must be >= 1");
        if (!(alpha_attn > 0) || !(alpha_ffn > 0) || !(alpha_conv > 0))
            throw ConfigError("alphas must be > 0");
        if (!(ln_eps > 0)) throw ConfigError("ln_eps must be > 0");
    }

    // Per-instance scale used in the desk pipeline: same topology, every
    // width shrunk, ranks scaled so the r <= min(d,c)/2 bound holds at the
    // narrowest adapted site.
    static PvtConfig desk() {
        PvtConfig c;
        c.dims = {16, 32, 64, 128};
        c.heads = {1, 2, 4, 8};
        c.sr_ratios = {4, 2, 2, 1};
        c.final_dim = 16;
        c.rank_attn = 8;
        c.rank_ffn = 4;
        c.rank_conv = 4;
        c.alpha_attn = 4.0;
        c.alpha_ffn = 2.0;
        c.alpha_conv = 2.0;
        return c;
    }

    static PvtConfig full_scale() { return PvtConfig{}; }
};

namespace detail {

// [C, D, H, W] -> [D*H*W, C]
inline Tensor to_tokens(const Tensor& vol) {
    const size_t c = vol.dim(0);
    Tensor flat = reshape(vol, {c, vol.numel() / c});
    return permute(flat, {1, 0});
}

// [N, C] -> [C, D, H, W]
inline Tensor to_volume(const Tensor& tokens, size_t d, size_t h, size_t w) {
    Tensor t = permute(tokens, {1, 0});
    return reshape(t, {tokens.dim(1), d, h, w});
}

}  // namespace detail

// One transformer layer over a token grid: pre-norm attention with optional
// spatial reduction of the K/V path, then a pre-norm feed-forward with an
// optional depthwise-convolution positional encoding between the expansion
// and the nonlinearity. q, v, fc1, fc2 are adapter-capable sites.
class PvtBlock {
public:
    PvtBlock() = default;
    PvtBlock(const std::string& name, size_t dim, size_t heads, size_t sr, size_t ffn_ratio,
             bool conv_pos_enc, double ln_eps, Rng& rng)
        : name_(name), dim_(dim), heads_(heads), sr_(sr), eps_(ln_eps), pos_enc_(conv_pos_enc) {
        ln1_g_ = Tensor::full({dim}, 1.0);
        ln1_b_ = Tensor::zeros({dim});
        ln2_g_ = Tensor::full({dim}, 1.0);
        ln2_b_ = Tensor::zeros({dim});
        q_ = LoraLinear(name + ".q", dim, dim, rng);
        k_ = LoraLinear(name + ".k", dim, dim, rng);
        v_ = LoraLinear(name + ".v", dim, dim, rng);
        o_ = LoraLinear(name + ".o", dim, dim, rng);
        if (sr_ > 1) {
            sr_k_ = Tensor::randn({dim, dim, sr, sr, sr}, rng, 0.02);
            sr_b_ = Tensor::randn({dim}, rng, 0.01);
            sr_ln_g_ = Tensor::full({dim}, 1.0);
            sr_ln_b_ = Tensor::zeros({dim});
        }
        const size_t hidden = dim * ffn_ratio;
        fc1_ = LoraLinear(name + ".fc1", hidden, dim, rng);
        fc2_ = LoraLinear(name + ".fc2", dim, hidden, rng);
        if (pos_enc_) {
            dw_k_ = Tensor::randn({hidden, 3, 3, 3}, rng, 0.02);
            dw_b_ = Tensor::randn({hidden}, rng, 0.01);
        }
    }

    Tensor forward(const Tensor& x, size_t gd, size_t gh, size_t gw, int64_t task) const {
        Tensor h = layernorm(x, ln1_g_, ln1_b_, eps_);
        Tensor qt = q_.forward(h, task);

        Tensor src = h;
        size_t kd = gd, kh = gh, kw = gw;
        if (sr_ > 1) {
            Tensor vol = detail::to_volume(h, gd, gh, gw);
            Tensor red = conv3d(vol, sr_k_, sr_b_, sr_, 0);
            kd = red.dim(1);
            kh = red.dim(2);
            kw = red.dim(3);
            src = layernorm(detail::to_tokens(red), sr_ln_g_, sr_ln_b_, eps_);
        }
        Tensor kt = k_.forward(src, task);
        Tensor vt = v_.forward(src, task);

        const size_t hd = dim_ / heads_;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<Tensor> outs;
        outs.reserve(heads_);
        for (size_t hh = 0; hh < heads_; ++hh) {
            Tensor qs = slice(qt, 1, hh * hd, hd);
            Tensor ks = slice(kt, 1, hh * hd, hd);
            Tensor vs = slice(vt, 1, hh * hd, hd);
            Tensor scores = scale(matmul(qs, transpose(ks)), inv_sqrt);
            Tensor att = softmax(scores, 1);
            outs.push_back(matmul(att, vs));
        }
        Tensor merged = heads_ == 1 ? outs[0] : concat(outs, 1);
        Tensor attn_out = o_.forward(merged, task);
        Tensor x1 = add(x, attn_out);

        Tensor h2 = layernorm(x1, ln2_g_, ln2_b_, eps_);
        Tensor f = fc1_.forward(h2, task);
        if (pos_enc_) {
            Tensor fv = detail::to_volume(f, gd, gh, gw);
            f = detail::to_tokens(dwconv3d(fv, dw_k_, dw_b_, 1));
        }
        f = gelu(f);
        Tensor f2 = fc2_.forward(f, task);
        return add(x1, f2);
    }

    void add_adapters(uint32_t task, uint64_t seed, const PvtConfig& cfg) {
        if (cfg.adapt_attn) {
            q_.add_adapter(task, cfg.rank_attn, cfg.alpha_attn, seed);
            v_.add_adapter(task, cfg.rank_attn, cfg.alpha_attn, seed);
        }
        if (cfg.adapt_ffn) {
            fc1_.add_adapter(task, cfg.rank_ffn, cfg.alpha_ffn, seed);
            fc2_.add_adapter(task, cfg.rank_ffn, cfg.alpha_ffn, seed);
        }
    }

    void collect_base(ParamMap& m) const {
        put_param(m, name_ + ".ln1.g", ln1_g_);
        put_param(m, name_ + ".ln1.b", ln1_b_);
        put_param(m, name_ + ".ln2.g", ln2_g_);
        put_param(m, name_ + ".ln2.b", ln2_b_);
        q_.collect_base(m);
        k_.collect_base(m);
        v_.collect_base(m);
        o_.collect_base(m);
        if (sr_ > 1) {
            put_param(m, name_ + ".sr.k", sr_k_);
            put_param(m, name_ + ".sr.b", sr_b_);
            put_param(m, name_ + ".srln.g", sr_ln_g_);
            put_param(m, name_ + ".srln.b", sr_ln_b_);
        }
        fc1_.collect_base(m);
        fc2_.collect_base(m);
        if (pos_enc_) {
            put_param(m, name_ + ".dw.k", dw_k_);
            put_param(m, name_ + ".dw.b", dw_b_);
        }
    }

    void collect_adapters(uint32_t task, ParamMap& m, const PvtConfig& cfg) const {
        if (cfg.adapt_attn) {
            q_.collect_adapter(task, m);
            v_.collect_adapter(task, m);
        }
        if (cfg.adapt_ffn) {
            fc1_.collect_adapter(task, m);
            fc2_.collect_adapter(task, m);
        }
    }

    LoraLinear& q() { return q_; }
    LoraLinear& v() { return v_; }
    LoraLinear& fc1() { return fc1_; }

private:
    std::string name_;
    size_t dim_ = 0, heads_ = 0, sr_ = 0;
    double eps_ = 1e-6;
    bool pos_enc_ = false;
    Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
    LoraLinear q_, k_, v_, o_;
    Tensor sr_k_, sr_b_, sr_ln_g_, sr_ln_b_;
    LoraLinear fc1_, fc2_;
    Tensor dw_k_, dw_b_;
};

// Pyramid encoder-decoder over 3D volumes. Encoder stages: strided
// adapter-capable embedding conv (2x downsample), layer norm, transformer
// blocks. Decoder stages: transposed conv (2x upsample), layer norm, skip
// addition from the matching encoder stage, transformer blocks. A final
// upsample restores full resolution, and per-task 1x1x1 heads emit
// per-class foreground probabilities through a sigmoid.
class Pvt3d {
public:
    explicit Pvt3d(const PvtConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "model"));
        const size_t S = cfg_.dims.size();
        pe_.resize(S);
        pe_ln_g_.resize(S);
        pe_ln_b_.resize(S);
        enc_.resize(S);
        for (size_t i = 0; i < S; ++i) {
            const size_t cin = i == 0 ? cfg_.in_channels : cfg_.dims[i - 1];
            pe_[i] = LoraConv3d("enc" + std::to_string(i) + ".pe", cfg_.dims[i], cin, 2, 2, 0, rng);
            pe_ln_g_[i] = Tensor::full({cfg_.dims[i]}, 1.0);
            pe_ln_b_[i] = Tensor::zeros({cfg_.dims[i]});
            for (size_t b = 0; b < cfg_.enc_depths[i]; ++b)
                enc_[i].emplace_back("enc" + std::to_string(i) + ".b" + std::to_string(b),
                                     cfg_.dims[i], cfg_.heads[i], cfg_.sr_ratios[i], cfg_.ffn_ratio,
                                     cfg_.conv_pos_enc, cfg_.ln_eps, rng);
        }
        up_k_.resize(S - 1);
        up_b_.resize(S - 1);
        up_ln_g_.resize(S - 1);
        up_ln_b_.resize(S - 1);
        dec_.resize(S - 1);
        for (size_t i = 0; i < S - 1; ++i) {
            up_k_[i] = Tensor::randn({cfg_.dims[i + 1], cfg_.dims[i], 2, 2, 2}, rng, 0.02);
            up_b_[i] = Tensor::randn({cfg_.dims[i]}, rng, 0.01);
            up_ln_g_[i] = Tensor::full({cfg_.dims[i]}, 1.0);
            up_ln_b_[i] = Tensor::zeros({cfg_.dims[i]});
            for (size_t b = 0; b < cfg_.dec_depths[i]; ++b)
                dec_[i].emplace_back("dec" + std::to_string(i) + ".b" + std::to_string(b),
                                     cfg_.dims[i], cfg_.heads[i], cfg_.sr_ratios[i], cfg_.ffn_ratio,
                                     cfg_.conv_pos_enc, cfg_.ln_eps, rng);
        }
        final_up_k_ = Tensor::randn({cfg_.dims[0], cfg_.final_dim, 2, 2, 2}, rng, 0.02);
        final_up_b_ = Tensor::randn({cfg_.final_dim}, rng, 0.01);
        final_ln_g_ = Tensor::full({cfg_.final_dim}, 1.0);
        final_ln_b_ = Tensor::zeros({cfg_.final_dim});
        refine_ = LoraConv3d("final.refine", cfg_.final_dim, cfg_.final_dim, 3, 1, 1, rng);
    }

    const PvtConfig& config() const { return cfg_; }

    // Penultimate feature volume [final_dim, D, H, W] for the given task
    // (task < 0: frozen backbone only, no adapter contributions anywhere).
    Tensor features(const Tensor& vol, int64_t task) const {
        if (vol.ndim() != 4 || vol.dim(0) != cfg_.in_channels)
            throw ShapeError("model input must be [" + std::to_string(cfg_.in_channels) +
                             ", D, H, W], got " + shape_str(vol.shape()));
        const size_t S = cfg_.dims.size();
        std::vector<Tensor> skips(S);
        std::vector<std::array<size_t, 3>> grids(S);
        Tensor cur = vol;
        for (size_t i = 0; i < S; ++i) {
            Tensor emb = pe_[i].forward(cur, task);
            grids[i] = {emb.dim(1), emb.dim(2), emb.dim(3)};
            Tensor tok = layernorm(detail::to_tokens(emb), pe_ln_g_[i], pe_ln_b_[i], cfg_.ln_eps);
            for (const auto& blk : enc_[i])
                tok = blk.forward(tok, grids[i][0], grids[i][1], grids[i][2], task);
            skips[i] = tok;
            if (i + 1 < S) cur = detail::to_volume(tok, grids[i][0], grids[i][1], grids[i][2]);
        }
        Tensor tok = skips[S - 1];
        for (size_t ii = S - 1; ii-- > 0;) {
            Tensor volup = detail::to_volume(tok, grids[ii + 1][0], grids[ii + 1][1], grids[ii + 1][2]);
            Tensor up = deconv3d(volup, up_k_[ii], up_b_[ii], 2);
            Tensor t = layernorm(detail::to_tokens(up), up_ln_g_[ii], up_ln_b_[ii], cfg_.ln_eps);
            t = add(t, skips[ii]);
            for (const auto& blk : dec_[ii])
                t = blk.forward(t, grids[ii][0], grids[ii][1], grids[ii][2], task);
            tok = t;
        }
        Tensor volf = detail::to_volume(tok, grids[0][0], grids[0][1], grids[0][2]);
        Tensor up = deconv3d(volf, final_up_k_, final_up_b_, 2);
        Tensor t = layernorm(detail::to_tokens(up), final_ln_g_, final_ln_b_, cfg_.ln_eps);
        Tensor fv = detail::to_volume(t, up.dim(1), up.dim(2), up.dim(3));
        return gelu(refine_.forward(fv, task));
    }

    Tensor logits(const Tensor& vol, int64_t task) const {
        const Head& h = head_at(task);
        Tensor f = features(vol, task);
        return conv3d(f, h.k, h.b, 1, 0);
    }

    // Per-class foreground probabilities [classes, D, H, W].
    Tensor forward(const Tensor& vol, int64_t task) const { return sigmoid(logits(vol, task)); }

    void add_head(uint32_t task, size_t classes, uint64_t seed) {
        if (classes == 0) throw ContractError("head needs at least one class");
        if (heads_.count(task))
            throw ContractError("task " + std::to_string(task) + " already has a head");
        Rng rng(derive_seed(seed, "head" + std::to_string(task)));
        Head h;
        h.classes = classes;
        h.k = Tensor::randn({classes, cfg_.final_dim, 1, 1, 1}, rng, 0.02);
        h.b = Tensor::randn({classes}, rng, 0.01);
        heads_.emplace(task, std::move(h));
    }

    bool has_head(uint32_t task) const { return heads_.count(task) != 0; }
    size_t head_classes(uint32_t task) const { return head_at(task).classes; }
    std::vector<uint32_t> head_tasks() const {
        std::vector<uint32_t> out;
        for (const auto& [t, h] : heads_) out.push_back(t);
        return out;
    }

    void add_adapters(uint32_t task, uint64_t task_seed) {
        if (adapter_tasks_.count(task))
            throw ContractError("task " + std::to_string(task) + " already has adapters");
        for (auto& stage : enc_)
            for (auto& blk : stage) blk.add_adapters(task, task_seed, cfg_);
        for (auto& stage : dec_)
            for (auto& blk : stage) blk.add_adapters(task, task_seed, cfg_);
        if (cfg_.adapt_conv) {
            for (auto& pe : pe_) pe.add_adapter(task, cfg_.rank_conv, cfg_.alpha_conv, task_seed);
            refine_.add_adapter(task, cfg_.rank_conv, cfg_.alpha_conv, task_seed);
        }
        adapter_tasks_.insert(task);
    }

    bool has_adapters(uint32_t task) const { return adapter_tasks_.count(task) != 0; }

    // Frozen-able backbone: every parameter except heads and adapters.
    ParamMap base_params() const {
        ParamMap m;
        const size_t S = cfg_.dims.size();
        for (size_t i = 0; i < S; ++i) {
            pe_[i].collect_base(m);
            put_param(m, "enc" + std::to_string(i) + ".peln.g", pe_ln_g_[i]);
            put_param(m, "enc" + std::to_string(i) + ".peln.b", pe_ln_b_[i]);
            for (const auto& blk : enc_[i]) blk.collect_base(m);
        }
        for (size_t i = 0; i < S - 1; ++i) {
            put_param(m, "dec" + std::to_string(i) + ".up.k", up_k_[i]);
            put_param(m, "dec" + std::to_string(i) + ".up.b", up_b_[i]);
            put_param(m, "dec" + std::to_string(i) + ".upln.g", up_ln_g_[i]);
            put_param(m, "dec" + std::to_string(i) + ".upln.b", up_ln_b_[i]);
            for (const auto& blk : dec_[i]) blk.collect_base(m);
        }
        put_param(m, "final.up.k", final_up_k_);
        put_param(m, "final.up.b", final_up_b_);
        put_param(m, "final.ln.g", final_ln_g_);
        put_param(m, "final.ln.b", final_ln_b_);
        refine_.collect_base(m);
        return m;
    }

    ParamMap adapter_params(uint32_t task) const {
        if (!adapter_tasks_.count(task))
            throw MissingAdapterError("no adapters for task " + std::to_string(task));
        ParamMap m;
        for (const auto& stage : enc_)
            for (const auto& blk : stage) blk.collect_adapters(task, m, cfg_);
        for (const auto& stage : dec_)
            for (const auto& blk : stage) blk.collect_adapters(task, m, cfg_);
        if (cfg_.adapt_conv) {
            for (const auto& pe : pe_) pe.collect_adapter(task, m);
            refine_.collect_adapter(task, m);
        }
        return m;
    }

    ParamMap head_params(uint32_t task) const {
        const Head& h = head_at(task);
        ParamMap m;
        put_param(m, "head" + std::to_string(task) + ".k", h.k);
        put_param(m, "head" + std::to_string(task) + ".b", h.b);
        return m;
    }

    // Shape arithmetic only — must agree with count_elements(base_params()).
    static size_t estimate_base_param_count(const PvtConfig& cfg) {
        const size_t S = cfg.dims.size();
        size_t n = 0;
        auto lin = [](size_t d, size_t c) { return d * c + d; };
        auto block = [&](size_t dim, size_t sr) {
            size_t b = 4 * dim;                    // two layer norms
            b += 4 * lin(dim, dim);                // q, k, v, o
            if (sr > 1) b += dim * dim * sr * sr * sr + dim + 2 * dim;
            const size_t hidden = dim * cfg.ffn_ratio;
            b += lin(hidden, dim) + lin(dim, hidden);
            if (cfg.conv_pos_enc) b += hidden * 27 + hidden;
            return b;
        };
        for (size_t i = 0; i < S; ++i) {
            const size_t cin = i == 0 ? cfg.in_channels : cfg.dims[i - 1];
            n += cfg.dims[i] * cin * 8 + cfg.dims[i];  // embedding conv
            n += 2 * cfg.dims[i];                      // embedding norm
            n += cfg.enc_depths[i] * block(cfg.dims[i], cfg.sr_ratios[i]);
        }
        for (size_t i = 0; i < S - 1; ++i) {
            n += cfg.dims[i + 1] * cfg.dims[i] * 8 + cfg.dims[i];
            n += 2 * cfg.dims[i];
            n += cfg.dec_depths[i] * block(cfg.dims[i], cfg.sr_ratios[i]);
        }
        n += cfg.dims[0] * cfg.final_dim * 8 + cfg.final_dim;  // final upsample
        n += 2 * cfg.final_dim;
        n += cfg.final_dim * cfg.final_dim * 27 + cfg.final_dim;  // refinement conv
        return n;
    }

    // Adapter parameters added per continual task under the given flags.
    static size_t estimate_adapter_param_count(const PvtConfig& cfg) {
        const size_t S = cfg.dims.size();
        size_t n = 0;
        auto lin_adapter = [](size_t d, size_t c, size_t r) { return r * (d + c); };
        auto conv_adapter = [](size_t d, size_t c, size_t k, size_t r) {
            return d * k * k * r * k + r * k * c * k;  // B + A
        };
        auto block = [&](size_t dim) {
            size_t b = 0;
            if (cfg.adapt_attn) b += 2 * lin_adapter(dim, dim, cfg.rank_attn);
            if (cfg.adapt_ffn) {
                const size_t hidden = dim * cfg.ffn_ratio;
                b += lin_adapter(hidden, dim, cfg.rank_ffn) + lin_adapter(dim, hidden, cfg.rank_ffn);
            }
            return b;
        };
        for (size_t i = 0; i < S; ++i) {
            n += cfg.enc_depths[i] * block(cfg.dims[i]);
            if (cfg.adapt_conv) {
                const size_t cin = i == 0 ? cfg.in_channels : cfg.dims[i - 1];
                n += conv_adapter(cfg.dims[i], cin, 2, cfg.rank_conv);
            }
        }
        for (size_t i = 0; i < S - 1; ++i) n += cfg.dec_depths[i] * block(cfg.dims[i]);
        if (cfg.adapt_conv) n += conv_adapter(cfg.final_dim, cfg.final_dim, 3, cfg.rank_conv);
        return n;
    }

    uint64_t base_checksum() const { return checksum_params(base_params()); }

private:
    struct Head {
        size_t classes = 0;
        Tensor k, b;
    };

    const Head& head_at(int64_t task) const {
        auto it = heads_.find(static_cast<uint32_t>(task));
        if (task < 0 || it == heads_.end())
            throw MissingAdapterError("no head for task " + std::to_string(task));
        return it->second;
    }

    PvtConfig cfg_;
    std::vector<LoraConv3d> pe_;
    std::vector<Tensor> pe_ln_g_, pe_ln_b_;
    std::vector<std::vector<PvtBlock>> enc_;
    std::vector<Tensor> up_k_, up_b_, up_ln_g_, up_ln_b_;
    std::vector<std::vector<PvtBlock>> dec_;
    Tensor final_up_k_, final_up_b_, final_ln_g_, final_ln_b_;
    LoraConv3d refine_;
    std::map<uint32_t, Head> heads_;
    std::set<uint32_t> adapter_tasks_;
};

}  // namespace loco
