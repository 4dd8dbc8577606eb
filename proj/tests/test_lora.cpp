#include <catch2/catch_amalgamated.hpp>

#include "loco/lora.hpp"
#include "support/oracles.hpp"

using loco::LoraConv3d;
using loco::LoraLinear;
using loco::Rng;
using loco::Tensor;
using Catch::Approx;

TEST_CASE("fresh adapters leave the forward pass bitwise untouched") {
    Rng rng(101);
    LoraLinear lin("site.q", 8, 6, rng);
    Tensor x = Tensor::randn({5, 6}, rng);
    Tensor before = lin.forward(x, -1);
    lin.add_adapter(0, 3, 1.5, 42);
    Tensor after = lin.forward(x, 0);
    REQUIRE(after.data() == before.data());

    LoraConv3d conv("site.pe", 4, 2, 2, 2, 0, rng);
    Tensor v = Tensor::randn({2, 4, 4, 4}, rng);
    Tensor cb = conv.forward(v, -1);
    conv.add_adapter(0, 2, 1.0, 42);
    REQUIRE(conv.forward(v, 0).data() == cb.data());
}

TEST_CASE("adapter construction validates rank and duplicates") {
    Rng rng(103);
    LoraLinear lin("s", 8, 6, rng);
    REQUIRE_THROWS_AS(lin.add_adapter(0, 0, 1.0, 1), loco::ContractError);
    REQUIRE_THROWS_AS(lin.add_adapter(0, 2, 0.0, 1), loco::ContractError);
    REQUIRE_THROWS_AS(lin.add_adapter(0, 4, 1.0, 1), loco::ContractError);  // > min(8,6)/2
    lin.add_adapter(0, 3, 1.0, 1);
    REQUIRE_THROWS_AS(lin.add_adapter(0, 3, 1.0, 1), loco::ContractError);
    REQUIRE(lin.has_adapter(0));
    REQUIRE_FALSE(lin.has_adapter(1));
    REQUIRE_THROWS_AS(lin.adapter(7), loco::MissingAdapterError);
}

TEST_CASE("adapter init depends only on site name and task seed") {
    Rng r1(1), r2(2);
    LoraLinear a("enc.attn.q", 8, 8, r1);
    LoraLinear b("enc.attn.q", 8, 8, r2);  // different base, same site name
    a.add_adapter(3, 2, 1.0, 777);
    b.add_adapter(3, 2, 1.0, 777);
    REQUIRE(a.adapter(3).A.data() == b.adapter(3).A.data());
    // B starts zero everywhere
    for (double v : a.adapter(3).B.data()) REQUIRE(v == 0.0);

    LoraLinear c("enc.attn.v", 8, 8, r1);
    c.add_adapter(3, 2, 1.0, 777);
    REQUIRE(c.adapter(3).A.data() != a.adapter(3).A.data());

    LoraLinear d("enc.attn.q", 8, 8, r1);
    d.add_adapter(3, 2, 1.0, 778);  // different task seed
    REQUIRE(d.adapter(3).A.data() != a.adapter(3).A.data());
}

TEST_CASE("linear delta equals the dense low-rank product") {
    Rng rng(107);
    LoraLinear lin("s", 6, 5, rng);
    lin.add_adapter(0, 2, 1.0, 9);
    // make the delta non-trivial
    auto& p = const_cast<loco::LoraPair&>(lin.adapter(0));
    for (auto& v : p.B.data()) v = rng.normal(0.0, 1.0);

    Tensor x = Tensor::randn({4, 5}, rng);
    Tensor dl = lin.delta(x, 0);
    const double g = p.alpha / p.rank;
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (size_t r = 0; r < 2; ++r) {
                double xr = 0.0;
                for (size_t c = 0; c < 5; ++c) xr += x.raw()[i * 5 + c] * p.A.raw()[r * 5 + c];
                acc += p.B.raw()[j * 2 + r] * xr;
            }
            REQUIRE(dl.raw()[i * 6 + j] == Approx(g * acc).epsilon(1e-12).margin(1e-14));
        }

    // forward = base + delta
    Tensor base = lin.forward(x, -1);
    Tensor with = lin.forward(x, 0);
    for (size_t i = 0; i < with.numel(); ++i)
        REQUIRE(with.raw()[i] == Approx(base.raw()[i] + dl.raw()[i]).epsilon(1e-12));
}

TEST_CASE("doubling alpha doubles the delta bitwise for power-of-two gains") {
    Rng rng(109);
    LoraLinear a("s", 8, 8, rng);
    a.add_adapter(0, 4, 2.0, 5);   // gain 0.5
    a.add_adapter(1, 4, 4.0, 5);   // gain 1.0, same init (same site+seed)
    auto& p0 = const_cast<loco::LoraPair&>(a.adapter(0));
    auto& p1 = const_cast<loco::LoraPair&>(a.adapter(1));
    for (size_t i = 0; i < p0.B.numel(); ++i) {
        const double v = rng.normal(0.0, 1.0);
        p0.B.raw()[i] = v;
        p1.B.raw()[i] = v;
    }
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor d0 = a.delta(x, 0);
    Tensor d1 = a.delta(x, 1);
    for (size_t i = 0; i < d0.numel(); ++i) REQUIRE(d1.raw()[i] == 2.0 * d0.raw()[i]);
}

TEST_CASE("conv adapter matches an explicitly materialized dense kernel") {
    Rng rng(113);
    // sweep shapes: kernel size, channels, rank all vary
    int checked = 0;
    for (size_t k : {1, 2, 3}) {
        for (size_t d : {2, 4, 6}) {
            for (size_t c : {1, 3}) {
                for (uint32_t r : {1u, 2u}) {
                    const size_t pad = k == 3 ? 1 : 0;
                    const size_t stride = k == 2 ? 2 : 1;
                    LoraConv3d site("s", d, c, k, stride, pad, rng);
                    site.add_adapter(0, r, 1.25, 1000 + checked);
                    auto& p = const_cast<loco::LoraPair&>(site.adapter(0));
                    for (auto& v : p.B.data()) v = rng.normal(0.0, 1.0);

                    // independent dense kernel: M = B*A by explicit loops, then
                    // delta[dd,cc,kd,kh,kw] = gain * M[(dd*k+kd)*k+kh, cc*k+kw]
                    const size_t rows = d * k * k, cols = c * k, inner = r * k;
                    std::vector<double> M(rows * cols, 0.0);
                    for (size_t i = 0; i < rows; ++i)
                        for (size_t j = 0; j < cols; ++j) {
                            double acc = 0.0;
                            for (size_t l = 0; l < inner; ++l)
                                acc += p.B.raw()[i * inner + l] * p.A.raw()[l * cols + j];
                            M[i * cols + j] = acc;
                        }
                    const double gain = p.alpha / p.rank;
                    Tensor dk = site.delta_kernel(0);
                    REQUIRE(dk.shape() == loco::Shape{d, c, k, k, k});
                    for (size_t dd = 0; dd < d; ++dd)
                        for (size_t cc = 0; cc < c; ++cc)
                            for (size_t kd = 0; kd < k; ++kd)
                                for (size_t kh = 0; kh < k; ++kh)
                                    for (size_t kw = 0; kw < k; ++kw) {
                                        const double want =
                                            gain * M[((dd * k + kd) * k + kh) * cols + cc * k + kw];
                                        const double got =
                                            dk.raw()[(((dd * c + cc) * k + kd) * k + kh) * k + kw];
                                        REQUIRE(got == Approx(want).epsilon(1e-12).margin(1e-14));
                                    }

                    // end-to-end: forward equals a plain conv with base+delta kernel
                    Tensor x = Tensor::randn({c, 4, 4, 4}, rng);
                    Tensor with = site.forward(x, 0);
                    loco::ParamMap base;
                    site.collect_base(base);
                    Tensor dense = Tensor::zeros({d, c, k, k, k});
                    const Tensor& bk = base.at("s.k");
                    for (size_t i = 0; i < dense.numel(); ++i)
                        dense.raw()[i] = bk.raw()[i] + dk.raw()[i];
                    Tensor ref = oracle::naive_conv3d(x, dense, base.at("s.b"), stride, pad);
                    REQUIRE(with.shape() == ref.shape());
                    for (size_t i = 0; i < ref.numel(); ++i)
                        REQUIRE(with.raw()[i] == Approx(ref.raw()[i]).epsilon(1e-10).margin(1e-12));
                    ++checked;
                }
            }
        }
    }
    REQUIRE(checked >= 20);
}

TEST_CASE("gradients reach the low-rank factors but not the frozen base") {
    Rng rng(127);
    LoraLinear lin("s", 6, 6, rng);
    lin.add_adapter(0, 2, 1.0, 3);
    auto& p = const_cast<loco::LoraPair&>(lin.adapter(0));
    for (auto& v : p.B.data()) v = rng.normal(0.0, 0.3);
    Tensor x = Tensor::randn({4, 6}, rng);

    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::sigmoid(lin.forward(x, 0))); }, {p.B, p.A}) < 1e-6);

    loco::ParamMap base;
    lin.collect_base(base);
    p.B.set_requires_grad(true);
    p.A.set_requires_grad(true);
    loco::Tape tape;
    Tensor loss = loco::sum(lin.forward(x, 0));
    tape.backward(loss);
    REQUIRE(base.at("s.w").grad() == nullptr);
    REQUIRE(base.at("s.b").grad() == nullptr);
    REQUIRE(p.B.grad() != nullptr);
    p.B.set_requires_grad(false);
    p.A.set_requires_grad(false);
    p.B.clear_grad();
    p.A.clear_grad();

    // conv path too
    LoraConv3d conv("c", 3, 2, 2, 2, 0, rng);
    conv.add_adapter(0, 1, 1.0, 4);
    auto& q = const_cast<loco::LoraPair&>(conv.adapter(0));
    for (auto& v : q.B.data()) v = rng.normal(0.0, 0.3);
    Tensor v2 = Tensor::randn({2, 4, 4, 4}, rng);
    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::sigmoid(conv.forward(v2, 0))); }, {q.B, q.A}) < 1e-6);
}

TEST_CASE("adapter parameters are collected under task-scoped names") {
    Rng rng(131);
    LoraLinear lin("enc0.ffn.fc1", 8, 4, rng);
    lin.add_adapter(2, 2, 1.0, 11);
    loco::ParamMap m;
    lin.collect_adapter(2, m);
    REQUIRE(m.size() == 2);
    REQUIRE(m.count("enc0.ffn.fc1.lora2.A") == 1);
    REQUIRE(m.count("enc0.ffn.fc1.lora2.B") == 1);
    loco::ParamMap b;
    lin.collect_base(b);
    REQUIRE(b.count("enc0.ffn.fc1.w") == 1);
    REQUIRE(b.count("enc0.ffn.fc1.b") == 1);
    REQUIRE(loco::count_elements(b) == 8 * 4 + 8);
}
