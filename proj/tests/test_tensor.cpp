#include <catch2/catch_amalgamated.hpp>

#include "loco/nn.hpp"
#include "loco/tensor.hpp"
#include "support/oracles.hpp"

using loco::Rng;
using loco::Shape;
using loco::Tape;
using loco::Tensor;
using Catch::Approx;

TEST_CASE("tensor construction validates shapes") {
    REQUIRE_THROWS_AS(Tensor::zeros({}), loco::ShapeError);
    REQUIRE_THROWS_AS(Tensor::zeros({3, 0, 2}), loco::ShapeError);
    REQUIRE_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), loco::ShapeError);
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.dim(1) == 3);
    REQUIRE(Tensor::scalar(4.25).value() == 4.25);
    REQUIRE_THROWS_AS(t.value(), loco::ContractError);
}

TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from({4}, {1.0, -2.0, 0.5, 3.0});
    Tensor b = Tensor::from({4}, {2.0, 4.0, -1.0, 0.5});
    REQUIRE(loco::add(a, b).data() == std::vector<double>{3.0, 2.0, -0.5, 3.5});
    REQUIRE(loco::sub(a, b).data() == std::vector<double>{-1.0, -6.0, 1.5, 2.5});
    REQUIRE(loco::mul(a, b).data() == std::vector<double>{2.0, -8.0, -0.5, 1.5});
    REQUIRE(loco::div(a, b).raw()[1] == -0.5);
    REQUIRE(loco::affine(a, 2.0, 1.0).data() == std::vector<double>{3.0, -3.0, 2.0, 7.0});
    Tensor c = loco::clamp(a, 0.0, 1.0);
    REQUIRE(c.data() == std::vector<double>{1.0, 0.0, 0.5, 1.0});
    REQUIRE(loco::sum(a).value() == 2.5);
    REQUIRE(loco::mean(a).value() == Approx(0.625));
    Tensor mismatched = Tensor::zeros({3});
    REQUIRE_THROWS_AS(loco::add(a, mismatched), loco::ShapeError);
}

TEST_CASE("ops do not record without a tape and do not mark outputs") {
    Tensor a = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tensor y = loco::scale(a, 3.0);
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.is_leaf());
}

TEST_CASE("backward contract checks") {
    Tensor a = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tape tape;
    Tensor vec = loco::scale(a, 2.0);
    REQUIRE_THROWS_AS(tape.backward(vec), loco::ContractError);
    Tensor off_tape = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(tape.backward(off_tape), loco::ContractError);
    Tensor loss = loco::sum(vec);
    tape.backward(loss);
    REQUIRE((*a.grad())[0] == 2.0);
    REQUIRE((*a.grad())[1] == 2.0);
    tape.backward(loss);  // repeated backward accumulates
    REQUIRE((*a.grad())[0] == 4.0);
}

TEST_CASE("elementwise gradients match finite differences") {
    Rng rng(99);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({3, 4}, rng);
    for (auto& v : b.data()) v += v < 0 ? -0.5 : 0.5;  // keep divisors away from zero

    auto check = [&](const char* what, std::function<Tensor()> f, std::vector<Tensor> params) {
        INFO(what);
        REQUIRE(oracle::max_grad_rel_err(f, params) < 1e-6);
    };
    check("add", [&] { return loco::sum(loco::mul(loco::add(a, b), b)); }, {a, b});
    check("sub", [&] { return loco::sum(loco::mul(loco::sub(a, b), a)); }, {a, b});
    check("mul", [&] { return loco::sum(loco::mul(a, b)); }, {a, b});
    check("div", [&] { return loco::sum(loco::div(a, b)); }, {a, b});
    check("affine", [&] { return loco::mean(loco::affine(a, 3.0, -1.0)); }, {a});
    check("sigmoid", [&] { return loco::sum(loco::sigmoid(a)); }, {a});
    check("gelu", [&] { return loco::sum(loco::gelu(a)); }, {a});
    Tensor pos = Tensor::from({3}, {0.5, 1.5, 2.5});
    check("log", [&] { return loco::sum(loco::log(pos)); }, {pos});
}

TEST_CASE("clamp gradient is zero outside the active range") {
    Tensor a = Tensor::from({3}, {-1.0, 0.5, 2.0}).set_requires_grad(true);
    Tape tape;
    Tensor loss = loco::sum(loco::clamp(a, 0.0, 1.0));
    tape.backward(loss);
    REQUIRE((*a.grad())[0] == 0.0);
    REQUIRE((*a.grad())[1] == 1.0);
    REQUIRE((*a.grad())[2] == 0.0);
}

TEST_CASE("matmul matches the naive triple loop bitwise") {
    Rng rng(7);
    Tensor a = Tensor::randn({5, 7}, rng);
    Tensor b = Tensor::randn({7, 4}, rng);
    Tensor lib = loco::matmul(a, b);
    Tensor ref = oracle::naive_matmul(a, b);
    REQUIRE(lib.data() == ref.data());
    REQUIRE_THROWS_AS(loco::matmul(a, a), loco::ShapeError);
}

TEST_CASE("matmul and linear gradients match finite differences") {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    REQUIRE(oracle::max_grad_rel_err([&] { return loco::sum(loco::matmul(a, b)); }, {a, b}) < 1e-6);

    Tensor x = Tensor::randn({5, 4}, rng);
    Tensor w = Tensor::randn({3, 4}, rng);
    Tensor bias = Tensor::randn({3}, rng);
    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::mean(loco::sigmoid(loco::linear(x, w, bias))); }, {x, w, bias}) <
            1e-6);

    // forward agrees with an explicit loop
    Tensor y = loco::linear(x, w, bias);
    for (size_t i = 0; i < 5; ++i)
        for (size_t j = 0; j < 3; ++j) {
            double acc = bias.raw()[j];
            for (size_t c = 0; c < 4; ++c) acc += x.raw()[i * 4 + c] * w.raw()[j * 4 + c];
            REQUIRE(y.raw()[i * 3 + j] == Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("reshape and permute round-trip and carry gradients") {
    Rng rng(13);
    Tensor a = Tensor::randn({2, 3, 4}, rng);
    Tensor r = loco::reshape(a, {4, 6});
    REQUIRE(r.data() == a.data());
    REQUIRE_THROWS_AS(loco::reshape(a, {5, 5}), loco::ShapeError);

    Tensor p = loco::permute(a, {2, 0, 1});
    REQUIRE(p.shape() == Shape{4, 2, 3});
    for (size_t i = 0; i < 2; ++i)
        for (size_t j = 0; j < 3; ++j)
            for (size_t k = 0; k < 4; ++k)
                REQUIRE(p.raw()[(k * 2 + i) * 3 + j] == a.raw()[(i * 3 + j) * 4 + k]);
    Tensor back = loco::permute(p, {1, 2, 0});
    REQUIRE(back.data() == a.data());
    REQUIRE_THROWS_AS(loco::permute(a, {0, 0, 1}), loco::ShapeError);

    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::mul(loco::permute(a, {2, 0, 1}), loco::permute(a, {2, 0, 1}))); },
                {a}) < 1e-6);

    Tensor m = Tensor::randn({3, 5}, rng);
    Tensor t = loco::transpose(m);
    REQUIRE(t.shape() == Shape{5, 3});
    REQUIRE(t.raw()[2 * 3 + 1] == m.raw()[1 * 5 + 2]);
}

TEST_CASE("slice and concat are inverse and propagate gradients") {
    Rng rng(17);
    Tensor a = Tensor::randn({4, 6}, rng);
    Tensor left = loco::slice(a, 1, 0, 2);
    Tensor midr = loco::slice(a, 1, 2, 4);
    REQUIRE(left.shape() == Shape{4, 2});
    REQUIRE(loco::concat({left, midr}, 1).data() == a.data());
    REQUIRE_THROWS_AS(loco::slice(a, 2, 0, 1), loco::ShapeError);
    REQUIRE_THROWS_AS(loco::slice(a, 1, 5, 2), loco::ShapeError);

    REQUIRE(oracle::max_grad_rel_err(
                [&] {
                    Tensor s = loco::slice(a, 0, 1, 2);
                    Tensor c = loco::concat({s, s}, 0);
                    return loco::sum(loco::mul(c, c));
                },
                {a}) < 1e-6);
}

TEST_CASE("softmax normalizes and matches finite differences") {
    Rng rng(19);
    Tensor a = Tensor::randn({3, 5}, rng);
    Tensor s = loco::softmax(a, 1);
    for (size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (size_t j = 0; j < 5; ++j) row += s.raw()[i * 5 + j];
        REQUIRE(row == Approx(1.0).epsilon(1e-12));
    }
    // shift invariance along the softmax axis
    Tensor shifted = loco::softmax(loco::affine(a, 1.0, 100.0), 1);
    for (size_t i = 0; i < s.numel(); ++i) REQUIRE(s.raw()[i] == Approx(shifted.raw()[i]).epsilon(1e-12));

    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::mul(loco::softmax(a, 1), a)); }, {a}) < 1e-6);
    // softmax over a middle axis
    Tensor b = Tensor::randn({2, 4, 3}, rng);
    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::mul(loco::softmax(b, 1), b)); }, {b}) < 1e-6);
}

TEST_CASE("layernorm normalizes rows and matches finite differences") {
    Rng rng(23);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor gain = Tensor::full({6}, 1.0);
    Tensor bias = Tensor::zeros({6});
    Tensor y = loco::layernorm(x, gain, bias, 1e-6);
    for (size_t r = 0; r < 4; ++r) {
        double m = 0.0, v = 0.0;
        for (size_t j = 0; j < 6; ++j) m += y.raw()[r * 6 + j];
        m /= 6.0;
        for (size_t j = 0; j < 6; ++j) v += (y.raw()[r * 6 + j] - m) * (y.raw()[r * 6 + j] - m);
        REQUIRE(m == Approx(0.0).margin(1e-9));
        REQUIRE(v / 6.0 == Approx(1.0).epsilon(1e-4));
    }
    Tensor g2 = Tensor::randn({6}, rng);
    Tensor b2 = Tensor::randn({6}, rng);
    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::sum(loco::mul(loco::layernorm(x, g2, b2, 1e-6), x)); },
                {x, g2, b2}) < 1e-5);
    REQUIRE_THROWS_AS(loco::layernorm(x, Tensor::zeros({5}), bias, 1e-6), loco::ShapeError);
    REQUIRE_THROWS_AS(loco::layernorm(x, gain, bias, 0.0), loco::ContractError);
}

TEST_CASE("frozen inputs are skipped during backward") {
    Tensor frozen = Tensor::from({2}, {1.0, 2.0});
    Tensor live = Tensor::from({2}, {3.0, 4.0}).set_requires_grad(true);
    Tape tape;
    Tensor loss = loco::sum(loco::mul(frozen, live));
    tape.backward(loss);
    REQUIRE(frozen.grad() == nullptr);
    REQUIRE((*live.grad())[0] == 1.0);
    REQUIRE((*live.grad())[1] == 2.0);
}

TEST_CASE("loss terms behave at the boundaries") {
    // perfect binary match gives exactly zero dice loss
    Tensor p = Tensor::from({1, 2, 2}, {1.0, 0.0, 1.0, 1.0});
    Tensor t = Tensor::from({1, 2, 2}, {1.0, 0.0, 1.0, 1.0});
    REQUIRE(loco::soft_dice_loss(p, t).value() == 0.0);

    // all-empty prediction and target: dice loss still zero, bce finite
    Tensor z = Tensor::zeros({1, 2, 2});
    REQUIRE(loco::soft_dice_loss(z, z).value() == 0.0);
    REQUIRE(std::isfinite(loco::bce_loss(z, z).value()));

    // bce at a known value: p=0.5 everywhere gives ln 2
    Tensor half = Tensor::full({1, 4}, 0.5);
    Tensor tb = Tensor::from({1, 4}, {1.0, 0.0, 1.0, 0.0});
    REQUIRE(loco::bce_loss(half, tb).value() == Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(31);
    Tensor logits = Tensor::randn({2, 3, 3}, rng);
    Tensor target = Tensor::zeros({2, 3, 3});
    for (size_t i = 0; i < target.numel(); ++i) target.raw()[i] = (i % 3 == 0) ? 1.0 : 0.0;
    REQUIRE(oracle::max_grad_rel_err(
                [&] { return loco::dice_bce_loss(loco::sigmoid(logits), target); }, {logits}) < 1e-5);
}

TEST_CASE("adamw rejects frozen parameters and decays weights") {
    loco::AdamW opt(0.1, 0.0);
    Tensor frozen = Tensor::zeros({2});
    REQUIRE_THROWS_AS(opt.add_param("w", frozen), loco::ContractError);

    Tensor w = Tensor::from({1}, {1.0}).set_requires_grad(true);
    opt.add_param("w", w);
    {
        Tape tape;
        Tensor loss = loco::mul(w, w);  // d/dw = 2w
        tape.backward(loss);
    }
    opt.step();
    REQUIRE(w.raw()[0] < 1.0);  // moved against the gradient

    // pure weight decay shrinks weights even with zero gradient
    loco::AdamW decay(0.5, 1.0);
    Tensor v = Tensor::from({1}, {2.0}).set_requires_grad(true);
    decay.add_param("v", v);
    v.ensure_grad();
    decay.step();
    REQUIRE(v.raw()[0] == Approx(2.0 - 0.5 * 1.0 * 2.0));
}

TEST_CASE("optimizer converges on a small least-squares problem") {
    Rng rng(37);
    Tensor x = Tensor::randn({16, 3}, rng);
    Tensor w_true = Tensor::from({1, 3}, {0.5, -1.0, 2.0});
    Tensor y = loco::linear(x, w_true, Tensor::from({1}, {0.25}));

    Tensor w = Tensor::zeros({1, 3}).set_requires_grad(true);
    Tensor b = Tensor::zeros({1}).set_requires_grad(true);
    loco::AdamW opt(0.05, 0.0);
    opt.add_param("w", w);
    opt.add_param("b", b);
    double last = 1e30;
    for (int it = 0; it < 400; ++it) {
        opt.zero_grads();
        Tape tape;
        Tensor pred = loco::linear(x, w, b);
        Tensor diff = loco::sub(pred, y);
        Tensor loss = loco::mean(loco::mul(diff, diff));
        tape.backward(loss);
        opt.step();
        last = loss.value();
    }
    REQUIRE(last < 1e-4);
    REQUIRE(w.raw()[2] == Approx(2.0).margin(0.05));
}
