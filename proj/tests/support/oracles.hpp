#pragma once

// Independent reference implementations used to check the library. These are
// deliberately written as plain loops with no shared code paths: the naive
// convolutions walk windows directly, gradients come from central finite
// differences, never from the tape.

#include <cmath>
#include <functional>
#include <vector>

#include "loco/tensor.hpp"

namespace oracle {

using loco::Shape;
using loco::Tensor;

inline double rel_err(double a, double b) {
    const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / scale;
}

// Central finite differences against tape gradients. `forward` must rebuild
// the whole computation from the current parameter values each call; it is
// invoked once under a fresh tape for the analytic pass and twice per element
// (tapeless) for the numeric one.
inline double max_grad_rel_err(const std::function<Tensor()>& forward, std::vector<Tensor> params,
                               double h = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        loco::Tape tape;
        Tensor loss = forward();
        tape.backward(loss);
        for (auto& p : params) {
            const auto* g = p.grad();
            analytic.push_back(g ? *g : std::vector<double>(p.numel(), 0.0));
        }
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + h;
            const double fp = forward().value();
            data[i] = keep - h;
            const double fm = forward().value();
            data[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic[pi][i], fd));
        }
    }
    for (auto& p : params) p.clear_grad();
    return worst;
}

// Same check on a random subset of parameter elements; used where the full
// sweep would need too many forward evaluations.
inline double sampled_grad_rel_err(const std::function<Tensor()>& forward, std::vector<Tensor> params,
                                   size_t samples_per_param, loco::Rng& rng, double h = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        loco::Tape tape;
        Tensor loss = forward();
        tape.backward(loss);
        for (auto& p : params) {
            const auto* g = p.grad();
            analytic.push_back(g ? *g : std::vector<double>(p.numel(), 0.0));
        }
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        for (size_t s = 0; s < samples_per_param; ++s) {
            const size_t i = static_cast<size_t>(rng.next_below(data.size()));
            const double keep = data[i];
            data[i] = keep + h;
            const double fp = forward().value();
            data[i] = keep - h;
            const double fm = forward().value();
            data[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic[pi][i], fd));
        }
    }
    for (auto& p : params) p.clear_grad();
    return worst;
}

// Row-wise layer norm over the last axis of a [rows, c] matrix.
inline std::vector<double> naive_layernorm(const std::vector<double>& x, const std::vector<double>& g,
                                           const std::vector<double>& b, size_t rows, size_t c,
                                           double eps) {
    std::vector<double> out(rows * c);
    for (size_t r = 0; r < rows; ++r) {
        double m = 0.0, v = 0.0;
        for (size_t j = 0; j < c; ++j) m += x[r * c + j];
        m /= static_cast<double>(c);
        for (size_t j = 0; j < c; ++j) v += (x[r * c + j] - m) * (x[r * c + j] - m);
        v /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(v + eps);
        for (size_t j = 0; j < c; ++j) out[r * c + j] = g[j] * ((x[r * c + j] - m) * is) + b[j];
    }
    return out;
}

inline std::vector<double> naive_linear_rows(const std::vector<double>& x, const Tensor& w,
                                             const Tensor& b, size_t rows, size_t c) {
    const size_t d = w.dim(0);
    std::vector<double> out(rows * d);
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < d; ++j) {
            double acc = b.raw()[j];
            for (size_t l = 0; l < c; ++l) acc += x[i * c + l] * w.raw()[j * c + l];
            out[i * d + j] = acc;
        }
    return out;
}

inline double naive_gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

// Plain triple loop, same accumulation order as a row-times-column dot.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t l = 0; l < k; ++l) acc += a.raw()[i * k + l] * b.raw()[l * n + j];
            out.raw()[i * n + j] = acc;
        }
    return out;
}

// Direct sliding-window convolution. x [ci,D,H,W], kernel [co,ci,k,k,k].
// Accumulation order over (ci, kd, kh, kw) ascending matches the library's
// im2col row ordering, so for identical inputs the results are bitwise equal.
inline Tensor naive_conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, size_t stride,
                           size_t pad) {
    const size_t ci = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t co = kernel.dim(0), k = kernel.dim(2);
    const size_t OD = (D + 2 * pad - k) / stride + 1;
    const size_t OH = (H + 2 * pad - k) / stride + 1;
    const size_t OW = (W + 2 * pad - k) / stride + 1;
    Tensor out = Tensor::zeros({co, OD, OH, OW});
    for (size_t c = 0; c < co; ++c)
        for (size_t od = 0; od < OD; ++od)
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (size_t ic = 0; ic < ci; ++ic)
                        for (size_t kd = 0; kd < k; ++kd)
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw) {
                                    const ptrdiff_t id = static_cast<ptrdiff_t>(od * stride + kd) -
                                                         static_cast<ptrdiff_t>(pad);
                                    const ptrdiff_t ih = static_cast<ptrdiff_t>(oh * stride + kh) -
                                                         static_cast<ptrdiff_t>(pad);
                                    const ptrdiff_t iw = static_cast<ptrdiff_t>(ow * stride + kw) -
                                                         static_cast<ptrdiff_t>(pad);
                                    if (id < 0 || id >= static_cast<ptrdiff_t>(D) || ih < 0 ||
                                        ih >= static_cast<ptrdiff_t>(H) || iw < 0 ||
                                        iw >= static_cast<ptrdiff_t>(W))
                                        continue;
                                    acc += x.raw()[((ic * D + static_cast<size_t>(id)) * H +
                                                    static_cast<size_t>(ih)) *
                                                       W +
                                                   static_cast<size_t>(iw)] *
                                           kernel.raw()[(((c * ci + ic) * k + kd) * k + kh) * k + kw];
                                }
                    out.raw()[((c * OD + od) * OH + oh) * OW + ow] = acc + bias.raw()[c];
                }
    return out;
}

// Transposed convolution by scattering each input voxel through the kernel.
// x [ci,D,H,W], kernel [ci,co,k,k,k], output [co,(D-1)*s+k,...].
inline Tensor naive_deconv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                             size_t stride) {
    const size_t ci = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t co = kernel.dim(1), k = kernel.dim(2);
    const size_t OD = (D - 1) * stride + k;
    const size_t OH = (H - 1) * stride + k;
    const size_t OW = (W - 1) * stride + k;
    Tensor out = Tensor::zeros({co, OD, OH, OW});
    for (size_t c = 0; c < co; ++c)
        for (size_t od = 0; od < OD; ++od)
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    // sum over windows (id, kd) with od == id*stride + kd
                    for (size_t ic = 0; ic < ci; ++ic)
                        for (size_t kd = 0; kd < k; ++kd)
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw) {
                                    if (od < kd || oh < kh || ow < kw) continue;
                                    const size_t rd = od - kd, rh = oh - kh, rw = ow - kw;
                                    if (rd % stride || rh % stride || rw % stride) continue;
                                    const size_t id = rd / stride, ih = rh / stride, iw = rw / stride;
                                    if (id >= D || ih >= H || iw >= W) continue;
                                    acc += x.raw()[((ic * D + id) * H + ih) * W + iw] *
                                           kernel.raw()[(((ic * co + c) * k + kd) * k + kh) * k + kw];
                                }
                    out.raw()[((c * OD + od) * OH + oh) * OW + ow] = acc + bias.raw()[c];
                }
    return out;
}

// Depthwise stride-1 convolution. x [C,D,H,W], kernel [C,k,k,k].
inline Tensor naive_dwconv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, size_t pad) {
    const size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t k = kernel.dim(1);
    Tensor out = Tensor::zeros({C, D, H, W});
    for (size_t c = 0; c < C; ++c)
        for (size_t od = 0; od < D; ++od)
            for (size_t oh = 0; oh < H; ++oh)
                for (size_t ow = 0; ow < W; ++ow) {
                    double acc = 0.0;
                    for (size_t kd = 0; kd < k; ++kd)
                        for (size_t kh = 0; kh < k; ++kh)
                            for (size_t kw = 0; kw < k; ++kw) {
                                const ptrdiff_t id =
                                    static_cast<ptrdiff_t>(od + kd) - static_cast<ptrdiff_t>(pad);
                                const ptrdiff_t ih =
                                    static_cast<ptrdiff_t>(oh + kh) - static_cast<ptrdiff_t>(pad);
                                const ptrdiff_t iw =
                                    static_cast<ptrdiff_t>(ow + kw) - static_cast<ptrdiff_t>(pad);
                                if (id < 0 || id >= static_cast<ptrdiff_t>(D) || ih < 0 ||
                                    ih >= static_cast<ptrdiff_t>(H) || iw < 0 ||
                                    iw >= static_cast<ptrdiff_t>(W))
                                    continue;
                                acc += x.raw()[((c * D + static_cast<size_t>(id)) * H +
                                                static_cast<size_t>(ih)) *
                                                   W +
                                               static_cast<size_t>(iw)] *
                                       kernel.raw()[((c * k + kd) * k + kh) * k + kw];
                            }
                    out.raw()[((c * D + od) * H + oh) * W + ow] = acc + bias.raw()[c];
                }
    return out;
}

}  // namespace oracle
