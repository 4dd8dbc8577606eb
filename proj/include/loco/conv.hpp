#pragma once

#include "loco/tensor.hpp"

namespace loco {

// Spatial layout for all volumetric ops: rank-4 tensors [C, D, H, W] with the
// kernel cubic. Output extent per axis: (in + 2*pad - k) / stride + 1, and the
// division must be exact (mis-sized configs fail loudly instead of silently
// cropping).

struct ConvDims {
    size_t ci, d, h, w;
    size_t k, stride, pad;
    size_t od, oh, ow;
};

namespace detail {

inline ConvDims conv_dims(const Tensor& x, size_t k, size_t stride, size_t pad) {
    if (x.ndim() != 4) throw ShapeError("conv: input must be [C,D,H,W], got " + shape_str(x.shape()));
    if (k == 0 || stride == 0) throw ShapeError("conv: kernel and stride must be positive");
    ConvDims cd{};
    cd.ci = x.dim(0);
    cd.d = x.dim(1);
    cd.h = x.dim(2);
    cd.w = x.dim(3);
    cd.k = k;
    cd.stride = stride;
    cd.pad = pad;
    auto out_extent = [&](size_t in, const char* ax) {
        const size_t span = in + 2 * pad;
        if (span < k) throw ShapeError(std::string("conv: kernel larger than padded ") + ax + " axis");
        if ((span - k) % stride != 0)
            throw ShapeError(std::string("conv: stride does not tile the ") + ax + " axis exactly");
        return (span - k) / stride + 1;
    };
    cd.od = out_extent(cd.d, "D");
    cd.oh = out_extent(cd.h, "H");
    cd.ow = out_extent(cd.w, "W");
    return cd;
}

// vol_to_cols == true:  cols[r, q] += vol[...]  (im2col gather)
// vol_to_cols == false: vol[...]  += cols[r, q] (col2im scatter)
// Always accumulates, so both directions are usable in backward passes; the
// forward direction relies on the destination starting zeroed. Out-of-bounds
// window cells contribute nothing (implicit zero padding).
inline void im2col_pass(const ConvDims& cd, double* vol, double* cols, bool vol_to_cols) {
    const size_t P = cd.od * cd.oh * cd.ow;
    const size_t hw = cd.h * cd.w;
    size_t r = 0;
    for (size_t c = 0; c < cd.ci; ++c) {
        const size_t cbase = c * cd.d * hw;
        for (size_t kd = 0; kd < cd.k; ++kd)
            for (size_t kh = 0; kh < cd.k; ++kh)
                for (size_t kw = 0; kw < cd.k; ++kw, ++r) {
                    double* row = cols + r * P;
                    size_t q = 0;
                    for (size_t od = 0; od < cd.od; ++od) {
                        const ptrdiff_t id = static_cast<ptrdiff_t>(od * cd.stride + kd) -
                                             static_cast<ptrdiff_t>(cd.pad);
                        const bool dok = id >= 0 && id < static_cast<ptrdiff_t>(cd.d);
                        for (size_t oh = 0; oh < cd.oh; ++oh) {
                            const ptrdiff_t ih = static_cast<ptrdiff_t>(oh * cd.stride + kh) -
                                                 static_cast<ptrdiff_t>(cd.pad);
                            const bool hok = ih >= 0 && ih < static_cast<ptrdiff_t>(cd.h);
                            for (size_t ow = 0; ow < cd.ow; ++ow, ++q) {
                                const ptrdiff_t iw = static_cast<ptrdiff_t>(ow * cd.stride + kw) -
                                                     static_cast<ptrdiff_t>(cd.pad);
                                if (!dok || !hok || iw < 0 || iw >= static_cast<ptrdiff_t>(cd.w))
                                    continue;
                                const size_t src = cbase + static_cast<size_t>(id) * hw +
                                                   static_cast<size_t>(ih) * cd.w +
                                                   static_cast<size_t>(iw);
                                if (vol_to_cols)
                                    row[q] += vol[src];
                                else
                                    vol[src] += row[q];
                            }
                        }
                    }
                }
    }
}

}  // namespace detail

// Unrolls sliding windows into a [ci*k^3, P] matrix; rows ordered
// (channel, kd, kh, kw), columns ordered (od, oh, ow).
inline Tensor im2col3d(const Tensor& x, size_t k, size_t stride, size_t pad) {
    const ConvDims cd = detail::conv_dims(x, k, stride, pad);
    const size_t K_len = cd.ci * k * k * k;
    const size_t P = cd.od * cd.oh * cd.ow;
    Tensor cols = Tensor::zeros({K_len, P});
    detail::im2col_pass(cd, const_cast<double*>(x.raw()), cols.raw(), true);
    if (detail::want_grad({&x})) {
        detail::mark_out(cols);
        Tape::current()->record("im2col3d", {x}, cols, [xi = x.impl(), ci = cols.impl(), cd] {
            auto* g = detail::grad_of(ci);
            if (!g) return;
            detail::im2col_pass(cd, detail::acc_grad(xi).data(), const_cast<double*>(g->data()), false);
        });
    }
    return cols;
}

// Inverse mapping used by transposed convolution: scatter-adds a
// [co*k^3, P_in] matrix onto the upsampled grid. No padding; the output
// extent per axis is (in - 1) * stride + k.
inline Tensor col2im3d(const Tensor& cols, size_t co, Shape in_spatial, size_t k, size_t stride) {
    if (cols.ndim() != 2) throw ShapeError("col2im3d: cols must be rank-2");
    if (in_spatial.size() != 3) throw ShapeError("col2im3d: need 3 spatial extents");
    const size_t id = in_spatial[0], ih = in_spatial[1], iw = in_spatial[2];
    if (cols.dim(0) != co * k * k * k || cols.dim(1) != id * ih * iw)
        throw ShapeError("col2im3d: cols shape " + shape_str(cols.shape()) + " inconsistent with co=" +
                         std::to_string(co) + " k=" + std::to_string(k));
    ConvDims cd{};
    cd.ci = co;
    cd.d = (id - 1) * stride + k;
    cd.h = (ih - 1) * stride + k;
    cd.w = (iw - 1) * stride + k;
    cd.k = k;
    cd.stride = stride;
    cd.pad = 0;
    cd.od = id;
    cd.oh = ih;
    cd.ow = iw;
    Tensor out = Tensor::zeros({co, cd.d, cd.h, cd.w});
    detail::im2col_pass(cd, out.raw(), const_cast<double*>(cols.raw()), false);
    if (detail::want_grad({&cols})) {
        detail::mark_out(out);
        Tape::current()->record("col2im3d", {cols}, out, [ci = cols.impl(), oi = out.impl(), cd] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            detail::im2col_pass(cd, const_cast<double*>(g->data()), detail::acc_grad(ci).data(), true);
        });
    }
    return out;
}

// Adds bias[c] across all spatial positions of channel c.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.ndim() < 2) throw ShapeError("add_channel_bias: input must have a channel axis plus data");
    const size_t c = x.dim(0);
    if (bias.ndim() != 1 || bias.dim(0) != c)
        throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs channels " +
                         std::to_string(c));
    const size_t inner = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape());
    for (size_t ch = 0; ch < c; ++ch) {
        const double b = bias.raw()[ch];
        const double* px = x.raw() + ch * inner;
        double* po = out.raw() + ch * inner;
        for (size_t i = 0; i < inner; ++i) po[i] = px[i] + b;
    }
    if (detail::want_grad({&x, &bias})) {
        detail::mark_out(out);
        Tape::current()->record("add_channel_bias", {x, bias}, out,
                                [xi = x.impl(), bi = bias.impl(), oi = out.impl(), c, inner] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (xi->requires_grad) {
                auto& gx = detail::acc_grad(xi);
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    const double* gp = g->data() + ch * inner;
                    for (size_t i = 0; i < inner; ++i) s += gp[i];
                    gb[ch] += s;
                }
            }
        });
    }
    return out;
}

// Standard convolution; kernel [co, ci, k, k, k]. Composed from im2col plus a
// matmul so the same column matrix can be shared with low-rank delta paths.
inline Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, size_t stride,
                     size_t pad) {
    if (kernel.ndim() != 5 || kernel.dim(2) != kernel.dim(3) || kernel.dim(3) != kernel.dim(4))
        throw ShapeError("conv3d: kernel must be [co,ci,k,k,k], got " + shape_str(kernel.shape()));
    if (kernel.dim(1) != x.dim(0))
        throw ShapeError("conv3d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(x.dim(0)));
    const size_t co = kernel.dim(0), k = kernel.dim(2);
    const ConvDims cd = detail::conv_dims(x, k, stride, pad);
    Tensor cols = im2col3d(x, k, stride, pad);
    Tensor km = reshape(kernel, {co, kernel.numel() / co});
    Tensor y = matmul(km, cols);
    y = reshape(y, {co, cd.od, cd.oh, cd.ow});
    return add_channel_bias(y, bias);
}

// Transposed convolution; kernel [ci, co, k, k, k], no padding. With
// k == stride this is exact non-overlapping upsampling by `stride`.
inline Tensor deconv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, size_t stride) {
    if (x.ndim() != 4) throw ShapeError("deconv3d: input must be [C,D,H,W]");
    if (kernel.ndim() != 5 || kernel.dim(2) != kernel.dim(3) || kernel.dim(3) != kernel.dim(4))
        throw ShapeError("deconv3d: kernel must be [ci,co,k,k,k], got " + shape_str(kernel.shape()));
    if (kernel.dim(0) != x.dim(0))
        throw ShapeError("deconv3d: kernel expects " + std::to_string(kernel.dim(0)) +
                         " input channels, input has " + std::to_string(x.dim(0)));
    const size_t ci = x.dim(0), co = kernel.dim(1), k = kernel.dim(2);
    Tensor xm = reshape(x, {ci, x.numel() / ci});
    Tensor km = reshape(kernel, {ci, kernel.numel() / ci});
    Tensor cols = matmul(transpose(km), xm);  // [co*k^3, P_in]
    Tensor y = col2im3d(cols, co, {x.dim(1), x.dim(2), x.dim(3)}, k, stride);
    return add_channel_bias(y, bias);
}

// Depthwise convolution, stride 1; kernel [C, k, k, k]. Used as a
// convolutional positional encoding over token grids.
inline Tensor dwconv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, size_t pad) {
    if (x.ndim() != 4) throw ShapeError("dwconv3d: input must be [C,D,H,W]");
    if (kernel.ndim() != 4 || kernel.dim(0) != x.dim(0) || kernel.dim(1) != kernel.dim(2) ||
        kernel.dim(2) != kernel.dim(3))
        throw ShapeError("dwconv3d: kernel must be [C,k,k,k] matching input channels");
    const size_t k = kernel.dim(1);
    const ConvDims cd = detail::conv_dims(x, k, 1, pad);
    if (cd.od != cd.d || cd.oh != cd.h || cd.ow != cd.w)
        throw ShapeError("dwconv3d: padding must preserve the spatial extents");
    const size_t C = cd.ci, D = cd.d, H = cd.h, W = cd.w;
    Tensor out = Tensor::zeros(x.shape());

    auto run = [C, D, H, W, k, pad](const double* src, const double* ker, double* dst,
                                    bool flip) {
        // flip == false: dst[c,o] += sum_k ker[c,k] * src[c, o + k - pad]   (forward)
        // flip == true : dst[c,i] += sum_k ker[c,k] * src[c, i - k + pad]   (input grad)
        const size_t hw = H * W;
        for (size_t c = 0; c < C; ++c) {
            const double* kc = ker + c * k * k * k;
            const double* sc = src + c * D * hw;
            double* dc = dst + c * D * hw;
            for (size_t od = 0; od < D; ++od)
                for (size_t oh = 0; oh < H; ++oh)
                    for (size_t ow = 0; ow < W; ++ow) {
                        double acc = 0.0;
                        size_t ki = 0;
                        for (size_t kd = 0; kd < k; ++kd)
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw, ++ki) {
                                    ptrdiff_t id, ih, iw;
                                    if (!flip) {
                                        id = static_cast<ptrdiff_t>(od + kd) - static_cast<ptrdiff_t>(pad);
                                        ih = static_cast<ptrdiff_t>(oh + kh) - static_cast<ptrdiff_t>(pad);
                                        iw = static_cast<ptrdiff_t>(ow + kw) - static_cast<ptrdiff_t>(pad);
                                    } else {
                                        id = static_cast<ptrdiff_t>(od + pad) - static_cast<ptrdiff_t>(kd);
                                        ih = static_cast<ptrdiff_t>(oh + pad) - static_cast<ptrdiff_t>(kh);
                                        iw = static_cast<ptrdiff_t>(ow + pad) - static_cast<ptrdiff_t>(kw);
                                    }
                                    if (id < 0 || id >= static_cast<ptrdiff_t>(D) || ih < 0 ||
                                        ih >= static_cast<ptrdiff_t>(H) || iw < 0 ||
                                        iw >= static_cast<ptrdiff_t>(W))
                                        continue;
                                    acc += kc[ki] * sc[static_cast<size_t>(id) * hw +
                                                       static_cast<size_t>(ih) * W +
                                                       static_cast<size_t>(iw)];
                                }
                        dc[od * hw + oh * W + ow] += acc;
                    }
        }
    };

    run(x.raw(), kernel.raw(), out.raw(), false);
    {
        const size_t inner = D * H * W;
        for (size_t c = 0; c < C; ++c) {
            const double b = bias.raw()[c];
            double* po = out.raw() + c * inner;
            for (size_t i = 0; i < inner; ++i) po[i] += b;
        }
    }
    if (detail::want_grad({&x, &kernel, &bias})) {
        detail::mark_out(out);
        Tape::current()->record(
            "dwconv3d", {x, kernel, bias}, out,
            [xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl(), run, C, D, H, W, k,
             pad] {
                auto* g = detail::grad_of(oi);
                if (!g) return;
                const size_t hw = H * W;
                if (xi->requires_grad) run(g->data(), ki->data.data(), detail::acc_grad(xi).data(), true);
                if (ki->requires_grad) {
                    auto& gk = detail::acc_grad(ki);
                    for (size_t c = 0; c < C; ++c) {
                        const double* gc = g->data() + c * D * hw;
                        const double* sc = xi->data.data() + c * D * hw;
                        double* kc = gk.data() + c * k * k * k;
                        size_t kidx = 0;
                        for (size_t kd = 0; kd < k; ++kd)
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw, ++kidx) {
                                    double acc = 0.0;
                                    for (size_t od = 0; od < D; ++od) {
                                        const ptrdiff_t id =
                                            static_cast<ptrdiff_t>(od + kd) - static_cast<ptrdiff_t>(pad);
                                        if (id < 0 || id >= static_cast<ptrdiff_t>(D)) continue;
                                        for (size_t oh = 0; oh < H; ++oh) {
                                            const ptrdiff_t ih = static_cast<ptrdiff_t>(oh + kh) -
                                                                 static_cast<ptrdiff_t>(pad);
                                            if (ih < 0 || ih >= static_cast<ptrdiff_t>(H)) continue;
                                            for (size_t ow = 0; ow < W; ++ow) {
                                                const ptrdiff_t iw = static_cast<ptrdiff_t>(ow + kw) -
                                                                     static_cast<ptrdiff_t>(pad);
                                                if (iw < 0 || iw >= static_cast<ptrdiff_t>(W)) continue;
                                                acc += gc[od * hw + oh * W + ow] *
                                                       sc[static_cast<size_t>(id) * hw +
                                                          static_cast<size_t>(ih) * W +
                                                          static_cast<size_t>(iw)];
                                            }
                                        }
                                    }
                                    kc[kidx] += acc;
                                }
                    }
                }
                if (bi->requires_grad) {
                    auto& gb = detail::acc_grad(bi);
                    for (size_t c = 0; c < C; ++c) {
                        double s = 0.0;
                        const double* gc = g->data() + c * D * hw;
                        for (size_t i = 0; i < D * hw; ++i) s += gc[i];
                        gb[c] += s;
                    }
                }
            });
    }
    return out;
}

}  // namespace loco
