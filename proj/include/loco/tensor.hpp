#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "loco/errors.hpp"
#include "loco/rng.hpp"

namespace loco {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool leaf = true;
    std::optional<std::vector<double>> grad;
};

// Dense row-major f64 tensor. Value-semantic handle onto a shared buffer;
// buffers produced by ops are never mutated afterwards, parameters are
// mutated only by the optimizer between tapes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}

    static Tensor zeros(Shape shape) {
        check_shape(shape);
        auto p = std::make_shared<TensorImpl>();
        p->data.assign(shape_numel(shape), 0.0);
        p->shape = std::move(shape);
        return Tensor(p);
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.data()) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data) {
        check_shape(shape);
        if (data.size() != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto p = std::make_shared<TensorImpl>();
        p->shape = std::move(shape);
        p->data = std::move(data);
        return Tensor(p);
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.data()) x = rng.normal(mean, stddev);
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    size_t ndim() const { return p_->shape.size(); }
    size_t dim(size_t i) const { return p_->shape[i]; }
    size_t numel() const { return p_->data.size(); }

    std::vector<double>& data() { return p_->data; }
    const std::vector<double>& data() const { return p_->data; }
    double* raw() { return p_->data.data(); }
    const double* raw() const { return p_->data.data(); }

    double value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar tensor, got " + shape_str(shape()));
        return p_->data[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        p_->requires_grad = b;
        return *this;
    }
    bool is_leaf() const { return p_->leaf; }

    const std::vector<double>* grad() const { return p_->grad ? &*p_->grad : nullptr; }
    std::vector<double>& ensure_grad() {
        if (!p_->grad) p_->grad.emplace(p_->data.size(), 0.0);
        return *p_->grad;
    }
    void zero_grad() {
        if (p_->grad) std::fill(p_->grad->begin(), p_->grad->end(), 0.0);
    }
    void clear_grad() { p_->grad.reset(); }

    std::shared_ptr<TensorImpl> impl() const { return p_; }
    TensorImpl* ptr() const { return p_.get(); }

private:
    static void check_shape(const Shape& s) {
        if (s.empty()) throw ShapeError("tensor rank must be >= 1");
        for (size_t e : s)
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    }
    std::shared_ptr<TensorImpl> p_;
};

// One recorded operation. Node ids are assigned by the tape in first-touch
// order; inputs always precede the output, so the list is topological.
struct TapeOp {
    const char* name;
    std::vector<uint32_t> inputs;
    uint32_t output;
    std::function<void()> backward;
};

class Tape {
public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() { current_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    size_t size() const { return ops_.size(); }
    const std::vector<TapeOp>& ops() const { return ops_; }

    void record(const char* name, std::initializer_list<Tensor> inputs, const Tensor& output,
                std::function<void()> backward) {
        record(name, std::vector<Tensor>(inputs), output, std::move(backward));
    }

    void record(const char* name, const std::vector<Tensor>& inputs, const Tensor& output,
                std::function<void()> backward) {
        TapeOp op;
        op.name = name;
        for (const auto& t : inputs) op.inputs.push_back(node_id(t, false));
        op.output = node_id(output, true);
        op.backward = std::move(backward);
        ops_.push_back(std::move(op));
    }

    bool produced(const Tensor& t) const {
        auto it = ids_.find(t.ptr());
        return it != ids_.end() && produced_[it->second];
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the ops in reverse order. Grads of
    // intermediate (produced) nodes are reset first, so each call contributes
    // exactly one unit of gradient; leaf grads accumulate across calls.
    void backward(Tensor loss) {
        if (loss.numel() != 1)
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (!produced(loss))
            throw ContractError("backward requires a loss produced on this tape");
        for (size_t i = 0; i < nodes_.size(); ++i)
            if (produced_[i] && nodes_[i]->grad)
                std::fill(nodes_[i]->grad->begin(), nodes_[i]->grad->end(), 0.0);
        loss.ensure_grad()[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it)
            if (it->backward) it->backward();
    }

private:
    uint32_t node_id(const Tensor& t, bool as_output) {
        auto it = ids_.find(t.ptr());
        uint32_t id;
        if (it != ids_.end()) {
            id = it->second;
        } else {
            id = static_cast<uint32_t>(nodes_.size());
            ids_.emplace(t.ptr(), id);
            nodes_.push_back(t.impl());
            produced_.push_back(false);
        }
        if (as_output) produced_[id] = true;
        return id;
    }

    std::vector<TapeOp> ops_;
    std::unordered_map<TensorImpl*, uint32_t> ids_;
    std::vector<std::shared_ptr<TensorImpl>> nodes_;
    std::vector<bool> produced_;
    Tape* prev_;
    static inline thread_local Tape* current_ = nullptr;
};

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!Tape::current()) return false;
    for (const Tensor* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

inline void mark_out(Tensor& out) {
    out.impl()->requires_grad = true;
    out.impl()->leaf = false;
}

inline std::vector<double>* grad_of(const std::shared_ptr<TensorImpl>& p) {
    return p->grad ? &*p->grad : nullptr;
}

inline std::vector<double>& acc_grad(const std::shared_ptr<TensorImpl>& p) {
    if (!p->grad) p->grad.emplace(p->data.size(), 0.0);
    return *p->grad;
}

// C[m x n] += A[m x k] * B[k x n], ikj order. The inner j loop is a pure
// elementwise update, so the compiler vectorizes it without reassociating
// any reduction; C[i][j] accumulates over k in ascending order, matching the
// plain dot-product order the oracles use.
inline void mm_acc(const double* A, const double* B, double* C, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* Ai = A + i * k;
        double* Ci = C + i * n;
        for (size_t l = 0; l < k; ++l) {
            const double a = Ai[l];
            const double* Bl = B + l * n;
            for (size_t j = 0; j < n; ++j) Ci[j] += a * Bl[j];
        }
    }
}

inline void transpose2(const double* A, double* At, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) At[j * rows + i] = A[i * cols + j];
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.raw();
    const double* pb = b.raw();
    double* po = out.raw();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::want_grad({&a, &b})) {
        detail::mark_out(out);
        Tape::current()->record("add", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (ai->requires_grad) {
                auto& ga = detail::acc_grad(ai);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] - b.raw()[i];
    if (detail::want_grad({&a, &b})) {
        detail::mark_out(out);
        Tape::current()->record("sub", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (ai->requires_grad) {
                auto& ga = detail::acc_grad(ai);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] -= (*g)[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] * b.raw()[i];
    if (detail::want_grad({&a, &b})) {
        detail::mark_out(out);
        Tape::current()->record("mul", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (ai->requires_grad) {
                auto& ga = detail::acc_grad(ai);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * ai->data[i];
            }
        });
    }
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("div", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] / b.raw()[i];
    if (detail::want_grad({&a, &b})) {
        detail::mark_out(out);
        Tape::current()->record("div", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (ai->requires_grad) {
                auto& ga = detail::acc_grad(ai);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] / bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t i = 0; i < gb.size(); ++i)
                    gb[i] -= (*g)[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
            }
        });
    }
    return out;
}

// out = k*a + m
inline Tensor affine(const Tensor& a, double k, double m) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.raw()[i] = k * a.raw()[i] + m;
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("affine", {a}, out, [ai = a.impl(), oi = out.impl(), k] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double k) { return affine(a, k, 0.0); }

inline Tensor log(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.raw()[i] = std::log(a.raw()[i]);
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("log", {a}, out, [ai = a.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] / ai->data[i];
        });
    }
    return out;
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo < hi)) throw ContractError("clamp: lo must be < hi");
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) {
        double v = a.raw()[i];
        out.raw()[i] = v < lo ? lo : (v > hi ? hi : v);
    }
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("clamp", {a}, out, [ai = a.impl(), oi = out.impl(), lo, hi] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) {
                const double v = ai->data[i];
                if (v > lo && v < hi) ga[i] += (*g)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("sum", {a}, out, [ai = a.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[0];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s * inv);
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("mean", {a}, out, [ai = a.impl(), oi = out.impl(), inv] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[0] * inv;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::mm_acc(a.raw(), b.raw(), out.raw(), m, k, n);
    if (detail::want_grad({&a, &b})) {
        detail::mark_out(out);
        Tape::current()->record("matmul", {a, b}, out,
                                [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (ai->requires_grad) {  // dA += G * B^T
                std::vector<double> bt(k * n);
                detail::transpose2(bi->data.data(), bt.data(), k, n);
                detail::mm_acc(g->data(), bt.data(), detail::acc_grad(ai).data(), m, n, k);
            }
            if (bi->requires_grad) {  // dB += A^T * G
                std::vector<double> at(m * k);
                detail::transpose2(ai->data.data(), at.data(), m, k);
                detail::mm_acc(at.data(), g->data(), detail::acc_grad(bi).data(), k, m, n);
            }
        });
    }
    return out;
}

// y[n x d] = x[n x c] * w^T + bias, with w stored [d x c].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: incompatible shapes x=" + shape_str(x.shape()) +
                         " w=" + shape_str(w.shape()));
    const size_t n = x.dim(0), c = x.dim(1), d = w.dim(0);
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d))
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match out dim " +
                         std::to_string(d));
    Tensor out = Tensor::zeros({n, d});
    {
        std::vector<double> wt(c * d);
        detail::transpose2(w.raw(), wt.data(), d, c);
        detail::mm_acc(x.raw(), wt.data(), out.raw(), n, c, d);
    }
    if (bias.defined()) {
        double* po = out.raw();
        const double* pb = bias.raw();
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) po[i * d + j] += pb[j];
    }
    const bool wants =
        bias.defined() ? detail::want_grad({&x, &w, &bias}) : detail::want_grad({&x, &w});
    if (wants) {
        detail::mark_out(out);
        auto fn = [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
                   oi = out.impl(), n, c, d] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            if (xi->requires_grad)  // dX += G * W
                detail::mm_acc(g->data(), wi->data.data(), detail::acc_grad(xi).data(), n, d, c);
            if (wi->requires_grad) {  // dW += G^T * X
                std::vector<double> gt(n * d);
                detail::transpose2(g->data(), gt.data(), n, d);
                detail::mm_acc(gt.data(), xi->data.data(), detail::acc_grad(wi).data(), d, n, c);
            }
            if (bi && bi->requires_grad) {
                auto& gb = detail::acc_grad(bi);
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < d; ++j) gb[j] += (*g)[i * d + j];
            }
        };
        if (bias.defined())
            Tape::current()->record("linear", {x, w, bias}, out, std::move(fn));
        else
            Tape::current()->record("linear", {x, w}, out, std::move(fn));
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.data());
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("reshape", {a}, out, [ai = a.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        });
    }
    return out;
}

namespace detail {
inline std::vector<size_t> strides_of(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline void permute_copy(const double* src, double* dst, const Shape& in_shape,
                         const std::vector<size_t>& perm, bool inverse) {
    const auto in_st = strides_of(in_shape);
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    const auto out_st = strides_of(out_shape);
    const size_t n = shape_numel(in_shape);
    std::vector<size_t> map(perm.size());
    // out index o corresponds to in axis perm[o]
    for (size_t o = 0; o < perm.size(); ++o) map[o] = in_st[perm[o]];
    std::vector<size_t> idx(out_shape.size(), 0);
    size_t src_off = 0;
    for (size_t lin = 0; lin < n; ++lin) {
        if (!inverse)
            dst[lin] = src[src_off];
        else
            dst[src_off] += src[lin];
        // increment multi-index over out_shape, maintaining src_off
        for (size_t ax = out_shape.size(); ax-- > 0;) {
            ++idx[ax];
            src_off += map[ax];
            if (idx[ax] < out_shape[ax]) break;
            src_off -= map[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
}  // namespace detail

inline Tensor permute(const Tensor& a, std::vector<size_t> perm) {
    if (perm.size() != a.ndim()) throw ShapeError("permute: perm rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
    Tensor out = Tensor::zeros(out_shape);
    detail::permute_copy(a.raw(), out.raw(), a.shape(), perm, false);
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("permute", {a}, out,
                                [ai = a.impl(), oi = out.impl(), perm = std::move(perm)] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            detail::permute_copy(g->data(), detail::acc_grad(ai).data(), ai->shape, perm, true);
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

inline Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len) {
    if (axis >= a.ndim()) throw ShapeError("slice: axis out of range for " + shape_str(a.shape()));
    if (len == 0 || start + len > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for axis extent " + std::to_string(a.dim(axis)));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    Tensor out = Tensor::zeros(out_shape);
    const auto st = detail::strides_of(a.shape());
    size_t outer = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    const size_t inner = st[axis];
    const size_t in_block = a.dim(axis) * inner;
    const size_t out_block = len * inner;
    for (size_t o = 0; o < outer; ++o)
        std::copy_n(a.raw() + o * in_block + start * inner, out_block, out.raw() + o * out_block);
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("slice", {a}, out,
                                [ai = a.impl(), oi = out.impl(), outer, inner, in_block, out_block, start] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t o = 0; o < outer; ++o) {
                const double* gs = g->data() + o * out_block;
                double* gd = ga.data() + o * in_block + start * inner;
                for (size_t i = 0; i < out_block; ++i) gd[i] += gs[i];
            }
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
    size_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.dim(i) != ref[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(ref));
        total += p.dim(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    Tensor out = Tensor::zeros(out_shape);
    size_t outer = 1;
    for (size_t i = 0; i < axis; ++i) outer *= ref[i];
    size_t inner = 1;
    for (size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    const size_t out_block = total * inner;
    size_t off = 0;
    std::vector<size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const size_t blk = p.dim(axis) * inner;
        for (size_t o = 0; o < outer; ++o)
            std::copy_n(p.raw() + o * blk, blk, out.raw() + o * out_block + off);
        off += blk;
    }
    bool wants = false;
    if (Tape::current())
        for (const auto& p : parts) wants = wants || p.requires_grad();
    if (wants) {
        detail::mark_out(out);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        auto fn = [impls, oi = out.impl(), offsets, outer, inner, out_block] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            for (size_t pi = 0; pi < impls.size(); ++pi) {
                if (!impls[pi]->requires_grad) continue;
                auto& ga = detail::acc_grad(impls[pi]);
                const size_t blk = ga.size() / outer;
                for (size_t o = 0; o < outer; ++o) {
                    const double* gs = g->data() + o * out_block + offsets[pi];
                    double* gd = ga.data() + o * blk;
                    for (size_t i = 0; i < blk; ++i) gd[i] += gs[i];
                }
            }
        };
        Tape::current()->record("concat", parts, out, std::move(fn));
    }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities

inline Tensor softmax(const Tensor& a, size_t axis) {
    if (axis >= a.ndim())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto st = detail::strides_of(a.shape());
    const size_t ax_len = a.dim(axis), inner = st[axis];
    size_t outer = a.numel() / (ax_len * inner);
    const double* pa = a.raw();
    double* po = out.raw();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * ax_len * inner + in;
            double mx = pa[base];
            for (size_t j = 1; j < ax_len; ++j) mx = std::max(mx, pa[base + j * inner]);
            double z = 0.0;
            for (size_t j = 0; j < ax_len; ++j) {
                const double e = std::exp(pa[base + j * inner] - mx);
                po[base + j * inner] = e;
                z += e;
            }
            const double invz = 1.0 / z;
            for (size_t j = 0; j < ax_len; ++j) po[base + j * inner] *= invz;
        }
    }
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("softmax", {a}, out,
                                [ai = a.impl(), oi = out.impl(), outer, ax_len, inner] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            const double* y = oi->data.data();
            for (size_t o = 0; o < outer; ++o)
                for (size_t in = 0; in < inner; ++in) {
                    const size_t base = o * ax_len * inner + in;
                    double dot = 0.0;
                    for (size_t j = 0; j < ax_len; ++j)
                        dot += (*g)[base + j * inner] * y[base + j * inner];
                    for (size_t j = 0; j < ax_len; ++j) {
                        const size_t k = base + j * inner;
                        ga[k] += y[k] * ((*g)[k] - dot);
                    }
                }
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) {
        const double x = a.raw()[i];
        out.raw()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("sigmoid", {a}, out, [ai = a.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) {
                const double s = oi->data[i];
                ga[i] += (*g)[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) {
        const double x = a.raw()[i];
        out.raw()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (detail::want_grad({&a})) {
        detail::mark_out(out);
        Tape::current()->record("gelu", {a}, out, [ai = a.impl(), oi = out.impl()] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            auto& ga = detail::acc_grad(ai);
            for (size_t i = 0; i < ga.size(); ++i) {
                const double x = ai->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] += (*g)[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// Normalizes the last axis. gain/bias have that axis's extent.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ContractError("layernorm: eps must be > 0");
    const size_t c = x.dim(x.ndim() - 1);
    if (gain.numel() != c || bias.numel() != c)
        throw ShapeError("layernorm: gain/bias must have extent " + std::to_string(c));
    const size_t rows = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_sd(rows), mu(rows);
    const double* px = x.raw();
    const double* pg = gain.raw();
    const double* pb = bias.raw();
    double* po = out.raw();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = px + r * c;
        double m = 0.0;
        for (size_t j = 0; j < c; ++j) m += xr[j];
        m /= static_cast<double>(c);
        double v = 0.0;
        for (size_t j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
        v /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(v + eps);
        mu[r] = m;
        inv_sd[r] = is;
        double* yr = po + r * c;
        for (size_t j = 0; j < c; ++j) yr[j] = pg[j] * ((xr[j] - m) * is) + pb[j];
    }
    if (detail::want_grad({&x, &gain, &bias})) {
        detail::mark_out(out);
        Tape::current()->record("layernorm", {x, gain, bias}, out,
                                [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(),
                                 mu = std::move(mu), inv_sd = std::move(inv_sd), rows, c] {
            auto* g = detail::grad_of(oi);
            if (!g) return;
            const double* px = xi->data.data();
            const double* pg = gi->data.data();
            const double cn = static_cast<double>(c);
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = px + r * c;
                const double* gr = g->data() + r * c;
                const double is = inv_sd[r], m = mu[r];
                if (gi->requires_grad) {
                    auto& gg = detail::acc_grad(gi);
                    for (size_t j = 0; j < c; ++j) gg[j] += gr[j] * ((xr[j] - m) * is);
                }
                if (bi->requires_grad) {
                    auto& gb = detail::acc_grad(bi);
                    for (size_t j = 0; j < c; ++j) gb[j] += gr[j];
                }
                if (xi->requires_grad) {
                    auto& gx = detail::acc_grad(xi);
                    double s1 = 0.0, s2 = 0.0;  // sums of dxhat and dxhat*xhat
                    for (size_t j = 0; j < c; ++j) {
                        const double xh = (xr[j] - m) * is;
                        const double dxh = gr[j] * pg[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    for (size_t j = 0; j < c; ++j) {
                        const double xh = (xr[j] - m) * is;
                        const double dxh = gr[j] * pg[j];
                        gx[r * c + j] += is * (dxh - s1 / cn - xh * s2 / cn);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace loco
