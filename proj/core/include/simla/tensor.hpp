#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "simla/rng.hpp"

namespace simla {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

// Toggled on by tests; training checks losses and parameters explicitly.
inline bool& finite_checks() {
    static bool enabled = false;
    return enabled;
}

template <typename R>
struct TensorNode {
    Shape shape;
    std::vector<R> value;
    std::vector<R> grad;  // allocated on first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), R(0));
    }
};

// Dense n-d tensor handle. Value storage is row-major and contiguous; nodes
// are shared so copies alias the same storage.
template <typename R>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), R(0)); }

    static Tensor filled(Shape shape, R v) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<R>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(shape_numel(t.n_->shape), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<R> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        Tensor t;
        t.n_ = std::make_shared<TensorNode<R>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    static Tensor scalar(R v) { return filled({1}, v); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[i]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

    R* data() { return n_->value.data(); }
    const R* data() const { return n_->value.data(); }
    std::vector<R>& values() { return n_->value; }
    const std::vector<R>& values() const { return n_->value; }

    R item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
        return n_->value[0];
    }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        if (rg) n_->ensure_grad();
    }

    std::vector<R>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<R>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    bool grad_allocated() const { return !n_->grad.empty(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), R(0));
    }

    std::shared_ptr<TensorNode<R>> node() const { return n_; }

    Tensor clone_values() const {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<R>>();
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        return t;
    }

    void check_finite(const char* where) const {
        for (R v : n_->value) {
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error(std::string("non-finite value produced by ") + where);
        }
    }

private:
    std::shared_ptr<TensorNode<R>> n_;
};

// Reverse-mode tape. Operations executed while a tape is alive are recorded
// in execution order (hence topological order); backward() replays them once
// in reverse, accumulating gradients with +=.
template <typename R>
class Tape {
public:
    Tape() { stack().push_back(this); }
    ~Tape() { stack().pop_back(); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return stack().empty() ? nullptr : stack().back(); }

    void record(const char* name, std::function<void()> pull) {
        entries_.push_back({name, std::move(pull)});
    }

    size_t size() const { return entries_.size(); }
    const char* op_name(size_t i) const { return entries_[i].name; }

    void backward(Tensor<R> loss) {
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (loss.requires_grad()) loss.grad()[0] += R(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->pull();
    }

private:
    struct Entry {
        const char* name;
        std::function<void()> pull;
    };
    std::vector<Entry> entries_;

    static std::vector<Tape*>& stack() {
        static thread_local std::vector<Tape*> s;
        return s;
    }
};

namespace detail {

template <typename R>
inline bool want_grad(std::initializer_list<const Tensor<R>*> inputs) {
    if (Tape<R>::current() == nullptr) return false;
    for (const Tensor<R>* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

template <typename R>
inline Tensor<R> make_output(Shape shape, bool rg) {
    Tensor<R> out = Tensor<R>::zeros(std::move(shape));
    if (rg) out.set_requires_grad(true);
    return out;
}

template <typename R>
inline void finish(const Tensor<R>& out, const char* name) {
    if (finite_checks()) out.check_finite(name);
}

// Output grad is absent when nothing downstream touched this node; the pull
// is then a no-op.
template <typename R>
inline bool has_grad(const std::shared_ptr<TensorNode<R>>& node) {
    return !node->grad.empty();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>(a.shape(), rg);
    const R* pa = a.data();
    const R* pb = b.data();
    R* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::finish(out, "add");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("add", [an, bn, on] {
            if (!detail::has_grad(on)) return;
            int64_t n = static_cast<int64_t>(on->value.size());
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>(a.shape(), rg);
    const R* pa = a.data();
    const R* pb = b.data();
    R* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    detail::finish(out, "sub");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("sub", [an, bn, on] {
            if (!detail::has_grad(on)) return;
            int64_t n = static_cast<int64_t>(on->value.size());
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>(a.shape(), rg);
    const R* pa = a.data();
    const R* pb = b.data();
    R* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    detail::finish(out, "mul");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("mul", [an, bn, on] {
            if (!detail::has_grad(on)) return;
            int64_t n = static_cast<int64_t>(on->value.size());
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> scale(const Tensor<R>& a, R c) {
    bool rg = detail::want_grad<R>({&a});
    Tensor<R> out = detail::make_output<R>(a.shape(), rg);
    const R* pa = a.data();
    R* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    detail::finish(out, "scale");
    if (rg) {
        auto an = a.node(), on = out.node();
        Tape<R>::current()->record("scale", [an, on, c] {
            if (!detail::has_grad(on) || !an->requires_grad) return;
            an->ensure_grad();
            int64_t n = static_cast<int64_t>(on->value.size());
            for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

// y = x * s with s a scalar tensor (e.g. a learnable temperature).
template <typename R>
Tensor<R> mul_scalar(const Tensor<R>& x, const Tensor<R>& s) {
    if (s.numel() != 1) throw std::invalid_argument("mul_scalar: scale must be a scalar tensor");
    bool rg = detail::want_grad<R>({&x, &s});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    const R sv = s.data()[0];
    const R* px = x.data();
    R* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sv;
    detail::finish(out, "mul_scalar");
    if (rg) {
        auto xn = x.node(), sn = s.node(), on = out.node();
        Tape<R>::current()->record("mul_scalar", [xn, sn, on] {
            if (!detail::has_grad(on)) return;
            int64_t n = static_cast<int64_t>(on->value.size());
            const R sv = sn->value[0];
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * sv;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                R acc = R(0);
                for (int64_t i = 0; i < n; ++i) acc += on->grad[i] * xn->value[i];
                sn->grad[0] += acc;
            }
        });
    }
    return out;
}

// Broadcast add of a length-D vector over the last axis.
template <typename R>
Tensor<R> add_bias(const Tensor<R>& x, const Tensor<R>& b) {
    int d = x.shape().back();
    if (b.rank() != 1 || b.dim(0) != d)
        throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " incompatible with " +
                                    shape_str(x.shape()));
    bool rg = detail::want_grad<R>({&x, &b});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    int64_t rows = x.numel() / d;
    const R* px = x.data();
    const R* pb = b.data();
    R* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
    detail::finish(out, "add_bias");
    if (rg) {
        auto xn = x.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("add_bias", [xn, bn, on, rows, d] {
            if (!detail::has_grad(on)) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                int64_t n = rows * d;
                for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) bn->grad[j] += on->grad[r * d + j];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> exp_op(const Tensor<R>& x) {
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    const R* px = x.data();
    R* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
    detail::finish(out, "exp");
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("exp", [xn, on] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            int64_t n = static_cast<int64_t>(on->value.size());
            for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * on->value[i];
        });
    }
    return out;
}

template <typename R>
Tensor<R> sigmoid(const Tensor<R>& x) {
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    const R* px = x.data();
    R* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = R(1) / (R(1) + std::exp(-px[i]));
    detail::finish(out, "sigmoid");
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("sigmoid", [xn, on] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            int64_t n = static_cast<int64_t>(on->value.size());
            for (int64_t i = 0; i < n; ++i) {
                R y = on->value[i];
                xn->grad[i] += on->grad[i] * y * (R(1) - y);
            }
        });
    }
    return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename R>
Tensor<R> gelu(const Tensor<R>& x) {
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    const R inv_sqrt2 = R(0.70710678118654752440084436210485);
    const R* px = x.data();
    R* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = R(0.5) * px[i] * (R(1) + std::erf(px[i] * inv_sqrt2));
    detail::finish(out, "gelu");
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("gelu", [xn, on, inv_sqrt2] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            const R inv_sqrt2pi = R(0.39894228040143267793994605993438);
            int64_t n = static_cast<int64_t>(on->value.size());
            for (int64_t i = 0; i < n; ++i) {
                R v = xn->value[i];
                R cdf = R(0.5) * (R(1) + std::erf(v * inv_sqrt2));
                R pdf = inv_sqrt2pi * std::exp(R(-0.5) * v * v);
                xn->grad[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Value copy severed from the graph.
template <typename R>
Tensor<R> detach(const Tensor<R>& x) {
    return x.clone_values();
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> reshape(const Tensor<R>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                                    " changes element count");
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(shape, rg);
    std::copy(x.data(), x.data() + x.numel(), out.data());
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("reshape", [xn, on] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            int64_t n = static_cast<int64_t>(on->value.size());
            for (int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename R>
Tensor<R> transpose2d(const Tensor<R>& x) {
    if (x.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required");
    int m = x.dim(0), n = x.dim(1);
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({n, m}, rg);
    const R* px = x.data();
    R* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("transpose2d", [xn, on, m, n] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

// [B*T, H*dk] -> [B*H, T, dk]
template <typename R>
Tensor<R> split_heads(const Tensor<R>& x, int batch, int seq, int heads) {
    if (x.rank() != 2 || x.dim(0) != batch * seq || x.dim(1) % heads != 0)
        throw std::invalid_argument("split_heads: incompatible shape " + shape_str(x.shape()));
    int dk = x.dim(1) / heads;
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({batch * heads, seq, dk}, rg);
    const R* px = x.data();
    R* po = out.data();
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int t = 0; t < seq; ++t) {
                const R* src = px + (static_cast<int64_t>(b) * seq + t) * heads * dk + h * dk;
                R* dst = po + ((static_cast<int64_t>(b) * heads + h) * seq + t) * dk;
                std::copy(src, src + dk, dst);
            }
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("split_heads", [xn, on, batch, seq, heads, dk] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int b = 0; b < batch; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int t = 0; t < seq; ++t) {
                        R* dst = xn->grad.data() + (static_cast<int64_t>(b) * seq + t) * heads * dk + h * dk;
                        const R* src = on->grad.data() + ((static_cast<int64_t>(b) * heads + h) * seq + t) * dk;
                        for (int d = 0; d < dk; ++d) dst[d] += src[d];
                    }
        });
    }
    return out;
}

// [B*H, T, dk] -> [B*T, H*dk]
template <typename R>
Tensor<R> merge_heads(const Tensor<R>& x, int batch, int heads, int seq) {
    if (x.rank() != 3 || x.dim(0) != batch * heads || x.dim(1) != seq)
        throw std::invalid_argument("merge_heads: incompatible shape " + shape_str(x.shape()));
    int dk = x.dim(2);
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({batch * seq, heads * dk}, rg);
    const R* px = x.data();
    R* po = out.data();
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int t = 0; t < seq; ++t) {
                const R* src = px + ((static_cast<int64_t>(b) * heads + h) * seq + t) * dk;
                R* dst = po + (static_cast<int64_t>(b) * seq + t) * heads * dk + h * dk;
                std::copy(src, src + dk, dst);
            }
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("merge_heads", [xn, on, batch, seq, heads, dk] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int b = 0; b < batch; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int t = 0; t < seq; ++t) {
                        const R* src = on->grad.data() + (static_cast<int64_t>(b) * seq + t) * heads * dk + h * dk;
                        R* dst = xn->grad.data() + ((static_cast<int64_t>(b) * heads + h) * seq + t) * dk;
                        for (int d = 0; d < dk; ++d) dst[d] += src[d];
                    }
        });
    }
    return out;
}

template <typename R>
Tensor<R> concat_rows(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    int cols = parts[0].shape().back();
    int64_t rows = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols)
            throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.dim(0);
        rg = rg || (Tape<R>::current() && p.requires_grad());
    }
    Tensor<R> out = detail::make_output<R>({static_cast<int>(rows), cols}, rg);
    R* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), po + off);
        off += p.numel();
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorNode<R>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        Tape<R>::current()->record("concat_rows", [nodes, on] {
            if (!detail::has_grad(on)) return;
            int64_t off = 0;
            for (auto& n : nodes) {
                int64_t cnt = static_cast<int64_t>(n->value.size());
                if (n->requires_grad) {
                    n->ensure_grad();
                    for (int64_t i = 0; i < cnt; ++i) n->grad[i] += on->grad[off + i];
                }
                off += cnt;
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> slice_rows(const Tensor<R>& x, int start, int len) {
    if (x.rank() != 2) throw std::invalid_argument("slice_rows: rank-2 tensor required");
    if (start < 0 || len < 0 || start + len > x.dim(0))
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") outside " + std::to_string(x.dim(0)) + " rows");
    int cols = x.dim(1);
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({len, cols}, rg);
    std::copy(x.data() + static_cast<int64_t>(start) * cols, x.data() + static_cast<int64_t>(start + len) * cols,
              out.data());
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("slice_rows", [xn, on, start, len, cols] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t i = 0; i < static_cast<int64_t>(len) * cols; ++i)
                xn->grad[static_cast<int64_t>(start) * cols + i] += on->grad[i];
        });
    }
    return out;
}

// Rows by index; repeated indices accumulate on backward.
template <typename R>
Tensor<R> gather_rows(const Tensor<R>& x, std::vector<int> idx) {
    if (x.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 tensor required");
    int cols = x.dim(1);
    for (int i : idx)
        if (i < 0 || i >= x.dim(0))
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " outside " +
                                        std::to_string(x.dim(0)) + " rows");
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(idx.size()), cols}, rg);
    R* po = out.data();
    const R* px = x.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(px + static_cast<int64_t>(idx[r]) * cols, px + static_cast<int64_t>(idx[r] + 1) * cols,
                  po + r * cols);
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("gather_rows", [xn, on, idx, cols] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < cols; ++j)
                    xn->grad[static_cast<int64_t>(idx[r]) * cols + j] += on->grad[r * cols + j];
        });
    }
    return out;
}

// Insert a learned row at position 0 of each length-T sequence stored
// flattened as [B*T, D]; output is [B*(T+1), D].
template <typename R>
Tensor<R> prepend_row_per_seq(const Tensor<R>& x, const Tensor<R>& row, int batch, int seq) {
    if (x.rank() != 2 || x.dim(0) != batch * seq)
        throw std::invalid_argument("prepend_row_per_seq: incompatible shape " + shape_str(x.shape()));
    int d = x.dim(1);
    if (row.numel() != d) throw std::invalid_argument("prepend_row_per_seq: row width mismatch");
    bool rg = detail::want_grad<R>({&x, &row});
    Tensor<R> out = detail::make_output<R>({batch * (seq + 1), d}, rg);
    const R* px = x.data();
    const R* pr = row.data();
    R* po = out.data();
    for (int b = 0; b < batch; ++b) {
        std::copy(pr, pr + d, po + static_cast<int64_t>(b) * (seq + 1) * d);
        std::copy(px + static_cast<int64_t>(b) * seq * d, px + static_cast<int64_t>(b + 1) * seq * d,
                  po + (static_cast<int64_t>(b) * (seq + 1) + 1) * d);
    }
    if (rg) {
        auto xn = x.node(), rn = row.node(), on = out.node();
        Tape<R>::current()->record("prepend_row_per_seq", [xn, rn, on, batch, seq, d] {
            if (!detail::has_grad(on)) return;
            for (int b = 0; b < batch; ++b) {
                const R* g0 = on->grad.data() + static_cast<int64_t>(b) * (seq + 1) * d;
                if (rn->requires_grad) {
                    rn->ensure_grad();
                    for (int j = 0; j < d; ++j) rn->grad[j] += g0[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    R* gx = xn->grad.data() + static_cast<int64_t>(b) * seq * d;
                    for (int64_t i = 0; i < static_cast<int64_t>(seq) * d; ++i) gx[i] += g0[d + i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] (+)= A[M,K] @ B[K,N], ikj order; rows are independent so OpenMP
// partitioning cannot change any per-element summation order.
template <typename R>
void mm_nn(const R* A, const R* B, R* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
#ifdef SIMLA_OPENMP
#pragma omp parallel for schedule(static) if (M * K * N > 65536)
#endif
    for (int64_t i = 0; i < M; ++i) {
        R* c = C + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) c[j] = R(0);
        const R* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const R av = a[k];
            const R* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] (+)= A[M,K] @ B[N,K]^T, dot-product form.
template <typename R>
void mm_nt(const R* A, const R* B, R* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
#ifdef SIMLA_OPENMP
#pragma omp parallel for schedule(static) if (M * K * N > 65536)
#endif
    for (int64_t i = 0; i < M; ++i) {
        const R* a = A + i * K;
        R* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const R* b = B + j * K;
            R acc = R(0);
            for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] = accumulate ? c[j] + acc : acc;
        }
    }
}

// C[K,N] (+)= A[M,K]^T @ B[M,N].
template <typename R>
void mm_tn(const R* A, const R* B, R* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
    if (!accumulate) std::fill(C, C + K * N, R(0));
    for (int64_t m = 0; m < M; ++m) {
        const R* a = A + m * K;
        const R* b = B + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const R av = a[k];
            R* c = C + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

template <typename R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()));
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(M), static_cast<int>(N)}, rg);
    detail::mm_nn(a.data(), b.data(), out.data(), M, K, N, false);
    detail::finish(out, "matmul");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("matmul", [an, bn, on, M, K, N] {
            if (!detail::has_grad(on)) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::mm_nt(on->grad.data(), bn->value.data(), an->grad.data(), M, N, K, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::mm_tn(an->value.data(), on->grad.data(), bn->grad.data(), M, K, N, true);
            }
        });
    }
    return out;
}

// a [M,K] @ b[N,K]^T -> [M,N]
template <typename R>
Tensor<R> matmul_nt(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()) + "^T");
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(M), static_cast<int>(N)}, rg);
    detail::mm_nt(a.data(), b.data(), out.data(), M, K, N, false);
    detail::finish(out, "matmul_nt");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("matmul_nt", [an, bn, on, M, K, N] {
            if (!detail::has_grad(on)) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::mm_nn(on->grad.data(), bn->value.data(), an->grad.data(), M, N, K, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::mm_tn(on->grad.data(), an->value.data(), bn->grad.data(), M, N, K, true);
            }
        });
    }
    return out;
}

// Batched [G,M,K] @ [G,K,N] -> [G,M,N]
template <typename R>
Tensor<R> bmm(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()));
    int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(G), static_cast<int>(M), static_cast<int>(N)}, rg);
#ifdef SIMLA_OPENMP
#pragma omp parallel for schedule(static) if (G > 1 && M * K * N > 8192)
#endif
    for (int64_t g = 0; g < G; ++g)
        detail::mm_nn(a.data() + g * M * K, b.data() + g * K * N, out.data() + g * M * N, M, K, N, false);
    detail::finish(out, "bmm");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("bmm", [an, bn, on, G, M, K, N] {
            if (!detail::has_grad(on)) return;
            for (int64_t g = 0; g < G; ++g) {
                const R* go = on->grad.data() + g * M * N;
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::mm_nt(go, bn->value.data() + g * K * N, an->grad.data() + g * M * K, M, N, K, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::mm_tn(an->value.data() + g * M * K, go, bn->grad.data() + g * K * N, M, K, N, true);
                }
            }
        });
    }
    return out;
}

// Batched [G,M,K] @ [G,N,K]^T -> [G,M,N] (attention scores).
template <typename R>
Tensor<R> bmm_nt(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()) + "^T");
    int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
    bool rg = detail::want_grad<R>({&a, &b});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(G), static_cast<int>(M), static_cast<int>(N)}, rg);
#ifdef SIMLA_OPENMP
#pragma omp parallel for schedule(static) if (G > 1 && M * K * N > 8192)
#endif
    for (int64_t g = 0; g < G; ++g)
        detail::mm_nt(a.data() + g * M * K, b.data() + g * N * K, out.data() + g * M * N, M, K, N, false);
    detail::finish(out, "bmm_nt");
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<R>::current()->record("bmm_nt", [an, bn, on, G, M, K, N] {
            if (!detail::has_grad(on)) return;
            for (int64_t g = 0; g < G; ++g) {
                const R* go = on->grad.data() + g * M * N;
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::mm_nn(go, bn->value.data() + g * N * K, an->grad.data() + g * M * K, M, N, K, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::mm_tn(go, an->value.data() + g * M * K, bn->grad.data() + g * N * K, N, M, K, true);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along `axis`; every line sums to 1.
template <typename R>
Tensor<R> softmax(const Tensor<R>& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw std::invalid_argument("softmax: axis out of range for shape " + shape_str(x.shape()));
    int64_t extent = x.dim(axis);
    int64_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    int64_t outer = x.numel() / (extent * inner);
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    const R* px = x.data();
    R* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * extent * inner + in;
            R mx = px[base];
            for (int64_t e = 1; e < extent; ++e) mx = std::max(mx, px[base + e * inner]);
            R sum = R(0);
            for (int64_t e = 0; e < extent; ++e) {
                R v = std::exp(px[base + e * inner] - mx);
                po[base + e * inner] = v;
                sum += v;
            }
            R inv = R(1) / sum;
            for (int64_t e = 0; e < extent; ++e) po[base + e * inner] *= inv;
        }
    detail::finish(out, "softmax");
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("softmax", [xn, on, outer, extent, inner] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * extent * inner + in;
                    R dot = R(0);
                    for (int64_t e = 0; e < extent; ++e)
                        dot += on->grad[base + e * inner] * on->value[base + e * inner];
                    for (int64_t e = 0; e < extent; ++e) {
                        const int64_t k = base + e * inner;
                        xn->grad[k] += on->value[k] * (on->grad[k] - dot);
                    }
                }
        });
    }
    return out;
}

// Layer normalization over the last axis with learnable gain/offset.
template <typename R>
Tensor<R> layer_norm(const Tensor<R>& x, const Tensor<R>& gamma, const Tensor<R>& beta, R eps = R(1e-6)) {
    int d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d)
        throw std::invalid_argument("layer_norm: gain/offset width mismatch");
    int64_t rows = x.numel() / d;
    bool rg = detail::want_grad<R>({&x, &gamma, &beta});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    std::vector<R> inv_std(rows), xhat;
    if (rg) xhat.resize(x.numel());
    const R* px = x.data();
    const R* pg = gamma.data();
    const R* pb = beta.data();
    R* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const R* xr = px + r * d;
        R mean = R(0);
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= R(d);
        R var = R(0);
        for (int j = 0; j < d; ++j) {
            R c = xr[j] - mean;
            var += c * c;
        }
        var /= R(d);
        R is = R(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int j = 0; j < d; ++j) {
            R xh = (xr[j] - mean) * is;
            if (rg) xhat[r * d + j] = xh;
            po[r * d + j] = xh * pg[j] + pb[j];
        }
    }
    detail::finish(out, "layer_norm");
    if (rg) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        auto istd = std::make_shared<std::vector<R>>(std::move(inv_std));
        auto xh = std::make_shared<std::vector<R>>(std::move(xhat));
        Tape<R>::current()->record("layer_norm", [xn, gn, bn, on, istd, xh, rows, d] {
            if (!detail::has_grad(on)) return;
            for (int64_t r = 0; r < rows; ++r) {
                const R* gy = on->grad.data() + r * d;
                const R* xhr = xh->data() + r * d;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int j = 0; j < d; ++j) gn->grad[j] += gy[j] * xhr[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < d; ++j) bn->grad[j] += gy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    R sum_g = R(0), sum_gx = R(0);
                    for (int j = 0; j < d; ++j) {
                        R gj = gy[j] * gn->value[j];
                        sum_g += gj;
                        sum_gx += gj * xhr[j];
                    }
                    const R inv_d = R(1) / R(d);
                    R* gx = xn->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        R gj = gy[j] * gn->value[j];
                        gx[j] += (*istd)[r] * (gj - inv_d * sum_g - xhr[j] * inv_d * sum_gx);
                    }
                }
            }
        });
    }
    return out;
}

// Row-wise L2 normalization to unit length.
template <typename R>
Tensor<R> l2_normalize_rows(const Tensor<R>& x) {
    if (x.rank() != 2) throw std::invalid_argument("l2_normalize_rows: rank-2 tensor required");
    int d = x.dim(1);
    int64_t rows = x.dim(0);
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>(x.shape(), rg);
    std::vector<R> inv_norm(rows);
    const R* px = x.data();
    R* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const R* xr = px + r * d;
        R sq = R(0);
        for (int j = 0; j < d; ++j) sq += xr[j] * xr[j];
        R inv = R(1) / std::max(std::sqrt(sq), R(1e-12));
        inv_norm[r] = inv;
        for (int j = 0; j < d; ++j) po[r * d + j] = xr[j] * inv;
    }
    detail::finish(out, "l2_normalize_rows");
    if (rg) {
        auto xn = x.node(), on = out.node();
        auto inorm = std::make_shared<std::vector<R>>(std::move(inv_norm));
        Tape<R>::current()->record("l2_normalize_rows", [xn, on, inorm, rows, d] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const R* y = on->value.data() + r * d;
                const R* gy = on->grad.data() + r * d;
                R dot = R(0);
                for (int j = 0; j < d; ++j) dot += y[j] * gy[j];
                R* gx = xn->grad.data() + r * d;
                for (int j = 0; j < d; ++j) gx[j] += (*inorm)[r] * (gy[j] - y[j] * dot);
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> sum_all(const Tensor<R>& x) {
    bool rg = detail::want_grad<R>({&x});
    Tensor<R> out = detail::make_output<R>({1}, rg);
    R acc = R(0);
    const R* px = x.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;
    detail::finish(out, "sum_all");
    if (rg) {
        auto xn = x.node(), on = out.node();
        Tape<R>::current()->record("sum_all", [xn, on] {
            if (!detail::has_grad(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            R g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return out;
}

template <typename R>
Tensor<R> mean_all(const Tensor<R>& x) {
    return scale(sum_all(x), R(1) / R(x.numel()));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over rows of -sum(target * log(max(pred, 1e-12))). Predictions and
// targets are distributions row by row; gradients saturate to zero where the
// clamp is active so analytic and finite-difference derivatives agree.
template <typename R>
Tensor<R> cross_entropy(const Tensor<R>& p_pred, const Tensor<R>& target) {
    if (p_pred.shape() != target.shape())
        throw std::invalid_argument("cross_entropy: shape mismatch " + shape_str(p_pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    int d = p_pred.shape().back();
    int64_t rows = p_pred.numel() / d;
    const R clamp = R(1e-12);
    const R* pp = p_pred.data();
    const R* pt = target.data();
    for (int64_t r = 0; r < rows; ++r) {
        R sum = R(0);
        for (int j = 0; j < d; ++j) sum += pp[r * d + j];
        if (std::abs(sum - R(1)) > R(1e-3))
            throw std::invalid_argument("cross_entropy: prediction row " + std::to_string(r) +
                                        " is not a distribution (sum " + std::to_string(static_cast<double>(sum)) +
                                        ")");
    }
    bool rg = detail::want_grad<R>({&p_pred, &target});
    Tensor<R> out = detail::make_output<R>({1}, rg);
    R acc = R(0);
    for (int64_t i = 0; i < rows * d; ++i) acc -= pt[i] * std::log(std::max(pp[i], clamp));
    out.data()[0] = acc / R(rows);
    detail::finish(out, "cross_entropy");
    if (rg) {
        auto pn = p_pred.node(), tn = target.node(), on = out.node();
        Tape<R>::current()->record("cross_entropy", [pn, tn, on, rows, d, clamp] {
            if (!detail::has_grad(on)) return;
            const R g = on->grad[0] / R(rows);
            const int64_t n = rows * d;
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    if (pn->value[i] > clamp) pn->grad[i] -= g * tn->value[i] / pn->value[i];
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) tn->grad[i] -= g * std::log(std::max(pn->value[i], clamp));
            }
        });
    }
    return out;
}

// Mean over all elements of the binary cross-entropy between sigmoid(logits)
// and targets in [0,1]; sigmoid output clamped to [1e-7, 1-1e-7].
template <typename R>
Tensor<R> bce_with_logits(const Tensor<R>& logits, const Tensor<R>& target) {
    if (logits.shape() != target.shape())
        throw std::invalid_argument("bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                                    shape_str(target.shape()));
    const R lo = R(1e-7), hi = R(1) - R(1e-7);
    bool rg = detail::want_grad<R>({&logits, &target});
    Tensor<R> out = detail::make_output<R>({1}, rg);
    const R* px = logits.data();
    const R* pt = target.data();
    int64_t n = logits.numel();
    R acc = R(0);
    for (int64_t i = 0; i < n; ++i) {
        R s = R(1) / (R(1) + std::exp(-px[i]));
        R c = std::min(std::max(s, lo), hi);
        acc -= pt[i] * std::log(c) + (R(1) - pt[i]) * std::log(R(1) - c);
    }
    out.data()[0] = acc / R(n);
    detail::finish(out, "bce_with_logits");
    if (rg) {
        auto xn = logits.node(), tn = target.node(), on = out.node();
        Tape<R>::current()->record("bce_with_logits", [xn, tn, on, lo, hi, n] {
            if (!detail::has_grad(on)) return;
            const R g = on->grad[0] / R(n);
            if (xn->requires_grad) xn->ensure_grad();
            if (tn->requires_grad) tn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                R s = R(1) / (R(1) + std::exp(-xn->value[i]));
                R c = std::min(std::max(s, lo), hi);
                if (xn->requires_grad && s > lo && s < hi) xn->grad[i] += g * (s - tn->value[i]);
                if (tn->requires_grad) tn->grad[i] += g * (std::log(R(1) - c) - std::log(c));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename R>
Tensor<R> embedding(const Tensor<R>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("embedding: rank-2 table required");
    int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(v));
    bool rg = detail::want_grad<R>({&table});
    Tensor<R> out = detail::make_output<R>({static_cast<int>(ids.size()), d}, rg);
    const R* pt = table.data();
    R* po = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(pt + static_cast<int64_t>(ids[i]) * d, pt + static_cast<int64_t>(ids[i] + 1) * d, po + i * d);
    if (rg) {
        auto tn = table.node(), on = out.node();
        Tape<R>::current()->record("embedding", [tn, on, ids, d] {
            if (!detail::has_grad(on) || !tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j) tn->grad[static_cast<int64_t>(ids[i]) * d + j] += on->grad[i * d + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable utilities
// ---------------------------------------------------------------------------

// Indices sorted by descending value; ties keep the lower index first.
template <typename R>
std::vector<int> argsort_desc(const R* v, int n) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
    return idx;
}

template <typename R>
std::vector<int> argsort_desc(const std::vector<R>& v) {
    return argsort_desc(v.data(), static_cast<int>(v.size()));
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |cd|).
// f must be a scalar-valued function of x; run in 64-bit mode.
template <typename R, typename F>
double grad_check(F&& f, Tensor<R> x, R h = R(1e-5)) {
    x.set_requires_grad(true);
    x.zero_grad();
    {
        Tape<R> tape;
        Tensor<R> y = f(x);
        if (y.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
        tape.backward(y);
    }
    std::vector<R> analytic = x.grad();
    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const R orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = static_cast<double>(f(x).item());
        x.data()[i] = orig - h;
        const double fm = static_cast<double>(f(x).item());
        x.data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
        const double err = std::abs(static_cast<double>(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace simla
