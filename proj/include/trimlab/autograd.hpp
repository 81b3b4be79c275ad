#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape records every primitive applied during one forward pass. Nodes whose
// inputs all lack requires_grad store no backward closure, so frozen
// sub-graphs cost nothing on the reverse pass. Tapes are single-thread
// objects and are rebuilt for every training step.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "trimlab/core.hpp"
#include "trimlab/kernels.hpp"
#include "trimlab/tensor.hpp"

namespace trimlab {

/// A named, persistent tensor with its accumulated gradient.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    mutable Tensor<T> grad;  // written by Tape::backward through const models
    bool trainable = true;

    void zero_grad() const { grad = Tensor<T>(value.shape()); }
};

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

template <class T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Tensor<T> own;
        Tensor<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
        const Parameter<T>* param = nullptr;  // parameter leaves read p.value in place

        const Tensor<T>& value() const { return param ? param->value : own; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}, nullptr); }

    Var<T> leaf(Tensor<T> v, bool requires_grad = true) { return push(std::move(v), requires_grad, {}, nullptr); }

    /// Leaf bound to a parameter; backward accumulates into `p.grad` when the
    /// parameter is trainable. The value is referenced, not copied, so the
    /// parameter must outlive the tape and stay unchanged while it is in use.
    Var<T> param(const Parameter<T>& p) { return push(Tensor<T>(), p.trainable, {}, &p); }

    /// Records an op output. The closure is kept only when an input needs grad.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        bool rg = false;
        for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, nullptr);
    }
    Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
        bool rg = false;
        for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, nullptr);
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    bool needs_grad(const Var<T>& v) const { return nodes_[v.id].requires_grad; }

    /// Gradient buffer of a node, zero-initialised on first touch.
    Tensor<T>& grad_buffer(std::size_t id) {
        auto& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor<T>(n.value().shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    const Tensor<T>& grad(const Var<T>& v) const { return nodes_[v.id].grad; }

    void backward(const Var<T>& loss) {
        if (loss.tape != this || loss.id >= nodes_.size())
            throw std::invalid_argument("backward: loss is not recorded on this tape");
        const auto& lv = nodes_[loss.id].value();
        if (lv.size() != 1) throw ShapeError("backward", lv.shape(), Shape{}, "loss must be a scalar");
        if (!nodes_[loss.id].requires_grad) return;
        grad_buffer(loss.id)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || !n.has_grad) continue;
            if (n.backward) {
                n.backward(*this, i);
                ++backward_ops_;
            }
            if (n.param) {
                auto& pg = n.param->grad;
                if (pg.shape() != n.value().shape()) pg = Tensor<T>(n.value().shape());
                for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
            }
        }
    }

    /// Number of backward closures executed so far (reverse-pass cost probe).
    std::size_t backward_ops() const { return backward_ops_; }
    /// Number of recorded op nodes (leaves excluded).
    std::size_t op_nodes() const { return op_nodes_; }
    void note_op() { ++op_nodes_; }

   private:
    Var<T> push(Tensor<T> v, bool rg, BackwardFn fn, const Parameter<T>* p) {
        Node n;
        n.own = std::move(v);
        n.requires_grad = rg;
        n.backward = std::move(fn);
        n.param = p;
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later pushes
    std::size_t backward_ops_ = 0;
    std::size_t op_nodes_ = 0;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape->node(id).value();
}
template <class T>
bool Var<T>::requires_grad() const {
    return tape->node(id).requires_grad;
}

template <class T>
Var<T> make_op(Tape<T>& tape, const char* name, Tensor<T> out, std::initializer_list<Var<T>> inputs,
               typename Tape<T>::BackwardFn fn) {
    if (!out.all_finite()) throw NumericError(name, "output " + shape_str(out.shape()));
    tape.note_op();
    return tape.record(std::move(out), inputs, std::move(fn));
}

namespace detail {

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <class T>
Tensor<T>& gbuf(Tape<T>& t, const Var<T>& v) {
    return t.grad_buffer(v.id);
}

template <class T>
const Tensor<T>& upstream(Tape<T>& t, std::size_t self) {
    return t.node(self).grad;
}

/// Elementwise unary op with derivative expressed from (input, output).
template <class T, class F, class D>
Var<T> unary(const char* name, const Var<T>& x, F f, D dfdx) {
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_op<T>(*x.tape, name, std::move(out), {x}, [x, dfdx](Tape<T>& t, std::size_t self) {
        if (!t.needs_grad(x)) return;
        const auto& g = upstream(t, self);
        const auto& xv = x.value();
        const auto& yv = t.node(self).value();
        auto& dx = gbuf(t, x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], yv[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same("add", a, b);
    Tensor<T> out(a.shape());
    const T *av = a.value().data(), *bv = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = av[i] + bv[i];
    return make_op<T>(*a.tape, "add", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        for (const auto& v : {a, b})
            if (t.needs_grad(v)) {
                auto& d = detail::gbuf(t, v);
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same("sub", a, b);
    Tensor<T> out(a.shape());
    const T *av = a.value().data(), *bv = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = av[i] - bv[i];
    return make_op<T>(*a.tape, "sub", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        if (t.needs_grad(a)) {
            auto& d = detail::gbuf(t, a);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (t.needs_grad(b)) {
            auto& d = detail::gbuf(t, b);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same("mul", a, b);
    Tensor<T> out(a.shape());
    const T *av = a.value().data(), *bv = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = av[i] * bv[i];
    return make_op<T>(*a.tape, "mul", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        // Same var used twice (x*x) accumulates both terms through gbuf.
        if (t.needs_grad(a)) {
            const auto& bv = b.value();
            auto& d = detail::gbuf(t, a);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
        }
        if (t.needs_grad(b)) {
            const auto& av = a.value();
            auto& d = detail::gbuf(t, b);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    const T* xv = x.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = xv[i] * s;
    return make_op<T>(*x.tape, "scale", std::move(out), {x}, [x, s](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& d = detail::gbuf(t, x);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    const T* xv = x.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = xv[i] + s;
    return make_op<T>(*x.tape, "add_scalar", std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& d = detail::gbuf(t, x);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

/// x * v broadcast along `axis` (v has length x.dim(axis)).
template <class T>
Var<T> mul_axis(const Var<T>& x, const Var<T>& v, std::size_t axis) {
    const auto& xv = x.value();
    if (axis >= xv.rank() || v.value().rank() != 1 || v.value().size() != xv.dim(axis))
        throw ShapeError("mul_axis", xv.shape(), v.shape(), "axis " + std::to_string(axis));
    const std::size_t outer = xv.outer(axis), n = xv.dim(axis), inner = xv.inner(axis);
    Tensor<T> out(xv.shape());
    const auto& vv = v.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t base = (o * n + j) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] * vv[j];
        }
    return make_op<T>(*x.tape, "mul_axis", std::move(out), {x, v},
                      [x, v, outer, n, inner](Tape<T>& t, std::size_t self) {
                          const auto& g = detail::upstream(t, self);
                          if (t.needs_grad(x)) {
                              const auto& vv = v.value();
                              auto& d = detail::gbuf(t, x);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const std::size_t base = (o * n + j) * inner;
                                      for (std::size_t i = 0; i < inner; ++i) d[base + i] += g[base + i] * vv[j];
                                  }
                          }
                          if (t.needs_grad(v)) {
                              const auto& xv = x.value();
                              auto& d = detail::gbuf(t, v);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const std::size_t base = (o * n + j) * inner;
                                      T acc = 0;
                                      for (std::size_t i = 0; i < inner; ++i) acc += g[base + i] * xv[base + i];
                                      d[j] += acc;
                                  }
                          }
                      });
}

/// x + v broadcast along `axis`.
template <class T>
Var<T> add_axis(const Var<T>& x, const Var<T>& v, std::size_t axis) {
    const auto& xv = x.value();
    if (axis >= xv.rank() || v.value().rank() != 1 || v.value().size() != xv.dim(axis))
        throw ShapeError("add_axis", xv.shape(), v.shape(), "axis " + std::to_string(axis));
    const std::size_t outer = xv.outer(axis), n = xv.dim(axis), inner = xv.inner(axis);
    Tensor<T> out(xv.shape());
    const auto& vv = v.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t base = (o * n + j) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] + vv[j];
        }
    return make_op<T>(*x.tape, "add_axis", std::move(out), {x, v},
                      [x, v, outer, n, inner](Tape<T>& t, std::size_t self) {
                          const auto& g = detail::upstream(t, self);
                          if (t.needs_grad(x)) {
                              auto& d = detail::gbuf(t, x);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          }
                          if (t.needs_grad(v)) {
                              auto& d = detail::gbuf(t, v);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const std::size_t base = (o * n + j) * inner;
                                      T acc = 0;
                                      for (std::size_t i = 0; i < inner; ++i) acc += g[base + i];
                                      d[j] += acc;
                                  }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
Var<T> relu(const Var<T>& x) {
    return detail::unary(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf-based) GELU. Evaluated with Eigen's vectorised erf/exp; the
/// scalar libm erff is an order of magnitude slower here.
template <class T>
Var<T> gelu(const Var<T>& x) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto& xv = x.value();
    const auto n = static_cast<Eigen::Index>(xv.size());
    Eigen::Map<const Arr> in(xv.data(), n);
    Tensor<T> cdf(xv.shape());
    Eigen::Map<Arr> phi(cdf.data(), n);
    phi = T(0.5) * (T(1) + (in * T(0.70710678118654752440)).erf());
    Tensor<T> out(xv.shape());
    Eigen::Map<Arr>(out.data(), n) = in * phi;
    return make_op<T>(*x.tape, "gelu", std::move(out), {x}, [x, cdf = std::move(cdf), n](Tape<T>& t, std::size_t self) {
        const auto& xv = x.value();
        Eigen::Map<const Arr> in(xv.data(), n), c(cdf.data(), n), g(detail::upstream(t, self).data(), n);
        Eigen::Map<Arr> dx(detail::gbuf(t, x).data(), n);
        dx += g * (c + in * T(0.39894228040143267794) * (T(-0.5) * in.square()).exp());
    });
}

template <class T>
T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return detail::unary("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

/// Rounds to {0, 1} at threshold 0.5 (ties go to 1). The backward pass is the
/// identity: upstream gradient flows through unchanged.
template <class T>
Var<T> ste_round(const Var<T>& x) {
    return detail::unary("ste_round", x, [](T v) { return v >= T(0.5) ? T(1) : T(0); }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) throw ShapeError("matmul", av.shape(), bv.shape());
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out(Shape{m, n});
    kernels::gemm(av.data(), bv.data(), out.data(), m, k, n, kernels::Trans::no, kernels::Trans::no, false);
    return make_op<T>(*a.tape, "matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        if (t.needs_grad(a))
            kernels::gemm(g.data(), b.value().data(), detail::gbuf(t, a).data(), m, n, k, kernels::Trans::no,
                          kernels::Trans::yes, true);
        if (t.needs_grad(b))
            kernels::gemm(a.value().data(), g.data(), detail::gbuf(t, b).data(), k, m, n, kernels::Trans::yes,
                          kernels::Trans::no, true);
    });
}

/// Batched matmul over the leading axis; `trans_b` multiplies by B^T per batch.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(trans_b ? 2 : 1))
        throw ShapeError("bmm", av.shape(), bv.shape());
    const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(trans_b ? 1 : 2);
    Tensor<T> out(Shape{batch, m, n});
    const auto tb = trans_b ? kernels::Trans::yes : kernels::Trans::no;
    for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n, kernels::Trans::no,
                      tb, false);
    return make_op<T>(*a.tape, "bmm", std::move(out), {a, b},
                      [a, b, batch, m, k, n, trans_b](Tape<T>& t, std::size_t self) {
                          using kernels::Trans;
                          const auto& g = detail::upstream(t, self);
                          const T* av = a.value().data();
                          const T* bv = b.value().data();
                          if (t.needs_grad(a)) {
                              T* da = detail::gbuf(t, a).data();
                              // dA = G * op(B)^T
                              for (std::size_t i = 0; i < batch; ++i)
                                  kernels::gemm(g.data() + i * m * n, bv + i * k * n, da + i * m * k, m, n, k, Trans::no,
                                                trans_b ? Trans::no : Trans::yes, true);
                          }
                          if (t.needs_grad(b)) {
                              T* db = detail::gbuf(t, b).data();
                              for (std::size_t i = 0; i < batch; ++i) {
                                  if (trans_b)  // dB (n x k) = G^T * A
                                      kernels::gemm(g.data() + i * m * n, av + i * m * k, db + i * k * n, n, m, k,
                                                    Trans::yes, Trans::no, true);
                                  else  // dB (k x n) = A^T * G
                                      kernels::gemm(av + i * m * k, g.data() + i * m * n, db + i * k * n, k, m, n,
                                                    Trans::yes, Trans::no, true);
                              }
                          }
                      });
}

/// y = x W^T + b over the last axis of x. W is (out, in); `bias` may be null.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.rank() < 1 || wv.rank() != 2 || xv.shape().back() != wv.dim(1)) throw ShapeError("linear", xv.shape(), wv.shape());
    const std::size_t in = wv.dim(1), outf = wv.dim(0), rows = in ? xv.size() / in : xv.outer(xv.rank() - 1);
    if (bias && (bias->value().rank() != 1 || bias->value().size() != outf))
        throw ShapeError("linear", wv.shape(), bias->shape(), "bias");
    Shape os = xv.shape();
    os.back() = outf;
    Tensor<T> out(os);
    kernels::gemm(xv.data(), wv.data(), out.data(), rows, in, outf, kernels::Trans::no, kernels::Trans::yes, false);
    if (bias) {
        const auto& bv = bias->value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < outf; ++o) out[r * outf + o] += bv[o];
    }
    const bool has_bias = bias != nullptr;
    const Var<T> b = has_bias ? *bias : x;
    auto fn = [x, w, b, has_bias, rows, in, outf](Tape<T>& t, std::size_t self) {
        using kernels::Trans;
        const auto& g = detail::upstream(t, self);
        if (t.needs_grad(x))
            kernels::gemm(g.data(), w.value().data(), detail::gbuf(t, x).data(), rows, outf, in, Trans::no, Trans::no, true);
        if (t.needs_grad(w))
            kernels::gemm(g.data(), x.value().data(), detail::gbuf(t, w).data(), outf, rows, in, Trans::yes, Trans::no, true);
        if (has_bias && t.needs_grad(b)) {
            auto& db = detail::gbuf(t, b);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < outf; ++o) db[o] += g[r * outf + o];
        }
    };
    if (has_bias) return make_op<T>(*x.tape, "linear", std::move(out), {x, w, *bias}, std::move(fn));
    return make_op<T>(*x.tape, "linear", std::move(out), {x, w}, std::move(fn));
}

/// 1-D convolution on channels-last input x (batch, length, in_ch) with
/// weight (out_ch, in_ch, kernel) and bias (out_ch); output (batch, out_len, out_ch).
template <class T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t padding) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(2) != wv.dim(1)) throw ShapeError("conv1d", xv.shape(), wv.shape());
    if (bias.value().rank() != 1 || bias.value().size() != wv.dim(0))
        throw ShapeError("conv1d", wv.shape(), bias.shape(), "bias");
    if (stride == 0) throw ShapeError("conv1d", xv.shape(), wv.shape(), "stride must be positive");
    const std::size_t batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2), cout = wv.dim(0), kernel = wv.dim(2);
    const std::size_t out_len = kernels::conv_out_len(len, kernel, stride, padding);
    if (out_len == 0) throw ShapeError("conv1d", xv.shape(), wv.shape(), "input shorter than kernel");
    const std::size_t rows = batch * out_len, width = cin * kernel;
    std::vector<T> col(rows * width), wp(cout * width);
    kernels::im2col(xv.data(), col.data(), batch, len, cin, kernel, stride, padding, out_len);
    kernels::taps_inner_to_outer(wv.data(), wp.data(), cout, cin, kernel);
    Tensor<T> out(Shape{batch, out_len, cout});
    kernels::gemm(col.data(), wp.data(), out.data(), rows, width, cout, kernels::Trans::no, kernels::Trans::yes, false);
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < cout; ++o) out[r * cout + o] += bv[o];
    return make_op<T>(*x.tape, "conv1d", std::move(out), {x, w, bias},
                      [x, w, bias, col = std::move(col), wp = std::move(wp), batch, len, cin, cout, kernel, stride, padding,
                       out_len, rows, width](Tape<T>& t, std::size_t self) {
                          using kernels::Trans;
                          const auto& g = detail::upstream(t, self);
                          if (t.needs_grad(w)) {
                              std::vector<T> dwp(cout * width);
                              kernels::gemm(g.data(), col.data(), dwp.data(), cout, rows, width, Trans::yes, Trans::no,
                                            false);
                              auto& dw = detail::gbuf(t, w);
                              for (std::size_t o = 0; o < cout; ++o)
                                  for (std::size_t k = 0; k < kernel; ++k)
                                      for (std::size_t ci = 0; ci < cin; ++ci)
                                          dw[(o * cin + ci) * kernel + k] += dwp[(o * kernel + k) * cin + ci];
                          }
                          if (t.needs_grad(bias)) {
                              auto& db = detail::gbuf(t, bias);
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t o = 0; o < cout; ++o) db[o] += g[r * cout + o];
                          }
                          if (t.needs_grad(x)) {
                              std::vector<T> dcol(rows * width);
                              kernels::gemm(g.data(), wp.data(), dcol.data(), rows, cout, width, Trans::no, Trans::no,
                                            false);
                              kernels::col2im_add(dcol.data(), detail::gbuf(t, x).data(), batch, len, cin, kernel, stride,
                                                  padding, out_len);
                          }
                      });
}

/// Depthwise stride-1 convolution, channels-last, weight (channels, kernel),
/// no bias. Output keeps the input length when padding = kernel / 2.
template <class T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w, std::size_t padding) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 2 || xv.dim(2) != wv.dim(0) || 2 * padding + 1 != wv.dim(1))
        throw ShapeError("depthwise_conv1d", xv.shape(), wv.shape());
    const std::size_t batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2), kernel = wv.dim(1);
    std::vector<T> wt(kernel * ch);
    for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t k = 0; k < kernel; ++k) wt[k * ch + c] = wv[c * kernel + k];
    Tensor<T> out(xv.shape());
    kernels::depthwise(xv.data(), wt.data(), out.data(), batch, len, ch, kernel, padding);
    return make_op<T>(*x.tape, "depthwise_conv1d", std::move(out), {x, w},
                      [x, w, wt = std::move(wt), batch, len, ch, kernel, padding](Tape<T>& t, std::size_t self) {
                          const auto& g = detail::upstream(t, self);
                          const auto& xv = x.value();
                          const bool gx = t.needs_grad(x), gw = t.needs_grad(w);
                          T* dx = gx ? detail::gbuf(t, x).data() : nullptr;
                          T* dw = gw ? detail::gbuf(t, w).data() : nullptr;
                          for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t tt = 0; tt < len; ++tt) {
                                  const T* go = g.data() + (b * len + tt) * ch;
                                  for (std::size_t k = 0; k < kernel; ++k) {
                                      const std::ptrdiff_t src =
                                          static_cast<std::ptrdiff_t>(tt + k) - static_cast<std::ptrdiff_t>(padding);
                                      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                                      const std::size_t off = (b * len + static_cast<std::size_t>(src)) * ch;
                                      if (gx)
                                          for (std::size_t c = 0; c < ch; ++c) dx[off + c] += go[c] * wt[k * ch + c];
                                      if (gw)
                                          for (std::size_t c = 0; c < ch; ++c) dw[c * kernel + k] += go[c] * xv[off + c];
                                  }
                              }
                      });
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

template <class T>
Var<T> softmax(const Var<T>& x) {
    const auto& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("softmax", xv.shape(), Shape{1});
    const std::size_t n = xv.shape().back(), rows = n ? xv.size() / n : 0;
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * n;
        T* o = out.data() + r * n;
        const T mx = *std::max_element(in, in + n);
        T s = 0;
        for (std::size_t i = 0; i < n; ++i) s += (o[i] = std::exp(in[i] - mx));
        for (std::size_t i = 0; i < n; ++i) o[i] /= s;
    }
    return make_op<T>(*x.tape, "softmax", std::move(out), {x}, [x, n, rows](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        const auto& y = t.node(self).value();
        auto& d = detail::gbuf(t, x);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * n;
            T dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += g[base + i] * y[base + i];
            for (std::size_t i = 0; i < n; ++i) d[base + i] += y[base + i] * (g[base + i] - dot);
        }
    });
}

/// Layer normalisation over the last axis with elementwise scale and offset.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const auto& xv = x.value();
    const std::size_t n = xv.shape().back(), rows = xv.size() / n;
    if (gamma.value().size() != n || beta.value().size() != n) throw ShapeError("layer_norm", xv.shape(), gamma.shape());
    Tensor<T> out(xv.shape());
    std::vector<T> xhat(xv.size()), rstd(rows);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * n;
        T mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += in[i];
        mean /= T(n);
        T var = 0;
        for (std::size_t i = 0; i < n; ++i) var += (in[i] - mean) * (in[i] - mean);
        var /= T(n);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i) {
            const T h = (in[i] - mean) * rstd[r];
            xhat[r * n + i] = h;
            out[r * n + i] = h * gv[i] + bv[i];
        }
    }
    return make_op<T>(*x.tape, "layer_norm", std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, rows](Tape<T>& t,
                                                                                                 std::size_t self) {
                          const auto& g = detail::upstream(t, self);
                          const auto& gv = gamma.value();
                          if (t.needs_grad(gamma) || t.needs_grad(beta)) {
                              std::vector<T> dg(n, 0), db(n, 0);
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t i = 0; i < n; ++i) {
                                      dg[i] += g[r * n + i] * xhat[r * n + i];
                                      db[i] += g[r * n + i];
                                  }
                              if (t.needs_grad(gamma)) {
                                  auto& d = detail::gbuf(t, gamma);
                                  for (std::size_t i = 0; i < n; ++i) d[i] += dg[i];
                              }
                              if (t.needs_grad(beta)) {
                                  auto& d = detail::gbuf(t, beta);
                                  for (std::size_t i = 0; i < n; ++i) d[i] += db[i];
                              }
                          }
                          if (t.needs_grad(x)) {
                              auto& dx = detail::gbuf(t, x);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T m1 = 0, m2 = 0;
                                  for (std::size_t i = 0; i < n; ++i) {
                                      const T dh = g[r * n + i] * gv[i];
                                      m1 += dh;
                                      m2 += dh * xhat[r * n + i];
                                  }
                                  m1 /= T(n);
                                  m2 /= T(n);
                                  for (std::size_t i = 0; i < n; ++i) {
                                      const T dh = g[r * n + i] * gv[i];
                                      dx[r * n + i] += rstd[r] * (dh - m1 - xhat[r * n + i] * m2);
                                  }
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& x) {
    T s = 0;
    for (T v : x.value().values()) s += v;
    return make_op<T>(*x.tape, "sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, std::size_t self) {
        const T g = detail::upstream(t, self)[0];
        auto& d = detail::gbuf(t, x);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw ShapeError("mean", x.shape(), Shape{}, "empty tensor");
    return scale(sum(x), T(1) / T(n));
}

/// Mean over one axis; the axis is removed from the shape.
template <class T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
    const auto& xv = x.value();
    if (axis >= xv.rank() || xv.dim(axis) == 0) throw ShapeError("mean_axis", xv.shape(), Shape{axis});
    const std::size_t outer = xv.outer(axis), n = xv.dim(axis), inner = xv.inner(axis);
    Shape os = xv.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(os);
    const T inv = T(1) / T(n);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + j) * inner + i];
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
    }
    return make_op<T>(*x.tape, "mean_axis", std::move(out), {x}, [x, outer, n, inner, inv](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& d = detail::gbuf(t, x);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < inner; ++i) d[(o * n + j) * inner + i] += g[o * inner + i] * inv;
    });
}

/// Euclidean norm of all elements; the gradient at the origin is taken as 0.
template <class T>
Var<T> l2norm(const Var<T>& x) {
    T s = 0;
    for (T v : x.value().values()) s += v * v;
    const T nrm = std::sqrt(s);
    return make_op<T>(*x.tape, "l2norm", Tensor<T>::scalar(nrm), {x}, [x, nrm](Tape<T>& t, std::size_t self) {
        if (nrm == T(0)) return;
        const T g = detail::upstream(t, self)[0];
        const auto& xv = x.value();
        auto& d = detail::gbuf(t, x);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * xv[i] / nrm;
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
    if (shape_numel(s) != x.value().size()) throw ShapeError("reshape", x.shape(), s);
    Tensor<T> out(std::move(s), x.value().storage());
    return make_op<T>(*x.tape, "reshape", std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& d = detail::gbuf(t, x);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

namespace detail {

/// Copies src into dst with axes a and b exchanged; `add` accumulates.
template <class T>
void swap_axes_copy(const Tensor<T>& src, T* dst, std::size_t a, std::size_t b, bool add) {
    const Shape& s = src.shape();
    const std::size_t rank = s.size();
    Shape os = s;
    std::swap(os[a], os[b]);
    std::vector<std::size_t> ostride(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) ostride[i] = ostride[i + 1] * os[i + 1];
    std::vector<std::size_t> perm_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) perm_stride[i] = ostride[i];
    std::swap(perm_stride[a], perm_stride[b]);
    // Inner-most axis of src is contiguous; iterate it in a tight loop.
    const std::size_t last = s.back(), last_stride = perm_stride[rank - 1];
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t rows = last ? src.size() / last : 0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t base = 0;
        for (std::size_t i = 0; i + 1 < rank; ++i) base += idx[i] * perm_stride[i];
        const T* in = src.data() + r * last;
        if (add)
            for (std::size_t j = 0; j < last; ++j) dst[base + j * last_stride] += in[j];
        else
            for (std::size_t j = 0; j < last; ++j) dst[base + j * last_stride] = in[j];
        for (std::size_t i = rank - 1; i-- > 0;) {
            if (++idx[i] < s[i]) break;
            idx[i] = 0;
        }
    }
}

}  // namespace detail

/// Exchanges two axes.
template <class T>
Var<T> transpose(const Var<T>& x, std::size_t a, std::size_t b) {
    const auto& xv = x.value();
    if (a >= xv.rank() || b >= xv.rank()) throw ShapeError("transpose", xv.shape(), Shape{a, b});
    if (a == b) return reshape(x, xv.shape());
    Shape os = xv.shape();
    std::swap(os[a], os[b]);
    Tensor<T> out(os);
    detail::swap_axes_copy(xv, out.data(), a, b, false);
    return make_op<T>(*x.tape, "transpose", std::move(out), {x}, [x, a, b](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        detail::swap_axes_copy(g, detail::gbuf(t, x).data(), a, b, true);
    });
}

/// Elements [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& xv = x.value();
    if (axis >= xv.rank() || begin > end || end > xv.dim(axis)) throw ShapeError("slice", xv.shape(), Shape{axis, begin, end});
    const std::size_t outer = xv.outer(axis), n = xv.dim(axis), inner = xv.inner(axis), m = end - begin;
    Shape os = xv.shape();
    os[axis] = m;
    Tensor<T> out(os);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.data() + (o * n + begin) * inner, m * inner, out.data() + o * m * inner);
    return make_op<T>(*x.tape, "slice", std::move(out), {x}, [x, outer, n, inner, m, begin](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& d = detail::gbuf(t, x);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < m * inner; ++i) d[(o * n + begin) * inner + i] += g[o * m * inner + i];
    });
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat", Shape{}, Shape{}, "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat", s0, Shape{axis});
    Shape os = s0;
    os[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = s0;
        if (a.size() != b.size()) throw ShapeError("concat", b, a);
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError("concat", s0, p.shape());
        os[axis] += p.shape()[axis];
    }
    const std::size_t outer = parts[0].value().outer(axis), inner = parts[0].value().inner(axis), total = os[axis];
    Tensor<T> out(os);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t n = p.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data() + o * n * inner, n * inner, out.data() + (o * total + off) * inner);
        offsets.push_back(off);
        off += n;
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    auto fn = [inputs, offsets, outer, inner, total, axis](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (!t.needs_grad(inputs[k])) continue;
            const std::size_t n = inputs[k].shape()[axis];
            auto& d = detail::gbuf(t, inputs[k]);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < n * inner; ++i) d[o * n * inner + i] += g[(o * total + offsets[k]) * inner + i];
        }
    };
    if (!out.all_finite()) throw NumericError("concat", "output " + shape_str(out.shape()));
    parts[0].tape->note_op();
    return parts[0].tape->record(std::move(out), parts, std::move(fn));
}

/// Rows of a (n, d) tensor selected by index; repeated indices accumulate grads.
template <class T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw ShapeError("gather_rows", xv.shape(), Shape{rows.size()});
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    for (auto r : rows)
        if (r >= n) throw ShapeError("gather_rows", xv.shape(), Shape{r}, "row index out of range");
    Tensor<T> out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_op<T>(*x.tape, "gather_rows", std::move(out), {x}, [x, idx, d](Tape<T>& t, std::size_t self) {
        const auto& g = detail::upstream(t, self);
        auto& dx = detail::gbuf(t, x);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) dx[idx[i] * d + j] += g[i * d + j];
    });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy of (batch, classes) logits against class ids.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const auto& z = logits.value();
    if (z.rank() != 2 || z.dim(0) != labels.size()) throw ShapeError("cross_entropy", z.shape(), Shape{labels.size()});
    const std::size_t b = z.dim(0), c = z.dim(1);
    std::vector<T> prob(z.size());
    T loss = 0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                                    std::to_string(c) + ")");
        const T* row = z.data() + i * c;
        const T mx = *std::max_element(row, row + c);
        T s = 0;
        for (std::size_t j = 0; j < c; ++j) s += (prob[i * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= s;
        loss += mx + std::log(s) - row[labels[i]];
    }
    loss /= T(b);
    std::vector<int> lab(labels.begin(), labels.end());
    return make_op<T>(*logits.tape, "cross_entropy", Tensor<T>::scalar(loss), {logits},
                      [logits, prob = std::move(prob), lab = std::move(lab), b, c](Tape<T>& t, std::size_t self) {
                          const T g = detail::upstream(t, self)[0] / T(b);
                          auto& d = detail::gbuf(t, logits);
                          for (std::size_t i = 0; i < b; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                  d[i * c + j] += g * (prob[i * c + j] - (static_cast<int>(j) == lab[i] ? T(1) : T(0)));
                      });
}

/// Mean binary cross-entropy with logits over every (example, tag) entry.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
    const auto& z = logits.value();
    if (z.shape() != targets.shape()) throw ShapeError("bce_with_logits", z.shape(), targets.shape());
    const std::size_t n = z.size();
    T loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T y = targets[i];
        if (y < T(0) || y > T(1)) throw std::out_of_range("bce_with_logits: target outside [0, 1]");
        loss += std::max(z[i], T(0)) - z[i] * y + std::log1p(std::exp(-std::abs(z[i])));
    }
    loss /= T(n);
    return make_op<T>(*logits.tape, "bce_with_logits", Tensor<T>::scalar(loss), {logits},
                      [logits, targets, n](Tape<T>& t, std::size_t self) {
                          const T g = detail::upstream(t, self)[0] / T(n);
                          const auto& z = logits.value();
                          auto& d = detail::gbuf(t, logits);
                          for (std::size_t i = 0; i < n; ++i) d[i] += g * (sigmoid_scalar(z[i]) - targets[i]);
                      });
}

}  // namespace trimlab
