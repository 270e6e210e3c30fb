#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "idf/tensor.hpp"

namespace idf {

namespace kernels {

// Rounding applications are counted so tests can assert how many roundings a
// layer performs (one per transformed element).
inline thread_local std::uint64_t round_counter = 0;

// Nearest integer, ties away from zero (llround semantics). The same rule is
// used on the training tape and in exact integer inference, so the two paths
// agree bitwise and a coupling inverts with the same tie-break it applied.
inline double round_half_away(double x) {
    ++round_counter;
    return static_cast<double>(std::llround(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

}  // namespace kernels

// A learnable tensor with its gradient accumulator. The name is the stable
// identifier used by model serialization.
struct Parameter {
    std::string name;
    RealTensor value;
    RealTensor grad;

    Parameter() = default;
    Parameter(std::string n, RealTensor init)
        : name(std::move(n)), value(std::move(init)), grad(value.shape()) {}

    void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a tape node.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order; backward() replays
// them once in reverse, accumulating gradients additively at fan-out. Tapes
// are single-threaded values.
class Tape {
public:
    struct Node {
        RealTensor value;
        RealTensor grad;
        std::function<void(Tape&, const Node&)> backprop;  // may be empty (leaves)
        Parameter* param = nullptr;
    };

    Var leaf(RealTensor v) {
        check_finite(v, "tape leaf");
        return push(std::move(v), nullptr, nullptr);
    }

    Var param(Parameter& p) {
        check_finite(p.value, "parameter");
        return push(p.value, nullptr, &p);
    }

    const RealTensor& value(Var v) const { return node(v).value; }
    const RealTensor& grad(Var v) const { return node(v).grad; }
    RealTensor& grad_mut(Var v) { return nodes_[check(v)].grad; }

    Var push(RealTensor value, std::function<void(Tape&, const Node&)> backprop,
             Parameter* p = nullptr) {
        Node n;
        n.grad = RealTensor(value.shape());
        n.value = std::move(value);
        n.backprop = std::move(backprop);
        n.param = p;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // Computes d(loss)/d(node) for every node and adds d(loss)/d(parameter)
    // into each parameter reachable from the loss. Deterministic: the sweep
    // order and accumulation order are fixed by execution order.
    void backward(Var loss) {
        if (!loss.valid() || loss.idx >= static_cast<int>(nodes_.size()))
            throw error("backward: loss is not on this tape");
        if (nodes_[loss.idx].value.shape().size() != 1)
            throw shape_error("backward: loss must be a scalar");
        for (Node& n : nodes_) n.grad.fill(0.0);
        nodes_[loss.idx].grad[0] = 1.0;
        for (int i = loss.idx; i >= 0; --i) {
            const Node& n = nodes_[i];
            if (n.backprop) n.backprop(*this, n);
            if (n.param) {
                RealTensor& pg = n.param->grad;
                for (int k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

    const Node& node(Var v) const { return nodes_[check(v)]; }

private:
    int check(Var v) const {
        if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
            throw error("invalid tape var");
        return v.idx;
    }
    std::vector<Node> nodes_;
};

namespace detail {

enum class Broadcast { Full, PerChannel, Scalar };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b) {
    if (a == b) return Broadcast::Full;
    if (b.c == 1 && b.h == 1 && b.w == 1) return Broadcast::Scalar;
    if (b.c == a.c && b.h == 1 && b.w == 1) return Broadcast::PerChannel;
    throw shape_error("elementwise: shapes not broadcast-compatible");
}

inline int bindex(Broadcast k, const Shape& a, int i) {
    switch (k) {
        case Broadcast::Full: return i;
        case Broadcast::Scalar: return 0;
        case Broadcast::PerChannel: return i / (a.h * a.w);
    }
    return 0;
}

}  // namespace detail

// ---- Elementwise ops ------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
    const RealTensor& va = t.value(a);
    const RealTensor& vb = t.value(b);
    auto kind = detail::broadcast_kind(va.shape(), vb.shape());
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i)
        out[i] = va[i] + vb[detail::bindex(kind, va.shape(), i)];
    check_finite(out, "add");
    return t.push(std::move(out), [a, b, kind](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        RealTensor& gb = tp.grad_mut(b);
        const Shape& sa = ga.shape();
        for (int i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[detail::bindex(kind, sa, i)] += n.grad[i];
        }
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    const RealTensor& va = t.value(a);
    const RealTensor& vb = t.value(b);
    auto kind = detail::broadcast_kind(va.shape(), vb.shape());
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i)
        out[i] = va[i] - vb[detail::bindex(kind, va.shape(), i)];
    check_finite(out, "sub");
    return t.push(std::move(out), [a, b, kind](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        RealTensor& gb = tp.grad_mut(b);
        const Shape& sa = ga.shape();
        for (int i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[detail::bindex(kind, sa, i)] -= n.grad[i];
        }
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const RealTensor& va = t.value(a);
    const RealTensor& vb = t.value(b);
    auto kind = detail::broadcast_kind(va.shape(), vb.shape());
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i)
        out[i] = va[i] * vb[detail::bindex(kind, va.shape(), i)];
    check_finite(out, "mul");
    return t.push(std::move(out), [a, b, kind](Tape& tp, const Tape::Node& n) {
        const RealTensor va = tp.value(a);
        const RealTensor vb = tp.value(b);
        RealTensor& ga = tp.grad_mut(a);
        RealTensor& gb = tp.grad_mut(b);
        const Shape& sa = va.shape();
        for (int i = 0; i < n.grad.size(); ++i) {
            int j = detail::bindex(kind, sa, i);
            ga[i] += n.grad[i] * vb[j];
            gb[j] += n.grad[i] * va[i];
        }
    });
}

inline Var neg(Tape& t, Var a) {
    RealTensor out = t.value(a);
    for (int i = 0; i < out.size(); ++i) out[i] = -out[i];
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] -= n.grad[i];
    });
}

inline Var scale(Tape& t, Var a, double k) {
    RealTensor out = t.value(a);
    for (int i = 0; i < out.size(); ++i) out[i] *= k;
    check_finite(out, "scale");
    return t.push(std::move(out), [a, k](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * k;
    });
}

inline Var exp_(Tape& t, Var a) {
    RealTensor out = t.value(a);
    for (int i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    check_finite(out, "exp");
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * n.value[i];
    });
}

inline Var log_(Tape& t, Var a) {
    const RealTensor& va = t.value(a);
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i) out[i] = std::log(va[i]);
    check_finite(out, "log");
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        const RealTensor& va = tp.value(a);
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] / va[i];
    });
}

inline Var sigmoid_(Tape& t, Var a) {
    RealTensor out = t.value(a);
    for (int i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(out[i]);
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i)
            ga[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
    });
}

inline Var relu_(Tape& t, Var a) {
    RealTensor out = t.value(a);
    for (int i = 0; i < out.size(); ++i) out[i] = kernels::relu(out[i]);
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        const RealTensor& va = tp.value(a);
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i)
            if (va[i] > 0.0) ga[i] += n.grad[i];
    });
}

inline Var softplus_(Tape& t, Var a) {
    const RealTensor& va = t.value(a);
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i) out[i] = kernels::softplus(va[i]);
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        const RealTensor& va = tp.value(a);
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * kernels::sigmoid(va[i]);
    });
}

// Straight-through rounding: forward is nearest-integer (ties away from
// zero); backward passes the upstream gradient through unchanged.
inline Var round_ste(Tape& t, Var a) {
    const RealTensor& va = t.value(a);
    check_finite(va, "round_ste");
    RealTensor out(va.shape());
    for (int i = 0; i < out.size(); ++i) out[i] = kernels::round_half_away(va[i]);
    return t.push(std::move(out), [a](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

inline Var sum(Tape& t, Var a) {
    const RealTensor& va = t.value(a);
    double acc = 0.0;
    for (int i = 0; i < va.size(); ++i) acc += va[i];
    return t.push(RealTensor::scalar(acc), [a](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < ga.size(); ++i) ga[i] += n.grad[0];
    });
}

// ---- Structural ops (channel moves; gradients are scatters) ---------------

inline Var concat_c(Tape& t, Var a, Var b) {
    const RealTensor& va = t.value(a);
    const RealTensor& vb = t.value(b);
    require(va.shape().h == vb.shape().h && va.shape().w == vb.shape().w,
            "concat: spatial extents differ");
    RealTensor out(Shape{va.shape().c + vb.shape().c, va.shape().h, va.shape().w});
    std::copy(va.data(), va.data() + va.size(), out.data());
    std::copy(vb.data(), vb.data() + vb.size(), out.data() + va.size());
    int na = va.size();
    return t.push(std::move(out), [a, b, na](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        RealTensor& gb = tp.grad_mut(b);
        for (int i = 0; i < na; ++i) ga[i] += n.grad[i];
        for (int i = 0; i < gb.size(); ++i) gb[i] += n.grad[na + i];
    });
}

// Channels [c0, c0+len) of a.
inline Var narrow_c(Tape& t, Var a, int c0, int len) {
    const RealTensor& va = t.value(a);
    require(c0 >= 0 && len >= 1 && c0 + len <= va.shape().c, "narrow: channel range");
    int hw = va.shape().h * va.shape().w;
    RealTensor out(Shape{len, va.shape().h, va.shape().w});
    std::copy(va.data() + c0 * hw, va.data() + (c0 + len) * hw, out.data());
    return t.push(std::move(out), [a, c0, hw](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (int i = 0; i < n.grad.size(); ++i) ga[c0 * hw + i] += n.grad[i];
    });
}

// out channel i = in channel perm[i].
inline Var permute_c(Tape& t, Var a, const std::vector<int>& perm) {
    const RealTensor& va = t.value(a);
    require(static_cast<int>(perm.size()) == va.shape().c, "permute: length mismatch");
    int hw = va.shape().h * va.shape().w;
    RealTensor out(va.shape());
    for (int c = 0; c < va.shape().c; ++c)
        std::copy(va.data() + perm[c] * hw, va.data() + (perm[c] + 1) * hw, out.data() + c * hw);
    return t.push(std::move(out), [a, perm, hw](Tape& tp, const Tape::Node& n) {
        RealTensor& ga = tp.grad_mut(a);
        for (std::size_t c = 0; c < perm.size(); ++c)
            for (int i = 0; i < hw; ++i)
                ga[perm[c] * hw + i] += n.grad[static_cast<int>(c) * hw + i];
    });
}

// ---- Test oracle -----------------------------------------------------------

// Central finite differences of a pure scalar function with respect to one
// parameter. This is the independent gradient oracle the backward pass is
// checked against; it never touches the tape.
inline RealTensor finite_diff_grad(const std::function<double()>& f, Parameter& p, double h) {
    RealTensor g(p.value.shape());
    for (int i = 0; i < p.value.size(); ++i) {
        double orig = p.value[i];
        p.value[i] = orig + h;
        double fp = f();
        p.value[i] = orig - h;
        double fm = f();
        p.value[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace idf
