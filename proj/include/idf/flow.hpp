#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/common.hpp"
#include "idf/nn.hpp"
#include "idf/prior.hpp"
#include "idf/tensor.hpp"

namespace idf {

// Exact integer bijections. Every layer here satisfies
// inverse(forward(x)) == x elementwise with no tolerance; training-time tape
// paths compute the same values with straight-through gradients.

enum class Rounding { Ste, Identity };

namespace detail {

inline std::int32_t round_to_i32(double v, const char* where) {
    const double r = kernels::round_half_away(v);
    if (!(r >= -2147400000.0 && r <= 2147400000.0))
        throw data_error(std::string(where) + ": translation out of integer range");
    return static_cast<std::int32_t>(r);
}

}  // namespace detail

// ---- Squeeze: space-to-channel, (C,H,W) -> (4C,H/2,W/2) ---------------------
//
// Output channel 4c + 2*dy + dx holds in[c][2y+dy][2x+dx]; a (1,2,2) block
// [[1,2],[3,4]] becomes channels [1,2,3,4].

inline IntTensor squeeze(const IntTensor& in) {
    const Shape s = in.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "squeeze: odd spatial extent");
    IntTensor out(Shape{s.c * 4, s.h / 2, s.w / 2});
    for (int c = 0; c < s.c; ++c)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                for (int y = 0; y < s.h / 2; ++y)
                    for (int x = 0; x < s.w / 2; ++x)
                        out.at(4 * c + 2 * dy + dx, y, x) = in.at(c, 2 * y + dy, 2 * x + dx);
    return out;
}

inline IntTensor unsqueeze(const IntTensor& in) {
    const Shape s = in.shape();
    require(s.c % 4 == 0, "unsqueeze: channels not divisible by 4");
    IntTensor out(Shape{s.c / 4, s.h * 2, s.w * 2});
    for (int c = 0; c < s.c / 4; ++c)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                for (int y = 0; y < s.h; ++y)
                    for (int x = 0; x < s.w; ++x)
                        out.at(c, 2 * y + dy, 2 * x + dx) = in.at(4 * c + 2 * dy + dx, y, x);
    return out;
}

inline Var squeeze_var(Tape& t, Var a) {
    const RealTensor& in = t.value(a);
    const Shape s = in.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "squeeze: odd spatial extent");
    RealTensor out(Shape{s.c * 4, s.h / 2, s.w / 2});
    for (int c = 0; c < s.c; ++c)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                for (int y = 0; y < s.h / 2; ++y)
                    for (int x = 0; x < s.w / 2; ++x)
                        out.at(4 * c + 2 * dy + dx, y, x) = in.at(c, 2 * y + dy, 2 * x + dx);
    return t.push(std::move(out), [a, s](Tape& tp, const Tape::Node& n) {
        RealTensor& g = tp.grad_mut(a);
        for (int c = 0; c < s.c; ++c)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int y = 0; y < s.h / 2; ++y)
                        for (int x = 0; x < s.w / 2; ++x)
                            g.at(c, 2 * y + dy, 2 * x + dx) +=
                                n.grad.at(4 * c + 2 * dy + dx, y, x);
    });
}

// ---- Fixed channel permutation ----------------------------------------------

struct Permutation {
    std::vector<int> fwd;  // out channel i = in channel fwd[i]
    std::vector<int> inv;

    static Permutation identity(int n) {
        Permutation p;
        p.fwd.resize(static_cast<std::size_t>(n));
        std::iota(p.fwd.begin(), p.fwd.end(), 0);
        p.inv = p.fwd;
        return p;
    }

    // Fisher-Yates on explicit uniforms; drawn once at model construction and
    // kept fixed (and serialized) afterwards.
    static Permutation random(int n, Rng& rng) {
        Permutation p = identity(n);
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
            std::swap(p.fwd[static_cast<std::size_t>(i)], p.fwd[static_cast<std::size_t>(j)]);
        }
        p.rebuild_inverse();
        return p;
    }

    static Permutation from_fwd(std::vector<int> fwd) {
        Permutation p;
        p.fwd = std::move(fwd);
        std::vector<bool> seen(p.fwd.size(), false);
        for (int v : p.fwd) {
            require(v >= 0 && v < static_cast<int>(p.fwd.size()) && !seen[static_cast<std::size_t>(v)],
                    "permutation: not a bijection");
            seen[static_cast<std::size_t>(v)] = true;
        }
        p.rebuild_inverse();
        return p;
    }

    void rebuild_inverse() {
        inv.assign(fwd.size(), 0);
        for (std::size_t i = 0; i < fwd.size(); ++i)
            inv[static_cast<std::size_t>(fwd[i])] = static_cast<int>(i);
    }

    int size() const { return static_cast<int>(fwd.size()); }

    IntTensor apply(const IntTensor& in, bool inverse = false) const {
        require(in.shape().c == size(), "permute: length mismatch");
        const std::vector<int>& p = inverse ? inv : fwd;
        const int hw = in.shape().h * in.shape().w;
        IntTensor out(in.shape());
        for (int c = 0; c < size(); ++c)
            std::copy(in.data() + p[static_cast<std::size_t>(c)] * hw,
                      in.data() + (p[static_cast<std::size_t>(c)] + 1) * hw,
                      out.data() + c * hw);
        return out;
    }

    Var apply(Tape& t, Var a) const { return permute_c(t, a, fwd); }
};

// ---- Integer discrete coupling ----------------------------------------------
//
// x = [x_a, x_b] along channels, x_a the first ceil(split * C). Forward copies
// x_a and translates: z_b = x_b + round(t(x_a)); the inverse subtracts the
// same rounded translation, so the round trip is exact whatever t outputs.
// The subnetwork sees x_a/256 and its output is scaled back by the head gain.

struct CouplingLayer {
    int c_in = 0, c_a = 0, c_b = 0;
    DenseBlock net;

    CouplingLayer() = default;
    CouplingLayer(const std::string& name, int channels, int depth, int growth, Rng& rng,
                  double split = 0.75)
        : c_in(channels),
          c_a(std::min(channels - 1,
                       static_cast<int>(std::ceil(split * static_cast<double>(channels))))),
          c_b(channels - c_a),
          net(name + ".t", c_a, c_b, depth, growth, rng) {
        require(channels >= 2, "coupling: needs at least two channels");
    }

    RealTensor translations(const IntTensor& xa) const {
        return net.infer(to_real(xa, 1.0 / 256.0));
    }

    IntTensor forward(const IntTensor& x) const { return translate(x, +1); }
    IntTensor inverse(const IntTensor& z) const { return translate(z, -1); }

    Var forward(Tape& t, Var x, Rounding mode) {
        Var xa = narrow_c(t, x, 0, c_a);
        Var xb = narrow_c(t, x, c_a, c_b);
        Var traw = net.apply(t, scale(t, xa, 1.0 / 256.0));
        Var tr = scale(t, traw, kHeadGain);
        if (mode == Rounding::Ste) tr = round_ste(t, tr);
        return concat_c(t, xa, add(t, xb, tr));
    }

    void collect(std::vector<Parameter*>& out) { net.collect(out); }

private:
    IntTensor translate(const IntTensor& x, int sign) const {
        require(x.shape().c == c_in, "coupling: channel mismatch");
        IntTensor xa(Shape{c_a, x.shape().h, x.shape().w});
        const int hw = x.shape().h * x.shape().w;
        std::copy(x.data(), x.data() + c_a * hw, xa.data());
        const RealTensor traw = translations(xa);
        IntTensor out = x;
        for (int i = 0; i < c_b * hw; ++i) {
            const std::int32_t r =
                detail::round_to_i32(kHeadGain * traw[i], "coupling");
            out[c_a * hw + i] = x[c_a * hw + i] + sign * r;
        }
        return out;
    }
};

// ---- Lower triangular coupling ----------------------------------------------
//
// z_b = x_b + round(t(x_a) + L(x_a) x_b) with L strictly lower triangular per
// spatial location; exactly one rounding per transformed element. Inverted by
// forward substitution channel by channel. L entries are packed row-major:
// (i,j), j<i at packed index i*(i-1)/2 + j.

struct LowerTriangularCoupling {
    int c_in = 0, c_a = 0, c_b = 0, l_count = 0;
    DenseBlock t_net;
    DenseBlock l_net;  // absent when c_b < 2 (degenerates to plain coupling)

    LowerTriangularCoupling() = default;
    LowerTriangularCoupling(const std::string& name, int channels, int depth, int growth,
                            Rng& rng, double split = 0.75)
        : c_in(channels),
          c_a(std::min(channels - 1,
                       static_cast<int>(std::ceil(split * static_cast<double>(channels))))),
          c_b(channels - c_a),
          l_count(c_b * (c_b - 1) / 2),
          t_net(name + ".t", c_a, c_b, depth, growth, rng) {
        require(channels >= 2, "coupling: needs at least two channels");
        if (l_count > 0) l_net = DenseBlock(name + ".L", c_a, l_count, depth, growth, rng);
    }

    IntTensor forward(const IntTensor& x) const {
        require(x.shape().c == c_in, "ltc: channel mismatch");
        const int H = x.shape().h, W = x.shape().w, hw = H * W;
        IntTensor xa(Shape{c_a, H, W});
        std::copy(x.data(), x.data() + c_a * hw, xa.data());
        const RealTensor traw = t_net.infer(to_real(xa, 1.0 / 256.0));
        const RealTensor lent = l_entries(xa);
        IntTensor out = x;
        for (int i = 0; i < c_b; ++i) {
            for (int p = 0; p < hw; ++p) {
                double sum = kHeadGain * traw[i * hw + p];
                for (int j = 0; j < i; ++j)
                    sum += lent[(i * (i - 1) / 2 + j) * hw + p] *
                           static_cast<double>(x[(c_a + j) * hw + p]);
                out[(c_a + i) * hw + p] =
                    x[(c_a + i) * hw + p] + detail::round_to_i32(sum, "ltc");
            }
        }
        return out;
    }

    IntTensor inverse(const IntTensor& z) const {
        require(z.shape().c == c_in, "ltc: channel mismatch");
        const int H = z.shape().h, W = z.shape().w, hw = H * W;
        IntTensor xa(Shape{c_a, H, W});
        std::copy(z.data(), z.data() + c_a * hw, xa.data());
        const RealTensor traw = t_net.infer(to_real(xa, 1.0 / 256.0));
        const RealTensor lent = l_entries(xa);
        IntTensor out = z;
        // Forward substitution: channel i only needs already-recovered j < i,
        // all spatial positions in parallel.
        for (int i = 0; i < c_b; ++i) {
            for (int p = 0; p < hw; ++p) {
                double sum = kHeadGain * traw[i * hw + p];
                for (int j = 0; j < i; ++j)
                    sum += lent[(i * (i - 1) / 2 + j) * hw + p] *
                           static_cast<double>(out[(c_a + j) * hw + p]);
                out[(c_a + i) * hw + p] =
                    z[(c_a + i) * hw + p] - detail::round_to_i32(sum, "ltc");
            }
        }
        return out;
    }

    Var forward(Tape& t, Var x, Rounding mode) {
        Var xa = narrow_c(t, x, 0, c_a);
        Var scaled = scale(t, xa, 1.0 / 256.0);
        Var traw = t_net.apply(t, scaled);
        Var tr = scale(t, traw, kHeadGain);
        Var lv = l_count > 0 ? l_net.apply(t, scaled) : Var{};
        // Row i: t_i + sum_{j<i} L_ij * x_b[j], summed before the single rounding.
        std::vector<Var> rows;
        rows.reserve(static_cast<std::size_t>(c_b));
        for (int i = 0; i < c_b; ++i) {
            Var row = narrow_c(t, tr, i, 1);
            for (int j = 0; j < i; ++j) {
                Var lij = narrow_c(t, lv, i * (i - 1) / 2 + j, 1);
                Var xbj = narrow_c(t, x, c_a + j, 1);
                row = add(t, row, mul(t, lij, xbj));
            }
            rows.push_back(row);
        }
        Var all = rows[0];
        for (int i = 1; i < c_b; ++i) all = concat_c(t, all, rows[static_cast<std::size_t>(i)]);
        if (mode == Rounding::Ste) all = round_ste(t, all);
        Var xb = narrow_c(t, x, c_a, c_b);
        return concat_c(t, xa, add(t, xb, all));
    }

    void collect(std::vector<Parameter*>& out) {
        t_net.collect(out);
        if (l_count > 0) l_net.collect(out);
    }

private:
    RealTensor l_entries(const IntTensor& xa) const {
        if (l_count == 0) return RealTensor(Shape{0, xa.shape().h, xa.shape().w});
        return l_net.infer(to_real(xa, 1.0 / 256.0));
    }
};

// ---- Factor-out split --------------------------------------------------------
//
// Emits the first `c_out` channels as a latent and keeps the rest; the
// conditioner maps the kept channels to (mu_raw, s_raw) for the emitted ones.

struct FactorOutSplit {
    int c_in = 0, c_out = 0, c_keep = 0;
    DenseBlock conditioner;

    FactorOutSplit() = default;
    FactorOutSplit(const std::string& name, int channels, int depth, int growth, Rng& rng,
                   double proportion = 0.5)
        : c_in(channels),
          c_out(static_cast<int>(std::round(proportion * static_cast<double>(channels)))),
          c_keep(channels - c_out),
          conditioner(name + ".cond", c_keep, 2 * c_out, depth, growth, rng) {
        require(std::abs(proportion * static_cast<double>(channels) -
                         static_cast<double>(c_out)) < 1e-9,
                "factor_split: channel count not divisible by proportion");
        require(c_out >= 1 && c_keep >= 1, "factor_split: degenerate partition");
    }

    std::pair<IntTensor, IntTensor> split(const IntTensor& y) const {
        require(y.shape().c == c_in, "factor_split: channel mismatch");
        const int hw = y.shape().h * y.shape().w;
        IntTensor z(Shape{c_out, y.shape().h, y.shape().w});
        IntTensor keep(Shape{c_keep, y.shape().h, y.shape().w});
        std::copy(y.data(), y.data() + c_out * hw, z.data());
        std::copy(y.data() + c_out * hw, y.data() + c_in * hw, keep.data());
        return {std::move(z), std::move(keep)};
    }

    IntTensor merge(const IntTensor& z, const IntTensor& keep) const {
        require(z.shape().c == c_out && keep.shape().c == c_keep &&
                    z.shape().h == keep.shape().h && z.shape().w == keep.shape().w,
                "factor_merge: shape mismatch");
        const int hw = z.shape().h * z.shape().w;
        IntTensor y(Shape{c_in, z.shape().h, z.shape().w});
        std::copy(z.data(), z.data() + c_out * hw, y.data());
        std::copy(keep.data(), keep.data() + c_keep * hw, y.data() + c_out * hw);
        return y;
    }

    // Per-dimension conditional parameters for the emitted latent given the
    // kept channels. Encoder and decoder both come through here, double
    // precision, fixed order — identical bits on identical y.
    std::vector<DLogisticParams> conditional_params(const IntTensor& keep) const {
        require(keep.shape().c == c_keep, "conditional_params: shape mismatch");
        const RealTensor raw = conditioner.infer(to_real(keep, 1.0 / 256.0));
        const int n = c_out * keep.shape().h * keep.shape().w;
        std::vector<DLogisticParams> out(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            out[static_cast<std::size_t>(i)] = {mean_from_raw(raw[i]),
                                                scale_from_raw(raw[n + i])};
        return out;
    }

    void collect(std::vector<Parameter*>& out) { conditioner.collect(out); }
};

}  // namespace idf
