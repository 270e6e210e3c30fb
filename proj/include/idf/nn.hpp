#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/common.hpp"
#include "idf/tensor.hpp"

namespace idf {

namespace kernels {

namespace detail_conv {

// Zero-pads every channel by one pixel on each side into a reusable scratch
// buffer; the 3x3 loops then run branch-free over contiguous rows.
inline void pad1(const double* src, int ch, int H, int W, std::vector<double>& dst) {
    const int PH = H + 2, PW = W + 2;
    dst.assign(static_cast<std::size_t>(ch) * PH * PW, 0.0);
    for (int c = 0; c < ch; ++c)
        for (int y = 0; y < H; ++y)
            std::copy(src + (c * H + y) * W, src + (c * H + y + 1) * W,
                      dst.data() + (c * PH + y + 1) * PW + 1);
}

}  // namespace detail_conv

// Direct same-padded 2D convolution, kernel size 1 or 3. Weight layout is
// (cout, cin, k*k) in a rank-3 tensor, bias is (cout,1,1). Accumulation order
// is fixed (bias, then cin-major, ky, kx) so training-time and inference-time
// evaluations agree bitwise.
inline RealTensor conv2d_fwd(const RealTensor& in, const RealTensor& w, const RealTensor& b,
                             int k) {
    const int cin = in.shape().c, H = in.shape().h, W = in.shape().w;
    const int cout = w.shape().c;
    require(w.shape().h == cin, "conv2d: channel mismatch between input and kernel");
    require(w.shape().w == k * k && (k == 1 || k == 3), "conv2d: kernel size");
    RealTensor out(Shape{cout, H, W});
    const int hw = H * W;
    if (k == 1) {
        for (int co = 0; co < cout; ++co) {
            double* op = out.data() + co * hw;
            const double bias = b[co];
            for (int i = 0; i < hw; ++i) op[i] = bias;
            const double* wrow = w.data() + co * cin;
            for (int ci = 0; ci < cin; ++ci) {
                const double wv = wrow[ci];
                const double* ip = in.data() + ci * hw;
                for (int i = 0; i < hw; ++i) op[i] += wv * ip[i];
            }
        }
        return out;
    }
    thread_local std::vector<double> padded;
    detail_conv::pad1(in.data(), cin, H, W, padded);
    const int PW = W + 2, PH = H + 2;
    for (int co = 0; co < cout; ++co) {
        double* op = out.data() + co * hw;
        const double bias = b[co];
        for (int i = 0; i < hw; ++i) op[i] = bias;
        for (int ci = 0; ci < cin; ++ci) {
            const double* pp = padded.data() + ci * PH * PW;
            const double* wp = w.data() + (co * cin + ci) * 9;
            const double w0 = wp[0], w1 = wp[1], w2 = wp[2];
            const double w3 = wp[3], w4 = wp[4], w5 = wp[5];
            const double w6 = wp[6], w7 = wp[7], w8 = wp[8];
            for (int y = 0; y < H; ++y) {
                const double* __restrict r0 = pp + y * PW;
                const double* __restrict r1 = r0 + PW;
                const double* __restrict r2 = r1 + PW;
                double* __restrict orow = op + y * W;
                for (int x = 0; x < W; ++x)
                    orow[x] += w0 * r0[x] + w1 * r0[x + 1] + w2 * r0[x + 2] +
                               w3 * r1[x] + w4 * r1[x + 1] + w5 * r1[x + 2] +
                               w6 * r2[x] + w7 * r2[x + 1] + w8 * r2[x + 2];
            }
        }
    }
    return out;
}

inline void conv2d_bwd(const RealTensor& in, const RealTensor& w, int k, const RealTensor& gout,
                       RealTensor& gin, RealTensor& gw, RealTensor& gb) {
    const int cin = in.shape().c, H = in.shape().h, W = in.shape().w;
    const int cout = w.shape().c;
    const int hw = H * W;
    if (k == 1) {
        for (int co = 0; co < cout; ++co) {
            const double* gp = gout.data() + co * hw;
            double acc = 0.0;
            for (int i = 0; i < hw; ++i) acc += gp[i];
            gb[co] += acc;
            const double* wrow = w.data() + co * cin;
            double* gwrow = gw.data() + co * cin;
            for (int ci = 0; ci < cin; ++ci) {
                const double wv = wrow[ci];
                const double* ip = in.data() + ci * hw;
                double* gip = gin.data() + ci * hw;
                double wacc = 0.0;
                for (int i = 0; i < hw; ++i) {
                    gip[i] += wv * gp[i];
                    wacc += ip[i] * gp[i];
                }
                gwrow[ci] += wacc;
            }
        }
        return;
    }
    // 3x3: pad both the input (for weight grads) and the output grad (for
    // input grads) so every inner loop runs over full rows.
    thread_local std::vector<double> in_pad, g_pad;
    detail_conv::pad1(in.data(), cin, H, W, in_pad);
    detail_conv::pad1(gout.data(), cout, H, W, g_pad);
    const int PW = W + 2, PH = H + 2;
    for (int co = 0; co < cout; ++co) {
        const double* gp = gout.data() + co * hw;
        const double* gpp = g_pad.data() + co * PH * PW;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += gp[i];
        gb[co] += acc;
        for (int ci = 0; ci < cin; ++ci) {
            const double* ipp = in_pad.data() + ci * PH * PW;
            double* gip = gin.data() + ci * hw;
            const double* wp = w.data() + (co * cin + ci) * 9;
            double* gwp = gw.data() + (co * cin + ci) * 9;
            // gout[y', x'] feeds gin[y'+ky-1, x'+kx-1]; with the +1 pad
            // offset that correlates gin against gpad with flipped weights.
            const double w0 = wp[0], w1 = wp[1], w2 = wp[2];
            const double w3 = wp[3], w4 = wp[4], w5 = wp[5];
            const double w6 = wp[6], w7 = wp[7], w8 = wp[8];
            for (int y = 0; y < H; ++y) {
                const double* __restrict g0 = gpp + y * PW;
                const double* __restrict g1 = g0 + PW;
                const double* __restrict g2 = g1 + PW;
                double* __restrict gi = gip + y * W;
                for (int x = 0; x < W; ++x)
                    gi[x] += w8 * g0[x] + w7 * g0[x + 1] + w6 * g0[x + 2] +
                             w5 * g1[x] + w4 * g1[x + 1] + w3 * g1[x + 2] +
                             w2 * g2[x] + w1 * g2[x + 1] + w0 * g2[x + 2];
            }
            double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
            for (int y = 0; y < H; ++y) {
                const double* __restrict r0 = ipp + y * PW;
                const double* __restrict r1 = r0 + PW;
                const double* __restrict r2 = r1 + PW;
                const double* __restrict gr = gp + y * W;
                for (int x = 0; x < W; ++x) {
                    const double g = gr[x];
                    a0 += r0[x] * g;
                    a1 += r0[x + 1] * g;
                    a2 += r0[x + 2] * g;
                    a3 += r1[x] * g;
                    a4 += r1[x + 1] * g;
                    a5 += r1[x + 2] * g;
                    a6 += r2[x] * g;
                    a7 += r2[x + 1] * g;
                    a8 += r2[x + 2] * g;
                }
            }
            gwp[0] += a0;
            gwp[1] += a1;
            gwp[2] += a2;
            gwp[3] += a3;
            gwp[4] += a4;
            gwp[5] += a5;
            gwp[6] += a6;
            gwp[7] += a7;
            gwp[8] += a8;
        }
    }
}

inline RealTensor relu_fwd(const RealTensor& in) {
    RealTensor out = in;
    for (int i = 0; i < out.size(); ++i) out[i] = relu(out[i]);
    return out;
}

}  // namespace kernels

// Same-padded convolution layer with owned parameters.
struct Conv2d {
    int cin = 0, cout = 0, k = 1;
    Parameter weight;
    Parameter bias;

    Conv2d() = default;
    Conv2d(const std::string& name, int cin_, int cout_, int k_)
        : cin(cin_),
          cout(cout_),
          k(k_),
          weight(name + ".w", RealTensor(Shape{cout_, cin_, k_ * k_})),
          bias(name + ".b", RealTensor(Shape{cout_, 1, 1})) {}

    void init_kaiming(Rng& rng) {
        const double std = std::sqrt(2.0 / (cin * k * k));
        for (int i = 0; i < weight.value.size(); ++i) weight.value[i] = std * normal01(rng);
        bias.value.fill(0.0);
    }
    void init_zero() {
        weight.value.fill(0.0);
        bias.value.fill(0.0);
    }

    RealTensor infer(const RealTensor& in) const {
        return kernels::conv2d_fwd(in, weight.value, bias.value, k);
    }

    Var apply(Tape& t, Var x) {
        RealTensor out = kernels::conv2d_fwd(t.value(x), weight.value, bias.value, k);
        check_finite(out, "conv2d");
        Parameter* wptr = &weight;
        Parameter* bptr = &bias;
        int kk = k;
        return t.push(std::move(out), [x, wptr, bptr, kk](Tape& tp, const Tape::Node& n) {
            kernels::conv2d_bwd(tp.value(x), wptr->value, kk, n.grad, tp.grad_mut(x), wptr->grad,
                                bptr->grad);
        });
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

// DenseNet-style block: `depth` layers of Conv1x1 -> ReLU -> Conv3x3 -> ReLU,
// each appending `growth` feature channels to the running stack, then a 1x1
// projection to the requested output width. No normalization layers. The
// projection is zero-initialized so every subnetwork starts out emitting
// exactly zero.
struct DenseBlock {
    int cin = 0, cout = 0, depth = 0, growth = 0;
    std::vector<Conv2d> bottleneck;  // 1x1, stack -> growth
    std::vector<Conv2d> spatial;     // 3x3, growth -> growth
    Conv2d proj;                     // 1x1, stack -> cout

    DenseBlock() = default;
    DenseBlock(const std::string& name, int cin_, int cout_, int depth_, int growth_, Rng& rng)
        : cin(cin_), cout(cout_), depth(depth_), growth(growth_) {
        require(depth_ >= 1, "dense_block: depth must be >= 1");
        int stack = cin_;
        for (int d = 0; d < depth_; ++d) {
            bottleneck.emplace_back(name + ".l" + std::to_string(d) + ".c1", stack, growth_, 1);
            spatial.emplace_back(name + ".l" + std::to_string(d) + ".c3", growth_, growth_, 3);
            bottleneck.back().init_kaiming(rng);
            spatial.back().init_kaiming(rng);
            stack += growth_;
        }
        proj = Conv2d(name + ".proj", stack, cout_, 1);
        proj.init_zero();
    }

    RealTensor infer(const RealTensor& in) const {
        RealTensor cur = in;
        for (int d = 0; d < depth; ++d) {
            RealTensor a = kernels::relu_fwd(bottleneck[d].infer(cur));
            RealTensor b = kernels::relu_fwd(spatial[d].infer(a));
            RealTensor merged(Shape{cur.shape().c + b.shape().c, cur.shape().h, cur.shape().w});
            std::copy(cur.data(), cur.data() + cur.size(), merged.data());
            std::copy(b.data(), b.data() + b.size(), merged.data() + cur.size());
            cur = std::move(merged);
        }
        return proj.infer(cur);
    }

    Var apply(Tape& t, Var x) {
        Var cur = x;
        for (int d = 0; d < depth; ++d) {
            Var a = relu_(t, bottleneck[d].apply(t, cur));
            Var b = relu_(t, spatial[d].apply(t, a));
            cur = concat_c(t, cur, b);
        }
        return proj.apply(t, cur);
    }

    void collect(std::vector<Parameter*>& out) {
        for (int d = 0; d < depth; ++d) {
            bottleneck[d].collect(out);
            spatial[d].collect(out);
        }
        proj.collect(out);
    }
};

}  // namespace idf
