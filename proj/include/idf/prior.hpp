#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/common.hpp"
#include "idf/rans.hpp"
#include "idf/tensor.hpp"

namespace idf {

// Scale floor; s = softplus(raw) + kScaleMin keeps every logistic proper.
inline constexpr double kScaleMin = 1e-3;

// Subnetwork heads whose outputs live on the integer grid (translations t,
// prior means mu, and the softplus argument for scales s) carry this fixed
// output gain. It makes the raw-grid model equivalent to one trained on
// values/256, which is what standard initializations and step sizes expect.
// Mixture logits and triangular matrix entries are dimensionless: no gain.
inline constexpr double kHeadGain = 256.0;

inline double mean_from_raw(double raw) { return kHeadGain * raw; }
inline double scale_from_raw(double raw) {
    return kernels::softplus(kHeadGain * raw) + kScaleMin;
}

// log sigma(x), stable on both tails.
inline double log_sigmoid(double x) {
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// log(1 - exp(-d)) for d > 0.
inline double log1mexp(double d) {
    return d > 0.6931471805599453 ? std::log1p(-std::exp(-d)) : std::log(-std::expm1(-d));
}

struct DLogisticParams {
    double mu = 0.0;  // location, integer-grid units
    double s = 1.0;   // scale, > 0
};

// Probability mass the Logistic(mu, s) density assigns to [z-1/2, z+1/2],
// i.e. sigma((z+1/2-mu)/s) - sigma((z-1/2-mu)/s), evaluated in log space:
//
//   log pmf = log(1 - e^(-1/s)) + log sigma(a) + log sigma(-b),
//   a = (z - mu + 1/2)/s, b = (z - mu - 1/2)/s.
//
// This form never returns -inf for finite arguments, which the raw CDF
// difference does as soon as both CDFs round to 1.
inline double dlogistic_logpmf(double z, double mu, double s) {
    const double a = (z - mu + 0.5) / s;
    const double b = (z - mu - 0.5) / s;
    // Sigmoid terms grouped first: mirroring z about an integer mu swaps a
    // and -b exactly, so this order makes the pmf bitwise symmetric.
    return log1mexp(1.0 / s) + (log_sigmoid(a) + log_sigmoid(-b));
}
inline double dlogistic_logpmf(double z, const DLogisticParams& p) {
    return dlogistic_logpmf(z, p.mu, p.s);
}

// log pmf and its partials. The density/mass ratios r_a, r_b are formed in
// log space so the expression stays finite arbitrarily far into the tails.
struct DLogGrad {
    double lp, dz, dmu, ds;
};

inline DLogGrad dlogistic_grad(double z, double mu, double s) {
    const double a = (z - mu + 0.5) / s;
    const double b = (z - mu - 0.5) / s;
    const double la = log_sigmoid(a), lna = log_sigmoid(-a);
    const double lb = log_sigmoid(b), lnb = log_sigmoid(-b);
    const double lp = log1mexp(1.0 / s) + (la + lnb);
    const double ra = std::exp(la + lna - lp);  // sigma'(a) / pmf
    const double rb = std::exp(lb + lnb - lp);  // sigma'(b) / pmf
    const double dmu = (rb - ra) / s;
    const double ds = (b * rb - a * ra) / s;
    return {lp, -dmu, dmu, ds};
}

struct MixtureParams {
    std::vector<double> log_pi;  // normalized: logsumexp(log_pi) == 0
    std::vector<double> mu;
    std::vector<double> s;

    int K() const { return static_cast<int>(mu.size()); }
};

// Normalize raw logits into log probabilities. A single component maps to
// log_pi = {0} exactly, which keeps the K=1 mixture bitwise equal to the
// plain discretized logistic.
inline std::vector<double> log_softmax(const double* logits, int K) {
    double m = logits[0];
    for (int k = 1; k < K; ++k) m = std::max(m, logits[k]);
    double acc = 0.0;
    for (int k = 0; k < K; ++k) acc += std::exp(logits[k] - m);
    const double lse = m + std::log(acc);
    std::vector<double> out(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) out[k] = logits[k] - lse;
    return out;
}

inline MixtureParams mixture_from_raw(const double* pi_raw, const double* mu_raw,
                                      const double* s_raw, int K) {
    MixtureParams p;
    p.log_pi = log_softmax(pi_raw, K);
    p.mu.resize(static_cast<std::size_t>(K));
    p.s.resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        p.mu[k] = mean_from_raw(mu_raw[k]);
        p.s[k] = scale_from_raw(s_raw[k]);
    }
    return p;
}

inline double mixture_logpmf(double z, const MixtureParams& p) {
    const int K = p.K();
    require(K >= 1 && K <= 64, "mixture: K out of range");
    double vals[64];
    double m = -1e300;
    for (int k = 0; k < K; ++k) {
        vals[k] = p.log_pi[k] + dlogistic_logpmf(z, p.mu[k], p.s[k]);
        m = std::max(m, vals[k]);
    }
    double acc = 0.0;
    for (int k = 0; k < K; ++k) acc += std::exp(vals[k] - m);
    return m + std::log(acc);
}

// ---- Sampling ---------------------------------------------------------------

inline double uniform_open01(Rng& rng) {
    double u = uniform01(rng);
    while (u <= 0.0) u = uniform01(rng);
    return u;
}

// Inverse-CDF sample of the continuous logistic, then the covering integer
// bin [z-1/2, z+1/2].
inline std::int32_t sample_dlogistic(const DLogisticParams& p, Rng& rng) {
    const double u = uniform_open01(rng);
    const double x = p.mu + p.s * std::log(u / (1.0 - u));
    return static_cast<std::int32_t>(std::llround(x));
}

inline std::int32_t sample_mixture(const MixtureParams& p, Rng& rng) {
    const double u = uniform_open01(rng);
    double acc = 0.0;
    int pick = p.K() - 1;
    for (int k = 0; k < p.K(); ++k) {
        acc += std::exp(p.log_pi[k]);
        if (u < acc) {
            pick = k;
            break;
        }
    }
    return sample_dlogistic(DLogisticParams{p.mu[pick], p.s[pick]}, rng);
}

// ---- Quantization for the entropy coder ------------------------------------

// Integer frequency table over a window of the integer line: l_s >= 1 per
// bin, sum l_s = m = 2^precision exactly, cumulative offsets alongside.
struct QuantizedPmf {
    std::int32_t z_lo = 0, z_hi = 0;  // inclusive support window
    int precision = 0;
    std::vector<std::uint32_t> freq;
    std::vector<std::uint32_t> cum;  // size freq.size()+1, cum.back() == m

    int bins() const { return static_cast<int>(freq.size()); }
    bool contains(std::int32_t z) const { return z >= z_lo && z <= z_hi; }

    rans::SymbolSpec spec_for(std::int32_t z) const {
        const int i = static_cast<int>(z - z_lo);
        return {freq[i], cum[i]};
    }

    // Symbol index owning a slot in [0, m).
    int find(std::uint32_t slot) const {
        const int i = static_cast<int>(std::upper_bound(cum.begin(), cum.end(), slot) -
                                       cum.begin()) - 1;
        return i;
    }
};

namespace detail {

inline constexpr int kWindowMin = 16;
inline constexpr double kWindowTail = 16.0;
inline constexpr std::int32_t kLatentBound = 1 << 20;

// Window half-width. The k_tail*s term keeps out-of-window mass negligible
// (~e^-16); the ln(2m)*s cap drops bins whose true mass is below ~1/(2m),
// which a >=1-count table could only misprice. Both matter: without the cap
// the 1-count floor re-assigns enough mass at large s to push quantization
// KL past its budget.
inline int window_halfwidth(double s_max, int precision) {
    const double m = static_cast<double>(1u << precision);
    const double span = s_max * std::min(kWindowTail, std::log(2.0 * m));
    const double w = std::max(static_cast<double>(kWindowMin), std::ceil(span));
    if (!(w <= static_cast<double>(kLatentBound)))
        throw error("quantize_pmf: window exceeds latent bound (pathological scale)");
    return static_cast<int>(w);
}

// Largest-remainder apportionment of m among bins proportional to mass,
// with a 1-count floor. Deterministic: ties break on lower index, floor
// deficits steal from the current largest bin.
inline void apportion(const std::vector<double>& mass, int precision,
                      std::vector<std::uint32_t>& freq) {
    const int n = static_cast<int>(mass.size());
    const std::uint32_t m = 1u << precision;
    if (n > static_cast<int>(m))
        throw error("quantize_pmf: more bins than frequency units (raise precision)");
    double total = 0.0;
    for (double v : mass) total += v;
    freq.assign(static_cast<std::size_t>(n), 0);
    std::vector<double> rem(static_cast<std::size_t>(n));
    std::uint64_t assigned = 0;
    for (int i = 0; i < n; ++i) {
        const double q = mass[static_cast<std::size_t>(i)] / total * static_cast<double>(m);
        const double f = std::floor(q);
        freq[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(f);
        rem[static_cast<std::size_t>(i)] = q - f;
        assigned += static_cast<std::uint64_t>(f);
    }
    std::int64_t deficit = static_cast<std::int64_t>(m) - static_cast<std::int64_t>(assigned);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)];
    });
    for (int j = 0; deficit > 0 && j < n; ++j, --deficit)
        ++freq[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
    // Float drift can only leave deficit in [0, n]; anything else is a bug.
    if (deficit != 0) throw error("quantize_pmf: apportionment failed");
    for (int i = 0; i < n; ++i) {
        if (freq[static_cast<std::size_t>(i)] != 0) continue;
        int big = 0;
        for (int j = 1; j < n; ++j)
            if (freq[static_cast<std::size_t>(j)] > freq[static_cast<std::size_t>(big)]) big = j;
        --freq[static_cast<std::size_t>(big)];
        freq[static_cast<std::size_t>(i)] = 1;
    }
}

inline QuantizedPmf build_pmf(std::int32_t center, double s_max, int precision,
                              const std::function<double(double)>& cdf) {
    if (precision < 8 || precision > 24) throw error("quantize_pmf: precision out of [8,24]");
    const int W = window_halfwidth(s_max, precision);
    QuantizedPmf q;
    q.precision = precision;
    q.z_lo = center - W;
    q.z_hi = center + W;
    const int n = 2 * W + 1;
    std::vector<double> mass(static_cast<std::size_t>(n));
    // Edge bins absorb the entire tail CDF mass on their side.
    for (int i = 0; i < n; ++i) {
        const double z = static_cast<double>(q.z_lo + i);
        const double hi = (i == n - 1) ? 1.0 : cdf(z + 0.5);
        const double lo = (i == 0) ? 0.0 : cdf(z - 0.5);
        mass[static_cast<std::size_t>(i)] = std::max(hi - lo, 0.0);
    }
    apportion(mass, precision, q.freq);
    q.cum.resize(static_cast<std::size_t>(n) + 1);
    q.cum[0] = 0;
    for (int i = 0; i < n; ++i) q.cum[static_cast<std::size_t>(i) + 1] =
        q.cum[static_cast<std::size_t>(i)] + q.freq[static_cast<std::size_t>(i)];
    return q;
}

}  // namespace detail

inline QuantizedPmf quantize_pmf(const DLogisticParams& p, int precision) {
    const std::int32_t center = static_cast<std::int32_t>(std::llround(p.mu));
    return detail::build_pmf(center, p.s, precision, [&](double x) {
        return kernels::sigmoid((x - p.mu) / p.s);
    });
}

inline QuantizedPmf quantize_pmf(const MixtureParams& p, int precision) {
    double mean = 0.0, s_max = 0.0;
    for (int k = 0; k < p.K(); ++k) {
        mean += std::exp(p.log_pi[k]) * p.mu[k];
        s_max = std::max(s_max, p.s[k]);
    }
    const std::int32_t center = static_cast<std::int32_t>(std::llround(mean));
    return detail::build_pmf(center, s_max, precision, [&](double x) {
        double acc = 0.0;
        for (int k = 0; k < p.K(); ++k)
            acc += std::exp(p.log_pi[k]) * kernels::sigmoid((x - p.mu[k]) / p.s[k]);
        return acc;
    });
}

// ---- Fused tape ops for the training loss -----------------------------------

// Sum over all elements of -log DLogistic(z_i | mu_i, s_i) in nats, with
// mu = gain*mu_raw and s = softplus(gain*s_raw) + s_min applied inside.
// Gradients flow into z (the latents are functions of upstream couplings),
// mu_raw and s_raw.
inline Var dlogistic_nll(Tape& t, Var z, Var mu_raw, Var s_raw) {
    const RealTensor& vz = t.value(z);
    const RealTensor& vm = t.value(mu_raw);
    const RealTensor& vs = t.value(s_raw);
    require(vz.shape() == vm.shape() && vz.shape() == vs.shape(), "dlogistic_nll: shape mismatch");
    double acc = 0.0;
    for (int i = 0; i < vz.size(); ++i)
        acc -= dlogistic_logpmf(vz[i], mean_from_raw(vm[i]), scale_from_raw(vs[i]));
    check_finite(RealTensor::scalar(acc), "dlogistic_nll");
    return t.push(RealTensor::scalar(acc), [z, mu_raw, s_raw](Tape& tp, const Tape::Node& n) {
        const double g = n.grad[0];
        const RealTensor& vz = tp.value(z);
        const RealTensor& vm = tp.value(mu_raw);
        const RealTensor& vs = tp.value(s_raw);
        RealTensor& gz = tp.grad_mut(z);
        RealTensor& gm = tp.grad_mut(mu_raw);
        RealTensor& gs = tp.grad_mut(s_raw);
        for (int i = 0; i < vz.size(); ++i) {
            const DLogGrad d = dlogistic_grad(vz[i], mean_from_raw(vm[i]), scale_from_raw(vs[i]));
            gz[i] -= g * d.dz;
            gm[i] -= g * d.dmu * kHeadGain;
            gs[i] -= g * d.ds * kernels::sigmoid(kHeadGain * vs[i]) * kHeadGain;
        }
    });
}

// Sum over all elements of -log of a per-channel K-component mixture, nats.
// pi_raw/mu_raw/s_raw have shape (C*K,1,1) indexed c*K+k; z has C channels.
inline Var mixture_nll(Tape& t, Var z, Var pi_raw, Var mu_raw, Var s_raw, int K) {
    const RealTensor& vz = t.value(z);
    const RealTensor& vp = t.value(pi_raw);
    require(K >= 1 && K <= 64, "mixture_nll: K out of range");
    require(vp.shape().c == vz.shape().c * K, "mixture_nll: per-channel parameter count");
    require(t.value(mu_raw).shape() == vp.shape() && t.value(s_raw).shape() == vp.shape(),
            "mixture_nll: parameter shapes differ");

    const auto channel_params = [K](const RealTensor& p, const RealTensor& m,
                                    const RealTensor& s, int c) {
        return mixture_from_raw(p.data() + c * K, m.data() + c * K, s.data() + c * K, K);
    };

    const int hw = vz.shape().h * vz.shape().w;
    double acc = 0.0;
    {
        const RealTensor& vm = t.value(mu_raw);
        const RealTensor& vs = t.value(s_raw);
        for (int c = 0; c < vz.shape().c; ++c) {
            const MixtureParams mp = channel_params(vp, vm, vs, c);
            for (int i = 0; i < hw; ++i) acc -= mixture_logpmf(vz[c * hw + i], mp);
        }
    }
    check_finite(RealTensor::scalar(acc), "mixture_nll");
    return t.push(
        RealTensor::scalar(acc),
        [z, pi_raw, mu_raw, s_raw, K, hw, channel_params](Tape& tp, const Tape::Node& n) {
            const double g = n.grad[0];
            const RealTensor& vz = tp.value(z);
            const RealTensor& vp = tp.value(pi_raw);
            const RealTensor& vm = tp.value(mu_raw);
            const RealTensor& vs = tp.value(s_raw);
            RealTensor& gz = tp.grad_mut(z);
            RealTensor& gp = tp.grad_mut(pi_raw);
            RealTensor& gm = tp.grad_mut(mu_raw);
            RealTensor& gs = tp.grad_mut(s_raw);
            std::vector<DLogGrad> dk(static_cast<std::size_t>(K));
            for (int c = 0; c < vz.shape().c; ++c) {
                const MixtureParams mp = channel_params(vp, vm, vs, c);
                for (int i = 0; i < hw; ++i) {
                    const double zv = vz[c * hw + i];
                    double m = -1e300;
                    for (int k = 0; k < K; ++k) {
                        dk[static_cast<std::size_t>(k)] = dlogistic_grad(zv, mp.mu[k], mp.s[k]);
                        m = std::max(m, mp.log_pi[k] + dk[static_cast<std::size_t>(k)].lp);
                    }
                    double norm = 0.0;
                    for (int k = 0; k < K; ++k)
                        norm += std::exp(mp.log_pi[k] + dk[static_cast<std::size_t>(k)].lp - m);
                    const double total = m + std::log(norm);
                    double dz_acc = 0.0;
                    for (int k = 0; k < K; ++k) {
                        const double wk =
                            std::exp(mp.log_pi[k] + dk[static_cast<std::size_t>(k)].lp - total);
                        const double pik = std::exp(mp.log_pi[k]);
                        dz_acc += wk * dk[static_cast<std::size_t>(k)].dz;
                        gm[c * K + k] -= g * wk * dk[static_cast<std::size_t>(k)].dmu * kHeadGain;
                        gs[c * K + k] -= g * wk * dk[static_cast<std::size_t>(k)].ds *
                                         kernels::sigmoid(kHeadGain * vs[c * K + k]) * kHeadGain;
                        gp[c * K + k] -= g * (wk - pik);
                    }
                    gz[c * hw + i] -= g * dz_acc;
                }
            }
        });
}

}  // namespace idf
