#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "idf/prior.hpp"

using namespace idf;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// True bin masses over a quantized window, edge bins absorbing the tails —
// the distribution the table is approximating.
std::vector<double> binned_truth(const QuantizedPmf& q, const MixtureParams& p) {
    std::vector<double> out(static_cast<std::size_t>(q.bins()));
    for (int i = 0; i < q.bins(); ++i) {
        const double z = static_cast<double>(q.z_lo + i);
        double hi = 0.0, lo = 0.0;
        for (int k = 0; k < p.K(); ++k) {
            const double w = std::exp(p.log_pi[k]);
            hi += w * (i == q.bins() - 1 ? 1.0 : sigmoid_ref((z + 0.5 - p.mu[k]) / p.s[k]));
            lo += w * (i == 0 ? 0.0 : sigmoid_ref((z - 0.5 - p.mu[k]) / p.s[k]));
        }
        out[static_cast<std::size_t>(i)] = std::max(hi - lo, 0.0);
    }
    return out;
}

double kl_nats(const std::vector<double>& p, const QuantizedPmf& q) {
    const double m = static_cast<double>(1u << q.precision);
    double total = 0.0;
    for (double v : p) total += v;
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i] / total;
        if (pi <= 0.0) continue;
        kl += pi * std::log(pi / (static_cast<double>(q.freq[i]) / m));
    }
    return kl;
}

MixtureParams single(double mu, double s) {
    MixtureParams p;
    p.log_pi = {0.0};
    p.mu = {mu};
    p.s = {s};
    return p;
}

}  // namespace

TEST_CASE("dlogistic at the origin matches the closed form") {
    // log(sigma(0.5) - sigma(-0.5)) = log(2 sigma(0.5) - 1)
    const double want = std::log(2.0 * sigmoid_ref(0.5) - 1.0);
    CHECK(dlogistic_logpmf(0.0, 0.0, 1.0) == doctest::Approx(want).epsilon(1e-13));
    CHECK(std::exp(dlogistic_logpmf(0.0, 0.0, 1.0)) == doctest::Approx(0.244918).epsilon(1e-5));
}

TEST_CASE("dlogistic equals the naive CDF difference where that is stable") {
    Rng rng(2);
    for (int i = 0; i < 2000; ++i) {
        const double mu = 20.0 * (uniform01(rng) - 0.5);
        const double s = 0.05 + 5.0 * uniform01(rng);
        const double z = std::floor(mu + s * 30.0 * (uniform01(rng) - 0.5));
        const double naive =
            sigmoid_ref((z + 0.5 - mu) / s) - sigmoid_ref((z - 0.5 - mu) / s);
        if (naive <= 1e-290) continue;
        CHECK(dlogistic_logpmf(z, mu, s) == doctest::Approx(std::log(naive)).epsilon(1e-9));
    }
}

TEST_CASE("dlogistic is symmetric about an integer mean, bitwise") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double mu = static_cast<double>(static_cast<int>(rng() % 41) - 20);
        const double s = 0.1 + 8.0 * uniform01(rng);
        const int k = static_cast<int>(rng() % 300);
        CHECK(dlogistic_logpmf(mu + k, mu, s) == dlogistic_logpmf(mu - k, mu, s));
    }
}

TEST_CASE("dlogistic never returns -inf and telescopes to unit mass") {
    for (double s : {0.1, 0.5, 1.0, 3.0, 10.0}) {
        double acc = 0.0;
        for (int z = -10000; z <= 10000; ++z) {
            const double lp = dlogistic_logpmf(static_cast<double>(z), 0.0, s);
            CHECK(std::isfinite(lp));
            acc += std::exp(lp);
        }
        CHECK(acc >= 1.0 - 1e-9);
        CHECK(acc <= 1.0 + 1e-9);
    }
}

TEST_CASE("dlogistic gradients match finite differences, including deep tails") {
    Rng rng(4);
    for (int i = 0; i < 3000; ++i) {
        const double mu = 10.0 * (uniform01(rng) - 0.5);
        const double s = 0.05 + 6.0 * uniform01(rng);
        const double z = std::floor(mu + s * 40.0 * (uniform01(rng) - 0.5));
        const DLogGrad g = dlogistic_grad(z, mu, s);
        CHECK(std::isfinite(g.dmu));
        CHECK(std::isfinite(g.ds));
        const double h = 1e-6 * std::max(1.0, s);
        const double dmu_fd =
            (dlogistic_logpmf(z, mu + h, s) - dlogistic_logpmf(z, mu - h, s)) / (2 * h);
        const double ds_fd =
            (dlogistic_logpmf(z, mu, s + h) - dlogistic_logpmf(z, mu, s - h)) / (2 * h);
        CHECK(g.dmu == doctest::Approx(dmu_fd).epsilon(2e-4).scale(1.0));
        CHECK(g.ds == doctest::Approx(ds_fd).epsilon(2e-4).scale(1.0));
        CHECK(g.dz == -g.dmu);
    }
}

TEST_CASE("K=1 mixture equals the single component bitwise") {
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        const double logit = 4.0 * (uniform01(rng) - 0.5);
        const double mu_raw = 0.3 * (uniform01(rng) - 0.5);
        const double s_raw = 0.1 * (uniform01(rng) - 0.5);
        const MixtureParams p = mixture_from_raw(&logit, &mu_raw, &s_raw, 1);
        const double z = std::floor(400.0 * (uniform01(rng) - 0.5));
        CHECK(p.log_pi[0] == 0.0);
        CHECK(mixture_logpmf(z, p) ==
              dlogistic_logpmf(z, mean_from_raw(mu_raw), scale_from_raw(s_raw)));
    }
}

TEST_CASE("two identical components collapse to one") {
    MixtureParams two;
    two.log_pi = {std::log(0.5), std::log(0.5)};
    two.mu = {1.5, 1.5};
    two.s = {2.0, 2.0};
    const MixtureParams one = single(1.5, 2.0);
    for (int z = -30; z <= 30; ++z)
        CHECK(mixture_logpmf(z, two) ==
              doctest::Approx(mixture_logpmf(z, one)).epsilon(1e-12));
}

TEST_CASE("K=2 mixture matches direct summation") {
    MixtureParams p;
    p.log_pi = {std::log(0.25), std::log(0.75)};
    p.mu = {-2.0, 3.0};
    p.s = {1.0, 2.0};
    const double direct =
        0.25 * (sigmoid_ref(2.5 / 1.0) - sigmoid_ref(1.5 / 1.0)) +
        0.75 * (sigmoid_ref((0.5 - 3.0) / 2.0) - sigmoid_ref((-0.5 - 3.0) / 2.0));
    CHECK(mixture_logpmf(0.0, p) == doctest::Approx(std::log(direct)).epsilon(1e-12));
}

TEST_CASE("sampling: degenerate scale concentrates on the mean") {
    Rng rng(6);
    const DLogisticParams p{7.0, kScaleMin};
    for (int i = 0; i < 1000; ++i) CHECK(sample_dlogistic(p, rng) == 7);
}

TEST_CASE("sampling: empirical mean of the standard logistic") {
    Rng rng(7);
    const DLogisticParams p{0.0, 1.0};
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) acc += sample_dlogistic(p, rng);
    const double mean = acc / n;
    CHECK(mean >= -0.02);
    CHECK(mean <= 0.02);
}

TEST_CASE("sampling: chi-square agreement with the pmf") {
    Rng rng(8);
    const DLogisticParams p{0.3, 2.0};
    const int n = 1000000;
    const int lo = -14, hi = 15;  // edge bins absorb the tails
    std::vector<double> counts(static_cast<std::size_t>(hi - lo + 1), 0.0);
    for (int i = 0; i < n; ++i) {
        int z = sample_dlogistic(p, rng);
        z = std::clamp(z, lo, hi);
        counts[static_cast<std::size_t>(z - lo)] += 1.0;
    }
    double chi2 = 0.0;
    for (int z = lo; z <= hi; ++z) {
        double prob;
        if (z == lo)
            prob = sigmoid_ref((z + 0.5 - p.mu) / p.s);
        else if (z == hi)
            prob = 1.0 - sigmoid_ref((z - 0.5 - p.mu) / p.s);
        else
            prob = std::exp(dlogistic_logpmf(z, p.mu, p.s));
        const double expect = prob * n;
        REQUIRE(expect > 5.0);
        const double d = counts[static_cast<std::size_t>(z - lo)] - expect;
        chi2 += d * d / expect;
    }
    // 30 bins -> 29 dof; upper critical value at alpha = 0.01 is 49.588.
    CHECK(chi2 < 49.588);
}

TEST_CASE("quantize: near-deterministic pmf gives m-(n-1) at the peak") {
    const QuantizedPmf q = quantize_pmf(DLogisticParams{5.0, kScaleMin}, 16);
    CHECK(q.z_lo == 5 - 16);
    CHECK(q.z_hi == 5 + 16);
    const std::uint32_t m = 1u << 16;
    for (int i = 0; i < q.bins(); ++i) {
        if (q.z_lo + i == 5)
            CHECK(q.freq[static_cast<std::size_t>(i)] ==
                  m - static_cast<std::uint32_t>(q.bins() - 1));
        else
            CHECK(q.freq[static_cast<std::size_t>(i)] == 1);
    }
}

TEST_CASE("quantize: frequencies sum to m with every bin positive") {
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
        const double mu = 500.0 * (uniform01(rng) - 0.5);
        const double s = 0.01 + 12.0 * uniform01(rng);
        const QuantizedPmf q = quantize_pmf(DLogisticParams{mu, s}, 16);
        std::uint64_t total = 0;
        for (std::uint32_t f : q.freq) {
            CHECK(f >= 1);
            total += f;
        }
        CHECK(total == (1u << 16));
        CHECK(q.cum.back() == (1u << 16));
        for (std::size_t j = 1; j < q.cum.size(); ++j) CHECK(q.cum[j] > q.cum[j - 1]);
    }
}

TEST_CASE("quantize: slot lookup inverts the cumulative table") {
    Rng rng(10);
    const QuantizedPmf q = quantize_pmf(DLogisticParams{-3.7, 2.4}, 12);
    for (int i = 0; i < 5000; ++i) {
        const std::uint32_t slot = static_cast<std::uint32_t>(rng() % (1u << 12));
        const int s = q.find(slot);
        CHECK(q.cum[static_cast<std::size_t>(s)] <= slot);
        CHECK(slot < q.cum[static_cast<std::size_t>(s) + 1]);
    }
}

TEST_CASE("quantize: KL against the true pmf stays under 1e-3 nats") {
    for (double s : {0.5, 1.0, 2.0, 3.5, 5.0, 7.0, 8.5, 10.0}) {
        for (double mu : {0.0, 0.37, -12.6}) {
            const MixtureParams p = single(mu, s);
            const QuantizedPmf q = quantize_pmf(p, 16);
            const double kl = kl_nats(binned_truth(q, p), q);
            CAPTURE(s);
            CAPTURE(mu);
            CHECK(kl >= 0.0);
            CHECK(kl <= 1e-3);
        }
    }
    // Mixtures hold too.
    MixtureParams p;
    p.log_pi = {std::log(0.3), std::log(0.7)};
    p.mu = {-4.0, 6.0};
    p.s = {2.0, 5.0};
    const QuantizedPmf q = quantize_pmf(p, 16);
    CHECK(kl_nats(binned_truth(q, p), q) <= 1e-3);
}

TEST_CASE("quantize: guards") {
    CHECK_THROWS_AS(quantize_pmf(DLogisticParams{0.0, 1e6}, 16), error);   // window bound
    CHECK_THROWS_AS(quantize_pmf(DLogisticParams{0.0, 1.0}, 7), error);    // precision low
    CHECK_THROWS_AS(quantize_pmf(DLogisticParams{0.0, 1.0}, 25), error);   // precision high
    CHECK_THROWS_AS(quantize_pmf(DLogisticParams{0.0, 50.0}, 8), error);   // bins > m
}

TEST_CASE("fused dlogistic NLL op: gradients match finite differences") {
    Rng rng(11);
    const Shape s{2, 3, 3};
    RealTensor zt(s);
    for (int i = 0; i < zt.size(); ++i) zt[i] = std::floor(200.0 * uniform01(rng));
    Parameter mu_raw("m", RealTensor(s));
    Parameter s_raw("s", RealTensor(s));
    for (int i = 0; i < s.size(); ++i) {
        mu_raw.value[i] = 0.6 * (uniform01(rng) - 0.5);
        s_raw.value[i] = 0.1 * (uniform01(rng) - 0.5);
    }
    auto f = [&]() {
        Tape t;
        return t.value(dlogistic_nll(t, t.leaf(zt), t.param(mu_raw), t.param(s_raw)))[0];
    };
    for (Parameter* p : {&mu_raw, &s_raw}) {
        RealTensor fd = finite_diff_grad(f, *p, 1e-7);
        Tape t;
        Var loss = dlogistic_nll(t, t.leaf(zt), t.param(mu_raw), t.param(s_raw));
        mu_raw.zero_grad();
        s_raw.zero_grad();
        t.backward(loss);
        for (int i = 0; i < p->grad.size(); ++i)
            CHECK(p->grad[i] ==
                  doctest::Approx(fd[i]).epsilon(1e-4).scale(std::max(1.0, std::abs(fd[i]))));
    }
}

TEST_CASE("fused mixture NLL op: gradients match finite differences") {
    Rng rng(12);
    const int K = 3;
    const Shape zs{2, 2, 2};
    const Shape ps{2 * K, 1, 1};
    RealTensor zt(zs);
    for (int i = 0; i < zt.size(); ++i) zt[i] = std::floor(256.0 * uniform01(rng)) - 128.0;
    Parameter pi_raw("pi", RealTensor(ps));
    Parameter mu_raw("mu", RealTensor(ps));
    Parameter s_raw("s", RealTensor(ps));
    for (int i = 0; i < ps.size(); ++i) {
        pi_raw.value[i] = 2.0 * (uniform01(rng) - 0.5);
        mu_raw.value[i] = 0.8 * (uniform01(rng) - 0.5);
        s_raw.value[i] = 0.1 * (uniform01(rng) - 0.5);
    }
    auto f = [&]() {
        Tape t;
        return t.value(mixture_nll(t, t.leaf(zt), t.param(pi_raw), t.param(mu_raw),
                                   t.param(s_raw), K))[0];
    };
    for (Parameter* p : {&pi_raw, &mu_raw, &s_raw}) {
        RealTensor fd = finite_diff_grad(f, *p, 1e-7);
        Tape t;
        Var loss = mixture_nll(t, t.leaf(zt), t.param(pi_raw), t.param(mu_raw),
                               t.param(s_raw), K);
        pi_raw.zero_grad();
        mu_raw.zero_grad();
        s_raw.zero_grad();
        t.backward(loss);
        for (int i = 0; i < p->grad.size(); ++i)
            CHECK(p->grad[i] ==
                  doctest::Approx(fd[i]).epsilon(1e-4).scale(std::max(1.0, std::abs(fd[i]))));
    }
}

TEST_CASE("gradient of NLL also flows into the latent values") {
    // d(-logpmf)/dz must reach upstream layers; check against finite
    // differences through a continuous z.
    Parameter z("z", RealTensor::scalar(37.0));
    Parameter mu_raw("m", RealTensor::scalar(0.05));
    Parameter s_raw("s", RealTensor::scalar(0.02));
    auto f = [&]() {
        Tape t;
        return t.value(dlogistic_nll(t, t.param(z), t.param(mu_raw), t.param(s_raw)))[0];
    };
    RealTensor fd = finite_diff_grad(f, z, 1e-6);
    Tape t;
    Var loss = dlogistic_nll(t, t.param(z), t.param(mu_raw), t.param(s_raw));
    z.zero_grad();
    t.backward(loss);
    CHECK(z.grad[0] == doctest::Approx(fd[0]).epsilon(1e-5));
}

TEST_CASE("mixture weights from raw logits are normalized") {
    Rng rng(13);
    for (int iter = 0; iter < 500; ++iter) {
        const int K = 1 + static_cast<int>(rng() % 6);
        std::vector<double> pi(K), mu(K), s(K);
        for (int k = 0; k < K; ++k) {
            pi[static_cast<std::size_t>(k)] = 8.0 * (uniform01(rng) - 0.5);
            mu[static_cast<std::size_t>(k)] = uniform01(rng) - 0.5;
            s[static_cast<std::size_t>(k)] = 0.1 * (uniform01(rng) - 0.5);
        }
        const MixtureParams p = mixture_from_raw(pi.data(), mu.data(), s.data(), K);
        double total = 0.0;
        for (int k = 0; k < K; ++k) {
            total += std::exp(p.log_pi[static_cast<std::size_t>(k)]);
            CHECK(p.s[static_cast<std::size_t>(k)] >= kScaleMin);
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}
