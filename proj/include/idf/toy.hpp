#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "idf/prior.hpp"
#include "idf/tensor.hpp"

namespace idf {

// Built-in toy source: every pixel is drawn independently from a logistic
// mixture whose mean is offset by a checkerboard texture, quantized to 8 bits
// with the boundary values absorbing the clipped tails. Pixels are
// independent, so the entropy rate is exact by direct summation — which is
// what makes end-to-end rate checks runnable without external data.

struct ToyComponent {
    double weight = 1.0;
    double mu = 128.0;
    double s = 6.0;
};

struct ToyConfig {
    int count = 5000;
    int channels = 1;
    int height = 16;
    int width = 16;
    std::uint64_t seed = 7;
    double checker_delta = 20.0;  // mean offset: +delta on odd (y+x), -delta on even
    // Default scale keeps the source entropy low enough that even small
    // images beat 8 bits/dim after fixed container overhead.
    std::vector<ToyComponent> components = {{1.0, 128.0, 6.0}};

    void validate() const {
        require(count >= 0 && channels >= 1 && height >= 1 && width >= 1, "toy: sizes");
        require(!components.empty(), "toy: needs at least one component");
        double total = 0.0;
        for (const ToyComponent& c : components) {
            require(c.weight > 0.0 && c.s > 0.0, "toy: component weight/scale must be positive");
            total += c.weight;
        }
        require(std::abs(total - 1.0) < 1e-9, "toy: component weights must sum to 1");
    }
};

namespace toy {

inline double cell_mu(const ToyConfig& cfg, const ToyComponent& c, int parity) {
    return c.mu + (parity ? cfg.checker_delta : -cfg.checker_delta);
}

// Exact pmf of one pixel with the given checkerboard parity; v = 0 and
// v = 255 absorb the clipped tails.
inline double pixel_pmf(const ToyConfig& cfg, int parity, int v) {
    double acc = 0.0;
    for (const ToyComponent& c : cfg.components) {
        const double mu = cell_mu(cfg, c, parity);
        const double hi =
            v == 255 ? 1.0 : kernels::sigmoid((static_cast<double>(v) + 0.5 - mu) / c.s);
        const double lo =
            v == 0 ? 0.0 : kernels::sigmoid((static_cast<double>(v) - 0.5 - mu) / c.s);
        acc += c.weight * (hi - lo);
    }
    return acc;
}

// Shannon entropy rate in bits per dimension, by direct summation over the
// 256-value alphabet for each parity class.
inline double entropy_rate(const ToyConfig& cfg) {
    cfg.validate();
    double h[2] = {0.0, 0.0};
    for (int parity = 0; parity < 2; ++parity)
        for (int v = 0; v < 256; ++v) {
            const double p = pixel_pmf(cfg, parity, v);
            if (p > 0.0) h[parity] -= p * std::log2(p);
        }
    long even = 0, odd = 0;
    for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) ((y + x) % 2 ? odd : even) += 1;
    const double total = static_cast<double>(even + odd);
    return (static_cast<double>(even) * h[0] + static_cast<double>(odd) * h[1]) / total;
}

inline std::int32_t sample_pixel(const ToyConfig& cfg, int parity, Rng& rng) {
    double u = uniform_open01(rng);
    std::size_t pick = cfg.components.size() - 1;
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg.components.size(); ++k) {
        acc += cfg.components[k].weight;
        if (u < acc) {
            pick = k;
            break;
        }
    }
    const ToyComponent& c = cfg.components[pick];
    const double mu = cell_mu(cfg, c, parity);
    const double uu = uniform_open01(rng);
    const double x = mu + c.s * std::log(uu / (1.0 - uu));
    const long long v = std::llround(x);
    return static_cast<std::int32_t>(std::clamp(v, 0LL, 255LL));
}

inline std::vector<IntTensor> generate(const ToyConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x70e));
    std::vector<IntTensor> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        IntTensor img(Shape{cfg.channels, cfg.height, cfg.width});
        for (int c = 0; c < cfg.channels; ++c)
            for (int y = 0; y < cfg.height; ++y)
                for (int x = 0; x < cfg.width; ++x)
                    img.at(c, y, x) = sample_pixel(cfg, (y + x) % 2, rng);
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace toy
}  // namespace idf
