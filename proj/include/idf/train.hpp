#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "idf/model.hpp"

namespace idf {

struct TrainConfig {
    int batch_size = 32;
    int epochs = 10;
    double lr_base = 1e-3;
    double lr_decay = 0.95;  // lr = lr_base * decay^epoch
    std::uint64_t seed = 1;
    int patch = 16;
    double val_fraction = 0.1;
    double clip_norm = 100.0;
    // Adamax canonical parameters.
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        require(batch_size >= 1 && epochs >= 0 && patch >= 1, "train config: positive sizes");
        require(lr_base >= 0.0 && lr_decay > 0.0 && lr_decay <= 1.0,
                "train config: decay in (0,1]");
        require(val_fraction >= 0.0 && val_fraction < 1.0, "train config: val fraction");
        require(clip_norm > 0.0, "train config: clip norm");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double train_bpd = 0.0;
    double val_bpd = 0.0;
    double lr = 0.0;
};

// Adamax: m = b1*m + (1-b1)*g, u = max(b2*u, |g|), p -= lr/(1-b1^t) * m/(u+eps).
class Adamax {
public:
    Adamax(const std::vector<Parameter*>& params, double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (Parameter* p : params) {
            m_.emplace_back(p->value.shape());
            u_.emplace_back(p->value.shape());
        }
    }

    void step(const std::vector<Parameter*>& params, double lr) {
        ++t_;
        const double bias = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter& p = *params[i];
            RealTensor& m = m_[i];
            RealTensor& u = u_[i];
            for (int k = 0; k < p.value.size(); ++k) {
                const double g = p.grad[k];
                m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
                u[k] = std::max(beta2_ * u[k], std::abs(g));
                p.value[k] -= (lr / bias) * m[k] / (u[k] + eps_);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<RealTensor> m_, u_;
};

namespace detail {

inline IntTensor crop_patch(const IntTensor& img, int patch, Rng& rng) {
    const Shape s = img.shape();
    if (s.h == patch && s.w == patch) return img;
    require(s.h >= patch && s.w >= patch, "train: image smaller than patch size");
    const int oy = static_cast<int>(rng() % static_cast<std::uint64_t>(s.h - patch + 1));
    const int ox = static_cast<int>(rng() % static_cast<std::uint64_t>(s.w - patch + 1));
    IntTensor out(Shape{s.c, patch, patch});
    for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x) out.at(c, y, x) = img.at(c, oy + y, ox + x);
    return out;
}

}  // namespace detail

// Minimizes mean NLL in bits/dim with straight-through gradients through the
// rounding. Deterministic given (config, seed, data): images are visited and
// gradients reduced in a fixed order on a single thread.
inline std::vector<EpochMetrics> train(IDFModel& model, const std::vector<IntTensor>& images,
                                       const TrainConfig& cfg) {
    cfg.validate();
    require(!images.empty(), "train: empty dataset");
    std::vector<Parameter*> params = model.parameters();
    Adamax opt(params, cfg.beta1, cfg.beta2, cfg.eps);

    // Deterministic train/validation split.
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    {
        Rng rng(mix_seed(cfg.seed, 0x511));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng() % i]);
    }
    const std::size_t n_val =
        std::min(images.size() - 1,
                 static_cast<std::size_t>(std::floor(cfg.val_fraction *
                                                     static_cast<double>(images.size()))));
    std::vector<int> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    std::vector<int> val_idx(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());

    const double d = static_cast<double>(model.config().channels * cfg.patch * cfg.patch);
    std::vector<EpochMetrics> metrics;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_base * std::pow(cfg.lr_decay, static_cast<double>(epoch));
        Rng erng(mix_seed(cfg.seed, 0xe0c, static_cast<std::uint64_t>(epoch)));
        std::vector<int> sched = train_idx;
        for (std::size_t i = sched.size(); i > 1; --i)
            std::swap(sched[i - 1], sched[erng() % i]);

        double epoch_nats = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < sched.size(); start += cfg.batch_size) {
            const std::size_t stop =
                std::min(sched.size(), start + static_cast<std::size_t>(cfg.batch_size));
            for (Parameter* p : params) p->zero_grad();
            double batch_nats = 0.0;
            for (std::size_t i = start; i < stop; ++i) {
                const IntTensor patch =
                    detail::crop_patch(images[static_cast<std::size_t>(sched[i])], cfg.patch,
                                       erng);
                Tape tape;
                Var loss = model.train_nll(tape, patch);
                const double nats = tape.value(loss)[0];
                if (!std::isfinite(nats))
                    throw error("training diverged (non-finite loss) at epoch " +
                                std::to_string(epoch) + ", image " + std::to_string(i));
                batch_nats += nats;
                tape.backward(loss);
            }
            const double inv = 1.0 / (static_cast<double>(stop - start) * d);
            double norm_sq = 0.0;
            for (Parameter* p : params)
                for (int k = 0; k < p->grad.size(); ++k) {
                    p->grad[k] *= inv;
                    norm_sq += p->grad[k] * p->grad[k];
                }
            const double norm = std::sqrt(norm_sq);
            if (norm > cfg.clip_norm) {
                const double sc = cfg.clip_norm / norm;
                for (Parameter* p : params)
                    for (int k = 0; k < p->grad.size(); ++k) p->grad[k] *= sc;
            }
            opt.step(params, lr);
            epoch_nats += batch_nats;
            seen += stop - start;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        em.train_bpd = seen ? epoch_nats / (static_cast<double>(seen) * d * kLn2) : 0.0;
        if (!val_idx.empty()) {
            Rng vrng(mix_seed(cfg.seed, 0xa1, static_cast<std::uint64_t>(epoch)));
            double acc = 0.0;
            for (int idx : val_idx)
                acc += model.nll_bpd(
                    detail::crop_patch(images[static_cast<std::size_t>(idx)], cfg.patch, vrng));
            em.val_bpd = acc / static_cast<double>(val_idx.size());
        }
        metrics.push_back(em);
    }
    return metrics;
}

}  // namespace idf
