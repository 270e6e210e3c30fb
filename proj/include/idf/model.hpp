#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "idf/flow.hpp"
#include "idf/serialize.hpp"

namespace idf {

inline constexpr double kLn2 = 0.6931471805599453;
inline constexpr char kModelMagic[4] = {'I', 'D', 'F', 'M'};
inline constexpr std::uint8_t kModelVersion = 1;

struct ModelConfig {
    int channels = 1;         // input image channels
    int levels = 2;           // L
    int flows_per_level = 4;  // D: permutation + coupling pairs per level
    int net_depth = 4;        // dense block depth
    int net_growth = 64;      // dense block feature channels
    int mixture_k = 5;        // top-level mixture components
    bool lower_triangular = false;
    int pmf_precision = 16;
    std::uint64_t seed = 1;

    void validate() const {
        require(channels >= 1 && levels >= 1 && flows_per_level >= 1, "config: positive sizes");
        require(net_depth >= 1 && net_growth >= 1 && mixture_k >= 1, "config: positive sizes");
        require(pmf_precision >= 8 && pmf_precision <= 24, "config: pmf precision in [8,24]");
    }
};

// One level: squeeze, D x (permutation, coupling), then a factor-out split —
// except the last level, which emits everything as the top latent.
struct FlowStep {
    Permutation perm;
    std::unique_ptr<CouplingLayer> coupling;
    std::unique_ptr<LowerTriangularCoupling> ltc;

    IntTensor fwd(const IntTensor& x) const {
        IntTensor p = perm.apply(x);
        return coupling ? coupling->forward(p) : ltc->forward(p);
    }
    IntTensor inv(const IntTensor& z) const {
        IntTensor p = coupling ? coupling->inverse(z) : ltc->inverse(z);
        return perm.apply(p, /*inverse=*/true);
    }
    Var fwd(Tape& t, Var x, Rounding mode) {
        Var p = perm.apply(t, x);
        return coupling ? coupling->forward(t, p, mode) : ltc->forward(t, p, mode);
    }
};

struct Level {
    std::vector<FlowStep> steps;
    std::optional<FactorOutSplit> factor;
};

// The full flow: an exact bijection between images and a latent stack, with
// conditional discretized-logistic priors at the factor-out layers and a
// per-channel K-component mixture on the top latent.
class IDFModel {
public:
    explicit IDFModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(cfg_.seed, 0x1df));
        int c = cfg_.channels;
        for (int l = 1; l <= cfg_.levels; ++l) {
            c *= 4;
            Level level;
            const std::string lname = "L" + std::to_string(l);
            for (int d = 0; d < cfg_.flows_per_level; ++d) {
                FlowStep step;
                Rng prng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(l),
                                  static_cast<std::uint64_t>(d)));
                step.perm = Permutation::random(c, prng);
                const std::string sname = lname + ".f" + std::to_string(d);
                if (cfg_.lower_triangular)
                    step.ltc = std::make_unique<LowerTriangularCoupling>(
                        sname, c, cfg_.net_depth, cfg_.net_growth, rng);
                else
                    step.coupling = std::make_unique<CouplingLayer>(sname, c, cfg_.net_depth,
                                                                    cfg_.net_growth, rng);
                level.steps.push_back(std::move(step));
            }
            if (l < cfg_.levels) {
                level.factor.emplace(lname, c, cfg_.net_depth, cfg_.net_growth, rng);
                c = level.factor->c_keep;
            }
            levels_.push_back(std::move(level));
        }
        top_channels_ = c;
        const Shape tshape{top_channels_ * cfg_.mixture_k, 1, 1};
        top_pi_ = Parameter("top.pi", RealTensor(tshape));
        top_mu_ = Parameter("top.mu", RealTensor(tshape));
        top_s_ = Parameter("top.s", RealTensor(tshape));
    }

    IDFModel(const IDFModel&) = delete;
    IDFModel& operator=(const IDFModel&) = delete;
    IDFModel(IDFModel&&) = default;
    IDFModel& operator=(IDFModel&&) = default;

    const ModelConfig& config() const { return cfg_; }
    int top_level_channels() const { return top_channels_; }

    void check_input(const Shape& s) const {
        require(s.c == cfg_.channels, "input channel count does not match model");
        const int div = 1 << cfg_.levels;
        require(s.h % div == 0 && s.w % div == 0 && s.h >= div && s.w >= div,
                "input extents must divide by 2^levels");
    }

    std::vector<Shape> latent_plan(int H, int W) const {
        std::vector<Shape> plan;
        int c = cfg_.channels, h = H, w = W;
        for (int l = 1; l <= cfg_.levels; ++l) {
            c *= 4;
            h /= 2;
            w /= 2;
            if (l < cfg_.levels) {
                const int out = levels_[static_cast<std::size_t>(l - 1)].factor->c_out;
                plan.push_back(Shape{out, h, w});
                c -= out;
            } else {
                plan.push_back(Shape{c, h, w});
            }
        }
        return plan;
    }

    // Full forward analysis: exact latents, the per-dimension prior
    // parameters the coder will quantize, and the log2-likelihood computed
    // from those same parameters.
    struct Analysis {
        std::vector<IntTensor> latents;                        // z_1..z_L
        std::vector<std::vector<DLogisticParams>> conditional;  // levels 1..L-1
        double log2_likelihood = 0.0;
    };

    Analysis analyze(const IntTensor& x) const {
        check_input(x.shape());
        Analysis a;
        double nats = 0.0;
        IntTensor cur = x;
        for (int l = 1; l <= cfg_.levels; ++l) {
            const Level& level = levels_[static_cast<std::size_t>(l - 1)];
            cur = squeeze(cur);
            for (const FlowStep& step : level.steps) cur = step.fwd(cur);
            if (level.factor) {
                auto [z, keep] = level.factor->split(cur);
                std::vector<DLogisticParams> params = level.factor->conditional_params(keep);
                for (int i = 0; i < z.size(); ++i)
                    nats += dlogistic_logpmf(static_cast<double>(z[i]),
                                             params[static_cast<std::size_t>(i)]);
                a.latents.push_back(std::move(z));
                a.conditional.push_back(std::move(params));
                cur = std::move(keep);
            } else {
                const std::vector<MixtureParams> top = top_params();
                const int hw = cur.shape().h * cur.shape().w;
                for (int c = 0; c < cur.shape().c; ++c)
                    for (int i = 0; i < hw; ++i)
                        nats += mixture_logpmf(static_cast<double>(cur[c * hw + i]),
                                               top[static_cast<std::size_t>(c)]);
                a.latents.push_back(std::move(cur));
            }
        }
        a.log2_likelihood = nats / kLn2;
        return a;
    }

    std::pair<std::vector<IntTensor>, double> forward(const IntTensor& x) const {
        Analysis a = analyze(x);
        return {std::move(a.latents), a.log2_likelihood};
    }

    IntTensor inverse(const std::vector<IntTensor>& latents) const {
        require(latents.size() == static_cast<std::size_t>(cfg_.levels),
                "inverse: latent count does not match model");
        const Shape& zl = latents[0].shape();
        const int H = zl.h * 2, W = zl.w * 2;
        const std::vector<Shape> plan = latent_plan(H, W);
        for (int l = 0; l < cfg_.levels; ++l)
            require(latents[static_cast<std::size_t>(l)].shape() ==
                        plan[static_cast<std::size_t>(l)],
                    "inverse: latent shape does not match model plan");
        IntTensor cur = latents.back();
        for (int l = cfg_.levels; l >= 1; --l) {
            const Level& level = levels_[static_cast<std::size_t>(l - 1)];
            if (l < cfg_.levels)
                cur = level.factor->merge(latents[static_cast<std::size_t>(l - 1)], cur);
            for (auto it = level.steps.rbegin(); it != level.steps.rend(); ++it)
                cur = it->inv(cur);
            cur = unsqueeze(cur);
        }
        return cur;
    }

    double nll_bpd(const IntTensor& x) const {
        return -analyze(x).log2_likelihood / static_cast<double>(x.size());
    }

    // Diagnostic: price every latent under an exact uniform prior over 256
    // values. In-range latents give exactly 8 bits per dimension.
    double nll_bpd_uniform_diag(const IntTensor& x) const {
        Analysis a = analyze(x);
        for (const IntTensor& z : a.latents)
            for (int i = 0; i < z.size(); ++i)
                if (z[i] < 0 || z[i] > 255)
                    return std::numeric_limits<double>::infinity();
        return 8.0;
    }

    // Training loss in nats (sum over dimensions) on the tape. Values match
    // the inference path bitwise; only gradient behavior differs between
    // rounding modes.
    Var train_nll(Tape& t, const IntTensor& x, Rounding mode = Rounding::Ste) {
        check_input(x.shape());
        Var cur = t.leaf(to_real(x));
        Var nll{};
        for (int l = 1; l <= cfg_.levels; ++l) {
            Level& level = levels_[static_cast<std::size_t>(l - 1)];
            cur = squeeze_var(t, cur);
            for (FlowStep& step : level.steps) cur = step.fwd(t, cur, mode);
            if (level.factor) {
                FactorOutSplit& f = *level.factor;
                Var z = narrow_c(t, cur, 0, f.c_out);
                Var keep = narrow_c(t, cur, f.c_out, f.c_keep);
                Var raw = f.conditioner.apply(t, scale(t, keep, 1.0 / 256.0));
                Var mu_raw = narrow_c(t, raw, 0, f.c_out);
                Var s_raw = narrow_c(t, raw, f.c_out, f.c_out);
                Var term = dlogistic_nll(t, z, mu_raw, s_raw);
                nll = nll.valid() ? add(t, nll, term) : term;
                cur = keep;
            } else {
                Var term = mixture_nll(t, cur, t.param(top_pi_), t.param(top_mu_),
                                       t.param(top_s_), cfg_.mixture_k);
                nll = nll.valid() ? add(t, nll, term) : term;
            }
        }
        return nll;
    }

    // Per-channel mixture parameters of the top latent.
    std::vector<MixtureParams> top_params() const {
        std::vector<MixtureParams> out;
        out.reserve(static_cast<std::size_t>(top_channels_));
        const int K = cfg_.mixture_k;
        for (int c = 0; c < top_channels_; ++c)
            out.push_back(mixture_from_raw(top_pi_.value.data() + c * K,
                                           top_mu_.value.data() + c * K,
                                           top_s_.value.data() + c * K, K));
        return out;
    }

    // Conditional parameters for level l (1-based, l < L) given its kept
    // channels; the decoder calls this with the reconstructed y_l.
    std::vector<DLogisticParams> conditional_params(int l, const IntTensor& keep) const {
        require(l >= 1 && l < cfg_.levels, "conditional_params: level out of range");
        return levels_[static_cast<std::size_t>(l - 1)].factor->conditional_params(keep);
    }

    const Level& level(int l) const { return levels_[static_cast<std::size_t>(l - 1)]; }
    Level& level_mut(int l) { return levels_[static_cast<std::size_t>(l - 1)]; }

    // Ancestral sample: top latent from the mixture, each factored-out latent
    // from its conditional given the already-decoded kept channels.
    IntTensor sample_one(int H, int W, Rng& rng) const {
        const std::vector<Shape> plan = latent_plan(H, W);
        const Shape& ts = plan.back();
        IntTensor cur(ts);
        {
            const std::vector<MixtureParams> top = top_params();
            const int hw = ts.h * ts.w;
            for (int c = 0; c < ts.c; ++c)
                for (int i = 0; i < hw; ++i)
                    cur[c * hw + i] = sample_mixture(top[static_cast<std::size_t>(c)], rng);
        }
        for (int l = cfg_.levels; l >= 1; --l) {
            const Level& level = levels_[static_cast<std::size_t>(l - 1)];
            if (l < cfg_.levels) {
                const std::vector<DLogisticParams> params =
                    level.factor->conditional_params(cur);
                IntTensor z(plan[static_cast<std::size_t>(l - 1)]);
                for (int i = 0; i < z.size(); ++i)
                    z[i] = sample_dlogistic(params[static_cast<std::size_t>(i)], rng);
                cur = level.factor->merge(z, cur);
            }
            for (auto it = level.steps.rbegin(); it != level.steps.rend(); ++it)
                cur = it->inv(cur);
            cur = unsqueeze(cur);
        }
        return cur;
    }

    std::vector<IntTensor> sample(int n, int H, int W, Rng& rng) const {
        std::vector<IntTensor> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(sample_one(H, W, rng));
        return out;
    }

    // Stable parameter order: levels in order, steps in order, nets in
    // construction order, then the top prior tensors.
    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (Level& level : levels_) {
            for (FlowStep& step : level.steps) {
                if (step.coupling) step.coupling->collect(out);
                if (step.ltc) step.ltc->collect(out);
            }
            if (level.factor) level.factor->collect(out);
        }
        out.push_back(&top_pi_);
        out.push_back(&top_mu_);
        out.push_back(&top_s_);
        return out;
    }
    std::vector<const Parameter*> parameters() const {
        std::vector<Parameter*> p = const_cast<IDFModel*>(this)->parameters();
        return {p.begin(), p.end()};
    }

    // ---- Serialization -------------------------------------------------------
    // Layout: magic, version, architecture block, seed, permutations,
    // parameter blob (LE doubles), trailing SHA-256 of everything before it.

    std::vector<std::uint8_t> serialize_body() const {
        ByteWriter w;
        w.bytes(reinterpret_cast<const std::uint8_t*>(kModelMagic), 4);
        w.u8(kModelVersion);
        w.u16(static_cast<std::uint16_t>(cfg_.channels));
        w.u8(static_cast<std::uint8_t>(cfg_.levels));
        w.u8(static_cast<std::uint8_t>(cfg_.flows_per_level));
        w.u8(static_cast<std::uint8_t>(cfg_.net_depth));
        w.u16(static_cast<std::uint16_t>(cfg_.net_growth));
        w.u8(static_cast<std::uint8_t>(cfg_.mixture_k));
        w.u8(cfg_.lower_triangular ? 1 : 0);
        w.u8(static_cast<std::uint8_t>(cfg_.pmf_precision));
        w.u64(cfg_.seed);
        for (const Level& level : levels_)
            for (const FlowStep& step : level.steps) {
                w.u16(static_cast<std::uint16_t>(step.perm.size()));
                for (int v : step.perm.fwd) w.u32(static_cast<std::uint32_t>(v));
            }
        const std::vector<const Parameter*> params = parameters();
        w.u32(static_cast<std::uint32_t>(params.size()));
        for (const Parameter* p : params) {
            w.str(p->name);
            w.u16(static_cast<std::uint16_t>(p->value.shape().c));
            w.u16(static_cast<std::uint16_t>(p->value.shape().h));
            w.u16(static_cast<std::uint16_t>(p->value.shape().w));
            for (int i = 0; i < p->value.size(); ++i) w.f64(p->value[i]);
        }
        return w.take();
    }

    std::array<std::uint8_t, 32> content_hash() const {
        return Sha256::digest(serialize_body());
    }

    void save(const std::string& path) const {
        const std::vector<std::uint8_t> body = serialize_body();
        const std::array<std::uint8_t, 32> hash = Sha256::digest(body);
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw data_error("cannot open model file for writing: " + path);
        f.write(reinterpret_cast<const char*>(body.data()),
                static_cast<std::streamsize>(body.size()));
        f.write(reinterpret_cast<const char*>(hash.data()), 32);
        if (!f) throw data_error("model write failed: " + path);
    }

    static IDFModel load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw data_error("cannot open model file: " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
        if (bytes.size() < 36) throw corruption_error("model file truncated");
        const std::vector<std::uint8_t> body(bytes.begin(), bytes.end() - 32);
        const std::array<std::uint8_t, 32> expect = Sha256::digest(body);
        if (!std::equal(expect.begin(), expect.end(), bytes.end() - 32))
            throw corruption_error("model file hash mismatch (corrupt or truncated)");

        ByteReader r(body);
        const std::uint8_t* magic = r.take(4);
        if (std::memcmp(magic, kModelMagic, 4) != 0)
            throw corruption_error("not a model file (bad magic)");
        if (r.u8() != kModelVersion) throw corruption_error("unsupported model version");
        ModelConfig cfg;
        cfg.channels = r.u16();
        cfg.levels = r.u8();
        cfg.flows_per_level = r.u8();
        cfg.net_depth = r.u8();
        cfg.net_growth = r.u16();
        cfg.mixture_k = r.u8();
        cfg.lower_triangular = r.u8() != 0;
        cfg.pmf_precision = r.u8();
        cfg.seed = r.u64();
        IDFModel m(cfg);
        for (Level& level : m.levels_)
            for (FlowStep& step : level.steps) {
                const int n = r.u16();
                std::vector<int> fwd(static_cast<std::size_t>(n));
                for (int& v : fwd) v = static_cast<int>(r.u32());
                step.perm = Permutation::from_fwd(std::move(fwd));
            }
        const std::uint32_t n_params = r.u32();
        std::vector<Parameter*> params = m.parameters();
        if (n_params != params.size()) throw corruption_error("model parameter count mismatch");
        for (Parameter* p : params) {
            const std::string name = r.str();
            if (name != p->name) throw corruption_error("model parameter order mismatch");
            const Shape s{r.u16(), r.u16(), r.u16()};
            if (!(s == p->value.shape())) throw corruption_error("model parameter shape mismatch");
            for (int i = 0; i < p->value.size(); ++i) p->value[i] = r.f64();
        }
        if (r.remaining() != 0) throw corruption_error("model file has trailing bytes");
        return m;
    }

private:
    ModelConfig cfg_;
    std::vector<Level> levels_;
    Parameter top_pi_, top_mu_, top_s_;
    int top_channels_ = 0;
};

}  // namespace idf
