#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <mutex>
#include <thread>
#include <vector>

#include "idf/model.hpp"
#include "idf/rans.hpp"

namespace idf {

inline constexpr char kContainerMagic[4] = {'I', 'D', 'F', 'C'};
inline constexpr std::uint8_t kContainerVersion = 1;

// Compressed-image container. Exactly one of {substreams, raw} is populated,
// selected by the escape flag. Substreams are stored in decode order: the top
// latent first, since the decoder needs it to reconstruct the conditioning
// for every level below.
struct CompressedImage {
    std::uint8_t version = kContainerVersion;
    std::array<std::uint8_t, 32> model_hash{};
    std::uint16_t c = 0, h = 0, w = 0;
    bool escape = false;
    std::vector<std::vector<std::uint8_t>> substreams;
    std::vector<std::uint8_t> raw;

    int dims() const { return static_cast<int>(c) * h * w; }

    std::vector<std::uint8_t> serialize() const {
        ByteWriter wr;
        wr.bytes(reinterpret_cast<const std::uint8_t*>(kContainerMagic), 4);
        wr.u8(version);
        wr.bytes(model_hash.data(), model_hash.size());
        wr.u16(c);
        wr.u16(h);
        wr.u16(w);
        wr.u8(escape ? 1 : 0);
        if (escape) {
            wr.bytes(raw.data(), raw.size());
        } else {
            wr.u8(static_cast<std::uint8_t>(substreams.size()));
            for (const auto& s : substreams) wr.u32(static_cast<std::uint32_t>(s.size()));
            for (const auto& s : substreams) wr.bytes(s.data(), s.size());
        }
        return wr.take();
    }

    static CompressedImage parse(const std::vector<std::uint8_t>& bytes) {
        ByteReader r(bytes);
        const std::uint8_t* magic = r.take(4);
        if (std::memcmp(magic, kContainerMagic, 4) != 0)
            throw corruption_error("not a compressed image (bad magic)");
        CompressedImage ci;
        ci.version = r.u8();
        if (ci.version != kContainerVersion)
            throw corruption_error("unsupported container version");
        std::memcpy(ci.model_hash.data(), r.take(32), 32);
        ci.c = r.u16();
        ci.h = r.u16();
        ci.w = r.u16();
        ci.escape = (r.u8() & 1) != 0;
        if (ci.escape) {
            const std::uint8_t* p = r.take(static_cast<std::size_t>(ci.dims()));
            ci.raw.assign(p, p + ci.dims());
        } else {
            const int levels = r.u8();
            std::vector<std::uint32_t> lens(static_cast<std::size_t>(levels));
            for (auto& v : lens) v = r.u32();
            for (std::uint32_t len : lens) {
                const std::uint8_t* p = r.take(len);
                ci.substreams.emplace_back(p, p + len);
            }
        }
        if (r.remaining() != 0) throw corruption_error("container has trailing bytes");
        return ci;
    }

    std::uint64_t total_bits() const {
        return static_cast<std::uint64_t>(serialize().size()) * 8;
    }

    // Bits carried by rANS renormalization words; everything else (magic,
    // hash, dims, lengths, per-stream final states) counts as header/framing.
    std::uint64_t payload_word_bits() const {
        std::uint64_t bits = 0;
        for (const auto& s : substreams)
            bits += static_cast<std::uint64_t>(s.size() - 8) * 8;
        return bits;
    }
    std::uint64_t header_bits() const { return total_bits() - payload_word_bits(); }
};

struct ImageStats {
    double coded_bpd = 0.0;
    double model_bpd = 0.0;
    double gap = 0.0;  // coded - model
    std::uint64_t total_bits = 0;
    std::uint64_t header_bits = 0;
    int dims = 0;
    bool escaped = false;

    double rate() const { return 8.0 / coded_bpd; }
};

struct CodecStats {
    double bpd = 0.0;        // mean of per-image coded bpd
    double model_bpd = 0.0;  // mean of per-image analytic bpd
    std::uint64_t total_bits = 0;
    std::uint64_t header_bits = 0;
    int escapes = 0;
    int images = 0;

    double rate() const { return 8.0 / bpd; }
};

// Reporting convention for 8-bit sources: "3.34 (2.40x)" — bits per
// dimension with the compression rate 8/bpd in parentheses.
inline std::string bpd_with_rate(double bpd) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f (%.2fx)", bpd, 8.0 / bpd);
    return std::string(buf);
}

namespace detail_codec {

// Quantized tables for the top latent are per channel, shared spatially.
inline std::vector<QuantizedPmf> top_tables(const IDFModel& m) {
    std::vector<QuantizedPmf> out;
    const std::vector<MixtureParams> tops = m.top_params();
    out.reserve(tops.size());
    for (const MixtureParams& p : tops) out.push_back(quantize_pmf(p, m.config().pmf_precision));
    return out;
}

// Encode one latent tensor. Dimensions are pushed in reverse raster order so
// the LIFO decoder pops them in forward raster order. Returns false if any
// symbol misses its window (caller escapes).
inline bool encode_latent(const IntTensor& z, const std::vector<QuantizedPmf>& per_channel,
                          const std::vector<QuantizedPmf>& per_dim, int precision,
                          std::vector<std::uint8_t>& out) {
    rans::Encoder enc(precision);
    const int hw = z.shape().h * z.shape().w;
    for (int i = z.size(); i-- > 0;) {
        const QuantizedPmf& pmf =
            per_dim.empty() ? per_channel[static_cast<std::size_t>(i / hw)]
                            : per_dim[static_cast<std::size_t>(i)];
        if (!pmf.contains(z[i])) return false;
        enc.put(pmf.spec_for(z[i]));
    }
    out = enc.finish();
    return true;
}

inline IntTensor decode_latent(const std::vector<std::uint8_t>& stream, const Shape& shape,
                               const std::vector<QuantizedPmf>& per_channel,
                               const std::vector<QuantizedPmf>& per_dim, int precision) {
    rans::Decoder dec(stream.data(), stream.size(), precision);
    IntTensor z(shape);
    const int hw = shape.h * shape.w;
    for (int i = 0; i < z.size(); ++i) {
        const QuantizedPmf& pmf =
            per_dim.empty() ? per_channel[static_cast<std::size_t>(i / hw)]
                            : per_dim[static_cast<std::size_t>(i)];
        const int sym = pmf.find(dec.peek_slot());
        dec.advance({pmf.freq[static_cast<std::size_t>(sym)],
                     pmf.cum[static_cast<std::size_t>(sym)]});
        z[i] = pmf.z_lo + sym;
    }
    return z;
}

inline std::vector<QuantizedPmf> quantize_all(const std::vector<DLogisticParams>& params,
                                              int precision) {
    std::vector<QuantizedPmf> out;
    out.reserve(params.size());
    for (const DLogisticParams& p : params) out.push_back(quantize_pmf(p, precision));
    return out;
}

}  // namespace detail_codec

struct CompressResult {
    CompressedImage image;
    ImageStats stats;
};

inline CompressResult compress_with_stats(const IntTensor& x, const IDFModel& model) {
    model.check_input(x.shape());
    for (int i = 0; i < x.size(); ++i)
        if (x[i] < 0 || x[i] > 255) throw data_error("compress: pixel values out of [0,255]");

    CompressedImage ci;
    ci.model_hash = model.content_hash();
    ci.c = static_cast<std::uint16_t>(x.shape().c);
    ci.h = static_cast<std::uint16_t>(x.shape().h);
    ci.w = static_cast<std::uint16_t>(x.shape().w);

    const IDFModel::Analysis an = model.analyze(x);
    const int precision = model.config().pmf_precision;
    const int L = model.config().levels;

    bool ok = true;
    std::vector<std::vector<std::uint8_t>> streams;  // decode order, z_L first
    std::size_t payload = 0;
    {
        const std::vector<QuantizedPmf> top = detail_codec::top_tables(model);
        std::vector<std::uint8_t> s;
        ok = detail_codec::encode_latent(an.latents.back(), top, {}, precision, s);
        payload += s.size();
        streams.push_back(std::move(s));
    }
    for (int l = L - 1; ok && l >= 1; --l) {
        const std::vector<QuantizedPmf> tables = detail_codec::quantize_all(
            an.conditional[static_cast<std::size_t>(l - 1)], precision);
        std::vector<std::uint8_t> s;
        ok = detail_codec::encode_latent(an.latents[static_cast<std::size_t>(l - 1)], {}, tables,
                                         precision, s);
        payload += s.size();
        streams.push_back(std::move(s));
    }

    const std::size_t raw_payload = static_cast<std::size_t>(ci.dims());
    const std::size_t coded_payload = 1 + 4 * streams.size() + payload;
    if (!ok || coded_payload >= raw_payload) {
        ci.escape = true;
        ci.raw.resize(raw_payload);
        for (int i = 0; i < x.size(); ++i) ci.raw[static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(x[i]);
    } else {
        ci.substreams = std::move(streams);
    }

    CompressResult res;
    res.stats.dims = ci.dims();
    res.stats.total_bits = ci.total_bits();
    res.stats.header_bits = ci.header_bits();
    res.stats.escaped = ci.escape;
    res.stats.coded_bpd =
        static_cast<double>(res.stats.total_bits) / static_cast<double>(res.stats.dims);
    res.stats.model_bpd = -an.log2_likelihood / static_cast<double>(res.stats.dims);
    res.stats.gap = res.stats.coded_bpd - res.stats.model_bpd;
    res.image = std::move(ci);
    return res;
}

inline CompressedImage compress(const IntTensor& x, const IDFModel& model) {
    return compress_with_stats(x, model).image;
}

namespace detail_codec {

// Shared by decompress (all levels decoded) and progressive decoding
// (top `prefix` levels decoded, the rest sampled from their conditionals).
inline IntTensor reconstruct(const CompressedImage& ci, const IDFModel& model, int prefix,
                             Rng* rng) {
    if (ci.model_hash != model.content_hash())
        throw corruption_error("compressed image was made with a different model");
    const Shape xs{ci.c, ci.h, ci.w};
    model.check_input(xs);

    if (ci.escape) {
        IntTensor x(xs);
        for (int i = 0; i < x.size(); ++i) x[i] = ci.raw[static_cast<std::size_t>(i)];
        return x;
    }

    const int L = model.config().levels;
    if (static_cast<int>(ci.substreams.size()) != L)
        throw corruption_error("container substream count does not match model");
    require(prefix >= 0 && prefix <= L, "progressive: prefix level count out of range");

    const int precision = model.config().pmf_precision;
    const std::vector<Shape> plan = model.latent_plan(ci.h, ci.w);

    IntTensor cur;
    {
        const Shape& ts = plan.back();
        if (prefix >= 1) {
            cur = decode_latent(ci.substreams[0], ts, top_tables(model), {}, precision);
        } else {
            cur = IntTensor(ts);
            const std::vector<MixtureParams> tops = model.top_params();
            const int hw = ts.h * ts.w;
            for (int c = 0; c < ts.c; ++c)
                for (int i = 0; i < hw; ++i)
                    cur[c * hw + i] = sample_mixture(tops[static_cast<std::size_t>(c)], *rng);
        }
    }
    for (int l = L; l >= 1; --l) {
        const Level& level = model.level(l);
        if (l < L) {
            const std::vector<DLogisticParams> params = model.conditional_params(l, cur);
            IntTensor z(plan[static_cast<std::size_t>(l - 1)]);
            if (L - l < prefix) {
                z = decode_latent(ci.substreams[static_cast<std::size_t>(L - l)],
                                  plan[static_cast<std::size_t>(l - 1)], {},
                                  quantize_all(params, precision), precision);
            } else {
                for (int i = 0; i < z.size(); ++i)
                    z[i] = sample_dlogistic(params[static_cast<std::size_t>(i)], *rng);
            }
            cur = level.factor->merge(z, cur);
        }
        for (auto it = level.steps.rbegin(); it != level.steps.rend(); ++it) cur = it->inv(cur);
        cur = unsqueeze(cur);
    }
    return cur;
}

}  // namespace detail_codec

inline IntTensor decompress(const CompressedImage& ci, const IDFModel& model) {
    return detail_codec::reconstruct(ci, model, model.config().levels, nullptr);
}

inline IntTensor progressive_decode(const CompressedImage& ci, const IDFModel& model,
                                    int prefix_levels, Rng& rng) {
    return detail_codec::reconstruct(ci, model, prefix_levels, &rng);
}

// Largest prefix of whole level substreams whose byte total fits within
// fraction * (total substream bytes).
inline int prefix_for_fraction(const CompressedImage& ci, double fraction) {
    if (ci.escape) return static_cast<int>(ci.substreams.size());
    std::size_t total = 0;
    for (const auto& s : ci.substreams) total += s.size();
    const double budget = fraction * static_cast<double>(total);
    std::size_t acc = 0;
    int k = 0;
    for (const auto& s : ci.substreams) {
        acc += s.size();
        if (static_cast<double>(acc) > budget + 1e-9) break;
        ++k;
    }
    return k;
}

// Per-image independence makes the batch embarrassingly parallel; outputs are
// collected by index, so the bytes are identical for any parallelism level.
inline std::pair<std::vector<CompressedImage>, CodecStats> compress_batch(
    const std::vector<IntTensor>& images, const IDFModel& model, int parallelism = 1) {
    require(parallelism >= 1, "compress_batch: parallelism must be >= 1");
    std::vector<CompressResult> results(images.size());
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto work = [&](std::size_t begin, std::size_t end) {
        try {
            for (std::size_t i = begin; i < end; ++i)
                results[i] = compress_with_stats(images[i], model);
        } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mu);
            if (!failure) failure = std::current_exception();
        }
    };
    if (parallelism == 1 || images.size() <= 1) {
        work(0, images.size());
    } else {
        const std::size_t T = std::min<std::size_t>(parallelism, images.size());
        std::vector<std::thread> threads;
        const std::size_t chunk = (images.size() + T - 1) / T;
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t b = t * chunk;
            const std::size_t e = std::min(images.size(), b + chunk);
            if (b < e) threads.emplace_back(work, b, e);
        }
        for (auto& th : threads) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    CodecStats stats;
    std::vector<CompressedImage> out;
    out.reserve(results.size());
    for (CompressResult& r : results) {
        stats.bpd += r.stats.coded_bpd;
        stats.model_bpd += r.stats.model_bpd;
        stats.total_bits += r.stats.total_bits;
        stats.header_bits += r.stats.header_bits;
        stats.escapes += r.stats.escaped ? 1 : 0;
        ++stats.images;
        out.push_back(std::move(r.image));
    }
    if (stats.images > 0) {
        stats.bpd /= stats.images;
        stats.model_bpd /= stats.images;
    }
    return {std::move(out), stats};
}

inline void write_container(const std::string& path, const CompressedImage& ci) {
    const std::vector<std::uint8_t> bytes = ci.serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open output for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw data_error("container write failed: " + path);
}

inline CompressedImage read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open compressed image: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return CompressedImage::parse(bytes);
}

}  // namespace idf
