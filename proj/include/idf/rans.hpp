#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "idf/common.hpp"
#include "idf/serialize.hpp"

namespace idf::rans {

// Range-variant ANS. A symbol s with frequency l_s out of m = 2^precision
// owns the interval [b_s, b_s + l_s) of [0, m). One coding step maps state c
// to c' = floor(c/l_s)*m + (c mod l_s) + b_s; decoding recovers s from
// c' mod m and inverts the step exactly. The coder is LIFO: the last symbol
// pushed is the first popped.
//
// The streaming variant keeps the state in [2^32, 2^64) between operations,
// spilling 32-bit words when an encode step would overflow and refilling
// when a decode step falls below the interval.

inline constexpr std::uint64_t kStateLo = 1ULL << 32;

struct SymbolSpec {
    std::uint32_t freq = 0;   // l_s >= 1
    std::uint32_t start = 0;  // b_s, with b_s + l_s <= m
};

// One raw coding step, no renormalization. Exposed for the small-state
// worked examples and the per-step bijection tests.
inline std::uint64_t encode_step(std::uint64_t c, SymbolSpec s, int precision) {
    if (s.freq == 0) throw error("rans: zero-frequency symbol");
    return (c / s.freq) * (1ULL << precision) + (c % s.freq) + s.start;
}

inline std::uint32_t decode_slot(std::uint64_t c, int precision) {
    return static_cast<std::uint32_t>(c & ((1ULL << precision) - 1));
}

inline std::uint64_t decode_step(std::uint64_t c, SymbolSpec s, int precision) {
    return static_cast<std::uint64_t>(s.freq) * (c >> precision) + decode_slot(c, precision) -
           s.start;
}

class Encoder {
public:
    explicit Encoder(int precision, std::uint64_t initial_state = kStateLo)
        : precision_(precision), state_(initial_state) {
        if (precision < 1 || precision > 24) throw error("rans: precision out of range");
    }

    void put(SymbolSpec s) {
        if (s.freq == 0) throw error("rans: zero-frequency symbol");
        // Spill while a step would leave [2^32, 2^64). The bound is
        // state >= l_s * 2^(64-precision); freq <= 2^precision keeps the
        // shifted comparison overflow-free.
        while ((state_ >> (64 - precision_)) >= s.freq) {
            words_.push_back(static_cast<std::uint32_t>(state_));
            state_ >>= 32;
        }
        state_ = encode_step(state_, s, precision_);
    }

    std::uint64_t state() const { return state_; }
    std::size_t word_count() const { return words_.size(); }

    // Stream layout: u64 LE final state, then u32 LE words in the order the
    // decoder consumes them (reverse order of emission).
    std::vector<std::uint8_t> finish() const {
        ByteWriter w;
        w.u64(state_);
        for (auto it = words_.rbegin(); it != words_.rend(); ++it) w.u32(*it);
        return w.data();
    }

private:
    int precision_;
    std::uint64_t state_;
    std::vector<std::uint32_t> words_;
};

class Decoder {
public:
    // Borrows the buffer; the caller keeps it alive for the decoder's life.
    Decoder(const std::uint8_t* bytes, std::size_t n, int precision)
        : precision_(precision), rd_(bytes, n) {
        if (n < 8) throw corruption_error("rans: stream shorter than its final state");
        state_ = rd_.u64();
    }
    // Owning overload: safe to hand a temporary.
    Decoder(std::vector<std::uint8_t> bytes, int precision)
        : precision_(precision), owned_(std::move(bytes)), rd_(owned_.data(), owned_.size()) {
        if (owned_.size() < 8)
            throw corruption_error("rans: stream shorter than its final state");
        state_ = rd_.u64();
    }

    std::uint32_t peek_slot() const { return decode_slot(state_, precision_); }

    void advance(SymbolSpec s) {
        state_ = decode_step(state_, s, precision_);
        while (state_ < kStateLo) {
            if (rd_.remaining() < 4) throw corruption_error("rans: truncated stream");
            state_ = (state_ << 32) | rd_.u32();
        }
    }

    std::uint64_t state() const { return state_; }
    std::size_t bytes_left() const { return rd_.remaining(); }

private:
    int precision_;
    std::vector<std::uint8_t> owned_;
    ByteReader rd_;
    std::uint64_t state_ = 0;
};

// Encode a whole sequence: symbols are pushed in reverse so the decoder pops
// them in forward order. specs[i] must describe symbols[i].
inline std::vector<std::uint8_t> encode_sequence(const std::vector<std::uint32_t>& symbols,
                                                 const std::vector<SymbolSpec>& specs,
                                                 int precision,
                                                 std::uint64_t initial_state = kStateLo) {
    if (symbols.size() != specs.size()) throw error("rans: symbols/specs length mismatch");
    Encoder enc(precision, initial_state);
    for (std::size_t i = symbols.size(); i-- > 0;) enc.put(specs[i]);
    return enc.finish();
}

// The lookup maps (index, slot, decoded prefix) to the decoded symbol
// and its SymbolSpec; it may only rely on previously decoded symbols, which
// matches the codec's conditional structure.
using SpecLookup =
    std::function<std::pair<std::uint32_t, SymbolSpec>(std::size_t, std::uint32_t,
                                                       const std::vector<std::uint32_t>&)>;

inline std::vector<std::uint32_t> decode_sequence(const std::vector<std::uint8_t>& bytes,
                                                  std::size_t count, int precision,
                                                  const SpecLookup& lookup) {
    Decoder dec(bytes.data(), bytes.size(), precision);
    std::vector<std::uint32_t> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto [sym, spec] = lookup(i, dec.peek_slot(), out);
        dec.advance(spec);
        out.push_back(sym);
    }
    return out;
}

}  // namespace idf::rans
