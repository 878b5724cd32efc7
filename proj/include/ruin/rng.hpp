#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>

namespace ruin {

// SplitMix64 (Steele, Lea & Flood 2014). One 64-bit state word, one output
// per step. Used to expand seeds into generator states; first output for
// state 0 is 0xE220A8397B1DCDAF.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace detail {

// Ziggurat tables for the standard normal (Marsaglia & Tsang 2000), 256
// layers. r is the rightmost layer edge, v the common layer area. Layer i
// spans |z| < x[i+1]; a draw lands in the rectangle part with probability
// x[i]/x[i+1] and is accepted immediately, otherwise the wedge or the tail
// beyond r is resolved exactly.
struct zig_tables {
    struct pair {
        double scale;   // x[i+1] * 2^-53: maps a 53-bit integer to a candidate
        double accept;  // x[i]: rectangle threshold
    };
    pair t[256];
    double x[257];
    double y[257];  // exp(-x_i^2 / 2)
    static constexpr double tail_edge = 3.6541528853610088;

    zig_tables() {
        const double v = 4.92867323399e-3;
        x[256] = v * std::exp(0.5 * tail_edge * tail_edge);
        x[255] = tail_edge;
        for (int i = 254; i >= 1; --i)
            x[i] = std::sqrt(-2.0 * std::log(v / x[i + 1] +
                                             std::exp(-0.5 * x[i + 1] * x[i + 1])));
        x[0] = 0.0;
        for (int i = 0; i <= 256; ++i) y[i] = std::exp(-0.5 * x[i] * x[i]);
        for (int i = 0; i < 256; ++i) t[i] = {x[i + 1] * 0x1.0p-53, x[i]};
    }
};

// One shared instance; an inline variable avoids the per-call guard a
// function-local static would pay inside the simulation hot loop.
inline const zig_tables zig_instance{};

inline const zig_tables& zig() { return zig_instance; }

}  // namespace detail

// Per-path random stream: xoshiro256++ (Blackman & Vigna 2019) seeded by a
// SplitMix64 chain started at seed + stream * golden-ratio increment, so any
// path's stream is reconstructible from (seed, path index) alone — serial,
// interleaved, and multi-worker runs all draw identical per-path sequences.
class PathRng {
  public:
    PathRng() = default;  // placeholder state; reseed before use

    PathRng(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t sm = seed + stream * 0x9E3779B97F4A7C15ULL;
        for (auto& word : s_) word = splitmix64(sm);
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform on [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // standard normal via the ziggurat; bits of one draw are split into
    // disjoint fields: layer (0-7), sign (8), magnitude (11-63). The ~1.5%
    // of draws that miss the rectangle go through normal_rare; keeping its
    // exp/log calls out of this body lets callers hold their loop state in
    // caller-saved registers across the common path.
    double normal() {
        const auto& zt = detail::zig();
        const std::uint64_t u = next();
        const int i = static_cast<int>(u & 255);
        const auto zp = zt.t[i];
        const double z = static_cast<double>(u >> 11) * zp.scale;
        const std::uint64_t sign = (u & 256) << 55;
        if (z < zp.accept) [[likely]]
            return std::bit_cast<double>(std::bit_cast<std::uint64_t>(z) |
                                         sign);
        return normal_rare(i, z, sign);
    }

    // exponential with the given rate; log1p keeps small uniforms exact
    double exponential(double rate) {
        return -std::log1p(-uniform()) / rate;
    }

    // Raw xoshiro256++ state, verbatim. The vectorized simulation kernel
    // keeps eight streams in wide registers and uses these to move a lane
    // between that form and a scalar generator; also handy for checkpoints.
    std::array<std::uint64_t, 4> state() const {
        return {s_[0], s_[1], s_[2], s_[3]};
    }
    void set_state(const std::array<std::uint64_t, 4>& s) {
        s_[0] = s[0];
        s_[1] = s[1];
        s_[2] = s[2];
        s_[3] = s[3];
    }

    // Wedge and tail resolution for a rejected ziggurat candidate, then
    // fresh candidates until one is accepted. Draws exactly the sequence
    // the classical single-loop formulation would. Public because the
    // vectorized kernel tests candidates in wide registers and hands the
    // rare rejects back to this scalar continuation.
    __attribute__((noinline, cold)) double normal_rare(int i, double z,
                                                       std::uint64_t sign) {
        const auto& zt = detail::zig();
        for (;;) {
            if (i == 255) {  // tail beyond the last layer edge
                const double r = detail::zig_tables::tail_edge;
                double a, b;
                do {
                    a = -std::log(uniform()) / r;
                    b = -std::log(uniform());
                } while (b + b < a * a);
                return std::bit_cast<double>(
                    std::bit_cast<std::uint64_t>(r + a) | sign);
            }
            // wedge between the rectangle and the density
            if (zt.y[i + 1] + uniform() * (zt.y[i] - zt.y[i + 1]) <
                std::exp(-0.5 * z * z))
                return std::bit_cast<double>(std::bit_cast<std::uint64_t>(z) |
                                             sign);
            const std::uint64_t u = next();
            i = static_cast<int>(u & 255);
            const auto zp = zt.t[i];
            z = static_cast<double>(u >> 11) * zp.scale;
            sign = (u & 256) << 55;
            if (z < zp.accept)
                return std::bit_cast<double>(std::bit_cast<std::uint64_t>(z) |
                                             sign);
        }
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4] = {};
};

}  // namespace ruin
