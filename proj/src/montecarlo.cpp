#include "ruin/montecarlo.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#if defined(__AVX512F__) && defined(__AVX512DQ__)
#define RUIN_MC_AVX512 1
#include <immintrin.h>
#else
#define RUIN_MC_AVX512 0
#endif

#include "ruin/model.hpp"
#include "ruin/rng.hpp"

namespace ruin {

namespace {

// Flat view of a PolicyTable for the hot loop: the interpolation below must
// produce bit-identical results to PolicyTable::operator() (same expression
// order, same 1/h division, same fma), it just avoids re-deriving the
// invariants per call. An empty table (front > back) makes sample() return
// 0 everywhere, which is how theta == 0 is encoded.
struct table_view {
    const double* v = nullptr;
    double front = std::numeric_limits<double>::infinity();
    double back = -std::numeric_limits<double>::infinity();
    double inv_h = 0.0;
    std::size_t n = 0;
};

table_view make_view(const PolicyTable& t) {
    table_view tv;
    if (t.grid.n() == 0) return tv;
    tv.v = t.values.data();
    tv.front = t.grid.nodes.front();
    tv.back = t.grid.nodes.back();
    tv.inv_h = 1.0 / t.grid.h;
    tv.n = t.grid.n();
    return tv;
}

inline double sample(const table_view& tv, double w) {
    if (w < tv.front || w > tv.back) return 0.0;
    if (w == tv.back) return tv.v[tv.n - 1];
    const double s = (w - tv.front) * tv.inv_h;
    std::size_t j = static_cast<std::size_t>(s);
    if (j + 1 >= tv.n) j = tv.n - 2;
    const double frac = s - static_cast<double>(j);
    return std::fma(frac, tv.v[j + 1] - tv.v[j], tv.v[j]);
}

// Everything a step needs, hoisted out of the loops once per estimate.
// pq, when non-null, is an interleaved copy {pi_0, th_0, pi_1, th_1, ...}
// of both tables; it exists when the tables share one grid covering
// [b, w_s]. The stepping loop then computes the interpolation index once
// for both controls and skips the out-of-range checks, because W stays
// strictly inside (b, w_s) while a path is alive. Index and fraction are
// the same values the two independent sample() calls would produce, and
// the loads are copies of the same doubles, so results are bit-equal.
struct path_ctx {
    table_view pi;
    table_view th;
    const double* pq = nullptr;
    double r, mu, sigma, c, b, w_s;
    double dt, sqdt, t_max, lambda;
};

path_ctx make_ctx(const ModelParams& p, const table_view& pi,
                  const table_view& th, const SimConfig& sim) {
    path_ctx c;
    c.pi = pi;
    c.th = th;
    c.r = p.r;
    c.mu = p.mu;
    c.sigma = p.sigma;
    c.c = p.c;
    c.b = p.b;
    c.w_s = p.c / p.r;
    c.dt = sim.dt;
    c.sqdt = std::sqrt(sim.dt);
    c.t_max = sim.t_max;
    c.lambda = p.lambda;
    return c;
}

// The simulation engine: the step context plus storage for the interleaved
// table. Built one way for every entry point so that serial, parallel, and
// single-path runs agree on which sampling branch they take.
struct engine {
    path_ctx ctx;
    std::vector<double> pairs;
};

engine make_engine(const ModelParams& p, const PolicyTable& pi_policy,
                   const PolicyTable& theta_policy, const SimConfig& sim) {
    engine e;
    const table_view pi = make_view(pi_policy);
    const table_view th = make_view(theta_policy);
    e.ctx = make_ctx(p, pi, th, sim);
    if (pi.v != nullptr && th.v != nullptr && pi.front == th.front &&
        pi.back == th.back && pi.inv_h == th.inv_h && pi.n == th.n &&
        pi.front <= e.ctx.b && pi.back >= e.ctx.w_s) {
        e.pairs.resize(2 * pi.n);
        for (std::size_t j = 0; j < pi.n; ++j) {
            e.pairs[2 * j] = pi.v[j];
            e.pairs[2 * j + 1] = th.v[j];
        }
        e.ctx.pq = e.pairs.data();
    }
    return e;
}

// Per-path state. The horizon min(death, t_max) is fixed up front from a
// single exponential draw, split into n_full whole steps plus one short
// step of length dt_last (possibly zero).
struct path_state {
    PathRng rng;
    double W = 0.0;
    double pen = 0.0;
    long long k = 0;        // full steps taken
    long long n_full = 0;
    double dt_last = 0.0;
    bool at_t_max = false;  // horizon was the truncation time, not death
};

path_state start_path(const path_ctx& c, double w0, PathRng rng) {
    path_state st;
    st.rng = rng;
    st.W = w0;
    const double death = st.rng.exponential(c.lambda);
    double horizon = death;
    if (horizon >= c.t_max) {
        horizon = c.t_max;
        st.at_t_max = true;
    }
    st.n_full = static_cast<long long>(horizon / c.dt);
    double rem = horizon - static_cast<double>(st.n_full) * c.dt;
    st.dt_last = rem > 0.0 ? rem : 0.0;
    return st;
}

// Applies one computed Euler update W -> Wn over dt_step to the running
// state: either the path crossed a boundary inside the step (the penalty
// increment is prorated to the linearly interpolated crossing time, *out
// is filled, returns true) or it advances normally. Factored out of
// euler_step so the wide kernel can replay the identical arithmetic for
// lanes it extracts from its registers.
inline bool apply_update(const path_ctx& c, double W, double Wn,
                         double pen_rate, double dt_step, path_state& st,
                         PathOutcome* out) {
    if (Wn <= c.b) {
        const double part = (W - c.b) / (W - Wn);
        st.pen = st.pen + (pen_rate * part) * dt_step;
        out->ruined_before_death = true;
        out->penalty_integral = st.pen;
        out->exit_reason = ExitReason::ruin;
        return true;
    }
    if (Wn >= c.w_s) {
        const double part = (c.w_s - W) / (Wn - W);
        st.pen = st.pen + (pen_rate * part) * dt_step;
        out->ruined_before_death = false;
        out->penalty_integral = st.pen;
        out->exit_reason = ExitReason::safe_hit;
        return true;
    }
    st.pen = std::fma(pen_rate, dt_step, st.pen);
    st.W = Wn;
    return false;
}

// One Euler step of length dt_step (sq = sqrt(dt_step)). Returns true and
// fills *out when the path crossed a boundary inside the step. Every
// floating-point operation is spelled with an explicit fma or a fixed
// association (the project builds with contraction off), making this the
// reference sequence the wide kernel reproduces lane for lane. Inlining is
// forced: the body embeds the ziggurat sampler, which pushes it past the
// inliner's size heuristic, yet keeping it out of line costs a call (and
// the attendant state spills) on every step of every path.
__attribute__((always_inline)) inline bool euler_step(const path_ctx& c,
                                                      path_state& st,
                                                      double dt_step,
                                                      double sq,
                                                      PathOutcome* out) {
    const double W = st.W;
    double piw, thw;
    if (c.pq != nullptr) {
        const double s = (W - c.pi.front) * c.pi.inv_h;
        std::size_t j = static_cast<std::size_t>(s);
        if (j + 1 >= c.pi.n) j = c.pi.n - 2;
        const double frac = s - static_cast<double>(j);
        const double p0 = c.pq[2 * j], q0 = c.pq[2 * j + 1];
        const double p1 = c.pq[2 * j + 2], q1 = c.pq[2 * j + 3];
        piw = std::fma(frac, p1 - p0, p0);
        thw = std::fma(frac, q1 - q0, q0);
    } else {
        piw = sample(c.pi, W);
        thw = sample(c.th, W);
    }
    const double adj = std::fma(c.sigma, thw, c.mu - c.r);
    const double drift = std::fma(adj, piw, std::fma(c.r, W, -c.c));
    const double vol = (c.sigma * piw) * sq;
    const double z = st.rng.normal();
    const double Wn = std::fma(vol, z, std::fma(drift, dt_step, W));
    const double pen_rate = 0.5 * (thw * thw);
    return apply_update(c, W, Wn, pen_rate, dt_step, st, out);
}

PathOutcome finish_at_horizon(const path_state& st) {
    PathOutcome o;
    o.ruined_before_death = false;
    o.penalty_integral = st.pen;
    o.exit_reason = st.at_t_max ? ExitReason::truncated : ExitReason::death;
    return o;
}

// True (with *out filled) when the start point is already outside the open
// band (b, w_s); such paths take no steps and accrue no penalty.
inline bool instant_outcome(const path_ctx& c, double w0, PathOutcome* out) {
    if (w0 <= c.b) {
        out->ruined_before_death = true;
        out->penalty_integral = 0.0;
        out->exit_reason = ExitReason::ruin;
        return true;
    }
    if (w0 >= c.w_s) {
        out->ruined_before_death = false;
        out->penalty_integral = 0.0;
        out->exit_reason = ExitReason::safe_hit;
        return true;
    }
    return false;
}

PathOutcome run_path(const path_ctx& c, path_state st) {
    PathOutcome out;
    for (long long k = 0; k < st.n_full; ++k)
        if (euler_step(c, st, c.dt, c.sqdt, &out)) return out;
    if (st.dt_last > 0.0 &&
        euler_step(c, st, st.dt_last, std::sqrt(st.dt_last), &out))
        return out;
    return finish_at_horizon(st);
}

// Completes a path standing at its horizon: the short final step (which can
// still cross a boundary), else death or truncation. Runs once per path;
// kept out of line so the stepping loops stay small in the icache.
__attribute__((noinline)) void finish_tail(const path_ctx& c, path_state& st,
                                           PathOutcome* out) {
    if (st.dt_last > 0.0 &&
        euler_step(c, st, st.dt_last, std::sqrt(st.dt_last), out))
        return;
    *out = finish_at_horizon(st);
}

// The objective contribution of one path. inv_eps is 1/eps precomputed as 0
// when eps <= 0, so a zero penalty never multiplies infinity.
inline double objective_value(const PathOutcome& o, double inv_eps) {
    return (o.ruined_before_death ? 1.0 : 0.0) - o.penalty_integral * inv_eps;
}

// A chunk of consecutive path indices, run as a few interleaved lanes so
// the core sees several independent Euler chains at once (each chain is a
// serial dependence through the RNG and the wealth update). Results land in
// xs[id]/safe[id] by global path index, which is what makes the estimate
// independent of chunking and thread count.
constexpr int lane_count = 8;
constexpr long long chunk_paths = 4096;

void run_chunk(const path_ctx& ctx, double w0, std::uint64_t seed,
               long long begin, long long end, double inv_eps, double* xs,
               unsigned char* safe) {
    struct lane {
        path_state st;
        long long id;
    };
    lane lanes[lane_count];
    int active = 0;
    long long next = begin;

    auto record = [&](long long id, const PathOutcome& o) {
        xs[id] = objective_value(o, inv_eps);
        safe[id] = o.exit_reason == ExitReason::safe_hit ? 1 : 0;
    };
    auto try_start = [&](lane& ln) {
        while (next < end) {
            const long long id = next++;
            PathOutcome o;
            if (instant_outcome(ctx, w0, &o)) {
                record(id, o);
                continue;
            }
            ln.st = start_path(
                ctx, w0, PathRng(seed, static_cast<std::uint64_t>(id)));
            ln.id = id;
            return true;
        }
        return false;
    };

    for (int l = 0; l < lane_count; ++l)
        if (try_start(lanes[active]))
            ++active;
        else
            break;

    while (active > 0) {
        for (int l = 0; l < active;) {
            path_state& st = lanes[l].st;
            PathOutcome o;
            bool fin;
            if (st.k < st.n_full) [[likely]] {
                ++st.k;
                fin = euler_step(ctx, st, ctx.dt, ctx.sqdt, &o);
                if (!fin && st.k >= st.n_full) [[unlikely]] {
                    finish_tail(ctx, st, &o);
                    fin = true;
                }
            } else {
                finish_tail(ctx, st, &o);
                fin = true;
            }
            if (!fin) {
                ++l;
                continue;
            }
            record(lanes[l].id, o);
            if (!try_start(lanes[l]))
                lanes[l] = lanes[--active];  // refill failed: compact
            else
                ++l;
        }
    }
}

#if RUIN_MC_AVX512

// ---- 16-wide chunk engine (AVX-512) -----------------------------------
//
// Two interleaved groups of eight lanes run in 512-bit registers; two
// groups because a single Euler round is latency-bound on its table
// gather, and the second independent group keeps the FMA ports busy under
// that latency. Per-lane arithmetic is the same IEEE operation sequence as
// euler_step (explicit fma, fixed association, identical truncation and
// clamping), so every path produces bit-identical results in either
// engine; the serial-versus-parallel comparison tests lock this in.
//
// The slow parts stay scalar and rare: ziggurat candidates that miss the
// rectangle (~1.5% of draws, finished by PathRng::normal_rare on the
// extracted lane), boundary crossings, horizon ends, and refills. Slot
// state lives in small aligned arrays reloaded each round (L1-resident);
// the event handlers edit the arrays in place. Only the fused
// interleaved-table case is implemented — chunks without pq take the
// scalar engine above.

constexpr int vec_groups = 2;
constexpr int vec_slots = 8 * vec_groups;

struct vec_chunk {
    const path_ctx* ctx;
    double w0;
    std::uint64_t seed;
    long long next, end;
    double inv_eps;
    double* xs;
    unsigned char* safe;
    alignas(64) double W[vec_slots];
    alignas(64) double pen[vec_slots];
    alignas(64) std::uint64_t s0[vec_slots], s1[vec_slots], s2[vec_slots],
        s3[vec_slots];
    alignas(64) long long k_left[vec_slots];  // remaining full steps
    long long pid[vec_slots];
    double dt_last[vec_slots];
    bool at_max[vec_slots];
    unsigned am = 0;  // one bit per slot with a live path
};

void vec_record(vec_chunk& vc, long long id, const PathOutcome& o) {
    vc.xs[id] = objective_value(o, vc.inv_eps);
    vc.safe[id] = o.exit_reason == ExitReason::safe_hit ? 1 : 0;
}

// Starts the next remaining path in slot i; instant outcomes and paths too
// short for a single full step are resolved on the spot. When the chunk
// runs dry the slot is parked: wealth mid-band so the dead rounds it keeps
// riding along in stay finite and never gather out of bounds, and a step
// counter that never reaches zero. The caller clears its active bit.
bool vec_fill(vec_chunk& vc, int i) {
    const path_ctx& c = *vc.ctx;
    while (vc.next < vc.end) {
        const long long id = vc.next++;
        PathOutcome o;
        if (instant_outcome(c, vc.w0, &o)) {
            vec_record(vc, id, o);
            continue;
        }
        path_state st = start_path(
            c, vc.w0, PathRng(vc.seed, static_cast<std::uint64_t>(id)));
        if (st.n_full == 0) {
            finish_tail(c, st, &o);
            vec_record(vc, id, o);
            continue;
        }
        const auto sw = st.rng.state();
        vc.s0[i] = sw[0];
        vc.s1[i] = sw[1];
        vc.s2[i] = sw[2];
        vc.s3[i] = sw[3];
        vc.W[i] = st.W;
        vc.pen[i] = 0.0;
        vc.k_left[i] = st.n_full;
        vc.pid[i] = id;
        vc.dt_last[i] = st.dt_last;
        vc.at_max[i] = st.at_t_max;
        return true;
    }
    vc.W[i] = 0.5 * (c.b + c.w_s);
    vc.pen[i] = 0.0;
    vc.k_left[i] = std::numeric_limits<long long>::max();
    return false;
}

// Resolves the lanes of group g that fired an event this round. Boundary
// exits replay apply_update on the extracted pre-/post-step values — the
// same scalar code, so the prorated penalty matches the scalar engine
// bitwise. Horizon ends run the shared scalar tail. Either way the slot is
// refilled or parked. Out of line to keep the round loop icache-small.
__attribute__((noinline)) void vec_events(vec_chunk& vc, int g,
                                          unsigned exit_m, unsigned done_m,
                                          const double* preW,
                                          const double* postW,
                                          const double* prate) {
    const path_ctx& c = *vc.ctx;
    for (int l = 0; l < 8; ++l) {
        const unsigned bit = 1u << l;
        if (!((exit_m | done_m) & bit)) continue;
        const int i = 8 * g + l;
        path_state st;
        st.rng.set_state({vc.s0[i], vc.s1[i], vc.s2[i], vc.s3[i]});
        st.pen = vc.pen[i];
        st.dt_last = vc.dt_last[i];
        st.at_t_max = vc.at_max[i];
        PathOutcome o;
        if (exit_m & bit) {
            apply_update(c, preW[l], postW[l], prate[l], c.dt, st, &o);
        } else {
            st.W = vc.W[i];
            finish_tail(c, st, &o);
        }
        vec_record(vc, vc.pid[i], o);
        if (!vec_fill(vc, i)) vc.am &= ~(1u << i);
    }
}

void run_chunk_vec(const path_ctx& ctx, double w0, std::uint64_t seed,
                   long long begin, long long end, double inv_eps,
                   double* xs, unsigned char* safe) {
    vec_chunk vc;
    vc.ctx = &ctx;
    vc.w0 = w0;
    vc.seed = seed;
    vc.next = begin;
    vc.end = end;
    vc.inv_eps = inv_eps;
    vc.xs = xs;
    vc.safe = safe;
    for (int i = 0; i < vec_slots; ++i)
        if (vec_fill(vc, i)) vc.am |= 1u << i;
    if (vc.am == 0) return;

    const auto& zt = detail::zig();
    const double* const pq = ctx.pq;
    const __m512d vfront = _mm512_set1_pd(ctx.pi.front);
    const __m512d vinvh = _mm512_set1_pd(ctx.pi.inv_h);
    const __m512d vmur = _mm512_set1_pd(ctx.mu - ctx.r);
    const __m512d vnegc = _mm512_set1_pd(-ctx.c);
    const __m512d vsg = _mm512_set1_pd(ctx.sigma);
    const __m512d vrr = _mm512_set1_pd(ctx.r);
    const __m512d vdt = _mm512_set1_pd(ctx.dt);
    const __m512d vsqdt = _mm512_set1_pd(ctx.sqdt);
    const __m512d vbb = _mm512_set1_pd(ctx.b);
    const __m512d vws = _mm512_set1_pd(ctx.w_s);
    const __m512d vhalf = _mm512_set1_pd(0.5);
    const __m512i vl255 = _mm512_set1_epi64(255);
    const __m512i vl256 = _mm512_set1_epi64(256);
    const __m512i vone = _mm512_set1_epi64(1);
    const __m512i vtwo = _mm512_set1_epi64(2);
    const __m512i vthree = _mm512_set1_epi64(3);
    const __m512i vnm1 =
        _mm512_set1_epi64(static_cast<long long>(ctx.pi.n) - 1);
    const __m512i vnm2 =
        _mm512_set1_epi64(static_cast<long long>(ctx.pi.n) - 2);

    while (vc.am != 0) {
        for (int g = 0; g < vec_groups; ++g) {
            const __mmask8 amg =
                static_cast<__mmask8>((vc.am >> (8 * g)) & 0xFFu);
            if (!amg) continue;
            __m512d vW = _mm512_load_pd(vc.W + 8 * g);
            __m512d vpen = _mm512_load_pd(vc.pen + 8 * g);
            __m512i x0 = _mm512_load_epi64(vc.s0 + 8 * g);
            __m512i x1 = _mm512_load_epi64(vc.s1 + 8 * g);
            __m512i x2 = _mm512_load_epi64(vc.s2 + 8 * g);
            __m512i x3 = _mm512_load_epi64(vc.s3 + 8 * g);
            __m512i vk = _mm512_load_epi64(vc.k_left + 8 * g);

            // interpolate both controls at W (mirrors euler_step)
            const __m512d sW = _mm512_mul_pd(_mm512_sub_pd(vW, vfront), vinvh);
            __m512i j = _mm512_cvttpd_epu64(sW);
            j = _mm512_mask_mov_epi64(j, _mm512_cmpge_epu64_mask(j, vnm1),
                                      vnm2);
            const __m512d frac = _mm512_sub_pd(sW, _mm512_cvtepu64_pd(j));
            const __m512i j2 = _mm512_slli_epi64(j, 1);
            const __m512d p0 = _mm512_i64gather_pd(j2, pq, 8);
            const __m512d q0 =
                _mm512_i64gather_pd(_mm512_add_epi64(j2, vone), pq, 8);
            const __m512d p1 =
                _mm512_i64gather_pd(_mm512_add_epi64(j2, vtwo), pq, 8);
            const __m512d q1 =
                _mm512_i64gather_pd(_mm512_add_epi64(j2, vthree), pq, 8);
            const __m512d piw =
                _mm512_fmadd_pd(frac, _mm512_sub_pd(p1, p0), p0);
            const __m512d thw =
                _mm512_fmadd_pd(frac, _mm512_sub_pd(q1, q0), q0);

            // xoshiro256++ round for all eight lanes (mirrors PathRng)
            const __m512i u = _mm512_add_epi64(
                _mm512_rol_epi64(_mm512_add_epi64(x0, x3), 23), x0);
            const __m512i tt = _mm512_slli_epi64(x1, 17);
            x2 = _mm512_xor_epi64(x2, x0);
            x3 = _mm512_xor_epi64(x3, x1);
            x1 = _mm512_xor_epi64(x1, x2);
            x0 = _mm512_xor_epi64(x0, x3);
            x2 = _mm512_xor_epi64(x2, tt);
            x3 = _mm512_rol_epi64(x3, 45);

            // ziggurat rectangle test (mirrors PathRng::normal)
            const __m512i li2 =
                _mm512_slli_epi64(_mm512_and_epi64(u, vl255), 1);
            const __m512d zsc = _mm512_i64gather_pd(li2, zt.t, 8);
            const __m512d zac =
                _mm512_i64gather_pd(_mm512_add_epi64(li2, vone), zt.t, 8);
            const __m512d zmag = _mm512_mul_pd(
                _mm512_cvtepu64_pd(_mm512_srli_epi64(u, 11)), zsc);
            const __m512i sgn =
                _mm512_slli_epi64(_mm512_and_epi64(u, vl256), 55);
            __m512d vz = _mm512_castsi512_pd(
                _mm512_or_epi64(_mm512_castpd_si512(zmag), sgn));
            const __mmask8 mrej =
                amg & _mm512_cmp_pd_mask(zmag, zac, _CMP_NLT_UQ);
            if (mrej) [[unlikely]] {
                alignas(64) double zf[8], zm[8];
                alignas(64) std::uint64_t uu[8], a0[8], a1[8], a2[8], a3[8];
                _mm512_store_pd(zf, vz);
                _mm512_store_pd(zm, zmag);
                _mm512_store_epi64(uu, u);
                _mm512_store_epi64(a0, x0);
                _mm512_store_epi64(a1, x1);
                _mm512_store_epi64(a2, x2);
                _mm512_store_epi64(a3, x3);
                for (int l = 0; l < 8; ++l) {
                    if (!(mrej & (1u << l))) continue;
                    PathRng rr;
                    rr.set_state({a0[l], a1[l], a2[l], a3[l]});
                    zf[l] = rr.normal_rare(static_cast<int>(uu[l] & 255),
                                           zm[l], (uu[l] & 256) << 55);
                    const auto sw = rr.state();
                    a0[l] = sw[0];
                    a1[l] = sw[1];
                    a2[l] = sw[2];
                    a3[l] = sw[3];
                }
                vz = _mm512_load_pd(zf);
                x0 = _mm512_load_epi64(a0);
                x1 = _mm512_load_epi64(a1);
                x2 = _mm512_load_epi64(a2);
                x3 = _mm512_load_epi64(a3);
            }

            // Euler update (mirrors euler_step)
            const __m512d adj = _mm512_fmadd_pd(vsg, thw, vmur);
            const __m512d drift = _mm512_fmadd_pd(
                adj, piw, _mm512_fmadd_pd(vrr, vW, vnegc));
            const __m512d vol =
                _mm512_mul_pd(_mm512_mul_pd(vsg, piw), vsqdt);
            const __m512d Wn = _mm512_fmadd_pd(
                vol, vz, _mm512_fmadd_pd(drift, vdt, vW));
            const __m512d pr =
                _mm512_mul_pd(vhalf, _mm512_mul_pd(thw, thw));

            const __mmask8 mexit = static_cast<__mmask8>(
                amg & (_mm512_cmp_pd_mask(Wn, vbb, _CMP_LE_OQ) |
                       _mm512_cmp_pd_mask(Wn, vws, _CMP_GE_OQ)));
            vk = _mm512_sub_epi64(vk, vone);
            const __mmask8 alive = static_cast<__mmask8>(amg & ~mexit);
            const __mmask8 mdone = static_cast<__mmask8>(
                alive &
                _mm512_cmpeq_epi64_mask(vk, _mm512_setzero_si512()));
            vpen = _mm512_mask3_fmadd_pd(pr, vdt, vpen, alive);
            const __m512d vWold = vW;
            vW = _mm512_mask_mov_pd(vW, alive, Wn);

            _mm512_store_pd(vc.W + 8 * g, vW);
            _mm512_store_pd(vc.pen + 8 * g, vpen);
            _mm512_store_epi64(vc.s0 + 8 * g, x0);
            _mm512_store_epi64(vc.s1 + 8 * g, x1);
            _mm512_store_epi64(vc.s2 + 8 * g, x2);
            _mm512_store_epi64(vc.s3 + 8 * g, x3);
            _mm512_store_epi64(vc.k_left + 8 * g, vk);

            if (mexit | mdone) [[unlikely]] {
                alignas(64) double preW[8], postW[8], prate[8];
                _mm512_store_pd(preW, vWold);
                _mm512_store_pd(postW, Wn);
                _mm512_store_pd(prate, pr);
                vec_events(vc, g, mexit, mdone, preW, postW, prate);
            }
        }
    }
}

#endif  // RUIN_MC_AVX512

// Chooses the wide engine when it is compiled in and the chunk can use the
// fused table (the only case it implements).
void run_chunk_auto(const path_ctx& ctx, double w0, std::uint64_t seed,
                    long long begin, long long end, double inv_eps,
                    double* xs, unsigned char* safe) {
#if RUIN_MC_AVX512
    if (ctx.pq != nullptr) {
        run_chunk_vec(ctx, w0, seed, begin, end, inv_eps, xs, safe);
        return;
    }
#endif
    run_chunk(ctx, w0, seed, begin, end, inv_eps, xs, safe);
}

void validate_sim(const ModelParams& p, const PolicyTable& pi_policy,
                  const PolicyTable& theta_policy, const SimConfig& sim) {
    validate(p);
    if (!(p.lambda > 0.0))
        throw ParamError("lambda must be positive for simulation");
    if (!(sim.dt > 0.0)) throw ParamError("dt must be positive");
    if (!(sim.t_max > 0.0)) throw ParamError("t_max must be positive");
    if (sim.n_paths < 1) throw ParamError("n_paths must be at least 1");
    if (!std::isfinite(sim.w0)) throw ParamError("w0 must be finite");
    auto check_table = [](const PolicyTable& t, const char* name) {
        if (t.grid.n() == 0) return;  // empty means identically zero
        if (t.values.size() != t.grid.n())
            throw ParamError(std::string(name) +
                             " table and its grid are inconsistent");
        for (double v : t.values)
            if (!std::isfinite(v))
                throw ParamError(std::string(name) +
                                 " table contains non-finite values");
    };
    check_table(pi_policy, "pi");
    check_table(theta_policy, "theta");
    if (p.eps == 0.0) {
        for (double v : theta_policy.values)
            if (v != 0.0)
                throw ParamError(
                    "eps = 0 requires an identically zero theta table");
    }
}

// 1/eps with eps = 0 mapped to 0, so the (then identically zero) penalty
// never multiplies infinity.
double inverse_eps(const ModelParams& p) {
    return p.eps > 0.0 ? 1.0 / p.eps : 0.0;
}

Estimate reduce(const std::vector<double>& xs,
                const std::vector<unsigned char>& safe) {
    const long long n = static_cast<long long>(xs.size());
    double sx = 0.0, sxx = 0.0;
    long long nsafe = 0;
    for (long long i = 0; i < n; ++i) {
        sx += xs[i];
        sxx += xs[i] * xs[i];
        nsafe += safe[i];
    }
    Estimate e;
    e.n_paths = n;
    e.mean = sx / static_cast<double>(n);
    if (n > 1) {
        double var =
            (sxx - static_cast<double>(n) * e.mean * e.mean) /
            static_cast<double>(n - 1);
        if (var < 0.0) var = 0.0;  // cancellation on constant samples
        e.std_error = std::sqrt(var / static_cast<double>(n));
    }
    e.fraction_safe_hit =
        static_cast<double>(nsafe) / static_cast<double>(n);
    return e;
}

}  // namespace

PathOutcome simulate_path(const ModelParams& p, const PolicyTable& pi_policy,
                          const PolicyTable& theta_policy,
                          const SimConfig& sim, PathRng& rng) {
    validate_sim(p, pi_policy, theta_policy, sim);
    const engine e = make_engine(p, pi_policy, theta_policy, sim);
    PathOutcome o;
    if (instant_outcome(e.ctx, sim.w0, &o)) return o;
    path_state st = start_path(e.ctx, sim.w0, rng);
    o = run_path(e.ctx, st);
    rng = st.rng;  // hand the advanced generator back to the caller
    return o;
}

Estimate estimate_objective(const ModelParams& p,
                            const PolicyTable& pi_policy,
                            const PolicyTable& theta_policy,
                            const SimConfig& sim) {
    validate_sim(p, pi_policy, theta_policy, sim);
    const engine e = make_engine(p, pi_policy, theta_policy, sim);
    const double inv_eps = inverse_eps(p);
    const long long n = sim.n_paths;
    std::vector<double> xs(static_cast<std::size_t>(n));
    std::vector<unsigned char> safe(static_cast<std::size_t>(n));
    const long long n_chunks = (n + chunk_paths - 1) / chunk_paths;
#pragma omp parallel for schedule(dynamic)
    for (long long ch = 0; ch < n_chunks; ++ch) {
        const long long begin = ch * chunk_paths;
        const long long end = begin + chunk_paths < n ? begin + chunk_paths : n;
        run_chunk_auto(e.ctx, sim.w0, sim.seed, begin, end, inv_eps,
                       xs.data(), safe.data());
    }
    return reduce(xs, safe);
}

Estimate estimate_objective_serial(const ModelParams& p,
                                   const PolicyTable& pi_policy,
                                   const PolicyTable& theta_policy,
                                   const SimConfig& sim) {
    validate_sim(p, pi_policy, theta_policy, sim);
    const engine e = make_engine(p, pi_policy, theta_policy, sim);
    const double inv_eps = inverse_eps(p);
    const long long n = sim.n_paths;
    std::vector<double> xs(static_cast<std::size_t>(n));
    std::vector<unsigned char> safe(static_cast<std::size_t>(n));
    for (long long i = 0; i < n; ++i) {
        PathOutcome o;
        if (!instant_outcome(e.ctx, sim.w0, &o)) {
            path_state st = start_path(
                e.ctx, sim.w0,
                PathRng(sim.seed, static_cast<std::uint64_t>(i)));
            o = run_path(e.ctx, st);
        }
        xs[static_cast<std::size_t>(i)] = objective_value(o, inv_eps);
        safe[static_cast<std::size_t>(i)] =
            o.exit_reason == ExitReason::safe_hit ? 1 : 0;
    }
    return reduce(xs, safe);
}

double safe_level_frequency(const ModelParams& p,
                            const PolicyTable& pi_policy,
                            const SimConfig& sim) {
    // theta == 0, built on pi's grid (rather than the empty table meaning
    // the same thing) so the engine can take its fused-table path; the
    // sampled values and hence the trajectories are identical either way.
    PolicyTable zero_theta;
    if (pi_policy.grid.n() != 0) {
        zero_theta.grid = pi_policy.grid;
        zero_theta.values.assign(pi_policy.grid.n(), 0.0);
    }
    return estimate_objective(p, pi_policy, zero_theta, sim)
        .fraction_safe_hit;
}

}  // namespace ruin
