#pragma once

// Closed-form FLOPs accounting for the attention variants and a wall-clock
// scaling benchmark. The formulas attribute no cost to softmax, norms, or
// the gate MLP, matching the accounting under which the gated and plain
// linear variants cost the same; add_auxiliary_costs() gives the fuller
// number when honest totals are wanted.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cagevit/attention.hpp"
#include "cagevit/error.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

struct FlopsReport {
    AttentionKind kind;
    std::size_t h = 0, w = 0, d = 0;
    std::size_t param = 0;  // R for SRA, p for the linear kinds
    std::uint64_t flops = 0;
    std::string formula_id;  // "Eq9" or "Eq10"
    std::string note;
};

namespace detail {

inline std::uint64_t to_u64(unsigned __int128 v, const char* what) {
    if (v > static_cast<unsigned __int128>(UINT64_MAX))
        throw ContractError(std::string(what) + " overflows 64-bit FLOP count");
    return static_cast<std::uint64_t>(v);
}

}  // namespace detail

// 2 h^2 w^2 d / R^2 + h w d^2 R^2, exact integers.
inline FlopsReport flops_sra(std::size_t h, std::size_t w, std::size_t d, std::size_t r) {
    if (h == 0 || w == 0 || d == 0 || r == 0)
        throw ContractError("flops_sra needs positive h, w, d, R");
    const unsigned __int128 hw = static_cast<unsigned __int128>(h) * w;
    const unsigned __int128 r2 = static_cast<unsigned __int128>(r) * r;
    if ((hw * hw) % r2 != 0)
        throw ContractError("flops_sra needs R^2 to divide h^2 w^2 for integer exactness");
    const unsigned __int128 total = 2 * (hw * hw / r2) * d + hw * d * d * r2;
    FlopsReport rep;
    rep.kind = AttentionKind::SRA;
    rep.h = h;
    rep.w = w;
    rep.d = d;
    rep.param = r;
    rep.flops = detail::to_u64(total, "flops_sra");
    rep.formula_id = "Eq9";
    return rep;
}

// 2 h w p^2 d.
inline FlopsReport flops_linear(std::size_t h, std::size_t w, std::size_t p, std::size_t d) {
    if (h == 0 || w == 0 || p == 0 || d == 0)
        throw ContractError("flops_linear needs positive h, w, p, d");
    const unsigned __int128 total =
        2 * static_cast<unsigned __int128>(h) * w * p * p * d;
    FlopsReport rep;
    rep.kind = AttentionKind::LinearSRA;
    rep.h = h;
    rep.w = w;
    rep.d = d;
    rep.param = p;
    rep.flops = detail::to_u64(total, "flops_linear");
    rep.formula_id = "Eq10";
    return rep;
}

// The gated variant reports the identical count; the gate MLP and the
// elementwise product are excluded from this accounting.
inline FlopsReport flops_gated_linear(std::size_t h, std::size_t w, std::size_t p, std::size_t d) {
    FlopsReport rep = flops_linear(h, w, p, d);
    rep.kind = AttentionKind::GatedLinearSRA;
    rep.note = "gate-MLP cost excluded from this accounting";
    return rep;
}

// Adds the terms the headline formulas leave out (gate MLP, elementwise
// product, softmax exponentials). Never used by the formula-identity checks.
inline std::uint64_t add_auxiliary_costs(const FlopsReport& rep, std::size_t n_fusion,
                                         std::size_t gate_hidden) {
    unsigned __int128 total = rep.flops;
    const unsigned __int128 hw = static_cast<unsigned __int128>(rep.h) * rep.w;
    if (rep.kind == AttentionKind::GatedLinearSRA) {
        const unsigned __int128 p2d =
            static_cast<unsigned __int128>(rep.param) * rep.param * rep.d;
        total += 2 * static_cast<unsigned __int128>(n_fusion) * rep.d * gate_hidden;
        total += 2 * static_cast<unsigned __int128>(gate_hidden) * p2d;
        total += p2d;  // elementwise product
    }
    // softmax: one exp per attention weight
    if (rep.kind == AttentionKind::SRA)
        total += hw * hw / (rep.param * rep.param);
    else
        total += hw * static_cast<unsigned __int128>(rep.param) * rep.param;
    return detail::to_u64(total, "add_auxiliary_costs");
}

// ---------------------------------------------------------------------------
// wall-clock scaling
// ---------------------------------------------------------------------------

struct ScalingFit {
    std::vector<std::size_t> lengths;
    std::vector<double> median_ns;
    double alpha = 0.0;     // fitted exponent of t ~ c * N^alpha
    double residual = 0.0;  // mean squared residual of the log-log fit
};

struct BenchSettings {
    std::size_t d = 32;
    std::size_t n_heads = 4;
    std::size_t pool = 7;
    std::size_t reduction = 2;
    std::size_t n_fusion = 4;
    std::uint64_t seed = 1;
    std::size_t warmup = 2;
};

// Deterministic benchmark input for a given (seed, length); exposed so the
// generation contract is testable on its own.
inline Tensor<float> bench_input(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (n + 1)));
    std::vector<float> data(n * d);
    rng.fill_uniform(data, -1.0, 1.0);
    return Tensor<float>({n, d}, std::move(data));
}

namespace detail {

// Largest factor pair h*w == n with h <= w; the benchmark grid.
inline std::pair<std::size_t, std::size_t> bench_grid(std::size_t n) {
    std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    while (h > 1 && n % h != 0) --h;
    return {h, n / h};
}

template <typename T>
AttentionParams<T> random_attention_params(Rng& rng, std::size_t d, std::size_t r) {
    auto mk = [&](std::size_t rows, std::size_t cols) {
        std::vector<T> v(rows * cols);
        rng.fill_uniform(v, -0.05, 0.05);
        return Tensor<T>({rows, cols}, std::move(v));
    };
    AttentionParams<T> p;
    p.wq = mk(d, d);
    p.wk = mk(d, d);
    p.wv = mk(d, d);
    p.wo = mk(d, d);
    p.bq = Tensor<T>::zeros({1, d});
    p.bk = Tensor<T>::zeros({1, d});
    p.bv = Tensor<T>::zeros({1, d});
    p.bo = Tensor<T>::zeros({1, d});
    p.ws = mk(r * r * d, d);
    p.sr_norm = LayerNormParams<T>{Tensor<T>::ones({d}), Tensor<T>::zeros({d}), T(1e-5)};
    return p;
}

}  // namespace detail

// Median wall time per sequence length for one attention variant, and the
// least-squares exponent of the log-log (N, time) points. Forward passes
// only, single-threaded, warmup iterations excluded.
inline ScalingFit bench(AttentionKind kind, const BenchSettings& settings,
                        const std::vector<std::size_t>& lengths, std::size_t repeats) {
    if (lengths.size() < 5) throw ContractError("bench needs at least 5 lengths");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw ContractError("bench lengths must be strictly increasing");
    if (lengths.back() < 16 * lengths.front())
        throw ContractError("bench lengths must span at least 16x");
    if (repeats < 5) throw ContractError("bench needs at least 5 repeats");

    Rng rng(settings.seed);
    ScalingFit fit;
    fit.lengths = lengths;
    volatile float sink = 0.0f;

    for (const std::size_t n : lengths) {
        const auto [h, w] = detail::bench_grid(n);
        AttentionConfig cfg;
        cfg.kind = kind;
        cfg.n_heads = settings.n_heads;
        cfg.d = settings.d;
        cfg.reduction = settings.reduction;
        cfg.pool = settings.pool;
        cfg.h = h;
        cfg.w = w;
        cfg.validate();

        auto params = detail::random_attention_params<float>(rng, settings.d, settings.reduction);
        GateParams<float> gate;
        {
            const std::size_t gin = settings.n_fusion * settings.d;
            const std::size_t gout = settings.pool * settings.pool * settings.d;
            std::vector<float> w1(gin * settings.d), w2(settings.d * gout);
            rng.fill_uniform(w1, -0.05, 0.05);
            rng.fill_uniform(w2, -0.05, 0.05);
            gate.w1 = Tensor<float>({gin, settings.d}, std::move(w1));
            gate.b1 = Tensor<float>::zeros({1, settings.d});
            gate.w2 = Tensor<float>({settings.d, gout}, std::move(w2));
            gate.b2 = Tensor<float>::zeros({1, gout});
        }
        Tensor<float> x = bench_input(n, settings.d, settings.seed);
        Tensor<float> fusion_values = bench_input(settings.n_fusion, settings.d, settings.seed + 1);
        const TokenLayout layout = TokenLayout::full_grid(n);

        auto run_once = [&]() -> float {
            Tensor<float> out;
            switch (kind) {
                case AttentionKind::Full: out = mha(x, params, settings.n_heads); break;
                case AttentionKind::SRA: out = sra(x, params, cfg, layout); break;
                case AttentionKind::LinearSRA: out = linear_sra(x, params, cfg, layout); break;
                case AttentionKind::GatedLinearSRA:
                    out = gated_linear_sra(x, fusion_values, params, gate, cfg, layout);
                    break;
            }
            return out.data()[0];
        };

        for (std::size_t i = 0; i < settings.warmup; ++i) sink = sink + run_once();
        std::vector<double> times;
        times.reserve(repeats);
        for (std::size_t i = 0; i < repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            sink = sink + run_once();
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() * 1.0);
        }
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];
        if (median < 1000.0)
            throw MeasurementError(
                "timer resolution too coarse at N=" + std::to_string(n) +
                "; rerun with larger sequence lengths");
        fit.median_ns.push_back(median);
    }

    // least squares on (log N, log t)
    const std::size_t m = lengths.size();
    double mx = 0, my = 0;
    std::vector<double> xs(m), ys(m);
    for (std::size_t i = 0; i < m; ++i) {
        xs[i] = std::log(static_cast<double>(lengths[i]));
        ys[i] = std::log(fit.median_ns[i]);
        mx += xs[i];
        my += ys[i];
    }
    mx /= m;
    my /= m;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < m; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    fit.alpha = sxy / sxx;
    const double intercept = my - fit.alpha * mx;
    double ss = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double r = ys[i] - (intercept + fit.alpha * xs[i]);
        ss += r * r;
    }
    fit.residual = ss / m;
    if (!std::isfinite(fit.alpha)) throw MeasurementError("scaling fit produced a non-finite exponent");
    return fit;
}

// CSV schema: kind,N,h,w,d,param,flops,median_ns,alpha per length, then a
// summary comment line.
inline void write_scaling_csv(std::ostream& os, AttentionKind kind, const BenchSettings& settings,
                              const ScalingFit& fit) {
    os << "kind,N,h,w,d,param,flops,median_ns,alpha\n";
    for (std::size_t i = 0; i < fit.lengths.size(); ++i) {
        const std::size_t n = fit.lengths[i];
        const auto [h, w] = detail::bench_grid(n);
        std::uint64_t flops = 0;
        std::size_t param = 0;
        switch (kind) {
            case AttentionKind::Full:
                // dominant attention matmuls, 2 N^2 d
                flops = detail::to_u64(
                    2 * static_cast<unsigned __int128>(n) * n * settings.d, "full flops");
                break;
            case AttentionKind::SRA:
                flops = flops_sra(h, w, settings.d, settings.reduction).flops;
                param = settings.reduction;
                break;
            case AttentionKind::LinearSRA:
                flops = flops_linear(h, w, settings.pool, settings.d).flops;
                param = settings.pool;
                break;
            case AttentionKind::GatedLinearSRA:
                flops = flops_gated_linear(h, w, settings.pool, settings.d).flops;
                param = settings.pool;
                break;
        }
        os << to_string(kind) << "," << n << "," << h << "," << w << "," << settings.d << ","
           << param << "," << flops << "," << static_cast<std::uint64_t>(fit.median_ns[i]) << ","
           << fit.alpha << "\n";
    }
    os << "# alpha=" << fit.alpha << " residual=" << fit.residual << "\n";
}

}  // namespace cagevit
