#pragma once

// The four attention variants: full multi-head attention, spatial reduction
// attention (keys/values block-reshaped and projected), linear SRA
// (keys/values average-pooled to a fixed p x p grid), and gated linear SRA
// (pooled values multiplied elementwise by a gate computed from the fusion
// tokens' value projections).
//
// Grid mapping: key/value rows are scattered onto the h x w patch grid at
// each token's original position before reduction; grid positions with no
// token (dropped minors) stay zero, and fusion tokens never enter the grid.

#include <cstddef>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "cagevit/error.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

enum class AttentionKind { Full, SRA, LinearSRA, GatedLinearSRA };

inline const char* to_string(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::Full: return "full";
        case AttentionKind::SRA: return "sra";
        case AttentionKind::LinearSRA: return "linear_sra";
        case AttentionKind::GatedLinearSRA: return "gated_linear_sra";
    }
    return "?";
}

struct AttentionConfig {
    AttentionKind kind = AttentionKind::GatedLinearSRA;
    std::size_t n_heads = 1;
    std::size_t d = 0;
    std::size_t reduction = 1;    // R, SRA only
    std::size_t pool = 1;         // p, linear kinds
    std::size_t gate_hidden = 0;  // gated kind; 0 means d
    std::size_t h = 0, w = 0;     // token grid, reduced kinds only

    void validate() const {
        if (d == 0 || n_heads == 0) throw ContractError("attention needs positive d and n_heads");
        if (d % n_heads != 0)
            throw DimensionError("width " + std::to_string(d) + " is not divisible by " +
                                 std::to_string(n_heads) + " heads");
        if (kind == AttentionKind::Full) return;
        if (h == 0 || w == 0) throw ContractError("reduced attention needs a token grid");
        if (kind == AttentionKind::SRA) {
            if (reduction == 0 || h % reduction != 0 || w % reduction != 0)
                throw DimensionError("reduction " + std::to_string(reduction) +
                                     " does not divide grid " + std::to_string(h) + "x" +
                                     std::to_string(w));
        } else {
            if (pool == 0 || h < pool || w < pool)
                throw DimensionError("pool " + std::to_string(pool) + " exceeds grid " +
                                     std::to_string(h) + "x" + std::to_string(w));
        }
    }
};

// Maps each sequence token to its grid slot; kNoGrid marks fusion tokens.
struct TokenLayout {
    static constexpr std::ptrdiff_t kNoGrid = -1;
    std::vector<std::ptrdiff_t> grid_pos;

    static TokenLayout full_grid(std::size_t n) {
        TokenLayout l;
        l.grid_pos.resize(n);
        for (std::size_t i = 0; i < n; ++i) l.grid_pos[i] = static_cast<std::ptrdiff_t>(i);
        return l;
    }

    std::vector<std::size_t> grid_tokens() const {
        std::vector<std::size_t> t;
        for (std::size_t i = 0; i < grid_pos.size(); ++i)
            if (grid_pos[i] != kNoGrid) t.push_back(i);
        return t;
    }

    std::vector<std::size_t> fusion_tokens() const {
        std::vector<std::size_t> t;
        for (std::size_t i = 0; i < grid_pos.size(); ++i)
            if (grid_pos[i] == kNoGrid) t.push_back(i);
        return t;
    }

    void validate(std::size_t n_tokens, std::size_t n_cells) const {
        if (grid_pos.size() != n_tokens)
            throw ContractError("token layout size does not match the sequence");
        std::vector<char> seen(n_cells, 0);
        for (const std::ptrdiff_t g : grid_pos) {
            if (g == kNoGrid) continue;
            if (g < 0 || static_cast<std::size_t>(g) >= n_cells)
                throw ContractError("token grid position out of range");
            if (seen[static_cast<std::size_t>(g)]++)
                throw ContractError("duplicate token grid position");
        }
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gain;  // [d]
    Tensor<T> bias;  // [d]
    T eps = T(1e-5);
};

template <typename T>
struct AttentionParams {
    Tensor<T> wq, bq;  // [d, d], [1, d]
    Tensor<T> wk, bk;
    Tensor<T> wv, bv;
    Tensor<T> wo, bo;
    // SRA only
    Tensor<T> ws;  // [R*R*d, d]
    std::optional<LayerNormParams<T>> sr_norm;
};

// Gate(V^f): two-layer MLP over the concatenated fusion-token values,
// squashed by a sigmoid and reshaped to the pooled value grid. forced_value
// bypasses the MLP with an exact constant, which makes the gate-identity
// contract expressible in tests.
template <typename T>
struct GateParams {
    Tensor<T> w1, b1;  // [n_f*d, hidden], [1, hidden]
    Tensor<T> w2, b2;  // [hidden, p*p*d], [1, p*p*d]
    std::optional<T> forced_value;

    static GateParams constant(T value) {
        GateParams g;
        g.forced_value = value;
        return g;
    }
};

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

// softmax(Q K^T / sqrt(d_head)) V for one head.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError("attention expects 2-D Q, K, V");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
        throw DimensionError("attention shapes disagree: Q" + detail::shape_str(q.shape()) +
                             " K" + detail::shape_str(k.shape()) + " V" +
                             detail::shape_str(v.shape()));
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
    Tensor<T> scores = scale(matmul(q, transpose(k)), inv_sqrt);
    Tensor<T> weights = softmax(scores, 1);
    return matmul(weights, v);
}

namespace detail {

// Column split into heads, per-head attention, concat, output projection.
// Inputs carry the Q/K/V projections already; keys and values may have been
// reduced to fewer rows than the queries.
template <typename T>
Tensor<T> per_head_attention(const Tensor<T>& q_full, const Tensor<T>& k_full,
                             const Tensor<T>& v_full, const AttentionParams<T>& params,
                             std::size_t n_heads) {
    const std::size_t d = q_full.dim(1);
    const std::size_t dh = d / n_heads;
    std::vector<Tensor<T>> heads;
    heads.reserve(n_heads);
    for (std::size_t i = 0; i < n_heads; ++i) {
        Tensor<T> qi = slice_cols(q_full, i * dh, (i + 1) * dh);
        Tensor<T> ki = slice_cols(k_full, i * dh, (i + 1) * dh);
        Tensor<T> vi = slice_cols(v_full, i * dh, (i + 1) * dh);
        heads.push_back(attention(qi, ki, vi));
    }
    Tensor<T> merged = n_heads == 1 ? heads.front() : concat_cols(heads);
    return add(matmul(merged, params.wo), params.bo);
}

// Projected token rows scattered to their grid slots; vacant slots stay zero.
// With no grid tokens at all the grid is a plain zero constant.
template <typename T>
Tensor<T> scatter_to_grid(const Tensor<T>& rows, const TokenLayout& layout, std::size_t n_cells) {
    const std::vector<std::size_t> tokens = layout.grid_tokens();
    if (tokens.empty()) return Tensor<T>::zeros({n_cells, rows.dim(1)});
    std::vector<std::size_t> cells;
    cells.reserve(tokens.size());
    for (const std::size_t t : tokens) cells.push_back(static_cast<std::size_t>(layout.grid_pos[t]));
    Tensor<T> picked = tokens.size() == rows.dim(0) && layout.fusion_tokens().empty()
                           ? rows
                           : gather_rows(rows, tokens);
    return scatter_rows(picked, cells, n_cells);
}

}  // namespace detail

// Full multi-head attention, Q/K/V projected from the same sequence.
template <typename T>
Tensor<T> mha(const Tensor<T>& x, const AttentionParams<T>& params, std::size_t n_heads) {
    if (x.ndim() != 2) throw DimensionError("mha expects an [N, d] sequence");
    if (x.dim(1) % n_heads != 0)
        throw DimensionError("width " + std::to_string(x.dim(1)) + " is not divisible by " +
                             std::to_string(n_heads) + " heads");
    Tensor<T> q = add(matmul(x, params.wq), params.bq);
    Tensor<T> k = add(matmul(x, params.wk), params.bk);
    Tensor<T> v = add(matmul(x, params.wv), params.bv);
    return detail::per_head_attention(q, k, v, params, n_heads);
}

// SR(x) = Norm(Reshape(x, R) W^S): each R x R block of the h x w grid is
// concatenated into one row of width R*R*d, projected back to width d, then
// layer-normalized (the norm may be disabled).
template <typename T>
Tensor<T> spatial_reduce(const Tensor<T>& x, std::size_t h, std::size_t w, std::size_t r,
                         const Tensor<T>& ws,
                         const LayerNormParams<std::type_identity_t<T>>* norm) {
    if (x.ndim() != 2 || x.dim(0) != h * w)
        throw DimensionError("spatial_reduce expects [h*w, d] rows");
    if (r == 0 || h % r != 0 || w % r != 0)
        throw DimensionError("reduction " + std::to_string(r) + " does not divide grid " +
                             std::to_string(h) + "x" + std::to_string(w));
    const std::size_t d = x.dim(1);
    if (ws.dim(0) != r * r * d)
        throw DimensionError("W^S expects " + std::to_string(r * r * d) + " input features");

    const std::size_t bh = h / r, bw = w / r;
    std::vector<std::size_t> perm;
    perm.reserve(h * w);
    for (std::size_t bi = 0; bi < bh; ++bi)
        for (std::size_t bj = 0; bj < bw; ++bj)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < r; ++j)
                    perm.push_back((bi * r + i) * w + (bj * r + j));

    Tensor<T> blocks = reshape(gather_rows(x, perm), {bh * bw, r * r * d});
    Tensor<T> projected = matmul(blocks, ws);
    if (norm == nullptr) return projected;
    return layer_norm(projected, norm->gain, norm->bias, norm->eps);
}

namespace detail {

// Shared body of the two pooled variants. `gate` multiplies the pooled
// values elementwise when present.
template <typename T>
Tensor<T> pooled_attention_core(const Tensor<T>& x, const AttentionParams<T>& params,
                                const AttentionConfig& config, const TokenLayout& layout,
                                const Tensor<T>* gate) {
    config.validate();
    layout.validate(x.dim(0), config.h * config.w);
    if (x.dim(1) != config.d) throw DimensionError("sequence width does not match config");

    Tensor<T> q = add(matmul(x, params.wq), params.bq);
    Tensor<T> k = add(matmul(x, params.wk), params.bk);
    Tensor<T> v = add(matmul(x, params.wv), params.bv);

    const std::size_t p = config.pool;
    Tensor<T> k_grid = scatter_to_grid(k, layout, config.h * config.w);
    Tensor<T> v_grid = scatter_to_grid(v, layout, config.h * config.w);
    Tensor<T> k_red = avg_pool_2d(reshape(k_grid, {config.h, config.w, config.d}), p);
    Tensor<T> v_red = avg_pool_2d(reshape(v_grid, {config.h, config.w, config.d}), p);
    if (gate != nullptr) {
        if (gate->ndim() != 2 || gate->dim(0) != p * p || gate->dim(1) != config.d)
            throw ContractError("gate shape does not match the pooled value grid");
        v_red = mul(v_red, *gate);
    }
    return per_head_attention(q, k_red, v_red, params, config.n_heads);
}

}  // namespace detail

// SRA: queries are full length; keys and values are scattered to the grid
// and spatially reduced by R before attention.
template <typename T>
Tensor<T> sra(const Tensor<T>& x, const AttentionParams<T>& params, const AttentionConfig& config,
              const TokenLayout& layout) {
    config.validate();
    layout.validate(x.dim(0), config.h * config.w);
    if (x.dim(1) != config.d) throw DimensionError("sequence width does not match config");

    Tensor<T> q = add(matmul(x, params.wq), params.bq);
    Tensor<T> k = add(matmul(x, params.wk), params.bk);
    Tensor<T> v = add(matmul(x, params.wv), params.bv);

    const LayerNormParams<T>* norm = params.sr_norm ? &*params.sr_norm : nullptr;
    Tensor<T> k_grid = detail::scatter_to_grid(k, layout, config.h * config.w);
    Tensor<T> v_grid = detail::scatter_to_grid(v, layout, config.h * config.w);
    Tensor<T> k_red = spatial_reduce(k_grid, config.h, config.w, config.reduction, params.ws, norm);
    Tensor<T> v_red = spatial_reduce(v_grid, config.h, config.w, config.reduction, params.ws, norm);
    return detail::per_head_attention(q, k_red, v_red, params, config.n_heads);
}

template <typename T>
Tensor<T> sra(const Tensor<T>& x, const AttentionParams<T>& params, const AttentionConfig& config) {
    return sra(x, params, config, TokenLayout::full_grid(x.dim(0)));
}

// Linear SRA: keys and values average-pooled to p*p rows, queries full length.
template <typename T>
Tensor<T> linear_sra(const Tensor<T>& x, const AttentionParams<T>& params,
                     const AttentionConfig& config, const TokenLayout& layout) {
    return detail::pooled_attention_core<T>(x, params, config, layout, nullptr);
}

template <typename T>
Tensor<T> linear_sra(const Tensor<T>& x, const AttentionParams<T>& params,
                     const AttentionConfig& config) {
    return linear_sra(x, params, config, TokenLayout::full_grid(x.dim(0)));
}

// gate = sigmoid(MLP(concat(V^f))) reshaped to the pooled grid.
template <typename T>
Tensor<T> gate_values(const GateParams<T>& gate, const Tensor<T>& fusion_values, std::size_t p,
                      std::size_t d) {
    if (gate.forced_value.has_value()) return Tensor<T>::full({p * p, d}, *gate.forced_value);
    if (fusion_values.ndim() != 2 || fusion_values.dim(1) != d)
        throw ContractError("fusion values must be [n_f, d]");
    Tensor<T> flat = reshape(fusion_values, {1, fusion_values.size()});
    if (gate.w1.dim(0) != flat.dim(1))
        throw ContractError("gate input width " + std::to_string(flat.dim(1)) +
                            " does not match gate parameters (" + std::to_string(gate.w1.dim(0)) +
                            ")");
    Tensor<T> hidden = gelu(add(matmul(flat, gate.w1), gate.b1));
    Tensor<T> out = sigmoid(add(matmul(hidden, gate.w2), gate.b2));
    if (out.dim(1) != p * p * d)
        throw ContractError("gate output width does not match the pooled value grid");
    return reshape(out, {p * p, d});
}

// Gated linear SRA: head = Attention(Q, SR(K), SR(V) ⊙ Gate(V^f)).
// fusion_values must be the value projections of the fusion-tagged tokens of
// the current layer.
template <typename T>
Tensor<T> gated_linear_sra(const Tensor<T>& x, const Tensor<T>& fusion_values,
                           const AttentionParams<T>& params, const GateParams<T>& gate,
                           const AttentionConfig& config, const TokenLayout& layout) {
    Tensor<T> g = gate_values(gate, fusion_values, config.pool, config.d);
    return detail::pooled_attention_core(x, params, config, layout, &g);
}

template <typename T>
Tensor<T> gated_linear_sra(const Tensor<T>& x, const Tensor<T>& fusion_values,
                           const AttentionParams<T>& params, const GateParams<T>& gate,
                           const AttentionConfig& config) {
    return gated_linear_sra(x, fusion_values, params, gate, config,
                            TokenLayout::full_grid(x.dim(0)));
}

}  // namespace cagevit
