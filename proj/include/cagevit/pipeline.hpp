#pragma once

// Token pipeline: patchify an image, linearly embed patches, fuse the minor
// tokens into a few representation tokens via per-head MLPs over their
// concatenation, and assemble the encoder input with positional and fusion
// embeddings.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cagevit/error.hpp"
#include "cagevit/salience.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

// Rows of the output are the row-major flattening of each ph x pw x C patch,
// in patch raster order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t ph, std::size_t pw) {
    if (image.ndim() != 3) throw DimensionError("patchify expects an [H, W, C] image");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0)
        throw DimensionError("patch size " + std::to_string(ph) + "x" + std::to_string(pw) +
                             " does not divide image " + std::to_string(h) + "x" +
                             std::to_string(w));
    const std::size_t rows = h / ph, cols = w / pw;
    const std::size_t flat = ph * pw * c;
    std::vector<T> out(rows * cols * flat);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q) {
            T* dst = out.data() + (r * cols + q) * flat;
            for (std::size_t i = 0; i < ph; ++i)
                for (std::size_t j = 0; j < pw; ++j) {
                    const T* src = image.data().data() + ((r * ph + i) * w + (q * pw + j)) * c;
                    for (std::size_t k = 0; k < c; ++k) *dst++ = src[k];
                }
        }
    return Tensor<T>({rows * cols, flat}, std::move(out));
}

// Exact inverse of patchify for a (rows x cols) grid of ph x pw x C patches.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t grid_rows, std::size_t grid_cols,
                     std::size_t ph, std::size_t pw, std::size_t channels) {
    if (tokens.ndim() != 2 || tokens.dim(0) != grid_rows * grid_cols ||
        tokens.dim(1) != ph * pw * channels)
        throw DimensionError("unpatchify geometry does not match token tensor");
    const std::size_t h = grid_rows * ph, w = grid_cols * pw;
    std::vector<T> out(h * w * channels);
    for (std::size_t r = 0; r < grid_rows; ++r)
        for (std::size_t q = 0; q < grid_cols; ++q) {
            const T* src = tokens.data().data() + (r * grid_cols + q) * ph * pw * channels;
            for (std::size_t i = 0; i < ph; ++i)
                for (std::size_t j = 0; j < pw; ++j)
                    for (std::size_t k = 0; k < channels; ++k)
                        out[((r * ph + i) * w + (q * pw + j)) * channels + k] = *src++;
        }
    return Tensor<T>({h, w, channels}, std::move(out));
}

template <typename T>
Tensor<T> embed(const Tensor<T>& tokens, const Tensor<T>& weight) {
    return matmul(tokens, weight);
}

// Parameters of the multi-head fusion layer plus the positional and fusion
// embedding tables. Each fusion head maps the concatenation of all minor
// tokens (width n_minor * d) through one hidden layer of width d_hidden.
template <typename T>
struct FusionParams {
    struct Head {
        Tensor<T> w1;  // [n_minor*d, d_hidden]
        Tensor<T> b1;  // [1, d_hidden]
        Tensor<T> w2;  // [d_hidden, d]
        Tensor<T> b2;  // [1, d]
    };
    std::vector<Head> heads;
    Tensor<T> positional;  // [n_patches, d], indexed by original patch index
    Tensor<T> fusion;      // [n_heads, d], indexed by fusion head

    std::size_t n_heads() const { return heads.size(); }
};

// MHF_i(m) = MLP_i(concat(minor rows, minor-index order)); one output row
// per fusion head.
template <typename T>
Tensor<T> multi_head_fusion(const Tensor<T>& minor, const FusionParams<T>& params) {
    if (minor.ndim() != 2) throw DimensionError("multi_head_fusion expects [n_minor, d] tokens");
    if (params.heads.empty()) throw ContractError("fusion layer has no heads");
    const std::size_t flat = minor.size();
    if (params.heads.front().w1.dim(0) != flat)
        throw ContractError("fusion input width " + std::to_string(flat) +
                            " does not match architecture width " +
                            std::to_string(params.heads.front().w1.dim(0)) +
                            "; minor-token count is fixed at build time");

    Tensor<T> cat = reshape(minor, {1, flat});
    std::vector<Tensor<T>> rows;
    rows.reserve(params.heads.size());
    for (const auto& head : params.heads) {
        Tensor<T> hidden = gelu(add(matmul(cat, head.w1), head.b1));
        rows.push_back(add(matmul(hidden, head.w2), head.b2));
    }
    return concat_rows(rows);
}

// Provenance of each encoder token.
struct TokenOrigin {
    enum class Kind { Major, Fusion };
    Kind kind;
    std::size_t index;  // original patch index, or fusion head index
};

template <typename T>
struct TokenSequence {
    Tensor<T> tokens;  // [n_major + n_fusion, d]
    std::vector<TokenOrigin> origin;

    std::size_t n_fusion() const {
        std::size_t n = 0;
        for (const auto& o : origin)
            if (o.kind == TokenOrigin::Kind::Fusion) ++n;
        return n;
    }
};

// Majors get the positional embedding of their original patch index; fusion
// tokens get their per-head fusion embedding. Majors come first, in
// partition order. Either side may be absent (rho of 1 or 0).
template <typename T>
TokenSequence<T> assemble(const std::optional<Tensor<T>>& major_emb,
                          const std::optional<Tensor<T>>& fusion_tokens,
                          const TokenPartition& partition, const FusionParams<T>& params) {
    std::vector<Tensor<T>> parts;
    TokenSequence<T> seq;
    if (major_emb.has_value()) {
        if (major_emb->dim(0) != partition.major.size())
            throw ContractError("major embedding count does not match partition");
        parts.push_back(add(*major_emb, gather_rows(params.positional, partition.major)));
        for (const std::size_t idx : partition.major)
            seq.origin.push_back({TokenOrigin::Kind::Major, idx});
    }
    if (fusion_tokens.has_value()) {
        if (fusion_tokens->dim(0) != params.fusion.dim(0))
            throw ContractError("fusion token count does not match the fusion embedding table");
        parts.push_back(add(*fusion_tokens, params.fusion));
        for (std::size_t i = 0; i < fusion_tokens->dim(0); ++i)
            seq.origin.push_back({TokenOrigin::Kind::Fusion, i});
    }
    if (parts.empty()) throw ContractError("assemble needs major or fusion tokens");
    seq.tokens = parts.size() == 1 ? parts.front() : concat_rows(parts);
    return seq;
}

}  // namespace cagevit
