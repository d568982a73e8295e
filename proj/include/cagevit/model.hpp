#pragma once

// Full encoder: salience-guided selection, embedding, minor-token fusion,
// stacked pre-norm attention/FFN layers, mean-pool readout, and a small
// AdamW trainer.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cagevit/attention.hpp"
#include "cagevit/config.hpp"
#include "cagevit/error.hpp"
#include "cagevit/pipeline.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/salience.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

enum class ParamInit { Weight, Bias, Gain };

// Single source of truth for the parameter set: build(), count_params() and
// checkpoint validation all walk this enumeration.
inline void for_each_param_shape(
    const VariantConfig& cfg,
    const std::function<void(const std::string&, const std::vector<std::size_t>&, ParamInit)>& fn) {
    cfg.validate();
    const std::size_t n = cfg.n_patches();
    const std::size_t n_minor = minor_count(n, cfg.rho);
    const std::size_t d = cfg.d;

    fn("embed.w", {cfg.patch_flat(), d}, ParamInit::Weight);
    fn("embed.b", {1, d}, ParamInit::Bias);
    fn("pos.table", {n, d}, ParamInit::Weight);

    const bool has_fusion = n_minor > 0;
    if (has_fusion) {
        fn("fusion.table", {cfg.n_fusion, d}, ParamInit::Weight);
        for (std::size_t i = 0; i < cfg.n_fusion; ++i) {
            const std::string p = "fusion.h" + std::to_string(i) + ".";
            fn(p + "w1", {n_minor * d, d}, ParamInit::Weight);
            fn(p + "b1", {1, d}, ParamInit::Bias);
            fn(p + "w2", {d, d}, ParamInit::Weight);
            fn(p + "b2", {1, d}, ParamInit::Bias);
        }
    }

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        fn(p + "ln1.gain", {d}, ParamInit::Gain);
        fn(p + "ln1.bias", {d}, ParamInit::Bias);
        fn(p + "ln2.gain", {d}, ParamInit::Gain);
        fn(p + "ln2.bias", {d}, ParamInit::Bias);
        for (const char* m : {"wq", "wk", "wv", "wo"}) fn(p + "attn." + m, {d, d}, ParamInit::Weight);
        for (const char* m : {"bq", "bk", "bv", "bo"}) fn(p + "attn." + m, {1, d}, ParamInit::Bias);
        if (cfg.attention == AttentionKind::SRA) {
            fn(p + "attn.ws", {cfg.reduction * cfg.reduction * d, d}, ParamInit::Weight);
            fn(p + "attn.sr.gain", {d}, ParamInit::Gain);
            fn(p + "attn.sr.bias", {d}, ParamInit::Bias);
        }
        if (cfg.attention == AttentionKind::GatedLinearSRA && has_fusion) {
            const std::size_t gate_in = cfg.n_fusion * d;
            const std::size_t gate_out = cfg.pool * cfg.pool * d;
            fn(p + "gate.w1", {gate_in, d}, ParamInit::Weight);
            fn(p + "gate.b1", {1, d}, ParamInit::Bias);
            fn(p + "gate.w2", {d, gate_out}, ParamInit::Weight);
            fn(p + "gate.b2", {1, gate_out}, ParamInit::Bias);
        }
        fn(p + "ffn.w1", {d, cfg.mlp_hidden}, ParamInit::Weight);
        fn(p + "ffn.b1", {1, cfg.mlp_hidden}, ParamInit::Bias);
        fn(p + "ffn.w2", {cfg.mlp_hidden, d}, ParamInit::Weight);
        fn(p + "ffn.b2", {1, d}, ParamInit::Bias);
    }

    fn("head.w1", {d, cfg.mlp_hidden}, ParamInit::Weight);
    fn("head.b1", {1, cfg.mlp_hidden}, ParamInit::Bias);
    fn("head.w2", {cfg.mlp_hidden, cfg.n_classes}, ParamInit::Weight);
    fn("head.b2", {1, cfg.n_classes}, ParamInit::Bias);
}

inline std::uint64_t count_params(const VariantConfig& cfg) {
    std::uint64_t total = 0;
    for_each_param_shape(cfg, [&](const std::string&, const std::vector<std::size_t>& shape,
                                  ParamInit) {
        std::uint64_t n = 1;
        for (const std::size_t s : shape) n *= s;
        total += n;
    });
    return total;
}

// Totals grouped by top-level component, in enumeration order.
inline std::vector<std::pair<std::string, std::uint64_t>> param_breakdown(
    const VariantConfig& cfg) {
    std::vector<std::pair<std::string, std::uint64_t>> groups;
    for_each_param_shape(cfg, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                  ParamInit) {
        std::string group = name.substr(0, name.find('.'));
        if (group.rfind("layer", 0) == 0) group = "encoder";
        std::uint64_t n = 1;
        for (const std::size_t s : shape) n *= s;
        if (groups.empty() || groups.back().first != group) groups.emplace_back(group, 0);
        groups.back().second += n;
    });
    return groups;
}

template <typename T>
struct EncoderLayerParams {
    LayerNormParams<T> ln1, ln2;
    AttentionParams<T> attn;
    GateParams<T> gate;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
struct ModelParams {
    VariantConfig config;
    // Canonical ordered table; the structured views below share nodes with it.
    std::vector<std::pair<std::string, Tensor<T>>> table;

    Tensor<T> embed_w, embed_b;
    FusionParams<T> fusion;
    std::vector<EncoderLayerParams<T>> layers;
    Tensor<T> head_w1, head_b1, head_w2, head_b2;

    bool has_fusion() const { return !fusion.heads.empty(); }

    const Tensor<T>& at(const std::string& name) const {
        for (const auto& [n, t] : table)
            if (n == name) return t;
        throw ContractError("unknown parameter: " + name);
    }
};

namespace detail {

// Connects the structured views to the named table entries.
template <typename T>
void wire_params(ModelParams<T>& p) {
    std::unordered_map<std::string, Tensor<T>> map;
    for (const auto& [name, t] : p.table) map.emplace(name, t);
    const auto get = [&](const std::string& name) -> Tensor<T> {
        auto it = map.find(name);
        if (it == map.end()) throw ContractError("missing parameter: " + name);
        return it->second;
    };
    const VariantConfig& cfg = p.config;
    const std::size_t n_minor = minor_count(cfg.n_patches(), cfg.rho);

    p.embed_w = get("embed.w");
    p.embed_b = get("embed.b");
    p.fusion.positional = get("pos.table");
    p.fusion.heads.clear();
    if (n_minor > 0) {
        p.fusion.fusion = get("fusion.table");
        for (std::size_t i = 0; i < cfg.n_fusion; ++i) {
            const std::string h = "fusion.h" + std::to_string(i) + ".";
            p.fusion.heads.push_back(
                {get(h + "w1"), get(h + "b1"), get(h + "w2"), get(h + "b2")});
        }
    }
    p.layers.clear();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        EncoderLayerParams<T> layer;
        layer.ln1 = {get(pre + "ln1.gain"), get(pre + "ln1.bias"), T(1e-5)};
        layer.ln2 = {get(pre + "ln2.gain"), get(pre + "ln2.bias"), T(1e-5)};
        layer.attn.wq = get(pre + "attn.wq");
        layer.attn.bq = get(pre + "attn.bq");
        layer.attn.wk = get(pre + "attn.wk");
        layer.attn.bk = get(pre + "attn.bk");
        layer.attn.wv = get(pre + "attn.wv");
        layer.attn.bv = get(pre + "attn.bv");
        layer.attn.wo = get(pre + "attn.wo");
        layer.attn.bo = get(pre + "attn.bo");
        if (cfg.attention == AttentionKind::SRA) {
            layer.attn.ws = get(pre + "attn.ws");
            layer.attn.sr_norm =
                LayerNormParams<T>{get(pre + "attn.sr.gain"), get(pre + "attn.sr.bias"), T(1e-5)};
        }
        if (cfg.attention == AttentionKind::GatedLinearSRA && n_minor > 0) {
            layer.gate.w1 = get(pre + "gate.w1");
            layer.gate.b1 = get(pre + "gate.b1");
            layer.gate.w2 = get(pre + "gate.w2");
            layer.gate.b2 = get(pre + "gate.b2");
        }
        layer.ffn_w1 = get(pre + "ffn.w1");
        layer.ffn_b1 = get(pre + "ffn.b1");
        layer.ffn_w2 = get(pre + "ffn.w2");
        layer.ffn_b2 = get(pre + "ffn.b2");
        p.layers.push_back(std::move(layer));
    }
    p.head_w1 = get("head.w1");
    p.head_b1 = get("head.b1");
    p.head_w2 = get("head.w2");
    p.head_b2 = get("head.b2");
}

}  // namespace detail

// Deterministic initialization: weights ~ truncated normal(0, 0.02), biases
// zero, norm gains one.
template <typename T>
ModelParams<T> build(const VariantConfig& cfg, std::uint64_t seed) {
    ModelParams<T> params;
    params.config = cfg;
    Rng rng(seed);
    for_each_param_shape(cfg, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                  ParamInit init) {
        std::size_t numel = 1;
        for (const std::size_t s : shape) numel *= s;
        std::vector<T> data(numel);
        switch (init) {
            case ParamInit::Weight: rng.fill_trunc_normal(data, 0.02); break;
            case ParamInit::Bias: std::fill(data.begin(), data.end(), T(0)); break;
            case ParamInit::Gain: std::fill(data.begin(), data.end(), T(1)); break;
        }
        params.table.emplace_back(name, Tensor<T>(shape, std::move(data)));
    });
    detail::wire_params(params);
    return params;
}

// Rebuilds a ModelParams from named tensors (checkpoint load); shapes are
// validated against the config's enumeration.
template <typename T>
ModelParams<T> assemble_params(const VariantConfig& cfg,
                               std::vector<std::pair<std::string, Tensor<T>>> table) {
    ModelParams<T> params;
    params.config = cfg;
    params.table = std::move(table);
    std::unordered_map<std::string, const Tensor<T>*> map;
    for (const auto& [name, t] : params.table) map.emplace(name, &t);
    std::size_t expected = 0;
    for_each_param_shape(cfg, [&](const std::string& name, const std::vector<std::size_t>& shape,
                                  ParamInit) {
        ++expected;
        auto it = map.find(name);
        if (it == map.end()) throw ContractError("checkpoint missing parameter: " + name);
        if (it->second->shape() != shape)
            throw DimensionError("checkpoint parameter " + name + " has shape " +
                                 detail::shape_str(it->second->shape()) + ", expected " +
                                 detail::shape_str(shape));
    });
    if (expected != params.table.size())
        throw ContractError("checkpoint parameter count does not match the config");
    detail::wire_params(params);
    return params;
}

// One pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x)).
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, const EncoderLayerParams<T>& layer,
                        const AttentionConfig& acfg, const TokenLayout& layout) {
    Tensor<T> normed = layer_norm(x, layer.ln1.gain, layer.ln1.bias, layer.ln1.eps);
    Tensor<T> attn_out;
    switch (acfg.kind) {
        case AttentionKind::Full:
            attn_out = mha(normed, layer.attn, acfg.n_heads);
            break;
        case AttentionKind::SRA:
            attn_out = sra(normed, layer.attn, acfg, layout);
            break;
        case AttentionKind::LinearSRA:
            attn_out = linear_sra(normed, layer.attn, acfg, layout);
            break;
        case AttentionKind::GatedLinearSRA: {
            const std::vector<std::size_t> fusion_rows = layout.fusion_tokens();
            if (fusion_rows.empty()) {
                // no fusion tokens to gate with; pooled attention stays ungated
                attn_out = linear_sra(normed, layer.attn, acfg, layout);
            } else {
                Tensor<T> v_fusion =
                    add(matmul(gather_rows(normed, fusion_rows), layer.attn.wv), layer.attn.bv);
                attn_out = gated_linear_sra(normed, v_fusion, layer.attn, layer.gate, acfg, layout);
            }
            break;
        }
    }
    Tensor<T> x1 = add(x, attn_out);
    Tensor<T> normed2 = layer_norm(x1, layer.ln2.gain, layer.ln2.bias, layer.ln2.eps);
    Tensor<T> hidden = gelu(add(matmul(normed2, layer.ffn_w1), layer.ffn_b1));
    Tensor<T> ffn_out = add(matmul(hidden, layer.ffn_w2), layer.ffn_b2);
    return add(x1, ffn_out);
}

template <typename T>
AttentionConfig attention_config_of(const VariantConfig& cfg) {
    AttentionConfig a;
    a.kind = cfg.attention;
    a.n_heads = cfg.n_heads;
    a.d = cfg.d;
    a.reduction = cfg.reduction;
    a.pool = cfg.pool;
    a.h = cfg.grid_rows;
    a.w = cfg.grid_cols;
    return a;
}

// Selection result plus the encoder input built from it; exposed so tests
// can pin the intermediate stages.
template <typename T>
struct ForwardTrace {
    TokenPartition partition;
    TokenSequence<T> sequence;
    TokenLayout layout;
};

template <typename T>
ForwardTrace<T> prepare_sequence(const ModelParams<T>& params, const Tensor<T>& image,
                                 const SalienceBundle& bundle) {
    const VariantConfig& cfg = params.config;
    if (image.ndim() != 3 || image.dim(0) != cfg.image_h() || image.dim(1) != cfg.image_w() ||
        image.dim(2) != cfg.channels)
        throw DimensionError("forward/image: got " + detail::shape_str(image.shape()) +
                             ", config wants " + std::to_string(cfg.image_h()) + "x" +
                             std::to_string(cfg.image_w()) + "x" + std::to_string(cfg.channels));
    if (bundle.rows != cfg.image_h() || bundle.cols != cfg.image_w())
        throw DimensionError("forward/bundle: salience geometry " + std::to_string(bundle.rows) +
                             "x" + std::to_string(bundle.cols) + " does not match the image");

    const SalienceBundle top = take_top_k(bundle, cfg.top_k);
    const SalienceMap s = weighted_salience(top);
    const Tensor<double> scores = patch_scores(s, cfg.grid_rows, cfg.grid_cols, cfg.patch_h,
                                               cfg.patch_w);
    ForwardTrace<T> trace;
    trace.partition = select_and_rearrange(scores, cfg.rho);

    Tensor<T> patches = patchify(image, cfg.patch_h, cfg.patch_w);
    Tensor<T> emb = add(matmul(patches, params.embed_w), params.embed_b);

    std::optional<Tensor<T>> major_emb;
    if (!trace.partition.major.empty()) major_emb = gather_rows(emb, trace.partition.major);
    std::optional<Tensor<T>> fused;
    if (!trace.partition.minor.empty() && params.has_fusion())
        fused = multi_head_fusion(gather_rows(emb, trace.partition.minor), params.fusion);

    trace.sequence = assemble(major_emb, fused, trace.partition, params.fusion);
    for (const TokenOrigin& o : trace.sequence.origin)
        trace.layout.grid_pos.push_back(o.kind == TokenOrigin::Kind::Major
                                            ? static_cast<std::ptrdiff_t>(o.index)
                                            : TokenLayout::kNoGrid);
    return trace;
}

template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& image,
                  const SalienceBundle& bundle) {
    const VariantConfig& cfg = params.config;
    ForwardTrace<T> trace = prepare_sequence(params, image, bundle);
    const AttentionConfig acfg = attention_config_of<T>(cfg);

    Tensor<T> x = trace.sequence.tokens;
    for (const auto& layer : params.layers) x = encoder_layer(x, layer, acfg, trace.layout);

    Tensor<T> pooled = mean_rows(x);
    Tensor<T> hidden = gelu(add(matmul(pooled, params.head_w1), params.head_b1));
    Tensor<T> logits = add(matmul(hidden, params.head_w2), params.head_b2);
    return reshape(logits, {cfg.n_classes});
}

// -log softmax(logits)[label]
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
    if (logits.ndim() != 1) throw DimensionError("cross_entropy expects 1-D logits");
    if (label >= logits.dim(0)) throw ContractError("label out of range");
    Tensor<T> onehot = Tensor<T>::zeros({1, logits.dim(0)});
    onehot.mutable_data()[label] = T(1);
    Tensor<T> lsm = log_softmax(reshape(logits, {std::size_t(1), logits.dim(0)}), 1);
    return scale(sum_all(mul(lsm, onehot)), T(-1));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

template <typename T>
struct AdamW {
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8), weight_decay = T(0.01);
    std::size_t t = 0;
    std::vector<std::vector<T>> m, v;

    void reset(const ModelParams<T>& params) {
        t = 0;
        m.assign(params.table.size(), {});
        v.assign(params.table.size(), {});
        for (std::size_t i = 0; i < params.table.size(); ++i) {
            m[i].assign(params.table[i].second.size(), T(0));
            v[i].assign(params.table[i].second.size(), T(0));
        }
    }

    // Decoupled decay, applied to matrices only (bias rows and norm vectors
    // are exempt).
    void step(ModelParams<T>& params, T lr) {
        if (m.size() != params.table.size()) reset(params);
        ++t;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
        for (std::size_t i = 0; i < params.table.size(); ++i) {
            Tensor<T>& p = params.table[i].second;
            const bool decay = p.ndim() == 2 && p.dim(0) > 1;
            const std::vector<T>* grad = p.has_grad() ? &p.grad() : nullptr;
            std::vector<T>& data = p.mutable_data();
            for (std::size_t j = 0; j < data.size(); ++j) {
                const T g = grad ? (*grad)[j] : T(0);
                m[i][j] = beta1 * m[i][j] + (T(1) - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (T(1) - beta2) * g * g;
                const T mhat = m[i][j] / bc1;
                const T vhat = v[i][j] / bc2;
                T update = mhat / (std::sqrt(vhat) + eps);
                if (decay) update += weight_decay * data[j];
                data[j] -= lr * update;
            }
        }
    }
};

template <typename T>
struct TrainSample {
    Tensor<T> image;
    const SalienceBundle* bundle;
    std::size_t label;
};

// Mean cross-entropy over the batch, one backward pass, one optimizer step.
// Returns the pre-step loss. lr = 0 leaves every parameter untouched.
template <typename T>
T train_step(ModelParams<T>& params, AdamW<T>& opt, const std::vector<TrainSample<T>>& batch,
             T lr) {
    if (batch.empty()) throw ContractError("train_step needs a nonempty batch");
    T loss_value;
    {
        GradTape<T> tape;
        for (auto& [name, tensor] : params.table) tape.watch(tensor);
        Tensor<T> total;
        for (const auto& sample : batch) {
            Tensor<T> loss = cross_entropy(forward(params, sample.image, *sample.bundle),
                                           sample.label);
            total = total.defined() ? add(total, loss) : loss;
        }
        Tensor<T> mean_loss = scale(total, T(1) / static_cast<T>(batch.size()));
        loss_value = mean_loss(0);
        if (!std::isfinite(loss_value)) throw TrainingError("non-finite training loss; run halted");
        backward(mean_loss);
        opt.step(params, lr);
    }
    for (auto& [name, tensor] : params.table) tensor.clear_grad();
    return loss_value;
}

template <typename T>
std::size_t argmax_class(const Tensor<T>& logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits(i) > logits(best)) best = i;
    return best;
}

}  // namespace cagevit
