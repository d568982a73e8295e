#pragma once

// Central finite-difference verification of every differentiable primitive
// and composed block, at 64-bit precision. The checker perturbs each leaf
// element by +/- step, re-runs the forward closure without a tape, and
// compares the two-sided difference quotient against the analytic gradient.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cagevit/attention.hpp"
#include "cagevit/data.hpp"
#include "cagevit/error.hpp"
#include "cagevit/model.hpp"
#include "cagevit/pipeline.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
};

namespace gradcheck_detail {

// Relative error with an absolute floor: central differences carry ~1e-11 of
// roundoff noise, so elements whose true derivative is near zero are judged
// against the floor instead of their own magnitude.
inline double rel_err(double analytic, double numeric) {
    const double mag = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    return std::fabs(analytic - numeric) / mag;
}

inline Tensor<double> random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                                    double hi = 1.0) {
    std::size_t n = 1;
    for (const std::size_t s : shape) n *= s;
    std::vector<double> data(n);
    rng.fill_uniform(data, lo, hi);
    return Tensor<double>(std::move(shape), std::move(data));
}

}  // namespace gradcheck_detail

// Worst relative error between analytic and central-difference gradients of
// the scalar produced by `fwd`, over every element of every leaf.
inline double max_gradient_error(const std::vector<Tensor<double>*>& leaves,
                                 const std::function<Tensor<double>()>& fwd,
                                 double step = 1e-5) {
    std::vector<std::vector<double>> analytic(leaves.size());
    {
        GradTape<double> tape;
        for (Tensor<double>* leaf : leaves) tape.watch(*leaf);
        Tensor<double> loss = fwd();
        backward(loss);
        for (std::size_t i = 0; i < leaves.size(); ++i)
            analytic[i] = leaves[i]->has_grad() ? leaves[i]->grad()
                                                : std::vector<double>(leaves[i]->size(), 0.0);
        for (Tensor<double>* leaf : leaves) leaf->clear_grad();
    }

    double worst = 0.0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        std::vector<double>& data = leaves[i]->mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double orig = data[j];
            data[j] = orig + step;
            const double up = fwd()(0);
            data[j] = orig - step;
            const double down = fwd()(0);
            data[j] = orig;
            const double fd = (up - down) / (2.0 * step);
            worst = std::max(worst, gradcheck_detail::rel_err(analytic[i][j], fd));
        }
    }
    return worst;
}

namespace gradcheck_detail {

// Projects a tensor output to a scalar against random weights drawn once on
// the first call and pinned afterwards, so repeated forward evaluations
// measure the same function; a plain sum would hide gradient directions that
// cancel (softmax rows, for one).
class Projector {
public:
    explicit Projector(std::uint64_t seed) : rng_(seed) {}

    Tensor<double> operator()(const Tensor<double>& out) {
        if (!weights_.defined()) {
            std::vector<double> w(out.size());
            rng_.fill_uniform(w, -1.0, 1.0);
            weights_ = Tensor<double>(out.shape(), std::move(w));
        }
        return sum_all(mul(out, weights_));
    }

private:
    Rng rng_;
    Tensor<double> weights_;
};

using Case = std::pair<std::string, std::function<double(Rng&)>>;

inline std::vector<Case> tensor_cases() {
    return {
        {"matmul", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {3, 4});
             Tensor<double> b = random_tensor(rng, {4, 5});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b},
                                       [&] { return proj(matmul(a, b)); });
         }},
        {"transpose", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {3, 5});
             Projector proj(rng.bits());
             return max_gradient_error({&a}, [&] { return proj(transpose(a)); });
         }},
        {"reshape", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {2, 6});
             Projector proj(rng.bits());
             return max_gradient_error({&a},
                                       [&] { return proj(reshape(a, {3, 4})); });
         }},
        {"add", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 3});
             Tensor<double> b = random_tensor(rng, {4, 3});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b}, [&] { return proj(add(a, b)); });
         }},
        {"add_broadcast", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 3});
             Tensor<double> b = random_tensor(rng, {1, 3});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b}, [&] { return proj(add(a, b)); });
         }},
        {"mul", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 3});
             Tensor<double> b = random_tensor(rng, {4, 3});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b}, [&] { return proj(mul(a, b)); });
         }},
        {"mul_broadcast", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 3});
             Tensor<double> b = random_tensor(rng, {4, 1});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b}, [&] { return proj(mul(a, b)); });
         }},
        {"scale", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {7});
             Projector proj(rng.bits());
             return max_gradient_error({&a}, [&] { return proj(scale(a, 0.37)); });
         }},
        {"sigmoid", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {8, 8}, -3.0, 3.0);
             Projector proj(rng.bits());
             return max_gradient_error({&a}, [&] { return proj(sigmoid(a)); });
         }},
        {"gelu", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {8, 8}, -3.0, 3.0);
             Projector proj(rng.bits());
             return max_gradient_error({&a}, [&] { return proj(gelu(a)); });
         }},
        {"softmax", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 6}, -2.0, 2.0);
             Projector proj(rng.bits());
             double worst = max_gradient_error({&a}, [&] { return proj(softmax(a, 1)); });
             Projector proj0(rng.bits());
             worst = std::max(worst, max_gradient_error(
                                         {&a}, [&] { return proj0(softmax(a, 0)); }));
             return worst;
         }},
        {"log_softmax", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {4, 6}, -2.0, 2.0);
             Projector proj(rng.bits());
             return max_gradient_error({&a},
                                       [&] { return proj(log_softmax(a, 1)); });
         }},
        {"layer_norm", [](Rng& rng) {
             Tensor<double> x = random_tensor(rng, {4, 8});
             Tensor<double> g = random_tensor(rng, {8}, 0.5, 1.5);
             Tensor<double> b = random_tensor(rng, {8}, -0.5, 0.5);
             Projector proj(rng.bits());
             return max_gradient_error(
                 {&x, &g, &b}, [&] { return proj(layer_norm(x, g, b, 1e-5)); });
         }},
        {"avg_pool_2d", [](Rng& rng) {
             Tensor<double> x = random_tensor(rng, {5, 6, 3});
             Projector proj(rng.bits());
             return max_gradient_error({&x}, [&] { return proj(avg_pool_2d(x, 2)); });
         }},
        {"gather_scatter", [](Rng& rng) {
             Tensor<double> x = random_tensor(rng, {5, 3});
             const std::vector<std::size_t> idx{4, 0, 2, 0};
             Projector proj(rng.bits());
             return max_gradient_error({&x}, [&] {
                 return proj(scatter_rows(gather_rows(x, idx), {1, 3, 5, 0}, 7));
             });
         }},
        {"concat_slice", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {3, 2});
             Tensor<double> b = random_tensor(rng, {3, 4});
             Projector proj(rng.bits());
             return max_gradient_error({&a, &b}, [&] {
                 Tensor<double> cols = concat_cols<double>({a, b});
                 Tensor<double> rows = concat_rows<double>({cols, cols});
                 return proj(slice_cols(rows, 1, 5));
             });
         }},
        {"mean_rows", [](Rng& rng) {
             Tensor<double> a = random_tensor(rng, {6, 4});
             Projector proj(rng.bits());
             return max_gradient_error({&a}, [&] { return proj(mean_rows(a)); });
         }},
        {"mlp_composite", [](Rng& rng) {
             // loss = sum over a two-layer MLP; exercises chained records
             Tensor<double> x = random_tensor(rng, {4, 6});
             Tensor<double> w1 = random_tensor(rng, {6, 8}, -0.5, 0.5);
             Tensor<double> b1 = random_tensor(rng, {1, 8}, -0.1, 0.1);
             Tensor<double> w2 = random_tensor(rng, {8, 3}, -0.5, 0.5);
             Tensor<double> b2 = random_tensor(rng, {1, 3}, -0.1, 0.1);
             Projector proj(rng.bits());
             return max_gradient_error({&x, &w1, &b1, &w2, &b2}, [&] {
                 Tensor<double> h = gelu(add(matmul(x, w1), b1));
                 return proj(add(matmul(h, w2), b2));
             });
         }},
    };
}

inline std::vector<Case> pipeline_cases() {
    return {
        {"embed", [](Rng& rng) {
             Tensor<double> tokens = random_tensor(rng, {5, 4});
             Tensor<double> w = random_tensor(rng, {4, 6}, -0.5, 0.5);
             Projector proj(rng.bits());
             return max_gradient_error({&tokens, &w},
                                       [&] { return proj(embed(tokens, w)); });
         }},
        {"multi_head_fusion", [](Rng& rng) {
             const std::size_t n_minor = 3, d = 4;
             Tensor<double> minor = random_tensor(rng, {n_minor, d});
             FusionParams<double> params;
             for (std::size_t i = 0; i < 2; ++i)
                 params.heads.push_back({random_tensor(rng, {n_minor * d, d}, -0.5, 0.5),
                                         random_tensor(rng, {1, d}, -0.1, 0.1),
                                         random_tensor(rng, {d, d}, -0.5, 0.5),
                                         random_tensor(rng, {1, d}, -0.1, 0.1)});
             Projector proj(rng.bits());
             std::vector<Tensor<double>*> leaves{&minor};
             for (auto& h : params.heads) {
                 leaves.push_back(&h.w1);
                 leaves.push_back(&h.b1);
                 leaves.push_back(&h.w2);
                 leaves.push_back(&h.b2);
             }
             return max_gradient_error(
                 leaves, [&] { return proj(multi_head_fusion(minor, params)); });
         }},
        {"assemble", [](Rng& rng) {
             const std::size_t d = 4;
             Tensor<double> majors = random_tensor(rng, {2, d});
             Tensor<double> fused = random_tensor(rng, {2, d});
             FusionParams<double> params;
             params.positional = random_tensor(rng, {6, d}, -0.2, 0.2);
             params.fusion = random_tensor(rng, {2, d}, -0.2, 0.2);
             TokenPartition part;
             part.n_total = 6;
             part.rho = 0.4;
             part.major = {5, 1};
             part.minor = {0, 2, 3, 4};
             Projector proj(rng.bits());
             return max_gradient_error(
                 {&majors, &fused, &params.positional, &params.fusion}, [&] {
                     return proj(assemble<double>(majors, fused, part, params).tokens);
                 });
         }},
    };
}

template <typename T>
AttentionParams<T> random_attention_params_for_check(Rng& rng, std::size_t d, std::size_t r) {
    AttentionParams<T> p;
    p.wq = random_tensor(rng, {d, d}, -0.5, 0.5);
    p.bq = random_tensor(rng, {1, d}, -0.1, 0.1);
    p.wk = random_tensor(rng, {d, d}, -0.5, 0.5);
    p.bk = random_tensor(rng, {1, d}, -0.1, 0.1);
    p.wv = random_tensor(rng, {d, d}, -0.5, 0.5);
    p.bv = random_tensor(rng, {1, d}, -0.1, 0.1);
    p.wo = random_tensor(rng, {d, d}, -0.5, 0.5);
    p.bo = random_tensor(rng, {1, d}, -0.1, 0.1);
    p.ws = random_tensor(rng, {r * r * d, d}, -0.5, 0.5);
    p.sr_norm = LayerNormParams<T>{random_tensor(rng, {d}, 0.5, 1.5),
                                   random_tensor(rng, {d}, -0.2, 0.2), T(1e-5)};
    return p;
}

template <typename T>
std::vector<Tensor<T>*> attention_leaves(AttentionParams<T>& p, bool with_sr) {
    std::vector<Tensor<T>*> leaves{&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo};
    if (with_sr) {
        leaves.push_back(&p.ws);
        leaves.push_back(&p.sr_norm->gain);
        leaves.push_back(&p.sr_norm->bias);
    }
    return leaves;
}

inline std::vector<Case> attention_cases() {
    return {
        {"attention", [](Rng& rng) {
             Tensor<double> q = random_tensor(rng, {6, 4});
             Tensor<double> k = random_tensor(rng, {5, 4});
             Tensor<double> v = random_tensor(rng, {5, 4});
             Projector proj(rng.bits());
             return max_gradient_error({&q, &k, &v},
                                       [&] { return proj(attention(q, k, v)); });
         }},
        {"mha", [](Rng& rng) {
             const std::size_t d = 8;
             Tensor<double> x = random_tensor(rng, {6, d});
             auto params = random_attention_params_for_check<double>(rng, d, 1);
             auto leaves = attention_leaves(params, false);
             leaves.push_back(&x);
             Projector proj(rng.bits());
             return max_gradient_error(leaves,
                                       [&] { return proj(mha(x, params, 2)); });
         }},
        {"spatial_reduce", [](Rng& rng) {
             const std::size_t d = 4;
             Tensor<double> x = random_tensor(rng, {16, d});
             Tensor<double> ws = random_tensor(rng, {4 * d, d}, -0.5, 0.5);
             LayerNormParams<double> norm{random_tensor(rng, {d}, 0.5, 1.5),
                                          random_tensor(rng, {d}, -0.2, 0.2), 1e-5};
             Projector proj(rng.bits());
             return max_gradient_error({&x, &ws, &norm.gain, &norm.bias}, [&] {
                 return proj(spatial_reduce(x, 4, 4, 2, ws, &norm));
             });
         }},
        {"sra", [](Rng& rng) {
             const std::size_t d = 4;
             AttentionConfig cfg;
             cfg.kind = AttentionKind::SRA;
             cfg.n_heads = 2;
             cfg.d = d;
             cfg.reduction = 2;
             cfg.h = cfg.w = 4;
             Tensor<double> x = random_tensor(rng, {16, d});
             auto params = random_attention_params_for_check<double>(rng, d, 2);
             auto leaves = attention_leaves(params, true);
             leaves.push_back(&x);
             Projector proj(rng.bits());
             return max_gradient_error(leaves,
                                       [&] { return proj(sra(x, params, cfg)); });
         }},
        {"linear_sra", [](Rng& rng) {
             const std::size_t d = 4;
             AttentionConfig cfg;
             cfg.kind = AttentionKind::LinearSRA;
             cfg.n_heads = 2;
             cfg.d = d;
             cfg.pool = 2;
             cfg.h = cfg.w = 4;
             Tensor<double> x = random_tensor(rng, {16, d});
             auto params = random_attention_params_for_check<double>(rng, d, 1);
             auto leaves = attention_leaves(params, false);
             leaves.push_back(&x);
             Projector proj(rng.bits());
             return max_gradient_error(
                 leaves, [&] { return proj(linear_sra(x, params, cfg)); });
         }},
        {"gated_linear_sra", [](Rng& rng) {
             const std::size_t d = 4, n_f = 2;
             AttentionConfig cfg;
             cfg.kind = AttentionKind::GatedLinearSRA;
             cfg.n_heads = 2;
             cfg.d = d;
             cfg.pool = 2;
             cfg.h = cfg.w = 4;
             // 14 grid tokens on a 16-cell grid plus 2 fusion tokens
             TokenLayout layout;
             for (std::size_t i = 0; i < 14; ++i)
                 layout.grid_pos.push_back(static_cast<std::ptrdiff_t>(i < 7 ? i : i + 2));
             layout.grid_pos.push_back(TokenLayout::kNoGrid);
             layout.grid_pos.push_back(TokenLayout::kNoGrid);

             Tensor<double> x = random_tensor(rng, {16, d});
             Tensor<double> vf = random_tensor(rng, {n_f, d});
             auto params = random_attention_params_for_check<double>(rng, d, 1);
             GateParams<double> gate;
             gate.w1 = random_tensor(rng, {n_f * d, d}, -0.5, 0.5);
             gate.b1 = random_tensor(rng, {1, d}, -0.1, 0.1);
             gate.w2 = random_tensor(rng, {d, 4 * d}, -0.5, 0.5);
             gate.b2 = random_tensor(rng, {1, 4 * d}, -0.1, 0.1);
             auto leaves = attention_leaves(params, false);
             leaves.push_back(&x);
             leaves.push_back(&vf);
             leaves.push_back(&gate.w1);
             leaves.push_back(&gate.b1);
             leaves.push_back(&gate.w2);
             leaves.push_back(&gate.b2);
             Projector proj(rng.bits());
             return max_gradient_error(leaves, [&] {
                 return proj(gated_linear_sra(x, vf, params, gate, cfg, layout));
             });
         }},
    };
}

inline VariantConfig tiny_check_config() {
    VariantConfig cfg;
    cfg.layers = 1;
    cfg.d = 4;
    cfg.mlp_hidden = 8;
    cfg.pool = 1;
    cfg.n_heads = 2;
    cfg.n_fusion = 1;
    cfg.top_k = 2;
    cfg.rho = 0.5;
    cfg.n_classes = 2;
    cfg.grid_rows = cfg.grid_cols = 2;
    cfg.patch_h = cfg.patch_w = 2;
    cfg.channels = 1;
    return cfg;
}

inline std::vector<Case> model_cases() {
    return {
        {"encoder_layer", [](Rng& rng) {
             VariantConfig cfg = tiny_check_config();
             ModelParams<double> params = build<double>(cfg, rng.bits());
             // perturb away from the symmetric init
             for (auto& [name, t] : params.table)
                 for (auto& v : t.mutable_data()) v += rng.uniform(-0.3, 0.3);
             AttentionConfig acfg = attention_config_of<double>(cfg);
             TokenLayout layout;
             layout.grid_pos = {2, 0, TokenLayout::kNoGrid};
             Tensor<double> x = random_tensor(rng, {3, cfg.d});
             std::vector<Tensor<double>*> leaves{&x};
             for (auto& [name, t] : params.table)
                 if (name.rfind("layer0.", 0) == 0) leaves.push_back(&t);
             Projector proj(rng.bits());
             return max_gradient_error(leaves, [&] {
                 return proj(encoder_layer(x, params.layers[0], acfg, layout));
             });
         }},
        {"full_model", [](Rng& rng) {
             VariantConfig cfg = tiny_check_config();
             ModelParams<double> params = build<double>(cfg, rng.bits());
             for (auto& [name, t] : params.table)
                 for (auto& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
             SyntheticTask task;
             task.grid_rows = cfg.grid_rows;
             task.grid_cols = cfg.grid_cols;
             task.patch_h = cfg.patch_h;
             task.patch_w = cfg.patch_w;
             task.channels = cfg.channels;
             task.hot_per_sample = 2;
             task.n_maps = 2;
             task.seed = rng.bits();
             const std::vector<Sample> data = gen_dataset(task, 1);
             std::vector<double> img64(data[0].image.data().begin(), data[0].image.data().end());
             Tensor<double> image(data[0].image.shape(), std::move(img64));
             std::vector<Tensor<double>*> leaves;
             for (auto& [name, t] : params.table) leaves.push_back(&t);
             return max_gradient_error(leaves, [&] {
                 return cross_entropy(forward(params, image, data[0].bundle), data[0].label);
             });
         }},
    };
}

}  // namespace gradcheck_detail

// Runs the finite-difference suite for one module ("tensor", "pipeline",
// "attention", "model") or "all"; one result per op.
inline std::vector<GradCheckResult> gradcheck_suite(const std::string& module,
                                                    std::uint64_t seed) {
    using namespace gradcheck_detail;
    std::vector<std::pair<std::string, std::vector<Case>>> groups;
    if (module == "tensor" || module == "all") groups.emplace_back("tensor", tensor_cases());
    if (module == "pipeline" || module == "all") groups.emplace_back("pipeline", pipeline_cases());
    if (module == "attention" || module == "all")
        groups.emplace_back("attention", attention_cases());
    if (module == "model" || module == "all") groups.emplace_back("model", model_cases());
    if (groups.empty())
        throw ContractError("unknown gradcheck module '" + module +
                            "'; expected tensor, pipeline, attention, model or all");

    Rng rng(seed);
    std::vector<GradCheckResult> results;
    for (auto& [group, cases] : groups)
        for (auto& [name, fn] : cases) {
            Rng case_rng(rng.bits());
            results.push_back({group + "." + name, fn(case_rng)});
        }
    return results;
}

}  // namespace cagevit
