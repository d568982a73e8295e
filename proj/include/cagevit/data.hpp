#pragma once

// Synthetic classification task. Each sample plants the label's stripe
// texture in a random set of hot patches and decoy textures of the other
// classes in every remaining patch, one shared random phase per group. With
// two classes the image marginal is identical across labels: every image
// holds equally many patches of both textures at random positions, and only
// the paired salience bundle says which group is the label. Selection makes
// the task a clean texture read; ignoring the bundle leaves nothing to
// generalize from. Any single activation map may cover only part of the hot
// set - combining several maps is what makes selection reliable.

#include <cstdint>
#include <string>
#include <vector>

#include "cagevit/error.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/salience.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit {

struct SyntheticTask {
    std::size_t n_classes = 2;
    std::size_t grid_rows = 4, grid_cols = 4;
    std::size_t patch_h = 4, patch_w = 4, channels = 1;
    std::size_t hot_per_sample = 8;  // patches carrying the class texture
    std::size_t n_maps = 6;          // activation maps per bundle
    double map_coverage = 1.0;       // chance a map highlights a given hot patch
    double noise = 0.0;              // image and salience jitter amplitude
    std::uint64_t seed = 0;

    std::size_t n_patches() const { return grid_rows * grid_cols; }
    std::size_t image_h() const { return grid_rows * patch_h; }
    std::size_t image_w() const { return grid_cols * patch_w; }

    void validate() const {
        if (n_classes < 2) throw ContractError("synthetic task needs at least two classes");
        if (hot_per_sample == 0 || hot_per_sample > n_patches())
            throw ContractError("hot_per_sample outside [1, n_patches]");
        if (n_maps == 0) throw ContractError("synthetic task needs at least one map");
        if (!(map_coverage > 0.0 && map_coverage <= 1.0))
            throw ContractError("map_coverage outside (0, 1]");
        if (patch_h < 2 && patch_w < 2)
            throw ContractError("patches must be at least 2 pixels on one side to hold a texture");
    }
};

struct Sample {
    Tensor<float> image;  // [H, W, C] in [0, 1]
    SalienceBundle bundle;
    std::size_t label = 0;
    std::vector<std::size_t> hot;  // generator ground truth, ascending
};

namespace detail {

// Stripe value in {lo, hi} for a class-specific orientation and a per-sample
// phase. Orientations cycle with the class id.
inline double texture_value(std::size_t cls, std::size_t i, std::size_t j, std::size_t phase) {
    std::size_t coord = 0;
    switch (cls % 4) {
        case 0: coord = j; break;
        case 1: coord = i; break;
        case 2: coord = i + j; break;
        case 3: coord = i + 3 * j; break;
    }
    return (coord + phase) % 2 == 0 ? 0.9 : 0.1;
}

}  // namespace detail

// Deterministic in (task, n); labels are balanced to within one sample.
inline std::vector<Sample> gen_dataset(const SyntheticTask& task, std::size_t n) {
    task.validate();
    if (n == 0) throw ContractError("gen_dataset needs n >= 1");
    Rng rng(task.seed);
    const std::size_t h = task.image_h(), w = task.image_w(), c = task.channels;

    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        Sample sample;
        sample.label = s % task.n_classes;

        sample.hot = rng.sample_without_replacement(task.n_patches(), task.hot_per_sample);
        std::sort(sample.hot.begin(), sample.hot.end());
        std::vector<char> is_hot(task.n_patches(), 0);
        for (const std::size_t p : sample.hot) is_hot[p] = 1;
        const std::size_t hot_phase = static_cast<std::size_t>(rng.below(2));
        const std::size_t decoy_phase = static_cast<std::size_t>(rng.below(2));

        // every cold patch carries some other class's texture, spread evenly
        std::vector<std::size_t> patch_class(task.n_patches(), sample.label);
        std::size_t cold_idx = 0;
        for (std::size_t p = 0; p < task.n_patches(); ++p)
            if (!is_hot[p])
                patch_class[p] =
                    (sample.label + 1 + cold_idx++ % (task.n_classes - 1)) % task.n_classes;

        std::vector<float> pixels(h * w * c);
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t patch =
                    (i / task.patch_h) * task.grid_cols + (j / task.patch_w);
                double v = detail::texture_value(patch_class[patch], i % task.patch_h,
                                                 j % task.patch_w,
                                                 is_hot[patch] ? hot_phase : decoy_phase);
                if (task.noise > 0.0) v += task.noise * rng.uniform(-0.1, 0.1);
                v = std::min(1.0, std::max(0.0, v));
                for (std::size_t k = 0; k < c; ++k) pixels[(i * w + j) * c + k] =
                    static_cast<float>(v);
            }
        sample.image = Tensor<float>({h, w, c}, std::move(pixels));

        // Bundle: each map covers each hot patch with probability
        // map_coverage; a patch missed by every map is forced into the first
        // so the weighted average always ranks hot patches strictly above the
        // rest at noise = 0.
        sample.bundle.rows = h;
        sample.bundle.cols = w;
        std::vector<std::vector<char>> covered(task.n_maps,
                                               std::vector<char>(task.n_patches(), 0));
        for (std::size_t k = 0; k < task.n_maps; ++k)
            for (const std::size_t p : sample.hot)
                if (task.map_coverage >= 1.0 || rng.unit() < task.map_coverage) covered[k][p] = 1;
        for (const std::size_t p : sample.hot) {
            bool any = false;
            for (std::size_t k = 0; k < task.n_maps; ++k) any = any || covered[k][p];
            if (!any) covered[0][p] = 1;
        }
        for (std::size_t k = 0; k < task.n_maps; ++k) {
            SalienceEntry e;
            e.class_id = static_cast<int>(k);
            e.confidence = static_cast<float>(rng.uniform(0.3, 1.0));
            e.map.resize(h * w);
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t patch =
                        (i / task.patch_h) * task.grid_cols + (j / task.patch_w);
                    double v = covered[k][patch] ? 1.0 : 0.0;
                    if (task.noise > 0.0 && !covered[k][patch])
                        v += task.noise * rng.unit();
                    e.map[i * w + j] = static_cast<float>(v);
                }
            sample.bundle.entries.push_back(std::move(e));
        }
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace cagevit
