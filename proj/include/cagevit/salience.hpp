#pragma once

// Activation-guided token selection. Combines top-K per-class activation
// maps into one confidence-weighted salience map, scores patches by summed
// salience, and splits the patch set into rearranged major tokens and
// minor tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cagevit/error.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/tensor.hpp"
#include "cagevit/tnsr.hpp"

namespace cagevit {

// One per-class activation map with the classifier confidence for its label.
struct SalienceEntry {
    int class_id = 0;
    float confidence = 0.0f;
    std::vector<float> map;  // rows*cols, row-major, nonnegative
};

struct SalienceBundle {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<SalienceEntry> entries;

    std::size_t k() const { return entries.size(); }

    void validate() const {
        if (entries.empty()) throw ContractError("salience bundle has no entries");
        if (rows == 0 || cols == 0) throw ContractError("salience bundle has empty geometry");
        for (const auto& e : entries) {
            if (e.map.size() != rows * cols)
                throw DimensionError("salience map size " + std::to_string(e.map.size()) +
                                     " does not match bundle geometry " + std::to_string(rows) +
                                     "x" + std::to_string(cols));
            if (!(e.confidence > 0.0f))
                throw ContractError("salience confidences must be positive after ingestion");
        }
    }
};

struct SalienceMap {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;  // rows*cols, row-major
};

// Ordered result of major/minor selection over N patches.
struct TokenPartition {
    std::vector<std::size_t> major;  // descending score, ties by ascending index
    std::vector<std::size_t> minor;  // ascending index
    std::size_t n_total = 0;
    double rho = 0.0;
};

// floor(n * (1 - rho)) under decimal-rho semantics: the tiny representation
// error of values like 0.3 must not pull the product below an intended
// integer, so the floor is taken with a snap tolerance far above that error
// yet far below any honest fractional part.
inline std::size_t minor_count(std::size_t n_total, double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("rho must lie in [0, 1]");
    const double t = static_cast<double>(n_total) * (1.0 - rho);
    const double snapped = std::floor(t + 1e-9);
    return static_cast<std::size_t>(std::min(snapped, static_cast<double>(n_total)));
}

// S_ij = sum_k (z_k / Z) * L_ij^{c_k} with Z = sum_k z_k.
inline SalienceMap weighted_salience(const SalienceBundle& bundle) {
    bundle.validate();
    double z_total = 0.0;
    for (const auto& e : bundle.entries) z_total += static_cast<double>(e.confidence);

    SalienceMap s;
    s.rows = bundle.rows;
    s.cols = bundle.cols;
    s.values.assign(bundle.rows * bundle.cols, 0.0);
    for (const auto& e : bundle.entries) {
        const double w = static_cast<double>(e.confidence) / z_total;
        for (std::size_t i = 0; i < s.values.size(); ++i)
            s.values[i] += w * static_cast<double>(e.map[i]);
    }
    return s;
}

// Keeps the top-k entries by confidence (stable on ties); k of zero or more
// than the bundle size clips to the bundle size.
inline SalienceBundle take_top_k(const SalienceBundle& bundle, std::size_t k) {
    bundle.validate();
    std::vector<std::size_t> order(bundle.entries.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return bundle.entries[a].confidence > bundle.entries[b].confidence;
    });
    const std::size_t take = std::max<std::size_t>(1, std::min(k, order.size()));
    SalienceBundle out;
    out.rows = bundle.rows;
    out.cols = bundle.cols;
    for (std::size_t i = 0; i < take; ++i) out.entries.push_back(bundle.entries[order[i]]);
    return out;
}

// Per-patch importance: the sum of salience values inside each patch of a
// rows x cols grid of ph x pw pixels.
inline Tensor<double> patch_scores(const SalienceMap& s, std::size_t grid_rows,
                                   std::size_t grid_cols, std::size_t ph, std::size_t pw) {
    if (grid_rows * ph != s.rows || grid_cols * pw != s.cols)
        throw DimensionError("patch grid " + std::to_string(grid_rows) + "x" +
                             std::to_string(grid_cols) + " of " + std::to_string(ph) + "x" +
                             std::to_string(pw) + " patches does not tile a " +
                             std::to_string(s.rows) + "x" + std::to_string(s.cols) + " map");
    std::vector<double> scores(grid_rows * grid_cols, 0.0);
    for (std::size_t r = 0; r < grid_rows; ++r)
        for (std::size_t c = 0; c < grid_cols; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < ph; ++i) {
                const double* row = s.values.data() + (r * ph + i) * s.cols + c * pw;
                for (std::size_t j = 0; j < pw; ++j) acc += row[j];
            }
            scores[r * grid_cols + c] = acc;
        }
    const std::size_t n_scores = scores.size();
    return Tensor<double>({n_scores}, std::move(scores));
}

// Splits patch indices into majors (descending score, ties won by the lower
// index) and minors (ascending index), with |minor| = floor(N * (1 - rho)).
inline TokenPartition select_and_rearrange(const std::vector<double>& scores, double rho) {
    const std::size_t n = scores.size();
    if (n == 0) throw ContractError("select_and_rearrange needs at least one score");
    for (const double v : scores)
        if (std::isnan(v)) throw ContractError("NaN patch score");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    TokenPartition part;
    part.n_total = n;
    part.rho = rho;
    const std::size_t n_minor = minor_count(n, rho);
    const std::size_t n_major = n - n_minor;
    part.major.assign(order.begin(), order.begin() + n_major);
    part.minor.assign(order.begin() + n_major, order.end());
    std::sort(part.minor.begin(), part.minor.end());
    return part;
}

inline TokenPartition select_and_rearrange(const Tensor<double>& scores, double rho) {
    return select_and_rearrange(scores.data(), rho);
}

// ---------------------------------------------------------------------------
// bundle file format
// ---------------------------------------------------------------------------
//
//   CAGA-BUNDLE v1\n
//   K H W\n
//   then K records, each:  "<class_id> <confidence>\n" followed by an
//   embedded TNSR blob (H x W, f32).
//
// Zero-confidence records are dropped at ingestion; if every record is
// dropped the bundle is rejected.

inline void write_bundle(std::ostream& os, const SalienceBundle& bundle) {
    bundle.validate();
    os << "CAGA-BUNDLE v1\n";
    os << bundle.k() << " " << bundle.rows << " " << bundle.cols << "\n";
    for (const auto& e : bundle.entries) {
        os << e.class_id << " " << std::setprecision(std::numeric_limits<float>::max_digits10)
           << e.confidence << "\n";
        std::vector<float> copy(e.map);
        tnsr::write(os, Tensor<float>({bundle.rows, bundle.cols}, std::move(copy)));
    }
    if (!os) throw IoError("bundle write failed");
}

inline void write_bundle(const std::filesystem::path& path, const SalienceBundle& bundle) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_bundle(os, bundle);
}

namespace detail {

inline std::string read_line_at(std::istream& is, std::size_t& offset, const char* what) {
    std::string line;
    if (!std::getline(is, line))
        throw ParseError(std::string("bundle truncated while reading ") + what, offset);
    offset += line.size() + 1;
    return line;
}

}  // namespace detail

inline SalienceBundle ingest_bundle(std::istream& is) {
    std::size_t offset = 0;
    const std::string header = detail::read_line_at(is, offset, "header");
    if (header != "CAGA-BUNDLE v1")
        throw ParseError("bad bundle header '" + header + "'", 0);

    const std::size_t geom_at = offset;
    std::istringstream geom(detail::read_line_at(is, offset, "geometry"));
    std::size_t k = 0, rows = 0, cols = 0;
    if (!(geom >> k >> rows >> cols) || k == 0 || rows == 0 || cols == 0)
        throw ParseError("bad bundle geometry line", geom_at);

    SalienceBundle bundle;
    bundle.rows = rows;
    bundle.cols = cols;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t rec_at = offset;
        std::istringstream rec(detail::read_line_at(is, offset, "record header"));
        SalienceEntry e;
        if (!(rec >> e.class_id >> e.confidence))
            throw ParseError("bad bundle record header", rec_at);
        if (e.confidence < 0.0f)
            throw ParseError("negative confidence in bundle record", rec_at);
        Tensor<float> map = tnsr::read<float>(is, offset);
        if (map.ndim() != 2 || map.dim(0) != rows || map.dim(1) != cols)
            throw ParseError("bundle map shape does not match geometry", rec_at);
        if (e.confidence == 0.0f) continue;  // documented drop rule
        e.map = map.data();
        bundle.entries.push_back(std::move(e));
    }
    if (bundle.entries.empty())
        throw ContractError("bundle rejected: every record has zero confidence");
    bundle.validate();
    return bundle;
}

inline SalienceBundle ingest_bundle(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return ingest_bundle(is);
}

// ---------------------------------------------------------------------------
// synthetic bundles
// ---------------------------------------------------------------------------

struct SynthSalienceSpec {
    std::size_t grid_rows = 4;
    std::size_t grid_cols = 4;
    std::size_t patch_h = 4;
    std::size_t patch_w = 4;
    std::size_t n_maps = 9;
    double noise = 0.0;  // uniform [0, noise) added per pixel per map
};

struct SynthSalience {
    SalienceBundle bundle;
    std::vector<std::size_t> hot_patches;  // ground-truth major set, ascending
};

// Deterministic bundle whose weighted salience ranks the given hot patches
// strictly above every other patch whenever noise < 1 / (patch area).
inline SynthSalience synth_salience(std::uint64_t seed, std::vector<std::size_t> hot_patches,
                                    const SynthSalienceSpec& spec) {
    const std::size_t n_patches = spec.grid_rows * spec.grid_cols;
    for (const std::size_t p : hot_patches)
        if (p >= n_patches) throw ContractError("hot patch index outside the grid");
    std::sort(hot_patches.begin(), hot_patches.end());
    hot_patches.erase(std::unique(hot_patches.begin(), hot_patches.end()), hot_patches.end());

    Rng rng(seed);
    SynthSalience out;
    out.hot_patches = hot_patches;
    out.bundle.rows = spec.grid_rows * spec.patch_h;
    out.bundle.cols = spec.grid_cols * spec.patch_w;

    std::vector<char> hot(n_patches, 0);
    for (const std::size_t p : hot_patches) hot[p] = 1;

    for (std::size_t k = 0; k < spec.n_maps; ++k) {
        SalienceEntry e;
        e.class_id = static_cast<int>(k);
        e.confidence = static_cast<float>(rng.uniform(0.25, 1.0));
        e.map.resize(out.bundle.rows * out.bundle.cols);
        for (std::size_t r = 0; r < out.bundle.rows; ++r)
            for (std::size_t c = 0; c < out.bundle.cols; ++c) {
                const std::size_t patch =
                    (r / spec.patch_h) * spec.grid_cols + (c / spec.patch_w);
                const double base = hot[patch] ? 1.0 : 0.0;
                const double jitter = spec.noise > 0.0 ? rng.uniform(0.0, spec.noise) : 0.0;
                e.map[r * out.bundle.cols + c] = static_cast<float>(base + jitter);
            }
        out.bundle.entries.push_back(std::move(e));
    }
    return out;
}

}  // namespace cagevit
