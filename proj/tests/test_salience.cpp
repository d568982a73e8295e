#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cagevit/rng.hpp"
#include "cagevit/salience.hpp"

using namespace cagevit;

namespace {

SalienceBundle random_bundle(Rng& rng, std::size_t k, std::size_t rows, std::size_t cols) {
    SalienceBundle b;
    b.rows = rows;
    b.cols = cols;
    for (std::size_t i = 0; i < k; ++i) {
        SalienceEntry e;
        e.class_id = static_cast<int>(i);
        e.confidence = static_cast<float>(rng.uniform(0.05, 1.0));
        e.map.resize(rows * cols);
        for (auto& v : e.map) v = static_cast<float>(rng.uniform(0.0, 1.0));
        b.entries.push_back(std::move(e));
    }
    return b;
}

// Independent accumulation over (k, i, j), one pixel at a time.
std::vector<double> brute_force_salience(const SalienceBundle& b) {
    double z = 0;
    for (const auto& e : b.entries) z += e.confidence;
    std::vector<double> s(b.rows * b.cols, 0.0);
    for (const auto& e : b.entries)
        for (std::size_t i = 0; i < b.rows; ++i)
            for (std::size_t j = 0; j < b.cols; ++j)
                s[i * b.cols + j] += (double(e.confidence) / z) * double(e.map[i * b.cols + j]);
    return s;
}

}  // namespace

TEST_CASE("weighted salience trivial combinations") {
    SalienceBundle b;
    b.rows = b.cols = 4;
    SalienceEntry one{7, 0.6f, std::vector<float>(16)};
    for (std::size_t i = 0; i < 16; ++i) one.map[i] = static_cast<float>(i) * 0.1f;
    b.entries.push_back(one);

    // K = 1 reproduces the single map exactly
    const SalienceMap s1 = weighted_salience(b);
    for (std::size_t i = 0; i < 16; ++i) CHECK(s1.values[i] == double(b.entries[0].map[i]));

    // z = [3, 1], maps of ones and zeros -> 0.75 everywhere
    SalienceBundle b2;
    b2.rows = b2.cols = 4;
    b2.entries.push_back({0, 3.0f, std::vector<float>(16, 1.0f)});
    b2.entries.push_back({1, 1.0f, std::vector<float>(16, 0.0f)});
    const SalienceMap s2 = weighted_salience(b2);
    for (const double v : s2.values) CHECK(v == Catch::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("weighted salience matches the brute-force loop") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const SalienceBundle b = random_bundle(rng, 9, 17, 13);
        const SalienceMap s = weighted_salience(b);
        const std::vector<double> oracle = brute_force_salience(b);
        for (std::size_t i = 0; i < oracle.size(); ++i)
            CHECK(s.values[i] == Catch::Approx(oracle[i]).margin(1e-12));
    }
}

TEST_CASE("weighted salience is invariant to confidence rescaling and permutation") {
    Rng rng(103);
    SalienceBundle b = random_bundle(rng, 5, 8, 8);
    const SalienceMap base = weighted_salience(b);

    SalienceBundle scaled = b;
    for (auto& e : scaled.entries) e.confidence *= 4.0f;
    const SalienceMap s_scaled = weighted_salience(scaled);
    for (std::size_t i = 0; i < base.values.size(); ++i)
        CHECK(s_scaled.values[i] == Catch::Approx(base.values[i]).margin(1e-12));

    SalienceBundle shuffled = b;
    std::reverse(shuffled.entries.begin(), shuffled.entries.end());
    const SalienceMap s_shuffled = weighted_salience(shuffled);
    for (std::size_t i = 0; i < base.values.size(); ++i)
        CHECK(s_shuffled.values[i] == Catch::Approx(base.values[i]).margin(1e-12));
}

TEST_CASE("weighted salience stays inside the pointwise envelope") {
    Rng rng(107);
    const SalienceBundle b = random_bundle(rng, 6, 9, 5);
    const SalienceMap s = weighted_salience(b);
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        double lo = 1e300, hi = -1e300;
        for (const auto& e : b.entries) {
            lo = std::min(lo, double(e.map[i]));
            hi = std::max(hi, double(e.map[i]));
        }
        CHECK(s.values[i] >= lo - 1e-12);
        CHECK(s.values[i] <= hi + 1e-12);
    }
}

TEST_CASE("weighted salience error cases") {
    SalienceBundle empty;
    empty.rows = empty.cols = 4;
    CHECK_THROWS_AS(weighted_salience(empty), ContractError);

    SalienceBundle bad;
    bad.rows = bad.cols = 4;
    bad.entries.push_back({0, 1.0f, std::vector<float>(16, 1.0f)});
    bad.entries.push_back({1, 1.0f, std::vector<float>(9, 1.0f)});
    CHECK_THROWS_AS(weighted_salience(bad), DimensionError);
}

TEST_CASE("patch scores on the 224x224 production geometry") {
    // 224 x 224 map in a 16 x 16 grid of 14 x 14 patches
    SalienceMap uniform;
    uniform.rows = uniform.cols = 224;
    uniform.values.assign(224 * 224, 1.0);
    const Tensor<double> scores = patch_scores(uniform, 16, 16, 14, 14);
    REQUIRE(scores.size() == 256);
    for (std::size_t i = 0; i < 256; ++i) CHECK(scores(i) == 196.0);

    SalienceMap hot;
    hot.rows = hot.cols = 224;
    hot.values.assign(224 * 224, 0.0);
    hot.values[37 * 224 + 181] = 2.5;
    const Tensor<double> hot_scores = patch_scores(hot, 16, 16, 14, 14);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < 256; ++i)
        if (hot_scores(i) != 0.0) ++nonzero;
    CHECK(nonzero == 1);
    CHECK(hot_scores((37 / 14) * 16 + 181 / 14) == 2.5);
}

TEST_CASE("patch scores match a per-pixel accumulation oracle") {
    Rng rng(109);
    SalienceMap s;
    s.rows = s.cols = 224;
    s.values.resize(224 * 224);
    for (auto& v : s.values) v = rng.uniform(0.0, 1.0);

    const Tensor<double> scores = patch_scores(s, 16, 16, 14, 14);

    // oracle: walk pixels, not patches
    std::vector<double> oracle(256, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < 224; ++i)
        for (std::size_t j = 0; j < 224; ++j) {
            oracle[(i / 14) * 16 + j / 14] += s.values[i * 224 + j];
            total += s.values[i * 224 + j];
        }
    double score_sum = 0.0;
    for (std::size_t i = 0; i < 256; ++i) {
        CHECK(scores(i) == Catch::Approx(oracle[i]).margin(1e-9));
        score_sum += scores(i);
    }
    CHECK(score_sum == Catch::Approx(total).margin(1e-9));

    SalienceMap odd;
    odd.rows = 10;
    odd.cols = 10;
    odd.values.assign(100, 0.0);
    CHECK_THROWS_AS(patch_scores(odd, 3, 3, 3, 3), DimensionError);
}

TEST_CASE("select_and_rearrange ordering and counts") {
    const TokenPartition p = select_and_rearrange(std::vector<double>{5, 1, 3, 2}, 0.5);
    CHECK(p.major == std::vector<std::size_t>{0, 2});
    CHECK(p.minor == std::vector<std::size_t>{1, 3});

    const TokenPartition all = select_and_rearrange(std::vector<double>{1, 4, 2, 9}, 1.0);
    CHECK(all.major == std::vector<std::size_t>{3, 1, 2, 0});
    CHECK(all.minor.empty());

    std::vector<double> scores(256);
    Rng rng(113);
    rng.fill_uniform(scores, 0.0, 1.0);
    const TokenPartition parted = select_and_rearrange(scores, 0.2);
    CHECK(parted.minor.size() == 204);  // floor(256 * 0.8)
    CHECK(parted.major.size() == 52);

    // ties break toward the lower index
    const TokenPartition tied = select_and_rearrange(std::vector<double>{7, 7, 7, 7}, 0.5);
    CHECK(tied.major == std::vector<std::size_t>{0, 1});

    CHECK_THROWS_AS(select_and_rearrange(std::vector<double>{1.0, std::nan("")}, 0.5),
                    ContractError);
    CHECK_THROWS_AS(select_and_rearrange(std::vector<double>{}, 0.5), ContractError);
}

TEST_CASE("minor_count follows decimal-rho semantics") {
    // 1 - 0.3 evaluates below 0.7 in binary; the floor must still read 7
    CHECK(minor_count(10, 0.3) == 7);
    CHECK(minor_count(10, 0.1) == 9);
    CHECK(minor_count(256, 0.2) == 204);
    CHECK(minor_count(16, 0.0) == 16);
    CHECK(minor_count(16, 1.0) == 0);
    CHECK_THROWS_AS(minor_count(4, 1.5), ContractError);
}

TEST_CASE("partition sizes satisfy the floor formula on the rho grid") {
    for (std::size_t n = 1; n <= 200; ++n) {
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) scores[i] = static_cast<double>((i * 37) % 101);
        for (int tenths = 0; tenths <= 10; ++tenths) {
            const double rho = tenths / 10.0;
            const TokenPartition p = select_and_rearrange(scores, rho);
            const std::size_t expected_minor = (n * (10 - tenths)) / 10;  // exact rationals
            CHECK(p.minor.size() == expected_minor);
            CHECK(p.major.size() + p.minor.size() == n);
        }
    }
}

TEST_CASE("selection is invariant to positive affine score transforms") {
    Rng rng(127);
    std::vector<double> scores(40);
    rng.fill_uniform(scores, -5.0, 5.0);
    const TokenPartition base = select_and_rearrange(scores, 0.3);
    std::vector<double> mapped(scores);
    for (auto& v : mapped) v = 2.5 * v + 17.0;
    const TokenPartition moved = select_and_rearrange(mapped, 0.3);
    CHECK(base.major == moved.major);
    CHECK(base.minor == moved.minor);
}

TEST_CASE("raising a major's score never demotes it") {
    Rng rng(131);
    std::vector<double> scores(24);
    rng.fill_uniform(scores, 0.0, 1.0);
    const TokenPartition base = select_and_rearrange(scores, 0.4);
    for (const std::size_t idx : base.major) {
        std::vector<double> boosted(scores);
        boosted[idx] += 0.5;
        const TokenPartition b = select_and_rearrange(boosted, 0.4);
        CHECK(std::find(b.major.begin(), b.major.end(), idx) != b.major.end());
    }
}

TEST_CASE("partition dominance: every major score >= every minor score") {
    Rng rng(137);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> scores(50);
        rng.fill_uniform(scores, -1.0, 1.0);
        const TokenPartition p = select_and_rearrange(scores, rng.uniform(0.0, 1.0));
        if (p.major.empty() || p.minor.empty()) continue;
        double min_major = 1e300, max_minor = -1e300;
        for (const std::size_t i : p.major) min_major = std::min(min_major, scores[i]);
        for (const std::size_t i : p.minor) max_minor = std::max(max_minor, scores[i]);
        CHECK(min_major >= max_minor);
    }
}

TEST_CASE("bundle files round-trip and enforce the drop rule") {
    Rng rng(139);
    const SalienceBundle b = random_bundle(rng, 4, 6, 5);
    std::stringstream buf;
    write_bundle(buf, b);
    const SalienceBundle back = ingest_bundle(buf);
    REQUIRE(back.k() == 4);
    REQUIRE(back.rows == 6);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(back.entries[k].class_id == b.entries[k].class_id);
        CHECK(back.entries[k].confidence == b.entries[k].confidence);
        CHECK(back.entries[k].map == b.entries[k].map);
    }

    // one zero-confidence record among 3 is dropped
    std::stringstream dropped;
    dropped << "CAGA-BUNDLE v1\n3 2 2\n";
    auto put_map = [&](float conf, int id) {
        dropped << id << " " << conf << "\n";
        tnsr::write(dropped, Tensor<float>::full({2, 2}, 0.5f));
    };
    put_map(0.7f, 0);
    put_map(0.0f, 1);
    put_map(0.3f, 2);
    const SalienceBundle two = ingest_bundle(dropped);
    CHECK(two.k() == 2);
    CHECK(two.entries[0].class_id == 0);
    CHECK(two.entries[1].class_id == 2);

    // all-zero confidences are rejected
    std::stringstream zeros;
    zeros << "CAGA-BUNDLE v1\n1 2 2\n";
    zeros << "0 0\n";
    tnsr::write(zeros, Tensor<float>::full({2, 2}, 0.5f));
    CHECK_THROWS_AS(ingest_bundle(zeros), ContractError);

    // malformed header reports a byte offset
    std::stringstream bad("CAGA-BUNDLE v2\n");
    try {
        ingest_bundle(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}

TEST_CASE("nine-class bundles combine without error") {
    Rng rng(149);
    const SalienceBundle b = random_bundle(rng, 9, 16, 16);
    CHECK_NOTHROW(weighted_salience(b));
}

TEST_CASE("take_top_k keeps the highest-confidence entries, stably") {
    SalienceBundle b;
    b.rows = b.cols = 2;
    b.entries.push_back({0, 0.2f, std::vector<float>(4, 0.f)});
    b.entries.push_back({1, 0.9f, std::vector<float>(4, 0.f)});
    b.entries.push_back({2, 0.9f, std::vector<float>(4, 0.f)});
    b.entries.push_back({3, 0.5f, std::vector<float>(4, 0.f)});
    const SalienceBundle top = take_top_k(b, 3);
    REQUIRE(top.k() == 3);
    CHECK(top.entries[0].class_id == 1);
    CHECK(top.entries[1].class_id == 2);
    CHECK(top.entries[2].class_id == 3);
    CHECK(take_top_k(b, 99).k() == 4);
}

TEST_CASE("synthetic salience recovers planted hot patches") {
    SynthSalienceSpec spec;
    spec.grid_rows = spec.grid_cols = 4;
    spec.n_maps = 3;

    const SynthSalience planted = synth_salience(42, {5}, spec);
    const Tensor<double> scores =
        patch_scores(weighted_salience(planted.bundle), 4, 4, spec.patch_h, spec.patch_w);
    const TokenPartition p = select_and_rearrange(scores, 1.0 / 16.0);
    CHECK(p.major == std::vector<std::size_t>{5});

    // no hot patches: all scores equal, ties go to the lowest indices
    const SynthSalience flat = synth_salience(42, {}, spec);
    const Tensor<double> flat_scores =
        patch_scores(weighted_salience(flat.bundle), 4, 4, spec.patch_h, spec.patch_w);
    const TokenPartition fp = select_and_rearrange(flat_scores, 0.25);
    CHECK(fp.major == std::vector<std::size_t>{0, 1, 2, 3});

    // determinism
    const SynthSalience a = synth_salience(7, {1, 2}, spec);
    const SynthSalience b = synth_salience(7, {1, 2}, spec);
    REQUIRE(a.bundle.k() == b.bundle.k());
    for (std::size_t k = 0; k < a.bundle.k(); ++k) {
        CHECK(a.bundle.entries[k].confidence == b.bundle.entries[k].confidence);
        CHECK(a.bundle.entries[k].map == b.bundle.entries[k].map);
    }
}
