#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "cagevit/complexity.hpp"

using namespace cagevit;

TEST_CASE("SRA flops formula evaluates exactly") {
    const FlopsReport r = flops_sra(16, 16, 64, 2);
    CHECK(r.flops == 6291456ull);  // 2*256^2*64/4 + 256*64^2*4
    CHECK(r.formula_id == "Eq9");

    const FlopsReport unit = flops_sra(1, 1, 5, 1);
    CHECK(unit.flops == 2ull * 5 + 5 * 5);  // 2d + d^2 at the unit grid

    // with the quadratic term dominant, raising R lowers the count
    const FlopsReport r1 = flops_sra(64, 64, 8, 1);
    const FlopsReport r2 = flops_sra(64, 64, 8, 2);
    CHECK(r2.flops < r1.flops);

    CHECK_THROWS_AS(flops_sra(0, 16, 64, 2), ContractError);
    CHECK_THROWS_AS(flops_sra(3, 1, 8, 2), ContractError);  // R^2 does not divide h^2 w^2
}

TEST_CASE("linear SRA flops formula evaluates exactly") {
    CHECK(flops_linear(16, 16, 7, 64).flops == 1605632ull);  // 2*256*49*64
    CHECK(flops_linear(1, 1, 1, 1).flops == 2ull);
    CHECK_THROWS_AS(flops_linear(4, 4, 0, 8), ContractError);
}

TEST_CASE("the gated variant reports the identical count") {
    for (std::size_t h : {1, 3, 16, 64})
        for (std::size_t p : {1, 2, 7})
            for (std::size_t d : {1, 8, 64}) {
                const FlopsReport lin = flops_linear(h, 2 * h, p, d);
                const FlopsReport gated = flops_gated_linear(h, 2 * h, p, d);
                CHECK(gated.flops == lin.flops);
                CHECK(gated.kind == AttentionKind::GatedLinearSRA);
                CHECK_FALSE(gated.note.empty());
            }
}

TEST_CASE("auxiliary-cost accounting adds strictly positive terms") {
    const FlopsReport gated = flops_gated_linear(16, 16, 7, 64);
    CHECK(add_auxiliary_costs(gated, 4, 64) > gated.flops);
}

TEST_CASE("crossover: realistic sizes where linear beats SRA") {
    CHECK(flops_linear(16, 16, 7, 64).flops < flops_sra(16, 16, 64, 2).flops);
}

TEST_CASE("bench input generation is deterministic per seed") {
    const Tensor<float> a = bench_input(128, 16, 77);
    const Tensor<float> b = bench_input(128, 16, 77);
    CHECK(a.data() == b.data());
    const Tensor<float> c = bench_input(128, 16, 78);
    CHECK(a.data() != c.data());
}

TEST_CASE("bench validates its preconditions") {
    BenchSettings s;
    s.d = 8;
    s.pool = 2;
    CHECK_THROWS_AS(bench(AttentionKind::Full, s, {64, 128, 256}, 5), ContractError);
    CHECK_THROWS_AS(bench(AttentionKind::Full, s, {64, 128, 128, 256, 1024}, 5), ContractError);
    CHECK_THROWS_AS(bench(AttentionKind::Full, s, {64, 128, 256, 512, 1024}, 2), ContractError);
}

TEST_CASE("fitted exponents are stable across seeds") {
    BenchSettings a;
    a.d = 16;
    a.pool = 2;
    a.n_heads = 2;
    BenchSettings b = a;
    a.seed = 11;
    b.seed = 12;
    const std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
    const ScalingFit fit_a = bench(AttentionKind::GatedLinearSRA, a, lengths, 5);
    const ScalingFit fit_b = bench(AttentionKind::GatedLinearSRA, b, lengths, 5);
    CHECK(std::fabs(fit_a.alpha - fit_b.alpha) <= 0.2);
}

TEST_CASE("measured times move with the formula ratio where linear beats SRA") {
    BenchSettings s;
    s.d = 32;
    s.pool = 7;
    s.n_heads = 4;
    s.reduction = 2;
    const std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
    const ScalingFit lin = bench(AttentionKind::LinearSRA, s, lengths, 5);
    const ScalingFit red = bench(AttentionKind::SRA, s, lengths, 5);
    // at the largest grid the formulas separate by more than an order of
    // magnitude; the measured medians must agree in sign
    CHECK(flops_linear(64, 64, s.pool, s.d).flops < flops_sra(64, 64, s.d, s.reduction).flops);
    CHECK(lin.median_ns.back() < red.median_ns.back());
}

TEST_CASE("bench produces a finite fit and a well-formed CSV") {
    BenchSettings s;
    s.d = 16;
    s.pool = 2;
    s.n_heads = 2;
    const std::vector<std::size_t> lengths{64, 128, 256, 512, 1024};
    const ScalingFit fit = bench(AttentionKind::LinearSRA, s, lengths, 5);
    REQUIRE(fit.median_ns.size() == 5);
    CHECK(std::isfinite(fit.alpha));

    std::ostringstream csv;
    write_scaling_csv(csv, AttentionKind::LinearSRA, s, fit);
    const std::string text = csv.str();
    CHECK(text.find("kind,N,h,w,d,param,flops,median_ns,alpha\n") == 0);
    CHECK(text.find("linear_sra,64,8,8,16,2,") != std::string::npos);
    CHECK(text.find("# alpha=") != std::string::npos);
}
