#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cagevit/checkpoint.hpp"
#include "cagevit/data.hpp"
#include "cagevit/rng.hpp"
#include "cagevit/tnsr.hpp"

using namespace cagevit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    const fs::path dir = fs::temp_directory_path() / (std::string("cagevit_test_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("f64 tensors round-trip bit-identically") {
    Rng rng(211);
    std::vector<double> v(24);
    rng.fill_uniform(v, -1e6, 1e6);
    const Tensor<double> t({2, 3, 4}, v);
    std::stringstream buf;
    tnsr::write(buf, t);
    const Tensor<double> back = tnsr::read<double>(buf);
    CHECK(back.shape() == t.shape());
    CHECK(back.data() == t.data());
}

TEST_CASE("f32 tensors round-trip and widen exactly") {
    Rng rng(223);
    std::vector<float> v(10);
    rng.fill_uniform(v, -100.0, 100.0);
    const Tensor<float> t({10}, v);
    std::stringstream buf;
    tnsr::write(buf, t);
    std::stringstream copy(buf.str());
    CHECK(tnsr::read<float>(buf).data() == t.data());
    const Tensor<double> wide = tnsr::read<double>(copy);
    for (std::size_t i = 0; i < 10; ++i) CHECK(wide(i) == double(t(i)));
}

TEST_CASE("TNSR rejects malformed input with byte offsets") {
    // empty shape
    std::stringstream zero_dim;
    zero_dim.write("TNSR\x01\x01", 6);
    const std::uint32_t nd = 0;
    zero_dim.write(reinterpret_cast<const char*>(&nd), 4);
    CHECK_THROWS_AS(tnsr::read<float>(zero_dim), ParseError);

    // bad magic
    std::stringstream magic("XXXX");
    CHECK_THROWS_AS(tnsr::read<float>(magic), ParseError);

    // unknown version
    std::stringstream version;
    version.write("TNSR\x02\x01", 6);
    CHECK_THROWS_AS(tnsr::read<float>(version), ParseError);

    // unknown dtype
    std::stringstream dtype;
    dtype.write("TNSR\x01\x07", 6);
    CHECK_THROWS_AS(tnsr::read<float>(dtype), ParseError);

    // truncated payload reports where it stopped
    std::stringstream buf;
    tnsr::write(buf, Tensor<float>::ones({4}));
    const std::string full = buf.str();
    std::stringstream cut(full.substr(0, full.size() - 2));
    try {
        tnsr::read<float>(cut);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset > 0);
        CHECK(std::string(e.what()).find("payload") != std::string::npos);
    }
}

TEST_CASE("checkpoints round-trip and reproduce logits exactly") {
    VariantConfig cfg;
    cfg.layers = 2;
    cfg.d = 16;
    cfg.mlp_hidden = 24;
    cfg.pool = 2;
    cfg.n_heads = 2;
    cfg.n_fusion = 2;
    cfg.top_k = 3;
    cfg.rho = 0.5;
    cfg.n_classes = 3;
    cfg.grid_rows = cfg.grid_cols = 4;
    cfg.patch_h = cfg.patch_w = 2;
    cfg.channels = 1;

    ModelParams<float> params = build<float>(cfg, 99);

    SyntheticTask task;
    task.n_classes = 3;
    task.grid_rows = task.grid_cols = 4;
    task.patch_h = task.patch_w = 2;
    task.n_maps = 3;
    task.seed = 5;
    const std::vector<Sample> data = gen_dataset(task, 1);
    const Tensor<float> logits = forward(params, data[0].image, data[0].bundle);

    const fs::path dir = temp_dir("ckpt");
    save_checkpoint(dir, params);

    // refuses to clobber without the explicit flag
    CHECK_THROWS_AS(save_checkpoint(dir, params), IoError);
    CHECK_NOTHROW(save_checkpoint(dir, params, /*overwrite=*/true));

    const CheckpointInfo info = checkpoint_info(dir);
    CHECK(info.dtype == "f32");
    CHECK(info.config.d == 16);

    const ModelParams<float> loaded = load_checkpoint<float>(dir);
    for (std::size_t i = 0; i < params.table.size(); ++i) {
        CHECK(loaded.table[i].first == params.table[i].first);
        CHECK(loaded.table[i].second.data() == params.table[i].second.data());
    }
    const Tensor<float> logits2 = forward(loaded, data[0].image, data[0].bundle);
    CHECK(logits2.data() == logits.data());

    fs::remove_all(dir);
}

TEST_CASE("checkpoint loading validates shapes against the config") {
    VariantConfig cfg;
    cfg.layers = 1;
    cfg.d = 8;
    cfg.mlp_hidden = 8;
    cfg.pool = 1;
    cfg.n_heads = 2;
    cfg.n_fusion = 1;
    cfg.grid_rows = cfg.grid_cols = 2;
    cfg.patch_h = cfg.patch_w = 2;

    ModelParams<float> params = build<float>(cfg, 1);
    const fs::path dir = temp_dir("ckpt_bad");
    save_checkpoint(dir, params);

    // corrupt one tensor's shape on disk
    tnsr::write_file(dir / "params" / "embed.w.tnsr", Tensor<float>::ones({3, 3}));
    CHECK_THROWS_AS(load_checkpoint<float>(dir), DimensionError);
    fs::remove_all(dir);
}
