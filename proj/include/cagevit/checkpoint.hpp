#pragma once

// Checkpoint = config as key=value text, a manifest of parameter names and
// shapes, and one TNSR file per parameter.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cagevit/config.hpp"
#include "cagevit/error.hpp"
#include "cagevit/model.hpp"
#include "cagevit/tnsr.hpp"

namespace cagevit {

namespace detail {

inline std::string param_file_name(const std::string& name) {
    return name + ".tnsr";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& params,
                     bool overwrite = false) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.txt";
    if (fs::exists(manifest_path) && !overwrite)
        throw IoError("checkpoint already exists at " + dir.string() +
                      "; pass overwrite to replace it");
    fs::create_directories(dir / "params");

    {
        std::ofstream cfg(dir / "config.txt");
        if (!cfg) throw IoError("cannot write " + (dir / "config.txt").string());
        write_config(cfg, params.config);
        cfg << "dtype=" << (sizeof(T) == 4 ? "f32" : "f64") << "\n";
    }
    std::ofstream manifest(manifest_path);
    if (!manifest) throw IoError("cannot write " + manifest_path.string());
    for (const auto& [name, tensor] : params.table) {
        const std::string file = detail::param_file_name(name);
        tnsr::write_file(dir / "params" / file, tensor);
        manifest << name << " params/" << file;
        manifest << " " << tensor.ndim();
        for (const std::size_t d : tensor.shape()) manifest << " " << d;
        manifest << "\n";
    }
    if (!manifest) throw IoError("manifest write failed");
}

struct CheckpointInfo {
    VariantConfig config;
    std::string dtype;  // "f32" or "f64"
};

inline CheckpointInfo checkpoint_info(const std::filesystem::path& dir) {
    std::ifstream is(dir / "config.txt");
    if (!is) throw IoError("cannot open checkpoint config: " + (dir / "config.txt").string());
    std::stringstream config_text;
    CheckpointInfo info;
    info.dtype = "f32";
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("dtype=", 0) == 0)
            info.dtype = line.substr(6);
        else
            config_text << line << "\n";
    }
    if (info.dtype != "f32" && info.dtype != "f64")
        throw ParseError("unknown checkpoint dtype '" + info.dtype + "'", 0);
    info.config = parse_config(config_text);
    return info;
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& dir) {
    const CheckpointInfo info = checkpoint_info(dir);
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("cannot open checkpoint manifest: " + dir.string());

    std::vector<std::pair<std::string, Tensor<T>>> table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream rec(line);
        std::string name, file;
        if (!(rec >> name >> file))
            throw ParseError("bad manifest line " + std::to_string(line_no), 0);
        table.emplace_back(name, tnsr::read_file<T>(dir / file));
    }
    return assemble_params<T>(info.config, std::move(table));
}

}  // namespace cagevit
