#pragma once

// Variant hyperparameters and their plain-text key=value serialization.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "cagevit/attention.hpp"
#include "cagevit/error.hpp"

namespace cagevit {

struct VariantConfig {
    std::size_t layers = 2;       // L
    std::size_t d = 32;           // encoder hidden width
    std::size_t mlp_hidden = 64;  // D, head MLP hidden width
    std::size_t pool = 2;         // p
    std::size_t n_heads = 4;      // N_h
    std::size_t n_fusion = 2;     // N_f
    std::size_t top_k = 3;        // K
    double rho = 0.5;
    std::size_t n_classes = 2;
    std::size_t grid_rows = 4, grid_cols = 4;
    std::size_t patch_h = 4, patch_w = 4, channels = 1;
    AttentionKind attention = AttentionKind::GatedLinearSRA;
    std::size_t reduction = 2;  // R, used only when attention = sra

    std::size_t n_patches() const { return grid_rows * grid_cols; }
    std::size_t patch_flat() const { return patch_h * patch_w * channels; }
    std::size_t image_h() const { return grid_rows * patch_h; }
    std::size_t image_w() const { return grid_cols * patch_w; }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ContractError(std::string("config field must be positive: ") + name);
        };
        positive(layers, "layers");
        positive(d, "d");
        positive(mlp_hidden, "mlp_hidden");
        positive(pool, "pool");
        positive(n_heads, "n_heads");
        positive(n_fusion, "n_fusion");
        positive(top_k, "top_k");
        positive(n_classes, "n_classes");
        positive(grid_rows, "grid_rows");
        positive(grid_cols, "grid_cols");
        positive(patch_h, "patch_h");
        positive(patch_w, "patch_w");
        positive(channels, "channels");
        if (d % n_heads != 0)
            throw ContractError("config invalid: d=" + std::to_string(d) +
                                " is not divisible by n_heads=" + std::to_string(n_heads));
        // rho = 0 (fusion-only sequence) is a legal degenerate configuration;
        // the rho sweep depends on it.
        if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("config invalid: rho outside [0, 1]");
        if (attention != AttentionKind::Full) {
            if (attention == AttentionKind::SRA) {
                if (reduction == 0 || grid_rows % reduction != 0 || grid_cols % reduction != 0)
                    throw ContractError("config invalid: reduction does not divide the patch grid");
            } else if (grid_rows < pool || grid_cols < pool) {
                throw ContractError("config invalid: pool exceeds the patch grid");
            }
        }
    }
};

inline AttentionKind attention_kind_from(const std::string& s) {
    if (s == "full") return AttentionKind::Full;
    if (s == "sra") return AttentionKind::SRA;
    if (s == "linear_sra") return AttentionKind::LinearSRA;
    if (s == "gated_linear_sra") return AttentionKind::GatedLinearSRA;
    throw ParseError("unknown attention kind '" + s + "'", 0);
}

// The standard CageViT scales (T, S, B, L) at full size: 224x224x3 images in
// a 16x16 grid of 14x14 patches, 1000 classes.
inline VariantConfig variant_preset(char which) {
    VariantConfig c;
    c.pool = 7;
    c.top_k = 9;
    c.rho = 0.2;
    c.n_classes = 1000;
    c.grid_rows = c.grid_cols = 16;
    c.patch_h = c.patch_w = 14;
    c.channels = 3;
    switch (which) {
        case 'T': c.layers = 8; c.d = 768; c.mlp_hidden = 1024; c.n_heads = 8; c.n_fusion = 4; break;
        case 'S': c.layers = 8; c.d = 768; c.mlp_hidden = 1024; c.n_heads = 12; c.n_fusion = 8; break;
        case 'B': c.layers = 12; c.d = 768; c.mlp_hidden = 2048; c.n_heads = 12; c.n_fusion = 8; break;
        case 'L': c.layers = 16; c.d = 1024; c.mlp_hidden = 2048; c.n_heads = 16; c.n_fusion = 8; break;
        default: throw ContractError("unknown variant; expected T, S, B or L");
    }
    return c;
}

// ---------------------------------------------------------------------------
// key=value files
// ---------------------------------------------------------------------------

inline void write_config(std::ostream& os, const VariantConfig& c) {
    os << "layers=" << c.layers << "\n";
    os << "d=" << c.d << "\n";
    os << "mlp_hidden=" << c.mlp_hidden << "\n";
    os << "pool=" << c.pool << "\n";
    os << "n_heads=" << c.n_heads << "\n";
    os << "n_fusion=" << c.n_fusion << "\n";
    os << "top_k=" << c.top_k << "\n";
    os << "rho=" << c.rho << "\n";
    os << "n_classes=" << c.n_classes << "\n";
    os << "grid_rows=" << c.grid_rows << "\n";
    os << "grid_cols=" << c.grid_cols << "\n";
    os << "patch_h=" << c.patch_h << "\n";
    os << "patch_w=" << c.patch_w << "\n";
    os << "channels=" << c.channels << "\n";
    os << "attention=" << to_string(c.attention) << "\n";
    os << "reduction=" << c.reduction << "\n";
}

inline VariantConfig parse_config(std::istream& is) {
    VariantConfig c;
    std::string line;
    std::size_t line_no = 0, offset = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t line_at = offset;
        offset += line.size() + 1;
        std::string trimmed = line;
        trimmed.erase(0, trimmed.find_first_not_of(" \t"));
        if (trimmed.empty() || trimmed[0] == '#') continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line " + std::to_string(line_no) + " has no '='", line_at);
        const std::string key = trimmed.substr(0, eq);
        const std::string value = trimmed.substr(eq + 1);
        try {
            if (key == "layers") c.layers = std::stoul(value);
            else if (key == "d") c.d = std::stoul(value);
            else if (key == "mlp_hidden") c.mlp_hidden = std::stoul(value);
            else if (key == "pool") c.pool = std::stoul(value);
            else if (key == "n_heads") c.n_heads = std::stoul(value);
            else if (key == "n_fusion") c.n_fusion = std::stoul(value);
            else if (key == "top_k") c.top_k = std::stoul(value);
            else if (key == "rho") c.rho = std::stod(value);
            else if (key == "n_classes") c.n_classes = std::stoul(value);
            else if (key == "grid_rows") c.grid_rows = std::stoul(value);
            else if (key == "grid_cols") c.grid_cols = std::stoul(value);
            else if (key == "patch_h") c.patch_h = std::stoul(value);
            else if (key == "patch_w") c.patch_w = std::stoul(value);
            else if (key == "channels") c.channels = std::stoul(value);
            else if (key == "attention") c.attention = attention_kind_from(value);
            else if (key == "reduction") c.reduction = std::stoul(value);
            else throw ParseError("unknown config key '" + key + "'", line_at);
        } catch (const std::invalid_argument&) {
            throw ParseError("bad value for config key '" + key + "'", line_at);
        } catch (const std::out_of_range&) {
            throw ParseError("bad value for config key '" + key + "'", line_at);
        }
    }
    c.validate();
    return c;
}

inline VariantConfig read_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    return parse_config(is);
}

}  // namespace cagevit
