// Acceptance suite. Each criterion prints one PASS/FAIL line; the process
// exits with the number of failed criteria.

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cagevit/checkpoint.hpp"
#include "cagevit/complexity.hpp"
#include "cagevit/data.hpp"
#include "cagevit/gradcheck.hpp"
#include "cagevit/model.hpp"
#include "cagevit/salience.hpp"
#include "cagevit/tnsr.hpp"

using namespace cagevit;

namespace {

int failures = 0;

double run_criterion(int number, const std::string& label,
                     const std::function<bool(std::string&)>& body) {
    std::string detail;
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %d. %s (%.1fs%s%s)\n", ok ? "PASS" : "FAIL", number, label.c_str(), seconds,
                detail.empty() ? "" : "; ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
    return seconds;
}

VariantConfig acceptance_tiny_config() {
    VariantConfig cfg;
    cfg.layers = 2;
    cfg.d = 32;
    cfg.mlp_hidden = 64;
    cfg.pool = 2;
    cfg.n_heads = 4;
    cfg.n_fusion = 2;
    cfg.top_k = 3;
    cfg.rho = 0.5;
    cfg.n_classes = 2;
    cfg.grid_rows = cfg.grid_cols = 4;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.channels = 1;
    return cfg;
}

SyntheticTask acceptance_task(std::uint64_t seed) {
    SyntheticTask task;
    task.n_classes = 2;
    task.grid_rows = task.grid_cols = 4;
    task.patch_h = task.patch_w = 4;
    task.hot_per_sample = 8;
    task.n_maps = 6;
    task.seed = seed;
    return task;
}

double train_accuracy(const VariantConfig& cfg, const std::vector<Sample>& data,
                      std::size_t steps, std::size_t batch_size, float lr, std::uint64_t seed) {
    ModelParams<float> params = build<float>(cfg, seed);
    AdamW<float> opt;
    opt.reset(params);
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<TrainSample<float>> batch;
        for (std::size_t j = 0; j < batch_size; ++j) {
            const Sample& s = data[cursor];
            batch.push_back({s.image, &s.bundle, s.label});
            cursor = (cursor + 1) % data.size();
        }
        train_step(params, opt, batch, lr);
    }
    std::size_t correct = 0;
    for (const Sample& s : data)
        if (argmax_class(forward(params, s.image, s.bundle)) == s.label) ++correct;
    return double(correct) / double(data.size());
}

}  // namespace

int main() {
    // 1. gradient suite over every primitive and composed block
    run_criterion(1, "gradient suite, all primitives and blocks, rel err < 1e-4", [](std::string& d) {
        const auto t0 = std::chrono::steady_clock::now();
        double worst = 0.0;
        std::string worst_name;
        for (const auto& r : gradcheck_suite("all", 20240501)) {
            if (r.max_rel_err > worst) {
                worst = r.max_rel_err;
                worst_name = r.name;
            }
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream os;
        os << "worst " << worst_name << " " << worst;
        d = os.str();
        return worst < 1e-4 && secs < 60.0;
    });

    // 2. Eq. 4 brute-force equivalence on 100 random bundles
    run_criterion(2, "weighted salience == brute force on 100 bundles, +-1e-12", [](std::string& d) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng(77001);
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t k = 1 + rng.below(16);
            const std::size_t rows = 4 + rng.below(29);  // up to 32
            const std::size_t cols = 4 + rng.below(29);
            SalienceBundle b;
            b.rows = rows;
            b.cols = cols;
            for (std::size_t e = 0; e < k; ++e) {
                SalienceEntry entry;
                entry.class_id = static_cast<int>(e);
                entry.confidence = static_cast<float>(rng.uniform(0.01, 1.0));
                entry.map.resize(rows * cols);
                for (auto& v : entry.map) v = static_cast<float>(rng.uniform(0.0, 1.0));
                b.entries.push_back(std::move(entry));
            }
            const SalienceMap s = weighted_salience(b);
            double z = 0.0;
            for (const auto& e : b.entries) z += e.confidence;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (const auto& e : b.entries)
                        acc += (double(e.confidence) / z) * double(e.map[i * cols + j]);
                    worst = std::max(worst, std::fabs(acc - s.values[i * cols + j]));
                }
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream os;
        os << "worst abs diff " << worst;
        d = os.str();
        return worst <= 1e-12 && secs < 5.0;
    });

    // 3. partition law over N in [1,1000], rho in {0, 0.1, ..., 1.0}
    run_criterion(3, "partition law: |minor| == floor(N(1-rho)) and score dominance",
                  [](std::string& d) {
                      const auto t0 = std::chrono::steady_clock::now();
                      Rng rng(77002);
                      for (std::size_t n = 1; n <= 1000; ++n) {
                          std::vector<double> scores(n);
                          rng.fill_uniform(scores, -10.0, 10.0);
                          for (int tenths = 0; tenths <= 10; ++tenths) {
                              const TokenPartition p =
                                  select_and_rearrange(scores, tenths / 10.0);
                              const std::size_t expected = (n * (10 - tenths)) / 10;
                              if (p.minor.size() != expected) {
                                  std::ostringstream os;
                                  os << "N=" << n << " rho=" << tenths / 10.0 << " got "
                                     << p.minor.size() << " want " << expected;
                                  d = os.str();
                                  return false;
                              }
                              if (!p.major.empty() && !p.minor.empty()) {
                                  double min_major = 1e300, max_minor = -1e300;
                                  for (const std::size_t i : p.major)
                                      min_major = std::min(min_major, scores[i]);
                                  for (const std::size_t i : p.minor)
                                      max_minor = std::max(max_minor, scores[i]);
                                  if (min_major < max_minor) {
                                      d = "dominance violated at N=" + std::to_string(n);
                                      return false;
                                  }
                              }
                          }
                      }
                      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                 .count() < 5.0;
                  });

    // 4. gate-identity keystone on 50 random configs
    run_criterion(4, "unit-gate gated_linear_sra == linear_sra, elementwise exact",
                  [](std::string& d) {
                      Rng rng(77003);
                      for (int trial = 0; trial < 50; ++trial) {
                          const std::size_t heads = 1 + rng.below(3);
                          const std::size_t dh = 1 + rng.below(3);
                          const std::size_t dim = heads * dh;
                          const std::size_t h = 2 + rng.below(7);
                          const std::size_t w = 2 + rng.below(7);
                          const std::size_t pool = 1 + rng.below(std::min(h, w));
                          const std::size_t n_fusion = rng.below(3);

                          // random partial layout: a subset of grid cells
                          // plus the fusion tokens
                          std::vector<std::size_t> cells =
                              rng.sample_without_replacement(h * w, 1 + rng.below(h * w));
                          TokenLayout layout;
                          for (const std::size_t c : cells)
                              layout.grid_pos.push_back(static_cast<std::ptrdiff_t>(c));
                          for (std::size_t i = 0; i < n_fusion; ++i)
                              layout.grid_pos.push_back(TokenLayout::kNoGrid);
                          const std::size_t n_tokens = layout.grid_pos.size();

                          auto mk = [&](std::size_t r, std::size_t c, double lo, double hi) {
                              std::vector<double> v(r * c);
                              rng.fill_uniform(v, lo, hi);
                              return Tensor<double>({r, c}, std::move(v));
                          };
                          AttentionParams<double> params;
                          params.wq = mk(dim, dim, -0.7, 0.7);
                          params.wk = mk(dim, dim, -0.7, 0.7);
                          params.wv = mk(dim, dim, -0.7, 0.7);
                          params.wo = mk(dim, dim, -0.7, 0.7);
                          params.bq = mk(1, dim, -0.2, 0.2);
                          params.bk = mk(1, dim, -0.2, 0.2);
                          params.bv = mk(1, dim, -0.2, 0.2);
                          params.bo = mk(1, dim, -0.2, 0.2);

                          AttentionConfig cfg;
                          cfg.kind = AttentionKind::GatedLinearSRA;
                          cfg.n_heads = heads;
                          cfg.d = dim;
                          cfg.pool = pool;
                          cfg.h = h;
                          cfg.w = w;

                          Tensor<double> x = mk(n_tokens, dim, -1.0, 1.0);
                          Tensor<double> vf = mk(std::max<std::size_t>(1, n_fusion), dim, -1, 1);

                          const Tensor<double> gated = gated_linear_sra(
                              x, vf, params, GateParams<double>::constant(1.0), cfg, layout);
                          AttentionConfig lin = cfg;
                          lin.kind = AttentionKind::LinearSRA;
                          const Tensor<double> plain = linear_sra(x, params, lin, layout);
                          if (gated.data() != plain.data()) {
                              d = "mismatch at trial " + std::to_string(trial);
                              return false;
                          }
                      }
                      return true;
                  });

    // 5. closed-form FLOPs exactness and the gated/linear identity
    run_criterion(5, "FLOPs formulas exact; gated == linear on a 200-point grid",
                  [](std::string& d) {
                      if (flops_sra(16, 16, 64, 2).flops != 6291456ull) {
                          d = "Eq9 pinned value";
                          return false;
                      }
                      if (flops_linear(16, 16, 7, 64).flops != 1605632ull) {
                          d = "Eq10 pinned value";
                          return false;
                      }
                      int points = 0;
                      for (const std::size_t h : {1, 2, 7, 16, 64})
                          for (const std::size_t w : {1, 3, 16, 224})
                              for (const std::size_t p : {1, 2})
                                  for (const std::size_t dim : {1, 8, 64, 768, 4096}) {
                                      const std::uint64_t want =
                                          2ull * h * w * p * p * dim;  // independent evaluation
                                      if (flops_linear(h, w, p, dim).flops != want ||
                                          flops_gated_linear(h, w, p, dim).flops != want) {
                                          d = "identity broken";
                                          return false;
                                      }
                                      ++points;
                                  }
                      d = std::to_string(points) + " grid points";
                      return points == 200;
                  });

    // 6. empirical scaling exponents
    run_criterion(6, "scaling: alpha(full) in [1.7,2.3], alpha(gated) in [0.8,1.3]",
                  [](std::string& d) {
                      const auto t0 = std::chrono::steady_clock::now();
                      BenchSettings settings;
                      settings.d = 32;
                      settings.pool = 7;
                      settings.seed = 9;
                      const std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
                      const ScalingFit full = bench(AttentionKind::Full, settings, lengths, 5);
                      const ScalingFit gated =
                          bench(AttentionKind::GatedLinearSRA, settings, lengths, 5);
                      const double secs =
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
                      std::ostringstream os;
                      os << "alpha_full=" << full.alpha << " alpha_gated=" << gated.alpha;
                      d = os.str();
                      return full.alpha >= 1.7 && full.alpha <= 2.3 && gated.alpha >= 0.8 &&
                             gated.alpha <= 1.3 && secs < 300.0;
                  });

    // 7. toy-task learnability and the rho=0 collapse
    run_criterion(7, "tiny model >= 90% train acc; rho=0 trails by >= 10 points",
                  [](std::string& d) {
                      const auto t0 = std::chrono::steady_clock::now();
                      const std::vector<Sample> data = gen_dataset(acceptance_task(0), 512);
                      const VariantConfig cfg = acceptance_tiny_config();
                      const double acc_half = train_accuracy(cfg, data, 2000, 8, 3e-4f, 0);
                      VariantConfig fusion_only = cfg;
                      fusion_only.rho = 0.0;
                      const double acc_zero = train_accuracy(fusion_only, data, 2000, 8, 3e-4f, 0);
                      const double secs =
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
                      std::ostringstream os;
                      os << "acc(rho=0.5)=" << acc_half << " acc(rho=0)=" << acc_zero;
                      d = os.str();
                      return acc_half >= 0.90 && acc_half - acc_zero >= 0.10 && secs < 600.0;
                  });

    // 8. bit determinism of data, parameters, and logits
    run_criterion(8, "identical seeds give bit-identical data, params, logits",
                  [](std::string& d) {
                      const std::vector<Sample> d1 = gen_dataset(acceptance_task(5), 16);
                      const std::vector<Sample> d2 = gen_dataset(acceptance_task(5), 16);
                      for (std::size_t i = 0; i < d1.size(); ++i) {
                          if (d1[i].image.data() != d2[i].image.data() ||
                              d1[i].label != d2[i].label) {
                              d = "dataset mismatch";
                              return false;
                          }
                          for (std::size_t k = 0; k < d1[i].bundle.k(); ++k)
                              if (d1[i].bundle.entries[k].map != d2[i].bundle.entries[k].map) {
                                  d = "bundle mismatch";
                                  return false;
                              }
                      }
                      const VariantConfig cfg = acceptance_tiny_config();
                      const ModelParams<float> p1 = build<float>(cfg, 31);
                      const ModelParams<float> p2 = build<float>(cfg, 31);
                      for (std::size_t i = 0; i < p1.table.size(); ++i)
                          if (p1.table[i].second.data() != p2.table[i].second.data()) {
                              d = "params mismatch";
                              return false;
                          }
                      for (const auto& s : d1) {
                          const Tensor<float> a = forward(p1, s.image, s.bundle);
                          const Tensor<float> b = forward(p2, s.image, s.bundle);
                          if (a.data() != b.data()) {
                              d = "logits mismatch";
                              return false;
                          }
                      }
                      return true;
                  });

    // 9. serialization round-trips reproduce logits exactly
    run_criterion(9, "TNSR, bundle, checkpoint round-trips reproduce logits", [](std::string& d) {
        namespace fs = std::filesystem;
        Rng rng(77009);

        std::vector<double> v64(60);
        rng.fill_uniform(v64, -1e3, 1e3);
        const Tensor<double> t64({3, 4, 5}, v64);
        std::stringstream buf64;
        tnsr::write(buf64, t64);
        if (tnsr::read<double>(buf64).data() != t64.data()) {
            d = "f64 tensor round-trip";
            return false;
        }
        std::vector<float> v32(24);
        rng.fill_uniform(v32, -10.0, 10.0);
        const Tensor<float> t32({24}, v32);
        std::stringstream buf32;
        tnsr::write(buf32, t32);
        if (tnsr::read<float>(buf32).data() != t32.data()) {
            d = "f32 tensor round-trip";
            return false;
        }

        const std::vector<Sample> data = gen_dataset(acceptance_task(13), 2);
        std::stringstream bundle_buf;
        write_bundle(bundle_buf, data[0].bundle);
        const SalienceBundle bundle_back = ingest_bundle(bundle_buf);
        for (std::size_t k = 0; k < data[0].bundle.k(); ++k)
            if (bundle_back.entries[k].map != data[0].bundle.entries[k].map ||
                bundle_back.entries[k].confidence != data[0].bundle.entries[k].confidence) {
                d = "bundle round-trip";
                return false;
            }

        const VariantConfig cfg = acceptance_tiny_config();
        const ModelParams<float> params = build<float>(cfg, 99);
        const Tensor<float> logits = forward(params, data[0].image, data[0].bundle);
        const fs::path dir = fs::temp_directory_path() / "cagevit_acceptance_ckpt";
        fs::remove_all(dir);
        save_checkpoint(dir, params);
        const ModelParams<float> loaded = load_checkpoint<float>(dir);
        const Tensor<float> logits2 = forward(loaded, data[0].image, data[0].bundle);
        fs::remove_all(dir);
        if (logits2.data() != logits.data()) {
            d = "checkpoint forward reproduction";
            return false;
        }
        return true;
    });

    std::printf("%d of 9 criteria failed\n", failures);
    return failures;
}
