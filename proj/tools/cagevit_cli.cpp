// Command-line entry point: salience map extraction, token selection,
// checkpoint inference, the gradient-check suite, the scaling benchmark,
// toy-task training, parameter accounting, and rho/K ablation sweeps.
//
// Exit codes: 0 ok, 2 usage, 3 data error, 4 check failure.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cagevit/checkpoint.hpp"
#include "cagevit/complexity.hpp"
#include "cagevit/config.hpp"
#include "cagevit/data.hpp"
#include "cagevit/gradcheck.hpp"
#include "cagevit/model.hpp"
#include "cagevit/salience.hpp"
#include "cagevit/tnsr.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kDataError = 3;
constexpr int kCheckFailure = 4;

std::vector<std::size_t> parse_length_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoul(item));
    }
    if (out.empty()) throw cagevit::ContractError("empty length list");
    return out;
}

std::vector<double> parse_value_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw cagevit::ContractError("empty value list");
    return out;
}

void print_partition(const cagevit::TokenPartition& p) {
    auto print_list = [](const std::vector<std::size_t>& v) {
        std::printf("[");
        for (std::size_t i = 0; i < v.size(); ++i) std::printf("%s%zu", i ? ", " : "", v[i]);
        std::printf("]");
    };
    std::printf("{\"major\": ");
    print_list(p.major);
    std::printf(", \"minor\": ");
    print_list(p.minor);
    std::printf("}\n");
}

// Task matched to a model config; the hot-patch count is fixed at half the
// grid so that sweeping rho changes the model, never the data.
cagevit::SyntheticTask task_for(const cagevit::VariantConfig& cfg, std::uint64_t seed,
                                std::size_t n_maps, double coverage, double noise) {
    cagevit::SyntheticTask task;
    task.n_classes = cfg.n_classes;
    task.grid_rows = cfg.grid_rows;
    task.grid_cols = cfg.grid_cols;
    task.patch_h = cfg.patch_h;
    task.patch_w = cfg.patch_w;
    task.channels = cfg.channels;
    task.hot_per_sample = std::max<std::size_t>(1, cfg.n_patches() / 2);
    task.n_maps = n_maps;
    task.map_coverage = coverage;
    task.noise = noise;
    task.seed = seed;
    return task;
}

struct TrainResult {
    double final_loss = 0.0;
    double accuracy = 0.0;
};

TrainResult train_on(cagevit::ModelParams<float>& params, const std::vector<cagevit::Sample>& data,
                     std::size_t steps, std::size_t batch_size, float lr, bool verbose) {
    using namespace cagevit;
    AdamW<float> opt;
    opt.reset(params);
    TrainResult result;
    const std::size_t log_every = std::max<std::size_t>(1, steps / 20);
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<TrainSample<float>> batch;
        for (std::size_t j = 0; j < batch_size; ++j) {
            const Sample& s = data[cursor];
            batch.push_back({s.image, &s.bundle, s.label});
            cursor = (cursor + 1) % data.size();
        }
        result.final_loss = train_step(params, opt, batch, lr);
        if (verbose && (step % log_every == 0 || step + 1 == steps))
            std::printf("step %zu loss %.6f\n", step, result.final_loss);
    }
    std::size_t correct = 0;
    for (const Sample& s : data)
        if (argmax_class(forward(params, s.image, s.bundle)) == s.label) ++correct;
    result.accuracy = double(correct) / double(data.size());
    return result;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace cagevit;
    CLI::App app{"CageViT desk-scale pipeline"};
    app.require_subcommand(1);

    // salience
    auto* cmd_salience = app.add_subcommand("salience", "Write the confidence-weighted salience map");
    std::string sal_bundle, sal_out;
    cmd_salience->add_option("--bundle", sal_bundle, "CAGA-BUNDLE file")->required();
    cmd_salience->add_option("--out", sal_out, "output TNSR path")->required();

    // select
    auto* cmd_select = app.add_subcommand("select", "Partition patch scores into major/minor");
    std::string sel_scores;
    double sel_rho = 0.5;
    cmd_select->add_option("--scores", sel_scores, "TNSR of patch scores")->required();
    cmd_select->add_option("--rho", sel_rho, "major-token ratio in [0,1]")->required();

    // forward
    auto* cmd_forward = app.add_subcommand("forward", "Run a checkpoint on one image");
    std::string fwd_config, fwd_ckpt, fwd_image, fwd_bundle;
    cmd_forward->add_option("--config", fwd_config, "config to cross-check against the checkpoint");
    cmd_forward->add_option("--ckpt", fwd_ckpt, "checkpoint directory")->required();
    cmd_forward->add_option("--image", fwd_image, "TNSR image H x W x C")->required();
    cmd_forward->add_option("--bundle", fwd_bundle, "CAGA-BUNDLE file")->required();

    // gradcheck
    auto* cmd_gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    std::string gc_module = "all";
    std::uint64_t gc_seed = 12345;
    cmd_gradcheck->add_option("--module", gc_module, "tensor|pipeline|attention|model|all");
    cmd_gradcheck->add_option("--seed", gc_seed, "suite seed");

    // bench
    auto* cmd_bench = app.add_subcommand("bench", "Wall-clock scaling benchmark");
    std::string bench_kind = "gated_linear_sra", bench_lengths = "256,512,1024,2048,4096";
    std::string bench_csv;
    std::size_t bench_repeats = 5, bench_d = 32, bench_pool = 7;
    std::uint64_t bench_seed = 1;
    cmd_bench->add_option("--kind", bench_kind, "full|sra|linear_sra|gated_linear_sra");
    cmd_bench->add_option("--lengths", bench_lengths, "comma-separated sequence lengths");
    cmd_bench->add_option("--repeats", bench_repeats, "timed repeats per length (>= 5)");
    cmd_bench->add_option("--csv", bench_csv, "output CSV path")->required();
    cmd_bench->add_option("--d", bench_d, "token width");
    cmd_bench->add_option("--pool", bench_pool, "pool size p for the linear kinds");
    cmd_bench->add_option("--seed", bench_seed, "input generation seed");

    // train-toy
    auto* cmd_train = app.add_subcommand("train-toy", "Train on the synthetic task");
    std::string train_config, train_ckpt_out;
    std::size_t train_steps = 500, train_samples = 512, train_batch = 32;
    std::uint64_t train_seed = 0;
    double train_lr = 1e-3, train_noise = 0.0, train_coverage = 1.0;
    std::size_t train_maps = 6;
    bool train_overwrite = false;
    cmd_train->add_option("--config", train_config, "variant config file")->required();
    cmd_train->add_option("--steps", train_steps, "optimizer steps")->required();
    cmd_train->add_option("--seed", train_seed, "seed for data and weights");
    cmd_train->add_option("--samples", train_samples, "dataset size");
    cmd_train->add_option("--batch", train_batch, "batch size");
    cmd_train->add_option("--lr", train_lr, "learning rate");
    cmd_train->add_option("--maps", train_maps, "activation maps per bundle");
    cmd_train->add_option("--coverage", train_coverage, "per-map hot-patch coverage");
    cmd_train->add_option("--noise", train_noise, "task noise level");
    cmd_train->add_option("--ckpt-out", train_ckpt_out, "save the trained checkpoint here");
    cmd_train->add_flag("--overwrite", train_overwrite, "allow replacing an existing checkpoint");

    // params
    auto* cmd_params = app.add_subcommand("params", "Parameter count breakdown");
    std::string params_config;
    cmd_params->add_option("--config", params_config, "variant config file")->required();

    // sweep
    auto* cmd_sweep = app.add_subcommand("sweep", "Toy-scale rho or K ablation");
    std::string sweep_param, sweep_values, sweep_config;
    std::size_t sweep_steps = 300, sweep_samples = 256, sweep_batch = 32;
    std::uint64_t sweep_seed = 0;
    double sweep_lr = 1e-3, sweep_coverage = -1.0;
    cmd_sweep->add_option("--param", sweep_param, "rho|K")->required();
    cmd_sweep->add_option("--values", sweep_values, "comma-separated values")->required();
    cmd_sweep->add_option("--steps", sweep_steps, "optimizer steps per value")->required();
    cmd_sweep->add_option("--config", sweep_config, "base config file (defaults to the tiny model)");
    cmd_sweep->add_option("--seed", sweep_seed, "seed shared by all runs");
    cmd_sweep->add_option("--samples", sweep_samples, "dataset size");
    cmd_sweep->add_option("--batch", sweep_batch, "batch size");
    cmd_sweep->add_option("--lr", sweep_lr, "learning rate");
    cmd_sweep->add_option("--coverage", sweep_coverage,
                          "per-map hot coverage; defaults to 1.0 (rho) or 0.6 (K)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return kUsage;
    }

    try {
        if (cmd_salience->parsed()) {
            const SalienceBundle bundle = ingest_bundle(sal_bundle);
            const SalienceMap s = weighted_salience(bundle);
            Tensor<double> map({s.rows, s.cols}, s.values);
            tnsr::write_file(sal_out, map);
            std::printf("wrote %s (%zux%zu, K=%zu)\n", sal_out.c_str(), s.rows, s.cols, bundle.k());
            return kOk;
        }

        if (cmd_select->parsed()) {
            const Tensor<double> scores = tnsr::read_file<double>(sel_scores);
            if (scores.ndim() != 1)
                throw ContractError("select expects a 1-D score tensor, got " +
                                    detail::shape_str(scores.shape()));
            print_partition(select_and_rearrange(scores, sel_rho));
            return kOk;
        }

        if (cmd_forward->parsed()) {
            const CheckpointInfo info = checkpoint_info(fwd_ckpt);
            if (!fwd_config.empty()) {
                std::ostringstream want, got;
                write_config(want, read_config_file(fwd_config));
                write_config(got, info.config);
                if (want.str() != got.str())
                    throw ContractError("config file disagrees with the checkpoint config");
            }
            const SalienceBundle bundle = ingest_bundle(fwd_bundle);
            auto run = [&](auto tag) {
                using T = decltype(tag);
                const ModelParams<T> params = load_checkpoint<T>(fwd_ckpt);
                const Tensor<T> image = tnsr::read_file<T>(fwd_image);
                const Tensor<T> logits = forward(params, image, bundle);
                std::printf("logits");
                for (const T v : logits.data()) std::printf(" %.17g", double(v));
                std::printf("\n");
            };
            if (info.dtype == "f64")
                run(double{});
            else
                run(float{});
            return kOk;
        }

        if (cmd_gradcheck->parsed()) {
            const auto results = gradcheck_suite(gc_module, gc_seed);
            bool ok = true;
            for (const auto& r : results) {
                std::printf("op %-28s max_rel_err %.3e\n", r.name.c_str(), r.max_rel_err);
                ok = ok && r.max_rel_err < 1e-4;
            }
            std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
            return ok ? kOk : kCheckFailure;
        }

        if (cmd_bench->parsed()) {
            BenchSettings settings;
            settings.d = bench_d;
            settings.pool = bench_pool;
            settings.seed = bench_seed;
            const AttentionKind kind = attention_kind_from(bench_kind);
            const ScalingFit fit = bench(kind, settings, parse_length_list(bench_lengths),
                                         bench_repeats);
            std::ofstream csv(bench_csv);
            if (!csv) throw IoError("cannot open CSV for writing: " + bench_csv);
            write_scaling_csv(csv, kind, settings, fit);
            std::printf("kind %s alpha %.4f residual %.6f csv %s\n", to_string(kind), fit.alpha,
                        fit.residual, bench_csv.c_str());
            return kOk;
        }

        if (cmd_train->parsed()) {
            const VariantConfig cfg = read_config_file(train_config);
            const SyntheticTask task =
                task_for(cfg, train_seed, train_maps, train_coverage, train_noise);
            const std::vector<Sample> data = gen_dataset(task, train_samples);
            ModelParams<float> params = build<float>(cfg, train_seed);
            const TrainResult result = train_on(params, data, train_steps, train_batch,
                                                static_cast<float>(train_lr), true);
            std::printf("final_loss %.6f\n", result.final_loss);
            std::printf("train_accuracy %.4f\n", result.accuracy);
            if (!train_ckpt_out.empty()) {
                save_checkpoint(train_ckpt_out, params, train_overwrite);
                std::printf("checkpoint %s\n", train_ckpt_out.c_str());
            }
            return kOk;
        }

        if (cmd_params->parsed()) {
            const VariantConfig cfg = read_config_file(params_config);
            for (const auto& [group, n] : param_breakdown(cfg))
                std::printf("%-12s %12" PRIu64 "\n", group.c_str(), n);
            std::printf("%-12s %12" PRIu64 "\n", "total", count_params(cfg));
            return kOk;
        }

        if (cmd_sweep->parsed()) {
            if (sweep_param != "rho" && sweep_param != "K")
                throw ContractError("sweep --param must be rho or K");
            VariantConfig base =
                sweep_config.empty() ? VariantConfig{} : read_config_file(sweep_config);
            const std::vector<double> values = parse_value_list(sweep_values);

            // For K sweeps the single-map selection must be unreliable for K
            // to matter, so each map covers only part of the hot set.
            const bool sweeping_k = sweep_param == "K";
            double coverage = sweep_coverage;
            if (coverage <= 0.0) coverage = sweeping_k ? 0.6 : 1.0;
            std::size_t n_maps = 6;
            if (sweeping_k)
                for (const double v : values)
                    n_maps = std::max(n_maps, static_cast<std::size_t>(v));

            const SyntheticTask task = task_for(base, sweep_seed, n_maps, coverage, 0.0);
            const std::vector<Sample> data = gen_dataset(task, sweep_samples);

            std::printf("param value params train_acc\n");
            for (const double v : values) {
                VariantConfig cfg = base;
                if (sweeping_k)
                    cfg.top_k = static_cast<std::size_t>(v);
                else
                    cfg.rho = v;
                cfg.validate();
                ModelParams<float> params = build<float>(cfg, sweep_seed);
                const TrainResult r = train_on(params, data, sweep_steps, sweep_batch,
                                               static_cast<float>(sweep_lr), false);
                std::printf("%s %g %" PRIu64 " %.4f\n", sweep_param.c_str(), v, count_params(cfg),
                            r.accuracy);
                std::fflush(stdout);
            }
            return kOk;
        }
    } catch (const MeasurementError& e) {
        std::cerr << "error: bench: " << e.what() << "\n";
        return kCheckFailure;
    } catch (const TrainingError& e) {
        std::cerr << "error: train: " << e.what() << "\n";
        return kCheckFailure;
    } catch (const NumericError& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return kCheckFailure;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsage;
}
