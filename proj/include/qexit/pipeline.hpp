// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// The command implementations behind the qexit tool. Each command is a plain
// function of a RunConfig and explicit paths, writes its artifacts, and
// reports progress on the given stream.
//
// Seeds: every random stream is RunConfig::seed_for(purpose), except map
// layouts (maps.seed + index) and evaluation episodes (one stream per entry
// of eval.seeds).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qexit/config.hpp"
#include "qexit/episode.hpp"
#include "qexit/errors.hpp"
#include "qexit/model.hpp"
#include "qexit/navsim.hpp"
#include "qexit/training.hpp"
#include "qexit/weight_file.hpp"

namespace qexit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Maps

inline std::string map_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "map_%03zu.txt", index);
    return buf;
}

inline GridMap make_config_map(const MapParams& p, std::size_t index) {
    return generate_map(p.seed + index, p.width, p.height, p.wall_density);
}

/// Writes maps.count generated maps into `dir` and returns their paths.
inline std::vector<std::string> cmd_genmaps(const RunConfig& cfg, const std::string& dir, std::ostream& log) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("genmaps: cannot create '" + dir + "': " + ec.message());
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < cfg.maps.count; ++i) {
        const GridMap map = make_config_map(cfg.maps, i);
        const std::string path = (fs::path(dir) / map_file_name(i)).string();
        std::ofstream out(path);
        if (!out) throw DataError("genmaps: cannot write '" + path + "'");
        write_map(out, map);
        paths.push_back(path);
    }
    log << "wrote " << paths.size() << " maps to " << dir << '\n';
    return paths;
}

/// Every map_*.txt in `dir`, in name order.
inline std::vector<GridMap> load_maps(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("maps directory '" + dir + "' not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.starts_with("map_") && name.ends_with(".txt")) files.push_back(e.path());
    }
    if (files.empty()) throw DataError("no map files in '" + dir + "'");
    std::sort(files.begin(), files.end());
    std::vector<GridMap> maps;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) throw DataError("cannot open '" + f.string() + "'");
        maps.push_back(parse_map(in).map);
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Training

struct TrainingData {
    Dataset train;
    Dataset validation;
};

/// Demonstrations shared by pretraining and fine-tuning.
inline TrainingData make_training_data(const RunConfig& cfg, const std::vector<GridMap>& maps) {
    TrainingData d;
    Rng train_rng(cfg.seed_for("data.train"));
    d.train = generate_dataset(maps, train_rng, cfg.train.n_samples, cfg.dataset_options());
    if (cfg.train.n_val_samples > 0) {
        Rng val_rng(cfg.seed_for("data.val"));
        d.validation = generate_dataset(maps, val_rng, cfg.train.n_val_samples, cfg.dataset_options());
    }
    return d;
}

inline void write_train_csv_file(const std::string& path, const ModelConfig& c, std::span<const EpochLog> logs) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    write_train_csv(out, c, logs);
}

inline void log_epochs(std::ostream& log, std::span<const EpochLog> logs) {
    for (const auto& e : logs) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "epoch %zu %-5s loss %.4f acc_final %.3f\n", e.epoch, e.split.c_str(), e.loss,
                      e.accuracy.empty() ? 0.0 : e.accuracy.back());
        log << buf;
    }
}

/// Behavior-clones a fresh full-precision model and writes it to `out_path`.
/// The per-epoch curve goes to `csv_path` when non-empty.
inline MultiExitModel<float> cmd_pretrain(const RunConfig& cfg, const std::string& maps_dir,
                                          const std::string& out_path, const std::string& csv_path,
                                          std::ostream& log) {
    cfg.validate();
    const auto maps = load_maps(maps_dir);
    const TrainingData data = make_training_data(cfg, maps);
    log << "pretrain: " << data.train.samples.size() << " samples from " << data.train.episodes << " episodes\n";
    Rng init_rng(cfg.seed_for("model.init"));
    MultiExitModel<float> model = init_model<float>(cfg.model, init_rng);
    Rng rng(cfg.seed_for("pretrain.shuffle"));
    const auto logs = pretrain_backbone(model, std::span<const Sample>(data.train.samples), cfg.train.pretrain_epochs,
                                        rng, cfg.train_options(), std::span<const Sample>(data.validation.samples));
    log_epochs(log, logs);
    save_model(out_path, model);
    if (!csv_path.empty()) write_train_csv_file(csv_path, model.config, logs);
    log << "wrote " << out_path << '\n';
    return model;
}

struct QuantReportRow {
    std::string tensor;
    QuantError error;
};

/// Quantizes a dense weight file, attaches zero-update adapters and writes the
/// result. Returns the per-tensor quantization error.
inline std::vector<QuantReportRow> cmd_quantize(const RunConfig& cfg, const std::string& in_path,
                                                const std::string& out_path, std::ostream& log) {
    cfg.validate();
    MultiExitModel<float> dense = load_model<float>(in_path);
    if (dense.mode != ModelMode::full_precision) throw DataError("quantize: '" + in_path + "' is already quantized");
    dense.config.lora_rank = cfg.model.lora_rank;
    dense.config.lora_alpha = cfg.model.lora_alpha;
    dense.config.block_size = cfg.model.block_size;
    dense.config.validate();
    Rng rng(cfg.seed_for("quantize.lora"));
    const MultiExitModel<float> q = quantize_model(dense, rng, cfg.quantize.all_projections, cfg.quantize.scheme);

    std::vector<QuantReportRow> rows;
    for (std::size_t l = 0; l < q.blocks.size(); ++l) {
        const auto& db = dense.blocks[l];
        const auto& qb = q.blocks[l];
        const std::pair<const char*, std::pair<const Linear<float>*, const Linear<float>*>> projections[] = {
            {"wq", {&db.wq, &qb.wq}}, {"wk", {&db.wk, &qb.wk}}, {"wv", {&db.wv, &qb.wv}},
            {"wo", {&db.wo, &qb.wo}}, {"w1", {&db.w1, &qb.w1}}, {"w2", {&db.w2, &qb.w2}},
        };
        for (const auto& [name, pair] : projections) {
            if (!pair.second->quantized()) continue;
            rows.push_back({"block" + std::to_string(l + 1) + "." + name, quant_error(pair.first->weight, *pair.second->base)});
        }
    }
    save_model(out_path, q);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s %-8s %14s %12s\n", "tensor", "scheme", "rel_frobenius", "max_abs");
    log << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-12s %-8s %14.6f %12.6f\n", r.tensor.c_str(), scheme_name(cfg.quantize.scheme),
                      r.error.rel_frobenius, r.error.max_abs);
        log << buf;
    }
    log << "wrote " << out_path << '\n';
    return rows;
}

/// Fine-tunes adapters and heads of a quantized weight file. The quantized
/// base payloads of the output are checked against the input's.
inline MultiExitModel<float> cmd_finetune(const RunConfig& cfg, const std::string& maps_dir,
                                          const std::string& in_path, const std::string& out_path,
                                          const std::string& csv_path, std::ostream& log) {
    cfg.validate();
    const auto in_bytes = read_file_bytes(in_path);
    MultiExitModel<float> model = deserialize_model<float>(in_bytes);
    if (model.mode != ModelMode::quantized) throw DataError("finetune: '" + in_path + "' is not quantized");
    const auto maps = load_maps(maps_dir);
    const TrainingData data = make_training_data(cfg, maps);
    log << "finetune: " << data.train.samples.size() << " samples from " << data.train.episodes << " episodes\n";
    Rng rng(cfg.seed_for("finetune.shuffle"));
    const auto logs = finetune_qlora(model, std::span<const Sample>(data.train.samples), cfg.train.finetune_epochs, rng,
                                     cfg.train_options(), std::span<const Sample>(data.validation.samples));
    log_epochs(log, logs);
    const auto out_bytes = serialize_model(model);
    if (base_payload_bytes(out_bytes) != base_payload_bytes(in_bytes)) {
        throw DataError("finetune: quantized base tensors changed");
    }
    write_file_bytes(out_path, out_bytes);
    if (!csv_path.empty()) write_train_csv_file(csv_path, model.config, logs);
    log << "wrote " << out_path << '\n';
    return model;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<EpisodeSpec> validation_episodes(const RunConfig& cfg, const std::vector<GridMap>& maps) {
    return make_episodes(maps, cfg.seed_for("eval.validation"), cfg.eval.n_val_episodes, cfg.eval.success_radius);
}

inline std::vector<EpisodeSpec> test_episodes(const RunConfig& cfg, const std::vector<GridMap>& maps,
                                              std::uint64_t eval_seed) {
    return make_episodes(maps, derive_seed(eval_seed, "eval.test"), cfg.eval.n_episodes, cfg.eval.success_radius);
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    for (double x : xs) r.std += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(xs.size()));
    return r;
}

struct EvalReport {
    double tau = 0.0;
    bool calibrated = false;
    std::vector<std::uint64_t> seeds;
    std::vector<Metrics> per_seed;
};

inline std::string format_eval_report(const EvalReport& r) {
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "tau %.4f%s\n", r.tau, r.calibrated ? " (calibrated)" : "");
    out << buf;
    auto field = [&](const char* name, auto get) {
        std::vector<double> xs;
        for (const auto& m : r.per_seed) xs.push_back(get(m));
        const MeanStd s = mean_std(xs);
        std::snprintf(buf, sizeof buf, "%-22s %.6f +- %.6f\n", name, s.mean, s.std);
        out << buf;
    };
    field("sr", [](const Metrics& m) { return m.sr; });
    field("spl", [](const Metrics& m) { return m.spl; });
    field("exit_ratio", [](const Metrics& m) { return m.exit_ratio; });
    field("latency_proxy", [](const Metrics& m) { return m.latency_proxy; });
    field("mean_entropy_at_exit", [](const Metrics& m) { return m.mean_entropy_at_exit; });
    std::snprintf(buf, sizeof buf, "%-22s %zu x %zu seeds\n", "n_episodes",
                  r.per_seed.empty() ? std::size_t{0} : r.per_seed.front().n_episodes, r.per_seed.size());
    out << buf;
    return out.str();
}

/// Threshold chosen on the validation episodes.
inline Calibration calibrate_for(const RunConfig& cfg, const PreparedModel<float>& pm,
                                 const std::vector<GridMap>& maps) {
    const auto val = validation_episodes(cfg, maps);
    return calibrate_tau(pm, maps, std::span<const EpisodeSpec>(val), std::span<const double>(cfg.eval.tau_grid),
                         cfg.episode_options());
}

/// Evaluates a weight file once per entry of eval.seeds. Without `tau` the
/// threshold is calibrated first. The CSV holds one row per seed; the text
/// report (returned and logged) gives mean +- std.
inline EvalReport cmd_eval(const RunConfig& cfg, const std::string& maps_dir, const std::string& weights_path,
                           std::optional<double> tau, const std::string& csv_path, std::ostream& log) {
    cfg.validate();
    if (tau && !std::isfinite(*tau)) throw StructuralError("eval: tau must be finite");
    const MultiExitModel<float> model = load_model<float>(weights_path);
    const auto maps = load_maps(maps_dir);
    const PreparedModel<float> pm(model);
    EvalReport report;
    if (tau) {
        report.tau = *tau;
    } else {
        const Calibration cal = calibrate_for(cfg, pm, maps);
        report.tau = cal.tau;
        report.calibrated = true;
    }
    for (std::uint64_t s : cfg.eval.seeds) {
        const auto eps = test_episodes(cfg, maps, s);
        report.seeds.push_back(s);
        report.per_seed.push_back(
            evaluate(pm, maps, std::span<const EpisodeSpec>(eps), report.tau, cfg.episode_options()));
    }
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        out << kMetricsCsvHeader << '\n';
        for (const auto& m : report.per_seed) out << metrics_csv_row(report.tau, m) << '\n';
    }
    log << format_eval_report(report);
    return report;
}

struct AblationRow {
    std::string name;
    bool quantized = false;
    bool dee = false;
    double tau = 0.0;
    Metrics metrics;
};

inline constexpr const char* kAblationCsvHeader =
    "config,quantized,dee,tau,sr,spl,exit_ratio,latency_proxy,mean_entropy_at_exit,n_episodes";

inline void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
    out << kAblationCsvHeader << '\n';
    for (const auto& r : rows) {
        out << r.name << ',' << (r.quantized ? 1 : 0) << ',' << (r.dee ? 1 : 0) << ',' << metrics_csv_row(r.tau, r.metrics)
            << '\n';
    }
}

/// Four-row component ablation on `episodes`: dense and quantized models, each
/// at full depth and at its own calibrated tau.
inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::vector<GridMap>& maps,
                                             std::span<const EpisodeSpec> episodes, const PreparedModel<float>& dense,
                                             const PreparedModel<float>& quant) {
    const double tau_dense = calibrate_for(cfg, dense, maps).tau;
    const double tau_quant = calibrate_for(cfg, quant, maps).tau;
    const auto opt = cfg.episode_options();
    return {
        {"baseline", false, false, kFullDepthTau, evaluate(dense, maps, episodes, kFullDepthTau, opt)},
        {"quant_only", true, false, kFullDepthTau, evaluate(quant, maps, episodes, kFullDepthTau, opt)},
        {"dee_only", false, true, tau_dense, evaluate(dense, maps, episodes, tau_dense, opt)},
        {"quant_dee", true, true, tau_quant, evaluate(quant, maps, episodes, tau_quant, opt)},
    };
}

struct SweepResult {
    std::vector<SweepRow> sweep;
    std::vector<AblationRow> ablation;  // empty unless a dense file was given
};

/// tau sweep of `weights_path` on the episodes of the first eval seed. With a
/// dense file as well, also the four-row component ablation: dense and
/// quantized models, each at full depth and at its own calibrated tau.
inline SweepResult cmd_sweep(const RunConfig& cfg, const std::string& maps_dir, const std::string& weights_path,
                             const std::string& dense_path, const std::string& csv_path,
                             const std::string& ablation_csv_path, std::ostream& log) {
    cfg.validate();
    const auto maps = load_maps(maps_dir);
    const auto eps = test_episodes(cfg, maps, cfg.eval.seeds.front());
    const std::span<const EpisodeSpec> ep_span(eps);
    const MultiExitModel<float> model = load_model<float>(weights_path);
    const PreparedModel<float> pm(model);
    SweepResult result;
    result.sweep = sweep_tau(pm, maps, ep_span, std::span<const double>(cfg.eval.tau_grid), cfg.episode_options());
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw DataError("cannot write '" + csv_path + "'");
        write_sweep_csv(out, result.sweep);
    }
    write_sweep_csv(log, result.sweep);

    if (!dense_path.empty()) {
        const MultiExitModel<float> dense = load_model<float>(dense_path);
        if (dense.mode != ModelMode::full_precision) throw DataError("sweep: '" + dense_path + "' is not dense");
        if (model.mode != ModelMode::quantized) throw DataError("sweep: '" + weights_path + "' is not quantized");
        result.ablation = run_ablation(cfg, maps, ep_span, PreparedModel<float>(dense), pm);
        if (!ablation_csv_path.empty()) {
            std::ofstream out(ablation_csv_path);
            if (!out) throw DataError("cannot write '" + ablation_csv_path + "'");
            write_ablation_csv(out, result.ablation);
        }
        write_ablation_csv(log, result.ablation);
    }
    return result;
}

}  // namespace qexit
