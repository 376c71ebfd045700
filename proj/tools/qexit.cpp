// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// qexit: map generation, pretraining, quantization, fine-tuning, evaluation
// and threshold sweeps.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
// failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qexit/config.hpp"
#include "qexit/errors.hpp"
#include "qexit/pipeline.hpp"

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "run configuration file (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "override the root seed");
}

qexit::RunConfig load(const Common& c) {
    qexit::RunConfig cfg = c.config_path.empty() ? qexit::RunConfig{} : qexit::load_run_config(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qexit: quantized multi-exit action model pipeline"};
    app.require_subcommand(1);

    Common common;
    std::string out, in, maps, csv, dense, ablation;
    std::optional<double> tau;
    bool full_depth = false;
    std::optional<std::string> maps_override;

    auto* genmaps = app.add_subcommand("genmaps", "write generated map files");
    add_common(genmaps, common);
    genmaps->add_option("--out", out, "output directory (default: maps.dir)");

    auto* pretrain = app.add_subcommand("pretrain", "behavior-clone a full-precision model");
    add_common(pretrain, common);
    pretrain->add_option("--maps", maps_override, "map directory (default: maps.dir)");
    pretrain->add_option("--out", out, "output weight file")->required();
    pretrain->add_option("--csv", csv, "training curve CSV");

    auto* quantize = app.add_subcommand("quantize", "quantize a dense weight file and attach adapters");
    add_common(quantize, common);
    quantize->add_option("--in", in, "dense weight file")->required();
    quantize->add_option("--out", out, "output weight file")->required();

    auto* finetune = app.add_subcommand("finetune", "fine-tune adapters and heads of a quantized file");
    add_common(finetune, common);
    finetune->add_option("--maps", maps_override, "map directory (default: maps.dir)");
    finetune->add_option("--in", in, "quantized weight file")->required();
    finetune->add_option("--out", out, "output weight file")->required();
    finetune->add_option("--csv", csv, "training curve CSV");

    auto* eval = app.add_subcommand("eval", "closed-loop evaluation over eval.seeds");
    add_common(eval, common);
    eval->add_option("--maps", maps_override, "map directory (default: maps.dir)");
    eval->add_option("--weights,--in", in, "weight file")->required();
    auto* tau_opt = eval->add_option("--tau", tau, "entropy threshold (default: calibrated)");
    eval->add_flag("--full-depth", full_depth, "never exit early (tau = -1)")->excludes(tau_opt);
    eval->add_option("--out", out, "metrics CSV");

    auto* sweep = app.add_subcommand("sweep", "tau sweep and optional component ablation");
    add_common(sweep, common);
    sweep->add_option("--maps", maps_override, "map directory (default: maps.dir)");
    sweep->add_option("--weights,--in", in, "weight file")->required();
    sweep->add_option("--dense", dense, "dense weight file; enables the ablation table");
    sweep->add_option("--out", out, "sweep CSV");
    sweep->add_option("--ablation-out", ablation, "ablation CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const qexit::RunConfig cfg = load(common);
        const std::string map_dir = maps_override.value_or(cfg.maps.dir);
        if (genmaps->parsed()) {
            qexit::cmd_genmaps(cfg, out.empty() ? cfg.maps.dir : out, std::cout);
        } else if (pretrain->parsed()) {
            qexit::cmd_pretrain(cfg, map_dir, out, csv, std::cout);
        } else if (quantize->parsed()) {
            qexit::cmd_quantize(cfg, in, out, std::cout);
        } else if (finetune->parsed()) {
            qexit::cmd_finetune(cfg, map_dir, in, out, csv, std::cout);
        } else if (eval->parsed()) {
            if (full_depth) tau = qexit::kFullDepthTau;
            qexit::cmd_eval(cfg, map_dir, in, tau, out, std::cout);
        } else if (sweep->parsed()) {
            qexit::cmd_sweep(cfg, map_dir, in, dense, out, ablation, std::cout);
        }
    } catch (const qexit::StructuralError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const qexit::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const qexit::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
