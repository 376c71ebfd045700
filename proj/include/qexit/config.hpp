// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a sectioned `key = value` text file. Every key has a
// default; unknown sections or keys are rejected.
//
//   seed = 42
//   [model]    num_layers d_model num_heads d_ff exit_layers exit_hidden window
//              lora_rank lora_alpha block_size
//   [train]    pretrain_epochs finetune_epochs batch_size lr grad_clip
//              n_samples n_val_samples perturb_prob exit_alphas
//              pretrain_exit_heads
//   [eval]     tau_grid n_episodes n_val_episodes max_steps success_radius seeds
//   [maps]     count width height wall_density seed dir
//   [quantize] all_projections scheme
//
// Lists are comma separated.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "qexit/episode.hpp"
#include "qexit/errors.hpp"
#include "qexit/model.hpp"
#include "qexit/quantizer.hpp"
#include "qexit/training.hpp"

namespace qexit {

struct MapParams {
    std::size_t count = 20;
    int width = 15;
    int height = 15;
    double wall_density = 0.2;
    std::uint64_t seed = 1;
    std::string dir = "maps";
};

struct TrainParams {
    std::size_t pretrain_epochs = 10;
    std::size_t finetune_epochs = 5;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double grad_clip = 1.0;
    std::size_t n_samples = 3000;
    std::size_t n_val_samples = 500;
    double perturb_prob = 0.1;
    std::vector<double> exit_alphas;  // empty: decreasing default
    bool pretrain_exit_heads = true;
};

struct EvalParams {
    std::vector<double> tau_grid = default_tau_grid();
    std::size_t n_episodes = 200;
    std::size_t n_val_episodes = 100;
    int max_steps = 200;
    int success_radius = 1;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
};

struct QuantizeParams {
    bool all_projections = false;
    QuantScheme scheme = QuantScheme::nf4;
};

struct RunConfig {
    std::uint64_t seed = 42;
    ModelConfig model;
    TrainParams train;
    EvalParams eval;
    MapParams maps;
    QuantizeParams quantize;

    void validate() const;

    TrainOptions train_options() const {
        TrainOptions o;
        o.batch_size = train.batch_size;
        o.lr = train.lr;
        o.grad_clip = train.grad_clip;
        o.exit_alphas = train.exit_alphas;
        o.train_exit_heads = train.pretrain_exit_heads;
        return o;
    }

    DatasetOptions dataset_options() const {
        return {eval.success_radius, eval.max_steps, static_cast<int>(model.window), train.perturb_prob};
    }

    EpisodeOptions episode_options() const {
        return {eval.max_steps, eval.success_radius, static_cast<int>(model.window)};
    }

    /// Per-purpose stream seed, e.g. "pretrain.data" or "eval.episodes".
    std::uint64_t seed_for(std::string_view purpose) const { return derive_seed(seed, purpose); }
};

inline const char* scheme_name(QuantScheme s) {
    switch (s) {
        case QuantScheme::nf4: return "nf4";
        case QuantScheme::uniform4: return "uniform4";
        case QuantScheme::uniform8: return "uniform8";
    }
    return "?";
}

inline QuantScheme parse_scheme(const std::string& s) {
    if (s == "nf4") return QuantScheme::nf4;
    if (s == "uniform4") return QuantScheme::uniform4;
    if (s == "uniform8") return QuantScheme::uniform8;
    throw StructuralError("unknown quantization scheme '" + s + "'");
}

inline void RunConfig::validate() const {
    model.validate();
    if (train.batch_size == 0) throw StructuralError("config: train.batch_size must be >= 1");
    if (!(train.lr > 0.0)) throw StructuralError("config: train.lr must be > 0");
    if (train.grad_clip < 0.0) throw StructuralError("config: train.grad_clip must be >= 0");
    if (train.n_samples == 0) throw StructuralError("config: train.n_samples must be >= 1");
    if (train.perturb_prob < 0.0 || train.perturb_prob > 1.0) {
        throw StructuralError("config: train.perturb_prob must lie in [0, 1]");
    }
    if (!train.exit_alphas.empty() && train.exit_alphas.size() != model.exit_layers.size()) {
        throw StructuralError("config: train.exit_alphas needs one weight per exit layer");
    }
    for (double a : train.exit_alphas) {
        if (!(a >= 0.0)) throw StructuralError("config: train.exit_alphas must be >= 0");
    }
    if (eval.tau_grid.empty()) throw StructuralError("config: eval.tau_grid is empty");
    for (double t : eval.tau_grid) {
        if (!std::isfinite(t)) throw StructuralError("config: eval.tau_grid entries must be finite");
    }
    if (eval.n_episodes == 0 || eval.n_val_episodes == 0) {
        throw StructuralError("config: eval.n_episodes and eval.n_val_episodes must be >= 1");
    }
    if (eval.max_steps < 1) throw StructuralError("config: eval.max_steps must be >= 1");
    if (eval.success_radius < 0) throw StructuralError("config: eval.success_radius must be >= 0");
    if (eval.seeds.empty()) throw StructuralError("config: eval.seeds is empty");
    if (maps.count == 0) throw StructuralError("config: maps.count must be >= 1");
    if (maps.width < 3 || maps.height < 3) throw StructuralError("config: maps need width, height >= 3");
    if (!(maps.wall_density >= 0.0 && maps.wall_density <= 0.4)) {
        throw StructuralError("config: maps.wall_density must lie in [0, 0.4]");
    }
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    V v{};
    in >> v;
    if (!in || !(in >> std::ws).eof()) throw StructuralError("config: bad value '" + text + "' for " + key);
    if constexpr (std::is_unsigned_v<V>) {
        if (text.find('-') != std::string::npos) throw StructuralError("config: negative value for " + key);
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw StructuralError("config: bad boolean '" + text + "' for " + key);
}

template <typename V>
std::vector<V> parse_list(const std::string& key, const std::string& text) {
    std::vector<V> out;
    for (const auto& item : split_list(text)) out.push_back(parse_number<V>(key, item));
    return out;
}

}  // namespace detail

/// Applies one `section.key = value` assignment. The empty section holds
/// top-level keys.
inline void set_config_value(RunConfig& c, const std::string& section, const std::string& key,
                             const std::string& raw) {
    using detail::parse_bool;
    using detail::parse_list;
    using detail::parse_number;
    const std::string v = detail::trim(raw);
    const std::string full = section.empty() ? key : section + "." + key;
    using Setter = std::function<void()>;
    const std::map<std::string, Setter> setters = {
        {"seed", [&] { c.seed = parse_number<std::uint64_t>(full, v); }},
        {"model.num_layers", [&] { c.model.num_layers = parse_number<std::size_t>(full, v); }},
        {"model.d_model", [&] { c.model.d_model = parse_number<std::size_t>(full, v); }},
        {"model.num_heads", [&] { c.model.num_heads = parse_number<std::size_t>(full, v); }},
        {"model.d_ff", [&] { c.model.d_ff = parse_number<std::size_t>(full, v); }},
        {"model.exit_layers", [&] { c.model.exit_layers = parse_list<std::size_t>(full, v); }},
        {"model.exit_hidden", [&] { c.model.exit_hidden = parse_number<std::size_t>(full, v); }},
        {"model.window", [&] { c.model.window = parse_number<std::size_t>(full, v); }},
        {"model.lora_rank", [&] { c.model.lora_rank = parse_number<std::size_t>(full, v); }},
        {"model.lora_alpha", [&] { c.model.lora_alpha = parse_number<double>(full, v); }},
        {"model.block_size", [&] { c.model.block_size = parse_number<std::size_t>(full, v); }},
        {"train.pretrain_epochs", [&] { c.train.pretrain_epochs = parse_number<std::size_t>(full, v); }},
        {"train.finetune_epochs", [&] { c.train.finetune_epochs = parse_number<std::size_t>(full, v); }},
        {"train.batch_size", [&] { c.train.batch_size = parse_number<std::size_t>(full, v); }},
        {"train.lr", [&] { c.train.lr = parse_number<double>(full, v); }},
        {"train.grad_clip", [&] { c.train.grad_clip = parse_number<double>(full, v); }},
        {"train.n_samples", [&] { c.train.n_samples = parse_number<std::size_t>(full, v); }},
        {"train.n_val_samples", [&] { c.train.n_val_samples = parse_number<std::size_t>(full, v); }},
        {"train.perturb_prob", [&] { c.train.perturb_prob = parse_number<double>(full, v); }},
        {"train.exit_alphas", [&] { c.train.exit_alphas = parse_list<double>(full, v); }},
        {"train.pretrain_exit_heads", [&] { c.train.pretrain_exit_heads = parse_bool(full, v); }},
        {"eval.tau_grid", [&] { c.eval.tau_grid = parse_list<double>(full, v); }},
        {"eval.n_episodes", [&] { c.eval.n_episodes = parse_number<std::size_t>(full, v); }},
        {"eval.n_val_episodes", [&] { c.eval.n_val_episodes = parse_number<std::size_t>(full, v); }},
        {"eval.max_steps", [&] { c.eval.max_steps = parse_number<int>(full, v); }},
        {"eval.success_radius", [&] { c.eval.success_radius = parse_number<int>(full, v); }},
        {"eval.seeds", [&] { c.eval.seeds = parse_list<std::uint64_t>(full, v); }},
        {"maps.count", [&] { c.maps.count = parse_number<std::size_t>(full, v); }},
        {"maps.width", [&] { c.maps.width = parse_number<int>(full, v); }},
        {"maps.height", [&] { c.maps.height = parse_number<int>(full, v); }},
        {"maps.wall_density", [&] { c.maps.wall_density = parse_number<double>(full, v); }},
        {"maps.seed", [&] { c.maps.seed = parse_number<std::uint64_t>(full, v); }},
        {"maps.dir", [&] { c.maps.dir = v; }},
        {"quantize.all_projections", [&] { c.quantize.all_projections = parse_bool(full, v); }},
        {"quantize.scheme", [&] { c.quantize.scheme = parse_scheme(v); }},
    };
    const auto it = setters.find(full);
    if (it == setters.end()) throw StructuralError("config: unknown key '" + full + "'");
    it->second();
}

inline RunConfig parse_run_config(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw StructuralError(std::string("config: ") + e.what());
    }
    RunConfig c;
    for (const auto& [name, node] : tree) {
        if (node.empty()) {
            set_config_value(c, "", name, node.data());
            continue;
        }
        for (const auto& [key, leaf] : node) {
            if (!leaf.empty()) throw StructuralError("config: nested key under '" + name + "." + key + "'");
            set_config_value(c, name, key, leaf.data());
        }
    }
    c.validate();
    return c;
}

inline RunConfig parse_run_config(const std::string& text) {
    std::istringstream in(text);
    return parse_run_config(in);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StructuralError("config: cannot open '" + path + "'");
    return parse_run_config(in);
}

}  // namespace qexit
