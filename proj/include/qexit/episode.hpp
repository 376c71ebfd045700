// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-loop episodes and the navigation metrics: success rate, SPL, exit
// ratio and the blocks-executed latency proxy.
#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/model.hpp"
#include "qexit/navsim.hpp"
#include "qexit/numerics.hpp"

namespace qexit {

struct EpisodeSpec {
    std::size_t map_index = 0;
    Cell start;
    Heading heading = Heading::north;
    Cell goal;
};

struct EpisodeOptions {
    int max_steps = 200;
    int success_radius = 1;  // Chebyshev cells
    int window = 7;
};

/// What a policy decided for one frame, and how much of the network it used.
struct PolicyStep {
    Action action = Action::stop;
    std::size_t exit_layer = 0;
    std::size_t blocks_executed = 0;
    double entropy = 0.0;
    bool early_exit = false;
};

using Policy = std::function<PolicyStep(const Observation&, const AgentState&)>;

enum class Termination { stopped_success, stopped_failure, timeout };

inline const char* termination_name(Termination t) {
    switch (t) {
        case Termination::stopped_success: return "stopped_success";
        case Termination::stopped_failure: return "stopped_failure";
        case Termination::timeout: return "timeout";
    }
    return "?";
}

struct EpisodeRecord {
    bool success = false;
    double path_length = 0.0;  // meters actually moved
    double geodesic = 0.0;     // shortest path from start into the goal region
    int steps = 0;
    std::vector<std::size_t> exit_layers;
    std::vector<std::size_t> blocks;
    std::vector<double> entropies;
    std::vector<std::uint8_t> early;
    Termination termination = Termination::timeout;
};

/// Shortest path length from `start` to any free cell within the success
/// radius of `goal`. DataError if none is reachable.
inline double geodesic_to_goal(const GridMap& map, Cell start, Cell goal, int radius) {
    const auto dist = bfs_distances(map, goal_region(map, goal, radius));
    const int d = dist[map.index(start)];
    if (d == kUnreachable) throw DataError("geodesic_to_goal: goal region unreachable from start");
    return d * map.cell_size();
}

/// observe -> policy -> step until STOP or the step budget runs out. Success
/// requires STOP issued inside the goal region.
inline EpisodeRecord run_episode(const Policy& policy, const GridMap& map, const EpisodeSpec& ep,
                                 const EpisodeOptions& opt) {
    if (!map.is_free(ep.start) || !map.is_free(ep.goal)) throw StructuralError("run_episode: start/goal not free");
    if (chebyshev(ep.start, ep.goal) <= opt.success_radius) {
        throw StructuralError("run_episode: start lies inside the goal region");
    }
    EpisodeRecord rec;
    rec.geodesic = geodesic_to_goal(map, ep.start, ep.goal, opt.success_radius);
    AgentState s{ep.start, ep.heading, ep.goal, 0, 0.0, false};
    while (s.steps_taken < opt.max_steps) {
        const Observation obs = observe(map, s, opt.window);
        const PolicyStep d = policy(obs, s);
        rec.exit_layers.push_back(d.exit_layer);
        rec.blocks.push_back(d.blocks_executed);
        rec.entropies.push_back(d.entropy);
        rec.early.push_back(d.early_exit ? 1 : 0);
        s = step(map, s, d.action);
        if (s.terminated) {
            rec.success = chebyshev(s.position, ep.goal) <= opt.success_radius;
            rec.termination = rec.success ? Termination::stopped_success : Termination::stopped_failure;
            break;
        }
    }
    rec.steps = s.steps_taken;
    rec.path_length = s.distance_traveled;
    return rec;
}

/// Policy adapter running dee_infer on a prepared model.
template <typename T>
Policy dee_policy(const PreparedModel<T>& pm, double tau) {
    return [&pm, tau](const Observation& obs, const AgentState&) {
        const DeeOutcome<T> r = dee_infer(pm, obs, tau);
        return PolicyStep{r.action, r.exit_layer, r.blocks_executed, r.entropy,
                          r.exit_layer < pm.model->config.num_layers};
    };
}

/// Random episodes: start and goal are free cells, the start lies outside the
/// goal region and the region is reachable from it.
inline std::vector<EpisodeSpec> make_episodes(const std::vector<GridMap>& maps, std::uint64_t seed, std::size_t n,
                                              int success_radius) {
    if (maps.empty()) throw StructuralError("make_episodes: no maps");
    Rng rng(seed);
    std::vector<EpisodeSpec> out;
    std::size_t attempts = 0;
    while (out.size() < n) {
        if (++attempts > 1000 * (n + 1)) throw DataError("make_episodes: could not place episodes");
        EpisodeSpec ep;
        ep.map_index = static_cast<std::size_t>(rng.below(maps.size()));
        const GridMap& map = maps[ep.map_index];
        const auto free = map.free_cells();
        if (free.size() < 2) throw DataError("make_episodes: map with fewer than two free cells");
        ep.start = free[rng.below(free.size())];
        ep.goal = free[rng.below(free.size())];
        ep.heading = static_cast<Heading>(rng.below(4));
        if (chebyshev(ep.start, ep.goal) <= success_radius) continue;
        const auto dist = bfs_distances(map, goal_region(map, ep.goal, success_radius));
        if (dist[map.index(ep.start)] == kUnreachable) continue;
        out.push_back(ep);
    }
    return out;
}

struct Metrics {
    double sr = 0.0;
    double spl = 0.0;
    double exit_ratio = 0.0;
    double latency_proxy = 0.0;
    double mean_entropy_at_exit = 0.0;
    std::size_t n_episodes = 0;
    std::size_t total_steps = 0;
};

/// SPL = (1/N) sum S_i L_min / max(L_i, L_min); latency proxy and exit ratio
/// are per-step averages over all steps of all episodes.
inline Metrics aggregate(std::span<const EpisodeRecord> records) {
    if (records.empty()) throw StructuralError("aggregate: empty episode set");
    Metrics m;
    m.n_episodes = records.size();
    double blocks = 0.0, early = 0.0, ent = 0.0;
    for (const auto& r : records) {
        if (r.success) {
            m.sr += 1.0;
            const double denom = std::max(r.path_length, r.geodesic);
            m.spl += denom > 0.0 ? r.geodesic / denom : 1.0;
        }
        for (std::size_t i = 0; i < r.blocks.size(); ++i) {
            blocks += static_cast<double>(r.blocks[i]);
            early += r.early[i];
            ent += r.entropies[i];
        }
        m.total_steps += r.blocks.size();
    }
    const double n = static_cast<double>(records.size());
    m.sr /= n;
    m.spl /= n;
    if (m.total_steps > 0) {
        const double steps = static_cast<double>(m.total_steps);
        m.latency_proxy = blocks / steps;
        m.exit_ratio = early / steps;
        m.mean_entropy_at_exit = ent / steps;
    }
    return m;
}

inline std::vector<EpisodeRecord> run_episodes(const Policy& policy, const std::vector<GridMap>& maps,
                                               std::span<const EpisodeSpec> episodes, const EpisodeOptions& opt) {
    std::vector<EpisodeRecord> out;
    out.reserve(episodes.size());
    for (const auto& ep : episodes) out.push_back(run_episode(policy, maps.at(ep.map_index), ep, opt));
    return out;
}

template <typename T>
Metrics evaluate(const PreparedModel<T>& pm, const std::vector<GridMap>& maps, std::span<const EpisodeSpec> episodes,
                 double tau, const EpisodeOptions& opt) {
    if (episodes.empty()) throw StructuralError("evaluate: empty episode set");
    const auto records = run_episodes(dee_policy(pm, tau), maps, episodes, opt);
    return aggregate(records);
}

struct SweepRow {
    double tau = 0.0;
    Metrics metrics;
};

/// 0.05, 0.10, ..., 0.95
inline std::vector<double> default_tau_grid() {
    std::vector<double> g;
    for (int i = 1; i <= 19; ++i) g.push_back((5.0 * i) / 100.0);
    return g;
}

template <typename T>
std::vector<SweepRow> sweep_tau(const PreparedModel<T>& pm, const std::vector<GridMap>& maps,
                                std::span<const EpisodeSpec> episodes, std::span<const double> grid,
                                const EpisodeOptions& opt) {
    if (grid.empty()) throw StructuralError("sweep_tau: empty tau grid");
    std::vector<SweepRow> rows;
    for (double tau : grid) rows.push_back({tau, evaluate(pm, maps, episodes, tau, opt)});
    return rows;
}

inline constexpr const char* kMetricsCsvHeader = "tau,sr,spl,exit_ratio,latency_proxy,mean_entropy_at_exit,n_episodes";

inline std::string metrics_csv_row(double tau, const Metrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.4f,%.6f,%.6f,%.6f,%.6f,%.6f,%zu", tau, m.sr, m.spl, m.exit_ratio,
                  m.latency_proxy, m.mean_entropy_at_exit, m.n_episodes);
    return buf;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << kMetricsCsvHeader << '\n';
    for (const auto& r : rows) out << metrics_csv_row(r.tau, r.metrics) << '\n';
}

/// Per-step entropies of every exit head along a trajectory driven by the
/// full-depth policy. Re-scoring these against a threshold gives the exit
/// decisions DEE would have made on the same frames.
struct RecordedStep {
    std::vector<double> exit_entropies;  // one per exit layer
};

template <typename T>
std::vector<RecordedStep> record_full_depth(const PreparedModel<T>& pm, const std::vector<GridMap>& maps,
                                            std::span<const EpisodeSpec> episodes, const EpisodeOptions& opt) {
    std::vector<RecordedStep> steps;
    Policy policy = [&](const Observation& obs, const AgentState&) {
        const FullForward<T> f = forward_full(pm, obs);
        RecordedStep rs;
        for (const auto& p : f.exit_probs) rs.exit_entropies.push_back(entropy(p));
        steps.push_back(std::move(rs));
        const std::size_t num_layers = pm.model->config.num_layers;
        return PolicyStep{argmax_action(f.final_probs), num_layers, num_layers, entropy(f.final_probs), false};
    };
    run_episodes(policy, maps, episodes, opt);
    return steps;
}

struct RescoredMetrics {
    double exit_ratio = 0.0;
    double latency_proxy = 0.0;
};

inline RescoredMetrics rescore(std::span<const RecordedStep> steps, const ModelConfig& config, double tau) {
    if (steps.empty()) throw StructuralError("rescore: no recorded steps");
    double early = 0.0, blocks = 0.0;
    for (const auto& s : steps) {
        std::size_t layer = config.num_layers;
        for (std::size_t k = 0; k < s.exit_entropies.size(); ++k) {
            if (s.exit_entropies[k] <= tau) {
                layer = config.exit_layers[k];
                break;
            }
        }
        blocks += static_cast<double>(layer);
        if (layer < config.num_layers) early += 1.0;
    }
    const double n = static_cast<double>(steps.size());
    return {early / n, blocks / n};
}

}  // namespace qexit
