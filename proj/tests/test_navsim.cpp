// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#include <queue>
#include <vector>

#include <gtest/gtest.h>

#include "qexit/episode.hpp"
#include "qexit/training.hpp"

using namespace qexit;

namespace {

// Unit-weight Dijkstra over free 4-neighbors.
int dijkstra(const GridMap& map, Cell a, Cell b) {
    std::vector<int> dist(map.num_cells(), std::numeric_limits<int>::max());
    using Item = std::pair<int, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[map.index(a)] = 0;
    pq.push({0, map.index(a)});
    while (!pq.empty()) {
        const auto [d, i] = pq.top();
        pq.pop();
        if (d > dist[i]) continue;
        const Cell c = map.cell_at(i);
        for (Cell n : {Cell{c.x + 1, c.y}, Cell{c.x - 1, c.y}, Cell{c.x, c.y + 1}, Cell{c.x, c.y - 1}}) {
            if (!map.is_free(n)) continue;
            const std::size_t j = map.index(n);
            if (d + 1 < dist[j]) {
                dist[j] = d + 1;
                pq.push({d + 1, j});
            }
        }
    }
    return dist[map.index(b)];
}

EpisodeRecord record(bool success, double path, double geo, std::vector<std::size_t> blocks, std::size_t num_layers) {
    EpisodeRecord r;
    r.success = success;
    r.path_length = path;
    r.geodesic = geo;
    for (auto b : blocks) {
        r.blocks.push_back(b);
        r.exit_layers.push_back(b);
        r.entropies.push_back(0.0);
        r.early.push_back(b < num_layers ? 1 : 0);
    }
    return r;
}

Policy constant(Action a) {
    return [a](const Observation&, const AgentState&) { return PolicyStep{a, 6, 6, 0.0, false}; };
}

}  // namespace

TEST(Map, EmptyRoomAndDeterminism) {
    const auto m = generate_map(3, 8, 6, 0.0);
    EXPECT_EQ(m.free_cells().size(), 6u * 4u);
    EXPECT_NO_THROW(m.validate());
    EXPECT_EQ(generate_map(9, 15, 15, 0.3), generate_map(9, 15, 15, 0.3));
    EXPECT_THROW(generate_map(1, 15, 15, 0.5), StructuralError);
}

TEST(Map, GeneratedMapsAreConnected) {
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto m = generate_map(s, 15, 15, 0.4);
        ASSERT_EQ(count_free_components(m), 1u) << "seed " << s;
    }
}

TEST(Map, TextRoundTrip) {
    const auto m = generate_map(4, 12, 9, 0.25);
    EXPECT_EQ(parse_map(map_to_string(m)).map, m);
    const auto mf = parse_map("#####\n#S.G#\n#####\n");
    EXPECT_EQ(*mf.start, (Cell{1, 1}));
    EXPECT_EQ(*mf.goal, (Cell{3, 1}));
    EXPECT_THROW(parse_map("#####\n#..x#\n#####\n"), DataError);
    EXPECT_THROW(parse_map("#####\n#..#\n#####\n"), DataError);
    EXPECT_THROW(parse_map("#####\n#...#\n##.##\n"), DataError);
}

TEST(Step, CollisionTurnsAndForward) {
    const auto m = parse_map("#####\n#...#\n#####\n").map;
    AgentState s{{1, 1}, Heading::north, {3, 1}};
    const auto blocked = step(m, s, Action::forward);
    EXPECT_EQ(blocked.position, s.position);
    EXPECT_EQ(blocked.steps_taken, 1);
    EXPECT_EQ(blocked.distance_traveled, 0.0);
    AgentState t = s;
    for (int i = 0; i < 4; ++i) t = step(m, t, Action::turn_left);
    EXPECT_EQ(t.heading, s.heading);
    s.heading = Heading::east;
    const auto moved = step(m, s, Action::forward);
    EXPECT_EQ(moved.position, (Cell{2, 1}));
    EXPECT_DOUBLE_EQ(moved.distance_traveled, 0.25);
    const auto stopped = step(m, s, Action::stop);
    EXPECT_TRUE(stopped.terminated);
    EXPECT_THROW(step(m, stopped, Action::forward), StructuralError);
}

TEST(ShortestPath, Cases) {
    const auto corridor = parse_map("########\n#......#\n########\n").map;
    EXPECT_EQ(shortest_path_len(corridor, {1, 1}, {1, 1}), 0.0);
    EXPECT_DOUBLE_EQ(shortest_path_len(corridor, {1, 1}, {6, 1}), 1.25);
    const auto split = parse_map("#####\n#.#.#\n#####\n").map;
    EXPECT_THROW(shortest_path_len(split, {1, 1}, {3, 1}), DataError);
}

TEST(ShortestPath, MatchesDijkstra) {
    Rng rng(1);
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto m = generate_map(s, 15, 15, 0.3);
        const auto free = m.free_cells();
        for (int t = 0; t < 10; ++t) {
            const Cell a = free[rng.below(free.size())];
            const Cell b = free[rng.below(free.size())];
            EXPECT_DOUBLE_EQ(shortest_path_len(m, a, b), dijkstra(m, a, b) * 0.25);
        }
    }
}

TEST(Observe, RotationAndCompass) {
    const auto m = parse_map(
        "#######\n"
        "#.....#\n"
        "#.....#\n"
        "#.....#\n"
        "#######\n").map;
    AgentState s{{1, 2}, Heading::east, {5, 2}};
    const auto o = observe(m, s, 3);
    // Facing east from (1,2): row 0 is x=2, columns go north..south.
    EXPECT_EQ(o.at(0, 0), 0);
    EXPECT_EQ(o.at(1, 1), 0);
    EXPECT_EQ(o.at(2, 0), 1);  // behind-left is the west wall
    EXPECT_FLOAT_EQ(o.goal_compass[0], 4.0f / 7.0f);
    EXPECT_FLOAT_EQ(o.goal_compass[1], 0.0f);
    EXPECT_EQ(o.goal_visible, 0);
    s.heading = Heading::north;
    const auto n = observe(m, s, 3);
    EXPECT_FLOAT_EQ(n.goal_compass[0], 0.0f);
    EXPECT_FLOAT_EQ(n.goal_compass[1], 4.0f / 7.0f);
    EXPECT_THROW(observe(m, s, 4), StructuralError);
}

TEST(Metrics, SplHandCases) {
    {
        const std::vector<EpisodeRecord> r{record(true, 2.0, 2.0, {6, 6}, 6)};
        const auto m = aggregate(r);
        EXPECT_DOUBLE_EQ(m.spl, 1.0);
        EXPECT_DOUBLE_EQ(m.sr, 1.0);
    }
    {
        const std::vector<EpisodeRecord> r{record(true, 4.0, 2.0, {6}, 6)};
        EXPECT_DOUBLE_EQ(aggregate(r).spl, 0.5);
    }
    {
        const std::vector<EpisodeRecord> early{record(true, 1.0, 1.0, {2, 2, 2}, 6)};
        const auto m = aggregate(early);
        EXPECT_DOUBLE_EQ(m.latency_proxy, 2.0);
        EXPECT_DOUBLE_EQ(m.exit_ratio, 1.0);
        const std::vector<EpisodeRecord> never{record(false, 1.0, 1.0, {6, 6}, 6)};
        const auto n = aggregate(never);
        EXPECT_DOUBLE_EQ(n.latency_proxy, 6.0);
        EXPECT_DOUBLE_EQ(n.exit_ratio, 0.0);
        EXPECT_DOUBLE_EQ(n.spl, 0.0);
    }
    EXPECT_THROW(aggregate(std::vector<EpisodeRecord>{}), StructuralError);
}

TEST(Metrics, SplNeverExceedsSr) {
    Rng rng(2);
    std::vector<EpisodeRecord> rs;
    for (int i = 0; i < 200; ++i) {
        const double geo = 0.25 * (1 + rng.below(20));
        rs.push_back(record(rng.uniform() < 0.6, geo * (1 + rng.uniform()), geo, {4}, 6));
        const auto m = aggregate(rs);
        ASSERT_LE(m.spl, m.sr);
    }
}

TEST(Episode, OracleIsOptimal) {
    std::vector<GridMap> maps;
    for (std::uint64_t s = 0; s < 10; ++s) maps.push_back(generate_map(s, 15, 15, 0.3));
    const auto eps = make_episodes(maps, 5, 100, 1);
    std::vector<EpisodeRecord> records;
    for (const auto& ep : eps) {
        const auto r = run_episode(oracle_policy(maps[ep.map_index], ep, 1), maps[ep.map_index], ep, {});
        EXPECT_TRUE(r.success);
        EXPECT_DOUBLE_EQ(r.path_length, r.geodesic);
        EXPECT_EQ(r.termination, Termination::stopped_success);
        records.push_back(r);
    }
    const auto m = aggregate(records);
    EXPECT_EQ(m.sr, 1.0);
    EXPECT_EQ(m.spl, 1.0);
}

TEST(Episode, AlwaysStopAndNeverStop) {
    const auto map = generate_map(1, 12, 12, 0.0);
    const EpisodeSpec ep{0, {1, 1}, Heading::east, {10, 10}};
    const auto stop = run_episode(constant(Action::stop), map, ep, {});
    EXPECT_FALSE(stop.success);
    EXPECT_EQ(stop.path_length, 0.0);
    EXPECT_EQ(stop.termination, Termination::stopped_failure);
    EpisodeOptions opt;
    opt.max_steps = 37;
    const auto spin = run_episode(constant(Action::turn_left), map, ep, opt);
    EXPECT_FALSE(spin.success);
    EXPECT_EQ(spin.steps, 37);
    EXPECT_EQ(spin.termination, Termination::timeout);
    const EpisodeSpec inside{0, {1, 1}, Heading::east, {2, 2}};
    EXPECT_THROW(run_episode(constant(Action::stop), map, inside, {}), StructuralError);
}

TEST(Episode, GeodesicIsDistanceToGoalRegion) {
    const auto map = parse_map("##########\n#........#\n##########\n").map;
    // Goal at x=8 with radius 1: the region starts at x=7.
    EXPECT_DOUBLE_EQ(geodesic_to_goal(map, {1, 1}, {8, 1}, 1), 6 * 0.25);
    EXPECT_DOUBLE_EQ(geodesic_to_goal(map, {1, 1}, {8, 1}, 0), 7 * 0.25);
}

TEST(Sweep, RescoringIsMonotone) {
    Rng rng(3);
    ModelConfig c;
    c.num_layers = 3;
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.exit_layers = {1, 2};
    c.exit_hidden = 8;
    c.lora_rank = 2;
    const auto model = init_model<float>(c, rng);
    const PreparedModel<float> pm(model);
    std::vector<GridMap> maps{generate_map(1, 10, 10, 0.2)};
    EpisodeOptions opt;
    opt.max_steps = 40;
    const auto eps = make_episodes(maps, 2, 5, 1);
    const auto steps = record_full_depth(pm, maps, std::span<const EpisodeSpec>(eps), opt);
    ASSERT_FALSE(steps.empty());
    double prev_er = -1.0, prev_lp = 1e9;
    for (double tau = -0.5; tau <= 1.5; tau += 0.01) {
        const auto r = rescore(std::span<const RecordedStep>(steps), c, tau);
        ASSERT_GE(r.exit_ratio, prev_er);
        ASSERT_LE(r.latency_proxy, prev_lp);
        prev_er = r.exit_ratio;
        prev_lp = r.latency_proxy;
    }
    EXPECT_EQ(rescore(std::span<const RecordedStep>(steps), c, std::log(4.0)).latency_proxy, 1.0);
}

TEST(Sweep, GridRowsAndEndpoints) {
    Rng rng(4);
    const auto model = init_model<float>(ModelConfig{}, rng);
    const PreparedModel<float> pm(model);
    std::vector<GridMap> maps{generate_map(2, 10, 10, 0.2)};
    EpisodeOptions opt;
    opt.max_steps = 15;
    const auto eps = make_episodes(maps, 3, 3, 1);
    const std::vector<double> grid{0.0, std::log(4.0)};
    const auto rows = sweep_tau(pm, maps, std::span<const EpisodeSpec>(eps), std::span<const double>(grid), opt);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].metrics.latency_proxy, 6.0);
    EXPECT_EQ(rows[1].metrics.latency_proxy, 2.0);
    std::ostringstream csv;
    write_sweep_csv(csv, rows);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), kMetricsCsvHeader);
}
