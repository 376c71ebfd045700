// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic grid-world navigation: oriented agent, 90-degree turns,
// one-cell moves, egocentric occupancy observations and BFS geodesics.
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/numerics.hpp"

namespace qexit {

enum class Action : std::uint8_t { forward = 0, turn_left = 1, turn_right = 2, stop = 3 };
inline constexpr std::size_t kNumActions = 4;

inline const char* action_name(Action a) {
    switch (a) {
        case Action::forward: return "FORWARD";
        case Action::turn_left: return "LEFT";
        case Action::turn_right: return "RIGHT";
        case Action::stop: return "STOP";
    }
    return "?";
}

// Clockwise order; y grows downward (row index).
enum class Heading : std::uint8_t { north = 0, east = 1, south = 2, west = 3 };

struct Cell {
    int x = 0;
    int y = 0;
    bool operator==(const Cell&) const = default;
};

inline Cell heading_delta(Heading h) {
    static constexpr std::array<Cell, 4> d{{{0, -1}, {1, 0}, {0, 1}, {-1, 0}}};
    return d[static_cast<int>(h)];
}

inline Heading turn_left(Heading h) { return static_cast<Heading>((static_cast<int>(h) + 3) % 4); }
inline Heading turn_right(Heading h) { return static_cast<Heading>((static_cast<int>(h) + 1) % 4); }

inline int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

class GridMap {
public:
    GridMap() = default;
    GridMap(int width, int height, double cell_size = 0.25)
        : width_(width), height_(height), cell_size_(cell_size),
          walls_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), 1) {
        if (width < 3 || height < 3) throw StructuralError("GridMap: width and height must be >= 3");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    double cell_size() const noexcept { return cell_size_; }

    bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < height_; }
    // Out-of-bounds cells read as walls.
    bool is_wall(Cell c) const { return !in_bounds(c) || walls_[index(c)] != 0; }
    bool is_free(Cell c) const { return !is_wall(c); }
    void set_wall(Cell c, bool wall) { walls_.at(index(c)) = wall ? 1 : 0; }

    std::size_t index(Cell c) const {
        return static_cast<std::size_t>(c.y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(c.x);
    }
    Cell cell_at(std::size_t i) const {
        return {static_cast<int>(i % static_cast<std::size_t>(width_)), static_cast<int>(i / static_cast<std::size_t>(width_))};
    }
    std::size_t num_cells() const { return walls_.size(); }

    std::vector<Cell> free_cells() const {
        std::vector<Cell> out;
        for (std::size_t i = 0; i < walls_.size(); ++i)
            if (walls_[i] == 0) out.push_back(cell_at(i));
        return out;
    }

    // Border walls, at least two free cells.
    void validate() const {
        for (int x = 0; x < width_; ++x) {
            if (!is_wall({x, 0}) || !is_wall({x, height_ - 1})) throw DataError("GridMap: border must be walls");
        }
        for (int y = 0; y < height_; ++y) {
            if (!is_wall({0, y}) || !is_wall({width_ - 1, y})) throw DataError("GridMap: border must be walls");
        }
        if (free_cells().size() < 2) throw DataError("GridMap: fewer than two free cells");
    }

    bool operator==(const GridMap&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    double cell_size_ = 0.25;
    std::vector<std::uint8_t> walls_;
};

inline constexpr int kUnreachable = -1;

/// BFS step counts over the 4-neighborhood from a set of source cells.
inline std::vector<int> bfs_distances(const GridMap& map, const std::vector<Cell>& sources) {
    std::vector<int> dist(map.num_cells(), kUnreachable);
    std::deque<Cell> frontier;
    for (Cell s : sources) {
        if (map.is_free(s) && dist[map.index(s)] == kUnreachable) {
            dist[map.index(s)] = 0;
            frontier.push_back(s);
        }
    }
    while (!frontier.empty()) {
        const Cell c = frontier.front();
        frontier.pop_front();
        for (int h = 0; h < 4; ++h) {
            const Cell d = heading_delta(static_cast<Heading>(h));
            const Cell n{c.x + d.x, c.y + d.y};
            if (map.is_free(n) && dist[map.index(n)] == kUnreachable) {
                dist[map.index(n)] = dist[map.index(c)] + 1;
                frontier.push_back(n);
            }
        }
    }
    return dist;
}

inline std::size_t count_free_components(const GridMap& map) {
    std::vector<int> seen(map.num_cells(), 0);
    std::size_t components = 0;
    for (std::size_t i = 0; i < map.num_cells(); ++i) {
        const Cell c = map.cell_at(i);
        if (map.is_wall(c) || seen[i]) continue;
        ++components;
        for (std::size_t j = 0; auto d : bfs_distances(map, {c})) {
            if (d != kUnreachable) seen[j] = 1;
            ++j;
        }
    }
    return components;
}

/// Geodesic length in meters; DataError when b is unreachable from a.
inline double shortest_path_len(const GridMap& map, Cell a, Cell b) {
    if (!map.is_free(a) || !map.is_free(b)) throw StructuralError("shortest_path_len: endpoints must be free");
    const int d = bfs_distances(map, {a})[map.index(b)];
    if (d == kUnreachable) throw DataError("shortest_path_len: goal unreachable");
    return d * map.cell_size();
}

/// Free cells within `radius` (Chebyshev) of the goal: the STOP-to-succeed region.
inline std::vector<Cell> goal_region(const GridMap& map, Cell goal, int radius) {
    std::vector<Cell> out;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            const Cell c{goal.x + dx, goal.y + dy};
            if (map.is_free(c)) out.push_back(c);
        }
    return out;
}

/// Seeded random walls inside a bordered box; re-rolls until the free cells
/// form a single connected component.
inline GridMap generate_map(std::uint64_t seed, int width, int height, double wall_density) {
    if (!(wall_density >= 0.0 && wall_density <= 0.4)) {
        throw StructuralError("generate_map: wall density must be in [0, 0.4]");
    }
    if (width < 4 || height < 4) throw StructuralError("generate_map: map must be at least 4x4");
    Rng rng(derive_seed(seed, "map"));
    for (int attempt = 0; attempt < 10000; ++attempt) {
        GridMap map(width, height);
        for (int y = 1; y < height - 1; ++y)
            for (int x = 1; x < width - 1; ++x) map.set_wall({x, y}, rng.uniform() < wall_density);
        if (map.free_cells().size() >= 2 && count_free_components(map) == 1) return map;
    }
    throw StructuralError("generate_map: could not produce a connected map");
}

// '#' wall, '.' free, 'S' / 'G' optional start and goal markers (free cells).
struct MapFile {
    GridMap map;
    std::optional<Cell> start;
    std::optional<Cell> goal;
};

inline MapFile parse_map(std::istream& in) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        lines.push_back(line);
    }
    if (lines.empty()) throw DataError("map: empty file");
    const std::size_t w = lines.front().size();
    for (const auto& l : lines) {
        if (l.size() != w) throw DataError("map: rows have different lengths");
    }
    MapFile mf{GridMap(static_cast<int>(w), static_cast<int>(lines.size())), {}, {}};
    for (int y = 0; y < static_cast<int>(lines.size()); ++y) {
        for (int x = 0; x < static_cast<int>(w); ++x) {
            const char ch = lines[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
            switch (ch) {
                case '#': mf.map.set_wall({x, y}, true); break;
                case '.': mf.map.set_wall({x, y}, false); break;
                case 'S': mf.map.set_wall({x, y}, false); mf.start = Cell{x, y}; break;
                case 'G': mf.map.set_wall({x, y}, false); mf.goal = Cell{x, y}; break;
                default: throw DataError(std::string("map: unexpected character '") + ch + "'");
            }
        }
    }
    mf.map.validate();
    return mf;
}

inline MapFile parse_map(const std::string& text) {
    std::istringstream in(text);
    return parse_map(in);
}

inline void write_map(std::ostream& out, const GridMap& map, std::optional<Cell> start = {},
                      std::optional<Cell> goal = {}) {
    for (int y = 0; y < map.height(); ++y) {
        for (int x = 0; x < map.width(); ++x) {
            const Cell c{x, y};
            if (start && *start == c) out << 'S';
            else if (goal && *goal == c) out << 'G';
            else out << (map.is_wall(c) ? '#' : '.');
        }
        out << '\n';
    }
}

inline std::string map_to_string(const GridMap& map) {
    std::ostringstream out;
    write_map(out, map);
    return out.str();
}

struct AgentState {
    Cell position;
    Heading heading = Heading::north;
    Cell goal;
    int steps_taken = 0;
    double distance_traveled = 0.0;
    bool terminated = false;
};

/// Advances one action. A blocked FORWARD still costs a step but adds no distance.
inline AgentState step(const GridMap& map, const AgentState& state, Action action) {
    if (state.terminated) throw StructuralError("step: episode already terminated");
    AgentState next = state;
    next.steps_taken += 1;
    switch (action) {
        case Action::forward: {
            const Cell d = heading_delta(state.heading);
            const Cell target{state.position.x + d.x, state.position.y + d.y};
            if (map.is_free(target)) {
                next.position = target;
                next.distance_traveled += map.cell_size();
            }
            break;
        }
        case Action::turn_left: next.heading = turn_left(state.heading); break;
        case Action::turn_right: next.heading = turn_right(state.heading); break;
        case Action::stop: next.terminated = true; break;
    }
    return next;
}

/// Egocentric input: a k x k occupancy patch centered on the agent and
/// rotated so the agent faces up (row 0 is farthest ahead), plus the goal
/// offset in the agent frame (forward, right) divided by the larger map side.
struct Observation {
    int window_size = 7;
    std::vector<std::uint8_t> window;  // row-major, 1 = wall
    std::array<float, 2> goal_compass{0.0f, 0.0f};
    std::uint8_t goal_visible = 0;

    std::uint8_t at(int r, int c) const { return window[static_cast<std::size_t>(r * window_size + c)]; }
    bool operator==(const Observation&) const = default;
};

inline Observation observe(const GridMap& map, const AgentState& state, int window_size = 7) {
    if (window_size < 1 || window_size % 2 == 0) throw StructuralError("observe: window size must be odd");
    const int half = window_size / 2;
    const Cell fwd = heading_delta(state.heading);
    const Cell right = heading_delta(turn_right(state.heading));
    Observation obs;
    obs.window_size = window_size;
    obs.window.resize(static_cast<std::size_t>(window_size * window_size));
    for (int r = 0; r < window_size; ++r) {
        const int ahead = half - r;
        for (int c = 0; c < window_size; ++c) {
            const int side = c - half;
            const Cell w{state.position.x + ahead * fwd.x + side * right.x,
                         state.position.y + ahead * fwd.y + side * right.y};
            obs.window[static_cast<std::size_t>(r * window_size + c)] = map.is_wall(w) ? 1 : 0;
        }
    }
    const int dx = state.goal.x - state.position.x;
    const int dy = state.goal.y - state.position.y;
    const int goal_ahead = dx * fwd.x + dy * fwd.y;
    const int goal_right = dx * right.x + dy * right.y;
    const double norm = static_cast<double>(std::max(map.width(), map.height()));
    obs.goal_compass = {static_cast<float>(goal_ahead / norm), static_cast<float>(goal_right / norm)};
    obs.goal_visible = (std::abs(goal_ahead) <= half && std::abs(goal_right) <= half) ? 1 : 0;
    return obs;
}

}  // namespace qexit
