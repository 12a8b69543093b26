#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "bst/envdata.hpp"
#include "bst/errors.hpp"

namespace bst::env {

namespace {

constexpr double kWallBackoff = 1e-9;
constexpr int kRowStep[4] = {-1, 0, 1, 0};
constexpr int kColStep[4] = {0, 1, 0, -1};

// Each tile of the built-in layouts is one unit cell.
constexpr std::string_view kUmaze =
    "#####\n"
    "#S..#\n"
    "###.#\n"
    "#G..#\n"
    "#####\n";

constexpr std::string_view kLarge =
    "############\n"
    "#S...#.....#\n"
    "#.##.#.###.#\n"
    "#.#..#...#.#\n"
    "#.#.####.#.#\n"
    "#...#....#.#\n"
    "###.#.##.#.#\n"
    "#.....#...G#\n"
    "############\n";

Vector clip_norm(Vector v, double max_norm) {
    const double n = v.norm();
    if (n > max_norm) {
        v *= max_norm / n;
    }
    return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// MazeLayout

MazeLayout MazeLayout::parse(std::string_view text) {
    MazeLayout m;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
            line.pop_back();
        }
        if (!line.empty()) {
            m.rows_.push_back(line);
        }
    }
    if (m.rows_.empty()) {
        throw ConfigError("maze layout is empty");
    }
    const auto width = m.rows_.front().size();
    int goals = 0;
    for (int r = 0; r < m.height(); ++r) {
        if (m.rows_[r].size() != width) {
            throw ConfigError("maze rows differ in width (row " + std::to_string(r) + ")");
        }
        for (int c = 0; c < static_cast<int>(width); ++c) {
            const char ch = m.rows_[r][c];
            switch (ch) {
                case '#':
                    break;
                case 'G':
                    ++goals;
                    m.goal_ = {r, c};
                    m.free_.push_back({r, c});
                    break;
                case 'S':
                    m.starts_.push_back({r, c});
                    m.free_.push_back({r, c});
                    break;
                case '.':
                    m.free_.push_back({r, c});
                    break;
                default:
                    throw ConfigError(std::string("unknown maze character '") + ch + "'");
            }
        }
    }
    if (goals != 1) {
        throw ConfigError("maze must contain exactly one goal cell, found " + std::to_string(goals));
    }
    if (m.starts_.empty()) {
        throw ConfigError("maze must contain at least one start cell");
    }
    return m;
}

MazeLayout MazeLayout::builtin(std::string_view name) {
    if (name == "umaze") {
        return parse(kUmaze);
    }
    if (name == "large") {
        return parse(kLarge);
    }
    throw ConfigError("unknown built-in maze \"" + std::string(name) + "\"");
}

MazeLayout MazeLayout::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open maze layout " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

bool MazeLayout::is_wall(int row, int col) const {
    if (row < 0 || col < 0 || row >= height() || col >= width()) {
        return true;
    }
    return rows_[row][col] == '#';
}

bool MazeLayout::is_start(Cell c) const { return std::find(starts_.begin(), starts_.end(), c) != starts_.end(); }

Vector MazeLayout::center(Cell c) { return Vector{{c.col + 0.5, c.row + 0.5}}; }

std::optional<Cell> MazeLayout::cell_of(const Vector& p) const {
    if (p.size() != 2 || !p.allFinite()) {
        return std::nullopt;
    }
    const int col = static_cast<int>(std::floor(p(0)));
    const int row = static_cast<int>(std::floor(p(1)));
    if (row < 0 || col < 0 || row >= height() || col >= width()) {
        return std::nullopt;
    }
    return Cell{row, col};
}

std::vector<Cell> MazeLayout::shortest_path(Cell from, Cell to) const {
    if (is_wall(from) || is_wall(to)) {
        return {};
    }
    const int w = width();
    std::vector<int> parent(static_cast<std::size_t>(height() * w), -1);
    auto index = [w](Cell c) { return c.row * w + c.col; };
    std::deque<Cell> queue{from};
    parent[index(from)] = index(from);
    while (!queue.empty()) {
        const Cell c = queue.front();
        queue.pop_front();
        if (c == to) {
            break;
        }
        for (int k = 0; k < 4; ++k) {
            const Cell n{c.row + kRowStep[k], c.col + kColStep[k]};
            if (!is_wall(n) && parent[index(n)] < 0) {
                parent[index(n)] = index(c);
                queue.push_back(n);
            }
        }
    }
    if (parent[index(to)] < 0) {
        return {};
    }
    std::vector<Cell> path;
    for (int i = index(to);; i = parent[i]) {
        path.push_back({i / w, i % w});
        if (i == index(from)) {
            break;
        }
    }
    std::reverse(path.begin(), path.end());
    return path;
}

bool MazeLayout::connected() const {
    for (const auto& c : free_) {
        if (shortest_path(free_.front(), c).empty()) {
            return false;
        }
    }
    return true;
}

std::string MazeLayout::text() const {
    std::string out;
    for (const auto& r : rows_) {
        out += r;
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Environment specs

EnvSpec EnvSpec::four_mode_bandit() { return EnvSpec{}; }

EnvSpec EnvSpec::point_maze(MazeLayout layout) {
    EnvSpec spec;
    spec.kind = EnvKind::PointMaze;
    spec.state_dim = 2;
    spec.action_dim = 2;
    spec.horizon = 300;
    spec.maze = std::move(layout);
    return spec;
}

void EnvSpec::validate() const {
    if (horizon < 1) {
        throw ConfigError("environment horizon must be >= 1");
    }
    if (state_dim != 2 || action_dim != 2) {
        throw ConfigError("both built-in environments use 2-D states and actions");
    }
    if (kind == EnvKind::PointMaze) {
        if (!maze) {
            throw ConfigError("point maze environment without a maze layout");
        }
        if (!(step_scale > 0.0) || step_scale >= 1.0) {
            throw ConfigError("step_scale must lie in (0, 1)");
        }
        if (!(goal_radius > 0.0)) {
            throw ConfigError("goal_radius must be positive");
        }
        if (start_jitter < 0.0 || start_jitter >= 0.5) {
            throw ConfigError("start_jitter must lie in [0, 0.5)");
        }
    } else if (!(mode_std > 0.0)) {
        throw ConfigError("mode_std must be positive");
    }
}

// ---------------------------------------------------------------------------
// Four-mode bandit

std::array<Vector, 4> four_mode_centers() {
    return {Vector{{0.0, 0.8}}, Vector{{0.8, 0.0}}, Vector{{0.0, -0.8}}, Vector{{-0.8, 0.0}}};
}

std::size_t nearest_mode(const Vector& action) {
    const auto centers = four_mode_centers();
    std::size_t best = 0;
    for (std::size_t i = 1; i < centers.size(); ++i) {
        if ((action - centers[i]).norm() < (action - centers[best]).norm()) {
            best = i;
        }
    }
    return best;
}

double bandit_reward(const EnvSpec& spec, const Vector& action) {
    if (action.size() != 2) {
        throw DimensionError("bandit actions are 2-D");
    }
    const auto m = nearest_mode(action);
    return (action - four_mode_centers()[m]).norm() <= 4.0 * spec.mode_std ? spec.mode_rewards[m] : 0.0;
}

ReplayDataset four_mode_dataset(std::size_t n, std::uint64_t seed, const EnvSpec& spec) {
    if (n < 4) {
        throw ArgumentError("four_mode_dataset needs n >= 4, got " + std::to_string(n));
    }
    spec.validate();
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, spec.mode_std);
    const auto centers = four_mode_centers();
    ReplayDataset data(2, 2);
    data.reserve(n);
    const Vector zero = Vector::Zero(2);
    for (std::size_t i = 0; i < n; ++i) {
        const auto mode = i % 4;
        Vector a = centers[mode];
        for (Eigen::Index d = 0; d < 2; ++d) {
            a(d) = std::clamp(a(d) + noise(rng), -1.0, 1.0);
        }
        data.begin_episode();
        data.add({zero, a, spec.mode_rewards[mode], zero, true});
    }
    data.source = {{"generator", "four_mode"}, {"n", n}, {"seed", seed}, {"mode_std", spec.mode_std},
                   {"mode_rewards", spec.mode_rewards}};
    return data;
}

// ---------------------------------------------------------------------------
// Point maze

bool in_free_space(const MazeLayout& maze, const Vector& p) {
    const auto cell = maze.cell_of(p);
    return cell && !maze.is_wall(*cell);
}

StepResult pointmaze_step(const EnvSpec& spec, const Vector& s, const Vector& a) {
    const auto& maze = *spec.maze;
    if (s.size() != 2 || a.size() != 2) {
        throw DimensionError("point maze states and actions are 2-D");
    }
    if (!in_free_space(maze, s)) {
        throw StateError("state (" + std::to_string(s(0)) + ", " + std::to_string(s(1)) + ") is not in free space");
    }
    if (!(a.array().abs() <= 1.0).all()) {
        throw ArgumentError("point maze action outside [-1, 1]^2");
    }
    const Vector delta = spec.step_scale * a;
    Vector next = s + delta;

    // Grid traversal along the motion segment; stop at the first wall face.
    int cx = static_cast<int>(std::floor(s(0)));
    int cy = static_cast<int>(std::floor(s(1)));
    const int step_x = delta(0) > 0 ? 1 : (delta(0) < 0 ? -1 : 0);
    const int step_y = delta(1) > 0 ? 1 : (delta(1) < 0 ? -1 : 0);
    constexpr double inf = std::numeric_limits<double>::infinity();
    double t_max_x = step_x > 0 ? (cx + 1 - s(0)) / delta(0) : (step_x < 0 ? (cx - s(0)) / delta(0) : inf);
    double t_max_y = step_y > 0 ? (cy + 1 - s(1)) / delta(1) : (step_y < 0 ? (cy - s(1)) / delta(1) : inf);
    const double t_delta_x = step_x != 0 ? 1.0 / std::abs(delta(0)) : inf;
    const double t_delta_y = step_y != 0 ? 1.0 / std::abs(delta(1)) : inf;

    auto face = [](int cell, int dir) { return static_cast<double>(dir > 0 ? cell + 1 : cell); };
    while (std::min(t_max_x, t_max_y) <= 1.0) {
        if (t_max_x < t_max_y) {
            if (maze.is_wall(cy, cx + step_x)) {
                next = s + t_max_x * delta;
                next(0) = face(cx, step_x) - step_x * kWallBackoff;
                break;
            }
            cx += step_x;
            t_max_x += t_delta_x;
        } else if (t_max_y < t_max_x) {
            if (maze.is_wall(cy + step_y, cx)) {
                next = s + t_max_y * delta;
                next(1) = face(cy, step_y) - step_y * kWallBackoff;
                break;
            }
            cy += step_y;
            t_max_y += t_delta_y;
        } else {
            // Exactly through a grid corner.
            if (maze.is_wall(cy, cx + step_x) || maze.is_wall(cy + step_y, cx) ||
                maze.is_wall(cy + step_y, cx + step_x)) {
                next = s + t_max_x * delta;
                next(0) = face(cx, step_x) - step_x * kWallBackoff;
                next(1) = face(cy, step_y) - step_y * kWallBackoff;
                break;
            }
            cx += step_x;
            cy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        }
    }
    StepResult result;
    result.next_state = next;
    result.done = (next - MazeLayout::center(maze.goal_cell())).norm() <= spec.goal_radius;
    result.reward = result.done ? 1.0 : 0.0;
    return result;
}

Vector reset(const EnvSpec& spec, Rng& rng) {
    if (spec.kind == EnvKind::FourModeBandit) {
        return Vector::Zero(spec.state_dim);
    }
    const auto& starts = spec.maze->start_cells();
    std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
    std::uniform_real_distribution<double> jitter(-spec.start_jitter, spec.start_jitter);
    Vector s = MazeLayout::center(starts[pick(rng)]);
    s(0) += jitter(rng);
    s(1) += jitter(rng);
    return s;
}

StepResult step(const EnvSpec& spec, const Vector& s, const Vector& a) {
    if (spec.kind == EnvKind::FourModeBandit) {
        return {s, bandit_reward(spec, a), true};
    }
    return pointmaze_step(spec, s, a);
}

WaypointEpisode run_waypoint_episode(const EnvSpec& spec, Cell from, Cell to, const Vector& start,
                                     double noise_scale, const MazeDatasetConfig& cfg, Rng& rng) {
    const auto& maze = *spec.maze;
    const auto path = maze.shortest_path(from, to);
    if (path.empty()) {
        throw ConfigError("waypoint pair is unreachable");
    }
    const int max_steps = cfg.max_episode_steps > 0 ? cfg.max_episode_steps : spec.horizon;
    std::normal_distribution<double> noise(0.0, 1.0);
    WaypointEpisode episode;
    Vector pos = start;
    std::size_t k = path.size() > 1 ? 1 : 0;
    const std::size_t last = path.size() - 1;
    for (int t = 0; t < max_steps; ++t) {
        while (k < last && (pos - MazeLayout::center(path[k])).norm() < cfg.waypoint_tolerance) {
            ++k;
        }
        const Vector target = MazeLayout::center(path[k]);
        Vector a = clip_norm((target - pos) / spec.step_scale, 1.0);
        for (Eigen::Index d = 0; d < 2; ++d) {
            a(d) = std::clamp(a(d) + noise_scale * noise(rng), -1.0, 1.0);
        }
        auto res = pointmaze_step(spec, pos, a);
        episode.transitions.push_back({pos, a, res.reward, res.next_state, res.done});
        pos = res.next_state;
        if (res.done) {
            episode.reached_goal = true;
            break;
        }
        if (k == last && (pos - MazeLayout::center(to)).norm() < cfg.waypoint_tolerance) {
            episode.reached_target = true;
            break;
        }
    }
    return episode;
}

ReplayDataset generate_maze_dataset(const EnvSpec& spec, const MazeDatasetConfig& cfg, std::size_t n_episodes,
                                    std::uint64_t seed) {
    spec.validate();
    if (spec.kind != EnvKind::PointMaze) {
        throw ConfigError("generate_maze_dataset needs a point maze environment");
    }
    if (n_episodes < 1) {
        throw ArgumentError("generate_maze_dataset needs at least one episode");
    }
    if (cfg.noise_scale < 0.0 || cfg.start_jitter < 0.0 || cfg.start_jitter >= 0.5 || !(cfg.waypoint_tolerance > 0.0)) {
        throw ConfigError("invalid maze dataset config");
    }
    const auto& maze = *spec.maze;
    if (!maze.connected()) {
        throw ConfigError("maze is disconnected");
    }
    const auto& cells = maze.free_cells();
    if (cells.size() < 3) {
        throw ConfigError("maze needs at least three free cells");
    }
    ReplayDataset data(2, 2);
    std::size_t end_to_end = 0;
    std::size_t reaching_goal = 0;
    for (std::size_t e = 0; e < n_episodes; ++e) {
        Rng rng(derive_seed(seed, e));
        std::uniform_int_distribution<std::size_t> pick(0, cells.size() - 1);
        Cell from;
        Cell to;
        do {
            from = cells[pick(rng)];
            to = cells[pick(rng)];
        } while (from == to || from == maze.goal_cell() || (maze.is_start(from) && to == maze.goal_cell()) ||
                 maze.shortest_path(from, to).empty());
        std::uniform_real_distribution<double> jitter(-cfg.start_jitter, cfg.start_jitter);
        Vector start = MazeLayout::center(from);
        start(0) += jitter(rng);
        start(1) += jitter(rng);
        const auto episode = run_waypoint_episode(spec, from, to, start, cfg.noise_scale, cfg, rng);
        data.begin_episode();
        for (const auto& t : episode.transitions) {
            data.add(t);
        }
        if (episode.reached_goal) {
            ++reaching_goal;
            if (maze.is_start(from)) {
                ++end_to_end;
            }
        }
    }
    const double fraction = static_cast<double>(end_to_end) / static_cast<double>(n_episodes);
    data.source = {{"generator", "point_maze"},
                   {"seed", seed},
                   {"episodes", n_episodes},
                   {"transitions", data.size()},
                   {"noise_scale", cfg.noise_scale},
                   {"start_jitter", cfg.start_jitter},
                   {"waypoint_tolerance", cfg.waypoint_tolerance},
                   {"end_to_end_success", fraction},
                   {"episodes_reaching_goal", reaching_goal},
                   {"maze", maze.text()}};
    return data;
}

PolicyFn waypoint_oracle(const EnvSpec& spec) {
    if (spec.kind != EnvKind::PointMaze || !spec.maze) {
        throw ConfigError("the waypoint oracle needs a point maze environment");
    }
    const auto& maze = *spec.maze;
    const int w = maze.width();
    const int h = maze.height();
    // BFS distance-to-goal field.
    std::vector<int> dist(static_cast<std::size_t>(w * h), -1);
    std::deque<Cell> queue{maze.goal_cell()};
    dist[maze.goal_cell().row * w + maze.goal_cell().col] = 0;
    while (!queue.empty()) {
        const Cell c = queue.front();
        queue.pop_front();
        for (int k = 0; k < 4; ++k) {
            const Cell n{c.row + kRowStep[k], c.col + kColStep[k]};
            if (!maze.is_wall(n) && dist[n.row * w + n.col] < 0) {
                dist[n.row * w + n.col] = dist[c.row * w + c.col] + 1;
                queue.push_back(n);
            }
        }
    }
    return [maze, dist, w, step_scale = spec.step_scale](const Vector& s) -> Vector {
        const auto cell = maze.cell_of(s);
        Vector target = MazeLayout::center(maze.goal_cell());
        if (cell && !maze.is_wall(*cell)) {
            const int d = dist[cell->row * w + cell->col];
            for (int k = 0; k < 4 && d > 0; ++k) {
                const Cell n{cell->row + kRowStep[k], cell->col + kColStep[k]};
                if (!maze.is_wall(n) && dist[n.row * w + n.col] == d - 1) {
                    target = MazeLayout::center(n);
                    break;
                }
            }
        }
        return clip_norm((target - s) / step_scale, 1.0).cwiseMax(-1.0).cwiseMin(1.0);
    };
}

}  // namespace bst::env
