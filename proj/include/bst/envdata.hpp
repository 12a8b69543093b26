#pragma once

// Toy continuous-control testbeds, behavior policies, offline datasets and
// the "BSTD" dataset file format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bst/nn.hpp"
#include "bst/rng.hpp"

namespace bst::env {

using nn::Matrix;
using nn::Vector;

struct Transition {
    Vector state;
    Vector action;
    double reward = 0.0;
    Vector next_state;
    bool done = false;
};

// Column-major storage, one transition per column. Values are kept at
// single precision resolution so that the on-disk f32 format round-trips
// exactly.
class ReplayDataset {
public:
    ReplayDataset() = default;
    ReplayDataset(int state_dim, int action_dim);

    int state_dim() const { return state_dim_; }
    int action_dim() const { return action_dim_; }
    std::size_t size() const { return rewards_.size(); }
    bool empty() const { return rewards_.empty(); }

    void reserve(std::size_t n);
    // Marks the next added transition as the first of an episode.
    void begin_episode();
    void add(const Transition& t);

    Transition at(std::size_t i) const;

    Eigen::Map<const Matrix> states() const;
    Eigen::Map<const Matrix> actions() const;
    Eigen::Map<const Matrix> next_states() const;
    Eigen::Map<const Vector> rewards() const;
    std::span<const std::uint8_t> dones() const { return dones_; }
    std::span<const std::uint64_t> episode_starts() const { return episode_starts_; }

    // Generator config, seed and generation statistics.
    nlohmann::json source;

    // Throws StateError describing the first violated invariant.
    void validate() const;

    // Payload equality (ignores `source`).
    friend bool operator==(const ReplayDataset& a, const ReplayDataset& b);

private:
    friend ReplayDataset load_dataset(std::istream& in);

    int state_dim_ = 0;
    int action_dim_ = 0;
    std::vector<double> states_;
    std::vector<double> actions_;
    std::vector<double> rewards_;
    std::vector<double> next_states_;
    std::vector<std::uint8_t> dones_;
    std::vector<std::uint64_t> episode_starts_;
};

struct Batch {
    Matrix states;
    Matrix actions;
    Vector rewards;
    Matrix next_states;
    Vector dones;  // 1.0 for terminal transitions

    std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }
};

// Uniform sampling over transitions, with replacement.
Batch sample_batch(const ReplayDataset& data, std::size_t batch_size, Rng& rng);
Batch gather_batch(const ReplayDataset& data, std::span<const std::size_t> indices);

// Per-dimension state statistics; std is floored at 1e-3.
struct StateNormalizer {
    Vector mean;
    Vector std;

    static StateNormalizer identity(int dim);
    static StateNormalizer fit(const ReplayDataset& data);
    Matrix apply(const Matrix& states) const;
    Vector apply(const Vector& state) const;
};

// "BSTD" format: magic, u32 version, u32 state dim, u32 action dim,
// u64 transition count, u64 episode count, then little-endian f32 arrays
// states, actions, rewards, next states, u8 done flags and finally the u64
// episode start indices.
void save_dataset(std::ostream& out, const ReplayDataset& data);
ReplayDataset load_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const ReplayDataset& data);
ReplayDataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Mazes

struct Cell {
    int row = 0;
    int col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

// ASCII layout: '#' wall, '.' free, 'S' start candidate, 'G' goal. Cell
// (r, c) covers x in [c, c+1], y in [r, r+1]; states are (x, y).
class MazeLayout {
public:
    static MazeLayout parse(std::string_view text);
    static MazeLayout builtin(std::string_view name);
    static MazeLayout from_file(const std::filesystem::path& path);

    int height() const { return static_cast<int>(rows_.size()); }
    int width() const { return height() == 0 ? 0 : static_cast<int>(rows_.front().size()); }
    bool is_wall(int row, int col) const;
    bool is_wall(Cell c) const { return is_wall(c.row, c.col); }

    const std::vector<Cell>& free_cells() const { return free_; }
    const std::vector<Cell>& start_cells() const { return starts_; }
    Cell goal_cell() const { return goal_; }
    bool is_start(Cell c) const;

    static Vector center(Cell c);
    // Cell containing a point, or nullopt outside the grid.
    std::optional<Cell> cell_of(const Vector& position) const;
    bool connected() const;
    // BFS shortest cell path, both endpoints included; empty if unreachable.
    std::vector<Cell> shortest_path(Cell from, Cell to) const;

    std::string text() const;

private:
    std::vector<std::string> rows_;
    std::vector<Cell> free_;
    std::vector<Cell> starts_;
    Cell goal_;
};

enum class EnvKind { FourModeBandit, PointMaze };

struct EnvSpec {
    EnvKind kind = EnvKind::FourModeBandit;
    int state_dim = 2;
    int action_dim = 2;
    int horizon = 1;
    // FourModeBandit
    std::array<double, 4> mode_rewards{0.25, 0.5, 0.75, 1.0};
    double mode_std = 0.05;
    // PointMaze
    double step_scale = 0.15;
    double goal_radius = 0.3;
    double start_jitter = 0.1;
    std::optional<MazeLayout> maze;

    static EnvSpec four_mode_bandit();
    static EnvSpec point_maze(MazeLayout layout);
    void validate() const;
};

// Mode centers in clockwise order from [0, 0.8]; mode i pays mode_rewards[i].
std::array<Vector, 4> four_mode_centers();
std::size_t nearest_mode(const Vector& action);
// Reward of the nearest mode when the action lies within 4 sigma of it.
double bandit_reward(const EnvSpec& spec, const Vector& action);

ReplayDataset four_mode_dataset(std::size_t n, std::uint64_t seed, const EnvSpec& spec = EnvSpec::four_mode_bandit());

struct StepResult {
    Vector next_state;
    double reward = 0.0;
    bool done = false;
};

bool in_free_space(const MazeLayout& maze, const Vector& position);
// Throws StateError when s is not in free space.
StepResult pointmaze_step(const EnvSpec& spec, const Vector& s, const Vector& a);

// Generic episode interface over both environment kinds.
Vector reset(const EnvSpec& spec, Rng& rng);
StepResult step(const EnvSpec& spec, const Vector& s, const Vector& a);

struct MazeDatasetConfig {
    double noise_scale = 0.3;
    double start_jitter = 0.25;
    double waypoint_tolerance = 0.2;
    int max_episode_steps = 0;  // 0 => env horizon
};

struct WaypointEpisode {
    std::vector<Transition> transitions;
    bool reached_goal = false;
    bool reached_target = false;
};

// Noisy waypoint-following between two cells.
WaypointEpisode run_waypoint_episode(const EnvSpec& spec, Cell from, Cell to, const Vector& start,
                                     double noise_scale, const MazeDatasetConfig& cfg, Rng& rng);

// Episodes between random cell pairs, never a start cell paired with the goal
// cell. source["end_to_end_success"] is the fraction of episodes that begin
// in a start cell and reach the goal.
ReplayDataset generate_maze_dataset(const EnvSpec& spec, const MazeDatasetConfig& cfg, std::size_t n_episodes,
                                    std::uint64_t seed);

// Cyclic shuffle (Sattolo): no transition keeps its own action. Returns an
// action_dim x size matrix.
Matrix permuted_actions(const ReplayDataset& data, std::uint64_t seed);

using PolicyFn = std::function<Vector(const Vector&)>;

// Stateless shortest-path controller toward the goal cell.
PolicyFn waypoint_oracle(const EnvSpec& spec);

}  // namespace bst::env
