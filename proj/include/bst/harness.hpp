#pragma once

// Run configuration, manifests, analysis and ablation drivers, and the
// command line front end.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bst/agent.hpp"
#include "bst/envdata.hpp"
#include "bst/morse.hpp"

namespace bst::harness {

using nn::Matrix;
using nn::Vector;

struct EnvSection {
    std::string kind = "four_mode";  // four_mode | point_maze
    std::string maze = "large";      // builtin name or path to an ASCII layout
    std::optional<int> horizon;
    std::optional<double> step_scale;
    std::optional<double> goal_radius;
    std::optional<double> start_jitter;
    std::optional<double> mode_std;
    std::optional<std::vector<double>> mode_rewards;
};

struct DatasetSection {
    std::size_t size = 128;      // four-mode transitions
    std::size_t episodes = 500;  // maze episodes
    env::MazeDatasetConfig maze{};
};

// The agent objective also accepts "bc" and "weighted_bc", which route to
// behavioral cloning with the bc section.
struct AgentSection {
    std::string objective = "bst";
    agent::AgentConfig config{};
};

struct AnalysisSection {
    int samples_per_state = 10;
    int grid_resolution = 101;
    std::size_t deviation_samples = 5000;
    std::size_t max_states = 5000;
};

// variable: lambda | mu | num_critics | cdq
struct AblationArm {
    std::string name;
    int num_critics = 2;
    agent::TargetMode target_mode = agent::TargetMode::ClippedDoubleQ;
};

struct AblationSection {
    std::string variable = "lambda";
    std::optional<std::vector<double>> values;  // absent: variable-specific defaults
    int seeds = 3;
    std::vector<AblationArm> arms;  // cdq sweeps; empty: the three default arms
    bool retrain_morse = true;
};

struct RunConfig {
    EnvSection env;
    DatasetSection dataset;
    morse::MorseTrainConfig morse{};
    AgentSection agent;
    agent::BcConfig bc{};
    AnalysisSection analysis;
    AblationSection ablation;
};

// Unknown keys, wrong types and out-of-range values raise ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

env::EnvSpec make_env(const EnvSection& section);
env::ReplayDataset make_dataset(const env::EnvSpec& spec, const DatasetSection& section, std::uint64_t seed);

// Per-phase seeds derived from the master seed by tag.
struct PhaseSeeds {
    std::uint64_t master = 0;
    std::uint64_t dataset = 0;
    std::uint64_t morse = 0;
    std::uint64_t agent = 0;
    std::uint64_t evaluation = 0;
    std::uint64_t analysis = 0;

    static PhaseSeeds from_master(std::uint64_t master);
    nlohmann::json to_json() const;
};

// Git blob object id ("blob <size>\0" + content, SHA-1), lowercase hex.
std::string content_hash(const std::string& bytes);
std::string file_hash(const std::filesystem::path& path);

class RunManifest {
public:
    // Loads <dir>/manifest.json when present so pipeline phases accumulate.
    static RunManifest open(const std::filesystem::path& dir);

    void set_config(const nlohmann::json& config);
    void set_seeds(const PhaseSeeds& seeds);
    void record_phase(const std::string& name, double seconds);
    // Registers an output file relative to the run directory.
    void add_file(const std::string& role, const std::string& relative_path);
    void add_input(const std::string& role, const std::filesystem::path& path);
    void warn(const std::string& message);
    nlohmann::json& extra() { return doc_["results"]; }

    const nlohmann::json& json() const { return doc_; }
    // Fails with StateError when a named file is missing.
    void write() const;

private:
    std::filesystem::path dir_;
    nlohmann::json doc_;
};

// Certainty samples for dataset pairs (D), permuted actions (D_perm) and
// uniform actions (D_uni).
struct CertaintyAnalysis {
    std::vector<double> dataset;
    std::vector<double> permuted;
    std::vector<double> uniform;

    double mean_dataset() const;
    double mean_permuted() const;
    double mean_uniform() const;
    // mean(D) - max(mean(D_perm), mean(D_uni))
    double separation() const;
};

CertaintyAnalysis analyze_morse(const morse::MorseModel& model, const env::ReplayDataset& data, std::uint64_t seed,
                                int samples_per_state = 10, std::size_t max_states = 0);
// Columns population,sample,certainty; then one mean row per population.
void write_certainty_csv(std::ostream& out, const CertaintyAnalysis& analysis);

// Header row "y\x" followed by the x coordinates; each later row starts
// with its y coordinate.
void write_density_csv(std::ostream& out, const Matrix& grid);
double fraction_above(const Matrix& grid, double threshold);

// 8-bit binary graymap (row 0 first, byte = round(v * 255)) plus a side-car
// CSV of the raw values next to it (same stem, ".csv").
void emit_heatmap(const Matrix& values, const std::filesystem::path& path);

// Train a policy according to the agent section. `morse` is needed for the
// bst and weighted_bc objectives.
struct PolicyRun {
    agent::DeterministicPolicy policy;
    std::optional<agent::TrainResult> learner;  // absent for BC
};
PolicyRun train_policy(const RunConfig& config, const env::ReplayDataset& data, const env::EnvSpec& spec,
                       const morse::MorseModel* morse, std::uint64_t seed);

void write_metrics_csv(std::ostream& out, const std::vector<agent::MetricRow>& rows);

struct SweepRow {
    double value = 0.0;
    std::size_t seeds = 0;
    double score_mean = 0.0;
    double score_std = 0.0;
    double success_mean = 0.0;
    double success_std = 0.0;
    double deviation_mean = 0.0;
    double deviation_std = 0.0;
    // Share of the action grid with certainty above 0.5 at the first dataset
    // state (2-D actions only, else NaN).
    double grid_fraction = 0.0;
    std::vector<double> histogram_edges;
    std::vector<double> histogram;  // counts averaged over seeds
};

// Sweeps lambda, mu or num_critics. Each value retrains Morse (lambda, or
// always when retrain_morse) and the agent for every seed.
std::vector<SweepRow> ablate_sweep(const RunConfig& base, const env::ReplayDataset& data, const env::EnvSpec& spec,
                                   std::uint64_t seed);
std::vector<SweepRow> ablate_lambda(const RunConfig& base, const env::ReplayDataset& data,
                                    const env::EnvSpec& spec, std::uint64_t seed);
void write_sweep_csv(std::ostream& out, const std::string& variable, const std::vector<SweepRow>& rows);
void write_histogram_csv(std::ostream& out, const std::string& variable, const std::vector<SweepRow>& rows);

struct ArmResult {
    AblationArm arm;
    std::size_t seeds = 0;
    std::vector<double> scores;
    double score_mean = 0.0;
    double score_std = 0.0;
    double percent_change = 0.0;  // vs the (2 critics, cdq) baseline
};

// The baseline arm (2 critics, clipped double Q) must be present.
std::vector<ArmResult> ablate_cdq(const RunConfig& base, const env::ReplayDataset& data, const env::EnvSpec& spec,
                                  const morse::MorseModel* morse, std::uint64_t seed);
void write_cdq_csv(std::ostream& out, const std::vector<ArmResult>& arms);

// Worker cap from BST_THREADS (default 1).
int worker_threads();

// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, char** argv);

}  // namespace bst::harness
