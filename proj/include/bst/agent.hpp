#pragma once

// TD3 learner with the behavioral-supervisor policy objective, plus the
// behavioral cloning, fixed-alpha TD3-BC and unconstrained TD3 baselines.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bst/envdata.hpp"
#include "bst/morse.hpp"
#include "bst/nn.hpp"

namespace bst::agent {

using nn::Matrix;
using nn::Vector;

enum class TargetMode : std::uint8_t { ClippedDoubleQ = 0, IndependentMean = 1 };

enum class PolicyObjective : std::uint8_t {
    Bst = 0,    // Q / Z_Q - (exp(C / mu) - 1) ||a_pi - a||^2
    Td3Bc = 1,  // alpha Q / Z_Q - ||a_pi - a||^2
    Td3 = 2,    // Q / Z_Q
};

std::string to_string(TargetMode mode);
std::string to_string(PolicyObjective objective);
TargetMode target_mode_from_string(const std::string& s);
PolicyObjective objective_from_string(const std::string& s);

struct AgentConfig {
    PolicyObjective objective = PolicyObjective::Bst;
    double temperature = 0.5;  // mu
    double td3bc_alpha = 2.5;
    double gamma = 0.99;
    double rho = 0.005;
    int policy_delay = 2;
    std::size_t batch_size = 256;
    std::size_t steps = 200000;
    double target_noise = 0.2;
    double noise_clip = 0.5;
    int num_critics = 2;
    TargetMode target_mode = TargetMode::ClippedDoubleQ;
    std::vector<int> hidden{256, 256};
    nn::AdamConfig actor_adam{};
    nn::AdamConfig critic_adam{};
    std::size_t eval_interval = 5000;
    std::size_t eval_episodes = 20;
    std::size_t final_eval_episodes = 100;
    bool normalize_states = true;
    // Keep the per-step update event sequence ('C', 'P', 'S') for audits.
    bool record_events = false;

    void validate() const;
};

// Deterministic tanh-squashed policy with its input normalization.
struct DeterministicPolicy {
    nn::DenseNet net;
    env::StateNormalizer normalizer;

    Vector act(const Vector& state) const;
    Matrix act_batch(const Matrix& states) const;
    env::PolicyFn as_fn() const;
};

struct CriticEnsemble {
    std::vector<nn::DenseNet> online;
    std::vector<nn::DenseNet> target;
    TargetMode mode = TargetMode::ClippedDoubleQ;

    static CriticEnsemble create(int input_width, int count, const std::vector<int>& hidden, TargetMode mode,
                                 Rng& rng);
    std::size_t size() const { return online.size(); }
    void validate() const;
};

struct Agent {
    DeterministicPolicy policy;
    nn::DenseNet target_policy;
    CriticEnsemble critics;
    nn::OptimizerState actor_opt;
    std::vector<nn::OptimizerState> critic_opt;

    int state_dim() const { return policy.net.input_width(); }
    int action_dim() const { return policy.net.output_width(); }
};

Agent make_agent(int state_dim, int action_dim, const AgentConfig& config, env::StateNormalizer normalizer,
                 Rng& rng);

// Bellman targets, one row per critic (rows coincide under clipped double Q).
// Terminal transitions get y = r.
Matrix td_targets(const Agent& agent, const env::Batch& batch, const AgentConfig& config, Rng& rng);

// One optimizer step for every online critic; returns per-critic mean squared
// TD error measured before the step.
Vector critic_update(Agent& agent, const env::Batch& batch, const AgentConfig& config, Rng& rng);

struct BstDiagnostics {
    double mean_uncertainty = 0.0;
    double min_uncertainty = 0.0;
    double max_uncertainty = 0.0;
    double mean_weight = 0.0;
    double min_weight = 0.0;
    double max_weight = 0.0;
    double q_scale = 0.0;  // Z_Q
    double q_term = 0.0;   // mean Q / Z_Q
    double bc_term = 0.0;  // mean weighted squared deviation
    bool q_scale_clamped = false;
};

struct PolicyGradient {
    double loss = 0.0;
    BstDiagnostics diagnostics;
    nn::GradientTape tape;
};

// Disadvantage weight exp(C / mu) - 1.
double disadvantage_weight(double uncertainty, double temperature);
// Z_Q = mean |Q|, clamped below at 1e-6.
double q_scale(const Vector& q);

// Policy loss and gradient without touching the parameters. `morse` is
// required for the BST objective and ignored otherwise. The weight is a
// detached coefficient: no gradient flows through the Morse network.
PolicyGradient policy_gradient(const Agent& agent, const morse::MorseModel* morse, const env::Batch& batch,
                               const AgentConfig& config);

PolicyGradient bst_policy_update(Agent& agent, const morse::MorseModel* morse, const env::Batch& batch,
                                 const AgentConfig& config);

// Q estimate used by the policy objective: online critic 0.
Vector policy_q_values(const Agent& agent, const Matrix& normalized_states, const Matrix& actions);

struct DeviationStats {
    double mean = 0.0;
    double median = 0.0;
    double max = 0.0;
    std::vector<double> bin_edges;
    std::vector<std::size_t> counts;
    std::size_t samples = 0;
};

// ||pi(s) - a|| over (a subsample of) dataset transitions.
DeviationStats deviation_stats(const env::PolicyFn& policy, const env::ReplayDataset& data,
                               std::size_t max_samples, std::uint64_t seed, int bins = 20);

struct EvalResult {
    double mean_return = 0.0;
    double std_return = 0.0;
    double success_rate = 0.0;
    std::size_t episodes = 0;
    std::optional<DeviationStats> deviation;
};

// Deterministic rollouts; start states are drawn from `seed`.
EvalResult evaluate(const env::PolicyFn& policy, const env::EnvSpec& spec, std::size_t n_episodes,
                    std::uint64_t seed, const env::ReplayDataset* data = nullptr,
                    std::size_t deviation_samples = 5000);

struct MetricRow {
    std::size_t step = 0;
    double critic_loss = 0.0;
    double policy_loss = 0.0;
    double mean_weight = 0.0;
    double mean_uncertainty = 0.0;
    double q_scale = 0.0;
    double eval_return = 0.0;
    double eval_success = 0.0;
};

struct UpdateCounters {
    std::size_t critic_updates = 0;
    std::size_t policy_updates = 0;
    std::size_t soft_updates = 0;
    std::vector<char> events;
};

struct CoefficientAudit {
    std::size_t updates = 0;
    std::size_t samples = 0;
    std::size_t violations = 0;
    double min_uncertainty = 1.0;
    double max_uncertainty = 0.0;
    double min_weight = 0.0;
    double max_weight = 0.0;
    double weight_bound = 0.0;  // exp(1 / mu) - 1
    std::size_t q_scale_clamps = 0;
};

struct TrainResult {
    Agent agent;
    std::vector<MetricRow> metrics;
    UpdateCounters counters;
    CoefficientAudit audit;
    std::vector<std::string> warnings;
};

// `morse` may be null unless config.objective is Bst.
TrainResult train_td3bst(const env::ReplayDataset& data, const env::EnvSpec& spec, const AgentConfig& config,
                         const morse::MorseModel* morse, std::uint64_t seed);

struct BcConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 128;
    std::vector<int> hidden{64, 64};
    nn::AdamConfig adam{1e-3};
    double temperature = 0.5;
    // Certainty threshold along the segment joining two actions of the same
    // state for them to count as one mode.
    double mode_threshold = 0.5;
    int segment_points = 7;
    bool normalize_states = true;
};

// weighted = false: minimize mean ||pi(s) - a||^2.
// weighted = true: each sample's squared error is scaled by the detached
// coefficient exp(C / mu) - 1 with C = 1 - M(s, pi(s)), and restricted to
// dataset actions in the same Morse mode as the sampled action closest to
// pi(s) for that state.
DeterministicPolicy train_bc(const env::ReplayDataset& data, const BcConfig& config, bool weighted,
                             const morse::MorseModel* morse, std::uint64_t seed);

// "BSTP" policy record: magic, u32 version, u32 state dim, f64 mean/std per
// state dim, then the policy network checkpoint.
void save_policy(std::ostream& out, const DeterministicPolicy& policy);
DeterministicPolicy load_policy(std::istream& in);
void save_policy(const std::filesystem::path& path, const DeterministicPolicy& policy);
DeterministicPolicy load_policy(const std::filesystem::path& path);

// "BSTA" full learner record: magic, u32 version, u32 critic count, u8 target
// mode, then the policy record, target policy, online critics, target
// critics (BSTW each) and optimizer states (BSTO: actor, then critics).
void save_agent(std::ostream& out, const Agent& agent);
Agent load_agent(std::istream& in);
void save_agent(const std::filesystem::path& path, const Agent& agent);
Agent load_agent(const std::filesystem::path& path);

}  // namespace bst::agent
