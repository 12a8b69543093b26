#include "bst/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "bst/binary_io.hpp"
#include "bst/errors.hpp"

namespace bst::agent {

namespace {

constexpr std::uint32_t kPolicyVersion = 1;
constexpr std::uint32_t kAgentVersion = 1;

Matrix stack(const Matrix& top, const Matrix& bottom) {
    Matrix x(top.rows() + bottom.rows(), top.cols());
    x.topRows(top.rows()) = top;
    x.bottomRows(bottom.rows()) = bottom;
    return x;
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_normalizer(std::ostream& out, const env::StateNormalizer& n) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(n.mean.size()));
    for (Eigen::Index i = 0; i < n.mean.size(); ++i) {
        io::write_le<double>(out, n.mean(i));
        io::write_le<double>(out, n.std(i));
    }
}

env::StateNormalizer read_normalizer(io::Reader& reader) {
    const auto dim = reader.read<std::uint32_t>("normalizer dim");
    if (dim == 0 || dim > 65536) {
        throw FormatError("implausible normalizer dim", reader.offset());
    }
    env::StateNormalizer n;
    n.mean.resize(dim);
    n.std.resize(dim);
    for (std::uint32_t i = 0; i < dim; ++i) {
        n.mean(i) = reader.read<double>("normalizer");
        n.std(i) = reader.read<double>("normalizer");
    }
    return n;
}

}  // namespace

std::string to_string(TargetMode mode) {
    return mode == TargetMode::ClippedDoubleQ ? "cdq" : "independent";
}

std::string to_string(PolicyObjective objective) {
    switch (objective) {
        case PolicyObjective::Bst:
            return "bst";
        case PolicyObjective::Td3Bc:
            return "td3bc";
        case PolicyObjective::Td3:
            return "td3";
    }
    return "unknown";
}

TargetMode target_mode_from_string(const std::string& s) {
    if (s == "cdq") return TargetMode::ClippedDoubleQ;
    if (s == "independent") return TargetMode::IndependentMean;
    throw ConfigError("unknown target mode \"" + s + "\" (expected cdq or independent)");
}

PolicyObjective objective_from_string(const std::string& s) {
    if (s == "bst") return PolicyObjective::Bst;
    if (s == "td3bc") return PolicyObjective::Td3Bc;
    if (s == "td3") return PolicyObjective::Td3;
    throw ConfigError("unknown policy objective \"" + s + "\" (expected bst, td3bc or td3)");
}

void AgentConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature mu must be > 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
    if (policy_delay < 1) throw ConfigError("policy delay must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (num_critics < 1) throw ConfigError("at least one critic is required");
    if (target_noise < 0.0 || noise_clip < 0.0) throw ConfigError("target smoothing noise must be non-negative");
    if (!(td3bc_alpha > 0.0)) throw ConfigError("td3bc alpha must be > 0");
    if (eval_interval < 1) throw ConfigError("eval interval must be >= 1");
    for (int h : hidden) {
        if (h < 1) throw ConfigError("hidden widths must be positive");
    }
}

Vector DeterministicPolicy::act(const Vector& state) const { return net.forward_one(normalizer.apply(state)); }

Matrix DeterministicPolicy::act_batch(const Matrix& states) const { return net.forward(normalizer.apply(states)); }

env::PolicyFn DeterministicPolicy::as_fn() const {
    return [policy = *this](const Vector& s) { return policy.act(s); };
}

CriticEnsemble CriticEnsemble::create(int input_width, int count, const std::vector<int>& hidden, TargetMode mode,
                                      Rng& rng) {
    if (count < 1) {
        throw ConfigError("at least one critic is required");
    }
    CriticEnsemble e;
    e.mode = mode;
    for (int i = 0; i < count; ++i) {
        e.online.push_back(nn::DenseNet::mlp(input_width, hidden, 1, false, rng));
        e.target.push_back(e.online.back());
    }
    return e;
}

void CriticEnsemble::validate() const {
    if (online.empty() || online.size() != target.size()) {
        throw StateError("critic ensemble needs matching, non-empty online and target sets");
    }
    for (std::size_t i = 0; i < online.size(); ++i) {
        if (!online[i].same_architecture(target[i])) {
            throw StateError("critic " + std::to_string(i) + ": online and target architectures differ");
        }
    }
}

Agent make_agent(int state_dim, int action_dim, const AgentConfig& config, env::StateNormalizer normalizer,
                 Rng& rng) {
    config.validate();
    Agent agent;
    agent.policy.net = nn::DenseNet::mlp(state_dim, config.hidden, action_dim, true, rng);
    agent.policy.normalizer = std::move(normalizer);
    agent.target_policy = agent.policy.net;
    agent.critics = CriticEnsemble::create(state_dim + action_dim, config.num_critics, config.hidden,
                                           config.target_mode, rng);
    agent.actor_opt = nn::OptimizerState::for_net(agent.policy.net, config.actor_adam);
    for (const auto& c : agent.critics.online) {
        agent.critic_opt.push_back(nn::OptimizerState::for_net(c, config.critic_adam));
    }
    return agent;
}

Matrix td_targets(const Agent& agent, const env::Batch& batch, const AgentConfig& config, Rng& rng) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    if (n == 0) {
        throw ArgumentError("critic update on an empty batch");
    }
    const Matrix next_states = agent.policy.normalizer.apply(batch.next_states);
    Matrix next_actions = agent.target_policy.forward(next_states);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (Eigen::Index c = 0; c < next_actions.cols(); ++c) {
        for (Eigen::Index r = 0; r < next_actions.rows(); ++r) {
            const double eps = std::clamp(config.target_noise * noise(rng), -config.noise_clip, config.noise_clip);
            next_actions(r, c) = std::clamp(next_actions(r, c) + eps, -1.0, 1.0);
        }
    }
    const Matrix x = stack(next_states, next_actions);
    const auto count = static_cast<Eigen::Index>(agent.critics.size());
    Matrix bootstrap(count, n);
    for (Eigen::Index j = 0; j < count; ++j) {
        bootstrap.row(j) = agent.critics.target[static_cast<std::size_t>(j)].forward(x).row(0);
    }
    const Vector continuation = config.gamma * (1.0 - batch.dones.array());
    Matrix y(count, n);
    if (agent.critics.mode == TargetMode::ClippedDoubleQ) {
        const Eigen::RowVectorXd q_min = bootstrap.colwise().minCoeff();
        const Eigen::RowVectorXd row = batch.rewards.transpose().array() + continuation.transpose().array() * q_min.array();
        y = row.replicate(count, 1);
    } else {
        for (Eigen::Index j = 0; j < count; ++j) {
            y.row(j) = batch.rewards.transpose().array() + continuation.transpose().array() * bootstrap.row(j).array();
        }
    }
    if (!y.allFinite()) {
        throw NumericError("non-finite TD target");
    }
    return y;
}

Vector critic_update(Agent& agent, const env::Batch& batch, const AgentConfig& config, Rng& rng) {
    const Matrix y = td_targets(agent, batch, config, rng);
    const auto n = static_cast<double>(batch.size());
    const Matrix x = stack(agent.policy.normalizer.apply(batch.states), batch.actions);
    Vector losses(static_cast<Eigen::Index>(agent.critics.size()));
    for (std::size_t j = 0; j < agent.critics.size(); ++j) {
        auto& critic = agent.critics.online[j];
        nn::ForwardTrace trace;
        const Matrix q = critic.forward(x, trace);
        const Eigen::RowVectorXd diff = q.row(0) - y.row(static_cast<Eigen::Index>(j));
        losses(static_cast<Eigen::Index>(j)) = diff.squaredNorm() / n;
        const Matrix seed = (2.0 / n) * diff;
        const auto grad = nn::backward(critic, trace, seed);
        nn::optimizer_step(critic, grad.tape, agent.critic_opt[j]);
    }
    return losses;
}

double disadvantage_weight(double uncertainty, double temperature) {
    return std::expm1(uncertainty / temperature);
}

double q_scale(const Vector& q) { return std::max(q.cwiseAbs().mean(), 1e-6); }

Vector policy_q_values(const Agent& agent, const Matrix& normalized_states, const Matrix& actions) {
    return agent.critics.online.front().forward(stack(normalized_states, actions)).row(0).transpose();
}

PolicyGradient policy_gradient(const Agent& agent, const morse::MorseModel* morse, const env::Batch& batch,
                               const AgentConfig& config) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    if (n == 0) {
        throw ArgumentError("policy update on an empty batch");
    }
    if (config.objective == PolicyObjective::Bst && morse == nullptr) {
        throw ConfigError("the BST objective needs a trained Morse model");
    }
    const int k = agent.action_dim();
    const Matrix states = agent.policy.normalizer.apply(batch.states);
    nn::ForwardTrace policy_trace;
    const Matrix policy_actions = agent.policy.net.forward(states, policy_trace);
    const Matrix x = stack(states, policy_actions);

    // Q-ascent term from critic 0, normalized by the detached Z_Q.
    const auto& critic = agent.critics.online.front();
    nn::ForwardTrace critic_trace;
    const Vector q = critic.forward(x, critic_trace).row(0).transpose();

    PolicyGradient out;
    auto& diag = out.diagnostics;
    diag.q_scale_clamped = q.cwiseAbs().mean() < 1e-6;
    diag.q_scale = q_scale(q);
    const double q_coef = config.objective == PolicyObjective::Td3Bc ? config.td3bc_alpha : 1.0;
    diag.q_term = q.mean() / diag.q_scale;

    const Matrix q_seed = Matrix::Constant(1, n, -q_coef / (static_cast<double>(n) * diag.q_scale));
    Matrix action_grad = nn::backward(critic, critic_trace, q_seed).input_gradient.bottomRows(k);

    // Behavioral cloning term with a per-sample detached weight.
    Vector weight(n);
    Vector uncertainty = Vector::Zero(n);
    switch (config.objective) {
        case PolicyObjective::Bst:
            uncertainty = morse->uncertainty_batch(batch.states, policy_actions).cwiseMax(0.0).cwiseMin(1.0);
            weight = uncertainty.unaryExpr([&](double c) { return disadvantage_weight(c, config.temperature); });
            break;
        case PolicyObjective::Td3Bc:
            weight.setOnes();
            break;
        case PolicyObjective::Td3:
            weight.setZero();
            break;
    }
    const Matrix deviation = policy_actions - batch.actions;
    const Vector squared = deviation.colwise().squaredNorm().transpose();
    diag.bc_term = weight.cwiseProduct(squared).mean();
    action_grad += (2.0 / static_cast<double>(n)) * (deviation.array().rowwise() * weight.transpose().array()).matrix();

    diag.mean_uncertainty = uncertainty.mean();
    diag.min_uncertainty = uncertainty.minCoeff();
    diag.max_uncertainty = uncertainty.maxCoeff();
    diag.mean_weight = weight.mean();
    diag.min_weight = weight.minCoeff();
    diag.max_weight = weight.maxCoeff();
    out.loss = -q_coef * diag.q_term + diag.bc_term;
    out.tape = nn::backward(agent.policy.net, policy_trace, action_grad).tape;
    return out;
}

PolicyGradient bst_policy_update(Agent& agent, const morse::MorseModel* morse, const env::Batch& batch,
                                 const AgentConfig& config) {
    auto grad = policy_gradient(agent, morse, batch, config);
    nn::optimizer_step(agent.policy.net, grad.tape, agent.actor_opt);
    return grad;
}

DeviationStats deviation_stats(const env::PolicyFn& policy, const env::ReplayDataset& data,
                               std::size_t max_samples, std::uint64_t seed, int bins) {
    if (data.empty()) {
        throw ArgumentError("deviation statistics on an empty dataset");
    }
    if (bins < 1) {
        throw ArgumentError("histogram needs at least one bin");
    }
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (max_samples > 0 && idx.size() > max_samples) {
        Rng rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(max_samples);
        std::sort(idx.begin(), idx.end());
    }
    const auto states = data.states();
    const auto actions = data.actions();
    std::vector<double> dev;
    dev.reserve(idx.size());
    for (auto i : idx) {
        const auto c = static_cast<Eigen::Index>(i);
        dev.push_back((policy(states.col(c)) - actions.col(c)).norm());
    }
    DeviationStats stats;
    stats.samples = dev.size();
    stats.mean = mean(dev);
    stats.max = *std::max_element(dev.begin(), dev.end());
    std::vector<double> sorted = dev;
    std::sort(sorted.begin(), sorted.end());
    stats.median = sorted.size() % 2 == 1 ? sorted[sorted.size() / 2]
                                          : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    const double upper = 2.0 * std::sqrt(static_cast<double>(data.action_dim()));
    stats.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b) {
        stats.bin_edges[static_cast<std::size_t>(b)] = upper * b / bins;
    }
    stats.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double d : dev) {
        auto b = static_cast<std::size_t>(d / upper * bins);
        stats.counts[std::min(b, static_cast<std::size_t>(bins - 1))] += 1;
    }
    return stats;
}

EvalResult evaluate(const env::PolicyFn& policy, const env::EnvSpec& spec, std::size_t n_episodes,
                    std::uint64_t seed, const env::ReplayDataset* data, std::size_t deviation_samples) {
    if (n_episodes < 1) {
        throw ArgumentError("evaluation needs at least one episode");
    }
    spec.validate();
    Rng rng(seed);
    const double best_reward = *std::max_element(spec.mode_rewards.begin(), spec.mode_rewards.end());
    std::vector<double> returns;
    std::size_t successes = 0;
    for (std::size_t e = 0; e < n_episodes; ++e) {
        Vector s = env::reset(spec, rng);
        double ret = 0.0;
        bool success = false;
        for (int t = 0; t < spec.horizon; ++t) {
            Vector a = policy(s).cwiseMax(-1.0).cwiseMin(1.0);
            const auto res = env::step(spec, s, a);
            ret += res.reward;
            s = res.next_state;
            if (spec.kind == env::EnvKind::FourModeBandit) {
                success = res.reward >= best_reward;
            } else {
                success = res.done;
            }
            if (res.done) {
                break;
            }
        }
        returns.push_back(ret);
        successes += success ? 1 : 0;
    }
    EvalResult result;
    result.episodes = n_episodes;
    result.mean_return = mean(returns);
    double var = 0.0;
    for (double r : returns) {
        var += (r - result.mean_return) * (r - result.mean_return);
    }
    result.std_return = std::sqrt(var / static_cast<double>(returns.size()));
    result.success_rate = static_cast<double>(successes) / static_cast<double>(n_episodes);
    if (data != nullptr) {
        result.deviation = deviation_stats(policy, *data, deviation_samples, derive_seed(seed, "deviation"));
    }
    return result;
}

TrainResult train_td3bst(const env::ReplayDataset& data, const env::EnvSpec& spec, const AgentConfig& config,
                         const morse::MorseModel* morse, std::uint64_t seed) {
    config.validate();
    spec.validate();
    if (data.empty()) {
        throw ConfigError("training dataset is empty");
    }
    if (data.state_dim() != spec.state_dim || data.action_dim() != spec.action_dim) {
        throw ConfigError("dataset dims (" + std::to_string(data.state_dim()) + ", " +
                          std::to_string(data.action_dim()) + ") do not match the environment (" +
                          std::to_string(spec.state_dim) + ", " + std::to_string(spec.action_dim) + ")");
    }
    if (config.objective == PolicyObjective::Bst) {
        if (morse == nullptr) {
            throw ConfigError("the BST objective needs a trained Morse model");
        }
        if (morse->state_dim() != spec.state_dim || morse->action_dim() != spec.action_dim) {
            throw ConfigError("Morse model dims do not match the environment");
        }
    }
    Rng rng(seed);
    auto normalizer = config.normalize_states ? env::StateNormalizer::fit(data)
                                              : env::StateNormalizer::identity(data.state_dim());
    TrainResult result;
    result.agent = make_agent(data.state_dim(), data.action_dim(), config, std::move(normalizer), rng);
    auto& audit = result.audit;
    audit.weight_bound = disadvantage_weight(1.0, config.temperature);
    audit.min_weight = audit.weight_bound;
    const auto eval_seed = derive_seed(seed, "eval");

    std::vector<double> critic_losses;
    std::vector<double> policy_losses;
    std::vector<double> weights;
    std::vector<double> uncertainties;
    std::vector<double> scales;
    for (std::size_t t = 1; t <= config.steps; ++t) {
        const auto batch = env::sample_batch(data, config.batch_size, rng);
        critic_losses.push_back(critic_update(result.agent, batch, config, rng).mean());
        result.counters.critic_updates += 1;
        if (config.record_events) result.counters.events.push_back('C');

        if (t % static_cast<std::size_t>(config.policy_delay) == 0) {
            const auto pg = bst_policy_update(result.agent, morse, batch, config);
            result.counters.policy_updates += 1;
            if (config.record_events) result.counters.events.push_back('P');
            const auto& d = pg.diagnostics;
            policy_losses.push_back(pg.loss);
            weights.push_back(d.mean_weight);
            uncertainties.push_back(d.mean_uncertainty);
            scales.push_back(d.q_scale);
            audit.updates += 1;
            audit.samples += batch.size();
            audit.min_uncertainty = std::min(audit.min_uncertainty, d.min_uncertainty);
            audit.max_uncertainty = std::max(audit.max_uncertainty, d.max_uncertainty);
            audit.min_weight = std::min(audit.min_weight, d.min_weight);
            audit.max_weight = std::max(audit.max_weight, d.max_weight);
            if (d.min_uncertainty < 0.0 || d.max_uncertainty > 1.0 || d.min_weight < 0.0 ||
                (config.objective == PolicyObjective::Bst && d.max_weight > audit.weight_bound)) {
                audit.violations += 1;
            }
            if (d.q_scale_clamped) {
                audit.q_scale_clamps += 1;
                if (audit.q_scale_clamps == 1) {
                    result.warnings.push_back("Z_Q clamped to 1e-6 at step " + std::to_string(t));
                }
            }
            for (std::size_t j = 0; j < result.agent.critics.size(); ++j) {
                nn::soft_update(result.agent.critics.target[j], result.agent.critics.online[j], config.rho);
            }
            nn::soft_update(result.agent.target_policy, result.agent.policy.net, config.rho);
            result.counters.soft_updates += 1;
            if (config.record_events) result.counters.events.push_back('S');
        }

        if (t % config.eval_interval == 0 || t == config.steps) {
            const bool final_eval = t == config.steps;
            const auto eval = evaluate(result.agent.policy.as_fn(), spec,
                                       final_eval ? config.final_eval_episodes : config.eval_episodes, eval_seed);
            MetricRow row;
            row.step = t;
            row.critic_loss = mean(critic_losses);
            row.policy_loss = mean(policy_losses);
            row.mean_weight = mean(weights);
            row.mean_uncertainty = mean(uncertainties);
            row.q_scale = mean(scales);
            row.eval_return = eval.mean_return;
            row.eval_success = eval.success_rate;
            result.metrics.push_back(row);
            critic_losses.clear();
            policy_losses.clear();
            weights.clear();
            uncertainties.clear();
            scales.clear();
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Behavioral cloning

namespace {

// For every sample: is its dataset action in the same Morse mode as the
// anchor, the action of a same-state sample closest to pi(s)?
Vector mode_gate(const morse::MorseModel& morse, const env::Batch& batch, const Matrix& policy_actions,
                 double threshold, int segment_points) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    std::map<std::vector<double>, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<double> key(batch.states.col(i).data(), batch.states.col(i).data() + batch.states.rows());
        groups[key].push_back(i);
    }
    Matrix anchors(batch.actions.rows(), n);
    for (const auto& [key, members] : groups) {
        for (auto i : members) {
            Eigen::Index best = members.front();
            double best_d = std::numeric_limits<double>::infinity();
            for (auto j : members) {
                const double d = (batch.actions.col(j) - policy_actions.col(i)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            anchors.col(i) = batch.actions.col(best);
        }
    }
    const Eigen::Index p = segment_points;
    Matrix probe_states(batch.states.rows(), n * p);
    Matrix probe_actions(batch.actions.rows(), n * p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index q = 0; q < p; ++q) {
            const double t = static_cast<double>(q + 1) / static_cast<double>(p + 1);
            probe_states.col(i * p + q) = batch.states.col(i);
            probe_actions.col(i * p + q) = anchors.col(i) + t * (batch.actions.col(i) - anchors.col(i));
        }
    }
    const Vector certainty = morse.certainty_batch(probe_states, probe_actions);
    Vector gate(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        gate(i) = certainty.segment(i * p, p).minCoeff() >= threshold ? 1.0 : 0.0;
    }
    return gate;
}

}  // namespace

DeterministicPolicy train_bc(const env::ReplayDataset& data, const BcConfig& config, bool weighted,
                             const morse::MorseModel* morse, std::uint64_t seed) {
    if (data.empty()) {
        throw ArgumentError("behavioral cloning on an empty dataset");
    }
    if (weighted && morse == nullptr) {
        throw ConfigError("weighted behavioral cloning needs a trained Morse model");
    }
    if (weighted && (morse->state_dim() != data.state_dim() || morse->action_dim() != data.action_dim())) {
        throw ConfigError("Morse model dims do not match the dataset");
    }
    if (config.batch_size < 1 || config.segment_points < 1 || !(config.temperature > 0.0)) {
        throw ConfigError("invalid behavioral cloning config");
    }
    Rng rng(seed);
    DeterministicPolicy policy;
    policy.normalizer = config.normalize_states ? env::StateNormalizer::fit(data)
                                                : env::StateNormalizer::identity(data.state_dim());
    policy.net = nn::DenseNet::mlp(data.state_dim(), config.hidden, data.action_dim(), true, rng);
    auto opt = nn::OptimizerState::for_net(policy.net, config.adam);
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto batch = env::sample_batch(data, config.batch_size, rng);
        const auto n = static_cast<double>(batch.size());
        nn::ForwardTrace trace;
        const Matrix actions = policy.net.forward(policy.normalizer.apply(batch.states), trace);
        const Matrix deviation = actions - batch.actions;
        Vector weight = Vector::Ones(deviation.cols());
        if (weighted) {
            const Vector c = morse->uncertainty_batch(batch.states, actions).cwiseMax(0.0).cwiseMin(1.0);
            const Vector gate = mode_gate(*morse, batch, actions, config.mode_threshold, config.segment_points);
            for (Eigen::Index i = 0; i < weight.size(); ++i) {
                weight(i) = disadvantage_weight(c(i), config.temperature) * gate(i);
            }
        }
        const Matrix grad = (2.0 / n) * (deviation.array().rowwise() * weight.transpose().array()).matrix();
        const auto bp = nn::backward(policy.net, trace, grad);
        nn::optimizer_step(policy.net, bp.tape, opt);
    }
    return policy;
}

// ---------------------------------------------------------------------------
// Persistence

void save_policy(std::ostream& out, const DeterministicPolicy& policy) {
    out.write("BSTP", 4);
    io::write_le<std::uint32_t>(out, kPolicyVersion);
    write_normalizer(out, policy.normalizer);
    nn::save_checkpoint(out, policy.net);
}

DeterministicPolicy load_policy(std::istream& in) {
    io::Reader reader(in);
    reader.expect_magic("BSTP");
    const auto version_offset = reader.offset();
    if (reader.read<std::uint32_t>("version") != kPolicyVersion) {
        throw FormatError("unsupported policy record version", version_offset);
    }
    DeterministicPolicy p;
    p.normalizer = read_normalizer(reader);
    p.net = nn::load_checkpoint(in);
    if (p.net.input_width() != p.normalizer.mean.size()) {
        throw FormatError("policy input width does not match its normalizer", reader.offset());
    }
    return p;
}

void save_policy(const std::filesystem::path& path, const DeterministicPolicy& policy) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    save_policy(out, policy);
}

DeterministicPolicy load_policy(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open policy " + path.string());
    return load_policy(in);
}

void save_agent(std::ostream& out, const Agent& agent) {
    agent.critics.validate();
    out.write("BSTA", 4);
    io::write_le<std::uint32_t>(out, kAgentVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(agent.critics.size()));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(agent.critics.mode));
    save_policy(out, agent.policy);
    nn::save_checkpoint(out, agent.target_policy);
    for (const auto& c : agent.critics.online) nn::save_checkpoint(out, c);
    for (const auto& c : agent.critics.target) nn::save_checkpoint(out, c);
    nn::save_optimizer(out, agent.actor_opt);
    for (const auto& o : agent.critic_opt) nn::save_optimizer(out, o);
}

Agent load_agent(std::istream& in) {
    io::Reader reader(in);
    reader.expect_magic("BSTA");
    const auto version_offset = reader.offset();
    if (reader.read<std::uint32_t>("version") != kAgentVersion) {
        throw FormatError("unsupported agent record version", version_offset);
    }
    const auto count = reader.read<std::uint32_t>("critic count");
    if (count == 0 || count > 1024) {
        throw FormatError("implausible critic count", reader.offset());
    }
    const auto mode = reader.read<std::uint8_t>("target mode");
    if (mode > 1) {
        throw FormatError("unknown target mode", reader.offset());
    }
    Agent agent;
    agent.critics.mode = static_cast<TargetMode>(mode);
    agent.policy = load_policy(in);
    agent.target_policy = nn::load_checkpoint(in);
    for (std::uint32_t i = 0; i < count; ++i) agent.critics.online.push_back(nn::load_checkpoint(in));
    for (std::uint32_t i = 0; i < count; ++i) agent.critics.target.push_back(nn::load_checkpoint(in));
    agent.actor_opt = nn::load_optimizer(in, agent.policy.net);
    for (std::uint32_t i = 0; i < count; ++i) {
        agent.critic_opt.push_back(nn::load_optimizer(in, agent.critics.online[i]));
    }
    agent.critics.validate();
    return agent;
}

void save_agent(const std::filesystem::path& path, const Agent& agent) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    save_agent(out, agent);
}

Agent load_agent(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open agent checkpoint " + path.string());
    return load_agent(in);
}

}  // namespace bst::agent
