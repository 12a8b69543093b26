#include <fstream>
#include <set>

#include "bst/errors.hpp"
#include "bst/harness.hpp"

namespace bst::harness {

namespace {

using nlohmann::json;

// Reads keys from one JSON object and rejects whatever was not consumed.
class Section {
public:
    // Keeps its own copy: callers often pass a temporary.
    Section(const json& doc, std::string name) : name_(std::move(name)) {
        if (doc.is_null()) {
            return;
        }
        if (!doc.is_object()) {
            throw ConfigError("\"" + name_ + "\" must be a JSON object");
        }
        doc_ = doc;
        present_ = true;
    }

    template <typename T>
    void read(const char* key, T& target) {
        const json* v = find(key);
        if (v == nullptr) return;
        try {
            target = v->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path(key) + " has the wrong type");
        }
    }

    template <typename T>
    void read(const char* key, std::optional<T>& target) {
        const json* v = find(key);
        if (v == nullptr || v->is_null()) return;
        try {
            target = v->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path(key) + " has the wrong type");
        }
    }

    const json* child(const char* key) { return find(key); }

    void finish() const {
        if (!present_) return;
        for (const auto& [key, value] : doc_.items()) {
            if (!seen_.contains(key)) {
                throw ConfigError("unknown key " + path(key.c_str()));
            }
        }
    }

    std::string path(const char* key) const { return name_ + "." + key; }

private:
    const json* find(const char* key) {
        seen_.insert(key);
        if (!present_) return nullptr;
        auto it = doc_.find(key);
        return it == doc_.end() ? nullptr : &*it;
    }

    json doc_;
    bool present_ = false;
    std::string name_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

void check_hidden(const std::vector<int>& hidden, const std::string& where) {
    for (int h : hidden) {
        require(h > 0, where + " widths must be positive");
    }
}

void check_adam(const nn::AdamConfig& adam, const std::string& where) {
    require(adam.learning_rate > 0.0, where + " must be > 0");
}

std::string kernel_name(morse::KernelKind kind) { return kind == morse::KernelKind::Rbf ? "rbf" : "rq"; }

}  // namespace

RunConfig parse_config(const json& doc) {
    if (!doc.is_object()) {
        throw ConfigError("configuration must be a JSON object");
    }
    RunConfig cfg;
    Section top(doc, "config");

    {
        const json* node = top.child("env");
        Section s(node ? *node : json(), "env");
        auto& e = cfg.env;
        s.read("kind", e.kind);
        s.read("maze", e.maze);
        s.read("horizon", e.horizon);
        s.read("step_scale", e.step_scale);
        s.read("goal_radius", e.goal_radius);
        s.read("start_jitter", e.start_jitter);
        s.read("mode_std", e.mode_std);
        s.read("mode_rewards", e.mode_rewards);
        s.finish();
        require(e.kind == "four_mode" || e.kind == "point_maze",
                "env.kind must be four_mode or point_maze, got \"" + e.kind + "\"");
        require(!e.mode_rewards || e.mode_rewards->size() == 4, "env.mode_rewards needs four entries");
    }
    {
        const json* node = top.child("dataset");
        Section s(node ? *node : json(), "dataset");
        auto& d = cfg.dataset;
        s.read("size", d.size);
        s.read("episodes", d.episodes);
        s.read("noise", d.maze.noise_scale);
        s.read("start_jitter", d.maze.start_jitter);
        s.read("waypoint_tolerance", d.maze.waypoint_tolerance);
        s.read("max_episode_steps", d.maze.max_episode_steps);
        s.finish();
        require(d.episodes >= 1, "dataset.episodes must be >= 1");
        require(d.maze.noise_scale >= 0.0, "dataset.noise must be >= 0");
    }
    {
        const json* node = top.child("morse");
        Section s(node ? *node : json(), "morse");
        auto& m = cfg.morse;
        std::string kernel = kernel_name(m.kernel.kind);
        std::optional<double> lambda;
        s.read("kernel", kernel);
        s.read("lambda", lambda);
        s.read("kappa", m.kernel.mixture);
        s.read("hidden", m.hidden);
        s.read("steps", m.steps);
        s.read("batch_size", m.batch_size);
        s.read("uniform_per_state", m.uniform_per_state);
        s.read("learning_rate", m.adam.learning_rate);
        s.read("normalize_states", m.normalize_states);
        s.finish();
        if (kernel == "rbf") {
            m.kernel.kind = morse::KernelKind::Rbf;
        } else if (kernel == "rq") {
            m.kernel.kind = morse::KernelKind::RationalQuadratic;
        } else {
            throw ConfigError("morse.kernel must be rbf or rq, got \"" + kernel + "\"");
        }
        if (lambda) {
            m.kernel.scale = *lambda;
            m.scale_from_action_dim = false;
        }
        m.kernel.validate();
        check_hidden(m.hidden, "morse.hidden");
        check_adam(m.adam, "morse.learning_rate");
        require(m.steps >= 1, "morse.steps must be >= 1");
        require(m.batch_size >= 1, "morse.batch_size must be >= 1");
        require(m.uniform_per_state >= 1, "morse.uniform_per_state must be >= 1");
    }
    {
        const json* node = top.child("agent");
        Section s(node ? *node : json(), "agent");
        auto& a = cfg.agent.config;
        std::string mode = agent::to_string(a.target_mode);
        s.read("objective", cfg.agent.objective);
        s.read("mu", a.temperature);
        s.read("alpha", a.td3bc_alpha);
        s.read("gamma", a.gamma);
        s.read("rho", a.rho);
        s.read("policy_delay", a.policy_delay);
        s.read("batch_size", a.batch_size);
        s.read("steps", a.steps);
        s.read("target_noise", a.target_noise);
        s.read("noise_clip", a.noise_clip);
        s.read("num_critics", a.num_critics);
        s.read("target_mode", mode);
        s.read("hidden", a.hidden);
        s.read("actor_learning_rate", a.actor_adam.learning_rate);
        s.read("critic_learning_rate", a.critic_adam.learning_rate);
        s.read("eval_interval", a.eval_interval);
        s.read("eval_episodes", a.eval_episodes);
        s.read("final_eval_episodes", a.final_eval_episodes);
        s.read("normalize_states", a.normalize_states);
        s.finish();
        const auto& obj = cfg.agent.objective;
        if (obj != "bc" && obj != "weighted_bc") {
            a.objective = agent::objective_from_string(obj);
        }
        a.target_mode = agent::target_mode_from_string(mode);
        check_adam(a.actor_adam, "agent.actor_learning_rate");
        check_adam(a.critic_adam, "agent.critic_learning_rate");
        require(a.final_eval_episodes >= 1 && a.eval_episodes >= 1, "evaluation episode counts must be >= 1");
        a.validate();
    }
    {
        const json* node = top.child("bc");
        Section s(node ? *node : json(), "bc");
        auto& b = cfg.bc;
        s.read("steps", b.steps);
        s.read("batch_size", b.batch_size);
        s.read("hidden", b.hidden);
        s.read("learning_rate", b.adam.learning_rate);
        s.read("mu", b.temperature);
        s.read("mode_threshold", b.mode_threshold);
        s.read("segment_points", b.segment_points);
        s.read("normalize_states", b.normalize_states);
        s.finish();
        check_hidden(b.hidden, "bc.hidden");
        check_adam(b.adam, "bc.learning_rate");
        require(b.batch_size >= 1, "bc.batch_size must be >= 1");
        require(b.temperature > 0.0, "bc.mu must be > 0");
        require(b.mode_threshold > 0.0 && b.mode_threshold < 1.0, "bc.mode_threshold must lie in (0, 1)");
        require(b.segment_points >= 1, "bc.segment_points must be >= 1");
    }
    {
        const json* node = top.child("analysis");
        Section s(node ? *node : json(), "analysis");
        auto& a = cfg.analysis;
        s.read("samples_per_state", a.samples_per_state);
        s.read("grid_resolution", a.grid_resolution);
        s.read("deviation_samples", a.deviation_samples);
        s.read("max_states", a.max_states);
        s.finish();
        require(a.samples_per_state >= 1, "analysis.samples_per_state must be >= 1");
        require(a.grid_resolution >= 2, "analysis.grid_resolution must be >= 2");
    }
    {
        const json* node = top.child("ablation");
        Section s(node ? *node : json(), "ablation");
        auto& a = cfg.ablation;
        s.read("variable", a.variable);
        s.read("values", a.values);
        s.read("seeds", a.seeds);
        s.read("retrain_morse", a.retrain_morse);
        if (const json* arms = s.child("arms"); arms != nullptr) {
            if (!arms->is_array()) throw ConfigError("ablation.arms must be an array");
            for (const auto& item : *arms) {
                Section as(item, "ablation.arms[]");
                AblationArm arm;
                std::string mode = agent::to_string(arm.target_mode);
                as.read("name", arm.name);
                as.read("num_critics", arm.num_critics);
                as.read("target_mode", mode);
                as.finish();
                arm.target_mode = agent::target_mode_from_string(mode);
                require(arm.num_critics >= 1, "ablation arm needs at least one critic");
                if (arm.name.empty()) {
                    arm.name = "nc" + std::to_string(arm.num_critics) + "_" + mode;
                }
                a.arms.push_back(arm);
            }
        }
        s.finish();
        require(a.variable == "lambda" || a.variable == "mu" || a.variable == "num_critics" || a.variable == "cdq",
                "ablation.variable must be lambda, mu, num_critics or cdq, got \"" + a.variable + "\"");
        require(a.seeds >= 1, "ablation.seeds must be >= 1");
    }
    top.finish();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
    RunConfig config;
    try {
        config = parse_config(doc);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    // Relative layout paths are relative to the config file.
    auto& maze = config.env.maze;
    if (maze != "umaze" && maze != "large" && std::filesystem::path(maze).is_relative()) {
        maze = (path.parent_path() / maze).lexically_normal().string();
    }
    return config;
}

json to_json(const RunConfig& c) {
    json env = {{"kind", c.env.kind}, {"maze", c.env.maze}};
    if (c.env.horizon) env["horizon"] = *c.env.horizon;
    if (c.env.step_scale) env["step_scale"] = *c.env.step_scale;
    if (c.env.goal_radius) env["goal_radius"] = *c.env.goal_radius;
    if (c.env.start_jitter) env["start_jitter"] = *c.env.start_jitter;
    if (c.env.mode_std) env["mode_std"] = *c.env.mode_std;
    if (c.env.mode_rewards) env["mode_rewards"] = *c.env.mode_rewards;

    const auto& m = c.morse;
    json morse = {{"kernel", kernel_name(m.kernel.kind)},
                  {"kappa", m.kernel.mixture},
                  {"hidden", m.hidden},
                  {"steps", m.steps},
                  {"batch_size", m.batch_size},
                  {"uniform_per_state", m.uniform_per_state},
                  {"learning_rate", m.adam.learning_rate},
                  {"normalize_states", m.normalize_states}};
    morse["lambda"] = m.scale_from_action_dim ? json() : json(m.kernel.scale);

    const auto& a = c.agent.config;
    json arms = json::array();
    for (const auto& arm : c.ablation.arms) {
        arms.push_back({{"name", arm.name},
                        {"num_critics", arm.num_critics},
                        {"target_mode", agent::to_string(arm.target_mode)}});
    }
    return {
        {"env", env},
        {"dataset",
         {{"size", c.dataset.size},
          {"episodes", c.dataset.episodes},
          {"noise", c.dataset.maze.noise_scale},
          {"start_jitter", c.dataset.maze.start_jitter},
          {"waypoint_tolerance", c.dataset.maze.waypoint_tolerance},
          {"max_episode_steps", c.dataset.maze.max_episode_steps}}},
        {"morse", morse},
        {"agent",
         {{"objective", c.agent.objective},
          {"mu", a.temperature},
          {"alpha", a.td3bc_alpha},
          {"gamma", a.gamma},
          {"rho", a.rho},
          {"policy_delay", a.policy_delay},
          {"batch_size", a.batch_size},
          {"steps", a.steps},
          {"target_noise", a.target_noise},
          {"noise_clip", a.noise_clip},
          {"num_critics", a.num_critics},
          {"target_mode", agent::to_string(a.target_mode)},
          {"hidden", a.hidden},
          {"actor_learning_rate", a.actor_adam.learning_rate},
          {"critic_learning_rate", a.critic_adam.learning_rate},
          {"eval_interval", a.eval_interval},
          {"eval_episodes", a.eval_episodes},
          {"final_eval_episodes", a.final_eval_episodes},
          {"normalize_states", a.normalize_states}}},
        {"bc",
         {{"steps", c.bc.steps},
          {"batch_size", c.bc.batch_size},
          {"hidden", c.bc.hidden},
          {"learning_rate", c.bc.adam.learning_rate},
          {"mu", c.bc.temperature},
          {"mode_threshold", c.bc.mode_threshold},
          {"segment_points", c.bc.segment_points},
          {"normalize_states", c.bc.normalize_states}}},
        {"analysis",
         {{"samples_per_state", c.analysis.samples_per_state},
          {"grid_resolution", c.analysis.grid_resolution},
          {"deviation_samples", c.analysis.deviation_samples},
          {"max_states", c.analysis.max_states}}},
        {"ablation",
         {{"variable", c.ablation.variable},
          {"values", c.ablation.values ? json(*c.ablation.values) : json(nullptr)},
          {"seeds", c.ablation.seeds},
          {"arms", arms},
          {"retrain_morse", c.ablation.retrain_morse}}},
    };
}

env::EnvSpec make_env(const EnvSection& section) {
    env::EnvSpec spec;
    if (section.kind == "four_mode") {
        spec = env::EnvSpec::four_mode_bandit();
    } else {
        const std::filesystem::path p(section.maze);
        auto layout = (section.maze == "umaze" || section.maze == "large") ? env::MazeLayout::builtin(section.maze)
                                                                             : env::MazeLayout::from_file(p);
        spec = env::EnvSpec::point_maze(std::move(layout));
    }
    if (section.horizon) spec.horizon = *section.horizon;
    if (section.step_scale) spec.step_scale = *section.step_scale;
    if (section.goal_radius) spec.goal_radius = *section.goal_radius;
    if (section.start_jitter) spec.start_jitter = *section.start_jitter;
    if (section.mode_std) spec.mode_std = *section.mode_std;
    if (section.mode_rewards) {
        std::copy(section.mode_rewards->begin(), section.mode_rewards->end(), spec.mode_rewards.begin());
    }
    spec.validate();
    return spec;
}

env::ReplayDataset make_dataset(const env::EnvSpec& spec, const DatasetSection& section, std::uint64_t seed) {
    if (spec.kind == env::EnvKind::FourModeBandit) {
        return env::four_mode_dataset(section.size, seed, spec);
    }
    return env::generate_maze_dataset(spec, section.maze, section.episodes, seed);
}

}  // namespace bst::harness
