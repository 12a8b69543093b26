#include "bst/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "bst/errors.hpp"

namespace bst::harness {

namespace {

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population standard deviation.
double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return s.str();
}

// Runs jobs [0, n) on up to worker_threads() threads.
template <typename F>
void parallel_for(std::size_t n, F&& job) {
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

morse::MorseTrainConfig morse_with_lambda(morse::MorseTrainConfig cfg, double lambda) {
    cfg.kernel.scale = lambda;
    cfg.scale_from_action_dim = false;
    return cfg;
}

bool needs_morse(const RunConfig& cfg) {
    return cfg.agent.objective == "weighted_bc" ||
           (cfg.agent.objective != "bc" && cfg.agent.config.objective == agent::PolicyObjective::Bst);
}

struct RunOutcome {
    double score = 0.0;
    double success = 0.0;
    double deviation = 0.0;
    double grid_fraction = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> edges;
    std::vector<std::size_t> counts;
};

RunOutcome run_once(const RunConfig& cfg, const env::ReplayDataset& data, const env::EnvSpec& spec,
                    const morse::MorseModel* shared_morse, std::uint64_t seed) {
    const auto seeds = PhaseSeeds::from_master(seed);
    RunOutcome out;
    std::optional<morse::MorseModel> own;
    const morse::MorseModel* m = shared_morse;
    if (m == nullptr && needs_morse(cfg)) {
        own = morse::train_morse(data, cfg.morse, seeds.morse).model;
        m = &*own;
    }
    if (m != nullptr && m->action_dim() == 2) {
        const Vector state = data.at(0).state;
        out.grid_fraction = fraction_above(morse::density_grid(*m, state, cfg.analysis.grid_resolution), 0.5);
    }
    auto run = train_policy(cfg, data, spec, m, seeds.agent);
    const auto eval = agent::evaluate(run.policy.as_fn(), spec, cfg.agent.config.final_eval_episodes,
                                      seeds.evaluation, &data, cfg.analysis.deviation_samples);
    out.score = eval.mean_return;
    out.success = eval.success_rate;
    out.deviation = eval.deviation->mean;
    out.edges = eval.deviation->bin_edges;
    out.counts = eval.deviation->counts;
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Seeds, hashing, manifest

PhaseSeeds PhaseSeeds::from_master(std::uint64_t master) {
    PhaseSeeds s;
    s.master = master;
    s.dataset = derive_seed(master, "dataset");
    s.morse = derive_seed(master, "morse");
    s.agent = derive_seed(master, "agent");
    s.evaluation = derive_seed(master, "evaluation");
    s.analysis = derive_seed(master, "analysis");
    return s;
}

nlohmann::json PhaseSeeds::to_json() const {
    return {{"master", master},
            {"dataset", dataset},
            {"morse", morse},
            {"agent", agent},
            {"evaluation", evaluation},
            {"analysis", analysis},
            {"rule", "splitmix64(master ^ fnv1a64(tag))"}};
}

std::string content_hash(const std::string& bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr) throw Error("cannot allocate a digest context");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw Error("SHA-1 digest failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return content_hash(buf.str());
}

RunManifest RunManifest::open(const std::filesystem::path& dir) {
    RunManifest m;
    m.dir_ = dir;
    const auto path = dir / "manifest.json";
    if (std::filesystem::exists(path)) {
        std::ifstream in(path);
        try {
            m.doc_ = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception&) {
            throw FormatError("unreadable manifest " + path.string(), 0);
        }
    }
    if (!m.doc_.is_object()) m.doc_ = nlohmann::json::object();
    for (const char* key : {"phases", "warnings"}) {
        if (!m.doc_.contains(key)) m.doc_[key] = nlohmann::json::array();
    }
    for (const char* key : {"files", "inputs", "results"}) {
        if (!m.doc_.contains(key)) m.doc_[key] = nlohmann::json::object();
    }
    return m;
}

void RunManifest::set_config(const nlohmann::json& config) {
    doc_["config"] = config;
    doc_["config_hash"] = content_hash(config.dump());
}

void RunManifest::set_seeds(const PhaseSeeds& seeds) { doc_["seeds"] = seeds.to_json(); }

void RunManifest::record_phase(const std::string& name, double seconds) {
    doc_["phases"].push_back({{"name", name}, {"seconds", seconds}});
}

void RunManifest::add_file(const std::string& role, const std::string& relative_path) {
    doc_["files"][role] = relative_path;
}

void RunManifest::add_input(const std::string& role, const std::filesystem::path& path) {
    doc_["inputs"][role] = {{"path", path.filename().string()}, {"hash", file_hash(path)}};
}

void RunManifest::warn(const std::string& message) { doc_["warnings"].push_back(message); }

void RunManifest::write() const {
    for (const auto& [role, rel] : doc_["files"].items()) {
        if (!std::filesystem::exists(dir_ / rel.get<std::string>())) {
            throw StateError("manifest names missing file " + rel.get<std::string>() + " (" + role + ")");
        }
    }
    std::ofstream out(dir_ / "manifest.json");
    if (!out) throw Error("cannot write " + (dir_ / "manifest.json").string());
    out << doc_.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Analysis

double CertaintyAnalysis::mean_dataset() const { return mean_of(dataset); }
double CertaintyAnalysis::mean_permuted() const { return mean_of(permuted); }
double CertaintyAnalysis::mean_uniform() const { return mean_of(uniform); }
double CertaintyAnalysis::separation() const {
    return mean_dataset() - std::max(mean_permuted(), mean_uniform());
}

CertaintyAnalysis analyze_morse(const morse::MorseModel& model, const env::ReplayDataset& data, std::uint64_t seed,
                                int samples_per_state, std::size_t max_states) {
    if (model.state_dim() != data.state_dim() || model.action_dim() != data.action_dim()) {
        throw ConfigError("Morse model dims do not match the dataset");
    }
    if (!model.perturbation().all_finite()) {
        throw ConfigError("Morse model has non-finite parameters");
    }
    if (samples_per_state < 1) throw ArgumentError("samples_per_state must be >= 1");
    if (data.size() < 2) throw ArgumentError("analysis needs at least two transitions");

    Rng rng(derive_seed(seed, "states"));
    std::vector<Eigen::Index> rows(data.size());
    std::iota(rows.begin(), rows.end(), 0);
    if (max_states > 0 && max_states < rows.size()) {
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(max_states);
        std::sort(rows.begin(), rows.end());
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    Matrix states(data.state_dim(), n);
    Matrix actions(data.action_dim(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        states.col(i) = data.states().col(rows[i]);
        actions.col(i) = data.actions().col(rows[i]);
    }
    CertaintyAnalysis out;
    const Vector d = model.certainty_batch(states, actions);
    out.dataset.assign(d.data(), d.data() + d.size());

    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (int j = 0; j < samples_per_state; ++j) {
        const Matrix all_perm = env::permuted_actions(data, derive_seed(seed, static_cast<std::uint64_t>(j)));
        Matrix perm(data.action_dim(), n);
        Matrix uni(data.action_dim(), n);
        for (Eigen::Index i = 0; i < n; ++i) {
            perm.col(i) = all_perm.col(rows[i]);
            for (Eigen::Index r = 0; r < uni.rows(); ++r) uni(r, i) = unit(rng);
        }
        const Vector p = model.certainty_batch(states, perm);
        const Vector u = model.certainty_batch(states, uni);
        out.permuted.insert(out.permuted.end(), p.data(), p.data() + p.size());
        out.uniform.insert(out.uniform.end(), u.data(), u.data() + u.size());
    }
    return out;
}

void write_certainty_csv(std::ostream& out, const CertaintyAnalysis& a) {
    out << "population,sample,certainty\n";
    auto dump = [&](const char* name, const std::vector<double>& v) {
        for (std::size_t i = 0; i < v.size(); ++i) out << name << "," << i << "," << fmt(v[i]) << "\n";
    };
    dump("D", a.dataset);
    dump("D_perm", a.permuted);
    dump("D_uni", a.uniform);
    out << "mean_D,," << fmt(a.mean_dataset()) << "\n";
    out << "mean_D_perm,," << fmt(a.mean_permuted()) << "\n";
    out << "mean_D_uni,," << fmt(a.mean_uniform()) << "\n";
}

void write_density_csv(std::ostream& out, const Matrix& grid) {
    const int res = static_cast<int>(grid.cols());
    out << "y\\x";
    for (int j = 0; j < res; ++j) out << "," << fmt(morse::grid_coordinate(j, res));
    out << "\n";
    for (int i = 0; i < grid.rows(); ++i) {
        out << fmt(morse::grid_coordinate(i, static_cast<int>(grid.rows())));
        for (int j = 0; j < res; ++j) out << "," << fmt(grid(i, j));
        out << "\n";
    }
}

double fraction_above(const Matrix& grid, double threshold) {
    if (grid.size() == 0) return 0.0;
    return static_cast<double>((grid.array() > threshold).count()) / static_cast<double>(grid.size());
}

void emit_heatmap(const Matrix& values, const std::filesystem::path& path) {
    if (values.size() == 0) throw ArgumentError("heatmap of an empty matrix");
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const double v = values.data()[i];
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ArgumentError("heatmap entries must lie in [0, 1], found " + fmt(v));
        }
    }
    std::ofstream img(path, std::ios::binary);
    if (!img) throw Error("cannot write " + path.string());
    img << "P5\n" << values.cols() << " " << values.rows() << "\n255\n";
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            img.put(static_cast<char>(static_cast<unsigned char>(std::lround(values(r, c) * 255.0))));
        }
    }
    auto csv_path = path;
    csv_path.replace_extension(".csv");
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write " + csv_path.string());
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            csv << (c ? "," : "") << fmt(values(r, c));
        }
        csv << "\n";
    }
}

// ---------------------------------------------------------------------------
// Training and ablations

PolicyRun train_policy(const RunConfig& config, const env::ReplayDataset& data, const env::EnvSpec& spec,
                       const morse::MorseModel* morse, std::uint64_t seed) {
    PolicyRun run;
    const auto& obj = config.agent.objective;
    if (obj == "bc" || obj == "weighted_bc") {
        const bool weighted = obj == "weighted_bc";
        if (weighted && morse == nullptr) throw ConfigError("weighted_bc needs a trained Morse model");
        run.policy = agent::train_bc(data, config.bc, weighted, morse, seed);
        return run;
    }
    run.learner = agent::train_td3bst(data, spec, config.agent.config, morse, seed);
    run.policy = run.learner->agent.policy;
    return run;
}

void write_metrics_csv(std::ostream& out, const std::vector<agent::MetricRow>& rows) {
    out << "step,critic_loss,policy_loss,mean_weight,mean_uncertainty,q_scale,eval_return,eval_success\n";
    for (const auto& r : rows) {
        out << r.step << "," << fmt(r.critic_loss) << "," << fmt(r.policy_loss) << "," << fmt(r.mean_weight) << ","
            << fmt(r.mean_uncertainty) << "," << fmt(r.q_scale) << "," << fmt(r.eval_return) << ","
            << fmt(r.eval_success) << "\n";
    }
}

std::vector<SweepRow> ablate_sweep(const RunConfig& base, const env::ReplayDataset& data, const env::EnvSpec& spec,
                                   std::uint64_t seed) {
    const auto& ab = base.ablation;
    std::vector<double> values = ab.values.value_or(std::vector<double>{});
    if (!ab.values) {
        const double k = spec.action_dim;
        if (ab.variable == "lambda") {
            values = spec.kind == env::EnvKind::FourModeBandit ? std::vector<double>{0.1, 0.5, 1.0, 2.0}
                                                                : std::vector<double>{1.0, k / 2.0, k};
        } else if (ab.variable == "mu") {
            values = {0.25, 0.5, 1.0};
        } else if (ab.variable == "num_critics") {
            values = {2, 5, 10};
        } else {
            throw ConfigError("ablation variable \"" + ab.variable + "\" is not a value sweep");
        }
        std::vector<double> unique;
        for (double v : values) {
            if (std::find(unique.begin(), unique.end(), v) == unique.end()) unique.push_back(v);
        }
        values = unique;
    }
    if (values.empty()) throw ArgumentError("ablation sweep has no values");
    if (ab.seeds < 1) throw ArgumentError("ablation sweep needs at least one seed");

    const auto seeds = static_cast<std::size_t>(ab.seeds);
    const bool per_value_morse = ab.variable == "lambda" || ab.retrain_morse;
    // Morse models shared across values when they do not depend on the value.
    std::vector<std::optional<morse::MorseModel>> shared(seeds);
    if (!per_value_morse && needs_morse(base)) {
        parallel_for(seeds, [&](std::size_t s) {
            const auto run_seed = derive_seed(derive_seed(seed, "sweep"), s);
            shared[s] = morse::train_morse(data, base.morse, PhaseSeeds::from_master(run_seed).morse).model;
        });
    }
    std::vector<RunOutcome> outcomes(values.size() * seeds);
    parallel_for(outcomes.size(), [&](std::size_t job) {
        const std::size_t v = job / seeds;
        const std::size_t s = job % seeds;
        RunConfig cfg = base;
        if (ab.variable == "lambda") {
            cfg.morse = morse_with_lambda(cfg.morse, values[v]);
        } else if (ab.variable == "mu") {
            cfg.agent.config.temperature = values[v];
            cfg.bc.temperature = values[v];
        } else if (ab.variable == "num_critics") {
            cfg.agent.config.num_critics = static_cast<int>(values[v]);
        }
        cfg.agent.config.validate();
        const auto run_seed = derive_seed(derive_seed(seed, "sweep"), s);
        outcomes[job] = run_once(cfg, data, spec, shared[s] ? &*shared[s] : nullptr, run_seed);
    });

    std::vector<SweepRow> rows;
    for (std::size_t v = 0; v < values.size(); ++v) {
        SweepRow row;
        row.value = values[v];
        row.seeds = seeds;
        std::vector<double> score, success, deviation, fraction;
        for (std::size_t s = 0; s < seeds; ++s) {
            const auto& o = outcomes[v * seeds + s];
            score.push_back(o.score);
            success.push_back(o.success);
            deviation.push_back(o.deviation);
            fraction.push_back(o.grid_fraction);
            if (row.histogram.empty()) {
                row.histogram_edges = o.edges;
                row.histogram.assign(o.counts.size(), 0.0);
            }
            for (std::size_t b = 0; b < o.counts.size(); ++b) {
                row.histogram[b] += static_cast<double>(o.counts[b]) / static_cast<double>(seeds);
            }
        }
        row.score_mean = mean_of(score);
        row.score_std = std_of(score);
        row.success_mean = mean_of(success);
        row.success_std = std_of(success);
        row.deviation_mean = mean_of(deviation);
        row.deviation_std = std_of(deviation);
        row.grid_fraction = mean_of(fraction);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<SweepRow> ablate_lambda(const RunConfig& base, const env::ReplayDataset& data,
                                    const env::EnvSpec& spec, std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.ablation.variable = "lambda";
    return ablate_sweep(cfg, data, spec, seed);
}

void write_sweep_csv(std::ostream& out, const std::string& variable, const std::vector<SweepRow>& rows) {
    out << variable
        << ",seeds,score_mean,score_std,success_mean,success_std,deviation_mean,deviation_std,grid_fraction\n";
    for (const auto& r : rows) {
        out << fmt(r.value) << "," << r.seeds << "," << fmt(r.score_mean) << "," << fmt(r.score_std) << ","
            << fmt(r.success_mean) << "," << fmt(r.success_std) << "," << fmt(r.deviation_mean) << ","
            << fmt(r.deviation_std) << "," << fmt(r.grid_fraction) << "\n";
    }
}

void write_histogram_csv(std::ostream& out, const std::string& variable, const std::vector<SweepRow>& rows) {
    out << variable << ",bin_low,bin_high,mean_count\n";
    for (const auto& r : rows) {
        for (std::size_t b = 0; b < r.histogram.size(); ++b) {
            out << fmt(r.value) << "," << fmt(r.histogram_edges[b]) << "," << fmt(r.histogram_edges[b + 1]) << ","
                << fmt(r.histogram[b]) << "\n";
        }
    }
}

std::vector<ArmResult> ablate_cdq(const RunConfig& base, const env::ReplayDataset& data, const env::EnvSpec& spec,
                                  const morse::MorseModel* morse, std::uint64_t seed) {
    auto arms = base.ablation.arms;
    if (arms.empty()) {
        arms = {{"nc2_cdq", 2, agent::TargetMode::ClippedDoubleQ},
                {"nc2_independent", 2, agent::TargetMode::IndependentMean},
                {"nc10_independent", 10, agent::TargetMode::IndependentMean}};
    }
    const auto baseline = std::find_if(arms.begin(), arms.end(), [](const AblationArm& a) {
        return a.num_critics == 2 && a.target_mode == agent::TargetMode::ClippedDoubleQ;
    });
    if (baseline == arms.end()) {
        throw ConfigError("CDQ ablation needs the baseline arm (2 critics, cdq)");
    }
    if (base.ablation.seeds < 1) throw ArgumentError("ablation needs at least one seed");
    const auto seeds = static_cast<std::size_t>(base.ablation.seeds);

    // One Morse model per seed, shared by every arm so arms differ only in
    // their critics.
    std::vector<std::optional<morse::MorseModel>> models(seeds);
    if (morse == nullptr && needs_morse(base)) {
        parallel_for(seeds, [&](std::size_t s) {
            const auto run_seed = derive_seed(derive_seed(seed, "cdq"), s);
            models[s] = morse::train_morse(data, base.morse, PhaseSeeds::from_master(run_seed).morse).model;
        });
    }
    std::vector<double> scores(arms.size() * seeds);
    parallel_for(scores.size(), [&](std::size_t job) {
        const auto& arm = arms[job / seeds];
        const std::size_t s = job % seeds;
        RunConfig cfg = base;
        cfg.agent.config.num_critics = arm.num_critics;
        cfg.agent.config.target_mode = arm.target_mode;
        const auto run_seed = derive_seed(derive_seed(seed, "cdq"), s);
        const morse::MorseModel* m = morse != nullptr ? morse : (models[s] ? &*models[s] : nullptr);
        scores[job] = run_once(cfg, data, spec, m, run_seed).score;
    });

    std::vector<ArmResult> out;
    for (std::size_t a = 0; a < arms.size(); ++a) {
        ArmResult r;
        r.arm = arms[a];
        r.seeds = seeds;
        r.scores.assign(scores.begin() + static_cast<std::ptrdiff_t>(a * seeds),
                        scores.begin() + static_cast<std::ptrdiff_t>((a + 1) * seeds));
        r.score_mean = mean_of(r.scores);
        r.score_std = std_of(r.scores);
        out.push_back(std::move(r));
    }
    const double base_score = out[static_cast<std::size_t>(baseline - arms.begin())].score_mean;
    for (auto& r : out) {
        const double diff = r.score_mean - base_score;
        if (diff == 0.0) {
            r.percent_change = 0.0;
        } else if (base_score == 0.0) {
            r.percent_change = std::copysign(std::numeric_limits<double>::infinity(), diff);
        } else {
            r.percent_change = 100.0 * diff / std::abs(base_score);
        }
    }
    return out;
}

void write_cdq_csv(std::ostream& out, const std::vector<ArmResult>& arms) {
    out << "arm,num_critics,target_mode,seeds,score_mean,score_std,percent_change\n";
    for (const auto& r : arms) {
        out << r.arm.name << "," << r.arm.num_critics << "," << agent::to_string(r.arm.target_mode) << ","
            << r.seeds << "," << fmt(r.score_mean) << "," << fmt(r.score_std) << "," << fmt(r.percent_change)
            << "\n";
    }
}

int worker_threads() {
    const char* v = std::getenv("BST_THREADS");
    if (v == nullptr || *v == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) return 1;
    return static_cast<int>(std::min<long>(n, 256));
}

}  // namespace bst::harness
