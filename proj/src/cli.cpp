#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bst/errors.hpp"
#include "bst/harness.hpp"

namespace bst::harness {

namespace {

namespace fs = std::filesystem;

struct CommonOptions {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = "run";
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Everything a subcommand needs: parsed config, seeds, run dir, manifest.
struct Context {
    RunConfig config;
    PhaseSeeds seeds;
    fs::path dir;
    RunManifest manifest;
    std::ostream& out;

    fs::path path(const char* name) const { return dir / name; }
};

Context open_context(const CommonOptions& opts, std::ostream& out) {
    RunConfig cfg = opts.config.empty() ? RunConfig{} : load_config(opts.config);
    fs::create_directories(opts.out);
    Context ctx{std::move(cfg), PhaseSeeds::from_master(opts.seed), fs::path(opts.out),
                RunManifest::open(opts.out), out};
    ctx.manifest.set_config(to_json(ctx.config));
    ctx.manifest.set_seeds(ctx.seeds);
    if (!opts.config.empty()) ctx.manifest.add_input("config", opts.config);
    return ctx;
}

template <typename F>
void write_file(const fs::path& path, F&& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    body(f);
    if (!f) throw Error("failed while writing " + path.string());
}

env::ReplayDataset require_dataset(Context& ctx) {
    const auto p = ctx.path("dataset.bstd");
    if (!fs::exists(p)) {
        throw StateError("no dataset at " + p.string() + "; run gen-data first");
    }
    ctx.manifest.add_input("dataset", p);
    return env::load_dataset(p);
}

morse::MorseModel require_morse(Context& ctx) {
    const auto p = ctx.path("morse.bstm");
    if (!fs::exists(p)) {
        throw StateError("no Morse model at " + p.string() + "; run train-morse first");
    }
    ctx.manifest.add_input("morse", p);
    return morse::load_model(p);
}

bool objective_needs_morse(const RunConfig& cfg) {
    return cfg.agent.objective == "weighted_bc" ||
           (cfg.agent.objective != "bc" && cfg.agent.config.objective == agent::PolicyObjective::Bst);
}

// Density grid at the first dataset state, as CSV and graymap.
void write_density(Context& ctx, const morse::MorseModel& model, const env::ReplayDataset& data) {
    if (model.action_dim() != 2) return;
    const Matrix grid = morse::density_grid(model, data.at(0).state, ctx.config.analysis.grid_resolution);
    write_file(ctx.path("density_grid.csv"), [&](std::ostream& f) { write_density_csv(f, grid); });
    // The graymap puts +y at the top.
    emit_heatmap(grid.colwise().reverse(), ctx.path("density.pgm"));
    ctx.manifest.add_file("density_grid", "density_grid.csv");
    ctx.manifest.add_file("density_heatmap", "density.pgm");
    ctx.manifest.add_file("density_heatmap_values", "density.csv");
    ctx.manifest.extra()["density_fraction_above_half"] = fraction_above(grid, 0.5);
}

void cmd_gen_data(Context& ctx) {
    Stopwatch sw;
    const auto spec = make_env(ctx.config.env);
    const auto data = make_dataset(spec, ctx.config.dataset, ctx.seeds.dataset);
    env::save_dataset(ctx.path("dataset.bstd"), data);
    write_file(ctx.path("dataset.json"), [&](std::ostream& f) { f << data.source.dump(2) << "\n"; });
    ctx.manifest.add_file("dataset", "dataset.bstd");
    ctx.manifest.add_file("dataset_source", "dataset.json");
    auto& r = ctx.manifest.extra()["dataset"];
    r = {{"transitions", data.size()}, {"episodes", data.episode_starts().size()}};
    if (data.source.contains("end_to_end_success")) {
        r["end_to_end_success"] = data.source["end_to_end_success"];
        if (data.source["end_to_end_success"].get<double>() > 0.05) {
            ctx.manifest.warn("end-to-end success of the behavior data exceeds 5%");
        }
    }
    ctx.manifest.record_phase("gen-data", sw.seconds());
    ctx.out << "dataset: " << data.size() << " transitions -> " << ctx.path("dataset.bstd").string() << "\n";
}

void cmd_train_morse(Context& ctx) {
    Stopwatch sw;
    const auto data = require_dataset(ctx);
    const auto result = morse::train_morse(data, ctx.config.morse, ctx.seeds.morse);
    morse::save_model(ctx.path("morse.bstm"), result.model);
    write_file(ctx.path("morse_loss.csv"), [&](std::ostream& f) {
        f << "step,loss\n";
        for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
            f << i + 1 << "," << result.loss_history[i] << "\n";
        }
    });
    ctx.manifest.add_file("morse", "morse.bstm");
    ctx.manifest.add_file("morse_loss", "morse_loss.csv");
    write_density(ctx, result.model, data);
    const auto& k = result.model.kernel();
    ctx.manifest.extra()["morse"] = {
        {"kernel", k.kind == morse::KernelKind::Rbf ? "rbf" : "rq"},
        {"lambda", k.scale},
        {"kappa", k.mixture},
        {"steps", ctx.config.morse.steps},
        {"batch_size", ctx.config.morse.batch_size},
        {"reference_budget", {{"steps", 100000}, {"batch_size", 1024}}},
        {"final_loss", result.loss_history.empty() ? 0.0 : result.loss_history.back()}};
    ctx.manifest.record_phase("train-morse", sw.seconds());
    ctx.out << "morse: lambda " << k.scale << ", final loss " << result.loss_history.back() << "\n";
}

void cmd_train_agent(Context& ctx) {
    Stopwatch sw;
    const auto data = require_dataset(ctx);
    const auto spec = make_env(ctx.config.env);
    std::optional<morse::MorseModel> model;
    if (objective_needs_morse(ctx.config)) model = require_morse(ctx);
    const auto run = train_policy(ctx.config, data, spec, model ? &*model : nullptr, ctx.seeds.agent);
    agent::save_policy(ctx.path("policy.bstp"), run.policy);
    ctx.manifest.add_file("policy", "policy.bstp");
    auto& r = ctx.manifest.extra()["agent"];
    r = {{"objective", ctx.config.agent.objective}};
    if (run.learner) {
        const auto& l = *run.learner;
        agent::save_agent(ctx.path("agent.bsta"), l.agent);
        write_file(ctx.path("metrics.csv"), [&](std::ostream& f) { write_metrics_csv(f, l.metrics); });
        ctx.manifest.add_file("agent", "agent.bsta");
        ctx.manifest.add_file("metrics", "metrics.csv");
        r["critic_updates"] = l.counters.critic_updates;
        r["policy_updates"] = l.counters.policy_updates;
        r["soft_updates"] = l.counters.soft_updates;
        r["coefficient_violations"] = l.audit.violations;
        r["weight_range"] = {l.audit.min_weight, l.audit.max_weight};
        r["uncertainty_range"] = {l.audit.min_uncertainty, l.audit.max_uncertainty};
        r["q_scale_clamps"] = l.audit.q_scale_clamps;
        if (!l.metrics.empty()) {
            r["final_success"] = l.metrics.back().eval_success;
            r["final_return"] = l.metrics.back().eval_return;
        }
        for (const auto& w : l.warnings) ctx.manifest.warn(w);
    }
    ctx.manifest.record_phase("train-agent", sw.seconds());
    ctx.out << "policy -> " << ctx.path("policy.bstp").string() << "\n";
}

void cmd_evaluate(Context& ctx) {
    Stopwatch sw;
    const auto data = require_dataset(ctx);
    const auto spec = make_env(ctx.config.env);
    const auto p = ctx.path("policy.bstp");
    if (!fs::exists(p)) throw StateError("no policy at " + p.string() + "; run train-agent first");
    ctx.manifest.add_input("policy", p);
    const auto policy = agent::load_policy(p);
    const auto eval = agent::evaluate(policy.as_fn(), spec, ctx.config.agent.config.final_eval_episodes,
                                      ctx.seeds.evaluation, &data, ctx.config.analysis.deviation_samples);
    const auto& dev = *eval.deviation;
    nlohmann::json doc = {{"episodes", eval.episodes},
                          {"mean_return", eval.mean_return},
                          {"std_return", eval.std_return},
                          {"success_rate", eval.success_rate},
                          {"deviation", {{"mean", dev.mean}, {"median", dev.median}, {"max", dev.max}}}};
    write_file(ctx.path("eval.json"), [&](std::ostream& f) { f << doc.dump(2) << "\n"; });
    write_file(ctx.path("deviation.csv"), [&](std::ostream& f) {
        f << "bin_low,bin_high,count\n";
        for (std::size_t b = 0; b < dev.counts.size(); ++b) {
            f << dev.bin_edges[b] << "," << dev.bin_edges[b + 1] << "," << dev.counts[b] << "\n";
        }
    });
    ctx.manifest.add_file("evaluation", "eval.json");
    ctx.manifest.add_file("deviation_histogram", "deviation.csv");
    ctx.manifest.extra()["evaluation"] = doc;
    ctx.manifest.record_phase("evaluate", sw.seconds());
    ctx.out << "success " << eval.success_rate << ", mean return " << eval.mean_return << "\n";
}

void cmd_analyze_morse(Context& ctx) {
    Stopwatch sw;
    const auto data = require_dataset(ctx);
    const auto model = require_morse(ctx);
    const auto& a = ctx.config.analysis;
    const auto result = analyze_morse(model, data, ctx.seeds.analysis, a.samples_per_state, a.max_states);
    write_file(ctx.path("certainty.csv"), [&](std::ostream& f) { write_certainty_csv(f, result); });
    ctx.manifest.add_file("certainty", "certainty.csv");
    write_density(ctx, model, data);
    ctx.manifest.extra()["certainty"] = {{"mean_D", result.mean_dataset()},
                                         {"mean_D_perm", result.mean_permuted()},
                                         {"mean_D_uni", result.mean_uniform()},
                                         {"separation", result.separation()}};
    ctx.manifest.record_phase("analyze-morse", sw.seconds());
    ctx.out << "mean certainty D " << result.mean_dataset() << ", D_perm " << result.mean_permuted() << ", D_uni "
            << result.mean_uniform() << "\n";
}

void cmd_ablate(Context& ctx) {
    Stopwatch sw;
    const auto spec = make_env(ctx.config.env);
    env::ReplayDataset data;
    if (fs::exists(ctx.path("dataset.bstd"))) {
        data = require_dataset(ctx);
    } else {
        data = make_dataset(spec, ctx.config.dataset, ctx.seeds.dataset);
        env::save_dataset(ctx.path("dataset.bstd"), data);
        ctx.manifest.add_file("dataset", "dataset.bstd");
    }
    const auto& variable = ctx.config.ablation.variable;
    if (variable == "cdq") {
        const auto arms = ablate_cdq(ctx.config, data, spec, nullptr, ctx.seeds.master);
        write_file(ctx.path("ablation_cdq.csv"), [&](std::ostream& f) { write_cdq_csv(f, arms); });
        ctx.manifest.add_file("ablation", "ablation_cdq.csv");
        write_cdq_csv(ctx.out, arms);
    } else {
        const auto rows = ablate_sweep(ctx.config, data, spec, ctx.seeds.master);
        const std::string table = "ablation_" + variable + ".csv";
        const std::string hist = "ablation_" + variable + "_deviation.csv";
        write_file(ctx.dir / table, [&](std::ostream& f) { write_sweep_csv(f, variable, rows); });
        write_file(ctx.dir / hist, [&](std::ostream& f) { write_histogram_csv(f, variable, rows); });
        ctx.manifest.add_file("ablation", table);
        ctx.manifest.add_file("ablation_deviation", hist);
        write_sweep_csv(ctx.out, variable, rows);
    }
    ctx.manifest.extra()["ablation"] = {{"variable", variable}, {"threads", worker_threads()}};
    ctx.manifest.record_phase("ablate-" + variable, sw.seconds());
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Offline RL laboratory: Morse-network behavioral supervision for TD3", "bst"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.\n"
               "BST_THREADS caps the number of ablation workers (default 1).");

    using Handler = void (*)(Context&);
    struct Command {
        const char* name;
        const char* help;
        Handler handler;
    };
    const Command commands[] = {
        {"gen-data", "Generate the offline dataset", cmd_gen_data},
        {"train-morse", "Train the Morse network on the run's dataset", cmd_train_morse},
        {"train-agent", "Train a policy (bst, td3bc, td3, bc or weighted_bc)", cmd_train_agent},
        {"evaluate", "Roll out the run's policy and record deviation statistics", cmd_evaluate},
        {"analyze-morse", "Certainty populations for dataset, permuted and uniform actions", cmd_analyze_morse},
        {"ablate", "Run the sweep named in the ablation section", cmd_ablate},
    };
    CommonOptions opts;
    Handler chosen = nullptr;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", opts.config, "JSON run configuration");
        sub->add_option("--seed", opts.seed, "Master seed")->capture_default_str();
        sub->add_option("--out", opts.out, "Run directory")->capture_default_str();
        sub->callback([&chosen, h = c.handler] { chosen = h; });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 1;
    }

    try {
        auto ctx = open_context(opts, out);
        chosen(ctx);
        ctx.manifest.write();
        return 0;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

int cli_dispatch(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace bst::harness
