#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "bst/errors.hpp"
#include "bst/harness.hpp"

using namespace bst;
using namespace bst::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("bst_test_" + tag + "_" + std::to_string(std::rand()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli_dispatch(args, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

// Small bandit run: every phase finishes in seconds.
json tiny_bandit() {
    return json::parse(R"({
        "env": {"kind": "four_mode"},
        "dataset": {"size": 64},
        "morse": {"hidden": [32, 32], "steps": 300, "batch_size": 64, "learning_rate": 0.001},
        "agent": {"objective": "td3bc", "hidden": [32, 32], "steps": 200, "batch_size": 32,
                  "eval_interval": 100, "eval_episodes": 2, "final_eval_episodes": 5},
        "bc": {"steps": 100, "hidden": [16]},
        "analysis": {"samples_per_state": 2, "grid_resolution": 11, "deviation_samples": 64},
        "ablation": {"variable": "mu", "values": [0.5], "seeds": 1}
    })");
}

morse::MorseModel quick_morse(const env::ReplayDataset& data) {
    morse::MorseTrainConfig c;
    c.hidden = {32, 32};
    c.steps = 300;
    c.batch_size = 64;
    return morse::train_morse(data, c, 3).model;
}

}  // namespace

TEST_SUITE("harness") {
    TEST_CASE("empty config gives defaults and round-trips through JSON") {
        const auto c = parse_config(json::object());
        CHECK(c.env.kind == "four_mode");
        CHECK(c.agent.config.temperature == 0.5);
        CHECK(c.agent.config.policy_delay == 2);
        CHECK(c.agent.config.rho == 0.005);
        CHECK_FALSE(c.ablation.values.has_value());
        const auto again = parse_config(to_json(parse_config(tiny_bandit())));
        CHECK(to_json(again) == to_json(parse_config(tiny_bandit())));
        CHECK(again.ablation.values == std::vector<double>{0.5});
    }

    TEST_CASE("unknown keys and wrong types are config errors") {
        auto bad = tiny_bandit();
        bad["agent"]["temprature"] = 0.5;
        try {
            parse_config(bad);
            FAIL("accepted an unknown key");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("agent.temprature") != std::string::npos);
        }
        CHECK_THROWS_AS(parse_config(json{{"extra", 1}}), ConfigError);
        CHECK_THROWS_AS(parse_config(json{{"agent", {{"mu", "high"}}}}), ConfigError);
        CHECK_THROWS_AS(parse_config(json{{"morse", {{"kernel", "laplace"}}}}), ConfigError);
        CHECK_THROWS_AS(parse_config(json{{"agent", {{"gamma", 1.0}}}}), ConfigError);
        CHECK_THROWS_AS(parse_config(json{{"ablation", {{"variable", "depth"}}}}), ConfigError);
        CHECK_THROWS_AS(parse_config(json{{"ablation", {{"arms", {{{"num_critic", 2}}}}}}}), ConfigError);
    }

    TEST_CASE("missing and malformed config files name the path") {
        TempDir dir("cfg");
        const auto missing = dir.path / "missing.json";
        try {
            load_config(missing);
            FAIL("loaded a missing file");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("missing.json") != std::string::npos);
        }
        const auto broken = dir.path / "broken.json";
        std::ofstream(broken) << "{ \"env\": ";
        CHECK_THROWS_AS(load_config(broken), ConfigError);
    }

    TEST_CASE("relative maze layout paths resolve against the config file") {
        TempDir dir("cfgmaze");
        fs::create_directories(dir.path / "configs");
        const auto cfg = dir.path / "configs" / "run.json";
        std::ofstream(cfg) << R"({"env": {"maze": "../mazes/x.txt"}})";
        CHECK(fs::path(load_config(cfg).env.maze) == (dir.path / "mazes" / "x.txt").lexically_normal());
        std::ofstream(cfg) << R"({"env": {"maze": "large"}})";
        CHECK(load_config(cfg).env.maze == "large");
    }

    TEST_CASE("phase seeds are distinct and reproducible") {
        const auto a = PhaseSeeds::from_master(7);
        const auto b = PhaseSeeds::from_master(7);
        CHECK(a.to_json() == b.to_json());
        std::set<std::uint64_t> all{a.dataset, a.morse, a.agent, a.evaluation, a.analysis};
        CHECK(all.size() == 5);
        CHECK(PhaseSeeds::from_master(8).agent != a.agent);
    }

    TEST_CASE("content hash matches git blob ids") {
        CHECK(content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
        CHECK(content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    TEST_CASE("heatmap quantization") {
        TempDir dir("pgm");
        Matrix m(2, 2);
        m << 0.0, 1.0, 1.0, 0.0;
        emit_heatmap(m, dir.path / "h.pgm");
        const std::string bytes = slurp(dir.path / "h.pgm");
        const std::string header = "P5\n2 2\n255\n";
        REQUIRE(bytes.size() == header.size() + 4);
        CHECK(bytes.substr(0, header.size()) == header);
        const std::string pixels = bytes.substr(header.size());
        CHECK(static_cast<unsigned char>(pixels[0]) == 0);
        CHECK(static_cast<unsigned char>(pixels[1]) == 255);
        CHECK(static_cast<unsigned char>(pixels[2]) == 255);
        CHECK(static_cast<unsigned char>(pixels[3]) == 0);
        CHECK(fs::exists(dir.path / "h.csv"));

        emit_heatmap(Matrix::Zero(3, 4), dir.path / "black.pgm");
        const std::string black = slurp(dir.path / "black.pgm");
        CHECK(black.substr(0, 11) == "P5\n4 3\n255\n");
        CHECK(black.substr(11) == std::string(12, '\0'));
        emit_heatmap(Matrix::Ones(3, 4), dir.path / "white.pgm");
        CHECK(slurp(dir.path / "white.pgm").substr(11) == std::string(12, '\xff'));

        Matrix mid(1, 1);
        mid(0, 0) = 0.5;
        emit_heatmap(mid, dir.path / "mid.pgm");
        CHECK(static_cast<unsigned char>(slurp(dir.path / "mid.pgm").back()) == 128);

        CHECK_THROWS_AS(emit_heatmap(Matrix::Constant(2, 2, 1.5), dir.path / "x.pgm"), ArgumentError);
        CHECK_THROWS_AS(emit_heatmap(Matrix::Constant(2, 2, -0.1), dir.path / "x.pgm"), ArgumentError);
    }

    TEST_CASE("density CSV layout") {
        Matrix g = Matrix::Zero(3, 3);
        g(2, 0) = 1.0;
        std::ostringstream out;
        write_density_csv(out, g);
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "y\\x,-1,0,1");
        std::getline(in, line);
        CHECK(line == "-1,0,0,0");
        std::getline(in, line);
        std::getline(in, line);
        CHECK(line == "1,1,0,0");
        CHECK(fraction_above(g, 0.5) == doctest::Approx(1.0 / 9.0));
    }

    TEST_CASE("manifest refuses to name missing files") {
        TempDir dir("manifest");
        auto m = RunManifest::open(dir.path);
        m.set_config(json{{"a", 1}});
        m.add_file("table", "table.csv");
        CHECK_THROWS_AS(m.write(), StateError);
        std::ofstream(dir.path / "table.csv") << "x\n";
        m.add_input("table_input", dir.path / "table.csv");
        CHECK_NOTHROW(m.write());
        const auto reopened = RunManifest::open(dir.path);
        CHECK(reopened.json()["files"]["table"] == "table.csv");
        CHECK(reopened.json()["config_hash"] == content_hash(json{{"a", 1}}.dump()));
        CHECK(reopened.json()["inputs"]["table_input"]["hash"] == content_hash("x\n"));
    }

    TEST_CASE("certainty analysis: populations, determinism and errors") {
        const auto data = env::four_mode_dataset(64, 1);
        const auto model = quick_morse(data);
        const auto a = analyze_morse(model, data, 5, 10);
        CHECK(a.dataset.size() == 64);
        CHECK(a.permuted.size() == 640);
        CHECK(a.uniform.size() == 640);
        for (double v : a.dataset) CHECK((v >= 0.0 && v <= 1.0));
        std::ostringstream c1;
        std::ostringstream c2;
        std::ostringstream c3;
        write_certainty_csv(c1, a);
        write_certainty_csv(c2, analyze_morse(model, data, 5, 10));
        write_certainty_csv(c3, analyze_morse(model, data, 6, 10));
        CHECK(c1.str() == c2.str());
        CHECK(c1.str() != c3.str());
        CHECK(c1.str().find("mean_D_uni,,") != std::string::npos);
        CHECK(a.separation() == doctest::Approx(a.mean_dataset() - std::max(a.mean_permuted(), a.mean_uniform())));

        Rng rng(0);
        const std::vector<int> hidden{4};
        const auto wrong = morse::MorseModel::create(3, 2, {}, hidden, rng);
        CHECK_THROWS_AS(analyze_morse(wrong, data, 1), ConfigError);
        auto broken = model;
        broken.perturbation().layers()[0].weight(0, 0) = std::nan("");
        CHECK_THROWS_AS(analyze_morse(broken, data, 1), ConfigError);
        CHECK(analyze_morse(model, data, 1, 1, 10).dataset.size() == 10);
    }

    TEST_CASE("one value and one seed gives a one-row sweep") {
        const auto cfg = parse_config(tiny_bandit());
        const auto spec = make_env(cfg.env);
        const auto data = make_dataset(spec, cfg.dataset, 1);
        const auto rows = ablate_sweep(cfg, data, spec, 3);
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].value == 0.5);
        CHECK(rows[0].seeds == 1);
        CHECK(rows[0].score_std == 0.0);
        std::ostringstream out;
        write_sweep_csv(out, "mu", rows);
        const std::string text = out.str();
        CHECK(std::count(text.begin(), text.end(), '\n') == 2);
        CHECK(text.rfind("mu,seeds,score_mean", 0) == 0);

        auto empty = cfg;
        empty.ablation.values = std::vector<double>{};
        CHECK_THROWS_AS(ablate_sweep(empty, data, spec, 3), ArgumentError);
        auto cdq = cfg;
        cdq.ablation.variable = "cdq";
        cdq.ablation.values.reset();
        CHECK_THROWS_AS(ablate_sweep(cdq, data, spec, 3), ConfigError);
    }

    TEST_CASE("CDQ ablation: identical arms, row count and missing baseline") {
        auto cfg = parse_config(tiny_bandit());
        const auto spec = make_env(cfg.env);
        const auto data = make_dataset(spec, cfg.dataset, 1);
        cfg.ablation.variable = "cdq";
        cfg.ablation.arms = {{"base", 2, agent::TargetMode::ClippedDoubleQ},
                             {"copy", 2, agent::TargetMode::ClippedDoubleQ}};
        const auto arms = ablate_cdq(cfg, data, spec, nullptr, 4);
        REQUIRE(arms.size() == 2);
        CHECK(arms[0].percent_change == 0.0);
        CHECK(arms[1].percent_change == 0.0);
        CHECK(arms[0].score_mean == arms[1].score_mean);
        std::ostringstream out;
        write_cdq_csv(out, arms);
        const std::string text = out.str();
        CHECK(std::count(text.begin(), text.end(), '\n') == 3);

        cfg.ablation.arms = {{"only_independent", 2, agent::TargetMode::IndependentMean}};
        CHECK_THROWS_AS(ablate_cdq(cfg, data, spec, nullptr, 4), ConfigError);
    }

    TEST_CASE("worker cap reads the environment") {
        ::setenv("BST_THREADS", "3", 1);
        CHECK(worker_threads() == 3);
        ::setenv("BST_THREADS", "zero", 1);
        CHECK(worker_threads() == 1);
        ::unsetenv("BST_THREADS");
        CHECK(worker_threads() == 1);
    }

    TEST_CASE("command line: help, usage errors and config errors") {
        std::string out;
        std::string err;
        CHECK(run_cli({"--help"}, &out) == 0);
        CHECK(out.find("gen-data") != std::string::npos);
        CHECK(out.find("analyze-morse") != std::string::npos);
        CHECK(run_cli({"train-agent", "--help"}, &out) == 0);
        CHECK(out.find("--config") != std::string::npos);
        CHECK(run_cli({}) == 1);
        CHECK(run_cli({"gen-data", "--bogus"}) == 1);
        CHECK(run_cli({"frobnicate"}) == 1);

        TempDir dir("cli");
        const auto missing = (dir.path / "missing.json").string();
        CHECK(run_cli({"train-agent", "--config", missing, "--out", (dir.path / "run").string()}, &out, &err) == 1);
        CHECK(err.find("missing.json") != std::string::npos);

        // Runtime error: no dataset yet.
        CHECK(run_cli({"train-morse", "--out", (dir.path / "run").string()}, &out, &err) == 2);
        CHECK(err.find("gen-data") != std::string::npos);
    }

    TEST_CASE("command line pipeline on the bandit is reproducible") {
        TempDir dir("pipeline");
        const auto cfg_path = dir.path / "bandit.json";
        std::ofstream(cfg_path) << tiny_bandit().dump(2);
        auto pipeline = [&](const fs::path& out) {
            for (const char* cmd : {"gen-data", "train-morse", "train-agent", "evaluate", "analyze-morse"}) {
                std::string err;
                const int code =
                    run_cli({cmd, "--config", cfg_path.string(), "--seed", "11", "--out", out.string()}, nullptr, &err);
                INFO(cmd << ": " << err);
                REQUIRE(code == 0);
            }
        };
        pipeline(dir.path / "a");
        pipeline(dir.path / "b");
        for (const char* f : {"dataset.bstd", "dataset.json", "morse.bstm", "morse_loss.csv", "density_grid.csv",
                              "density.pgm", "density.csv", "policy.bstp", "agent.bsta", "metrics.csv", "eval.json",
                              "deviation.csv", "certainty.csv", "manifest.json"}) {
            CHECK_MESSAGE(fs::exists(dir.path / "a" / f), f);
        }
        for (const char* f : {"dataset.bstd", "morse_loss.csv", "metrics.csv", "certainty.csv", "eval.json"}) {
            CHECK_MESSAGE(slurp(dir.path / "a" / f) == slurp(dir.path / "b" / f), f);
        }
        const auto manifest = json::parse(slurp(dir.path / "a" / "manifest.json"));
        for (const auto& [role, rel] : manifest["files"].items()) {
            CHECK(fs::exists(dir.path / "a" / rel.get<std::string>()));
        }
        CHECK(manifest["seeds"]["master"] == 11);
        CHECK(manifest["phases"].size() == 5);
        CHECK(manifest["inputs"].contains("dataset"));
        CHECK(manifest["results"]["agent"]["coefficient_violations"] == 0);
    }
}
