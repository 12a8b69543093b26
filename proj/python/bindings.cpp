#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bst/agent.hpp"
#include "bst/errors.hpp"
#include "bst/harness.hpp"

namespace py = pybind11;
using namespace bst;
using nn::Matrix;
using nn::Vector;

namespace {

py::dict source_dict(const env::ReplayDataset& d) {
    return py::module_::import("json").attr("loads")(d.source.dump());
}

}  // namespace

PYBIND11_MODULE(_bstlab, m) {
    m.doc() = "Morse-network behavioral supervision for offline TD3: core bindings";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<StateError>(m, "StateError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
    py::register_exception<UnsupportedError>(m, "UnsupportedError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());

    m.def("derive_seed", py::overload_cast<std::uint64_t, std::string_view>(&derive_seed), py::arg("master"),
          py::arg("tag"));
    m.def("content_hash", [](const py::bytes& b) { return harness::content_hash(std::string(b)); });

    // kernels -----------------------------------------------------------
    py::enum_<morse::KernelKind>(m, "KernelKind")
        .value("RBF", morse::KernelKind::Rbf)
        .value("RQ", morse::KernelKind::RationalQuadratic);
    py::class_<morse::KernelSpec>(m, "KernelSpec")
        .def(py::init([](morse::KernelKind kind, double scale, double mixture) {
                 morse::KernelSpec k{kind, scale, mixture};
                 k.validate();
                 return k;
             }),
             py::arg("kind") = morse::KernelKind::RationalQuadratic, py::arg("scale") = 1.0,
             py::arg("mixture") = 1.0)
        .def_readonly("kind", &morse::KernelSpec::kind)
        .def_readonly("scale", &morse::KernelSpec::scale)
        .def_readonly("mixture", &morse::KernelSpec::mixture)
        .def("value", &morse::KernelSpec::value, py::arg("squared_distance"));
    m.def("kernel_eval", &morse::kernel_eval, py::arg("spec"), py::arg("z1"), py::arg("z2"));

    // data ----------------------------------------------------------------
    py::class_<env::ReplayDataset>(m, "ReplayDataset")
        .def_property_readonly("state_dim", &env::ReplayDataset::state_dim)
        .def_property_readonly("action_dim", &env::ReplayDataset::action_dim)
        .def("__len__", &env::ReplayDataset::size)
        // Column-major (dim, N) in C++, exposed as (N, dim) rows.
        .def_property_readonly("states", [](const env::ReplayDataset& d) { return Matrix(d.states().transpose()); })
        .def_property_readonly("actions", [](const env::ReplayDataset& d) { return Matrix(d.actions().transpose()); })
        .def_property_readonly("next_states",
                               [](const env::ReplayDataset& d) { return Matrix(d.next_states().transpose()); })
        .def_property_readonly("rewards", [](const env::ReplayDataset& d) { return Vector(d.rewards()); })
        .def_property_readonly("dones",
                               [](const env::ReplayDataset& d) {
                                   return std::vector<std::uint8_t>(d.dones().begin(), d.dones().end());
                               })
        .def_property_readonly("episode_starts",
                               [](const env::ReplayDataset& d) {
                                   return std::vector<std::uint64_t>(d.episode_starts().begin(),
                                                                     d.episode_starts().end());
                               })
        .def_property_readonly("source", &source_dict)
        .def("save", [](const env::ReplayDataset& d, const std::filesystem::path& p) { env::save_dataset(p, d); })
        .def("to_bytes",
             [](const env::ReplayDataset& d) {
                 std::ostringstream out;
                 env::save_dataset(out, d);
                 return py::bytes(out.str());
             })
        .def("__eq__", [](const env::ReplayDataset& a, const env::ReplayDataset& b) { return a == b; });
    m.def("load_dataset", py::overload_cast<const std::filesystem::path&>(&env::load_dataset), py::arg("path"));
    m.def("dataset_from_bytes", [](const py::bytes& b) {
        std::istringstream in(std::string(b), std::ios::binary);
        return env::load_dataset(in);
    });
    m.def("four_mode_dataset",
          [](std::size_t n, std::uint64_t seed) { return env::four_mode_dataset(n, seed); }, py::arg("n") = 128,
          py::arg("seed") = 0);
    m.def("four_mode_centers", [] {
        const auto c = env::four_mode_centers();
        return std::vector<Vector>(c.begin(), c.end());
    });
    m.def("permuted_actions",
          [](const env::ReplayDataset& d, std::uint64_t seed) { return Matrix(env::permuted_actions(d, seed).transpose()); },
          py::arg("dataset"), py::arg("seed"));

    // environments ----------------------------------------------------------
    py::class_<env::EnvSpec>(m, "EnvSpec")
        .def_static("four_mode_bandit", &env::EnvSpec::four_mode_bandit)
        .def_static(
            "point_maze", [](const std::string& maze) { return env::EnvSpec::point_maze(env::MazeLayout::builtin(maze)); },
            py::arg("maze") = "umaze")
        .def_static(
            "point_maze_from_text",
            [](const std::string& text) { return env::EnvSpec::point_maze(env::MazeLayout::parse(text)); },
            py::arg("layout"))
        .def_readonly("horizon", &env::EnvSpec::horizon)
        .def_readonly("step_scale", &env::EnvSpec::step_scale)
        .def_readonly("goal_radius", &env::EnvSpec::goal_radius)
        .def_property_readonly("maze_text",
                               [](const env::EnvSpec& s) { return s.maze ? s.maze->text() : std::string(); });
    m.def(
        "step",
        [](const env::EnvSpec& spec, const Vector& s, const Vector& a) {
            const auto r = env::step(spec, s, a);
            return py::make_tuple(r.next_state, r.reward, r.done);
        },
        py::arg("spec"), py::arg("state"), py::arg("action"));
    m.def(
        "generate_maze_dataset",
        [](const env::EnvSpec& spec, std::size_t episodes, std::uint64_t seed, double noise) {
            env::MazeDatasetConfig cfg;
            cfg.noise_scale = noise;
            return env::generate_maze_dataset(spec, cfg, episodes, seed);
        },
        py::arg("spec"), py::arg("episodes") = 500, py::arg("seed") = 0, py::arg("noise") = 0.3);
    m.def("waypoint_oracle", &env::waypoint_oracle, py::arg("spec"));

    // Morse -------------------------------------------------------------------
    py::class_<morse::MorseModel>(m, "MorseModel")
        .def_property_readonly("state_dim", &morse::MorseModel::state_dim)
        .def_property_readonly("action_dim", &morse::MorseModel::action_dim)
        .def_property_readonly("kernel", &morse::MorseModel::kernel)
        .def("certainty", &morse::MorseModel::certainty, py::arg("state"), py::arg("action"))
        .def("uncertainty", &morse::MorseModel::uncertainty, py::arg("state"), py::arg("action"))
        .def("energy", &morse::MorseModel::energy, py::arg("state"), py::arg("action"))
        .def(
            "certainty_batch",
            [](const morse::MorseModel& mm, const Matrix& states, const Matrix& actions) {
                return mm.certainty_batch(states.transpose(), actions.transpose());
            },
            py::arg("states"), py::arg("actions"))
        .def(
            "density_grid",
            [](const morse::MorseModel& mm, const Vector& state, int resolution) {
                return morse::density_grid(mm, state, resolution);
            },
            py::arg("state"), py::arg("resolution") = 101)
        .def("save", [](const morse::MorseModel& mm, const std::filesystem::path& p) { morse::save_model(p, mm); });
    m.def("load_morse", py::overload_cast<const std::filesystem::path&>(&morse::load_model), py::arg("path"));
    m.def(
        "train_morse",
        [](const env::ReplayDataset& data, double scale, morse::KernelKind kind, std::vector<int> hidden,
           std::size_t steps, std::size_t batch_size, double learning_rate, std::uint64_t seed) {
            morse::MorseTrainConfig cfg;
            cfg.kernel.kind = kind;
            cfg.kernel.scale = scale;
            cfg.scale_from_action_dim = false;
            cfg.hidden = std::move(hidden);
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.adam.learning_rate = learning_rate;
            morse::MorseTrainResult r = [&] {
                py::gil_scoped_release release;
                return morse::train_morse(data, cfg, seed);
            }();
            return py::make_tuple(std::move(r.model), std::move(r.loss_history));
        },
        py::arg("dataset"), py::arg("scale") = 1.0, py::arg("kind") = morse::KernelKind::RationalQuadratic,
        py::arg("hidden") = std::vector<int>{64, 64, 64}, py::arg("steps") = 2000, py::arg("batch_size") = 128,
        py::arg("learning_rate") = 1e-3, py::arg("seed") = 0);

    // agent -------------------------------------------------------------------
    m.def("disadvantage_weight", &agent::disadvantage_weight, py::arg("uncertainty"), py::arg("temperature"));
    m.def("q_scale", &agent::q_scale, py::arg("q"));
    py::class_<agent::DeterministicPolicy>(m, "Policy")
        .def("act", &agent::DeterministicPolicy::act, py::arg("state"))
        .def("save", [](const agent::DeterministicPolicy& p, const std::filesystem::path& path) {
            agent::save_policy(path, p);
        });
    m.def("load_policy", py::overload_cast<const std::filesystem::path&>(&agent::load_policy), py::arg("path"));
    m.def(
        "evaluate",
        [](const env::PolicyFn& policy, const env::EnvSpec& spec, std::size_t episodes, std::uint64_t seed) {
            const auto r = agent::evaluate(policy, spec, episodes, seed);
            py::dict d;
            d["mean_return"] = r.mean_return;
            d["std_return"] = r.std_return;
            d["success_rate"] = r.success_rate;
            d["episodes"] = r.episodes;
            return d;
        },
        py::arg("policy"), py::arg("spec"), py::arg("episodes") = 100, py::arg("seed") = 0);

    // harness -----------------------------------------------------------------
    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out;
            std::ostringstream err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = harness::cli_dispatch(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
