#include <doctest.h>

#include <cmath>
#include <sstream>

#include "../support/oracles.hpp"
#include "bst/errors.hpp"
#include "bst/morse.hpp"

using namespace bst;
using morse::KernelKind;
using morse::KernelSpec;
using morse::MorseModel;
using nn::Matrix;
using nn::Vector;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

// f(s, a) = scale .* a + offset, ignoring the state. State dim 2, action dim 2.
MorseModel affine_stub(KernelSpec kernel, Vector scale, Vector offset) {
    Matrix w = Matrix::Zero(2, 4);
    w(0, 2) = scale(0);
    w(1, 3) = scale(1);
    nn::DenseNet net({nn::DenseLayer{w, offset, nn::Activation::Identity}}, false);
    return MorseModel(std::move(net), kernel, 2, 2, env::StateNormalizer::identity(2));
}

MorseModel random_model(std::uint64_t seed, KernelSpec kernel) {
    Rng rng(seed);
    const std::vector<int> hidden{16, 16};
    return MorseModel::create(2, 2, kernel, hidden, rng, env::StateNormalizer::identity(2));
}

morse::MorseTrainConfig quick_config(double lambda, std::size_t steps) {
    morse::MorseTrainConfig c;
    c.kernel.scale = lambda;
    c.scale_from_action_dim = false;
    c.hidden = {64, 64, 64};
    c.steps = steps;
    c.batch_size = 128;
    c.adam.learning_rate = 1e-3;
    return c;
}

}  // namespace

TEST_SUITE("morse") {
    TEST_CASE("kernel identity is exactly one") {
        Rng rng(1);
        std::normal_distribution<double> g(0.0, 3.0);
        for (auto kind : {KernelKind::Rbf, KernelKind::RationalQuadratic}) {
            KernelSpec k{kind, 0.7, 2.5};
            for (int i = 0; i < 100; ++i) {
                const Vector z = vec({g(rng), g(rng), g(rng)});
                CHECK(morse::kernel_eval(k, z, z) == 1.0);
            }
        }
    }

    TEST_CASE("closed-form kernel values") {
        const Vector a = vec({0.0, 0.0});
        const Vector b = vec({1.0, 0.0});
        CHECK(morse::kernel_eval({KernelKind::Rbf, 1.0, 1.0}, a, b) == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
        CHECK(morse::kernel_eval({KernelKind::Rbf, 1.0, 1.0}, a, b) == doctest::Approx(0.60653066).epsilon(1e-8));
        CHECK(morse::kernel_eval({KernelKind::RationalQuadratic, 1.0, 1.0}, a, b) ==
              doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    }

    TEST_CASE("kernel errors") {
        CHECK_THROWS_AS(morse::kernel_eval({}, vec({0.0}), vec({0.0, 1.0})), DimensionError);
        CHECK_THROWS_AS(morse::kernel_eval({KernelKind::Rbf, 0.0, 1.0}, vec({0.0}), vec({1.0})), ConfigError);
        CHECK_THROWS_AS(morse::kernel_eval({KernelKind::Rbf, -1.0, 1.0}, vec({0.0}), vec({1.0})), ConfigError);
        CHECK_THROWS_AS(morse::kernel_eval({KernelKind::RationalQuadratic, 1.0, 0.0}, vec({0.0}), vec({1.0})),
                        ConfigError);
    }

    TEST_CASE("kernels decrease strictly with distance and RQ dominates RBF") {
        Rng rng(2);
        std::uniform_real_distribution<double> dist(1e-3, 10.0);
        std::uniform_real_distribution<double> lam(0.05, 4.0);
        std::uniform_real_distribution<double> kap(0.05, 50.0);
        for (int i = 0; i < 1000; ++i) {
            const double l = lam(rng);
            const double kappa = kap(rng);
            const double d1 = dist(rng);
            const double d2 = d1 + dist(rng);
            const KernelSpec rbf{KernelKind::Rbf, l, 1.0};
            const KernelSpec rq{KernelKind::RationalQuadratic, l, kappa};
            CHECK(rq.value(d1 * d1) >= rbf.value(d1 * d1));
            CHECK(rbf.value(d2 * d2) < rbf.value(d1 * d1));
            CHECK(rq.value(d2 * d2) < rq.value(d1 * d1));
        }
    }

    TEST_CASE("perturbation that returns the action gives certainty one") {
        for (auto kind : {KernelKind::Rbf, KernelKind::RationalQuadratic}) {
            const auto m = affine_stub({kind, 1.3, 1.0}, vec({1.0, 1.0}), vec({0.0, 0.0}));
            CHECK(m.certainty(vec({0.3, -2.0}), vec({0.5, -0.25})) == 1.0);
            CHECK(m.uncertainty(vec({0.3, -2.0}), vec({0.5, -0.25})) == 0.0);
            CHECK(m.energy(vec({0.3, -2.0}), vec({0.5, -0.25})) == 0.0);
        }
    }

    TEST_CASE("certainty rises monotonically to one as the residual shrinks") {
        double previous = 0.0;
        for (double offset = 2.0; offset >= 0.0; offset -= 0.125) {
            const auto m = affine_stub({}, vec({1.0, 1.0}), vec({offset, 0.0}));
            const double c = m.certainty(vec({0.0, 0.0}), vec({0.1, 0.2}));
            CHECK(c > previous);
            previous = c;
        }
        CHECK(previous == 1.0);
    }

    TEST_CASE("energy of certainty 1/e is one") {
        // RBF, lambda 1, squared residual 2: K = e^-1.
        const auto m = affine_stub({KernelKind::Rbf, 1.0, 1.0}, vec({1.0, 1.0}), vec({1.0, 1.0}));
        CHECK(m.certainty(vec({0.0, 0.0}), vec({0.0, 0.0})) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
        CHECK(m.energy(vec({0.0, 0.0}), vec({0.0, 0.0})) == doctest::Approx(1.0).epsilon(1e-14));
    }

    TEST_CASE("certainty 0 and 1 map to uncertainty 1 and 0") {
        const auto far = affine_stub({KernelKind::Rbf, 1.0, 1.0}, vec({1.0, 1.0}), vec({100.0, 0.0}));
        CHECK(far.certainty(vec({0.0, 0.0}), vec({0.0, 0.0})) == 0.0);
        CHECK(far.uncertainty(vec({0.0, 0.0}), vec({0.0, 0.0})) == 1.0);
        // The floor keeps the energy finite.
        CHECK(far.energy(vec({0.0, 0.0}), vec({0.0, 0.0})) == doctest::Approx(-std::log(1e-12)));
    }

    TEST_CASE("RBF energy equals lambda^2/2 times the squared residual") {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const double lambda = 0.3 + 0.4 * static_cast<double>(seed);
            const auto m = random_model(seed, {KernelKind::Rbf, lambda, 1.0});
            Rng rng(seed + 50);
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            for (int i = 0; i < 200; ++i) {
                const Vector s = vec({u(rng), u(rng)});
                const Vector a = vec({u(rng), u(rng)});
                const Vector f = m.perturbation().forward(m.network_input(s, a)).col(0);
                const double direct = 0.5 * lambda * lambda * (f - a).squaredNorm();
                if (direct < 20.0) {  // away from the certainty floor
                    CHECK(std::abs(m.energy(s, a) - direct) <= 1e-10);
                }
            }
        }
    }

    TEST_CASE("certainty stays in [0, 1] and energy is non-negative on random inputs") {
        for (auto kind : {KernelKind::Rbf, KernelKind::RationalQuadratic}) {
            const auto m = random_model(7, {kind, 2.0, 0.5});
            Rng rng(8);
            std::normal_distribution<double> g(0.0, 5.0);
            Matrix s(2, 10000);
            Matrix a(2, 10000);
            for (Eigen::Index i = 0; i < s.size(); ++i) {
                s.data()[i] = g(rng);
                a.data()[i] = g(rng);
            }
            const Vector c = m.certainty_batch(s, a);
            const Vector e = m.energy_batch(s, a);
            CHECK((c.array() >= 0.0).all());
            CHECK((c.array() <= 1.0).all());
            CHECK((e.array() >= 0.0).all());
            for (Eigen::Index i = 0; i < c.size(); ++i) {
                if (c(i) == 1.0) CHECK(e(i) == 0.0);
                if (e(i) == 0.0) CHECK(c(i) == 1.0);
            }
        }
    }

    TEST_CASE("query dims are checked") {
        const auto m = random_model(1, {});
        CHECK_THROWS_AS(m.certainty(vec({0.0}), vec({0.0, 0.0})), DimensionError);
        CHECK_THROWS_AS(m.certainty(vec({0.0, 0.0}), vec({0.0, 0.0, 0.0})), DimensionError);
    }

    TEST_CASE("loss vanishes when data residuals are zero and uniform certainty is zero") {
        // Scaling map: the data action 0 is a fixed point, the uniform action
        // is sent far away.
        const auto m = affine_stub({KernelKind::Rbf, 1.0, 1.0}, vec({100.0, 100.0}), vec({0.0, 0.0}));
        morse::MorseBatch b;
        b.states = Matrix::Zero(2, 1);
        b.actions = Matrix::Zero(2, 1);
        b.uniform_actions = Matrix::Ones(2, 1);
        const auto loss = morse::morse_loss(m, b);
        CHECK(loss.data_term == 0.0);
        CHECK(loss.uniform_term == 0.0);
        CHECK(loss.value == 0.0);
    }

    TEST_CASE("hand-evaluated loss on a single sample equals one") {
        // f(s, a) = (c a_x + 1, a_y) with c^2 = 2 ln 2.
        // Data action 0: residual [1, 0], -log K = 0.5.
        // Uniform action [1, 0]: residual [c, 0], K = 0.5.
        const double c = std::sqrt(2.0 * std::log(2.0));
        const auto m = affine_stub({KernelKind::Rbf, 1.0, 1.0}, vec({c, 1.0}), vec({1.0, 0.0}));
        morse::MorseBatch b;
        b.states = Matrix::Zero(2, 1);
        b.actions = Matrix::Zero(2, 1);
        b.uniform_actions = Matrix::Zero(2, 1);
        b.uniform_actions(0, 0) = 1.0;
        const auto loss = morse::morse_loss(m, b);
        CHECK(loss.data_term == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(loss.uniform_term == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(loss.value == doctest::Approx(1.0).epsilon(1e-14));
    }

    TEST_CASE("loss on an empty batch is an argument error") {
        const auto m = random_model(1, {});
        morse::MorseBatch b;
        b.states = Matrix::Zero(2, 0);
        b.actions = Matrix::Zero(2, 0);
        b.uniform_actions = Matrix::Zero(2, 0);
        CHECK_THROWS_AS(morse::morse_loss(m, b), ArgumentError);
    }

    TEST_CASE("loss gradients match finite differences") {
        for (auto kind : {KernelKind::Rbf, KernelKind::RationalQuadratic}) {
            for (std::uint64_t seed = 0; seed < 5; ++seed) {
                const auto model = random_model(seed + 30, {kind, 1.5, 0.8});
                Rng rng(seed);
                std::uniform_real_distribution<double> u(-1.0, 1.0);
                morse::MorseBatch b;
                b.states = Matrix(2, 4);
                b.actions = Matrix(2, 4);
                b.uniform_actions = Matrix(2, 8);
                for (Eigen::Index i = 0; i < 8; ++i) b.states.data()[i] = u(rng);
                for (Eigen::Index i = 0; i < 8; ++i) b.actions.data()[i] = u(rng);
                for (Eigen::Index i = 0; i < 16; ++i) b.uniform_actions.data()[i] = u(rng);
                const auto loss = morse::morse_loss(model, b);
                const auto fd = oracle::central_difference(model.perturbation(), [&](const nn::DenseNet& net) {
                    MorseModel probe(net, model.kernel(), 2, 2, model.normalizer());
                    return morse::morse_loss(probe, b).value;
                });
                CHECK(oracle::worst_error(loss.gradient, fd) <= 1e-4);
            }
        }
    }

    TEST_CASE("training preconditions") {
        env::ReplayDataset empty(2, 2);
        CHECK_THROWS_AS(morse::train_morse(empty, quick_config(1.0, 10), 1), ArgumentError);
        const auto data = env::four_mode_dataset(16, 1);
        CHECK_THROWS_AS(morse::train_morse(data, quick_config(1.0, 0), 1), ArgumentError);
    }

    TEST_CASE("single-point dataset is fitted with near-unit certainty") {
        env::ReplayDataset data(2, 2);
        data.begin_episode();
        data.add({vec({0.0, 0.0}), vec({0.3, -0.4}), 0.0, vec({0.0, 0.0}), true});
        auto cfg = quick_config(1.0, 1500);
        cfg.hidden = {32, 32};
        const auto result = morse::train_morse(data, cfg, 4);
        CHECK(result.model.certainty(vec({0.0, 0.0}), vec({0.3, -0.4})) >= 0.99);
        CHECK(result.loss_history.size() == 1500);
    }

    TEST_CASE("four-mode model: modes certain, uniform actions not") {
        const auto data = env::four_mode_dataset(128, 7);
        const auto result = morse::train_morse(data, quick_config(1.0, 5000), 11);
        const auto& m = result.model;
        const Vector zero = Vector::Zero(2);
        const double center = m.certainty(zero, vec({0.8, 0.0}));
        CHECK(center >= 0.9);
        CHECK(m.uncertainty(zero, vec({0.8, 0.0})) <= 0.1);

        const Matrix states = Matrix::Zero(2, static_cast<Eigen::Index>(data.size()));
        const double on_data = m.certainty_batch(states, Matrix(data.actions())).mean();
        Rng rng(5);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Matrix uni(2, 1024);
        for (Eigen::Index i = 0; i < uni.size(); ++i) uni.data()[i] = u(rng);
        const double on_uniform = m.certainty_batch(Matrix::Zero(2, 1024), uni).mean();
        CHECK(on_data - on_uniform >= 0.5);

        // Density grid argmax sits on a mode.
        const Matrix grid = morse::density_grid(m, zero, 101);
        Eigen::Index r = 0;
        Eigen::Index c = 0;
        grid.maxCoeff(&r, &c);
        const Vector best = vec({morse::grid_coordinate(static_cast<int>(c), 101),
                                 morse::grid_coordinate(static_cast<int>(r), 101)});
        const auto mode = env::four_mode_centers()[env::nearest_mode(best)];
        CHECK((best - mode).norm() <= 0.1);
        CHECK((grid.array() >= 0.0).all());
        CHECK((grid.array() <= 1.0).all());
    }

    TEST_CASE("density grid layout and errors") {
        const auto m = random_model(3, {});
        const Matrix grid = morse::density_grid(m, Vector::Zero(2), 5);
        CHECK(grid.rows() == 5);
        CHECK(grid.cols() == 5);
        CHECK((grid.array() >= 0.0).all());
        CHECK((grid.array() <= 1.0).all());
        // entry (i, j) is the action (x_j, y_i)
        CHECK(grid(1, 3) == doctest::Approx(m.certainty(Vector::Zero(2), vec({0.5, -0.5}))));
        CHECK(morse::grid_coordinate(0, 5) == -1.0);
        CHECK(morse::grid_coordinate(4, 5) == 1.0);

        Rng rng(1);
        const std::vector<int> hidden{4};
        const auto one_d = MorseModel::create(2, 1, {}, hidden, rng, env::StateNormalizer::identity(2));
        CHECK_THROWS_AS(morse::density_grid(one_d, Vector::Zero(2), 5), UnsupportedError);
    }

    TEST_CASE("model record round trip") {
        const auto m = random_model(12, {KernelKind::Rbf, 0.25, 3.0});
        std::stringstream buf;
        morse::save_model(buf, m);
        const std::string bytes = buf.str();
        CHECK(bytes.substr(0, 4) == "BSTM");
        std::stringstream in(bytes);
        const auto back = morse::load_model(in);
        CHECK(back.kernel().kind == KernelKind::Rbf);
        CHECK(back.kernel().scale == 0.25);
        CHECK(back.perturbation() == m.perturbation());
        std::stringstream cut(bytes.substr(0, 20));
        CHECK_THROWS_AS(morse::load_model(cut), FormatError);
    }
}
