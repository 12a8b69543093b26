#include <doctest.h>

#include <sstream>

#include "../support/fixtures.hpp"
#include "../support/oracles.hpp"
#include "bst/errors.hpp"
#include "bst/nn.hpp"

using namespace bst;
using nn::Activation;
using nn::DenseLayer;
using nn::DenseNet;
using nn::Matrix;
using nn::Vector;
using fixture::linear_loss;
using fixture::linear_loss_tape;
using fixture::random_net;

namespace {

DenseLayer layer(Matrix w, Vector b, Activation act) { return DenseLayer{std::move(w), std::move(b), act}; }

// 1 -> 3 -> 1 with hand-picked weights.
DenseNet fixed_two_layer() {
    Matrix w1(3, 1);
    w1 << 0.5, -1.0, 2.0;
    Vector b1(3);
    b1 << 0.1, 0.2, -0.3;
    Matrix w2(1, 3);
    w2 << 1.0, -2.0, 0.5;
    Vector b2(1);
    b2 << 0.25;
    return DenseNet({layer(w1, b1, Activation::Relu), layer(w2, b2, Activation::Identity)}, false);
}

}  // namespace

TEST_SUITE("nn") {
    TEST_CASE("identity layer passes the input through") {
        DenseNet net({layer(Matrix::Identity(2, 2), Vector::Zero(2), Activation::Identity)}, false);
        Vector x(2);
        x << 1.0, 2.0;
        const Vector y = net.forward_one(x);
        CHECK(y(0) == 1.0);
        CHECK(y(1) == 2.0);
    }

    TEST_CASE("squashed outputs stay strictly inside (-1, 1)") {
        Rng rng(3);
        const std::vector<int> hidden{16, 16};
        const auto net = DenseNet::mlp(3, hidden, 2, true, rng);
        std::normal_distribution<double> g(0.0, 50.0);
        for (int i = 0; i < 200; ++i) {
            Vector x(3);
            for (int d = 0; d < 3; ++d) x(d) = g(rng);
            const Vector y = net.forward_one(x);
            CHECK((y.array().abs() <= 1.0).all());
            CHECK(y.allFinite());
        }
    }

    TEST_CASE("fixed two-layer net matches the loop oracle and the frozen value") {
        const auto net = fixed_two_layer();
        Vector x(1);
        x << 0.5;
        const double y = net.forward_one(x)(0);
        CHECK(std::abs(y - oracle::forward(net, x)(0)) <= 1e-12);
        // relu([0.35, -0.3, 0.7]) . [1, -2, 0.5] + 0.25
        CHECK(y == doctest::Approx(0.95).epsilon(1e-12));
    }

    TEST_CASE("random nets agree with the loop oracle") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto net = random_net(seed);
            Vector x = Vector::LinSpaced(net.input_width(), -1.0, 1.0);
            CHECK((net.forward_one(x) - oracle::forward(net, x)).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }

    TEST_CASE("input width mismatch is a dimension error") {
        const auto net = fixed_two_layer();
        CHECK_THROWS_AS(net.forward(Matrix::Zero(2, 1)), DimensionError);
    }

    TEST_CASE("adjacent widths must agree") {
        CHECK_THROWS_AS(DenseNet({layer(Matrix::Zero(3, 2), Vector::Zero(3), Activation::Relu),
                                  layer(Matrix::Zero(1, 4), Vector::Zero(1), Activation::Identity)},
                                 false),
                        DimensionError);
    }

    TEST_CASE("zero seed gradient gives an all-zero tape") {
        const auto net = random_net(11);
        nn::ForwardTrace trace;
        net.forward(Matrix::Ones(net.input_width(), 4), trace);
        const auto bp = nn::backward(net, trace, Matrix::Zero(net.output_width(), 4));
        CHECK(bp.tape.squared_norm() == 0.0);
        CHECK(bp.tape.shaped_like(net));
    }

    TEST_CASE("scalar linear net has d(w x)/dw = x") {
        DenseNet net({layer(Matrix::Constant(1, 1, 0.7), Vector::Zero(1), Activation::Identity)}, false);
        nn::ForwardTrace trace;
        net.forward(Matrix::Constant(1, 1, 2.0), trace);
        const auto bp = nn::backward(net, trace, Matrix::Ones(1, 1));
        CHECK(bp.tape.layers[0].weight(0, 0) == 2.0);
        CHECK(bp.tape.layers[0].bias(0) == 1.0);
        CHECK(bp.input_gradient(0, 0) == doctest::Approx(0.7));
    }

    TEST_CASE("backward without a recorded forward pass is a state error") {
        const auto net = fixed_two_layer();
        nn::ForwardTrace empty;
        CHECK_THROWS_AS(nn::backward(net, empty, Matrix::Ones(1, 1)), StateError);
    }

    TEST_CASE("gradients match central finite differences") {
        for (std::uint64_t seed = 100; seed < 200; ++seed) {
            const auto net = random_net(seed);
            Rng rng(seed);
            std::normal_distribution<double> g(0.0, 1.0);
            Matrix x(net.input_width(), 3);
            Matrix c(net.output_width(), 3);
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
            for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = g(rng);
            const auto tape = linear_loss_tape(net, x, c);
            const auto fd = oracle::central_difference(net, [&](const DenseNet& n) { return linear_loss(n, x, c); });
            CAPTURE(seed);
            CHECK(oracle::worst_error(tape, fd) <= 1e-4);
        }
    }

    TEST_CASE("zero gradient leaves parameters unchanged and advances the step") {
        auto net = fixed_two_layer();
        const auto before = net;
        auto state = nn::OptimizerState::for_net(net);
        nn::optimizer_step(net, nn::GradientTape::zeros_like(net), state);
        CHECK(net == before);
        CHECK(state.step == 1);
    }

    TEST_CASE("constant positive gradient decreases a scalar monotonically") {
        DenseNet net({layer(Matrix::Constant(1, 1, 1.0), Vector::Zero(1), Activation::Identity)}, false);
        auto state = nn::OptimizerState::for_net(net);
        auto tape = nn::GradientTape::zeros_like(net);
        tape.layers[0].weight(0, 0) = 1.0;
        double previous = 1.0;
        for (int i = 0; i < 100; ++i) {
            nn::optimizer_step(net, tape, state);
            const double now = net.layers()[0].weight(0, 0);
            CHECK(now < previous);
            previous = now;
        }
        CHECK(state.step == 100);
    }

    TEST_CASE("first optimizer step matches the closed form") {
        DenseNet net({layer(Matrix::Constant(1, 1, 1.0), Vector::Zero(1), Activation::Identity)}, false);
        auto state = nn::OptimizerState::for_net(net);
        auto tape = nn::GradientTape::zeros_like(net);
        tape.layers[0].weight(0, 0) = 0.5;
        nn::optimizer_step(net, tape, state);
        const double expected = oracle::adam_first_step(1.0, 0.5, 3e-4, 0.9, 0.999, 1e-8);
        CHECK(net.layers()[0].weight(0, 0) == doctest::Approx(expected).epsilon(1e-15));
        // 1 - 3e-4 * 0.5 / (0.5 + 1e-8)
        CHECK(net.layers()[0].weight(0, 0) == doctest::Approx(0.999700000006).epsilon(1e-13));
    }

    TEST_CASE("NaN in the tape is a numeric error naming the layer") {
        auto net = random_net(5, 3, 8);
        while (net.layers().size() < 2) net = random_net(net.parameter_count() + 7, 3, 8);
        auto state = nn::OptimizerState::for_net(net);
        auto tape = nn::GradientTape::zeros_like(net);
        tape.layers[1].bias(0) = std::nan("");
        try {
            nn::optimizer_step(net, tape, state);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(e.layer() == 1);
        }
    }

    TEST_CASE("soft update endpoints and the scalar case") {
        DenseNet online({layer(Matrix::Constant(1, 1, 1.0), Vector::Constant(1, 1.0), Activation::Identity)}, false);
        DenseNet target({layer(Matrix::Constant(1, 1, 0.0), Vector::Constant(1, 0.0), Activation::Identity)}, false);
        auto t = target;
        nn::soft_update(t, online, 0.005);
        CHECK(t.layers()[0].weight(0, 0) == doctest::Approx(0.005).epsilon(1e-15));
        auto full = target;
        nn::soft_update(full, online, 1.0);
        CHECK(full == online);
        auto none = target;
        nn::soft_update(none, online, 0.0);
        CHECK(none == target);
    }

    TEST_CASE("soft update is a convex combination") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto a = random_net(seed);
            auto b = a;
            Rng rng(seed + 1000);
            std::normal_distribution<double> g(0.0, 1.0);
            for (auto& l : b.layers()) {
                for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = g(rng);
            }
            const double rho = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            auto mixed = b;
            nn::soft_update(mixed, a, rho);
            for (std::size_t l = 0; l < a.layers().size(); ++l) {
                const auto& x = a.layers()[l].weight;
                const auto& y = b.layers()[l].weight;
                const auto& m = mixed.layers()[l].weight;
                CHECK((m.array() >= x.cwiseMin(y).array() - 1e-15).all());
                CHECK((m.array() <= x.cwiseMax(y).array() + 1e-15).all());
            }
        }
    }

    TEST_CASE("soft update rejects mismatched architectures") {
        auto a = fixed_two_layer();
        DenseNet b({layer(Matrix::Zero(1, 1), Vector::Zero(1), Activation::Identity)}, false);
        CHECK_THROWS_AS(nn::soft_update(a, b, 0.5), DimensionError);
    }

    TEST_CASE("identical seeds give bit-identical training trajectories") {
        auto run = [] {
            Rng rng(42);
            const std::vector<int> hidden{8};
            auto net = DenseNet::mlp(2, hidden, 1, false, rng);
            auto state = nn::OptimizerState::for_net(net);
            std::normal_distribution<double> g(0.0, 1.0);
            for (int step = 0; step < 50; ++step) {
                Matrix x(2, 16);
                for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
                nn::ForwardTrace trace;
                const Matrix y = net.forward(x, trace);
                const Matrix target = x.row(0) - x.row(1);
                const auto bp = nn::backward(net, trace, (y - target) / 16.0);
                nn::optimizer_step(net, bp.tape, state);
                REQUIRE(net.all_finite());
            }
            return net;
        };
        CHECK(run() == run());
    }

    TEST_CASE("checkpoint round trip and corrupted headers") {
        const auto net = random_net(9);
        std::stringstream buf;
        nn::save_checkpoint(buf, net);
        const std::string bytes = buf.str();
        CHECK(bytes.substr(0, 4) == "BSTW");
        std::stringstream in(bytes);
        CHECK(nn::load_checkpoint(in) == net);

        std::string bad = bytes;
        bad[0] = 'X';
        std::stringstream bad_in(bad);
        CHECK_THROWS_AS(nn::load_checkpoint(bad_in), FormatError);

        std::stringstream cut(bytes.substr(0, bytes.size() - 5));
        CHECK_THROWS_AS(nn::load_checkpoint(cut), FormatError);
    }

    TEST_CASE("optimizer record round trip") {
        auto net = random_net(21);
        auto state = nn::OptimizerState::for_net(net);
        auto tape = nn::GradientTape::zeros_like(net);
        tape.layers[0].bias.setConstant(0.3);
        nn::optimizer_step(net, tape, state);
        std::stringstream buf;
        nn::save_optimizer(buf, state);
        const auto back = nn::load_optimizer(buf, net);
        CHECK(back.step == state.step);
        CHECK(back.first_moment.layers[0].bias == state.first_moment.layers[0].bias);
        CHECK(back.second_moment.layers[0].bias == state.second_moment.layers[0].bias);
    }
}
