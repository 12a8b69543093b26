#pragma once

// Shared generators and comparisons for the unit and acceptance tests.

#include <algorithm>
#include <random>
#include <vector>

#include "bst/nn.hpp"
#include "bst/rng.hpp"

namespace fixture {

using bst::nn::Activation;
using bst::nn::DenseLayer;
using bst::nn::DenseNet;
using bst::nn::Matrix;
using bst::nn::Vector;

// 1 to max_layers dense layers with random widths, activations and squashing.
inline DenseNet random_net(std::uint64_t seed, int max_layers = 3, int max_width = 64) {
    bst::Rng rng(seed);
    std::uniform_int_distribution<int> depth(1, max_layers);
    std::uniform_int_distribution<int> width(1, max_width);
    std::uniform_int_distribution<int> act(0, 2);
    const int n = depth(rng);
    std::vector<DenseLayer> layers;
    int in = width(rng) % 8 + 1;
    std::normal_distribution<double> g(0.0, 0.7);
    for (int l = 0; l < n; ++l) {
        const int out = l + 1 == n ? width(rng) % 4 + 1 : width(rng);
        Matrix w(out, in);
        Vector b(out);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = g(rng);
        layers.push_back(DenseLayer{w, b, static_cast<Activation>(act(rng))});
        in = out;
    }
    return DenseNet(std::move(layers), seed % 2 == 0);
}

// Loss = sum over batch of <c, net(x)>; returns the analytic tape.
inline bst::nn::GradientTape linear_loss_tape(const DenseNet& net, const Matrix& x, const Matrix& c) {
    bst::nn::ForwardTrace trace;
    net.forward(x, trace);
    return bst::nn::backward(net, trace, c).tape;
}

inline double linear_loss(const DenseNet& net, const Matrix& x, const Matrix& c) {
    return (net.forward(x).array() * c.array()).sum();
}

// Largest entry-wise difference relative to the largest entry of `a`.
inline double tape_relative_difference(const bst::nn::GradientTape& a, const bst::nn::GradientTape& b) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        diff = std::max(diff, (a.layers[l].weight - b.layers[l].weight).cwiseAbs().maxCoeff());
        diff = std::max(diff, (a.layers[l].bias - b.layers[l].bias).cwiseAbs().maxCoeff());
        scale = std::max(scale, a.layers[l].weight.cwiseAbs().maxCoeff());
        scale = std::max(scale, a.layers[l].bias.cwiseAbs().maxCoeff());
    }
    return diff / scale;
}

// Multiplies a critic's output by c.
inline void scale_critic(DenseNet& net, double c) {
    auto& last = net.layers().back();
    last.weight *= c;
    last.bias *= c;
}

}  // namespace fixture
