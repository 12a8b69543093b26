#pragma once

// Dense network substrate: batched forward passes, reverse-mode gradients,
// adaptive-moment optimizer and target-network tracking.
//
// Batches are column-major matrices with one sample per column.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bst/rng.hpp"

namespace bst::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint8_t { Identity = 0, Relu = 1, Tanh = 2 };

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
    Activation activation = Activation::Identity;

    int in_width() const { return static_cast<int>(weight.cols()); }
    int out_width() const { return static_cast<int>(weight.rows()); }
};

// Activations recorded by a forward pass; consumed by backward().
struct ForwardTrace {
    std::vector<Matrix> inputs;   // input to each layer
    std::vector<Matrix> outputs;  // post-activation output of each layer
    Matrix result;                // network output (after squashing, if any)

    bool recorded() const { return !inputs.empty(); }
};

class DenseNet {
public:
    DenseNet() = default;
    DenseNet(std::vector<DenseLayer> layers, bool squash_output);

    // Hidden layers use ReLU, the output layer is linear, optionally followed
    // by tanh squashing. Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    static DenseNet mlp(int input_width, std::span<const int> hidden, int output_width,
                        bool squash_output, Rng& rng);

    Vector forward_one(const Vector& input) const;
    Matrix forward(const Matrix& batch) const;
    Matrix forward(const Matrix& batch, ForwardTrace& trace) const;

    int input_width() const;
    int output_width() const;
    bool squashes_output() const { return squash_; }
    std::size_t parameter_count() const;
    bool empty() const { return layers_.empty(); }

    std::span<const DenseLayer> layers() const { return layers_; }
    std::span<DenseLayer> layers() { return layers_; }

    bool same_architecture(const DenseNet& other) const;
    bool all_finite() const;

    friend bool operator==(const DenseNet& a, const DenseNet& b);

private:
    std::vector<DenseLayer> layers_;
    bool squash_ = false;
};

struct LayerGradient {
    Matrix weight;
    Vector bias;
};

// Per-parameter gradient buffers laid out like the net they belong to.
struct GradientTape {
    std::vector<LayerGradient> layers;

    static GradientTape zeros_like(const DenseNet& net);
    void zero();
    GradientTape& operator+=(const GradientTape& other);
    GradientTape& operator*=(double factor);
    bool shaped_like(const DenseNet& net) const;
    double squared_norm() const;
};

struct Backprop {
    GradientTape tape;
    Matrix input_gradient;  // d loss / d input, same shape as the forward batch
};

// output_gradient holds d loss / d output for every sample of the recorded
// batch. Throws StateError when trace holds no forward pass.
Backprop backward(const DenseNet& net, const ForwardTrace& trace, const Matrix& output_gradient);

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    std::uint64_t step = 0;
    AdamConfig config;
    GradientTape first_moment;
    GradientTape second_moment;

    static OptimizerState for_net(const DenseNet& net, AdamConfig config = {});
};

// Throws NumericError naming the layer if the tape holds NaN/Inf, and
// DimensionError if the shapes disagree.
void optimizer_step(DenseNet& net, const GradientTape& tape, OptimizerState& state);

// target <- rho * online + (1 - rho) * target
void soft_update(DenseNet& target, const DenseNet& online, double rho);

// "BSTW" checkpoint: magic, u32 version, u32 layer count, u8 squash flag,
// per layer (u32 in, u32 out, u8 activation), then per layer the weight
// matrix row-major followed by the bias, all little-endian f64.
void save_checkpoint(std::ostream& out, const DenseNet& net);
DenseNet load_checkpoint(std::istream& in);

// "BSTO" optimizer record: magic, u32 version, u64 step, four f64 config
// values, then both moment buffers in checkpoint parameter order.
void save_optimizer(std::ostream& out, const OptimizerState& state);
OptimizerState load_optimizer(std::istream& in, const DenseNet& net);

}  // namespace bst::nn
