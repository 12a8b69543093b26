#include "bst/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "bst/binary_io.hpp"
#include "bst/errors.hpp"

namespace bst::nn {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kOptimizerVersion = 1;

void apply_activation(Matrix& z, Activation act) {
    switch (act) {
        case Activation::Identity:
            break;
        case Activation::Relu:
            z = z.cwiseMax(0.0);
            break;
        case Activation::Tanh:
            z = z.array().tanh().matrix();
            break;
    }
}

// Multiplies the upstream gradient in place by the activation derivative,
// expressed through the post-activation value.
void activation_backward(Matrix& grad, const Matrix& out, Activation act) {
    switch (act) {
        case Activation::Identity:
            break;
        case Activation::Relu:
            grad = (out.array() > 0.0).select(grad, 0.0);
            break;
        case Activation::Tanh:
            grad.array() *= 1.0 - out.array().square();
            break;
    }
}

Activation activation_from_tag(std::uint8_t tag, std::size_t offset) {
    if (tag > static_cast<std::uint8_t>(Activation::Tanh)) {
        throw FormatError("unknown activation tag " + std::to_string(tag), offset);
    }
    return static_cast<Activation>(tag);
}

}  // namespace

DenseNet::DenseNet(std::vector<DenseLayer> layers, bool squash_output)
    : layers_(std::move(layers)), squash_(squash_output) {
    if (layers_.empty()) {
        throw DimensionError("a network needs at least one layer");
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.bias.size() != l.weight.rows()) {
            throw DimensionError("layer " + std::to_string(i) + ": bias width does not match weight rows");
        }
        if (i + 1 < layers_.size() && l.out_width() != layers_[i + 1].in_width()) {
            throw DimensionError("layer " + std::to_string(i) + " output width " + std::to_string(l.out_width()) +
                                 " != layer " + std::to_string(i + 1) + " input width " +
                                 std::to_string(layers_[i + 1].in_width()));
        }
    }
}

DenseNet DenseNet::mlp(int input_width, std::span<const int> hidden, int output_width, bool squash_output,
                       Rng& rng) {
    if (input_width <= 0 || output_width <= 0) {
        throw DimensionError("network widths must be positive");
    }
    std::vector<DenseLayer> layers;
    int fan_in = input_width;
    auto make = [&](int out, Activation act) {
        if (out <= 0) {
            throw DimensionError("network widths must be positive");
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        DenseLayer layer;
        layer.weight.resize(out, fan_in);
        layer.bias.resize(out);
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
                layer.weight(r, c) = dist(rng);
            }
        }
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) {
            layer.bias(r) = dist(rng);
        }
        layer.activation = act;
        layers.push_back(std::move(layer));
        fan_in = out;
    };
    for (int width : hidden) {
        make(width, Activation::Relu);
    }
    make(output_width, Activation::Identity);
    return DenseNet(std::move(layers), squash_output);
}

int DenseNet::input_width() const { return layers_.empty() ? 0 : layers_.front().in_width(); }

int DenseNet::output_width() const { return layers_.empty() ? 0 : layers_.back().out_width(); }

std::size_t DenseNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
        n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    }
    return n;
}

bool DenseNet::same_architecture(const DenseNet& other) const {
    if (layers_.size() != other.layers_.size() || squash_ != other.squash_) {
        return false;
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& a = layers_[i];
        const auto& b = other.layers_[i];
        if (a.in_width() != b.in_width() || a.out_width() != b.out_width() || a.activation != b.activation) {
            return false;
        }
    }
    return true;
}

bool DenseNet::all_finite() const {
    for (const auto& l : layers_) {
        if (!l.weight.allFinite() || !l.bias.allFinite()) {
            return false;
        }
    }
    return true;
}

bool operator==(const DenseNet& a, const DenseNet& b) {
    if (!a.same_architecture(b)) {
        return false;
    }
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
        if (a.layers_[i].weight != b.layers_[i].weight || a.layers_[i].bias != b.layers_[i].bias) {
            return false;
        }
    }
    return true;
}

Vector DenseNet::forward_one(const Vector& input) const {
    Matrix batch = input;
    return forward(batch).col(0);
}

Matrix DenseNet::forward(const Matrix& batch) const {
    if (layers_.empty()) {
        throw StateError("forward on an empty network");
    }
    if (batch.rows() != input_width()) {
        throw DimensionError("input width " + std::to_string(batch.rows()) + " != network input width " +
                             std::to_string(input_width()));
    }
    Matrix x = batch;
    for (const auto& l : layers_) {
        Matrix z = l.weight * x;
        z.colwise() += l.bias;
        apply_activation(z, l.activation);
        x = std::move(z);
    }
    if (squash_) {
        x = x.array().tanh().matrix();
    }
    return x;
}

Matrix DenseNet::forward(const Matrix& batch, ForwardTrace& trace) const {
    if (layers_.empty()) {
        throw StateError("forward on an empty network");
    }
    if (batch.rows() != input_width()) {
        throw DimensionError("input width " + std::to_string(batch.rows()) + " != network input width " +
                             std::to_string(input_width()));
    }
    trace.inputs.clear();
    trace.outputs.clear();
    trace.inputs.reserve(layers_.size());
    trace.outputs.reserve(layers_.size());
    trace.inputs.push_back(batch);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        Matrix z = l.weight * trace.inputs.back();
        z.colwise() += l.bias;
        apply_activation(z, l.activation);
        if (i + 1 < layers_.size()) {
            trace.inputs.push_back(z);
        }
        trace.outputs.push_back(std::move(z));
    }
    trace.result = squash_ ? Matrix(trace.outputs.back().array().tanh().matrix()) : trace.outputs.back();
    return trace.result;
}

Backprop backward(const DenseNet& net, const ForwardTrace& trace, const Matrix& output_gradient) {
    if (!trace.recorded()) {
        throw StateError("backward called without a recorded forward pass");
    }
    const auto layers = net.layers();
    if (trace.inputs.size() != layers.size() || trace.outputs.size() != layers.size()) {
        throw StateError("trace was recorded on a different network");
    }
    if (output_gradient.rows() != trace.result.rows() || output_gradient.cols() != trace.result.cols()) {
        throw DimensionError("output gradient shape does not match the recorded output");
    }
    Backprop result;
    result.tape.layers.resize(layers.size());
    Matrix grad = output_gradient;
    if (net.squashes_output()) {
        grad.array() *= 1.0 - trace.result.array().square();
    }
    for (std::size_t k = layers.size(); k-- > 0;) {
        const auto& l = layers[k];
        activation_backward(grad, trace.outputs[k], l.activation);
        auto& g = result.tape.layers[k];
        g.weight.noalias() = grad * trace.inputs[k].transpose();
        g.bias = grad.rowwise().sum();
        Matrix next = l.weight.transpose() * grad;
        grad = std::move(next);
    }
    result.input_gradient = std::move(grad);
    return result;
}

GradientTape GradientTape::zeros_like(const DenseNet& net) {
    GradientTape tape;
    for (const auto& l : net.layers()) {
        tape.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
    }
    return tape;
}

void GradientTape::zero() {
    for (auto& l : layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
}

GradientTape& GradientTape::operator+=(const GradientTape& other) {
    if (other.layers.size() != layers.size()) {
        throw DimensionError("gradient tapes have different layer counts");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].weight += other.layers[i].weight;
        layers[i].bias += other.layers[i].bias;
    }
    return *this;
}

GradientTape& GradientTape::operator*=(double factor) {
    for (auto& l : layers) {
        l.weight *= factor;
        l.bias *= factor;
    }
    return *this;
}

bool GradientTape::shaped_like(const DenseNet& net) const {
    const auto net_layers = net.layers();
    if (layers.size() != net_layers.size()) {
        return false;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].weight.rows() != net_layers[i].weight.rows() ||
            layers[i].weight.cols() != net_layers[i].weight.cols() ||
            layers[i].bias.size() != net_layers[i].bias.size()) {
            return false;
        }
    }
    return true;
}

double GradientTape::squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) {
        s += l.weight.squaredNorm() + l.bias.squaredNorm();
    }
    return s;
}

OptimizerState OptimizerState::for_net(const DenseNet& net, AdamConfig config) {
    OptimizerState state;
    state.config = config;
    state.first_moment = GradientTape::zeros_like(net);
    state.second_moment = GradientTape::zeros_like(net);
    return state;
}

void optimizer_step(DenseNet& net, const GradientTape& tape, OptimizerState& state) {
    if (!tape.shaped_like(net) || !state.first_moment.shaped_like(net) || !state.second_moment.shaped_like(net)) {
        throw DimensionError("optimizer step: gradient or moment shapes do not match the network");
    }
    for (std::size_t i = 0; i < tape.layers.size(); ++i) {
        if (!tape.layers[i].weight.allFinite() || !tape.layers[i].bias.allFinite()) {
            throw NumericError("non-finite gradient in layer " + std::to_string(i), static_cast<std::ptrdiff_t>(i));
        }
    }
    const auto& cfg = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
        param.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
    };
    auto layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        update(layers[i].weight, tape.layers[i].weight, state.first_moment.layers[i].weight,
               state.second_moment.layers[i].weight);
        update(layers[i].bias, tape.layers[i].bias, state.first_moment.layers[i].bias,
               state.second_moment.layers[i].bias);
        if (!layers[i].weight.allFinite() || !layers[i].bias.allFinite()) {
            throw NumericError("non-finite parameter after update in layer " + std::to_string(i),
                               static_cast<std::ptrdiff_t>(i));
        }
    }
}

void soft_update(DenseNet& target, const DenseNet& online, double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw ArgumentError("soft update rate must lie in [0, 1]");
    }
    if (!target.same_architecture(online)) {
        throw DimensionError("soft update between different architectures");
    }
    auto t = target.layers();
    auto o = online.layers();
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i].weight = rho * o[i].weight + (1.0 - rho) * t[i].weight;
        t[i].bias = rho * o[i].bias + (1.0 - rho) * t[i].bias;
    }
}

namespace {

template <typename Derived>
void write_row_major(std::ostream& out, const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            io::write_le<double>(out, m(r, c));
        }
    }
}

template <typename Derived>
void read_row_major(io::Reader& reader, Eigen::MatrixBase<Derived>& m, const char* what) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            m(r, c) = reader.read<double>(what);
        }
    }
}

void write_tape(std::ostream& out, const GradientTape& tape) {
    for (const auto& l : tape.layers) {
        write_row_major(out, l.weight);
        write_row_major(out, l.bias);
    }
}

void read_tape(io::Reader& reader, GradientTape& tape) {
    for (auto& l : tape.layers) {
        read_row_major(reader, l.weight, "moment buffer");
        read_row_major(reader, l.bias, "moment buffer");
    }
}

}  // namespace

void save_checkpoint(std::ostream& out, const DenseNet& net) {
    out.write("BSTW", 4);
    io::write_le<std::uint32_t>(out, kCheckpointVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.layers().size()));
    io::write_le<std::uint8_t>(out, net.squashes_output() ? 1 : 0);
    for (const auto& l : net.layers()) {
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.in_width()));
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.out_width()));
        io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(l.activation));
    }
    for (const auto& l : net.layers()) {
        write_row_major(out, l.weight);
        write_row_major(out, l.bias);
    }
}

DenseNet load_checkpoint(std::istream& in) {
    io::Reader reader(in);
    reader.expect_magic("BSTW");
    const auto version_offset = reader.offset();
    const auto version = reader.read<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version), version_offset);
    }
    const auto count = reader.read<std::uint32_t>("layer count");
    if (count == 0 || count > 4096) {
        throw FormatError("implausible layer count " + std::to_string(count), reader.offset() - 4);
    }
    const bool squash = reader.read<std::uint8_t>("squash flag") != 0;
    std::vector<DenseLayer> layers(count);
    for (auto& l : layers) {
        const auto in_w = reader.read<std::uint32_t>("layer dims");
        const auto out_w = reader.read<std::uint32_t>("layer dims");
        const auto tag_offset = reader.offset();
        l.activation = activation_from_tag(reader.read<std::uint8_t>("activation"), tag_offset);
        if (in_w == 0 || out_w == 0 || in_w > (1u << 20) || out_w > (1u << 20)) {
            throw FormatError("implausible layer width", tag_offset);
        }
        l.weight.resize(out_w, in_w);
        l.bias.resize(out_w);
    }
    for (auto& l : layers) {
        read_row_major(reader, l.weight, "parameter blob");
        read_row_major(reader, l.bias, "parameter blob");
    }
    return DenseNet(std::move(layers), squash);
}

void save_optimizer(std::ostream& out, const OptimizerState& state) {
    out.write("BSTO", 4);
    io::write_le<std::uint32_t>(out, kOptimizerVersion);
    io::write_le<std::uint64_t>(out, state.step);
    io::write_le<double>(out, state.config.learning_rate);
    io::write_le<double>(out, state.config.beta1);
    io::write_le<double>(out, state.config.beta2);
    io::write_le<double>(out, state.config.epsilon);
    write_tape(out, state.first_moment);
    write_tape(out, state.second_moment);
}

OptimizerState load_optimizer(std::istream& in, const DenseNet& net) {
    io::Reader reader(in);
    reader.expect_magic("BSTO");
    const auto version_offset = reader.offset();
    if (reader.read<std::uint32_t>("version") != kOptimizerVersion) {
        throw FormatError("unsupported optimizer record version", version_offset);
    }
    AdamConfig config;
    const auto step = reader.read<std::uint64_t>("step");
    config.learning_rate = reader.read<double>("learning rate");
    config.beta1 = reader.read<double>("beta1");
    config.beta2 = reader.read<double>("beta2");
    config.epsilon = reader.read<double>("epsilon");
    auto state = OptimizerState::for_net(net, config);
    state.step = step;
    read_tape(reader, state.first_moment);
    read_tape(reader, state.second_moment);
    return state;
}

}  // namespace bst::nn
