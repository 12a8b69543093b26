#include "bst/morse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "bst/binary_io.hpp"
#include "bst/errors.hpp"

namespace bst::morse {

namespace {

constexpr std::uint32_t kModelVersion = 1;

}  // namespace

void KernelSpec::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw ConfigError("kernel scale lambda must be positive, got " + std::to_string(scale));
    }
    if (kind == KernelKind::RationalQuadratic && (!(mixture > 0.0) || !std::isfinite(mixture))) {
        throw ConfigError("rational quadratic mixture kappa must be positive, got " + std::to_string(mixture));
    }
    if (kind != KernelKind::Rbf && kind != KernelKind::RationalQuadratic) {
        throw ConfigError("unknown kernel kind");
    }
}

double KernelSpec::value(double d2) const {
    const double half_l2 = 0.5 * scale * scale;
    if (kind == KernelKind::Rbf) {
        return std::exp(-half_l2 * d2);
    }
    return std::pow(1.0 + half_l2 * d2 / mixture, -mixture);
}

double KernelSpec::derivative(double d2) const {
    const double half_l2 = 0.5 * scale * scale;
    if (kind == KernelKind::Rbf) {
        return -half_l2 * std::exp(-half_l2 * d2);
    }
    return -half_l2 * std::pow(1.0 + half_l2 * d2 / mixture, -mixture - 1.0);
}

double KernelSpec::log_derivative(double d2) const {
    const double half_l2 = 0.5 * scale * scale;
    if (kind == KernelKind::Rbf) {
        return half_l2;
    }
    return half_l2 / (1.0 + half_l2 * d2 / mixture);
}

double KernelSpec::neg_log(double d2) const {
    const double half_l2 = 0.5 * scale * scale;
    if (kind == KernelKind::Rbf) {
        return half_l2 * d2;
    }
    return mixture * std::log1p(half_l2 * d2 / mixture);
}

double kernel_eval(const KernelSpec& spec, const Vector& z1, const Vector& z2) {
    spec.validate();
    if (z1.size() != z2.size()) {
        throw DimensionError("kernel arguments differ in dimension: " + std::to_string(z1.size()) + " vs " +
                             std::to_string(z2.size()));
    }
    return spec.value((z1 - z2).squaredNorm());
}

MorseModel::MorseModel(nn::DenseNet perturbation, KernelSpec kernel, int state_dim, int action_dim,
                       env::StateNormalizer normalizer)
    : net_(std::move(perturbation)),
      kernel_(kernel),
      state_dim_(state_dim),
      action_dim_(action_dim),
      normalizer_(std::move(normalizer)) {
    kernel_.validate();
    if (normalizer_.mean.size() == 0) {
        normalizer_ = env::StateNormalizer::identity(state_dim_);
    }
    if (net_.input_width() != state_dim_ + action_dim_) {
        throw DimensionError("perturbation network input width must equal state dim + action dim");
    }
    if (net_.output_width() != action_dim_) {
        throw DimensionError("perturbation network output width must equal the action dim");
    }
    if (normalizer_.mean.size() != state_dim_ || normalizer_.std.size() != state_dim_) {
        throw DimensionError("state normalizer does not match the state dim");
    }
}

MorseModel MorseModel::create(int state_dim, int action_dim, KernelSpec kernel, std::span<const int> hidden,
                              Rng& rng, env::StateNormalizer normalizer) {
    auto net = nn::DenseNet::mlp(state_dim + action_dim, hidden, action_dim, false, rng);
    return MorseModel(std::move(net), kernel, state_dim, action_dim, std::move(normalizer));
}

void MorseModel::set_kernel(const KernelSpec& k) {
    k.validate();
    kernel_ = k;
}

void MorseModel::check_dims(const Matrix& states, const Matrix& actions) const {
    if (states.rows() != state_dim_ || actions.rows() != action_dim_) {
        throw DimensionError("certainty query dims (" + std::to_string(states.rows()) + ", " +
                             std::to_string(actions.rows()) + ") do not match model dims (" +
                             std::to_string(state_dim_) + ", " + std::to_string(action_dim_) + ")");
    }
    if (states.cols() != actions.cols()) {
        throw DimensionError("state and action batches differ in size");
    }
}

Matrix MorseModel::network_input(const Matrix& states, const Matrix& actions) const {
    check_dims(states, actions);
    Matrix x(state_dim_ + action_dim_, states.cols());
    x.topRows(state_dim_) = normalizer_.apply(states);
    x.bottomRows(action_dim_) = actions;
    return x;
}

Vector MorseModel::squared_distances(const Matrix& states, const Matrix& actions) const {
    const Matrix f = net_.forward(network_input(states, actions));
    return (f - actions).colwise().squaredNorm().transpose();
}

Vector MorseModel::certainty_batch(const Matrix& states, const Matrix& actions) const {
    Vector d2 = squared_distances(states, actions);
    return d2.unaryExpr([this](double v) { return kernel_.value(v); });
}

double MorseModel::certainty(const Vector& s, const Vector& a) const {
    return certainty_batch(s, a)(0);
}

Vector MorseModel::uncertainty_batch(const Matrix& states, const Matrix& actions) const {
    return (1.0 - certainty_batch(states, actions).array()).matrix();
}

double MorseModel::uncertainty(const Vector& s, const Vector& a) const { return 1.0 - certainty(s, a); }

Vector MorseModel::energy_batch(const Matrix& states, const Matrix& actions) const {
    return certainty_batch(states, actions).unaryExpr([](double m) { return -std::log(std::max(m, kCertaintyFloor)); });
}

double MorseModel::energy(const Vector& s, const Vector& a) const { return energy_batch(s, a)(0); }

MorseBatch sample_morse_batch(const env::ReplayDataset& data, std::size_t batch_size, int uniform_per_state,
                              Rng& rng) {
    if (data.empty()) {
        throw ArgumentError("cannot sample a Morse batch from an empty dataset");
    }
    if (uniform_per_state < 1) {
        throw ArgumentError("uniform_per_state must be >= 1");
    }
    const auto n = static_cast<Eigen::Index>(batch_size);
    MorseBatch batch;
    batch.states.resize(data.state_dim(), n);
    batch.actions.resize(data.action_dim(), n);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    const auto states = data.states();
    const auto actions = data.actions();
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto j = static_cast<Eigen::Index>(pick(rng));
        batch.states.col(i) = states.col(j);
        batch.actions.col(i) = actions.col(j);
    }
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    batch.uniform_actions.resize(data.action_dim(), n * uniform_per_state);
    for (Eigen::Index c = 0; c < batch.uniform_actions.cols(); ++c) {
        for (Eigen::Index r = 0; r < batch.uniform_actions.rows(); ++r) {
            batch.uniform_actions(r, c) = uni(rng);
        }
    }
    return batch;
}

MorseLoss morse_loss(const MorseModel& model, const MorseBatch& batch) {
    const auto n = batch.states.cols();
    if (n == 0) {
        throw ArgumentError("Morse loss on an empty batch");
    }
    if (batch.actions.cols() != n || batch.uniform_actions.cols() == 0 || batch.uniform_actions.cols() % n != 0) {
        throw DimensionError("Morse batch arrays are misaligned");
    }
    const auto u = batch.uniform_actions.cols();
    const int ds = model.state_dim();
    const int k = model.action_dim();

    Matrix targets(k, n + u);
    targets.leftCols(n) = batch.actions;
    targets.rightCols(u) = batch.uniform_actions;
    Matrix states(ds, n + u);
    states.leftCols(n) = batch.states;
    for (Eigen::Index j = 0; j < u; j += n) {
        states.middleCols(n + j, n) = batch.states;
    }

    nn::ForwardTrace trace;
    const Matrix f = model.perturbation().forward(model.network_input(states, targets), trace);
    const Matrix residual = f - targets;
    const Vector d2 = residual.colwise().squaredNorm().transpose();

    const auto& kernel = model.kernel();
    MorseLoss loss;
    Matrix grad(k, n + u);
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_u = 1.0 / static_cast<double>(u);
    for (Eigen::Index i = 0; i < n; ++i) {
        loss.data_term += kernel.neg_log(d2(i)) * inv_n;
        grad.col(i) = (2.0 * inv_n * kernel.log_derivative(d2(i))) * residual.col(i);
    }
    for (Eigen::Index j = n; j < n + u; ++j) {
        loss.uniform_term += kernel.value(d2(j)) * inv_u;
        grad.col(j) = (2.0 * inv_u * kernel.derivative(d2(j))) * residual.col(j);
    }
    loss.value = loss.data_term + loss.uniform_term;
    loss.gradient = nn::backward(model.perturbation(), trace, grad).tape;
    return loss;
}

MorseTrainResult train_morse(const env::ReplayDataset& data, const MorseTrainConfig& config, std::uint64_t seed) {
    if (data.empty()) {
        throw ArgumentError("train_morse: dataset is empty");
    }
    if (config.steps == 0) {
        throw ArgumentError("train_morse: the number of training steps must be >= 1");
    }
    if (config.batch_size == 0) {
        throw ArgumentError("train_morse: batch size must be >= 1");
    }
    KernelSpec kernel = config.kernel;
    if (config.scale_from_action_dim) {
        kernel.scale = 0.5 * static_cast<double>(data.action_dim());
    }
    kernel.validate();

    Rng rng(seed);
    auto normalizer = config.normalize_states ? env::StateNormalizer::fit(data)
                                              : env::StateNormalizer::identity(data.state_dim());
    MorseTrainResult result;
    result.model = MorseModel::create(data.state_dim(), data.action_dim(), kernel, config.hidden, rng,
                                      std::move(normalizer));
    auto opt = nn::OptimizerState::for_net(result.model.perturbation(), config.adam);
    result.loss_history.reserve(config.steps);
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto batch = sample_morse_batch(data, config.batch_size, config.uniform_per_state, rng);
        auto loss = morse_loss(result.model, batch);
        if (!std::isfinite(loss.value)) {
            throw NumericError("Morse loss became non-finite at step " + std::to_string(step));
        }
        nn::optimizer_step(result.model.perturbation(), loss.gradient, opt);
        result.loss_history.push_back(loss.value);
    }
    return result;
}

double grid_coordinate(int index, int resolution) {
    if (resolution == 1) {
        return 0.0;
    }
    return -1.0 + 2.0 * static_cast<double>(index) / static_cast<double>(resolution - 1);
}

Matrix density_grid(const MorseModel& model, const Vector& state, int resolution) {
    if (model.action_dim() != 2) {
        throw UnsupportedError("density grids are only defined for 2-D actions, model has " +
                               std::to_string(model.action_dim()));
    }
    if (resolution < 1) {
        throw ArgumentError("grid resolution must be >= 1");
    }
    if (state.size() != model.state_dim()) {
        throw DimensionError("grid state dim does not match the model");
    }
    const auto cells = static_cast<Eigen::Index>(resolution) * resolution;
    Matrix states = state.replicate(1, cells);
    Matrix actions(2, cells);
    for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
            const auto c = static_cast<Eigen::Index>(i) * resolution + j;
            actions(0, c) = grid_coordinate(j, resolution);
            actions(1, c) = grid_coordinate(i, resolution);
        }
    }
    const Vector m = model.certainty_batch(states, actions);
    Matrix grid(resolution, resolution);
    for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
            grid(i, j) = m(static_cast<Eigen::Index>(i) * resolution + j);
        }
    }
    return grid;
}

void save_model(std::ostream& out, const MorseModel& model) {
    out.write("BSTM", 4);
    io::write_le<std::uint32_t>(out, kModelVersion);
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(model.kernel().kind));
    io::write_le<double>(out, model.kernel().scale);
    io::write_le<double>(out, model.kernel().mixture);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.state_dim()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.action_dim()));
    for (Eigen::Index i = 0; i < model.normalizer().mean.size(); ++i) {
        io::write_le<double>(out, model.normalizer().mean(i));
        io::write_le<double>(out, model.normalizer().std(i));
    }
    nn::save_checkpoint(out, model.perturbation());
}

MorseModel load_model(std::istream& in) {
    io::Reader reader(in);
    reader.expect_magic("BSTM");
    const auto version_offset = reader.offset();
    if (reader.read<std::uint32_t>("version") != kModelVersion) {
        throw FormatError("unsupported Morse model version", version_offset);
    }
    KernelSpec kernel;
    const auto kind_offset = reader.offset();
    const auto kind = reader.read<std::uint8_t>("kernel kind");
    if (kind > 1) {
        throw FormatError("unknown kernel kind " + std::to_string(kind), kind_offset);
    }
    kernel.kind = static_cast<KernelKind>(kind);
    kernel.scale = reader.read<double>("kernel scale");
    kernel.mixture = reader.read<double>("kernel mixture");
    const auto ds = reader.read<std::uint32_t>("state dim");
    const auto da = reader.read<std::uint32_t>("action dim");
    if (ds == 0 || da == 0 || ds > 65536 || da > 65536) {
        throw FormatError("implausible model dims", reader.offset());
    }
    env::StateNormalizer norm;
    norm.mean.resize(ds);
    norm.std.resize(ds);
    for (std::uint32_t i = 0; i < ds; ++i) {
        norm.mean(i) = reader.read<double>("normalizer");
        norm.std(i) = reader.read<double>("normalizer");
    }
    auto net = nn::load_checkpoint(in);
    return MorseModel(std::move(net), kernel, static_cast<int>(ds), static_cast<int>(da), std::move(norm));
}

void save_model(const std::filesystem::path& path, const MorseModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    save_model(out, model);
}

MorseModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open Morse model " + path.string());
    }
    return load_model(in);
}

}  // namespace bst::morse
