#pragma once

// Morse networks: a perturbation network f(s, a) composed with a Morse
// kernel against the input action, giving a certainty M(s, a) in [0, 1]
// that equals 1 exactly where f(s, a) = a.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "bst/envdata.hpp"
#include "bst/nn.hpp"

namespace bst::morse {

using nn::Matrix;
using nn::Vector;

enum class KernelKind : std::uint8_t { Rbf = 0, RationalQuadratic = 1 };

struct KernelSpec {
    KernelKind kind = KernelKind::RationalQuadratic;
    double scale = 1.0;    // lambda
    double mixture = 1.0;  // kappa, rational quadratic only

    void validate() const;

    // Kernel value and derivatives as functions of the squared distance.
    double value(double squared_distance) const;
    // d K / d(squared distance)
    double derivative(double squared_distance) const;
    // d(-log K) / d(squared distance)
    double log_derivative(double squared_distance) const;
    // -log K, computed without forming K
    double neg_log(double squared_distance) const;
};

double kernel_eval(const KernelSpec& spec, const Vector& z1, const Vector& z2);

class MorseModel {
public:
    MorseModel() = default;
    MorseModel(nn::DenseNet perturbation, KernelSpec kernel, int state_dim, int action_dim,
               env::StateNormalizer normalizer);

    static MorseModel create(int state_dim, int action_dim, KernelSpec kernel, std::span<const int> hidden,
                             Rng& rng, env::StateNormalizer normalizer = {});

    const nn::DenseNet& perturbation() const { return net_; }
    nn::DenseNet& perturbation() { return net_; }
    const KernelSpec& kernel() const { return kernel_; }
    void set_kernel(const KernelSpec& k);
    int state_dim() const { return state_dim_; }
    int action_dim() const { return action_dim_; }
    const env::StateNormalizer& normalizer() const { return normalizer_; }

    // Network input: normalized state stacked over the action.
    Matrix network_input(const Matrix& states, const Matrix& actions) const;
    // Squared latent distances ||f(s, a) - a||^2, one per column.
    Vector squared_distances(const Matrix& states, const Matrix& actions) const;

    double certainty(const Vector& s, const Vector& a) const;
    Vector certainty_batch(const Matrix& states, const Matrix& actions) const;
    double uncertainty(const Vector& s, const Vector& a) const;
    Vector uncertainty_batch(const Matrix& states, const Matrix& actions) const;
    // -log M with M clamped below at kCertaintyFloor.
    double energy(const Vector& s, const Vector& a) const;
    Vector energy_batch(const Matrix& states, const Matrix& actions) const;

    static constexpr double kCertaintyFloor = 1e-12;

private:
    void check_dims(const Matrix& states, const Matrix& actions) const;

    nn::DenseNet net_;
    KernelSpec kernel_;
    int state_dim_ = 0;
    int action_dim_ = 0;
    env::StateNormalizer normalizer_;
};

// `uniform_actions` holds `uniform_per_state` blocks of N columns; block j
// pairs column i with states.col(i).
struct MorseBatch {
    Matrix states;
    Matrix actions;
    Matrix uniform_actions;

    std::size_t size() const { return static_cast<std::size_t>(states.cols()); }
};

MorseBatch sample_morse_batch(const env::ReplayDataset& data, std::size_t batch_size, int uniform_per_state,
                              Rng& rng);

struct MorseLoss {
    double value = 0.0;
    double data_term = 0.0;     // -(1/N) sum log K(f(s,a), a)
    double uniform_term = 0.0;  // mean K(f(s,a_u), a_u)
    nn::GradientTape gradient;
};

// Empirical objective with gradients for the perturbation network.
MorseLoss morse_loss(const MorseModel& model, const MorseBatch& batch);

struct MorseTrainConfig {
    KernelSpec kernel{};
    bool scale_from_action_dim = true;  // lambda = k / 2 unless explicitly set
    std::vector<int> hidden{256, 256, 256, 256};
    std::size_t steps = 20000;
    std::size_t batch_size = 256;
    int uniform_per_state = 1;
    nn::AdamConfig adam{};
    bool normalize_states = true;
};

struct MorseTrainResult {
    MorseModel model;
    std::vector<double> loss_history;
};

MorseTrainResult train_morse(const env::ReplayDataset& data, const MorseTrainConfig& config, std::uint64_t seed);

// resolution x resolution certainties over [-1, 1]^2; entry (i, j) is at
// action (x_j, y_i) with x_j = -1 + 2 j / (resolution - 1).
Matrix density_grid(const MorseModel& model, const Vector& state, int resolution);
double grid_coordinate(int index, int resolution);

// "BSTM" record: magic, u32 version, u8 kernel kind, f64 lambda, f64 kappa,
// u32 state dim, u32 action dim, f64 normalizer mean and std per state
// dimension, then the perturbation network as a BSTW checkpoint.
void save_model(std::ostream& out, const MorseModel& model);
MorseModel load_model(std::istream& in);
void save_model(const std::filesystem::path& path, const MorseModel& model);
MorseModel load_model(const std::filesystem::path& path);

}  // namespace bst::morse
