#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "bst/binary_io.hpp"
#include "bst/envdata.hpp"
#include "bst/errors.hpp"

namespace bst::env {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

void append(std::vector<double>& dst, const Vector& v, int expected, const char* what) {
    if (v.size() != expected) {
        throw DimensionError(std::string(what) + " has dim " + std::to_string(v.size()) + ", expected " +
                             std::to_string(expected));
    }
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        dst.push_back(to_storage(v(i)));
    }
}

void read_f32(io::Reader& reader, std::vector<double>& values, std::size_t count, const char* what) {
    values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        values[i] = static_cast<double>(reader.read<float>(what));
    }
}

}  // namespace

ReplayDataset::ReplayDataset(int state_dim, int action_dim) : state_dim_(state_dim), action_dim_(action_dim) {
    if (state_dim <= 0 || action_dim <= 0) {
        throw DimensionError("dataset dims must be positive");
    }
}

void ReplayDataset::reserve(std::size_t n) {
    states_.reserve(n * state_dim_);
    next_states_.reserve(n * state_dim_);
    actions_.reserve(n * action_dim_);
    rewards_.reserve(n);
    dones_.reserve(n);
}

void ReplayDataset::begin_episode() {
    const auto start = static_cast<std::uint64_t>(size());
    if (episode_starts_.empty() || episode_starts_.back() != start) {
        episode_starts_.push_back(start);
    }
}

void ReplayDataset::add(const Transition& t) {
    if (!std::isfinite(t.reward)) {
        throw NumericError("transition reward is not finite");
    }
    for (Eigen::Index i = 0; i < t.action.size(); ++i) {
        if (!(t.action(i) >= -1.0 && t.action(i) <= 1.0)) {
            throw ArgumentError("transition action component outside [-1, 1]");
        }
    }
    if (episode_starts_.empty()) {
        episode_starts_.push_back(0);
    }
    append(states_, t.state, state_dim_, "state");
    append(actions_, t.action, action_dim_, "action");
    append(next_states_, t.next_state, state_dim_, "next state");
    rewards_.push_back(to_storage(t.reward));
    dones_.push_back(t.done ? 1 : 0);
}

Transition ReplayDataset::at(std::size_t i) const {
    if (i >= size()) {
        throw ArgumentError("transition index out of range");
    }
    const auto c = static_cast<Eigen::Index>(i);
    return {states().col(c), actions().col(c), rewards_[i], next_states().col(c), dones_[i] != 0};
}

Eigen::Map<const Matrix> ReplayDataset::states() const {
    return {states_.data(), state_dim_, static_cast<Eigen::Index>(size())};
}

Eigen::Map<const Matrix> ReplayDataset::actions() const {
    return {actions_.data(), action_dim_, static_cast<Eigen::Index>(size())};
}

Eigen::Map<const Matrix> ReplayDataset::next_states() const {
    return {next_states_.data(), state_dim_, static_cast<Eigen::Index>(size())};
}

Eigen::Map<const Vector> ReplayDataset::rewards() const {
    return {rewards_.data(), static_cast<Eigen::Index>(size())};
}

void ReplayDataset::validate() const {
    const std::size_t n = size();
    if (states_.size() != n * state_dim_ || next_states_.size() != n * state_dim_ ||
        actions_.size() != n * action_dim_ || dones_.size() != n) {
        throw StateError("dataset arrays differ in length");
    }
    for (std::size_t i = 0; i < episode_starts_.size(); ++i) {
        if (episode_starts_[i] >= std::max<std::size_t>(n, 1) || (i > 0 && episode_starts_[i] <= episode_starts_[i - 1])) {
            throw StateError("episode boundaries must be strictly increasing and within range");
        }
    }
    for (double a : actions_) {
        if (!(a >= -1.0 && a <= 1.0)) {
            throw StateError("dataset action outside [-1, 1]");
        }
    }
    for (double r : rewards_) {
        if (!std::isfinite(r)) {
            throw StateError("dataset reward is not finite");
        }
    }
}

bool operator==(const ReplayDataset& a, const ReplayDataset& b) {
    return a.state_dim_ == b.state_dim_ && a.action_dim_ == b.action_dim_ && a.states_ == b.states_ &&
           a.actions_ == b.actions_ && a.rewards_ == b.rewards_ && a.next_states_ == b.next_states_ &&
           a.dones_ == b.dones_ && a.episode_starts_ == b.episode_starts_;
}

Batch gather_batch(const ReplayDataset& data, std::span<const std::size_t> indices) {
    const auto n = static_cast<Eigen::Index>(indices.size());
    Batch b;
    b.states.resize(data.state_dim(), n);
    b.next_states.resize(data.state_dim(), n);
    b.actions.resize(data.action_dim(), n);
    b.rewards.resize(n);
    b.dones.resize(n);
    const auto s = data.states();
    const auto a = data.actions();
    const auto s2 = data.next_states();
    const auto r = data.rewards();
    const auto d = data.dones();
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto j = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(i)]);
        b.states.col(i) = s.col(j);
        b.actions.col(i) = a.col(j);
        b.next_states.col(i) = s2.col(j);
        b.rewards(i) = r(j);
        b.dones(i) = d[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
    }
    return b;
}

Batch sample_batch(const ReplayDataset& data, std::size_t batch_size, Rng& rng) {
    if (data.empty()) {
        throw ArgumentError("cannot sample from an empty dataset");
    }
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) {
        i = pick(rng);
    }
    return gather_batch(data, idx);
}

StateNormalizer StateNormalizer::identity(int dim) {
    return {Vector::Zero(dim), Vector::Ones(dim)};
}

StateNormalizer StateNormalizer::fit(const ReplayDataset& data) {
    if (data.empty()) {
        return identity(data.state_dim());
    }
    const auto s = data.states();
    StateNormalizer n;
    n.mean = s.rowwise().mean();
    const Matrix centered = s.colwise() - n.mean;
    n.std = (centered.rowwise().squaredNorm() / static_cast<double>(s.cols())).cwiseSqrt().cwiseMax(1e-3);
    return n;
}

Matrix StateNormalizer::apply(const Matrix& states) const {
    if (states.rows() != mean.size()) {
        throw DimensionError("state normalizer dim mismatch");
    }
    return (states.colwise() - mean).array().colwise() / std.array();
}

Vector StateNormalizer::apply(const Vector& state) const {
    if (state.size() != mean.size()) {
        throw DimensionError("state normalizer dim mismatch");
    }
    return (state - mean).cwiseQuotient(std);
}

void save_dataset(std::ostream& out, const ReplayDataset& data) {
    data.validate();
    out.write("BSTD", 4);
    io::write_le<std::uint32_t>(out, kDatasetVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.state_dim()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.action_dim()));
    io::write_le<std::uint64_t>(out, data.size());
    io::write_le<std::uint64_t>(out, data.episode_starts().size());
    const auto s = data.states();
    const auto a = data.actions();
    const auto s2 = data.next_states();
    for (Eigen::Index i = 0; i < s.size(); ++i) io::write_le<float>(out, static_cast<float>(s.data()[i]));
    for (Eigen::Index i = 0; i < a.size(); ++i) io::write_le<float>(out, static_cast<float>(a.data()[i]));
    for (std::size_t i = 0; i < data.size(); ++i) io::write_le<float>(out, static_cast<float>(data.rewards()(static_cast<Eigen::Index>(i))));
    for (Eigen::Index i = 0; i < s2.size(); ++i) io::write_le<float>(out, static_cast<float>(s2.data()[i]));
    for (auto d : data.dones()) io::write_le<std::uint8_t>(out, d);
    for (auto e : data.episode_starts()) io::write_le<std::uint64_t>(out, e);
}

ReplayDataset load_dataset(std::istream& in) {
    io::Reader reader(in);
    reader.expect_magic("BSTD");
    const auto version_offset = reader.offset();
    const auto version = reader.read<std::uint32_t>("version");
    if (version != kDatasetVersion) {
        throw FormatError("unsupported dataset version " + std::to_string(version), version_offset);
    }
    const auto ds = reader.read<std::uint32_t>("state dim");
    const auto da = reader.read<std::uint32_t>("action dim");
    if (ds == 0 || da == 0 || ds > 65536 || da > 65536) {
        throw FormatError("implausible dataset dims", reader.offset());
    }
    const auto n = reader.read<std::uint64_t>("transition count");
    const auto episodes = reader.read<std::uint64_t>("episode count");
    if (n > (1ULL << 36) || episodes > n + 1) {
        throw FormatError("implausible dataset counts", reader.offset());
    }
    ReplayDataset data(static_cast<int>(ds), static_cast<int>(da));
    read_f32(reader, data.states_, n * ds, "states array");
    read_f32(reader, data.actions_, n * da, "actions array");
    read_f32(reader, data.rewards_, n, "rewards array");
    read_f32(reader, data.next_states_, n * ds, "next_states array");
    data.dones_.resize(n);
    for (auto& d : data.dones_) {
        d = reader.read<std::uint8_t>("dones array");
    }
    data.episode_starts_.resize(episodes);
    for (auto& e : data.episode_starts_) {
        e = reader.read<std::uint64_t>("episode_starts array");
    }
    try {
        data.validate();
    } catch (const StateError& e) {
        throw FormatError(e.what(), reader.offset());
    }
    return data;
}

void save_dataset(const std::filesystem::path& path, const ReplayDataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    save_dataset(out, data);
}

ReplayDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open dataset " + path.string());
    }
    return load_dataset(in);
}

Matrix permuted_actions(const ReplayDataset& data, std::uint64_t seed) {
    if (data.size() < 2) {
        throw ArgumentError("permuted_actions needs at least two transitions");
    }
    std::vector<std::size_t> perm(data.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        perm[i] = i;
    }
    // Sattolo's algorithm: a uniformly random single cycle.
    Rng rng(seed);
    for (std::size_t i = perm.size() - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(perm[i], perm[pick(rng)]);
    }
    const auto a = data.actions();
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.col(static_cast<Eigen::Index>(i)) = a.col(static_cast<Eigen::Index>(perm[i]));
    }
    return out;
}

}  // namespace bst::env
