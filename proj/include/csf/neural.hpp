#pragma once

// Multilayer perceptron with leaky-ReLU hidden layers, an optional learned
// linear skip from input to output, exact reverse-mode gradients, and an
// Adam optimizer. Parameters live in one flat vector.

#include "csf/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace csf {

struct MlpSpec {
    std::size_t input_dim = 16;
    std::size_t output_dim = 4;
    std::vector<std::size_t> hidden{256, 256};
    double negative_slope = 0.2;
    bool skip_connections = true;

    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Column-major block of the flat parameter vector.
struct ParamBlock {
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
};

struct DenseLayout {
    ParamBlock weight;
    ParamBlock bias;
};

struct ParamLayout {
    std::vector<DenseLayout> dense;
    std::optional<ParamBlock> skip;
    std::size_t total = 0;

    static ParamLayout from(const MlpSpec& spec);
};

/// Cached activations of a batched forward pass; enough for an exact
/// backward pass.
struct Tape {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> pre;  ///< hidden pre-activations
    std::vector<Eigen::MatrixXd> post; ///< hidden activations
};

struct Gradients {
    Eigen::VectorXd params;
    Eigen::MatrixXd input;
};

class Mlp {
public:
    explicit Mlp(MlpSpec spec);

    const MlpSpec& spec() const { return spec_; }
    const ParamLayout& layout() const { return layout_; }
    std::size_t param_count() const { return layout_.total; }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    Eigen::VectorXd init_params(Rng& rng) const;

    /// One sample per column. Records a tape when `tape` is non-null.
    Eigen::MatrixXd forward(const Eigen::VectorXd& params, const Eigen::MatrixXd& x, Tape* tape = nullptr) const;
    Eigen::VectorXd forward_one(const Eigen::VectorXd& params, const Eigen::VectorXd& x) const;

    /// Gradient of sum_ij upstream(i,j) * y(i,j) with respect to the
    /// parameters and the input.
    Gradients backward(const Eigen::VectorXd& params, const Tape& tape, const Eigen::MatrixXd& upstream) const;

private:
    void check_params(const Eigen::VectorXd& params) const;

    MlpSpec spec_;
    ParamLayout layout_;
};

struct OptimState {
    Eigen::VectorXd first_moment;
    Eigen::VectorXd second_moment;
    std::uint64_t step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t rejected_steps = 0;

    explicit OptimState(std::size_t param_count, double lr = 1e-3);
};

/// Bias-corrected Adam update in place. Returns false, leaving params and
/// moments untouched, when any gradient entry is non-finite.
bool optimizer_step(OptimState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

bool all_finite(const Eigen::VectorXd& v);

struct Checkpoint {
    MlpSpec spec;
    Eigen::VectorXd params;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

/// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian float64).
void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

} // namespace csf
