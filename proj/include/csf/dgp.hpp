#pragma once

// Synthetic ground-truth world: a latent random walk with unit-length steps
// inside a box, and an injective piecewise-linear generator o = g(s).

#include "csf/geometry.hpp"
#include "csf/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <vector>

namespace csf {

using LatentState = Eigen::VectorXd;
using Observation = Eigen::VectorXd;

class DegenerateSpecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GeneratorSpec {
    std::size_t d = 4;
    std::size_t D = 16;
    /// Widths must be non-decreasing, at least d, and at most D so every
    /// layer map has full column rank.
    std::vector<std::size_t> hidden_layers{16, 16};
    /// Negative-side slope of the invertible leaky activation, in (0, 1).
    double activation_slope = 0.5;
    /// States are multiplied by this before the first layer.
    double input_scale = 0.04;
    std::uint64_t seed = 0;
    /// With no hidden layers and D == d, g is exactly the identity.
    bool identity = false;
};

struct GeneratorLayer {
    Eigen::MatrixXd weight;
    Eigen::VectorXd bias;
    bool activated = true;
};

/// Continuous injective map R^d -> R^D. Immutable after construction.
class Generator {
public:
    const GeneratorSpec& spec() const { return spec_; }
    const std::vector<GeneratorLayer>& layers() const { return layers_; }

    Observation operator()(const LatentState& s) const;
    /// Batched: one state per column.
    Eigen::MatrixXd apply(const Eigen::MatrixXd& states) const;
    /// Exact left inverse on the image of g.
    LatentState invert(const Observation& o) const;

    /// Product of layer spectral norms times the input scale.
    double lipschitz_bound() const { return lipschitz_bound_; }
    /// Smallest singular value of each weight matrix.
    const std::vector<double>& min_singular_values() const { return min_singular_; }

private:
    friend Generator make_generator(const GeneratorSpec& spec);
    Generator() = default;

    GeneratorSpec spec_;
    std::vector<GeneratorLayer> layers_;
    std::vector<Eigen::ColPivHouseholderQR<Eigen::MatrixXd>> solvers_;
    double lipschitz_bound_ = 0.0;
    std::vector<double> min_singular_;
};

inline constexpr double kGeneratorConditionRatio = 1e-3;
inline constexpr double kGeneratorMinSingular = 1e-6;
inline constexpr int kGeneratorMaxAttempts = 100;

Generator make_generator(const GeneratorSpec& spec);

enum class BoundaryRule { Reflect, Clamp };

struct EnvConfig {
    std::size_t d = 4;
    double B = 50.0;
    BoundaryRule boundary = BoundaryRule::Reflect;
    double kappa_env = 10.0;
    std::size_t horizon = 200;

    /// False when boundary contact is likely to be frequent.
    bool boundary_margin_ok() const { return B > static_cast<double>(horizon) / 10.0; }
};

struct StepResult {
    LatentState s_next;
    bool boundary = false;
};

StepResult env_step(const EnvConfig& config, const LatentState& s, const UnitVector& a);

/// Uniform over [-B/2, B/2]^d.
LatentState sample_episode_start(const EnvConfig& config, Rng& rng);

struct TransitionRecord {
    std::size_t episode = 0;
    std::size_t t = 0;
    LatentState s;
    Observation o;
    UnitVector z;
    UnitVector a;
    LatentState s_next;
    Observation o_next;
    bool boundary = false;
};

struct LatentTransition {
    UnitVector z;
    LatentState s;
    LatentState s_next;
};

/// z ~ Uniform(S^{d-1}), s ~ Uniform([-half_width, half_width]^d),
/// s_next - s ~ vMF(z, kappa). No policy or boundary is involved.
std::vector<LatentTransition> generate_assumption1_dataset(std::size_t n, std::size_t d, double kappa, Rng& rng,
                                                           double half_width = 25.0);

/// Attaches observations g(s), g(s_next) to latent transitions.
std::vector<TransitionRecord> observe(const Generator& g, const std::vector<LatentTransition>& data);

/// CSV with columns episode,t,s*,o*,z*,s'*,o'*,boundary_flag. When
/// `trajectory_ids` is given (one per record) a leading trajectory column is
/// written.
void write_transitions_csv(std::ostream& out, const std::vector<TransitionRecord>& records,
                           const std::vector<std::size_t>* trajectory_ids = nullptr);

} // namespace csf
