#pragma once

// Evaluation metrics: held-out linear identifiability fits, state coverage,
// zero-shot oracle return, feature-geometry diagnostics and skill-set
// conditioning.

#include "csf/dgp.hpp"
#include "csf/geometry.hpp"
#include "csf/neural.hpp"
#include "csf/policy.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

namespace csf {

struct LinearFitResult {
    Eigen::MatrixXd map;        ///< d_target x d_feature
    Eigen::VectorXd intercept;  ///< d_target
    Eigen::VectorXd r2_per_dim; ///< held-out
    double r2_aggregate = 0.0;  ///< target-variance weighted
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    bool ridge_fallback = false;
};

inline constexpr double kTrainFraction = 0.8;
inline constexpr double kRidgeFallbackLambda = 1e-8;

/// Least squares target ~ map * feature + intercept, fit on a seeded 80%
/// split and scored on the remaining 20%. Features and targets hold one
/// sample per column.
LinearFitResult fit_linear_map(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets,
                               std::uint64_t split_seed);

/// Pairs of latent states with unit-length steps used to probe an encoder.
struct ProbeSet {
    Eigen::MatrixXd states;
    Eigen::MatrixXd next_states;
};

/// States drawn like episode starts, steps uniform on the sphere.
ProbeSet make_probe_set(const EnvConfig& env, std::size_t n, Rng& rng);

struct IdentifiabilityResult {
    LinearFitResult state_fit; ///< s ~ A phi(g(s))
    LinearFitResult diff_fit;  ///< s' - s ~ A (phi(g(s')) - phi(g(s)))
    double r2_state() const { return state_fit.r2_aggregate; }
    double r2_diff() const { return diff_fit.r2_aggregate; }
};

inline constexpr std::size_t kMinProbeStates = 1000;

IdentifiabilityResult identifiability_probe(const Mlp& encoder, const Eigen::VectorXd& params,
                                            const Generator& generator, const ProbeSet& probe,
                                            std::uint64_t split_seed);

/// Same probe for an arbitrary feature map (one observation per column).
IdentifiabilityResult identifiability_probe(const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& features,
                                            const Generator& generator, const ProbeSet& probe,
                                            std::uint64_t split_seed);

struct CoverageReport {
    std::size_t grid = 0;
    double cell_length = 0.0;
    std::vector<std::uint64_t> cells; ///< sorted ids of occupied cells
    std::size_t occupied() const { return cells.size(); }
    /// Occupied cells over the union of cells of a comparison set; filled
    /// by `relative_coverage`.
    double fraction = 1.0;
};

/// Bins latent states (first two coordinates) into a G x G grid of
/// half-open cells over [-B, B]^2.
CoverageReport state_coverage(const std::vector<Trajectory>& trajectories, std::size_t grid, double half_width);

/// Adds the states of more trajectories to an existing report.
void extend_coverage(CoverageReport& report, const std::vector<Trajectory>& trajectories, double half_width);

/// Sets each report's fraction relative to the union of all reports.
void relative_coverage(std::vector<CoverageReport*> reports);

struct OracleReturnReport {
    UnitVector task;
    std::vector<double> per_skill;
    std::size_t best_skill = 0;
    double oracle_return = 0.0;
};

/// Per-skill return sum_t <w, s_{t+1} - s_t> (= <w, s_T - s_0>) from `start`;
/// the oracle return is the best skill's. Discounting with gamma < 1 weights
/// step t by gamma^t.
OracleReturnReport oracle_return(const PolicyKind& policy, const PolicyContext& context,
                                 const std::vector<UnitVector>& skills, const UnitVector& task, std::size_t horizon,
                                 const LatentState& start, Rng& rng, double gamma = 1.0);

struct GeometryDiagnostics {
    double mean_abs_cos_pair = 0.0;  ///< mean |cos(phi(o), phi(o'))|
    double mean_cos_diff_skill = 0.0; ///< mean cos(phi(o') - phi(o), z)
    double diff_norm_mean = 0.0;
    double diff_norm_sd = 0.0;
    std::size_t excluded = 0; ///< zero-norm feature differences
    std::size_t excluded_pairs = 0; ///< zero-norm features in the pair cosine
    std::size_t count = 0;
};

GeometryDiagnostics geometry_diagnostics(const Mlp& encoder, const Eigen::VectorXd& params,
                                         const std::vector<TransitionRecord>& transitions);

/// Same diagnostics from precomputed features (one column per transition).
GeometryDiagnostics geometry_diagnostics(const Eigen::MatrixXd& phi_from, const Eigen::MatrixXd& phi_to,
                                         const Eigen::MatrixXd& skills);

/// Smallest singular value of the centered skill matrix.
double skill_conditioning(const SkillSet& skills);

} // namespace csf
