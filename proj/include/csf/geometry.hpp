#pragma once

// Directional statistics on the hypersphere S^{d-1}: uniform and
// von Mises-Fisher sampling, the vMF log density, and affine-generator
// diagnostics for skill sets.

#include "csf/rng.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace csf {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A point on S^{d-1}. Construction checks the norm; use `normalized` to
/// project an arbitrary nonzero vector.
class UnitVector {
public:
    static constexpr double kNormTolerance = 1e-9;

    explicit UnitVector(Eigen::VectorXd coords);

    static UnitVector normalized(const Eigen::VectorXd& v);
    static UnitVector basis(std::size_t d, std::size_t axis);

    const Eigen::VectorXd& coords() const { return coords_; }
    std::size_t dim() const { return static_cast<std::size_t>(coords_.size()); }
    double dot(const Eigen::VectorXd& v) const { return coords_.dot(v); }
    double operator[](std::size_t i) const { return coords_[static_cast<Eigen::Index>(i)]; }

    friend bool operator==(const UnitVector& a, const UnitVector& b) { return a.coords_ == b.coords_; }

private:
    Eigen::VectorXd coords_;
};

struct VmfParams {
    UnitVector mean;
    double kappa = 0.0;

    VmfParams(UnitVector mean_direction, double concentration);
};

enum class SkillMode { FixedSet, ResampleEachBatch };

struct SkillSet {
    std::vector<UnitVector> skills;
    SkillMode mode = SkillMode::FixedSet;

    SkillSet(std::vector<UnitVector> members, SkillMode skill_mode);

    std::size_t dim() const { return skills.front().dim(); }
    std::size_t size() const { return skills.size(); }

    /// `count` uniform draws on S^{d-1}.
    static SkillSet sample_uniform(std::size_t count, std::size_t d, SkillMode mode, Rng& rng);
    /// Refreshes the current draw in resample mode; no-op for a fixed set.
    void refresh(Rng& rng);
};

UnitVector sample_uniform_sphere(std::size_t d, Rng& rng);
UnitVector sample_vmf(const VmfParams& params, Rng& rng);

/// log I_nu(x) for nu >= 0, x >= 0. Power series below 50, exponentially
/// scaled large-argument expansion above.
double log_bessel_i(double nu, double x);

/// Log of the vMF normalizer C_d(kappa) with respect to surface measure.
double vmf_log_normalizer(std::size_t d, double kappa);

double vmf_log_density(const VmfParams& params, const UnitVector& x);

/// Mean resultant length A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa).
double vmf_mean_resultant_length(std::size_t d, double kappa);

struct AffineGeneratorReport {
    bool is_generator = false;
    std::size_t rank = 0;
    /// Smallest singular value above the rank tolerance of [z_i - z_1].
    double smallest_nonzero_singular = 0.0;
    /// Smallest of the d singular values of the column-centered skill matrix.
    double centered_min_singular = 0.0;
};

inline constexpr double kRankRelativeTolerance = 1e-8;

AffineGeneratorReport is_affine_generator(const SkillSet& skills);

/// Smallest singular value of the d x n matrix of centered skills; zero when
/// fewer than d + 1 skills are present.
double centered_min_singular(const std::vector<UnitVector>& skills);

/// d x n matrix with one skill per column.
Eigen::MatrixXd skill_matrix(const std::vector<UnitVector>& skills);

} // namespace csf
