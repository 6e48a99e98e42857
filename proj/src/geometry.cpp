#include "csf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

namespace csf {

namespace {

constexpr double kBesselSeriesCutoff = 50.0;

double log_bessel_series(double nu, double x)
{
    const double half = 0.5 * x;
    const double q = half * half;
    // Sum relative to the m = 0 term.
    double term = 1.0;
    double sum = 1.0;
    for (int m = 0; m < 100000; ++m) {
        term *= q / ((m + 1.0) * (m + nu + 1.0));
        sum += term;
        if (m > half && term < 1e-17 * sum) {
            break;
        }
    }
    return nu * std::log(half) - std::lgamma(nu + 1.0) + std::log(sum);
}

double log_bessel_asymptotic(double nu, double x)
{
    const double mu = 4.0 * nu * nu;
    double term = 1.0;
    double sum = 1.0;
    double previous = std::numeric_limits<double>::infinity();
    for (int k = 1; k < 64; ++k) {
        const double odd = 2.0 * k - 1.0;
        term *= -(mu - odd * odd) / (k * 8.0 * x);
        if (std::abs(term) >= previous) {
            break; // divergent tail of the asymptotic series
        }
        sum += term;
        previous = std::abs(term);
        if (previous < 1e-17 * std::abs(sum)) {
            break;
        }
    }
    return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}

void require_dim(std::size_t d)
{
    if (d == 0) {
        throw DimensionError("dimension must be at least 1");
    }
}

} // namespace

UnitVector::UnitVector(Eigen::VectorXd coords) : coords_(std::move(coords))
{
    if (coords_.size() == 0) {
        throw DimensionError("unit vector needs d >= 1");
    }
    const double norm = coords_.norm();
    if (!(std::abs(norm - 1.0) <= kNormTolerance)) {
        throw std::invalid_argument("vector is not unit norm (norm = " + std::to_string(norm) + ")");
    }
}

UnitVector UnitVector::normalized(const Eigen::VectorXd& v)
{
    const double norm = v.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw std::invalid_argument("cannot normalize a zero or non-finite vector");
    }
    return UnitVector(v / norm);
}

UnitVector UnitVector::basis(std::size_t d, std::size_t axis)
{
    require_dim(d);
    if (axis >= d) {
        throw DimensionError("basis axis out of range");
    }
    Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    e[static_cast<Eigen::Index>(axis)] = 1.0;
    return UnitVector(std::move(e));
}

VmfParams::VmfParams(UnitVector mean_direction, double concentration)
    : mean(std::move(mean_direction)), kappa(concentration)
{
    if (!(kappa >= 0.0) || std::isnan(kappa)) {
        throw std::invalid_argument("vMF concentration must be >= 0");
    }
}

SkillSet::SkillSet(std::vector<UnitVector> members, SkillMode skill_mode)
    : skills(std::move(members)), mode(skill_mode)
{
    if (skills.empty()) {
        throw std::invalid_argument("skill set must be nonempty");
    }
    const std::size_t d = skills.front().dim();
    for (const auto& z : skills) {
        if (z.dim() != d) {
            throw DimensionError("skills must share one dimension");
        }
    }
}

SkillSet SkillSet::sample_uniform(std::size_t count, std::size_t d, SkillMode mode, Rng& rng)
{
    std::vector<UnitVector> members;
    members.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        members.push_back(sample_uniform_sphere(d, rng));
    }
    return SkillSet(std::move(members), mode);
}

void SkillSet::refresh(Rng& rng)
{
    if (mode != SkillMode::ResampleEachBatch) {
        return;
    }
    const std::size_t d = dim();
    for (auto& z : skills) {
        z = sample_uniform_sphere(d, rng);
    }
}

UnitVector sample_uniform_sphere(std::size_t d, Rng& rng)
{
    require_dim(d);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd v(static_cast<Eigen::Index>(d));
    for (;;) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            v[i] = normal(rng);
        }
        const double norm = v.norm();
        if (norm > 1e-300) {
            return UnitVector(v / norm);
        }
    }
}

UnitVector sample_vmf(const VmfParams& params, Rng& rng)
{
    const std::size_t d = params.mean.dim();
    const double kappa = params.kappa;
    if (kappa == 0.0) {
        return sample_uniform_sphere(d, rng);
    }
    if (std::isinf(kappa)) {
        return params.mean;
    }
    if (d == 1) {
        // Two-point sphere: P(+mean) = e^k / (e^k + e^-k).
        std::bernoulli_distribution same(1.0 / (1.0 + std::exp(-2.0 * kappa)));
        return UnitVector(same(rng) ? params.mean.coords() : Eigen::VectorXd(-params.mean.coords()));
    }

    // Wood (1994): rejection sampling of w = <mean, x> on [-1, 1].
    const double m1 = static_cast<double>(d) - 1.0;
    const double b = m1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + m1 * m1));
    const double x0 = (1.0 - b) / (1.0 + b);
    const double c = kappa * x0 + m1 * std::log(1.0 - x0 * x0);
    std::gamma_distribution<double> gamma(0.5 * m1, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    double w = 0.0;
    for (;;) {
        const double ga = gamma(rng);
        const double gb = gamma(rng);
        const double beta = ga / (ga + gb);
        w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta);
        const double u = uniform(rng);
        if (kappa * w + m1 * std::log(1.0 - x0 * w) - c >= std::log(u)) {
            break;
        }
    }

    const UnitVector tangent = sample_uniform_sphere(d - 1, rng);
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    x[0] = w;
    x.tail(static_cast<Eigen::Index>(d - 1)) = std::sqrt(std::max(0.0, 1.0 - w * w)) * tangent.coords();

    // Householder reflection taking e1 to the mean direction.
    Eigen::VectorXd u = -params.mean.coords();
    u[0] += 1.0;
    const double unorm = u.norm();
    if (unorm > 1e-12) {
        u /= unorm;
        x -= 2.0 * u.dot(x) * u;
    }
    return UnitVector::normalized(x);
}

double log_bessel_i(double nu, double x)
{
    if (!(nu > -1.0)) {
        throw std::domain_error("log_bessel_i requires nu > -1");
    }
    if (x < 0.0) {
        throw std::domain_error("log_bessel_i requires x >= 0");
    }
    if (x == 0.0) {
        return nu == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    return x < kBesselSeriesCutoff ? log_bessel_series(nu, x) : log_bessel_asymptotic(nu, x);
}

double vmf_log_normalizer(std::size_t d, double kappa)
{
    require_dim(d);
    const double half_d = 0.5 * static_cast<double>(d);
    if (kappa == 0.0) {
        // 1 / area(S^{d-1}) = Gamma(d/2) / (2 pi^{d/2})
        return std::lgamma(half_d) - std::log(2.0) - half_d * std::log(std::numbers::pi);
    }
    return (half_d - 1.0) * std::log(kappa) - half_d * std::log(2.0 * std::numbers::pi)
           - log_bessel_i(half_d - 1.0, kappa);
}

double vmf_log_density(const VmfParams& params, const UnitVector& x)
{
    if (x.dim() != params.mean.dim()) {
        throw DimensionError("vMF density: dimension mismatch");
    }
    return params.kappa * params.mean.dot(x.coords()) + vmf_log_normalizer(x.dim(), params.kappa);
}

double vmf_mean_resultant_length(std::size_t d, double kappa)
{
    require_dim(d);
    if (kappa == 0.0) {
        return 0.0;
    }
    const double half_d = 0.5 * static_cast<double>(d);
    return std::exp(log_bessel_i(half_d, kappa) - log_bessel_i(half_d - 1.0, kappa));
}

Eigen::MatrixXd skill_matrix(const std::vector<UnitVector>& skills)
{
    if (skills.empty()) {
        return {};
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(skills.front().dim()), static_cast<Eigen::Index>(skills.size()));
    for (std::size_t i = 0; i < skills.size(); ++i) {
        m.col(static_cast<Eigen::Index>(i)) = skills[i].coords();
    }
    return m;
}

double centered_min_singular(const std::vector<UnitVector>& skills)
{
    if (skills.size() < 2) {
        return 0.0;
    }
    const Eigen::MatrixXd m = skill_matrix(skills);
    if (m.cols() < m.rows() + 1) {
        return 0.0;
    }
    const Eigen::MatrixXd centered = m.colwise() - m.rowwise().mean();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
    return svd.singularValues()[svd.singularValues().size() - 1];
}

AffineGeneratorReport is_affine_generator(const SkillSet& skills)
{
    AffineGeneratorReport report;
    report.centered_min_singular = centered_min_singular(skills.skills);
    const auto d = static_cast<Eigen::Index>(skills.dim());
    if (skills.size() < 2) {
        return report;
    }
    const Eigen::MatrixXd m = skill_matrix(skills.skills);
    const Eigen::MatrixXd diffs = m.rightCols(m.cols() - 1).colwise() - m.col(0);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(diffs);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double tol = kRankRelativeTolerance * sv[0];
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv[i] > tol) {
            ++report.rank;
            report.smallest_nonzero_singular = sv[i];
        }
    }
    report.is_generator = static_cast<Eigen::Index>(report.rank) == d;
    return report;
}

} // namespace csf
