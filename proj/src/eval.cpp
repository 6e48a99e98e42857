#include "csf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace csf {

LinearFitResult fit_linear_map(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets,
                               std::uint64_t split_seed)
{
    const Eigen::Index n = features.cols();
    const Eigen::Index k = features.rows();
    const Eigen::Index d = targets.rows();
    if (targets.cols() != n) {
        throw DimensionError("linear fit: feature and target counts differ");
    }
    if (n < 10 * (k + 1)) {
        throw std::invalid_argument("linear fit: need at least 10 x (d_feature + 1) samples, got " + std::to_string(n));
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(split_seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<Eigen::Index>(std::floor(kTrainFraction * static_cast<double>(n)));
    const Eigen::Index n_test = n - n_train;

    Eigen::MatrixXd x_train(n_train, k + 1);
    Eigen::MatrixXd y_train(n_train, d);
    for (Eigen::Index i = 0; i < n_train; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(i)];
        x_train.row(i).head(k) = features.col(src).transpose();
        x_train(i, k) = 1.0;
        y_train.row(i) = targets.col(src).transpose();
    }

    LinearFitResult fit;
    fit.n_train = static_cast<std::size_t>(n_train);
    fit.n_test = static_cast<std::size_t>(n_test);
    Eigen::MatrixXd beta;
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x_train);
    if (qr.rank() == k + 1) {
        beta = qr.solve(y_train);
    } else {
        fit.ridge_fallback = true;
        Eigen::MatrixXd gram = x_train.transpose() * x_train;
        gram.diagonal().array() += kRidgeFallbackLambda;
        beta = gram.ldlt().solve(x_train.transpose() * y_train);
    }
    fit.map = beta.topRows(k).transpose();
    fit.intercept = beta.row(k).transpose();

    Eigen::MatrixXd y_test(d, n_test);
    Eigen::MatrixXd pred(d, n_test);
    for (Eigen::Index i = 0; i < n_test; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(n_train + i)];
        y_test.col(i) = targets.col(src);
        pred.col(i) = fit.map * features.col(src) + fit.intercept;
    }
    const Eigen::VectorXd mean = y_test.rowwise().mean();
    const Eigen::VectorXd ss_res = (y_test - pred).rowwise().squaredNorm();
    const Eigen::VectorXd ss_tot = (y_test.colwise() - mean).rowwise().squaredNorm();
    fit.r2_per_dim.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) {
        if (ss_tot[i] > 0.0) {
            fit.r2_per_dim[i] = 1.0 - ss_res[i] / ss_tot[i];
        } else {
            fit.r2_per_dim[i] = ss_res[i] == 0.0 ? 1.0 : 0.0;
        }
    }
    const double total = ss_tot.sum();
    fit.r2_aggregate = total > 0.0 ? 1.0 - ss_res.sum() / total : (ss_res.sum() == 0.0 ? 1.0 : 0.0);
    return fit;
}

ProbeSet make_probe_set(const EnvConfig& env, std::size_t n, Rng& rng)
{
    const auto d = static_cast<Eigen::Index>(env.d);
    const auto cols = static_cast<Eigen::Index>(n);
    ProbeSet probe{Eigen::MatrixXd(d, cols), Eigen::MatrixXd(d, cols)};
    for (Eigen::Index j = 0; j < cols; ++j) {
        probe.states.col(j) = sample_episode_start(env, rng);
        probe.next_states.col(j) = probe.states.col(j) + sample_uniform_sphere(env.d, rng).coords();
    }
    return probe;
}

IdentifiabilityResult identifiability_probe(const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& features,
                                            const Generator& generator, const ProbeSet& probe,
                                            std::uint64_t split_seed)
{
    if (static_cast<std::size_t>(probe.states.cols()) < kMinProbeStates) {
        throw std::invalid_argument("identifiability probe: need at least 1000 states");
    }
    const Eigen::Index n = probe.states.cols();
    Eigen::MatrixXd obs(static_cast<Eigen::Index>(generator.spec().D), 2 * n);
    obs.leftCols(n) = generator.apply(probe.states);
    obs.rightCols(n) = generator.apply(probe.next_states);
    const Eigen::MatrixXd phi = features(obs);
    IdentifiabilityResult result;
    result.state_fit = fit_linear_map(phi.leftCols(n), probe.states, split_seed);
    result.diff_fit = fit_linear_map(phi.rightCols(n) - phi.leftCols(n), probe.next_states - probe.states, split_seed);
    return result;
}

IdentifiabilityResult identifiability_probe(const Mlp& encoder, const Eigen::VectorXd& params,
                                            const Generator& generator, const ProbeSet& probe,
                                            std::uint64_t split_seed)
{
    return identifiability_probe([&](const Eigen::MatrixXd& obs) { return encoder.forward(params, obs); },
                                 generator, probe, split_seed);
}

namespace {

std::uint64_t cell_of(const LatentState& s, std::size_t grid, double half_width, double cell_length)
{
    const auto index = [&](double x) {
        const double pos = std::floor((x + half_width) / cell_length);
        const double clamped = std::clamp(pos, 0.0, static_cast<double>(grid - 1));
        return static_cast<std::uint64_t>(clamped);
    };
    const double x = s[0];
    const double y = s.size() > 1 ? s[1] : 0.0;
    return index(x) * grid + index(y);
}

} // namespace

void extend_coverage(CoverageReport& report, const std::vector<Trajectory>& trajectories, double half_width)
{
    std::vector<std::uint64_t> cells = report.cells;
    for (const auto& tr : trajectories) {
        for (const auto& r : tr.records) {
            cells.push_back(cell_of(r.s, report.grid, half_width, report.cell_length));
        }
        if (!tr.records.empty()) {
            cells.push_back(cell_of(tr.records.back().s_next, report.grid, half_width, report.cell_length));
        }
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    report.cells = std::move(cells);
}

CoverageReport state_coverage(const std::vector<Trajectory>& trajectories, std::size_t grid, double half_width)
{
    if (grid < 2) {
        throw std::invalid_argument("coverage: grid must be >= 2");
    }
    if (!(half_width > 0.0)) {
        throw std::invalid_argument("coverage: half width must be positive");
    }
    CoverageReport report;
    report.grid = grid;
    report.cell_length = 2.0 * half_width / static_cast<double>(grid);
    extend_coverage(report, trajectories, half_width);
    return report;
}

void relative_coverage(std::vector<CoverageReport*> reports)
{
    std::vector<std::uint64_t> all;
    for (const auto* r : reports) {
        all.insert(all.end(), r->cells.begin(), r->cells.end());
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    for (auto* r : reports) {
        r->fraction = all.empty() ? 0.0 : static_cast<double>(r->cells.size()) / static_cast<double>(all.size());
    }
}

OracleReturnReport oracle_return(const PolicyKind& policy, const PolicyContext& context,
                                 const std::vector<UnitVector>& skills, const UnitVector& task, std::size_t horizon,
                                 const LatentState& start, Rng& rng, double gamma)
{
    if (skills.empty()) {
        throw std::invalid_argument("oracle return: need at least one skill");
    }
    OracleReturnReport report{task, {}, 0, 0.0};
    report.per_skill.reserve(skills.size());
    for (std::size_t i = 0; i < skills.size(); ++i) {
        const Trajectory tr = rollout(policy, context, skills[i], horizon, start, rng(), i);
        double total = 0.0;
        double weight = 1.0;
        for (const auto& r : tr.records) {
            total += weight * task.dot(r.s_next - r.s);
            weight *= gamma;
        }
        report.per_skill.push_back(total);
    }
    const auto best = std::max_element(report.per_skill.begin(), report.per_skill.end());
    report.best_skill = static_cast<std::size_t>(best - report.per_skill.begin());
    report.oracle_return = *best;
    return report;
}

GeometryDiagnostics geometry_diagnostics(const Eigen::MatrixXd& phi_from, const Eigen::MatrixXd& phi_to,
                                         const Eigen::MatrixXd& skills)
{
    if (phi_from.cols() != phi_to.cols() || skills.cols() != phi_from.cols() || skills.rows() != phi_from.rows()) {
        throw DimensionError("geometry diagnostics: shape mismatch");
    }
    GeometryDiagnostics diag;
    diag.count = static_cast<std::size_t>(phi_from.cols());
    double pair_sum = 0.0;
    std::size_t pair_n = 0;
    double cos_sum = 0.0;
    std::vector<double> norms;
    for (Eigen::Index j = 0; j < phi_from.cols(); ++j) {
        const double nf = phi_from.col(j).norm();
        const double nt = phi_to.col(j).norm();
        if (nf > 0.0 && nt > 0.0) {
            pair_sum += std::abs(phi_from.col(j).dot(phi_to.col(j))) / (nf * nt);
            ++pair_n;
        } else {
            ++diag.excluded_pairs;
        }
        const Eigen::VectorXd delta = phi_to.col(j) - phi_from.col(j);
        const double nd = delta.norm();
        if (nd > 0.0) {
            cos_sum += delta.dot(skills.col(j)) / (nd * skills.col(j).norm());
            norms.push_back(nd);
        } else {
            ++diag.excluded;
        }
    }
    diag.mean_abs_cos_pair = pair_n > 0 ? pair_sum / static_cast<double>(pair_n) : std::nan("");
    if (!norms.empty()) {
        const double m = static_cast<double>(norms.size());
        diag.mean_cos_diff_skill = cos_sum / m;
        diag.diff_norm_mean = std::accumulate(norms.begin(), norms.end(), 0.0) / m;
        double var = 0.0;
        for (double v : norms) {
            var += (v - diag.diff_norm_mean) * (v - diag.diff_norm_mean);
        }
        diag.diff_norm_sd = std::sqrt(var / m);
    } else {
        diag.mean_cos_diff_skill = std::nan("");
        diag.diff_norm_mean = 0.0;
    }
    return diag;
}

GeometryDiagnostics geometry_diagnostics(const Mlp& encoder, const Eigen::VectorXd& params,
                                         const std::vector<TransitionRecord>& transitions)
{
    if (transitions.empty()) {
        throw std::invalid_argument("geometry diagnostics: no transitions");
    }
    const auto n = static_cast<Eigen::Index>(transitions.size());
    const auto D = static_cast<Eigen::Index>(encoder.spec().input_dim);
    const auto k = static_cast<Eigen::Index>(encoder.spec().output_dim);
    Eigen::MatrixXd x(D, 2 * n);
    Eigen::MatrixXd z(k, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& r = transitions[static_cast<std::size_t>(j)];
        x.col(j) = r.o;
        x.col(n + j) = r.o_next;
        z.col(j) = r.z.coords();
    }
    const Eigen::MatrixXd phi = encoder.forward(params, x);
    return geometry_diagnostics(phi.leftCols(n), phi.rightCols(n), z);
}

double skill_conditioning(const SkillSet& skills)
{
    if (skills.size() < 2) {
        throw std::invalid_argument("skill conditioning: need at least two skills");
    }
    return centered_min_singular(skills.skills);
}

} // namespace csf
