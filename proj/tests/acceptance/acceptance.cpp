// Acceptance run: one PASS/FAIL line per criterion. Training cells are
// cached under --out by config hash, so reruns only redo the cheap checks.

#include "csf/harness.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace csf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what)
    {
        pass = pass && ok;
        if (!detail.empty()) {
            detail += "; ";
        }
        detail += (ok ? "" : "NOT ") + what;
    }
};

std::string num(double v)
{
    std::ostringstream out;
    out.precision(6);
    out << v;
    return out.str();
}

Outcome from_table(const AblationTable& table)
{
    Outcome o;
    for (const auto& c : table.checks) {
        o.require(c.passed, c.name + (c.detail.empty() ? "" : " [" + c.detail + "]"));
    }
    return o;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<UnitVector> simplex_vertices(std::size_t d)
{
    const auto n = static_cast<Eigen::Index>(d + 1);
    Eigen::MatrixXd centered = Eigen::MatrixXd::Identity(n, n);
    centered.rowwise() -= centered.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU);
    const Eigen::MatrixXd basis = svd.matrixU().leftCols(static_cast<Eigen::Index>(d));
    std::vector<UnitVector> out;
    for (Eigen::Index i = 0; i < n; ++i) {
        out.push_back(UnitVector::normalized(basis.transpose() * centered.col(i)));
    }
    return out;
}

Eigen::MatrixXd well_conditioned(std::size_t d, Rng& rng)
{
    std::normal_distribution<double> normal;
    for (;;) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] += 0.5 * normal(rng);
        }
        const auto sv = oracle::singular_values(m);
        if (sv.back() > 0.1 * sv.front()) {
            return m;
        }
    }
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    std::normal_distribution<double> normal;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = normal(rng);
    }
    return m;
}

Outcome identifiability(const RunOptions& options)
{
    Outcome o;
    std::vector<RunReport> reports;
    for (std::uint64_t seed : {1, 2, 3}) {
        RunConfig c;
        c.seed = seed;
        const RunReport r = run_cell(c, options);
        reports.push_back(r);
        const std::string tag = "seed " + std::to_string(seed) + " ";
        o.require(r.ok(), tag + "completed" + (r.ok() ? "" : " (" + r.failure_reason + ")"));
        o.require(r.r2_diff >= 0.95, tag + "r2_diff " + num(r.r2_diff) + " >= 0.95");
        o.require(r.r2_state >= 0.90, tag + "r2_state " + num(r.r2_state) + " >= 0.90");
        o.require(r.wall_seconds <= 900.0, tag + "wall " + num(r.wall_seconds) + " s <= 900 s");
    }
    const auto summary = summarize_seeds(reports);
    o.detail += "; r2_diff " + num(summary.at("r2_diff").at("mean").get<double>()) + " +- " +
                num(summary.at("r2_diff").at("two_sd").get<double>()) + " (2 sd)";
    return o;
}

Outcome skill_ablation(const RunOptions& options)
{
    const RunConfig base;
    Outcome o = from_table(ablate_skills(
        base, {{2, SkillMode::FixedSet}, {16, SkillMode::FixedSet}, {base.skills.count, SkillMode::ResampleEachBatch}},
        options));
    Rng rng(derive_seed(7, "acceptance-affine"));
    for (std::size_t count = 2; count <= 16; ++count) {
        bool all = true;
        for (int rep = 0; rep < 20; ++rep) {
            const auto report = is_affine_generator(SkillSet::sample_uniform(count, 4, SkillMode::FixedSet, rng));
            all = all && report.is_generator == (count >= 5);
        }
        if (!all) {
            o.require(false, "affine verdict for " + std::to_string(count) + " uniform skills");
        }
    }
    o.require(true, "uniform sets of 2..4 skills fail and 5..16 pass is_affine_generator");
    return o;
}

Outcome vmf_sampler()
{
    Outcome o;
    constexpr std::size_t n = 1'000'000;
    Rng rng(derive_seed(7, "acceptance-vmf"));
    const VmfParams concentrated(UnitVector::basis(3, 0), 2.0);
    const VmfParams flat(UnitVector::basis(3, 0), 0.0);
    Eigen::Vector3d sum_c = Eigen::Vector3d::Zero();
    Eigen::Vector3d sum_f = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        sum_c += sample_vmf(concentrated, rng).coords();
        sum_f += sample_vmf(flat, rng).coords();
    }
    const double length = (sum_c / static_cast<double>(n)).norm();
    const double expected = std::cosh(2.0) / std::sinh(2.0) - 0.5;
    const double flat_norm = (sum_f / static_cast<double>(n)).norm();
    o.require(std::abs(length - expected) <= 0.01,
              "kappa 2 mean resultant length " + num(length) + " within 0.01 of " + num(expected));
    o.require(flat_norm <= 0.003, "kappa 0 mean norm " + num(flat_norm) + " <= 0.003");
    return o;
}

Outcome gradient_exactness()
{
    Outcome o;
    const RunConfig base;
    for (std::size_t k : {std::size_t{2}, std::size_t{4}}) {
        MlpSpec spec = base.encoder;
        spec.input_dim = base.generator.D;
        spec.output_dim = k;
        const auto check = oracle::mlp_gradient_check(spec, derive_seed(7, "acceptance-grad", k), 1000);
        o.require(check.checked == 1000 && check.max_relative_error < 1e-5,
                  "encoder 16 -> 256 -> 256 -> " + std::to_string(k) + " max rel err " +
                      num(check.max_relative_error) + " over " + std::to_string(check.checked) + " coords (" +
                      std::to_string(check.skipped_kinks) + " kink redraws)");
    }
    return o;
}

Outcome linear_fit()
{
    Outcome o;
    Rng rng(derive_seed(7, "acceptance-fit"));
    const Eigen::Index n = 5000;
    const Eigen::MatrixXd x = gaussian(16, n, rng);
    const Eigen::MatrixXd a = gaussian(4, 16, rng);
    const Eigen::VectorXd b = gaussian(4, 1, rng);
    const Eigen::MatrixXd y = (a * x).colwise() + b;
    const auto fit = fit_linear_map(x, y, 11);
    const double map_err = (fit.map - a).cwiseAbs().maxCoeff();
    o.require(fit.r2_aggregate >= 1.0 - 1e-10, "noiseless R2 " + num(fit.r2_aggregate) + " >= 1 - 1e-10");
    o.require(map_err <= 1e-8, "max |A - A_true| " + num(map_err) + " <= 1e-8");

    const Eigen::MatrixXd noisy = y + 0.5 * gaussian(4, n, rng);
    const double r2 = fit_linear_map(x, noisy, 11).r2_aggregate;
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::MatrixXd m = well_conditioned(16, rng);
        const Eigen::VectorXd c = gaussian(16, 1, rng);
        const Eigen::MatrixXd moved = (m * x).colwise() + c;
        worst = std::max(worst, std::abs(fit_linear_map(moved, noisy, 11).r2_aggregate - r2));
    }
    o.require(worst < 1e-6, "R2 change under 20 affine re-parametrizations " + num(worst) + " < 1e-6");
    return o;
}

Outcome affine_diagnostics()
{
    Outcome o;
    Rng rng(derive_seed(7, "acceptance-affine-images"));
    for (std::size_t d = 2; d <= 6; ++d) {
        const auto simplex = simplex_vertices(d);
        const bool simplex_ok = is_affine_generator(SkillSet(simplex, SkillMode::FixedSet)).is_generator;
        const auto z = sample_uniform_sphere(d, rng);
        std::vector<UnitVector> collinear{z, UnitVector::normalized(-z.coords()), z};
        const bool collinear_fail = !is_affine_generator(SkillSet(collinear, SkillMode::FixedSet)).is_generator;
        std::vector<UnitVector> undersized(simplex.begin(), simplex.end() - 1);
        const bool undersized_fail = !is_affine_generator(SkillSet(undersized, SkillMode::FixedSet)).is_generator;
        o.require(simplex_ok && collinear_fail && undersized_fail,
                  "d=" + std::to_string(d) + " simplex passes, collinear and d-point sets fail");

        bool invariant = true;
        for (const auto* set : std::vector<const std::vector<UnitVector>*>{&simplex, &collinear, &undersized}) {
            const bool verdict = is_affine_generator(SkillSet(*set, SkillMode::FixedSet)).is_generator;
            for (int rep = 0; rep < 100; ++rep) {
                const Eigen::MatrixXd m = well_conditioned(d, rng);
                std::vector<UnitVector> image;
                for (const auto& s : *set) {
                    image.push_back(UnitVector::normalized(m * s.coords()));
                }
                invariant = invariant && is_affine_generator(SkillSet(image, SkillMode::FixedSet)).is_generator == verdict;
            }
        }
        o.require(invariant, "d=" + std::to_string(d) + " verdicts invariant under 100 linear images");
    }
    return o;
}

Outcome determinism(const fs::path& out)
{
    Outcome o;
    RunConfig c;
    c.train.steps = 1000;
    c.eval.interval = 250;
    RunOptions one;
    one.out_dir = out / "determinism" / "workers1";
    one.workers = 1;
    RunOptions four = one;
    four.out_dir = out / "determinism" / "workers4";
    four.workers = 4;
    fs::remove_all(one.out_dir);
    fs::remove_all(four.out_dir);
    run_csf(c, one);
    run_csf(c, four);
    const std::string a = slurp(one.out_dir / "metrics.csv");
    const std::string b = slurp(four.out_dir / "metrics.csv");
    o.require(!a.empty() && a == b, "metrics.csv identical for workers 1 and 4 (" + std::to_string(a.size()) + " bytes)");
    o.require(slurp(one.out_dir / "report.json") == slurp(four.out_dir / "report.json"), "report.json identical");
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    fs::path out = "acceptance_runs";
    app.add_option("--out", out, "Cache directory for training cells");
    CLI11_PARSE(app, argc, argv);

    RunOptions options;
    options.out_dir = out;
    options.workers = 1;
    options.log = &std::cerr;

    struct Criterion {
        int id;
        std::string title;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "identifiability on 3 seeds", [&] { return identifiability(options); }},
        {2, "maximum-entropy policy is not diverse", [&] { return from_table(lemma_check(RunConfig{}, options)); }},
        {3, "skill-count ablation", [&] { return skill_ablation(options); }},
        {4, "latent-dimension ablation", [&] { return from_table(ablate_dim(RunConfig{}, {2, 4}, options)); }},
        {5, "objective ablation", [&] { return from_table(ablate_objective(RunConfig{}, options)); }},
        {6, "vMF sampler moments", vmf_sampler},
        {7, "gradient exactness", gradient_exactness},
        {8, "linear-fit oracle", linear_fit},
        {9, "affine-generator diagnostics", affine_diagnostics},
        {10, "determinism across worker counts", [&] { return determinism(out); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " (" << o.detail << ")"
                  << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
