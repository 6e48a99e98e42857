// csf_lab: command-line front end for training, evaluation, ablations and
// report rendering.

#include "csf/harness.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::string out;
    std::size_t workers = 1;
};

fs::path output_dir(const Common& c)
{
    if (!c.out.empty()) {
        return c.out;
    }
    if (const char* env = std::getenv("CSF_OUT_DIR"); env != nullptr && *env != '\0') {
        return env;
    }
    return "csf_out";
}

csf::RunConfig base_config(const Common& c)
{
    csf::RunConfig config = c.config.empty() ? csf::RunConfig{} : csf::load_run_config(c.config);
    if (c.seed) {
        config.seed = *c.seed;
    }
    if (c.steps) {
        config.train.steps = *c.steps;
    }
    config.validate();
    return config;
}

csf::RunOptions options_for(const Common& c)
{
    csf::RunOptions options;
    options.out_dir = output_dir(c);
    options.workers = std::max<std::size_t>(c.workers, 1);
    options.log = &std::cerr;
    return options;
}

void print_report(const csf::RunReport& r)
{
    std::cout << "status " << r.status << (r.failure_reason.empty() ? "" : " (" + r.failure_reason + ")") << '\n'
              << "r2_state " << r.r2_state << "\nr2_diff " << r.r2_diff << "\ndiversity " << r.diversity_score
              << "\ncoverage_cells " << r.coverage.occupied() << "\noracle_return " << r.oracle_return
              << "\nmean_abs_cos_pair " << r.geometry.mean_abs_cos_pair << "\nheldout_accuracy "
              << r.heldout_accuracy << "\nrejected_steps " << r.rejected_steps << "\nwall_seconds "
              << r.wall_seconds << '\n';
}

int finish_table(const csf::AblationTable& table, const fs::path& dir)
{
    csf::write_table(table, dir);
    for (const auto& c : table.cells) {
        std::cout << c.label << ": r2_state " << c.report.r2_state << " r2_diff " << c.report.r2_diff
                  << " coverage " << c.report.coverage.occupied() << " oracle " << c.report.oracle_return << '\n';
    }
    for (const auto& check : table.checks) {
        std::cout << (check.passed ? "PASS " : "FAIL ") << check.name
                  << (check.detail.empty() ? "" : " (" + check.detail + ")") << '\n';
    }
    return table.all_passed() ? 0 : 1;
}

std::vector<std::string> split_list(const std::string& text)
{
    std::vector<std::string> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void add_common(CLI::App* app, Common& c)
{
    app->add_option("--config", c.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Master seed");
    app->add_option("--steps", c.steps, "Override train.steps");
    app->add_option("--out", c.out, "Output directory (default $CSF_OUT_DIR, then ./csf_out)");
    app->add_option("--workers", c.workers, "Worker threads for rollouts and ablation cells")->check(CLI::PositiveNumber);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Contrastive successor features laboratory"};
    app.require_subcommand(1);
    Common common;
    std::size_t repeat = 1;
    std::string counts = "2,4,8,16,64,resample";
    std::string dims = "2,3,4,8,16";

    auto* train = app.add_subcommand("train", "Train and evaluate one run");
    add_common(train, common);
    train->add_option("--repeat", repeat, "Consecutive seeds to run, summarized as mean +/- 2 sd")
        ->check(CLI::PositiveNumber);
    auto* eval = app.add_subcommand("eval", "Re-evaluate the checkpoint in --out");
    add_common(eval, common);
    auto* skills = app.add_subcommand("ablate-skills", "Skill-count ablation");
    add_common(skills, common);
    skills->add_option("--counts", counts, "Comma-separated counts; 'resample' for fresh skills");
    auto* dim = app.add_subcommand("ablate-dim", "Feature-dimension ablation");
    add_common(dim, common);
    dim->add_option("--dims", dims, "Comma-separated encoder output dimensions");
    auto* objective = app.add_subcommand("ablate-objective", "Compare the three objectives");
    add_common(objective, common);
    auto* lemma = app.add_subcommand("lemma-check", "Uniform versus scripted policy");
    add_common(lemma, common);
    auto* report = app.add_subcommand("report", "Render summary and plots for the run in --out");
    add_common(report, common);

    CLI11_PARSE(app, argc, argv);

    try {
        const csf::RunOptions options = options_for(common);
        if (train->parsed()) {
            const csf::RunConfig config = base_config(common);
            std::vector<csf::RunReport> reports;
            bool ok = true;
            for (std::size_t i = 0; i < repeat; ++i) {
                csf::RunConfig run = config;
                run.seed = config.seed + i;
                csf::RunOptions o = options;
                if (repeat > 1) {
                    o.out_dir = options.out_dir / ("seed-" + std::to_string(run.seed));
                }
                reports.push_back(csf::run_csf(run, o));
                csf::emit_report(o.out_dir);
                print_report(reports.back());
                ok = ok && reports.back().ok();
            }
            if (repeat > 1) {
                const auto summary = csf::summarize_seeds(reports);
                std::ofstream(options.out_dir / "seeds_summary.json") << summary.dump(2) << '\n';
                std::cout << summary.dump(2) << '\n';
            }
            return ok ? 0 : 1;
        }
        if (eval->parsed()) {
            const csf::RunReport r = csf::evaluate_run(options.out_dir, options);
            print_report(r);
            return r.ok() ? 0 : 1;
        }
        if (skills->parsed()) {
            const csf::RunConfig config = base_config(common);
            std::vector<csf::SkillCount> cells;
            for (const auto& item : split_list(counts)) {
                if (item == "resample") {
                    cells.push_back({config.skills.count, csf::SkillMode::ResampleEachBatch});
                } else {
                    cells.push_back({std::stoul(item), csf::SkillMode::FixedSet});
                }
            }
            return finish_table(csf::ablate_skills(config, cells, options), options.out_dir);
        }
        if (dim->parsed()) {
            std::vector<std::size_t> list;
            for (const auto& item : split_list(dims)) {
                list.push_back(std::stoul(item));
            }
            return finish_table(csf::ablate_dim(base_config(common), list, options), options.out_dir);
        }
        if (objective->parsed()) {
            return finish_table(csf::ablate_objective(base_config(common), options), options.out_dir);
        }
        if (lemma->parsed()) {
            return finish_table(csf::lemma_check(base_config(common), options), options.out_dir);
        }
        if (report->parsed()) {
            csf::emit_report(options.out_dir);
            std::cout << "wrote " << (options.out_dir / "summary.md").string() << '\n';
            return 0;
        }
    } catch (const csf::ConfigurationError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
