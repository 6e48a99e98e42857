#include "csf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace csf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kR2DiffPass = 0.95;
constexpr double kR2StatePass = 0.90;
constexpr double kAblationR2Gap = 0.2;
constexpr double kChanceTolerance = 0.03;
constexpr double kAccuracyOverChance = 5.0;
constexpr double kScriptedDiversity = 0.5;

std::string fmt(double v)
{
    std::ostringstream out;
    out.precision(6);
    out << v;
    return out.str();
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out)
{
    if (j.is_object()) {
        for (const auto& [key, value] : j.items()) {
            flatten(value, prefix.empty() ? key : prefix + "." + key, out);
        }
    } else {
        out[prefix] = j;
    }
}

bool passes_identifiability(const RunReport& r) { return r.r2_diff >= kR2DiffPass && r.r2_state >= kR2StatePass; }

/// Runs every cell after checking it against `base`. Cells that share a
/// config are trained once.
AblationTable run_table(std::string name, const RunConfig& base, std::vector<std::pair<std::string, RunConfig>> cells,
                        const std::vector<std::string>& allowed, const RunOptions& options)
{
    if (cells.empty()) {
        throw std::invalid_argument("ablation without cells");
    }
    AblationTable table;
    table.name = std::move(name);
    std::vector<std::string> hashes;
    std::vector<std::size_t> unique;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        require_single_factor(base, cells[i].second, allowed);
        hashes.push_back(config_hash(cells[i].second));
        bool seen = false;
        for (std::size_t u : unique) {
            seen = seen || hashes[u] == hashes[i];
        }
        if (!seen) {
            unique.push_back(i);
        }
    }
    const std::size_t workers = std::max<std::size_t>(options.workers, 1);
    RunOptions inner = options;
    inner.workers = unique.size() >= workers ? 1 : workers / unique.size();
    std::vector<RunReport> reports(unique.size());
    parallel_for(unique.size(), workers / inner.workers, [&](std::size_t u) {
        reports[u] = run_cell(cells[unique[u]].second, inner);
    });
    for (std::size_t i = 0; i < cells.size(); ++i) {
        std::size_t u = 0;
        while (hashes[unique[u]] != hashes[i]) {
            ++u;
        }
        table.cells.push_back({cells[i].first, cells[i].second, reports[u]});
    }
    std::vector<CoverageReport*> coverage;
    for (auto& c : table.cells) {
        coverage.push_back(&c.report.coverage);
    }
    relative_coverage(coverage);
    return table;
}

Check failed_ok(const AblationTable& table)
{
    Check check{"all runs completed", true, ""};
    for (const auto& c : table.cells) {
        if (!c.report.ok()) {
            check.passed = false;
            check.detail += c.label + ": " + c.report.failure_reason + "; ";
        }
    }
    return check;
}

} // namespace

bool AblationTable::all_passed() const
{
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

const AblationCell& AblationTable::cell(std::string_view label) const
{
    for (const auto& c : cells) {
        if (c.label == label) {
            return c;
        }
    }
    throw std::out_of_range("no ablation cell " + std::string(label));
}

std::vector<std::string> config_diff(const json& a, const json& b)
{
    std::map<std::string, json> fa;
    std::map<std::string, json> fb;
    flatten(a, "", fa);
    flatten(b, "", fb);
    std::vector<std::string> out;
    for (const auto& [key, value] : fa) {
        const auto it = fb.find(key);
        if (it == fb.end() || it->second != value) {
            out.push_back(key);
        }
    }
    for (const auto& [key, value] : fb) {
        if (fa.find(key) == fa.end()) {
            out.push_back(key);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

void require_single_factor(const RunConfig& base, const RunConfig& cell, const std::vector<std::string>& allowed)
{
    for (const auto& path : config_diff(to_json(base), to_json(cell))) {
        const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const std::string& a) {
            return path == a || path.rfind(a + ".", 0) == 0;
        });
        if (!ok) {
            throw ConfigurationError("ablation cell differs from its base in " + path);
        }
    }
}

AblationTable ablate_skills(const RunConfig& base, const std::vector<SkillCount>& counts, const RunOptions& options)
{
    std::vector<std::pair<std::string, RunConfig>> cells;
    for (const auto& sc : counts) {
        RunConfig c = base;
        c.skills = {sc.count, sc.mode};
        cells.emplace_back(sc.mode == SkillMode::ResampleEachBatch ? "resample" : std::to_string(sc.count), c);
    }
    AblationTable table = run_table("ablate_skills", base, std::move(cells), {"skills"}, options);
    table.checks.push_back(failed_ok(table));

    const std::size_t k = base.resolved().encoder.output_dim;
    Check affine{"affine generator iff count >= d + 1", true, ""};
    for (const auto& c : table.cells) {
        const bool expected = c.config.skills.count >= k + 1;
        if (c.report.affine.is_generator != expected) {
            affine.passed = false;
            affine.detail += c.label + " ";
        }
    }
    table.checks.push_back(affine);

    const AblationCell* smallest = nullptr;
    for (const auto& c : table.cells) {
        if (c.config.skills.mode == SkillMode::FixedSet &&
            (smallest == nullptr || c.config.skills.count < smallest->config.skills.count)) {
            smallest = &c;
        }
    }
    for (const auto& c : table.cells) {
        const bool compare = c.label == "resample" || (c.label == "16" && smallest != nullptr && smallest->label != "16");
        if (smallest == nullptr || !compare) {
            continue;
        }
        const double gap = c.report.r2_diff - smallest->report.r2_diff;
        table.checks.push_back({"r2_diff(" + smallest->label + ") <= r2_diff(" + c.label + ") - 0.2",
                                gap >= kAblationR2Gap, "gap " + fmt(gap)});
        table.checks.push_back({"coverage(" + smallest->label + ") < coverage(" + c.label + ")",
                                smallest->report.coverage.occupied() < c.report.coverage.occupied(),
                                std::to_string(smallest->report.coverage.occupied()) + " vs " +
                                    std::to_string(c.report.coverage.occupied())});
    }

    std::vector<const AblationCell*> fixed;
    for (const auto& c : table.cells) {
        if (c.config.skills.mode == SkillMode::FixedSet) {
            fixed.push_back(&c);
        }
    }
    std::sort(fixed.begin(), fixed.end(),
              [](const AblationCell* a, const AblationCell* b) { return a->config.skills.count < b->config.skills.count; });
    bool r2_monotone = true;
    bool coverage_monotone = true;
    for (std::size_t i = 1; i < fixed.size(); ++i) {
        r2_monotone = r2_monotone && fixed[i]->report.r2_diff >= fixed[i - 1]->report.r2_diff;
        coverage_monotone =
            coverage_monotone && fixed[i]->report.coverage.occupied() >= fixed[i - 1]->report.coverage.occupied();
    }
    table.comparison = {{"r2_diff_nondecreasing_in_count", r2_monotone},
                        {"coverage_nondecreasing_in_count", coverage_monotone}};
    return table;
}

AblationTable ablate_dim(const RunConfig& base, const std::vector<std::size_t>& dims, const RunOptions& options)
{
    std::vector<std::pair<std::string, RunConfig>> cells;
    for (std::size_t dim : dims) {
        RunConfig c = base;
        c.encoder.output_dim = dim;
        cells.emplace_back("dim=" + std::to_string(dim), c);
    }
    AblationTable table = run_table("ablate_dim", base, std::move(cells), {"encoder.output_dim"}, options);
    table.checks.push_back(failed_ok(table));

    const std::size_t d = base.env.d;
    const AblationCell* reference = nullptr;
    for (const auto& c : table.cells) {
        if (c.config.resolved().encoder.output_dim == d) {
            reference = &c;
        }
    }
    if (reference == nullptr) {
        table.checks.push_back({"dim = d cell present", false, "add dim " + std::to_string(d)});
        return table;
    }
    for (const auto& c : table.cells) {
        const std::size_t dim = c.config.resolved().encoder.output_dim;
        if (dim >= d) {
            continue;
        }
        const double gap = reference->report.r2_diff - c.report.r2_diff;
        if (2 * dim <= d) {
            table.checks.push_back({"r2_diff(" + c.label + ") <= r2_diff(" + reference->label + ") - 0.2",
                                    gap >= kAblationR2Gap, "gap " + fmt(gap)});
        } else {
            table.checks.push_back({"r2_diff(" + c.label + ") < r2_diff(" + reference->label + ")", gap > 0.0,
                                    "gap " + fmt(gap)});
        }
        table.checks.push_back({"oracle(" + reference->label + ") >= oracle(" + c.label + ")",
                                reference->report.oracle_return >= c.report.oracle_return,
                                fmt(reference->report.oracle_return) + " vs " + fmt(c.report.oracle_return)});
    }
    return table;
}

AblationTable ablate_objective(const RunConfig& base, const RunOptions& options)
{
    std::vector<std::pair<std::string, RunConfig>> cells;
    for (ObjectiveKind kind : {ObjectiveKind::FutureDiff, ObjectiveKind::Marginal, ObjectiveKind::AnchorDiff}) {
        RunConfig c = base;
        c.train.objective = kind;
        cells.emplace_back(std::string(to_string(kind)), c);
    }
    AblationTable table = run_table("ablate_objective", base, std::move(cells), {"train.objective"}, options);
    table.checks.push_back(failed_ok(table));

    const RunReport& future = table.cell("future-diff").report;
    const RunReport& marginal = table.cell("marginal").report;
    const RunReport& anchor = table.cell("anchor-diff").report;
    table.checks.push_back({"|cos| marginal > |cos| future-diff",
                            marginal.geometry.mean_abs_cos_pair > future.geometry.mean_abs_cos_pair,
                            fmt(marginal.geometry.mean_abs_cos_pair) + " vs " +
                                fmt(future.geometry.mean_abs_cos_pair)});
    table.checks.push_back({"future-diff identifiable", passes_identifiability(future),
                            "r2_state " + fmt(future.r2_state) + " r2_diff " + fmt(future.r2_diff)});
    table.checks.push_back({"marginal not identifiable", !passes_identifiability(marginal),
                            "r2_state " + fmt(marginal.r2_state) + " r2_diff " + fmt(marginal.r2_diff)});
    table.checks.push_back({"anchor-diff not identifiable", !passes_identifiability(anchor),
                            "r2_state " + fmt(anchor.r2_state) + " r2_diff " + fmt(anchor.r2_diff)});
    return table;
}

AblationTable lemma_check(const RunConfig& base, const RunOptions& options)
{
    RunConfig scripted = base;
    scripted.policy.kind = PolicyKind::Kind::ScriptedVmf;
    RunConfig uniform = base;
    uniform.policy.kind = PolicyKind::Kind::Uniform;
    AblationTable table =
        run_table("lemma_check", scripted, {{"scripted-vmf", scripted}, {"uniform", uniform}}, {"policy.kind"}, options);
    table.checks.push_back(failed_ok(table));

    const RunReport& s = table.cell("scripted-vmf").report;
    const RunReport& u = table.cell("uniform").report;
    const double bound = 3.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(u.reward_transitions, 1)));
    table.checks.push_back({"uniform accuracy within 3 pp of chance",
                            std::abs(u.heldout_accuracy - u.chance_accuracy) <= kChanceTolerance,
                            fmt(u.heldout_accuracy) + " vs chance " + fmt(u.chance_accuracy)});
    table.checks.push_back({"uniform mean reward within 3/sqrt(N) of 0", std::abs(u.mean_reward) <= bound,
                            fmt(u.mean_reward) + " bound " + fmt(bound)});
    table.checks.push_back({"scripted accuracy > 5x chance", s.heldout_accuracy > kAccuracyOverChance * s.chance_accuracy,
                            fmt(s.heldout_accuracy) + " vs " + fmt(kAccuracyOverChance * s.chance_accuracy)});
    table.checks.push_back({"scripted diversity >= 0.5", s.diversity_score >= kScriptedDiversity,
                            fmt(s.diversity_score)});
    table.checks.push_back({"uniform diversity within 3 pp of chance",
                            std::abs(u.diversity_score - u.diversity_chance) <= kChanceTolerance,
                            fmt(u.diversity_score) + " vs chance " + fmt(u.diversity_chance)});
    return table;
}

void write_table(const AblationTable& table, const fs::path& dir)
{
    fs::create_directories(dir);
    std::ofstream csv(dir / (table.name + ".csv"));
    csv << "cell,config_hash,status,r2_state,r2_diff,diversity,coverage_cells,coverage_fraction,oracle_return,"
           "mean_abs_cos_pair,mean_cos_diff_skill,heldout_accuracy,mean_reward,is_affine_generator,conditioning,"
           "rejected_steps\n";
    csv.precision(17);
    json cells = json::array();
    for (const auto& c : table.cells) {
        const RunReport& r = c.report;
        csv << c.label << ',' << r.config_hash.substr(0, 16) << ',' << r.status << ',' << r.r2_state << ','
            << r.r2_diff << ',' << r.diversity_score << ',' << r.coverage.occupied() << ',' << r.coverage.fraction
            << ',' << r.oracle_return << ',' << r.geometry.mean_abs_cos_pair << ',' << r.geometry.mean_cos_diff_skill
            << ',' << r.heldout_accuracy << ',' << r.mean_reward << ',' << (r.affine.is_generator ? 1 : 0) << ','
            << r.conditioning << ',' << r.rejected_steps << '\n';
        json cell = to_json(r);
        cell["label"] = c.label;
        cell["directory"] = (fs::path("runs") / r.config_hash.substr(0, 16)).string();
        cells.push_back(std::move(cell));
    }
    json checks = json::array();
    for (const auto& c : table.checks) {
        checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    }
    const json doc{{"name", table.name}, {"cells", cells}, {"checks", checks}, {"comparison", table.comparison},
                   {"all_passed", table.all_passed()}};
    std::ofstream(dir / (table.name + ".json")) << doc.dump(2) << '\n';
}

json summarize_seeds(const std::vector<RunReport>& reports)
{
    const auto stats = [&](auto metric) {
        std::vector<double> v;
        for (const auto& r : reports) {
            v.push_back(metric(r));
        }
        double mean = 0.0;
        for (double x : v) {
            mean += x;
        }
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) {
            var += (x - mean) * (x - mean);
        }
        const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        return json{{"mean", mean}, {"two_sd", 2.0 * sd}, {"n", v.size()}};
    };
    if (reports.empty()) {
        throw std::invalid_argument("summarize: no reports");
    }
    json seeds = json::array();
    for (const auto& r : reports) {
        seeds.push_back(r.config.at("seed"));
    }
    return json{{"error_bars", "mean +/- 2 sd (sample sd)"},
                {"seeds", seeds},
                {"r2_state", stats([](const RunReport& r) { return r.r2_state; })},
                {"r2_diff", stats([](const RunReport& r) { return r.r2_diff; })},
                {"diversity", stats([](const RunReport& r) { return r.diversity_score; })},
                {"coverage_cells", stats([](const RunReport& r) { return static_cast<double>(r.coverage.occupied()); })},
                {"oracle_return", stats([](const RunReport& r) { return r.oracle_return; })},
                {"wall_seconds", stats([](const RunReport& r) { return r.wall_seconds; })}};
}

} // namespace csf
