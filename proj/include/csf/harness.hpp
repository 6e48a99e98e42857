#pragma once

// Experiment orchestration: run configuration and seeding, the
// collect / train / evaluate loop, the ablations, the max-entropy check and
// artifact rendering.

#include "csf/csf_core.hpp"
#include "csf/dgp.hpp"
#include "csf/eval.hpp"
#include "csf/geometry.hpp"
#include "csf/neural.hpp"
#include "csf/policy.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace csf {

struct SkillsConfig {
    std::size_t count = 64;
    SkillMode mode = SkillMode::ResampleEachBatch;
};

std::string_view to_string(SkillMode mode);
SkillMode skill_mode_from_string(std::string_view name);

/// Replay buffer feeding the encoder. The buffer is filled before the first
/// update and then refreshed first-in first-out.
struct DataConfig {
    std::size_t buffer_episodes = 256;
    std::size_t episodes_per_collect = 4;
    std::size_t collect_interval = 50;
    /// Steps a collection skill stays active before it is redrawn. With 1,
    /// the state reached is independent of the skill acting on it.
    std::size_t skill_hold = 1;
};

struct EvalConfig {
    std::size_t interval = 500;
    std::size_t probe_states = 2000;
    std::size_t coverage_grid = 50;
    std::size_t coverage_rollouts = 16;
    std::size_t oracle_skills = 64;
    std::size_t oracle_tasks = 8;
    std::size_t diversity_skills = 16;
    std::size_t diversity_episodes = 4;
    std::size_t heldout_episodes = 32;
};

/// Complete description of one experiment. Several fields are derived and
/// filled by `resolved()`: generator.d = env.d, encoder.input_dim =
/// generator.D, encoder.output_dim = env.d when left at 0, the scripted
/// policy concentration = env.kappa_env, and the train block's copies of
/// encoder, skill mode and eval interval. Sub-seeds come from `seed`.
struct RunConfig {
    EnvConfig env;
    GeneratorSpec generator;
    MlpSpec encoder{0, 0, {256, 256}, 0.2, true};
    TrainConfig train;
    PolicyKind policy;
    SkillsConfig skills;
    DataConfig data;
    EvalConfig eval;
    double gamma = 1.0;
    std::uint64_t seed = 1;

    RunConfig resolved() const;
    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);

/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// SHA-256 of the resolved config echo.
std::string config_hash(const RunConfig& config);

struct RunSeeds {
    std::uint64_t generator = 0;
    std::uint64_t encoder_init = 0;
    std::uint64_t skills = 0;
    std::uint64_t collect = 0;
    std::uint64_t train = 0;
    std::uint64_t probe = 0;
    std::uint64_t split = 0;
    std::uint64_t evaluation = 0;

    static RunSeeds derive(std::uint64_t master);
};

nlohmann::json to_json(const RunSeeds& seeds);

struct RunReport {
    std::string status = "ok"; ///< "ok" or "failed"
    std::string failure_reason; ///< "", "divergence" or "budget"
    std::size_t steps = 0;

    double r2_state = 0.0;
    double r2_diff = 0.0;
    double diversity_score = 0.0;
    double diversity_chance = 0.0;
    bool diversity_duplicates = false;
    CoverageReport coverage;
    double oracle_return = 0.0; ///< mean over hidden tasks
    std::vector<double> oracle_returns;
    GeometryDiagnostics geometry;
    double heldout_accuracy = 0.0;
    double chance_accuracy = 0.0;
    double mean_reward = 0.0;
    std::size_t reward_transitions = 0;
    AffineGeneratorReport affine;
    double conditioning = 0.0;
    std::uint64_t rejected_steps = 0;
    double wall_seconds = 0.0; ///< kept out of report.json

    nlohmann::json config;
    RunSeeds seeds;
    std::string config_hash;
    std::string checkpoint_hash;

    bool ok() const { return status == "ok"; }
};

nlohmann::json to_json(const RunReport& report);
RunReport run_report_from_json(const nlohmann::json& j);

struct RunOptions {
    std::filesystem::path out_dir = "csf_out";
    std::size_t workers = 1;
    /// Reuse a completed run with the same config hash (run_cell only).
    bool reuse = true;
    std::ostream* log = nullptr;
};

/// Collects rollouts, trains the encoder and evaluates it. Writes
/// config.json, metrics.csv, coverage.csv, report.json, timing.json and
/// checkpoint.{json,bin} into `options.out_dir`.
RunReport run_csf(const RunConfig& config, const RunOptions& options);

/// run_csf in `<out_dir>/runs/<hash prefix>`.
RunReport run_cell(const RunConfig& config, const RunOptions& options);
std::filesystem::path cell_directory(const RunConfig& config, const std::filesystem::path& root);

/// Re-evaluates the checkpoint of a finished run directory.
RunReport evaluate_run(const std::filesystem::path& run_dir, const RunOptions& options);

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct AblationCell {
    std::string label;
    RunConfig config;
    RunReport report;
};

struct AblationTable {
    std::string name;
    std::vector<AblationCell> cells;
    std::vector<Check> checks;
    nlohmann::json comparison; ///< reported trends, not asserted

    bool all_passed() const;
    const AblationCell& cell(std::string_view label) const;
};

/// One skill-ablation cell: a fixed set of `count` skills, or resampling.
struct SkillCount {
    std::size_t count = 0;
    SkillMode mode = SkillMode::FixedSet;
};

AblationTable ablate_skills(const RunConfig& base, const std::vector<SkillCount>& counts, const RunOptions& options);
AblationTable ablate_dim(const RunConfig& base, const std::vector<std::size_t>& dims, const RunOptions& options);
AblationTable ablate_objective(const RunConfig& base, const RunOptions& options);
AblationTable lemma_check(const RunConfig& base, const RunOptions& options);

/// Writes `<name>.csv` and `<name>.json` into `dir`.
void write_table(const AblationTable& table, const std::filesystem::path& dir);

/// Leaf paths (dot separated) whose values differ between two JSON documents.
std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b);

/// Throws ConfigurationError unless the resolved configs differ only in
/// paths under one of `allowed`.
void require_single_factor(const RunConfig& base, const RunConfig& cell, const std::vector<std::string>& allowed);

/// Mean and two standard deviations of each headline metric over runs.
nlohmann::json summarize_seeds(const std::vector<RunReport>& reports);

/// Renders summary.md and loss.svg, r2.svg, coverage.svg from the CSV
/// files of a run directory.
void emit_report(const std::filesystem::path& run_dir);

/// Line chart with one polyline per series. The root element carries the
/// plotted x-range as data-x-min / data-x-max.
std::string render_svg(const std::string& title, const std::vector<double>& x,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series);

std::string sha256_hex(std::string_view data);
/// Git blob id (SHA-1 of "blob <size>\0" + content) of a file.
std::string git_blob_sha1(const std::filesystem::path& file);

/// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown on
/// the calling thread.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

} // namespace csf
