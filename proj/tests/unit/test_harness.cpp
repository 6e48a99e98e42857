#include "csf/harness.hpp"

#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace csf;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config()
{
    RunConfig c;
    c.env.horizon = 40;
    c.encoder.hidden = {32};
    c.train.steps = 100;
    c.train.negatives = 15;
    c.train.batch_size = 32;
    c.data.buffer_episodes = 8;
    c.data.episodes_per_collect = 2;
    c.data.collect_interval = 25;
    c.eval.interval = 50;
    c.eval.probe_states = 1000;
    c.eval.coverage_rollouts = 2;
    c.eval.oracle_skills = 4;
    c.eval.oracle_tasks = 2;
    c.eval.diversity_skills = 4;
    c.eval.diversity_episodes = 1;
    c.eval.heldout_episodes = 4;
    return c;
}

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("csf_harness_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

RunOptions options_in(const fs::path& dir, std::size_t workers = 1)
{
    RunOptions o;
    o.out_dir = dir;
    o.workers = workers;
    return o;
}

} // namespace

TEST_CASE("config: JSON round trip and derived fields")
{
    RunConfig c = tiny_config();
    c.seed = 42;
    c.train.objective = ObjectiveKind::Marginal;
    c.skills.mode = SkillMode::FixedSet;
    c.env.boundary = BoundaryRule::Clamp;
    const nlohmann::json j = to_json(c);
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(config_hash(back) == config_hash(c));

    const RunConfig r = c.resolved();
    CHECK(r.generator.d == r.env.d);
    CHECK(r.encoder.input_dim == r.generator.D);
    CHECK(r.encoder.output_dim == r.env.d);
    CHECK(r.policy.kappa_act == r.env.kappa_env);
    CHECK(r.train.encoder == r.encoder);
    CHECK(r.train.skill_mode == SkillMode::FixedSet);
}

TEST_CASE("config: missing keys keep defaults, unknown keys rejected")
{
    const RunConfig partial = run_config_from_json(nlohmann::json{{"seed", 9}, {"train", {{"steps", 10}}}});
    CHECK(partial.seed == 9);
    CHECK(partial.train.steps == 10);
    CHECK(partial.train.negatives == RunConfig{}.train.negatives);
    CHECK(partial.env.B == RunConfig{}.env.B);

    CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"sed", 1}}), ConfigurationError);
    CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"train", {{"step", 1}}}}), ConfigurationError);
    CHECK_THROWS(run_config_from_json(nlohmann::json{{"skills", {{"mode", "sometimes"}}}}));

    RunConfig bad = tiny_config();
    bad.eval.probe_states = 10;
    CHECK_THROWS_AS(bad.validate(), ConfigurationError);
    bad = tiny_config();
    bad.gamma = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigurationError);
}

TEST_CASE("config: hash tracks content")
{
    RunConfig a = tiny_config();
    RunConfig b = tiny_config();
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 64);
    b.seed = 2;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("seeds: distinct, deterministic substreams")
{
    const RunSeeds a = RunSeeds::derive(1);
    const RunSeeds b = RunSeeds::derive(1);
    CHECK(to_json(a) == to_json(b));
    const std::vector<std::uint64_t> all{a.generator, a.encoder_init, a.skills, a.collect,
                                         a.train,     a.probe,        a.split,  a.evaluation};
    for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            CHECK(all[i] != all[j]);
        }
    }
    CHECK(RunSeeds::derive(2).collect != a.collect);
}

TEST_CASE("run: zero steps reports the initial encoder only")
{
    const fs::path dir = scratch("zero");
    RunConfig c = tiny_config();
    c.train.steps = 0;
    const RunReport r = run_csf(c, options_in(dir));
    CHECK(r.ok());
    CHECK(r.steps == 0);
    std::ifstream metrics(dir / "metrics.csv");
    std::string header;
    std::string row;
    std::getline(metrics, header);
    CHECK(header == "step,loss,pos_logit_mean,log_partition,accuracy,r2_state,r2_diff");
    std::vector<std::string> rows;
    while (std::getline(metrics, row)) {
        rows.push_back(row);
    }
    REQUIRE(rows.size() == 1);
    CHECK(rows.front().rfind("0,", 0) == 0);
    for (const char* file : {"config.json", "report.json", "timing.json", "coverage.csv", "checkpoint.json",
                             "checkpoint.bin"}) {
        CHECK(fs::exists(dir / file));
    }
    fs::remove_all(dir);
}

TEST_CASE("run: outputs are bit identical across worker counts")
{
    const fs::path one = scratch("workers1");
    const fs::path four = scratch("workers4");
    const RunConfig c = tiny_config();
    const RunReport a = run_csf(c, options_in(one, 1));
    const RunReport b = run_csf(c, options_in(four, 4));
    for (const char* file : {"metrics.csv", "coverage.csv", "report.json", "config.json", "checkpoint.bin"}) {
        CAPTURE(file);
        CHECK(slurp(one / file) == slurp(four / file));
    }
    CHECK(a.checkpoint_hash == b.checkpoint_hash);

    const nlohmann::json report = nlohmann::json::parse(slurp(one / "report.json"));
    CHECK(report.at("config_hash") == config_hash(c));
    CHECK(report.at("config") == to_json(c));
    CHECK(report.contains("seeds"));
    CHECK_FALSE(report.contains("wall_seconds"));
    CHECK(report.at("checkpoint_hash") == git_blob_sha1(one / "checkpoint.bin"));

    const RunReport again = evaluate_run(one, options_in(one, 2));
    CHECK(again.ok());
    CHECK(again.r2_state == a.r2_state);
    CHECK(again.r2_diff == a.r2_diff);
    CHECK(again.oracle_return == a.oracle_return);
    CHECK(again.diversity_score == a.diversity_score);
    CHECK(again.coverage.cells == a.coverage.cells);
    CHECK(fs::exists(one / "eval.json"));

    fs::remove_all(one);
    fs::remove_all(four);
}

TEST_CASE("run cell: completed runs are reused by config hash")
{
    const fs::path root = scratch("cells");
    RunConfig c = tiny_config();
    c.train.steps = 20;
    const RunReport first = run_cell(c, options_in(root));
    const fs::path dir = cell_directory(c, root);
    CHECK(fs::exists(dir / "report.json"));
    const auto stamp = fs::last_write_time(dir / "metrics.csv");
    const RunReport second = run_cell(c, options_in(root));
    CHECK(fs::last_write_time(dir / "metrics.csv") == stamp);
    CHECK(second.r2_diff == first.r2_diff);
    CHECK(second.config_hash == first.config_hash);
    fs::remove_all(root);
}

TEST_CASE("ablation plumbing: config diffs and single-factor guard")
{
    const RunConfig base = tiny_config();
    RunConfig cell = base;
    cell.skills.count = 2;
    cell.skills.mode = SkillMode::FixedSet;
    const auto diff = config_diff(to_json(base), to_json(cell));
    CHECK(diff == std::vector<std::string>{"skills.count", "skills.mode"});
    CHECK_NOTHROW(require_single_factor(base, cell, {"skills"}));
    cell.train.steps = 7;
    CHECK_THROWS_AS(require_single_factor(base, cell, {"skills"}), ConfigurationError);
    CHECK(config_diff(to_json(base), to_json(base)).empty());
}

TEST_CASE("ablation: skill counts below d + 1 are flagged as non-generators")
{
    const fs::path root = scratch("ablate");
    RunConfig c = tiny_config();
    c.train.steps = 0;
    const AblationTable t =
        ablate_skills(c, {{2, SkillMode::FixedSet}, {4, SkillMode::FixedSet}, {5, SkillMode::FixedSet},
                          {16, SkillMode::FixedSet}, {16, SkillMode::ResampleEachBatch}},
                      options_in(root, 2));
    REQUIRE(t.cells.size() == 5);
    CHECK_FALSE(t.cells[0].report.affine.is_generator);
    CHECK_FALSE(t.cells[1].report.affine.is_generator);
    CHECK(t.cells[2].report.affine.is_generator);
    CHECK(t.cells[3].report.affine.is_generator);
    CHECK(t.cells[4].report.affine.is_generator);
    CHECK(t.cells[0].report.conditioning == 0.0);
    CHECK(t.cells[2].report.conditioning > 0.0);
    CHECK(t.comparison.contains("r2_diff_nondecreasing_in_count"));
    write_table(t, root);
    CHECK(fs::exists(root / "ablate_skills.csv"));
    CHECK(fs::exists(root / "ablate_skills.json"));
    fs::remove_all(root);
}

TEST_CASE("seed summary: mean and two sample standard deviations")
{
    std::vector<RunReport> reports(3);
    const double values[] = {0.9, 0.95, 1.0};
    for (int i = 0; i < 3; ++i) {
        reports[static_cast<std::size_t>(i)].r2_diff = values[i];
        reports[static_cast<std::size_t>(i)].config = nlohmann::json{{"seed", i + 1}};
    }
    const nlohmann::json s = summarize_seeds(reports);
    CHECK(s.at("r2_diff").at("mean").get<double>() == doctest::Approx(0.95));
    CHECK(s.at("r2_diff").at("two_sd").get<double>() == doctest::Approx(2.0 * 0.05));
    CHECK(s.at("r2_diff").at("n") == 3);
}

TEST_CASE("report: empty metrics rejected")
{
    const fs::path dir = scratch("empty");
    CHECK_THROWS(emit_report(dir));
    std::ofstream(dir / "metrics.csv") << "step,loss,pos_logit_mean,log_partition,accuracy,r2_state,r2_diff\n";
    CHECK_THROWS(emit_report(dir));
    fs::remove_all(dir);
}

TEST_CASE("report: plots span the CSV step range and parse as XML")
{
    const fs::path dir = scratch("report");
    RunConfig c = tiny_config();
    c.train.steps = 120;
    run_csf(c, options_in(dir));
    emit_report(dir);
    for (const char* file : {"loss.svg", "r2.svg", "coverage.svg", "summary.md"}) {
        CAPTURE(file);
        CHECK(fs::exists(dir / file));
    }
    const std::string svg = slurp(dir / "loss.svg");
    std::smatch m;
    REQUIRE(std::regex_search(svg, m, std::regex("data-x-min=\"([^\"]+)\" data-x-max=\"([^\"]+)\"")));
    CHECK(std::stod(m[1].str()) == 0.0);
    CHECK(std::stod(m[2].str()) == 120.0);

    for (const char* file : {"loss.svg", "r2.svg", "coverage.svg"}) {
        const std::string cmd = "python3 -c \"import sys, xml.etree.ElementTree as E; E.parse(sys.argv[1])\" '" +
                                (dir / file).string() + "'";
        CAPTURE(file);
        CHECK(std::system(cmd.c_str()) == 0);
    }
    const std::string summary = slurp(dir / "summary.md");
    CHECK(summary.find("r2_diff") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("render: escapes labels and breaks lines at missing values")
{
    const std::string svg =
        render_svg("a < b & c", {0, 1, 2, 3}, {{"x<y", {1.0, std::nan(""), 2.0, 3.0}}});
    CHECK(svg.find("a &lt; b &amp; c") != std::string::npos);
    CHECK(svg.find("x&lt;y") != std::string::npos);
    CHECK(svg.find("a < b") == std::string::npos);
    std::size_t polylines = 0;
    for (std::size_t pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) {
        ++polylines;
    }
    CHECK(polylines == 2);
}

TEST_CASE("hashes: known digests")
{
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const fs::path dir = scratch("blob");
    std::ofstream(dir / "hello.txt", std::ios::binary) << "hello\n";
    CHECK(git_blob_sha1(dir / "hello.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
    fs::remove_all(dir);
}

TEST_CASE("parallel_for: visits every index once and rethrows")
{
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i].fetch_add(1); });
    for (const auto& h : hits) {
        CHECK(h.load() == 1);
    }
    CHECK_THROWS_AS(parallel_for(100, 4,
                                 [](std::size_t i) {
                                     if (i == 37) {
                                         throw std::runtime_error("boom");
                                     }
                                 }),
                    std::runtime_error);
    std::size_t count = 0;
    parallel_for(5, 1, [&](std::size_t) { ++count; });
    CHECK(count == 5);
}
