#include "csf/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace csf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::mutex log_mutex;

void log_line(const RunOptions& options, const std::string& line)
{
    if (options.log != nullptr) {
        const std::lock_guard<std::mutex> lock(log_mutex);
        *options.log << line << std::endl;
    }
}

json real(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double real_of(const json& j, const char* key)
{
    const json& v = j.at(key);
    return v.is_null() ? std::nan("") : v.get<double>();
}

template <class T>
void read(const json& j, const char* key, T& out)
{
    if (const auto it = j.find(key); it != j.end()) {
        out = it->get<T>();
    }
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, std::string_view where)
{
    if (!j.is_object()) {
        throw ConfigurationError("config: " + std::string(where) + " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (std::string_view k : keys) {
            known = known || key == k;
        }
        if (!known) {
            throw ConfigurationError("config: unknown key " + std::string(where) + "." + key);
        }
    }
}

std::string_view to_string(BoundaryRule rule) { return rule == BoundaryRule::Reflect ? "reflect" : "clamp"; }

BoundaryRule boundary_from_string(std::string_view name)
{
    if (name == "reflect") {
        return BoundaryRule::Reflect;
    }
    if (name == "clamp") {
        return BoundaryRule::Clamp;
    }
    throw ConfigurationError("unknown boundary rule: " + std::string(name));
}

std::string digest_hex(const EVP_MD* md, std::string_view data)
{
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1) {
        throw std::runtime_error("digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string text;
    for (unsigned int i = 0; i < len; ++i) {
        text.push_back(hex[out[i] >> 4]);
        text.push_back(hex[out[i] & 0xf]);
    }
    return text;
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << text;
}

SkillDraw skill_draw(const SkillSet& skills)
{
    if (skills.mode == SkillMode::ResampleEachBatch) {
        const std::size_t k = skills.dim();
        return [k](Rng& rng) { return sample_uniform_sphere(k, rng); };
    }
    return [members = skills.skills](Rng& rng) {
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        return members[pick(rng)];
    };
}

/// `count` skills for evaluation: the set's members in order (cycling), or
/// fresh uniform draws in resample mode.
std::vector<UnitVector> evaluation_skills(const SkillSet& skills, std::size_t count, std::uint64_t seed)
{
    std::vector<UnitVector> out;
    out.reserve(count);
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        if (skills.mode == SkillMode::ResampleEachBatch) {
            out.push_back(sample_uniform_sphere(skills.dim(), rng));
        } else {
            out.push_back(skills.skills[i % skills.size()]);
        }
    }
    return out;
}

/// `count` well-separated skills: farthest-point selection (smallest
/// largest cosine to the skills already chosen) from a pool of uniform draws.
std::vector<UnitVector> spread_skills(std::size_t count, std::size_t k, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<UnitVector> pool;
    for (std::size_t i = 0; i < 64 * count; ++i) {
        pool.push_back(sample_uniform_sphere(k, rng));
    }
    std::vector<UnitVector> out{pool.front()};
    std::vector<double> closest(pool.size(), -1.0);
    while (out.size() < count) {
        std::size_t pick = 0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            closest[i] = std::max(closest[i], pool[i].dot(out.back().coords()));
            if (closest[i] < closest[pick]) {
                pick = i;
            }
        }
        out.push_back(pool[pick]);
    }
    return out;
}

std::vector<Trajectory> collect_episodes(const RunConfig& cfg, const PolicyContext& context, const SkillDraw& draw,
                                         std::size_t first_episode, std::size_t count, std::uint64_t seed,
                                         std::size_t workers)
{
    std::vector<Trajectory> out(count, Trajectory{UnitVector::basis(1, 0), {}, 0});
    parallel_for(count, workers, [&](std::size_t i) {
        const std::size_t episode = first_episode + i;
        Rng rng(derive_seed(seed, "episode", episode));
        const LatentState start = sample_episode_start(cfg.env, rng);
        out[i] = rollout(cfg.policy, context, draw, cfg.data.skill_hold, cfg.env.horizon, start, rng(), episode);
    });
    return out;
}

/// Every interior transition of `episodes` as one batch. The anchor-diff
/// objective pairs each next observation with its episode's first one.
Batch batch_from(const std::vector<Trajectory>& episodes, ObjectiveKind objective)
{
    std::size_t n = 0;
    for (const auto& tr : episodes) {
        for (const auto& r : tr.records) {
            n += r.boundary ? 0 : 1;
        }
    }
    if (n == 0) {
        throw std::runtime_error("no interior transitions");
    }
    const auto& first = episodes.front().records.front();
    const auto cols = static_cast<Eigen::Index>(n);
    Batch batch{Eigen::MatrixXd(first.o.size(), cols), Eigen::MatrixXd(first.o.size(), cols),
                Eigen::MatrixXd(static_cast<Eigen::Index>(first.z.dim()), cols), Eigen::MatrixXd()};
    Eigen::Index j = 0;
    for (const auto& tr : episodes) {
        for (const auto& r : tr.records) {
            if (r.boundary) {
                continue;
            }
            batch.from.col(j) = objective == ObjectiveKind::AnchorDiff ? tr.records.front().o : r.o;
            batch.to.col(j) = r.o_next;
            batch.positives.col(j) = r.z.coords();
            ++j;
        }
    }
    return batch;
}

/// First-in first-out buffer of policy rollouts, refilled while training.
/// Greedy collection uses the parameters of the step that triggers it.
class RolloutSource : public BatchSource {
public:
    RolloutSource(const RunConfig& cfg, const Generator& generator, const Mlp& encoder, const SkillSet& skills,
                  std::uint64_t seed, std::size_t workers)
        : cfg_(cfg), generator_(generator), encoder_(encoder), skills_(skills), draw_(skill_draw(skills)),
          seed_(seed), workers_(workers)
    {
    }

    Batch next_batch(std::size_t step, const Eigen::VectorXd& params, Rng& rng) override
    {
        if (buffer_.empty()) {
            collect(cfg_.data.buffer_episodes, params);
        } else if (step > 0 && step % cfg_.data.collect_interval == 0) {
            collect(cfg_.data.episodes_per_collect, params);
        }
        const auto& any = buffer_.front().records.front();
        const auto n = static_cast<Eigen::Index>(cfg_.train.batch_size);
        const auto D = any.o.size();
        Batch batch{Eigen::MatrixXd(D, n), Eigen::MatrixXd(D, n),
                    Eigen::MatrixXd(static_cast<Eigen::Index>(any.z.dim()), n), Eigen::MatrixXd()};
        std::uniform_int_distribution<std::size_t> pick(0, index_.size() - 1);
        const bool anchored = cfg_.train.objective == ObjectiveKind::AnchorDiff;
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto [e, t] = index_[pick(rng)];
            const auto& tr = buffer_[e];
            const auto& r = tr.records[t];
            batch.from.col(j) = anchored ? tr.records.front().o : r.o;
            batch.to.col(j) = r.o_next;
            batch.positives.col(j) = r.z.coords();
        }
        batch.negatives = draw_negatives(skills_, cfg_.train.negatives, rng);
        return batch;
    }

private:
    void collect(std::size_t count, const Eigen::VectorXd& params)
    {
        const PolicyContext context{&cfg_.env, &generator_, &encoder_, &params};
        auto fresh = collect_episodes(cfg_, context, draw_, collected_, count, seed_, workers_);
        collected_ += count;
        for (auto& tr : fresh) {
            buffer_.push_back(std::move(tr));
        }
        while (buffer_.size() > cfg_.data.buffer_episodes) {
            buffer_.pop_front();
        }
        index_.clear();
        for (std::size_t e = 0; e < buffer_.size(); ++e) {
            for (std::size_t t = 0; t < buffer_[e].records.size(); ++t) {
                if (!buffer_[e].records[t].boundary) {
                    index_.emplace_back(e, t);
                }
            }
        }
        if (index_.empty()) {
            throw std::runtime_error("replay buffer holds no interior transitions");
        }
    }

    const RunConfig& cfg_;
    const Generator& generator_;
    const Mlp& encoder_;
    const SkillSet& skills_;
    SkillDraw draw_;
    std::uint64_t seed_;
    std::size_t workers_;
    std::size_t collected_ = 0;
    std::deque<Trajectory> buffer_;
    std::vector<std::pair<std::size_t, std::size_t>> index_;
};

/// Everything fixed by (config, seed) that training and evaluation share.
struct World {
    RunConfig cfg;
    RunSeeds seeds;
    Generator generator;
    Mlp encoder;
    SkillSet skills;
    ProbeSet probe;
};

World build_world(const RunConfig& config)
{
    config.validate();
    RunConfig cfg = config.resolved();
    const RunSeeds seeds = RunSeeds::derive(cfg.seed);
    Generator generator = make_generator(cfg.generator);
    Mlp encoder(cfg.encoder);
    Rng skill_rng(seeds.skills);
    SkillSet skills = SkillSet::sample_uniform(cfg.skills.count, cfg.encoder.output_dim, cfg.skills.mode, skill_rng);
    Rng probe_rng(seeds.probe);
    ProbeSet probe = make_probe_set(cfg.env, cfg.eval.probe_states, probe_rng);
    return World{std::move(cfg), seeds, std::move(generator), std::move(encoder), std::move(skills),
                 std::move(probe)};
}

CoverageReport coverage_rollouts(const World& w, const Eigen::VectorXd& params, std::size_t workers)
{
    const PolicyContext context{&w.cfg.env, &w.generator, &w.encoder, &params};
    const auto skills =
        evaluation_skills(w.skills, w.cfg.eval.coverage_rollouts, derive_seed(w.seeds.evaluation, "coverage-skills"));
    const LatentState origin = LatentState::Zero(static_cast<Eigen::Index>(w.cfg.env.d));
    std::vector<Trajectory> trajectories(skills.size(), Trajectory{UnitVector::basis(1, 0), {}, 0});
    parallel_for(skills.size(), workers, [&](std::size_t i) {
        trajectories[i] = rollout(w.cfg.policy, context, skills[i], w.cfg.env.horizon, origin,
                                  derive_seed(w.seeds.evaluation, "coverage", i), i);
    });
    return state_coverage(trajectories, w.cfg.eval.coverage_grid, w.cfg.env.B);
}

/// Final metrics of `params` other than the identifiability probe.
void evaluate_final(const World& w, const Eigen::VectorXd& params, std::size_t workers, RunReport& report)
{
    const RunConfig& cfg = w.cfg;
    const PolicyContext context{&cfg.env, &w.generator, &w.encoder, &params};
    const LatentState origin = LatentState::Zero(static_cast<Eigen::Index>(cfg.env.d));

    report.coverage = coverage_rollouts(w, params, workers);

    const std::size_t oracle_count =
        cfg.skills.mode == SkillMode::FixedSet ? w.skills.size() : cfg.eval.oracle_skills;
    const auto oracle_skills = evaluation_skills(w.skills, oracle_count, derive_seed(w.seeds.evaluation, "oracle-skills"));
    Rng task_rng(derive_seed(w.seeds.evaluation, "oracle-tasks"));
    std::vector<UnitVector> tasks;
    for (std::size_t i = 0; i < cfg.eval.oracle_tasks; ++i) {
        tasks.push_back(sample_uniform_sphere(cfg.env.d, task_rng));
    }
    report.oracle_returns.assign(tasks.size(), 0.0);
    parallel_for(tasks.size(), workers, [&](std::size_t i) {
        Rng rng(derive_seed(w.seeds.evaluation, "oracle-rollouts"));
        report.oracle_returns[i] =
            oracle_return(cfg.policy, context, oracle_skills, tasks[i], cfg.env.horizon, origin, rng, cfg.gamma)
                .oracle_return;
    });
    double total = 0.0;
    for (double r : report.oracle_returns) {
        total += r;
    }
    report.oracle_return = tasks.empty() ? std::nan("") : total / static_cast<double>(tasks.size());

    const std::size_t diversity_count =
        cfg.skills.mode == SkillMode::FixedSet ? std::min(w.skills.size(), cfg.eval.diversity_skills)
                                               : cfg.eval.diversity_skills;
    if (diversity_count >= 2) {
        const std::uint64_t skill_seed = derive_seed(w.seeds.evaluation, "diversity-skills");
        const auto skills = cfg.skills.mode == SkillMode::FixedSet
                                ? evaluation_skills(w.skills, diversity_count, skill_seed)
                                : spread_skills(diversity_count, w.skills.dim(), skill_seed);
        const std::size_t per = cfg.eval.diversity_episodes;
        std::vector<Trajectory> flat(skills.size() * per, Trajectory{UnitVector::basis(1, 0), {}, 0});
        parallel_for(flat.size(), workers, [&](std::size_t i) {
            Rng rng(derive_seed(w.seeds.evaluation, "diversity", i));
            const LatentState start = sample_episode_start(cfg.env, rng);
            flat[i] = rollout(cfg.policy, context, skills[i / per], cfg.env.horizon, start, rng(), i);
        });
        std::vector<std::vector<Trajectory>> groups(skills.size());
        for (std::size_t i = 0; i < flat.size(); ++i) {
            groups[i / per].push_back(std::move(flat[i]));
        }
        const DiversityReport diversity = diversity_score(groups, w.encoder, params);
        report.diversity_score = diversity.score;
        report.diversity_chance = diversity.chance;
        report.diversity_duplicates = diversity.duplicate_skills;
    } else {
        report.diversity_score = std::nan("");
        report.diversity_chance = std::nan("");
    }

    const auto heldout = collect_episodes(cfg, context, skill_draw(w.skills), 0, cfg.eval.heldout_episodes,
                                          derive_seed(w.seeds.evaluation, "heldout"), workers);
    std::vector<TransitionRecord> interior;
    for (const auto& tr : heldout) {
        for (const auto& r : tr.records) {
            if (!r.boundary) {
                interior.push_back(r);
            }
        }
    }
    report.geometry = geometry_diagnostics(w.encoder, params, interior);
    Batch batch = batch_from(heldout, cfg.train.objective);
    Rng negative_rng(derive_seed(w.seeds.evaluation, "heldout-negatives"));
    batch.negatives = draw_negatives(w.skills, cfg.train.negatives, negative_rng);
    report.heldout_accuracy = batch_loss(cfg.train.objective, w.encoder, params, batch, cfg.train.xi, false).report.accuracy;
    report.chance_accuracy = 1.0 / static_cast<double>(cfg.train.negatives + 1);
    report.mean_reward = mean_reward(heldout, w.encoder, params);
    report.reward_transitions = interior.size();
}

void fill_skill_diagnostics(const World& w, RunReport& report)
{
    report.affine = is_affine_generator(w.skills);
    report.conditioning = w.skills.size() >= 2 ? skill_conditioning(w.skills) : 0.0;
}

std::string short_hash(const std::string& hash) { return hash.substr(0, 16); }

} // namespace

std::string_view to_string(SkillMode mode) { return mode == SkillMode::FixedSet ? "fixed" : "resample"; }

SkillMode skill_mode_from_string(std::string_view name)
{
    if (name == "fixed") {
        return SkillMode::FixedSet;
    }
    if (name == "resample") {
        return SkillMode::ResampleEachBatch;
    }
    throw ConfigurationError("unknown skill mode: " + std::string(name));
}

RunConfig RunConfig::resolved() const
{
    RunConfig r = *this;
    r.generator.d = env.d;
    r.generator.seed = derive_seed(seed, "generator");
    r.encoder.input_dim = generator.D;
    if (r.encoder.output_dim == 0) {
        r.encoder.output_dim = env.d;
    }
    if (r.policy.kind == PolicyKind::Kind::ScriptedVmf) {
        r.policy.kappa_act = env.kappa_env;
    }
    r.train.encoder = r.encoder;
    r.train.skill_mode = skills.mode;
    r.train.eval_interval = eval.interval;
    r.train.seed = derive_seed(seed, "train");
    return r;
}

void RunConfig::validate() const
{
    if (env.d == 0) {
        throw ConfigurationError("config: env.d must be >= 1");
    }
    if (!(env.B > 0.0) || !(env.kappa_env >= 0.0) || env.horizon == 0) {
        throw ConfigurationError("config: env needs B > 0, kappa_env >= 0 and horizon >= 1");
    }
    if (skills.count == 0) {
        throw ConfigurationError("config: skills.count must be >= 1");
    }
    if (data.buffer_episodes == 0 || data.episodes_per_collect == 0 || data.collect_interval == 0 ||
        data.skill_hold == 0) {
        throw ConfigurationError("config: data fields must be >= 1");
    }
    if (eval.interval == 0 || eval.probe_states < kMinProbeStates || eval.coverage_grid < 2 ||
        eval.coverage_rollouts == 0 || eval.oracle_skills == 0 || eval.diversity_episodes == 0 ||
        eval.heldout_episodes == 0) {
        throw ConfigurationError("config: eval fields out of range");
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw ConfigurationError("config: gamma must lie in (0, 1]");
    }
    const RunConfig r = resolved();
    r.train.validate();
    r.policy.validate();
}

json to_json(const RunConfig& config)
{
    const RunConfig c = config.resolved();
    return json{
        {"env",
         {{"d", c.env.d},
          {"B", c.env.B},
          {"boundary", to_string(c.env.boundary)},
          {"kappa_env", c.env.kappa_env},
          {"horizon", c.env.horizon}}},
        {"generator",
         {{"D", c.generator.D},
          {"hidden_layers", c.generator.hidden_layers},
          {"activation_slope", c.generator.activation_slope},
          {"input_scale", c.generator.input_scale},
          {"identity", c.generator.identity}}},
        {"encoder",
         {{"output_dim", c.encoder.output_dim},
          {"hidden", c.encoder.hidden},
          {"negative_slope", c.encoder.negative_slope},
          {"skip_connections", c.encoder.skip_connections}}},
        {"train",
         {{"objective", to_string(c.train.objective)},
          {"xi", c.train.xi},
          {"negatives", c.train.negatives},
          {"batch_size", c.train.batch_size},
          {"steps", c.train.steps},
          {"learning_rate", c.train.learning_rate},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"epsilon", c.train.epsilon},
          {"max_rejected_fraction", c.train.max_rejected_fraction}}},
        {"policy",
         {{"kind", to_string(c.policy.kind)}, {"candidates", c.policy.candidates}, {"epsilon", c.policy.epsilon}}},
        {"skills", {{"count", c.skills.count}, {"mode", to_string(c.skills.mode)}}},
        {"data",
         {{"buffer_episodes", c.data.buffer_episodes},
          {"episodes_per_collect", c.data.episodes_per_collect},
          {"collect_interval", c.data.collect_interval},
          {"skill_hold", c.data.skill_hold}}},
        {"eval",
         {{"interval", c.eval.interval},
          {"probe_states", c.eval.probe_states},
          {"coverage_grid", c.eval.coverage_grid},
          {"coverage_rollouts", c.eval.coverage_rollouts},
          {"oracle_skills", c.eval.oracle_skills},
          {"oracle_tasks", c.eval.oracle_tasks},
          {"diversity_skills", c.eval.diversity_skills},
          {"diversity_episodes", c.eval.diversity_episodes},
          {"heldout_episodes", c.eval.heldout_episodes}}},
        {"gamma", c.gamma},
        {"seed", c.seed},
    };
}

RunConfig run_config_from_json(const json& j)
{
    RunConfig c;
    reject_unknown(j, {"env", "generator", "encoder", "train", "policy", "skills", "data", "eval", "gamma", "seed"},
                   "root");
    if (const auto it = j.find("env"); it != j.end()) {
        reject_unknown(*it, {"d", "B", "boundary", "kappa_env", "horizon"}, "env");
        read(*it, "d", c.env.d);
        read(*it, "B", c.env.B);
        if (const auto b = it->find("boundary"); b != it->end()) {
            c.env.boundary = boundary_from_string(b->get<std::string>());
        }
        read(*it, "kappa_env", c.env.kappa_env);
        read(*it, "horizon", c.env.horizon);
    }
    if (const auto it = j.find("generator"); it != j.end()) {
        reject_unknown(*it, {"D", "hidden_layers", "activation_slope", "input_scale", "identity"}, "generator");
        read(*it, "D", c.generator.D);
        read(*it, "hidden_layers", c.generator.hidden_layers);
        read(*it, "activation_slope", c.generator.activation_slope);
        read(*it, "input_scale", c.generator.input_scale);
        read(*it, "identity", c.generator.identity);
    }
    if (const auto it = j.find("encoder"); it != j.end()) {
        reject_unknown(*it, {"output_dim", "hidden", "negative_slope", "skip_connections"}, "encoder");
        read(*it, "output_dim", c.encoder.output_dim);
        read(*it, "hidden", c.encoder.hidden);
        read(*it, "negative_slope", c.encoder.negative_slope);
        read(*it, "skip_connections", c.encoder.skip_connections);
    }
    if (const auto it = j.find("train"); it != j.end()) {
        reject_unknown(*it,
                       {"objective", "xi", "negatives", "batch_size", "steps", "learning_rate", "beta1", "beta2",
                        "epsilon", "max_rejected_fraction"},
                       "train");
        if (const auto o = it->find("objective"); o != it->end()) {
            c.train.objective = objective_from_string(o->get<std::string>());
        }
        read(*it, "xi", c.train.xi);
        read(*it, "negatives", c.train.negatives);
        read(*it, "batch_size", c.train.batch_size);
        read(*it, "steps", c.train.steps);
        read(*it, "learning_rate", c.train.learning_rate);
        read(*it, "beta1", c.train.beta1);
        read(*it, "beta2", c.train.beta2);
        read(*it, "epsilon", c.train.epsilon);
        read(*it, "max_rejected_fraction", c.train.max_rejected_fraction);
    }
    if (const auto it = j.find("policy"); it != j.end()) {
        reject_unknown(*it, {"kind", "candidates", "epsilon"}, "policy");
        if (const auto k = it->find("kind"); k != it->end()) {
            c.policy.kind = policy_kind_from_string(k->get<std::string>());
        }
        read(*it, "candidates", c.policy.candidates);
        read(*it, "epsilon", c.policy.epsilon);
    }
    if (const auto it = j.find("skills"); it != j.end()) {
        reject_unknown(*it, {"count", "mode"}, "skills");
        read(*it, "count", c.skills.count);
        if (const auto m = it->find("mode"); m != it->end()) {
            c.skills.mode = skill_mode_from_string(m->get<std::string>());
        }
    }
    if (const auto it = j.find("data"); it != j.end()) {
        reject_unknown(*it, {"buffer_episodes", "episodes_per_collect", "collect_interval", "skill_hold"}, "data");
        read(*it, "buffer_episodes", c.data.buffer_episodes);
        read(*it, "episodes_per_collect", c.data.episodes_per_collect);
        read(*it, "collect_interval", c.data.collect_interval);
        read(*it, "skill_hold", c.data.skill_hold);
    }
    if (const auto it = j.find("eval"); it != j.end()) {
        reject_unknown(*it,
                       {"interval", "probe_states", "coverage_grid", "coverage_rollouts", "oracle_skills",
                        "oracle_tasks", "diversity_skills", "diversity_episodes", "heldout_episodes"},
                       "eval");
        read(*it, "interval", c.eval.interval);
        read(*it, "probe_states", c.eval.probe_states);
        read(*it, "coverage_grid", c.eval.coverage_grid);
        read(*it, "coverage_rollouts", c.eval.coverage_rollouts);
        read(*it, "oracle_skills", c.eval.oracle_skills);
        read(*it, "oracle_tasks", c.eval.oracle_tasks);
        read(*it, "diversity_skills", c.eval.diversity_skills);
        read(*it, "diversity_episodes", c.eval.diversity_episodes);
        read(*it, "heldout_episodes", c.eval.heldout_episodes);
    }
    read(j, "gamma", c.gamma);
    read(j, "seed", c.seed);
    return c;
}

RunConfig load_run_config(const fs::path& path)
{
    try {
        return run_config_from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw ConfigurationError("config " + path.string() + ": " + e.what());
    }
}

std::string config_hash(const RunConfig& config) { return sha256_hex(to_json(config).dump()); }

RunSeeds RunSeeds::derive(std::uint64_t master)
{
    return RunSeeds{derive_seed(master, "generator"), derive_seed(master, "encoder-init"),
                    derive_seed(master, "skills"),    derive_seed(master, "collect"),
                    derive_seed(master, "train"),     derive_seed(master, "probe"),
                    derive_seed(master, "split"),     derive_seed(master, "evaluation")};
}

json to_json(const RunSeeds& s)
{
    return json{{"generator", s.generator}, {"encoder_init", s.encoder_init}, {"skills", s.skills},
                {"collect", s.collect},     {"train", s.train},               {"probe", s.probe},
                {"split", s.split},         {"evaluation", s.evaluation}};
}

json to_json(const RunReport& r)
{
    return json{
        {"status", r.status},
        {"failure_reason", r.failure_reason},
        {"steps", r.steps},
        {"r2_state", real(r.r2_state)},
        {"r2_diff", real(r.r2_diff)},
        {"linear_fit", {{"intercept", true}, {"train_fraction", kTrainFraction}, {"direction", "s ~ A phi"}}},
        {"diversity", {{"score", real(r.diversity_score)}, {"chance", real(r.diversity_chance)},
                       {"duplicate_skills", r.diversity_duplicates}}},
        {"coverage",
         {{"grid", r.coverage.grid},
          {"cell_length", r.coverage.cell_length},
          {"occupied", r.coverage.occupied()},
          {"fraction", r.coverage.fraction},
          {"cells", r.coverage.cells}}},
        {"oracle_return", real(r.oracle_return)},
        {"oracle_returns", r.oracle_returns},
        {"geometry",
         {{"mean_abs_cos_pair", real(r.geometry.mean_abs_cos_pair)},
          {"mean_cos_diff_skill", real(r.geometry.mean_cos_diff_skill)},
          {"diff_norm_mean", real(r.geometry.diff_norm_mean)},
          {"diff_norm_sd", real(r.geometry.diff_norm_sd)},
          {"excluded", r.geometry.excluded},
          {"excluded_pairs", r.geometry.excluded_pairs},
          {"count", r.geometry.count}}},
        {"critic",
         {{"heldout_accuracy", real(r.heldout_accuracy)},
          {"chance_accuracy", r.chance_accuracy},
          {"mean_reward", real(r.mean_reward)},
          {"reward_transitions", r.reward_transitions}}},
        {"skills",
         {{"is_affine_generator", r.affine.is_generator},
          {"rank", r.affine.rank},
          {"smallest_nonzero_singular", r.affine.smallest_nonzero_singular},
          {"conditioning", r.conditioning}}},
        {"rejected_steps", r.rejected_steps},
        {"config", r.config},
        {"seeds", to_json(r.seeds)},
        {"config_hash", r.config_hash},
        {"checkpoint_hash", r.checkpoint_hash},
    };
}

RunReport run_report_from_json(const json& j)
{
    RunReport r;
    r.status = j.at("status").get<std::string>();
    r.failure_reason = j.at("failure_reason").get<std::string>();
    r.steps = j.at("steps").get<std::size_t>();
    r.r2_state = real_of(j, "r2_state");
    r.r2_diff = real_of(j, "r2_diff");
    const json& div = j.at("diversity");
    r.diversity_score = real_of(div, "score");
    r.diversity_chance = real_of(div, "chance");
    r.diversity_duplicates = div.at("duplicate_skills").get<bool>();
    const json& cov = j.at("coverage");
    r.coverage.grid = cov.at("grid").get<std::size_t>();
    r.coverage.cell_length = cov.at("cell_length").get<double>();
    r.coverage.fraction = cov.at("fraction").get<double>();
    r.coverage.cells = cov.at("cells").get<std::vector<std::uint64_t>>();
    r.oracle_return = real_of(j, "oracle_return");
    for (const auto& v : j.at("oracle_returns")) {
        r.oracle_returns.push_back(v.is_null() ? std::nan("") : v.get<double>());
    }
    const json& geo = j.at("geometry");
    r.geometry.mean_abs_cos_pair = real_of(geo, "mean_abs_cos_pair");
    r.geometry.mean_cos_diff_skill = real_of(geo, "mean_cos_diff_skill");
    r.geometry.diff_norm_mean = real_of(geo, "diff_norm_mean");
    r.geometry.diff_norm_sd = real_of(geo, "diff_norm_sd");
    r.geometry.excluded = geo.at("excluded").get<std::size_t>();
    r.geometry.excluded_pairs = geo.at("excluded_pairs").get<std::size_t>();
    r.geometry.count = geo.at("count").get<std::size_t>();
    const json& critic = j.at("critic");
    r.heldout_accuracy = real_of(critic, "heldout_accuracy");
    r.chance_accuracy = real_of(critic, "chance_accuracy");
    r.mean_reward = real_of(critic, "mean_reward");
    r.reward_transitions = critic.at("reward_transitions").get<std::size_t>();
    const json& sk = j.at("skills");
    r.affine.is_generator = sk.at("is_affine_generator").get<bool>();
    r.affine.rank = sk.at("rank").get<std::size_t>();
    r.affine.smallest_nonzero_singular = real_of(sk, "smallest_nonzero_singular");
    r.conditioning = real_of(sk, "conditioning");
    r.rejected_steps = j.at("rejected_steps").get<std::uint64_t>();
    r.config = j.at("config");
    const json& seeds = j.at("seeds");
    r.seeds = RunSeeds{seeds.at("generator"), seeds.at("encoder_init"), seeds.at("skills"),
                       seeds.at("collect"),   seeds.at("train"),        seeds.at("probe"),
                       seeds.at("split"),     seeds.at("evaluation")};
    r.config_hash = j.at("config_hash").get<std::string>();
    r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    return r;
}

RunReport run_csf(const RunConfig& config, const RunOptions& options)
{
    const auto started = std::chrono::steady_clock::now();
    World w = build_world(config);
    const RunConfig& cfg = w.cfg;
    const std::string hash = config_hash(cfg);
    const std::string tag = "[" + short_hash(hash) + "] ";
    fs::create_directories(options.out_dir);
    if (!cfg.env.boundary_margin_ok()) {
        log_line(options, tag + "warning: B <= horizon / 10, boundary contact will be frequent");
    }

    Rng init_rng(w.seeds.encoder_init);
    Eigen::VectorXd params = w.encoder.init_params(init_rng);
    RolloutSource source(cfg, w.generator, w.encoder, w.skills, w.seeds.collect, options.workers);

    std::vector<std::pair<std::size_t, CoverageReport>> coverage_rows;
    const EvalHook hook = [&](const Eigen::VectorXd& p, std::size_t step) {
        coverage_rows.emplace_back(step, coverage_rollouts(w, p, options.workers));
        const IdentifiabilityResult probe = identifiability_probe(w.encoder, p, w.generator, w.probe, w.seeds.split);
        std::ostringstream line;
        line << tag << "step " << step << " r2_state " << probe.r2_state() << " r2_diff " << probe.r2_diff();
        log_line(options, line.str());
        return ProbeScores{probe.r2_state(), probe.r2_diff()};
    };
    Rng train_rng(w.seeds.train);
    TrainResult result = train_encoder(w.encoder, params, source, cfg.train, train_rng, hook);

    RunReport report;
    report.steps = cfg.train.steps;
    report.config = to_json(cfg);
    report.seeds = w.seeds;
    report.config_hash = hash;
    report.rejected_steps = result.rejected_steps;
    const HistoryRow& last = result.history.back();
    report.r2_state = last.r2_state;
    report.r2_diff = last.r2_diff;
    fill_skill_diagnostics(w, report);

    const bool finite = all_finite(result.params) && (cfg.train.steps == 0 || std::isfinite(last.loss));
    if (result.failed) {
        report.status = "failed";
        report.failure_reason = result.failure_reason;
    } else if (!finite) {
        report.status = "failed";
        report.failure_reason = "divergence";
    }
    if (all_finite(result.params)) {
        evaluate_final(w, result.params, options.workers, report);
    }

    {
        std::ofstream metrics(options.out_dir / "metrics.csv");
        write_history_csv(metrics, result.history);
    }
    {
        std::ofstream coverage(options.out_dir / "coverage.csv");
        coverage << "step,occupied_cells,grid_fraction\n";
        coverage.precision(17);
        const double cells = static_cast<double>(cfg.eval.coverage_grid * cfg.eval.coverage_grid);
        for (const auto& [step, c] : coverage_rows) {
            coverage << step << ',' << c.occupied() << ',' << static_cast<double>(c.occupied()) / cells << '\n';
        }
    }
    save_checkpoint(options.out_dir / "checkpoint",
                    Checkpoint{cfg.encoder, result.params, w.seeds.encoder_init, cfg.train.steps});
    report.checkpoint_hash = git_blob_sha1(options.out_dir / "checkpoint.bin");
    write_file(options.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
    write_file(options.out_dir / "report.json", to_json(report).dump(2) + "\n");

    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_file(options.out_dir / "timing.json", json{{"wall_seconds", report.wall_seconds}}.dump(2) + "\n");
    std::ostringstream line;
    line << tag << "done: " << report.status << " r2_state " << report.r2_state << " r2_diff " << report.r2_diff
         << " (" << report.wall_seconds << " s)";
    log_line(options, line.str());
    return report;
}

fs::path cell_directory(const RunConfig& config, const fs::path& root)
{
    return root / "runs" / short_hash(config_hash(config));
}

RunReport run_cell(const RunConfig& config, const RunOptions& options)
{
    const fs::path dir = cell_directory(config, options.out_dir);
    if (options.reuse && fs::exists(dir / "report.json") && fs::exists(dir / "timing.json")) {
        RunReport cached = run_report_from_json(json::parse(read_file(dir / "report.json")));
        if (cached.config_hash == config_hash(config)) {
            cached.wall_seconds = json::parse(read_file(dir / "timing.json")).at("wall_seconds").get<double>();
            log_line(options, "[" + short_hash(cached.config_hash) + "] reusing " + dir.string());
            return cached;
        }
    }
    RunOptions cell = options;
    cell.out_dir = dir;
    return run_csf(config, cell);
}

RunReport evaluate_run(const fs::path& run_dir, const RunOptions& options)
{
    World w = build_world(load_run_config(run_dir / "config.json"));
    const Checkpoint checkpoint = load_checkpoint(run_dir / "checkpoint");
    if (!(checkpoint.spec == w.cfg.encoder)) {
        throw ConfigurationError("checkpoint encoder does not match config.json");
    }
    RunReport report;
    report.steps = checkpoint.step;
    report.config = to_json(w.cfg);
    report.seeds = w.seeds;
    report.config_hash = config_hash(w.cfg);
    report.checkpoint_hash = git_blob_sha1(run_dir / "checkpoint.bin");
    if (fs::exists(run_dir / "report.json")) {
        const json recorded = json::parse(read_file(run_dir / "report.json"));
        if (recorded.at("checkpoint_hash").get<std::string>() != report.checkpoint_hash) {
            report.status = "failed";
            report.failure_reason = "checkpoint-mismatch";
        }
        report.rejected_steps = recorded.at("rejected_steps").get<std::uint64_t>();
    }
    const IdentifiabilityResult probe =
        identifiability_probe(w.encoder, checkpoint.params, w.generator, w.probe, w.seeds.split);
    report.r2_state = probe.r2_state();
    report.r2_diff = probe.r2_diff();
    fill_skill_diagnostics(w, report);
    evaluate_final(w, checkpoint.params, options.workers, report);
    write_file(run_dir / "eval.json", to_json(report).dump(2) + "\n");
    return report;
}

std::string sha256_hex(std::string_view data) { return digest_hex(EVP_sha256(), data); }

std::string git_blob_sha1(const fs::path& file)
{
    const std::string content = read_file(file);
    std::string blob = "blob " + std::to_string(content.size());
    blob.push_back('\0');
    blob += content;
    return digest_hex(EVP_sha1(), blob);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn)
{
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    const std::size_t count = std::min(workers, n);
    threads.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        threads.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                    next = n;
                }
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

} // namespace csf
