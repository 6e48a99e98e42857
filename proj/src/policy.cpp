#include "csf/policy.hpp"

#include "csf/csf_core.hpp"

#include <cmath>
#include <ostream>
#include <random>

namespace csf {

namespace {

const Generator& require_generator(const PolicyContext& context)
{
    if (context.generator == nullptr || context.env == nullptr) {
        throw ConfigurationError("policy context needs an environment and a generator");
    }
    return *context.generator;
}

struct EncodedTransitions {
    Eigen::MatrixXd delta;  ///< phi(o') - phi(o), one column per transition
    Eigen::MatrixXd skills; ///< generating skill per column
    std::vector<std::size_t> group;
};

EncodedTransitions encode_interior(const std::vector<std::vector<Trajectory>>& groups, const Mlp& encoder,
                                   const Eigen::VectorXd& params)
{
    std::size_t n = 0;
    for (const auto& g : groups) {
        for (const auto& tr : g) {
            for (const auto& r : tr.records) {
                n += r.boundary ? 0 : 1;
            }
        }
    }
    const auto D = static_cast<Eigen::Index>(encoder.spec().input_dim);
    const auto k = static_cast<Eigen::Index>(encoder.spec().output_dim);
    const auto cols = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd x(D, 2 * cols);
    EncodedTransitions out{Eigen::MatrixXd(), Eigen::MatrixXd(k, cols), {}};
    out.group.reserve(n);
    Eigen::Index j = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        for (const auto& tr : groups[gi]) {
            for (const auto& r : tr.records) {
                if (r.boundary) {
                    continue;
                }
                x.col(j) = r.o;
                x.col(cols + j) = r.o_next;
                out.skills.col(j) = r.z.coords();
                out.group.push_back(gi);
                ++j;
            }
        }
    }
    if (n > 0) {
        const Eigen::MatrixXd phi = encoder.forward(params, x);
        out.delta = phi.rightCols(cols) - phi.leftCols(cols);
    }
    return out;
}

} // namespace

void PolicyKind::validate() const
{
    if (!(kappa_act >= 0.0)) {
        throw ConfigurationError("policy: kappa_act must be >= 0");
    }
    if (kind == Kind::Greedy && candidates < 2) {
        throw ConfigurationError("policy: greedy needs at least two candidates");
    }
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw ConfigurationError("policy: epsilon must lie in [0, 1]");
    }
}

std::string_view to_string(PolicyKind::Kind kind)
{
    switch (kind) {
    case PolicyKind::Kind::ScriptedVmf:
        return "scripted-vmf";
    case PolicyKind::Kind::Uniform:
        return "uniform";
    case PolicyKind::Kind::Greedy:
        return "greedy";
    }
    return "unknown";
}

PolicyKind::Kind policy_kind_from_string(std::string_view name)
{
    if (name == "scripted-vmf") {
        return PolicyKind::Kind::ScriptedVmf;
    }
    if (name == "uniform") {
        return PolicyKind::Kind::Uniform;
    }
    if (name == "greedy") {
        return PolicyKind::Kind::Greedy;
    }
    throw ConfigurationError("unknown policy: " + std::string(name));
}

UnitVector skill_action_direction(const UnitVector& z, std::size_t state_dim)
{
    if (z.dim() == state_dim) {
        return z;
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(state_dim));
    const auto shared = static_cast<Eigen::Index>(std::min(z.dim(), state_dim));
    v.head(shared) = z.coords().head(shared);
    if (v.norm() < 1e-12) {
        return UnitVector::basis(state_dim, 0);
    }
    return UnitVector::normalized(v);
}

UnitVector act(const PolicyKind& policy, const PolicyContext& context, const LatentState& s, const Observation& o,
               const UnitVector& z, Rng& rng)
{
    const Generator& g = require_generator(context);
    const std::size_t d = context.env->d;
    if (static_cast<std::size_t>(s.size()) != d) {
        throw DimensionError("act: state dimension mismatch");
    }
    switch (policy.kind) {
    case PolicyKind::Kind::ScriptedVmf:
        return sample_vmf(VmfParams(skill_action_direction(z, d), policy.kappa_act), rng);
    case PolicyKind::Kind::Uniform:
        return sample_uniform_sphere(d, rng);
    case PolicyKind::Kind::Greedy:
        break;
    }

    if (context.encoder == nullptr || context.params == nullptr) {
        throw ConfigurationError("greedy policy requires an encoder");
    }
    if (z.dim() != context.encoder->spec().output_dim) {
        throw DimensionError("act: skill dimension differs from encoder output");
    }
    std::bernoulli_distribution explore(policy.epsilon);
    if (explore(rng)) {
        return sample_uniform_sphere(d, rng);
    }
    const auto m = static_cast<Eigen::Index>(policy.candidates);
    std::vector<UnitVector> candidates;
    candidates.reserve(policy.candidates);
    Eigen::MatrixXd next_states(static_cast<Eigen::Index>(d), m);
    for (Eigen::Index i = 0; i < m; ++i) {
        candidates.push_back(sample_uniform_sphere(d, rng));
        next_states.col(i) = env_step(*context.env, s, candidates.back()).s_next;
    }
    Eigen::MatrixXd obs(o.size(), m + 1);
    obs.col(0) = o;
    obs.rightCols(m) = g.apply(next_states);
    const Eigen::MatrixXd phi = context.encoder->forward(*context.params, obs);
    const Eigen::RowVectorXd rewards = z.coords().transpose() * (phi.rightCols(m).colwise() - phi.col(0));
    Eigen::Index best = 0;
    rewards.maxCoeff(&best);
    return candidates[static_cast<std::size_t>(best)];
}

Trajectory rollout(const PolicyKind& policy, const PolicyContext& context, const UnitVector& skill,
                   std::size_t horizon, const LatentState& start, std::uint64_t seed, std::size_t episode)
{
    if (horizon < 1) {
        throw std::invalid_argument("rollout: horizon must be >= 1");
    }
    const Generator& g = require_generator(context);
    Rng rng(seed);
    Trajectory tr{skill, {}, seed};
    tr.records.reserve(horizon);
    LatentState s = start;
    Observation o = g(s);
    for (std::size_t t = 0; t < horizon; ++t) {
        UnitVector a = act(policy, context, s, o, skill, rng);
        StepResult step = env_step(*context.env, s, a);
        Observation o_next = g(step.s_next);
        tr.records.push_back({episode, t, s, o, skill, std::move(a), step.s_next, o_next, step.boundary});
        s = std::move(step.s_next);
        o = std::move(o_next);
    }
    return tr;
}

Trajectory rollout(const PolicyKind& policy, const PolicyContext& context, const SkillDraw& draw, std::size_t hold,
                   std::size_t horizon, const LatentState& start, std::uint64_t seed, std::size_t episode)
{
    if (horizon < 1 || hold < 1) {
        throw std::invalid_argument("rollout: horizon and hold must be >= 1");
    }
    const Generator& g = require_generator(context);
    Rng rng(seed);
    UnitVector skill = draw(rng);
    Trajectory tr{skill, {}, seed};
    tr.records.reserve(horizon);
    LatentState s = start;
    Observation o = g(s);
    for (std::size_t t = 0; t < horizon; ++t) {
        if (t > 0 && t % hold == 0) {
            skill = draw(rng);
        }
        UnitVector a = act(policy, context, s, o, skill, rng);
        StepResult step = env_step(*context.env, s, a);
        Observation o_next = g(step.s_next);
        tr.records.push_back({episode, t, s, o, skill, std::move(a), step.s_next, o_next, step.boundary});
        s = std::move(step.s_next);
        o = std::move(o_next);
    }
    return tr;
}

DiversityReport diversity_score(const std::vector<std::vector<Trajectory>>& groups, const Mlp& encoder,
                                const Eigen::VectorXd& params)
{
    std::vector<UnitVector> classes;
    for (const auto& g : groups) {
        if (g.empty()) {
            throw std::invalid_argument("diversity: empty skill group");
        }
        classes.push_back(g.front().skill);
    }
    if (classes.size() < 2) {
        throw std::invalid_argument("diversity: need at least two skills");
    }
    DiversityReport report;
    report.num_skills = classes.size();
    report.chance = 1.0 / static_cast<double>(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) {
        for (std::size_t j = i + 1; j < classes.size(); ++j) {
            if ((classes[i].coords() - classes[j].coords()).norm() < 1e-9) {
                report.duplicate_skills = true;
            }
        }
    }

    const EncodedTransitions enc = encode_interior(groups, encoder, params);
    report.transitions = enc.group.size();
    if (report.transitions == 0) {
        return report;
    }
    const Eigen::MatrixXd logits = skill_matrix(classes).transpose() * enc.delta;
    double hits = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const auto col = logits.col(j);
        const double top = col.maxCoeff();
        const auto truth = static_cast<Eigen::Index>(enc.group[static_cast<std::size_t>(j)]);
        if (col[truth] == top) {
            hits += 1.0 / static_cast<double>((col.array() == top).count());
        }
    }
    report.score = hits / static_cast<double>(report.transitions);
    return report;
}

double mean_reward(const std::vector<Trajectory>& trajectories, const Mlp& encoder, const Eigen::VectorXd& params)
{
    const EncodedTransitions enc = encode_interior({trajectories}, encoder, params);
    if (enc.group.empty()) {
        return 0.0;
    }
    return enc.delta.cwiseProduct(enc.skills).sum() / static_cast<double>(enc.group.size());
}

void write_trajectories_csv(std::ostream& out, const std::vector<Trajectory>& trajectories)
{
    std::vector<TransitionRecord> records;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        for (const auto& r : trajectories[i].records) {
            records.push_back(r);
            ids.push_back(i);
        }
    }
    write_transitions_csv(out, records, &ids);
}

} // namespace csf
