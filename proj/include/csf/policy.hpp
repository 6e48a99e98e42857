#pragma once

// Skill-conditioned behaviour: scripted vMF steps around the skill
// direction, the maximum-entropy (uniform) policy, and a finite-candidate
// greedy maximizer of the one-step reward <phi(o') - phi(o), z>.

#include "csf/dgp.hpp"
#include "csf/geometry.hpp"
#include "csf/neural.hpp"
#include "csf/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace csf {

class ConfigurationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct PolicyKind {
    enum class Kind { ScriptedVmf, Uniform, Greedy };

    Kind kind = Kind::ScriptedVmf;
    double kappa_act = 10.0;
    std::size_t candidates = 16;
    double epsilon = 0.05;

    static PolicyKind scripted(double kappa) { return {Kind::ScriptedVmf, kappa, 16, 0.05}; }
    static PolicyKind uniform() { return {Kind::Uniform, 0.0, 16, 0.05}; }
    static PolicyKind greedy(std::size_t m, double eps) { return {Kind::Greedy, 0.0, m, eps}; }

    void validate() const;
};

std::string_view to_string(PolicyKind::Kind kind);
PolicyKind::Kind policy_kind_from_string(std::string_view name);

/// Everything a policy may consult. The encoder is only needed by greedy.
struct PolicyContext {
    const EnvConfig* env = nullptr;
    const Generator* generator = nullptr;
    const Mlp* encoder = nullptr;
    const Eigen::VectorXd* params = nullptr;
};

/// Direction in state space that a scripted policy steers towards for a
/// skill living in feature space: the skill itself when dimensions agree,
/// otherwise its first min(k, d) coordinates zero-padded and renormalized.
UnitVector skill_action_direction(const UnitVector& z, std::size_t state_dim);

UnitVector act(const PolicyKind& policy, const PolicyContext& context, const LatentState& s, const Observation& o,
               const UnitVector& z, Rng& rng);

struct Trajectory {
    UnitVector skill;
    std::vector<TransitionRecord> records;
    std::uint64_t seed = 0;
};

/// Rolls out `horizon` steps from `start`. Each episode owns its random
/// stream, seeded with `seed`.
Trajectory rollout(const PolicyKind& policy, const PolicyContext& context, const UnitVector& skill,
                   std::size_t horizon, const LatentState& start, std::uint64_t seed, std::size_t episode = 0);

using SkillDraw = std::function<UnitVector(Rng&)>;

/// Rollout whose skill is redrawn from `draw` every `hold` steps, starting at
/// t = 0. The trajectory's skill is the first draw; each record carries the
/// skill active at its step.
Trajectory rollout(const PolicyKind& policy, const PolicyContext& context, const SkillDraw& draw, std::size_t hold,
                   std::size_t horizon, const LatentState& start, std::uint64_t seed, std::size_t episode = 0);

struct DiversityReport {
    double score = 0.0;
    double chance = 0.0;
    std::size_t num_skills = 0;
    std::size_t transitions = 0;
    bool duplicate_skills = false;
};

/// Accuracy of the inner-product critic at naming the generating skill of
/// each interior transition among the skills present, one group of
/// trajectories per skill. Ties at the maximum are credited fractionally,
/// so duplicated skill vectors cap the score.
DiversityReport diversity_score(const std::vector<std::vector<Trajectory>>& groups, const Mlp& encoder,
                                const Eigen::VectorXd& params);

/// Mean <phi(o') - phi(o), z> over interior transitions.
double mean_reward(const std::vector<Trajectory>& trajectories, const Mlp& encoder, const Eigen::VectorXd& params);

/// Writes trajectories in the transition CSV schema with a trajectory column.
void write_trajectories_csv(std::ostream& out, const std::vector<Trajectory>& trajectories);

} // namespace csf
