#pragma once

// The contrastive skill-discrimination objective: inner-product critic over
// encoded observation pairs, the InfoNCE-style loss with positive weight xi,
// and the encoder training loop.

#include "csf/dgp.hpp"
#include "csf/geometry.hpp"
#include "csf/neural.hpp"
#include "csf/rng.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace csf {

/// future-diff: <phi(o') - phi(o), z>
/// marginal:    <phi(o), z> and <phi(o'), z> as two separate terms
/// anchor-diff: <phi(o_t) - phi(o_0), z>
enum class ObjectiveKind { FutureDiff, Marginal, AnchorDiff };

std::string_view to_string(ObjectiveKind kind);
ObjectiveKind objective_from_string(std::string_view name);

/// Encoded pairs for one optimization step. Column j of `from`/`to` is one
/// observation pair, `positives.col(j)` its skill; the K negatives in
/// `negatives` are shared by every pair.
struct Batch {
    Eigen::MatrixXd from;
    Eigen::MatrixXd to;
    Eigen::MatrixXd positives;
    Eigen::MatrixXd negatives;

    std::size_t size() const { return static_cast<std::size_t>(from.cols()); }
};

struct LossReport {
    double loss = 0.0;
    double pos_logit_mean = 0.0;
    double log_partition = 0.0;
    double accuracy = 0.0;
};

struct TrainConfig {
    ObjectiveKind objective = ObjectiveKind::FutureDiff;
    double xi = 1.0;
    std::size_t negatives = 255;
    std::size_t batch_size = 256;
    std::size_t steps = 20000;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    MlpSpec encoder;
    SkillMode skill_mode = SkillMode::ResampleEachBatch;
    std::uint64_t seed = 0;
    std::size_t eval_interval = 500;
    double max_rejected_fraction = 0.01;

    void validate() const;
};

/// Logits of one pair against [positive, negatives...]; one column per
/// objective term (two for the marginal objective).
Eigen::MatrixXd critic_logits(ObjectiveKind objective, const Mlp& encoder, const Eigen::VectorXd& params,
                              const Observation& from, const Observation& to,
                              const std::vector<UnitVector>& candidates);

/// -xi * logit_0 + log(mean_j exp(logit_j)). Accuracy credits ties at the
/// maximum fractionally, so all-equal logits score 1/(K+1).
LossReport contrastive_loss(const Eigen::VectorXd& logits, double xi);

/// Same loss, also returning d loss / d logits.
LossReport contrastive_loss(const Eigen::VectorXd& logits, double xi, Eigen::VectorXd& grad);

/// r_z = <phi(o') - phi(o), z>.
double reward_of_transition(const Mlp& encoder, const Eigen::VectorXd& params, const Observation& o,
                            const Observation& o_next, const UnitVector& z);

struct BatchLoss {
    LossReport report;
    Eigen::VectorXd grad; ///< d(mean loss)/d params
};

/// Mean loss over a batch and its exact parameter gradient.
BatchLoss batch_loss(ObjectiveKind objective, const Mlp& encoder, const Eigen::VectorXd& params, const Batch& batch,
                     double xi, bool with_gradient = true);

/// K negatives, one per column: fresh uniform draws in resample mode,
/// uniform picks (with replacement) from the set otherwise.
Eigen::MatrixXd draw_negatives(const SkillSet& skills, std::size_t count, Rng& rng);

class BatchSource {
public:
    virtual ~BatchSource() = default;
    /// `params` are the encoder parameters at this step, for sources whose
    /// data collection depends on the current encoder.
    virtual Batch next_batch(std::size_t step, const Eigen::VectorXd& params, Rng& rng) = 0;
};

/// Uniform minibatches from a fixed record list; boundary-flagged records
/// are skipped.
class DatasetSource : public BatchSource {
public:
    DatasetSource(std::vector<TransitionRecord> records, SkillSet negatives_from, std::size_t batch_size,
                  std::size_t negatives);

    Batch next_batch(std::size_t step, const Eigen::VectorXd& params, Rng& rng) override;
    const std::vector<TransitionRecord>& records() const { return records_; }

private:
    std::vector<TransitionRecord> records_;
    std::vector<std::size_t> usable_;
    SkillSet skills_;
    std::size_t batch_size_;
    std::size_t negatives_;
};

struct HistoryRow {
    std::size_t step = 0;
    double loss = 0.0;
    double pos_logit_mean = 0.0;
    double log_partition = 0.0;
    double accuracy = 0.0;
    double r2_state = 0.0;
    double r2_diff = 0.0;
};

struct ProbeScores {
    double r2_state = 0.0;
    double r2_diff = 0.0;
};

using EvalHook = std::function<ProbeScores(const Eigen::VectorXd& params, std::size_t step)>;

struct TrainResult {
    Eigen::VectorXd params;
    std::vector<HistoryRow> history;
    std::uint64_t rejected_steps = 0;
    bool failed = false;
    std::string failure_reason;
};

/// Runs `config.steps` Adam updates on batches from `source`. History rows
/// are written at step 0 and every `eval_interval` steps (and at the final
/// step); each row averages the batch statistics since the previous row.
TrainResult train_encoder(const Mlp& encoder, Eigen::VectorXd initial_params, BatchSource& source,
                          const TrainConfig& config, Rng& rng, const EvalHook& eval = {});

/// Writes the metric history CSV (step, loss, pos_logit_mean, log_partition,
/// accuracy, r2_state, r2_diff).
void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history);

} // namespace csf
