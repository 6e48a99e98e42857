#include "csf/csf_core.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <stdexcept>

namespace csf {

namespace {

struct TermResult {
    double loss_sum = 0.0;
    double pos_sum = 0.0;
    double log_partition_sum = 0.0;
    double accuracy_sum = 0.0;
    Eigen::MatrixXd grad; ///< d(sum loss)/d features, k x n
};

/// Loss terms for features `f` (k x n) against per-column positives and
/// shared negatives.
TermResult evaluate_term(const Eigen::MatrixXd& f, const Batch& batch, double xi, bool with_gradient)
{
    const Eigen::Index n = f.cols();
    const Eigen::Index k_neg = batch.negatives.cols();
    const double log_count = std::log(static_cast<double>(k_neg + 1));

    Eigen::MatrixXd logits(k_neg + 1, n);
    logits.row(0) = f.cwiseProduct(batch.positives).colwise().sum();
    logits.bottomRows(k_neg).noalias() = batch.negatives.transpose() * f;

    TermResult r;
    Eigen::MatrixXd prob(k_neg + 1, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto col = logits.col(j);
        const double top = col.maxCoeff();
        auto p = prob.col(j);
        p = (col.array() - top).exp().matrix();
        const double total = p.sum();
        p /= total;
        const double lme = top + std::log(total) - log_count;
        r.loss_sum += -xi * col[0] + lme;
        r.pos_sum += col[0];
        r.log_partition_sum += lme;
        if (col[0] == top) {
            const auto ties = (col.array() == top).count();
            r.accuracy_sum += 1.0 / static_cast<double>(ties);
        }
    }
    if (with_gradient) {
        Eigen::RowVectorXd w0 = prob.row(0).array() - xi;
        r.grad = batch.positives.array().rowwise() * w0.array();
        r.grad.noalias() += batch.negatives * prob.bottomRows(k_neg);
    }
    return r;
}

void check_batch(const Mlp& encoder, const Batch& batch)
{
    const auto D = static_cast<Eigen::Index>(encoder.spec().input_dim);
    const auto k = static_cast<Eigen::Index>(encoder.spec().output_dim);
    if (batch.from.rows() != D || batch.to.rows() != D || batch.from.cols() != batch.to.cols()) {
        throw DimensionError("batch: observation shape mismatch");
    }
    if (batch.positives.rows() != k || batch.positives.cols() != batch.from.cols()) {
        throw DimensionError("batch: positive skill shape mismatch");
    }
    if (batch.negatives.rows() != k || batch.negatives.cols() < 1) {
        throw DimensionError("batch: need at least one negative of the encoder output dimension");
    }
    if (batch.from.cols() < 1) {
        throw std::invalid_argument("batch: empty");
    }
}

} // namespace

std::string_view to_string(ObjectiveKind kind)
{
    switch (kind) {
    case ObjectiveKind::FutureDiff:
        return "future-diff";
    case ObjectiveKind::Marginal:
        return "marginal";
    case ObjectiveKind::AnchorDiff:
        return "anchor-diff";
    }
    return "unknown";
}

ObjectiveKind objective_from_string(std::string_view name)
{
    if (name == "future-diff") {
        return ObjectiveKind::FutureDiff;
    }
    if (name == "marginal") {
        return ObjectiveKind::Marginal;
    }
    if (name == "anchor-diff") {
        return ObjectiveKind::AnchorDiff;
    }
    throw std::invalid_argument("unknown objective: " + std::string(name));
}

void TrainConfig::validate() const
{
    if (!(xi > 0.0)) {
        throw std::invalid_argument("train: xi must be positive");
    }
    if (negatives < 1) {
        throw std::invalid_argument("train: need at least one negative");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("train: batch size must be >= 1");
    }
    if (eval_interval < 1) {
        throw std::invalid_argument("train: eval interval must be >= 1");
    }
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("train: learning rate must be positive");
    }
}

Eigen::MatrixXd critic_logits(ObjectiveKind objective, const Mlp& encoder, const Eigen::VectorXd& params,
                              const Observation& from, const Observation& to,
                              const std::vector<UnitVector>& candidates)
{
    if (candidates.empty()) {
        throw std::invalid_argument("critic: no candidate skills");
    }
    Eigen::MatrixXd pair(from.size(), 2);
    if (from.size() != to.size()) {
        throw DimensionError("critic: observation dimension mismatch");
    }
    pair.col(0) = from;
    pair.col(1) = to;
    const Eigen::MatrixXd phi = encoder.forward(params, pair);
    const Eigen::MatrixXd z = skill_matrix(candidates);
    if (z.rows() != phi.rows()) {
        throw DimensionError("critic: skill dimension differs from encoder output");
    }
    if (objective == ObjectiveKind::Marginal) {
        return z.transpose() * phi;
    }
    return z.transpose() * (phi.col(1) - phi.col(0));
}

LossReport contrastive_loss(const Eigen::VectorXd& logits, double xi)
{
    Eigen::VectorXd unused;
    return contrastive_loss(logits, xi, unused);
}

LossReport contrastive_loss(const Eigen::VectorXd& logits, double xi, Eigen::VectorXd& grad)
{
    if (logits.size() < 2) {
        throw std::invalid_argument("contrastive loss needs a positive and at least one negative");
    }
    const double top = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - top).exp().matrix();
    const double total = p.sum();
    p /= total;
    LossReport report;
    report.log_partition = top + std::log(total) - std::log(static_cast<double>(logits.size()));
    report.loss = -xi * logits[0] + report.log_partition;
    report.pos_logit_mean = logits[0];
    if (logits[0] == top) {
        report.accuracy = 1.0 / static_cast<double>((logits.array() == top).count());
    }
    grad = p;
    grad[0] -= xi;
    return report;
}

double reward_of_transition(const Mlp& encoder, const Eigen::VectorXd& params, const Observation& o,
                            const Observation& o_next, const UnitVector& z)
{
    const Eigen::MatrixXd logits = critic_logits(ObjectiveKind::FutureDiff, encoder, params, o, o_next, {z});
    return logits(0, 0);
}

BatchLoss batch_loss(ObjectiveKind objective, const Mlp& encoder, const Eigen::VectorXd& params, const Batch& batch,
                     double xi, bool with_gradient)
{
    check_batch(encoder, batch);
    const Eigen::Index n = batch.from.cols();
    Eigen::MatrixXd x(batch.from.rows(), 2 * n);
    x.leftCols(n) = batch.from;
    x.rightCols(n) = batch.to;
    Tape tape;
    const Eigen::MatrixXd phi = encoder.forward(params, x, with_gradient ? &tape : nullptr);

    std::vector<TermResult> terms;
    if (objective == ObjectiveKind::Marginal) {
        terms.push_back(evaluate_term(phi.leftCols(n), batch, xi, with_gradient));
        terms.push_back(evaluate_term(phi.rightCols(n), batch, xi, with_gradient));
    } else {
        terms.push_back(evaluate_term(phi.rightCols(n) - phi.leftCols(n), batch, xi, with_gradient));
    }

    BatchLoss out;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_terms = 1.0 / static_cast<double>(terms.size());
    for (const auto& t : terms) {
        out.report.loss += t.loss_sum * inv_n;
        out.report.pos_logit_mean += t.pos_sum * inv_n * inv_terms;
        out.report.log_partition += t.log_partition_sum * inv_n * inv_terms;
        out.report.accuracy += t.accuracy_sum * inv_n * inv_terms;
    }
    if (with_gradient) {
        Eigen::MatrixXd upstream(phi.rows(), 2 * n);
        if (objective == ObjectiveKind::Marginal) {
            upstream.leftCols(n) = terms[0].grad * inv_n;
            upstream.rightCols(n) = terms[1].grad * inv_n;
        } else {
            upstream.leftCols(n) = -terms[0].grad * inv_n;
            upstream.rightCols(n) = terms[0].grad * inv_n;
        }
        out.grad = encoder.backward(params, tape, upstream).params;
    }
    return out;
}

Eigen::MatrixXd draw_negatives(const SkillSet& skills, std::size_t count, Rng& rng)
{
    const auto k = static_cast<Eigen::Index>(skills.dim());
    Eigen::MatrixXd out(k, static_cast<Eigen::Index>(count));
    if (skills.mode == SkillMode::ResampleEachBatch) {
        for (std::size_t j = 0; j < count; ++j) {
            out.col(static_cast<Eigen::Index>(j)) = sample_uniform_sphere(skills.dim(), rng).coords();
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, skills.size() - 1);
        for (std::size_t j = 0; j < count; ++j) {
            out.col(static_cast<Eigen::Index>(j)) = skills.skills[pick(rng)].coords();
        }
    }
    return out;
}

DatasetSource::DatasetSource(std::vector<TransitionRecord> records, SkillSet negatives_from, std::size_t batch_size,
                             std::size_t negatives)
    : records_(std::move(records)), skills_(std::move(negatives_from)), batch_size_(batch_size),
      negatives_(negatives)
{
    for (std::size_t i = 0; i < records_.size(); ++i) {
        if (!records_[i].boundary) {
            usable_.push_back(i);
        }
    }
    if (usable_.empty()) {
        throw std::invalid_argument("dataset has no interior transitions");
    }
}

Batch DatasetSource::next_batch(std::size_t /*step*/, const Eigen::VectorXd& /*params*/, Rng& rng)
{
    const auto& first = records_[usable_.front()];
    const auto D = first.o.size();
    const auto k = static_cast<Eigen::Index>(first.z.dim());
    const auto n = static_cast<Eigen::Index>(batch_size_);
    Batch batch{Eigen::MatrixXd(D, n), Eigen::MatrixXd(D, n), Eigen::MatrixXd(k, n), Eigen::MatrixXd()};
    std::uniform_int_distribution<std::size_t> pick(0, usable_.size() - 1);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& r = records_[usable_[pick(rng)]];
        batch.from.col(j) = r.o;
        batch.to.col(j) = r.o_next;
        batch.positives.col(j) = r.z.coords();
    }
    batch.negatives = draw_negatives(skills_, negatives_, rng);
    return batch;
}

TrainResult train_encoder(const Mlp& encoder, Eigen::VectorXd initial_params, BatchSource& source,
                          const TrainConfig& config, Rng& rng, const EvalHook& eval)
{
    config.validate();
    TrainResult result;
    result.params = std::move(initial_params);
    OptimState optim(encoder.param_count(), config.learning_rate);
    optim.beta1 = config.beta1;
    optim.beta2 = config.beta2;
    optim.epsilon = config.epsilon;

    const auto make_row = [&](std::size_t step, const LossReport& mean) {
        HistoryRow row{step, mean.loss, mean.pos_logit_mean, mean.log_partition, mean.accuracy, 0.0, 0.0};
        if (eval) {
            const ProbeScores scores = eval(result.params, step);
            row.r2_state = scores.r2_state;
            row.r2_diff = scores.r2_diff;
        } else {
            row.r2_state = std::nan("");
            row.r2_diff = std::nan("");
        }
        result.history.push_back(row);
    };

    if (config.steps == 0) {
        const Batch batch = source.next_batch(0, result.params, rng);
        make_row(0, batch_loss(config.objective, encoder, result.params, batch, config.xi, false).report);
        return result;
    }

    LossReport window;
    std::size_t window_count = 0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const Batch batch = source.next_batch(step, result.params, rng);
        BatchLoss bl = batch_loss(config.objective, encoder, result.params, batch, config.xi, true);
        if (step == 0) {
            make_row(0, bl.report);
        }
        if (std::isfinite(bl.report.loss)) {
            window.loss += bl.report.loss;
            window.pos_logit_mean += bl.report.pos_logit_mean;
            window.log_partition += bl.report.log_partition;
            window.accuracy += bl.report.accuracy;
            ++window_count;
        } else {
            bl.grad.setConstant(std::nan(""));
        }
        optimizer_step(optim, result.params, bl.grad);

        const std::size_t done = step + 1;
        if (done % config.eval_interval == 0 || done == config.steps) {
            LossReport mean;
            if (window_count > 0) {
                const double inv = 1.0 / static_cast<double>(window_count);
                mean = {window.loss * inv, window.pos_logit_mean * inv, window.log_partition * inv,
                        window.accuracy * inv};
            } else {
                mean = {std::nan(""), std::nan(""), std::nan(""), std::nan("")};
            }
            make_row(done, mean);
            window = {};
            window_count = 0;
        }
    }
    result.rejected_steps = optim.rejected_steps;
    if (static_cast<double>(result.rejected_steps) > config.max_rejected_fraction * static_cast<double>(config.steps)) {
        result.failed = true;
        result.failure_reason = "budget";
    }
    return result;
}

void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history)
{
    out << "step,loss,pos_logit_mean,log_partition,accuracy,r2_state,r2_diff\n";
    const auto precision = out.precision(17);
    for (const auto& r : history) {
        out << r.step << ',' << r.loss << ',' << r.pos_logit_mean << ',' << r.log_partition << ',' << r.accuracy
            << ',' << r.r2_state << ',' << r.r2_diff << '\n';
    }
    out.precision(precision);
}

} // namespace csf
