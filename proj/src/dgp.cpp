#include "csf/dgp.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <string>

namespace csf {

namespace {

double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
double leaky_inverse(double y, double slope) { return y > 0.0 ? y : y / slope; }

void validate(const GeneratorSpec& spec)
{
    if (spec.d == 0) {
        throw DimensionError("generator: d must be >= 1");
    }
    if (spec.D < spec.d) {
        throw DimensionError("generator: D must be >= d");
    }
    if (spec.identity) {
        if (!spec.hidden_layers.empty() || spec.D != spec.d) {
            throw std::invalid_argument("identity generator requires no hidden layers and D == d");
        }
        return;
    }
    if (!(spec.activation_slope > 0.0 && spec.activation_slope < 1.0)) {
        throw std::invalid_argument("generator: activation slope must lie in (0, 1)");
    }
    if (!(spec.input_scale > 0.0) || !std::isfinite(spec.input_scale)) {
        throw std::invalid_argument("generator: input scale must be positive");
    }
    std::size_t previous = spec.d;
    for (std::size_t width : spec.hidden_layers) {
        if (width < previous) {
            throw std::invalid_argument("generator: hidden widths must be non-decreasing and >= d");
        }
        previous = width;
    }
    if (spec.D < previous) {
        throw std::invalid_argument("generator: D must be >= the last hidden width");
    }
}

GeneratorLayer draw_layer(std::size_t rows, std::size_t cols, bool activated, Rng& rng, double& min_sv,
                          double& max_sv)
{
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    std::normal_distribution<double> weight_dist(0.0, scale);
    std::normal_distribution<double> bias_dist(0.0, 0.5);
    const auto r = static_cast<Eigen::Index>(rows);
    const auto c = static_cast<Eigen::Index>(cols);
    for (int attempt = 0; attempt < kGeneratorMaxAttempts; ++attempt) {
        GeneratorLayer layer{Eigen::MatrixXd(r, c), Eigen::VectorXd(r), activated};
        for (Eigen::Index j = 0; j < c; ++j) {
            for (Eigen::Index i = 0; i < r; ++i) {
                layer.weight(i, j) = weight_dist(rng);
            }
        }
        for (Eigen::Index i = 0; i < r; ++i) {
            layer.bias[i] = bias_dist(rng);
        }
        const Eigen::JacobiSVD<Eigen::MatrixXd> svd(layer.weight);
        const Eigen::VectorXd& sv = svd.singularValues();
        max_sv = sv[0];
        min_sv = sv[sv.size() - 1];
        if (min_sv >= kGeneratorConditionRatio * max_sv && min_sv >= kGeneratorMinSingular) {
            return layer;
        }
    }
    throw DegenerateSpecError("generator: could not draw a well-conditioned layer in "
                              + std::to_string(kGeneratorMaxAttempts) + " attempts");
}

} // namespace

Generator make_generator(const GeneratorSpec& spec)
{
    validate(spec);
    Generator g;
    g.spec_ = spec;
    if (spec.identity) {
        const auto d = static_cast<Eigen::Index>(spec.d);
        g.layers_.push_back({Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d), false});
        g.lipschitz_bound_ = 1.0;
        g.min_singular_.push_back(1.0);
    } else {
        Rng rng(spec.seed);
        double bound = spec.input_scale;
        std::size_t in = spec.d;
        for (std::size_t width : spec.hidden_layers) {
            double lo = 0.0;
            double hi = 0.0;
            g.layers_.push_back(draw_layer(width, in, true, rng, lo, hi));
            g.min_singular_.push_back(lo);
            bound *= hi;
            in = width;
        }
        double lo = 0.0;
        double hi = 0.0;
        g.layers_.push_back(draw_layer(spec.D, in, false, rng, lo, hi));
        g.min_singular_.push_back(lo);
        bound *= hi;
        g.lipschitz_bound_ = bound;
    }
    for (const auto& layer : g.layers_) {
        g.solvers_.emplace_back(layer.weight);
    }
    return g;
}

Observation Generator::operator()(const LatentState& s) const
{
    if (static_cast<std::size_t>(s.size()) != spec_.d) {
        throw DimensionError("generator: state dimension mismatch");
    }
    if (spec_.identity) {
        return s;
    }
    Eigen::VectorXd h = spec_.input_scale * s;
    for (const auto& layer : layers_) {
        Eigen::VectorXd next = layer.weight * h + layer.bias;
        if (layer.activated) {
            next = next.unaryExpr([slope = spec_.activation_slope](double x) { return leaky(x, slope); });
        }
        h = std::move(next);
    }
    return h;
}

Eigen::MatrixXd Generator::apply(const Eigen::MatrixXd& states) const
{
    if (static_cast<std::size_t>(states.rows()) != spec_.d) {
        throw DimensionError("generator: state dimension mismatch");
    }
    if (spec_.identity) {
        return states;
    }
    Eigen::MatrixXd h = spec_.input_scale * states;
    for (const auto& layer : layers_) {
        Eigen::MatrixXd next = (layer.weight * h).colwise() + layer.bias;
        if (layer.activated) {
            next = next.unaryExpr([slope = spec_.activation_slope](double x) { return leaky(x, slope); });
        }
        h = std::move(next);
    }
    return h;
}

LatentState Generator::invert(const Observation& o) const
{
    if (static_cast<std::size_t>(o.size()) != spec_.D) {
        throw DimensionError("generator: observation dimension mismatch");
    }
    if (spec_.identity) {
        return o;
    }
    Eigen::VectorXd h = o;
    for (std::size_t k = layers_.size(); k-- > 0;) {
        const auto& layer = layers_[k];
        if (layer.activated) {
            h = h.unaryExpr([slope = spec_.activation_slope](double y) { return leaky_inverse(y, slope); });
        }
        // The solve resizes its destination, so the right-hand side must not alias it.
        const Eigen::VectorXd rhs = h - layer.bias;
        h = solvers_[k].solve(rhs);
    }
    return h / spec_.input_scale;
}

StepResult env_step(const EnvConfig& config, const LatentState& s, const UnitVector& a)
{
    if (static_cast<std::size_t>(s.size()) != a.dim()) {
        throw DimensionError("env_step: state/action dimension mismatch");
    }
    StepResult result{s + a.coords(), false};
    const double B = config.B;
    for (Eigen::Index i = 0; i < result.s_next.size(); ++i) {
        double& x = result.s_next[i];
        if (x > B) {
            x = config.boundary == BoundaryRule::Reflect ? 2.0 * B - x : B;
            result.boundary = true;
        } else if (x < -B) {
            x = config.boundary == BoundaryRule::Reflect ? -2.0 * B - x : -B;
            result.boundary = true;
        }
    }
    return result;
}

LatentState sample_episode_start(const EnvConfig& config, Rng& rng)
{
    std::uniform_real_distribution<double> coord(-0.5 * config.B, 0.5 * config.B);
    LatentState s(static_cast<Eigen::Index>(config.d));
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s[i] = coord(rng);
    }
    return s;
}

std::vector<LatentTransition> generate_assumption1_dataset(std::size_t n, std::size_t d, double kappa, Rng& rng,
                                                           double half_width)
{
    if (n == 0) {
        throw std::invalid_argument("dataset size must be >= 1");
    }
    std::uniform_real_distribution<double> coord(-half_width, half_width);
    std::vector<LatentTransition> data;
    data.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        UnitVector z = sample_uniform_sphere(d, rng);
        LatentState s(static_cast<Eigen::Index>(d));
        for (Eigen::Index k = 0; k < s.size(); ++k) {
            s[k] = coord(rng);
        }
        const UnitVector step = sample_vmf(VmfParams(z, kappa), rng);
        LatentState s_next = s + step.coords();
        data.push_back({std::move(z), std::move(s), std::move(s_next)});
    }
    return data;
}

std::vector<TransitionRecord> observe(const Generator& g, const std::vector<LatentTransition>& data)
{
    std::vector<TransitionRecord> records;
    records.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& x = data[i];
        const Eigen::VectorXd diff = x.s_next - x.s;
        const double norm = diff.norm();
        UnitVector a = norm > 0.0 ? UnitVector::normalized(diff) : x.z;
        records.push_back({i, 0, x.s, g(x.s), x.z, std::move(a), x.s_next, g(x.s_next), false});
    }
    return records;
}

void write_transitions_csv(std::ostream& out, const std::vector<TransitionRecord>& records,
                           const std::vector<std::size_t>* trajectory_ids)
{
    if (trajectory_ids != nullptr && trajectory_ids->size() != records.size()) {
        throw std::invalid_argument("trajectory id count must match record count");
    }
    const auto header = [&out](const char* name, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) {
            out << ',' << name << '[' << i << ']';
        }
    };
    if (trajectory_ids != nullptr) {
        out << "trajectory,";
    }
    out << "episode,t";
    if (!records.empty()) {
        const auto& r = records.front();
        header("s", r.s.size());
        header("o", r.o.size());
        header("z", static_cast<Eigen::Index>(r.z.dim()));
        header("s'", r.s_next.size());
        header("o'", r.o_next.size());
    }
    out << ",boundary_flag\n";

    const auto row = [&out](const Eigen::VectorXd& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            out << ',' << v[i];
        }
    };
    const auto precision = out.precision(17);
    for (std::size_t k = 0; k < records.size(); ++k) {
        const auto& r = records[k];
        if (trajectory_ids != nullptr) {
            out << (*trajectory_ids)[k] << ',';
        }
        out << r.episode << ',' << r.t;
        row(r.s);
        row(r.o);
        row(r.z.coords());
        row(r.s_next);
        row(r.o_next);
        out << ',' << (r.boundary ? 1 : 0) << '\n';
    }
    out.precision(precision);
}

} // namespace csf
