#include "csf/neural.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace csf {

namespace {

using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;

ConstMatrixMap view(const Eigen::VectorXd& flat, const ParamBlock& b)
{
    return {flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}

MatrixMap view(Eigen::VectorXd& flat, const ParamBlock& b)
{
    return {flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}

ConstVectorMap vview(const Eigen::VectorXd& flat, const ParamBlock& b)
{
    return {flat.data() + b.offset, static_cast<Eigen::Index>(b.size())};
}

VectorMap vview(Eigen::VectorXd& flat, const ParamBlock& b)
{
    return {flat.data() + b.offset, static_cast<Eigen::Index>(b.size())};
}

nlohmann::json block_json(const ParamBlock& b)
{
    return {{"offset", b.offset}, {"rows", b.rows}, {"cols", b.cols}};
}

} // namespace

ParamLayout ParamLayout::from(const MlpSpec& spec)
{
    if (spec.input_dim == 0 || spec.output_dim == 0) {
        throw std::invalid_argument("mlp: dimensions must be >= 1");
    }
    ParamLayout layout;
    std::size_t offset = 0;
    std::size_t in = spec.input_dim;
    const auto add = [&offset](std::size_t rows, std::size_t cols) {
        ParamBlock b{offset, rows, cols};
        offset += b.size();
        return b;
    };
    for (std::size_t width : spec.hidden) {
        if (width == 0) {
            throw std::invalid_argument("mlp: hidden widths must be >= 1");
        }
        DenseLayout layer;
        layer.weight = add(width, in);
        layer.bias = add(width, 1);
        layout.dense.push_back(layer);
        in = width;
    }
    DenseLayout out;
    out.weight = add(spec.output_dim, in);
    out.bias = add(spec.output_dim, 1);
    layout.dense.push_back(out);
    if (spec.skip_connections) {
        layout.skip = add(spec.output_dim, spec.input_dim);
    }
    layout.total = offset;
    return layout;
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)), layout_(ParamLayout::from(spec_)) {}

void Mlp::check_params(const Eigen::VectorXd& params) const
{
    if (static_cast<std::size_t>(params.size()) != layout_.total) {
        throw std::invalid_argument("mlp: parameter vector has wrong length");
    }
}

Eigen::VectorXd Mlp::init_params(Rng& rng) const
{
    Eigen::VectorXd params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout_.total));
    const auto fill = [&](const ParamBlock& b) {
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(b.cols)));
        auto w = vview(params, b);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w[i] = dist(rng);
        }
    };
    for (const auto& layer : layout_.dense) {
        fill(layer.weight);
    }
    if (layout_.skip) {
        fill(*layout_.skip);
    }
    return params;
}

Eigen::MatrixXd Mlp::forward(const Eigen::VectorXd& params, const Eigen::MatrixXd& x, Tape* tape) const
{
    check_params(params);
    if (static_cast<std::size_t>(x.rows()) != spec_.input_dim) {
        throw std::invalid_argument("mlp: input dimension mismatch");
    }
    const double slope = spec_.negative_slope;
    const std::size_t hidden = spec_.hidden.size();
    if (tape != nullptr) {
        tape->input = x;
        tape->pre.resize(hidden);
        tape->post.resize(hidden);
    }
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < hidden; ++l) {
        const auto& layer = layout_.dense[l];
        Eigen::MatrixXd pre = view(params, layer.weight) * h;
        pre.colwise() += vview(params, layer.bias);
        h = pre.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
        if (tape != nullptr) {
            tape->pre[l] = std::move(pre);
            tape->post[l] = h;
        }
    }
    const auto& out = layout_.dense.back();
    Eigen::MatrixXd y = view(params, out.weight) * h;
    y.colwise() += vview(params, out.bias);
    if (layout_.skip) {
        y.noalias() += view(params, *layout_.skip) * x;
    }
    return y;
}

Eigen::VectorXd Mlp::forward_one(const Eigen::VectorXd& params, const Eigen::VectorXd& x) const
{
    return forward(params, Eigen::MatrixXd(x)).col(0);
}

Gradients Mlp::backward(const Eigen::VectorXd& params, const Tape& tape, const Eigen::MatrixXd& upstream) const
{
    check_params(params);
    const std::size_t hidden = spec_.hidden.size();
    if (tape.pre.size() != hidden || tape.input.rows() != static_cast<Eigen::Index>(spec_.input_dim)) {
        throw std::invalid_argument("mlp: tape does not match this network");
    }
    if (upstream.rows() != static_cast<Eigen::Index>(spec_.output_dim) || upstream.cols() != tape.input.cols()) {
        throw std::invalid_argument("mlp: upstream gradient shape mismatch");
    }
    Gradients grads{Eigen::VectorXd::Zero(params.size()), Eigen::MatrixXd()};
    Eigen::VectorXd& g = grads.params;
    const double slope = spec_.negative_slope;

    const auto& out = layout_.dense.back();
    const Eigen::MatrixXd& last = hidden == 0 ? tape.input : tape.post.back();
    view(g, out.weight).noalias() = upstream * last.transpose();
    vview(g, out.bias) = upstream.rowwise().sum();
    Eigen::MatrixXd delta = view(params, out.weight).transpose() * upstream;

    for (std::size_t l = hidden; l-- > 0;) {
        const auto& layer = layout_.dense[l];
        delta = delta.binaryExpr(tape.pre[l], [slope](double dv, double p) { return p > 0.0 ? dv : slope * dv; });
        const Eigen::MatrixXd& below = l == 0 ? tape.input : tape.post[l - 1];
        view(g, layer.weight).noalias() = delta * below.transpose();
        vview(g, layer.bias) = delta.rowwise().sum();
        delta = view(params, layer.weight).transpose() * delta;
    }
    if (layout_.skip) {
        view(g, *layout_.skip).noalias() = upstream * tape.input.transpose();
        delta.noalias() += view(params, *layout_.skip).transpose() * upstream;
    }
    grads.input = std::move(delta);
    return grads;
}

OptimState::OptimState(std::size_t param_count, double lr)
    : first_moment(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(param_count))),
      second_moment(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(param_count))), learning_rate(lr)
{
}

bool all_finite(const Eigen::VectorXd& v)
{
    return v.allFinite();
}

bool optimizer_step(OptimState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads)
{
    if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
        throw std::invalid_argument("optimizer: shape mismatch");
    }
    if (!grads.allFinite()) {
        ++state.rejected_steps;
        return false;
    }
    ++state.step;
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(state.beta1, t);
    const double correction2 = 1.0 - std::pow(state.beta2, t);
    const double step_size = state.learning_rate / correction1;
    const double eps = state.epsilon;
    params.array() -= step_size * state.first_moment.array()
                      / ((state.second_moment.array() / correction2).sqrt() + eps);
    return true;
}

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& checkpoint)
{
    const ParamLayout layout = ParamLayout::from(checkpoint.spec);
    if (static_cast<std::size_t>(checkpoint.params.size()) != layout.total) {
        throw std::invalid_argument("checkpoint: parameter count does not match spec");
    }
    auto bin_path = stem;
    bin_path += ".bin";
    auto json_path = stem;
    json_path += ".json";

    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& layer : layout.dense) {
        blocks.push_back({{"weight", block_json(layer.weight)}, {"bias", block_json(layer.bias)}});
    }
    nlohmann::json header = {
        {"spec",
         {{"input_dim", checkpoint.spec.input_dim},
          {"output_dim", checkpoint.spec.output_dim},
          {"hidden", checkpoint.spec.hidden},
          {"negative_slope", checkpoint.spec.negative_slope},
          {"skip_connections", checkpoint.spec.skip_connections}}},
        {"layout", {{"dense", blocks}, {"total", layout.total}}},
        {"seed", checkpoint.seed},
        {"step", checkpoint.step},
        {"data", bin_path.filename().string()},
        {"dtype", "float64"},
        {"byte_order", "little"},
        {"count", layout.total},
    };
    if (layout.skip) {
        header["layout"]["skip"] = block_json(*layout.skip);
    }

    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw std::runtime_error("checkpoint: cannot open " + bin_path.string());
    }
    for (Eigen::Index i = 0; i < checkpoint.params.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(checkpoint.params[i]);
        unsigned char bytes[8];
        for (int k = 0; k < 8; ++k) {
            bytes[k] = static_cast<unsigned char>(bits >> (8 * k));
        }
        bin.write(reinterpret_cast<const char*>(bytes), 8);
    }
    std::ofstream js(json_path);
    if (!js) {
        throw std::runtime_error("checkpoint: cannot open " + json_path.string());
    }
    js << header.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& stem)
{
    auto json_path = stem;
    json_path += ".json";
    std::ifstream js(json_path);
    if (!js) {
        throw std::runtime_error("checkpoint: cannot open " + json_path.string());
    }
    const nlohmann::json header = nlohmann::json::parse(js);
    Checkpoint checkpoint;
    const auto& spec = header.at("spec");
    checkpoint.spec.input_dim = spec.at("input_dim").get<std::size_t>();
    checkpoint.spec.output_dim = spec.at("output_dim").get<std::size_t>();
    checkpoint.spec.hidden = spec.at("hidden").get<std::vector<std::size_t>>();
    checkpoint.spec.negative_slope = spec.at("negative_slope").get<double>();
    checkpoint.spec.skip_connections = spec.at("skip_connections").get<bool>();
    checkpoint.seed = header.at("seed").get<std::uint64_t>();
    checkpoint.step = header.at("step").get<std::uint64_t>();
    const auto count = header.at("count").get<std::size_t>();
    if (count != ParamLayout::from(checkpoint.spec).total) {
        throw std::runtime_error("checkpoint: header count does not match spec");
    }

    const auto bin_path = stem.parent_path() / header.at("data").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw std::runtime_error("checkpoint: cannot open " + bin_path.string());
    }
    checkpoint.params.resize(static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char bytes[8];
        if (!bin.read(reinterpret_cast<char*>(bytes), 8)) {
            throw std::runtime_error("checkpoint: binary file truncated");
        }
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) {
            bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
        }
        checkpoint.params[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(bits);
    }
    return checkpoint;
}

} // namespace csf
