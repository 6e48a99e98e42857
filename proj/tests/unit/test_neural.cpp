#include "csf/neural.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace csf;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    std::normal_distribution<double> normal;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = normal(rng);
    }
    return m;
}

// Every encoder shape the experiments train: the default and each output
// dimension of the feature-dimension ablation.
std::vector<MlpSpec> experiment_architectures()
{
    std::vector<MlpSpec> specs;
    for (std::size_t k : {2, 3, 4, 8, 16}) {
        specs.push_back({16, k, {256, 256}, 0.2, true});
    }
    return specs;
}

} // namespace

TEST_CASE("layout: blocks tile the flat vector")
{
    const MlpSpec spec{5, 3, {7, 6}, 0.2, true};
    const ParamLayout layout = ParamLayout::from(spec);
    CHECK(layout.total == 7 * 5 + 7 + 6 * 7 + 6 + 3 * 6 + 3 + 3 * 5);
    REQUIRE(layout.skip.has_value());
    CHECK(layout.skip->offset + layout.skip->size() == layout.total);
    CHECK_THROWS(ParamLayout::from({0, 3, {}, 0.2, false}));
    CHECK_THROWS(ParamLayout::from({2, 3, {0}, 0.2, false}));
}

TEST_CASE("forward: zero parameters give zero output")
{
    const Mlp mlp({6, 3, {8, 8}, 0.2, true});
    Rng rng(1);
    const Eigen::MatrixXd y = mlp.forward(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mlp.param_count())),
                                          gaussian(6, 10, rng));
    CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: single linear layer is Wx + b")
{
    const Mlp mlp({4, 3, {}, 0.2, false});
    Rng rng(2);
    const Eigen::VectorXd p = gaussian(static_cast<Eigen::Index>(mlp.param_count()), 1, rng);
    const auto& layer = mlp.layout().dense.front();
    const Eigen::Map<const Eigen::MatrixXd> w(p.data() + layer.weight.offset, 3, 4);
    const Eigen::Map<const Eigen::VectorXd> b(p.data() + layer.bias.offset, 3);
    const Eigen::MatrixXd x = gaussian(4, 5, rng);
    const Eigen::MatrixXd expected = (w * x).colwise() + b;
    CHECK((mlp.forward(p, x) - expected).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("forward: matches the reference evaluation")
{
    Rng rng(3);
    std::vector<MlpSpec> specs = experiment_architectures();
    specs.push_back({3, 5, {4}, 0.2, false});
    specs.push_back({7, 2, {9, 3, 5}, 0.1, true});
    for (const auto& spec : specs) {
        const Mlp mlp(spec);
        const Eigen::VectorXd p = mlp.init_params(rng);
        const Eigen::MatrixXd x = gaussian(static_cast<Eigen::Index>(spec.input_dim), 6, rng);
        const Eigen::MatrixXd y = mlp.forward(p, x);
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            CHECK((y.col(j) - oracle::mlp_forward(spec, p, x.col(j))).cwiseAbs().maxCoeff() <= 1e-12);
            CHECK((mlp.forward_one(p, x.col(j)) - y.col(j)).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("forward: pure and repeatable")
{
    const Mlp mlp({16, 4, {256, 256}, 0.2, true});
    Rng rng(4);
    const Eigen::VectorXd p = mlp.init_params(rng);
    const Eigen::MatrixXd x = gaussian(16, 32, rng);
    Tape tape;
    const Eigen::MatrixXd a = mlp.forward(p, x, &tape);
    const Eigen::MatrixXd b = mlp.forward(p, x);
    CHECK(a == b);
    const Eigen::MatrixXd u = gaussian(4, 32, rng);
    CHECK(mlp.backward(p, tape, u).params == mlp.backward(p, tape, u).params);
}

TEST_CASE("forward: shape errors")
{
    const Mlp mlp({4, 2, {3}, 0.2, true});
    Rng rng(5);
    const Eigen::VectorXd p = mlp.init_params(rng);
    CHECK_THROWS(mlp.forward(p, gaussian(5, 1, rng)));
    CHECK_THROWS(mlp.forward(p.head(p.size() - 1), gaussian(4, 1, rng)));
}

TEST_CASE("init: weights scaled by fan-in, biases zero")
{
    const Mlp mlp({64, 4, {256}, 0.2, false});
    Rng rng(6);
    const Eigen::VectorXd p = mlp.init_params(rng);
    const auto& first = mlp.layout().dense.front();
    const Eigen::VectorXd w = p.segment(static_cast<Eigen::Index>(first.weight.offset),
                                        static_cast<Eigen::Index>(first.weight.size()));
    const double var = w.squaredNorm() / static_cast<double>(w.size());
    CHECK(var == doctest::Approx(1.0 / 64.0).epsilon(0.05));
    CHECK(p.segment(static_cast<Eigen::Index>(first.bias.offset), 256).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: zero upstream gives zero gradient")
{
    const Mlp mlp({8, 3, {16, 16}, 0.2, true});
    Rng rng(7);
    const Eigen::VectorXd p = mlp.init_params(rng);
    Tape tape;
    mlp.forward(p, gaussian(8, 5, rng), &tape);
    const Gradients g = mlp.backward(p, tape, Eigen::MatrixXd::Zero(3, 5));
    CHECK(g.params.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.input.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: linear layer weight gradient is u x^T")
{
    const Mlp mlp({4, 3, {}, 0.2, false});
    Rng rng(8);
    const Eigen::VectorXd p = mlp.init_params(rng);
    const Eigen::MatrixXd x = gaussian(4, 1, rng);
    const Eigen::MatrixXd u = gaussian(3, 1, rng);
    Tape tape;
    mlp.forward(p, x, &tape);
    const Gradients g = mlp.backward(p, tape, u);
    const auto& layer = mlp.layout().dense.front();
    const Eigen::Map<const Eigen::MatrixXd> gw(g.params.data() + layer.weight.offset, 3, 4);
    CHECK((gw - u * x.transpose()).cwiseAbs().maxCoeff() <= 1e-15);
    const Eigen::Map<const Eigen::MatrixXd> w(p.data() + layer.weight.offset, 3, 4);
    CHECK((g.input - w.transpose() * u).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("backward: matches central differences on every experiment architecture")
{
    std::vector<MlpSpec> specs = experiment_architectures();
    specs.push_back({7, 2, {9, 3, 5}, 0.1, true});
    std::uint64_t seed = 100;
    for (const auto& spec : specs) {
        const auto check = oracle::mlp_gradient_check(spec, seed++, 1000);
        CAPTURE(spec.output_dim);
        CHECK(check.checked == std::min<std::size_t>(1000, Mlp(spec).param_count() - check.skipped_kinks));
        CHECK(check.max_relative_error < 1e-5);
        MESSAGE("output_dim " << spec.output_dim << ": max rel err " << check.max_relative_error << ", "
                              << check.skipped_kinks << " kink coordinates redrawn");
    }
}

TEST_CASE("backward: input gradient matches central differences")
{
    const MlpSpec spec{16, 4, {256, 256}, 0.2, true};
    const Mlp mlp(spec);
    Rng rng(9);
    const Eigen::VectorXd p = mlp.init_params(rng);
    Eigen::MatrixXd x = gaussian(16, 1, rng);
    const Eigen::MatrixXd u = gaussian(4, 1, rng);
    Tape tape;
    mlp.forward(p, x, &tape);
    const Eigen::VectorXd gx = mlp.backward(p, tape, u).input;
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < 16; ++i) {
        Eigen::VectorXd up = x.col(0);
        Eigen::VectorXd down = x.col(0);
        up[i] += h;
        down[i] -= h;
        std::vector<bool> pu;
        std::vector<bool> pd;
        const double fu = u.col(0).dot(oracle::mlp_forward(spec, p, up, &pu));
        const double fd = u.col(0).dot(oracle::mlp_forward(spec, p, down, &pd));
        if (pu != pd) {
            continue;
        }
        const double diff = (fu - fd) / (2.0 * h);
        CHECK(oracle::gradient_relative_error(gx[i], diff) < 1e-5);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged")
{
    Rng rng(10);
    Eigen::VectorXd p = gaussian(20, 1, rng);
    const Eigen::VectorXd start = p;
    OptimState state(20);
    for (int i = 0; i < 10; ++i) {
        CHECK(optimizer_step(state, p, Eigen::VectorXd::Zero(20)));
    }
    CHECK(p == start);
    CHECK(state.step == 10);
}

TEST_CASE("adam: constant gradient moves parameters monotonically against it")
{
    Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
    const Eigen::Vector3d g(1.0, -2.0, 0.5);
    OptimState state(3);
    Eigen::VectorXd previous = p;
    for (int i = 0; i < 1000; ++i) {
        optimizer_step(state, p, g);
        for (Eigen::Index k = 0; k < 3; ++k) {
            CHECK((p[k] - previous[k]) * g[k] < 0.0);
        }
        previous = p;
    }
}

TEST_CASE("adam: minimizes a quadratic bowl")
{
    Rng rng(11);
    const Eigen::VectorXd curvature = Eigen::VectorXd::LinSpaced(10, 1.0, 10.0);
    Eigen::VectorXd p = gaussian(10, 1, rng);
    OptimState state(10, 1e-2);
    int reached = -1;
    for (int step = 0; step < 5000; ++step) {
        const Eigen::VectorXd grad = curvature.cwiseProduct(p);
        if (grad.norm() < 1e-6) {
            reached = step;
            break;
        }
        optimizer_step(state, p, grad);
    }
    CHECK(reached >= 0);
    MESSAGE("gradient norm below 1e-6 after " << reached << " steps");
}

TEST_CASE("adam: non-finite gradients are rejected without side effects")
{
    Eigen::VectorXd p = Eigen::VectorXd::Ones(4);
    OptimState state(4);
    optimizer_step(state, p, Eigen::VectorXd::Constant(4, 0.1));
    const Eigen::VectorXd before = p;
    const Eigen::VectorXd m = state.first_moment;
    Eigen::VectorXd bad = Eigen::VectorXd::Constant(4, 0.1);
    bad[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(optimizer_step(state, p, bad));
    bad[2] = std::numeric_limits<double>::infinity();
    CHECK_FALSE(optimizer_step(state, p, bad));
    CHECK(p == before);
    CHECK(state.first_moment == m);
    CHECK(state.step == 1);
    CHECK(state.rejected_steps == 2);
}

TEST_CASE("checkpoint: round trip is bit exact")
{
    const auto dir = std::filesystem::temp_directory_path() / "csf_test_checkpoint";
    std::filesystem::create_directories(dir);
    const MlpSpec spec{16, 4, {32, 32}, 0.2, true};
    Rng rng(12);
    Checkpoint c{spec, Mlp(spec).init_params(rng), 77, 1234};
    c.params[3] = -0.0;
    c.params[5] = 1e-300;
    save_checkpoint(dir / "ckpt", c);
    const Checkpoint back = load_checkpoint(dir / "ckpt");
    CHECK(back.spec == spec);
    CHECK(back.seed == 77);
    CHECK(back.step == 1234);
    REQUIRE(back.params.size() == c.params.size());
    CHECK(std::memcmp(back.params.data(), c.params.data(), sizeof(double) * c.params.size()) == 0);
    CHECK(std::filesystem::file_size(dir / "ckpt.bin") == sizeof(double) * c.params.size());

    std::filesystem::resize_file(dir / "ckpt.bin", 16);
    CHECK_THROWS(load_checkpoint(dir / "ckpt"));
    std::filesystem::remove_all(dir);
}
