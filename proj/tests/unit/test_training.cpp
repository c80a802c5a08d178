#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "equiflow/linalg.hpp"
#include "equiflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

using namespace equiflow;

namespace {

// Energy distance between two point clouds (columns).
double energy_distance(const Matrix& a, const Matrix& b) {
    auto mean_dist = [](const Matrix& x, const Matrix& y) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < x.cols(); ++i)
            for (Eigen::Index j = 0; j < y.cols(); ++j) s += (x.col(i) - y.col(j)).norm();
        return s / static_cast<double>(x.cols() * y.cols());
    };
    return 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
}

// Two-sample permutation test p-value on the energy distance.
double permutation_p_value(const Matrix& a, const Matrix& b, int permutations, Rng& rng) {
    const double observed = energy_distance(a, b);
    Matrix pooled(a.rows(), a.cols() + b.cols());
    pooled << a, b;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pooled.cols()));
    std::iota(idx.begin(), idx.end(), 0);
    int extreme = 0;
    for (int p = 0; p < permutations; ++p) {
        std::shuffle(idx.begin(), idx.end(), rng);
        Matrix x(a.rows(), a.cols()), y(b.rows(), b.cols());
        for (Eigen::Index i = 0; i < a.cols(); ++i) x.col(i) = pooled.col(idx[static_cast<std::size_t>(i)]);
        for (Eigen::Index i = 0; i < b.cols(); ++i) y.col(i) = pooled.col(idx[static_cast<std::size_t>(a.cols() + i)]);
        if (energy_distance(x, y) >= observed) ++extreme;
    }
    return (extreme + 1.0) / (permutations + 1.0);
}

Representation c8_plane() { return rotation2d_rep(make_group("C8")); }

ModelSpec small_c8_model(std::uint64_t seed) {
    ResidualArchitecture arch;
    arch.blocks = 2;
    arch.width = 3;
    return residual_model("C8", {"rotation2d", 0, 1}, arch, seed);
}

TrainConfig short_run(int steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 64;
    cfg.eval_interval = 10;
    cfg.train_size = 500;
    cfg.test_size = 200;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("eight gaussians") {
    Rng rng(1);
    const Matrix x = sample_eight_gaussians(100000, rng);
    // Per-coordinate variance is 2 + 0.04.
    const double se = std::sqrt(2.04 / 100000.0);
    CHECK(std::abs(x.row(0).mean()) < 3 * se);
    CHECK(std::abs(x.row(1).mean()) < 3 * se);
    CHECK_THROWS_AS(sample_eight_gaussians(0, rng), TrainingError);

    const Matrix a = sample_eight_gaussians(300, rng);
    const Matrix b = rotation2d_rep(make_group("C8")).matrix(1) * sample_eight_gaussians(300, rng);
    CHECK(permutation_p_value(a, b, 200, rng) > 0.01);
}

TEST_CASE("concentric rings") {
    Rng rng(2);
    const Matrix x = sample_concentric_rings(40000, rng);
    const Eigen::ArrayXd r = x.colwise().norm().transpose().array();
    for (int ring = 1; ring <= 4; ++ring) {
        const double frac = ((r - ring).abs() < 0.4).cast<double>().mean();
        CHECK(frac == doctest::Approx(0.25).epsilon(0.05));
    }
    // Nothing sits halfway between rings.
    CHECK(((r - 1.5).abs() < 0.05).cast<double>().mean() < 1e-3);
    const double se = std::sqrt(7.5 / 40000.0);
    CHECK(std::abs(x.row(0).mean()) < 3 * se);
    CHECK(std::abs(x.row(1).mean()) < 3 * se);
}

TEST_CASE("permutation sets") {
    Rng a(3), b(3);
    CHECK(sample_permutation_sets(50, 4, a) == sample_permutation_sets(50, 4, b));

    Rng rng(4);
    const int d = 4;
    const Matrix x = sample_permutation_sets(40000, d, rng);
    CHECK(x.rows() == 2 * d);
    const Representation shift = make_rep(make_group("C4"), {"regular", 0, 2});
    const Matrix y = shift.matrix(1) * x;
    // Block-wise coordinate means and second moments agree up to Monte Carlo noise.
    const Vector mx = x.rowwise().mean(), my = y.rowwise().mean();
    const Vector sx = x.array().square().rowwise().mean(), sy = y.array().square().rowwise().mean();
    for (int i = 0; i < 2 * d; ++i) {
        const double se = std::sqrt(sx(i) / 40000.0);
        CHECK(std::abs(mx(i) - my(i)) < 6 * se);
        CHECK(std::abs(sx(i) - sy(i)) < 0.1 * sx(i));
    }
    CHECK(sample_permutation_sets(10, 1, rng).rows() == 2);
}

TEST_CASE("nll_loss") {
    FlowComposition empty(trivial_rep(make_group("C1"), 2));
    CHECK(nll_loss(empty, Matrix::Zero(2, 1)) == doctest::Approx(std::log(2.0 * std::numbers::pi)).epsilon(1e-15));
    CHECK(nll_loss(empty, Matrix::Zero(2, 1)) == doctest::Approx(1.837877).epsilon(1e-6));
    CHECK_THROWS_AS(nll_loss(empty, Matrix(2, 0)), TrainingError);

    Matrix bad = Matrix::Zero(2, 5);
    bad(1, 3) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(nll_loss(empty, bad), "non-finite log-density at sample 3", TrainingError);

    // One matrix-exponential layer: brute-force change of variables.
    auto c1 = make_group("C1");
    FlowComposition flow(trivial_rep(c1, 2));
    auto layer = std::make_shared<MatrixExpLayer>("m", trivial_rep(c1, 2));
    flow.add(layer);
    flow.init_params();
    Matrix k(2, 2);
    k << 0.3, -0.2, 0.1, 0.05;
    layer->set_generator(flow.params(), k);
    Rng rng(5);
    const Matrix x = standard_normal_matrix(2, 32, rng);
    const Matrix z = expm(-k) * x;
    const double manual = -(standard_normal_log_prob(z).array() - k.trace()).mean();
    CHECK(nll_loss(flow, x) == doctest::Approx(manual).epsilon(1e-12));
    CHECK(nll_loss(flow, x) - nll_loss(empty, z) == doctest::Approx(k.trace()).epsilon(1e-12));
}

TEST_CASE("adam_step") {
    ParameterStore p;
    p.add("w", Matrix::Constant(2, 3, 0.5));
    ParameterStore g = p.zeros_like();
    AdamState state;
    AdamConfig cfg;

    SUBCASE("first step with unit gradient moves by -lr / (1 + eps)") {
        g.get("w").setOnes();
        adam_step(p, g, state, cfg);
        const double expected = 0.5 - cfg.lr / (1.0 + cfg.eps);
        CHECK((p.get("w").array() - expected).abs().maxCoeff() < 1e-15);
    }
    SUBCASE("zero gradients leave parameters unchanged") {
        for (int i = 0; i < 50; ++i) adam_step(p, g, state, cfg);
        CHECK(p.get("w") == Matrix::Constant(2, 3, 0.5));
    }
    SUBCASE("non-finite gradient is rejected") {
        g.get("w")(1, 2) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(adam_step(p, g, state, cfg), TrainingError);
    }
    SUBCASE("quadratic descent is monotone") {
        ParameterStore q;
        q.add("t", Matrix::Constant(1, 1, 1.0));
        AdamState s;
        double prev = 1.0;
        for (int i = 0; i < 100; ++i) {
            ParameterStore grad = q.zeros_like();
            grad.get("t") = q.get("t");
            adam_step(q, grad, s, cfg);
            const double now = std::abs(q.get("t")(0, 0));
            CHECK(now < prev);
            prev = now;
        }
    }
}

TEST_CASE("training basics") {
    ToyDataset data;
    const Representation rep = c8_plane();

    SUBCASE("zero steps records the initial metrics only") {
        FlowComposition flow = build_flow(small_c8_model(1));
        const TrainResult r = train(flow, data, rep, short_run(0));
        REQUIRE(r.history.size() == 1);
        CHECK(r.history[0].step == 0);
        CHECK(r.train_loss.empty());
    }
    SUBCASE("identical seeds give identical histories") {
        FlowComposition a = build_flow(small_c8_model(1)), b = build_flow(small_c8_model(1));
        const TrainResult ra = train(a, data, rep, short_run(30)), rb = train(b, data, rep, short_run(30));
        REQUIRE(ra.history.size() == rb.history.size());
        for (std::size_t i = 0; i < ra.history.size(); ++i) {
            CHECK(ra.history[i].nll == rb.history[i].nll);
            CHECK(ra.history[i].group_nll == rb.history[i].group_nll);
            CHECK(ra.history[i].equivariance_gap == rb.history[i].equivariance_gap);
        }
        CHECK(ra.train_loss == rb.train_loss);
        CHECK(a.params().flatten() == b.params().flatten());
    }
    SUBCASE("equivariant flow stays invariant at every checkpoint") {
        FlowComposition flow = build_flow(small_c8_model(2));
        const TrainResult r = train(flow, data, rep, short_run(40));
        for (const Metrics& m : r.history) CHECK(m.equivariance_gap < 1e-8);
        CHECK(r.history.back().nll < r.history.front().nll);
        CHECK(pointwise_invariance_gap(flow, r.test_set, rep) < 1e-8);
        // Lipschitz projection keeps every block certified.
        for (std::size_t i = 0; i < flow.size(); ++i)
            CHECK(dynamic_cast<const GResidualLayer&>(flow.layer(i)).certify(flow.params()) < 1.0);
    }
    SUBCASE("divergence aborts with the partial history") {
        FlowComposition flow = build_flow(small_c8_model(3));
        TrainConfig cfg = short_run(20);
        cfg.divergence_threshold = 0.5;
        try {
            train(flow, data, rep, cfg);
            FAIL("expected divergence");
        } catch (const TrainingDiverged& e) {
            CHECK(e.partial().history.size() >= 1);
            CHECK(e.partial().train_loss.size() == 1);
        }
    }
    SUBCASE("dimension mismatch is rejected") {
        FlowComposition flow = build_flow(small_c8_model(1));
        CHECK_THROWS_AS(train(flow, ToyDataset{DatasetKind::permutation_sets, 2}, rep, short_run(1)), TrainingError);
    }
}

TEST_CASE("parameter budget") {
    ResidualArchitecture arch;
    const int eq_width = auto_size_width("C8", {"rotation2d", 0, 1}, arch, 2000);
    arch.width = eq_width;
    const std::size_t eq = parameter_count(residual_model("C8", {"rotation2d", 0, 1}, arch, 0));
    CHECK(eq >= 1800);
    CHECK(eq <= 2200);

    ResidualArchitecture base = arch;
    base.width = auto_size_width("C1", {"trivial", 2, 1}, base, eq);
    const std::size_t bc = parameter_count(residual_model("C1", {"trivial", 2, 1}, base, 0));
    CHECK(std::abs(static_cast<double>(bc) - static_cast<double>(eq)) <= 0.05 * static_cast<double>(eq));
}

TEST_CASE("moving average check") {
    std::vector<double> falling, rising;
    Rng rng(8);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (int i = 0; i < 8000; ++i) {
        falling.push_back(3.0 + std::exp(-i / 2000.0) + noise(rng));
        rising.push_back(3.0 + i / 1000.0 + noise(rng));
    }
    const MonotoneReport ok = moving_average_check(falling);
    CHECK(ok.ok);
    CHECK(ok.windows == 12);
    CHECK_FALSE(moving_average_check(rising).ok);
    CHECK_THROWS_AS(moving_average_check(falling, 1), TrainingError);

    // AR(1) noise: an i.i.d. standard error would be about four times too small here.
    std::vector<double> correlated;
    double e = 0.0;
    for (int i = 0; i < 20000; ++i) {
        e = 0.9 * e + noise(rng);
        correlated.push_back(3.0 + std::exp(-i / 3000.0) + e);
    }
    CHECK(moving_average_check(correlated).ok);
}

TEST_CASE("csv writers") {
    const auto dir = std::filesystem::temp_directory_path() / "equiflow_test_training";
    std::filesystem::create_directories(dir);
    write_metrics_csv(dir / "m.csv", {{0, 1.5, 1.25, 0.0, 3.0}});
    std::ifstream in(dir / "m.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "step,nll,group_nll,equivariance_gap");
    CHECK(row == "0,1.5,1.25,0");
}
