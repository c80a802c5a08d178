#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "equiflow/nets.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <memory>

using namespace equiflow;

namespace {

std::shared_ptr<const FiniteGroup> share(FiniteGroup g) { return std::make_shared<const FiniteGroup>(std::move(g)); }

Matrix gaussian(Eigen::Index r, Eigen::Index c, Rng& rng) {
    std::normal_distribution<double> normal;
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal(rng);
    return m;
}

// Reference forward from the expanded maps; valid when every bias is zero.
Matrix chain(const std::vector<Matrix>& maps, const Matrix& x) {
    Matrix h = x;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        h = maps[i] * h;
        if (i + 1 < maps.size()) h = h.array().tanh();
    }
    return h;
}

}  // namespace

TEST_CASE("trivial group linear network composes the two maps") {
    auto g = share(FiniteGroup::trivial());
    Representation r = trivial_rep(g, 2);
    NetworkConfig cfg;
    cfg.channels = {2};
    cfg.nonlinearity = "identity";
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    Rng rng(1);
    net.init_params(store, rng);
    store.get("n.lift.A") = Matrix::Identity(2, 2);
    store.get("n.lift.b").setZero();
    store.get("n.proj.P") << 2.0, 0.0, 1.0, -1.0;
    store.get("n.proj.b").setZero();
    Matrix x = gaussian(2, 5, rng);
    CHECK((net.forward(store, x) - store.get("n.proj.P") * x).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("zero weights give zero output") {
    auto g = share(FiniteGroup::cyclic(4));
    Representation r = rotation2d_rep(g);
    NetworkConfig cfg;
    cfg.channels = {4, 4};
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    Rng rng(2);
    net.init_params(store, rng);
    for (const auto& name : store.names()) store.get(name).setZero();
    CHECK(net.forward(store, gaussian(2, 3, rng)).isZero());
}

TEST_CASE("equivariance sweep across groups and modes") {
    Rng rng(3);
    for (const char* name : {"C4", "C8", "D4", "D8"}) {
        auto g = share(FiniteGroup::parse(name));
        Representation r = rotation2d_rep(g);
        NetworkConfig cfg;
        cfg.channels = {5, 6};
        EquivariantNetwork net("n", r, r, cfg);
        ParameterStore store;
        net.init_params(store, rng);
        CHECK(equivariance_error(net, store, 100, rng) < 1e-12);

        EquivariantNetwork inv("i", r, cfg);
        inv.init_params(store, rng);
        CHECK(inv.out_dim() == 1);
        CHECK(equivariance_error(inv, store, 100, rng) < 1e-12);
    }
    // Permutation representation in and out.
    auto c3 = share(FiniteGroup::cyclic(3));
    Representation reg = regular_rep(c3);
    EquivariantNetwork net("p", reg, reg, NetworkConfig{});
    ParameterStore store;
    net.init_params(store, rng);
    CHECK(equivariance_error(net, store, 100, rng) < 1e-12);
}

TEST_CASE("perturbing one expanded conv block breaks equivariance") {
    Rng rng(4);
    auto g = share(FiniteGroup::cyclic(4));
    Representation r = rotation2d_rep(g);
    NetworkConfig cfg;
    cfg.channels = {3, 3};
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    net.init_params(store, rng);
    for (const auto& name : store.names())
        if (name.size() > 2 && name.substr(name.size() - 2) == ".b") store.get(name).setZero();
    std::vector<Matrix> maps = net.linear_maps(store);
    Matrix x = gaussian(2, 50, rng);
    CHECK((chain(maps, x) - net.forward(store, x)).cwiseAbs().maxCoeff() < 1e-14);

    maps[1](0, 0) += 0.5;  // one entry of a single W_k copy
    double err = 0.0;
    for (int e = 0; e < 4; ++e)
        err = std::max(err, (chain(maps, r.matrix(e) * x) - r.matrix(e) * chain(maps, x)).cwiseAbs().maxCoeff());
    CHECK(err > 1e-3);
}

TEST_CASE("spectral norm estimates") {
    Vector u;
    Matrix d = Matrix::Zero(2, 2);
    d(0, 0) = 3.0;
    d(1, 1) = 1.0;
    CHECK(spectral_norm(d, u, 100) == doctest::Approx(3.0).epsilon(1e-12));
    u = Vector();
    CHECK(spectral_norm(Matrix::Identity(3, 3), u, 10) == doctest::Approx(1.0).epsilon(1e-12));
    u = Vector();
    CHECK(spectral_norm(Matrix::Zero(3, 3), u, 10) == 0.0);

    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
        Matrix w = gaussian(5, 5, rng);
        const double oracle = Eigen::JacobiSVD<Matrix>(w).singularValues()(0);
        u = Vector();
        CHECK(std::abs(spectral_norm(w, u, 100) - oracle) / oracle < 1e-6);
    }
}

TEST_CASE("normalize_lipschitz scales without upscaling") {
    auto g = share(FiniteGroup::trivial());
    Representation r = trivial_rep(g, 1);
    NetworkConfig cfg;
    cfg.channels = {1};
    cfg.nonlinearity = "identity";
    cfg.lipschitz = 0.9;
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    Rng rng(6);
    net.init_params(store, rng);
    store.get("n.lift.A")(0, 0) = 2.0;
    store.get("n.proj.P")(0, 0) = 0.5;
    net.normalize_lipschitz(store, 0.9, 50);
    CHECK(store.get("n.lift.A")(0, 0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(store.get("n.proj.P")(0, 0) == 0.5);
}

TEST_CASE("normalization preserves equivariance and certifies Lipschitz") {
    Rng rng(7);
    auto g = share(FiniteGroup::cyclic(8));
    Representation r = rotation2d_rep(g);
    NetworkConfig cfg;
    cfg.channels = {6, 6};
    cfg.nonlinearity = "lipswish";
    cfg.lipschitz = 0.9;
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    net.init_params(store, rng);
    Rng probe(8);
    const double before = equivariance_error(net, store, 100, probe);
    net.normalize_lipschitz(store, 0.9, 100);
    Rng probe2(8);
    const double after = equivariance_error(net, store, 100, probe2);
    CHECK(std::abs(after - before) <= 1e-13);

    for (const Matrix& m : net.linear_maps(store))
        CHECK(Eigen::JacobiSVD<Matrix>(m).singularValues()(0) <= 0.9 + 1e-6);
    const double bound = std::pow(0.9, net.linear_map_count());
    double worst = 0.0;
    for (int p = 0; p < 10000; ++p) {
        Matrix a = gaussian(2, 1, rng), b = gaussian(2, 1, rng);
        worst = std::max(worst, (net.forward(store, a) - net.forward(store, b)).norm() / (a - b).norm());
    }
    CHECK(worst <= bound + 1e-6);
}

TEST_CASE("dimension mismatch is rejected") {
    auto g = share(FiniteGroup::cyclic(4));
    Representation r = rotation2d_rep(g);
    EquivariantNetwork net("n", r, r, NetworkConfig{});
    ParameterStore store;
    Rng rng(9);
    net.init_params(store, rng);
    CHECK_THROWS(net.forward(store, Matrix::Zero(3, 1)));
}

TEST_CASE("network jacobian matches finite differences") {
    Rng rng(10);
    auto g = share(FiniteGroup::dihedral(4));
    Representation r = rotation2d_rep(g);
    NetworkConfig cfg;
    cfg.channels = {4, 4};
    EquivariantNetwork net("n", r, r, cfg);
    ParameterStore store;
    net.init_params(store, rng);
    Vector x = gaussian(2, 1, rng).col(0);
    Matrix j = net.jacobian(store, x);
    const double h = 1e-6;
    for (int c = 0; c < 2; ++c) {
        Vector xp = x, xm = x;
        xp(c) += h;
        xm(c) -= h;
        Vector fd = (net.forward(store, xp) - net.forward(store, xm)) / (2 * h);
        CHECK((fd - j.col(c)).cwiseAbs().maxCoeff() < 1e-8);
    }
}
