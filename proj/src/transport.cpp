#include "equiflow/transport.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace equiflow {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_to_pi(double a) {
    a = std::fmod(a, kTwoPi);
    if (a > std::numbers::pi) a -= kTwoPi;
    if (a <= -std::numbers::pi) a += kTwoPi;
    return a;
}

int shift_of(int n, int k) {
    if (k < 1) throw TransportError("group order must be positive");
    if (n % k != 0) throw TransportError("grid size must be divisible by the group order");
    return n / k;
}

double shift_invariance(const Vector& f, int k) {
    const int n = static_cast<int>(f.size());
    const int s = shift_of(n, k);
    double err = 0.0;
    for (int i = 0; i < n; ++i) err = std::max(err, std::abs(f((i + s) % n) - f(i)));
    return err;
}

}  // namespace

Vector circle_grid(int n) {
    if (n < 4) throw TransportError("circle grid needs at least 4 points");
    Vector g(n);
    for (int i = 0; i < n; ++i) g(i) = kTwoPi * i / n;
    return g;
}

PeriodicCubicSpline::PeriodicCubicSpline(Vector values) : y_(std::move(values)) {
    const Eigen::Index n = y_.size();
    if (n < 4) throw TransportError("periodic spline needs at least 4 knots");
    h_ = kTwoPi / static_cast<double>(n);

    // Cyclic system M_{i-1} + 4 M_i + M_{i+1} = 6 (y_{i+1} - 2 y_i + y_{i-1}) / h^2.
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(3 * n));
    Vector rhs(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index prev = (i + n - 1) % n, next = (i + 1) % n;
        entries.emplace_back(i, i, 4.0);
        entries.emplace_back(i, prev, 1.0);
        entries.emplace_back(i, next, 1.0);
        rhs(i) = 6.0 * (y_(next) - 2.0 * y_(i) + y_(prev)) / (h_ * h_);
    }
    Eigen::SparseMatrix<double> a(n, n);
    a.setFromTriplets(entries.begin(), entries.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
    if (solver.info() != Eigen::Success) throw TransportError("spline system factorization failed");
    m_ = solver.solve(rhs);
}

double PeriodicCubicSpline::operator()(double theta) const {
    const Eigen::Index n = y_.size();
    double u = std::fmod(theta, kTwoPi);
    if (u < 0.0) u += kTwoPi;
    double pos = u / h_;
    auto i = static_cast<Eigen::Index>(std::floor(pos));
    double t = pos - static_cast<double>(i);
    i %= n;
    const Eigen::Index j = (i + 1) % n;
    const double s = 1.0 - t;
    return s * y_(i) + t * y_(j) + h_ * h_ / 6.0 * ((s * s * s - s) * m_(i) + (t * t * t - t) * m_(j));
}

Vector PeriodicCubicSpline::operator()(const Vector& theta) const {
    Vector out(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) out(i) = (*this)(theta(i));
    return out;
}

MoserProblem cosine_moser_problem(int n, int k, double amplitude, int rk4_steps) {
    const Vector grid = circle_grid(n);
    MoserProblem p;
    p.k = k;
    p.rk4_steps = rk4_steps;
    p.mu = Vector::Constant(n, 1.0 / kTwoPi);
    p.nu = ((k * grid).array().cos() * amplitude + 1.0) / kTwoPi;
    return p;
}

double verify_pushforward(const Vector& mu, const Vector& nu, const Vector& phi, const Vector& grid) {
    const Eigen::Index n = grid.size();
    if (mu.size() != n || nu.size() != n || phi.size() != n) throw TransportError("grid size mismatch");
    const double h = kTwoPi / static_cast<double>(n);
    const PeriodicCubicSpline nu_s(nu);
    double err = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double ahead = i + 1 < n ? phi(i + 1) : phi(0) + kTwoPi;
        const double behind = i > 0 ? phi(i - 1) : phi(n - 1) - kTwoPi;
        const double dphi = (ahead - behind) / (2.0 * h);
        err += std::abs(nu_s(phi(i)) * dphi - mu(i)) * h;
    }
    return err;
}

double moser_equivariance_error(const Vector& phi, int k) {
    const int n = static_cast<int>(phi.size());
    const int s = shift_of(n, k);
    const double step = kTwoPi / k;
    double err = 0.0;
    for (int i = 0; i < n; ++i) {
        // phi is unwrapped, so the shifted index past the end wraps by a full turn.
        const double shifted = i + s < n ? phi(i + s) : phi(i + s - n) + kTwoPi;
        err = std::max(err, std::abs(wrap_to_pi(shifted - phi(i) - step)));
    }
    return err;
}

MoserSolution moser_transport(const MoserProblem& problem) {
    const Eigen::Index n = problem.mu.size();
    if (problem.nu.size() != n) throw TransportError("mu and nu must share the grid");
    if (problem.rk4_steps < 1) throw TransportError("RK4 needs at least one step");
    const Vector grid = circle_grid(static_cast<int>(n));
    if (problem.mu.minCoeff() <= 0.0 || problem.nu.minCoeff() <= 0.0)
        throw TransportError("densities must be strictly positive");
    const double h = kTwoPi / static_cast<double>(n);
    // Periodic trapezoid rule.
    const double mass_mu = problem.mu.sum() * h, mass_nu = problem.nu.sum() * h;
    if (std::abs(mass_mu - mass_nu) > 1e-10)
        throw TransportError("mass mismatch: " + std::to_string(mass_mu) + " vs " + std::to_string(mass_nu));
    if (shift_invariance(problem.mu, problem.k) > 1e-10 || shift_invariance(problem.nu, problem.k) > 1e-10)
        throw TransportError("densities are not invariant under the group");

    MoserSolution sol;
    sol.grid = grid;

    // eta' = nu - mu, zero-mean gauge, then averaged over the group.
    const Vector f = problem.nu - problem.mu;
    Vector eta(n);
    eta(0) = 0.0;
    for (Eigen::Index i = 1; i < n; ++i) eta(i) = eta(i - 1) + 0.5 * h * (f(i - 1) + f(i));
    eta.array() -= eta.mean();
    const int s = shift_of(static_cast<int>(n), problem.k);
    Vector avg = Vector::Zero(n);
    for (int j = 0; j < problem.k; ++j)
        for (Eigen::Index i = 0; i < n; ++i) avg(i) += eta((i + j * s) % n);
    sol.eta = avg / problem.k;

    const PeriodicCubicSpline eta_s(sol.eta), mu_s(problem.mu), nu_s(problem.nu);
    auto velocity = [&](double t, const Vector& theta) {
        Vector v(theta.size());
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            const double mt = mu_s(theta(i)) + t * (nu_s(theta(i)) - mu_s(theta(i)));
            v(i) = -eta_s(theta(i)) / mt;
        }
        return v;
    };
    Vector theta = grid;
    const double dt = 1.0 / problem.rk4_steps;
    for (int step = 0; step < problem.rk4_steps; ++step) {
        const double t = step * dt;
        const Vector k1 = velocity(t, theta);
        const Vector k2 = velocity(t + 0.5 * dt, theta + 0.5 * dt * k1);
        const Vector k3 = velocity(t + 0.5 * dt, theta + 0.5 * dt * k2);
        const Vector k4 = velocity(t + dt, theta + dt * k3);
        theta += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    sol.phi = theta;

    for (Eigen::Index i = 1; i < n; ++i)
        if (!(sol.phi(i) > sol.phi(i - 1))) throw TransportError("transport map is not monotone; refine the grid");
    if (!(sol.phi(0) + kTwoPi > sol.phi(n - 1))) throw TransportError("transport map is not monotone; refine the grid");

    auto& d = sol.diagnostics;
    d.pushforward_l1 = verify_pushforward(problem.mu, problem.nu, sol.phi, grid);
    d.equivariance_error = moser_equivariance_error(sol.phi, problem.k);
    d.eta_invariance = shift_invariance(sol.eta, problem.k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double deriv = (sol.eta((i + 1) % n) - sol.eta((i + n - 1) % n)) / (2.0 * h);
        d.eta_residual = std::max(d.eta_residual, std::abs(deriv - f(i)));
    }
    return sol;
}

// ---------------------------------------------------------------- padded universal flow

Representation extend_action(const Representation& rep) {
    const int n = rep.dim();
    std::vector<Matrix> mats;
    mats.reserve(rep.matrices().size());
    for (const Matrix& r : rep.matrices()) {
        Matrix m = Matrix::Identity(2 * n, 2 * n);
        m.topLeftCorner(n, n) = r;
        mats.push_back(std::move(m));
    }
    return Representation(rep.group_ptr(), std::move(mats), RepFlavor::padded);
}

Vector UniversalFlowPlan::delta(const Vector& x) const { return (phi(x) - x) / static_cast<double>(T); }

Vector UniversalFlowPlan::apply(const Vector& xy) const {
    if (xy.size() != 2 * n) throw TransportError("padded input must have dimension 2n");
    Vector v = xy;
    for (const auto& b : blocks) v += b.residual(v);
    return v;
}

std::vector<Vector> UniversalFlowPlan::trace(const Vector& xy) const {
    if (xy.size() != 2 * n) throw TransportError("padded input must have dimension 2n");
    std::vector<Vector> out{xy};
    Vector v = xy;
    for (const auto& b : blocks) {
        v += b.residual(v);
        out.push_back(v);
    }
    return out;
}

double empirical_lipschitz(const VectorMap& residual, int dim, int pairs, Rng& rng, double scale) {
    std::normal_distribution<double> normal(0.0, scale);
    double best = 0.0;
    Vector u(dim), v(dim);
    for (int p = 0; p < pairs; ++p) {
        for (int i = 0; i < dim; ++i) u(i) = normal(rng);
        for (int i = 0; i < dim; ++i) v(i) = normal(rng);
        const double gap = (u - v).norm();
        if (gap == 0.0) continue;
        best = std::max(best, (residual(u) - residual(v)).norm() / gap);
    }
    return best;
}

UniversalFlowPlan build_universal_flow(VectorMap phi, VectorMap phi_inverse, double lipschitz,
                                       double inverse_lipschitz, const Representation& rep,
                                       std::uint64_t probe_seed) {
    if (!(lipschitz > 0.0) || !std::isfinite(lipschitz) || !(inverse_lipschitz > 0.0) ||
        !std::isfinite(inverse_lipschitz))
        throw TransportError("Lipschitz constants must be positive and finite");
    const int n = rep.dim();
    const int T = static_cast<int>(std::floor(lipschitz)) + 2;
    const double delta_bound = (lipschitz + 1.0) / T;
    const int m = static_cast<int>(std::floor(delta_bound * inverse_lipschitz)) + 1;

    UniversalFlowPlan plan{.n = n,
                           .lipschitz = lipschitz,
                           .inverse_lipschitz = inverse_lipschitz,
                           .T = T,
                           .corrections = m,
                           .phi = std::move(phi),
                           .phi_inverse = std::move(phi_inverse),
                           .rep = rep,
                           .extended = extend_action(rep),
                           .blocks = {}};

    {
        Rng rng(probe_seed);
        const VectorMap delta = [&plan](const Vector& x) { return plan.delta(x); };
        if (!(empirical_lipschitz(delta, n, 2000, rng) < 1.0))
            throw TransportError("delta is not a contraction; the declared Lipschitz constant is too small");
    }

    // Blocks capture copies of the maps so the plan stays self-contained when moved.
    const VectorMap f = plan.phi, finv = plan.phi_inverse;
    auto delta_of = [f, T](const Vector& x) -> Vector { return (f(x) - x) / static_cast<double>(T); };

    plan.blocks.push_back({"pad", [n, delta_of](const Vector& v) {
                               Vector r = Vector::Zero(2 * n);
                               r.tail(n) = delta_of(v.head(n));
                               return r;
                           },
                           delta_bound});
    const double transfer = static_cast<double>(T) / (T + 1);
    for (int i = 1; i <= T + 1; ++i)
        plan.blocks.push_back({"transfer" + std::to_string(i), [n, transfer](const Vector& v) {
                                   Vector r = Vector::Zero(2 * n);
                                   r.head(n) = transfer * v.tail(n);
                                   return r;
                               },
                               transfer});
    for (int j = 1; j <= m; ++j)
        plan.blocks.push_back({"correction" + std::to_string(j), [n, m, delta_of, finv](const Vector& v) {
                                   Vector r = Vector::Zero(2 * n);
                                   r.tail(n) = -delta_of(finv(v.head(n))) / static_cast<double>(m);
                                   return r;
                               },
                               delta_bound * inverse_lipschitz / m});
    return plan;
}

double universal_target_error(const UniversalFlowPlan& plan, int samples, Rng& rng, double scale) {
    std::normal_distribution<double> normal(0.0, scale);
    double err = 0.0;
    Vector xy = Vector::Zero(2 * plan.n);
    for (int s = 0; s < samples; ++s) {
        for (int i = 0; i < plan.n; ++i) xy(i) = normal(rng);
        const Vector out = plan.apply(xy);
        err = std::max(err, (out.head(plan.n) - plan.phi(xy.head(plan.n))).cwiseAbs().maxCoeff());
        err = std::max(err, out.tail(plan.n).cwiseAbs().maxCoeff());
    }
    return err;
}

double universal_equivariance_error(const UniversalFlowPlan& plan, int samples, Rng& rng, double scale) {
    std::normal_distribution<double> normal(0.0, scale);
    double err = 0.0;
    Vector xy = Vector::Zero(2 * plan.n);
    for (int s = 0; s < samples; ++s) {
        for (int i = 0; i < plan.n; ++i) xy(i) = normal(rng);
        const Vector base = plan.apply(xy);
        for (const Matrix& g : plan.extended.matrices())
            err = std::max(err, (plan.apply(g * xy) - g * base).cwiseAbs().maxCoeff());
    }
    return err;
}

}  // namespace equiflow
