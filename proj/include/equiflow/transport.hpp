#pragma once

#include "equiflow/diff.hpp"
#include "equiflow/group.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace equiflow {

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interpolating cubic spline through equally spaced samples of a 2*pi periodic function.
class PeriodicCubicSpline {
public:
    explicit PeriodicCubicSpline(Vector values);

    double operator()(double theta) const;
    Vector operator()(const Vector& theta) const;

private:
    Vector y_;
    Vector m_;  // second derivatives at the knots
    double h_;
};

/// Uniform grid theta_i = 2 pi i / n on [0, 2 pi).
Vector circle_grid(int n);

/// Densities on the circle sampled on a uniform grid, invariant under rotation by 2 pi / k.
struct MoserProblem {
    Vector mu;
    Vector nu;
    int k = 1;
    int rk4_steps = 200;
};

struct MoserDiagnostics {
    double pushforward_l1 = 0.0;
    double equivariance_error = 0.0;
    /// max |eta' - (nu - mu)| with eta' from central differences.
    double eta_residual = 0.0;
    /// max |eta(theta + 2 pi / k) - eta(theta)| on the grid.
    double eta_invariance = 0.0;
};

struct MoserSolution {
    Vector grid;
    Vector eta;
    /// Unwrapped transport map values: phi(theta_i) may leave [0, 2 pi).
    Vector phi;
    MoserDiagnostics diagnostics;
};

/**
 * Moser transport on S^1.  Solves nu = mu + d(eta) for a zero-mean, group-averaged
 * eta, sets v_t = -eta / mu_t with mu_t = mu + t (nu - mu), and integrates
 * d(theta)/dt = v_t(theta) from t = 0 to 1 with RK4.  The time-one map phi satisfies
 * nu(phi) phi' = mu.
 */
MoserSolution moser_transport(const MoserProblem& problem);

/// L1 grid error between nu(phi(theta)) phi'(theta) and mu(theta).  phi' uses central differences.
double verify_pushforward(const Vector& mu, const Vector& nu, const Vector& phi, const Vector& grid);

/// max over the shift by 2 pi / k of |phi(theta + 2 pi / k) - phi(theta) - 2 pi / k| (mod 2 pi).
double moser_equivariance_error(const Vector& phi, int k);

/// Uniform density and (1 + a cos(k theta)) / (2 pi) on an n-point grid.
MoserProblem cosine_moser_problem(int n, int k, double amplitude, int rk4_steps = 200);

using VectorMap = std::function<Vector(const Vector&)>;

/// Extended action g.[x, y] = [R(g) x, y] on the padded space R^{2n}.
Representation extend_action(const Representation& rep);

/// One i-ResNet block [x, y] -> [x, y] + residual([x, y]).
struct UniversalBlock {
    std::string name;
    VectorMap residual;
    /// Analytic Lipschitz bound of the residual part.
    double lipschitz_bound = 0.0;
};

/**
 * Composition of i-ResNet blocks on R^{2n} realizing [x, 0] -> [phi(x), 0]:
 *   psi_0:          [x, y] + [0, delta(x)]             delta = (phi - id) / T
 *   psi_1..psi_T+1: [x, y] + [y T / (T + 1), 0]
 *   m corrections:  [x, y] - [0, delta(phi^{-1}(x)) / m]
 */
struct UniversalFlowPlan {
    int n = 0;
    double lipschitz = 1.0;
    double inverse_lipschitz = 1.0;
    int T = 0;
    int corrections = 1;
    VectorMap phi;
    VectorMap phi_inverse;
    Representation rep;       // action on R^n
    Representation extended;  // action on R^{2n}
    std::vector<UniversalBlock> blocks;

    Vector delta(const Vector& x) const;
    Vector apply(const Vector& xy) const;
    /// Input followed by the output of every block.
    std::vector<Vector> trace(const Vector& xy) const;
};

/**
 * Builds the padded universal flow for an L-Lipschitz equivariant phi with an
 * L_inv-Lipschitz inverse.  T = floor(L) + 2.  Throws TransportError when an
 * empirical probe of delta finds a Lipschitz ratio >= 1 (the declared L was wrong).
 */
UniversalFlowPlan build_universal_flow(VectorMap phi, VectorMap phi_inverse, double lipschitz,
                                       double inverse_lipschitz, const Representation& rep,
                                       std::uint64_t probe_seed = 7);

/// max |r(u) - r(v)| / |u - v| over random pairs drawn from N(0, scale^2 I).
double empirical_lipschitz(const VectorMap& residual, int dim, int pairs, Rng& rng, double scale = 2.0);

/// max over samples of |psi([x, 0]) - [phi(x), 0]|_inf for x ~ N(0, scale^2 I).
double universal_target_error(const UniversalFlowPlan& plan, int samples, Rng& rng, double scale = 2.0);

/// max over g and samples of |psi(g.[x, 0]) - g.psi([x, 0])|_inf.
double universal_equivariance_error(const UniversalFlowPlan& plan, int samples, Rng& rng, double scale = 2.0);

}  // namespace equiflow
