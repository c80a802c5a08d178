#pragma once

#include "equiflow/diff.hpp"
#include "equiflow/group.hpp"

#include <optional>
#include <string>
#include <vector>

namespace equiflow {

enum class ProjectionMode { equivariant, invariant };

struct NetworkConfig {
    /// channels[0] is the lifting width, channels[1..] the group-convolution widths.
    std::vector<int> channels{8};
    std::string nonlinearity = "tanh";
    /// Target Lipschitz scale c in (0, 1) applied to every linear map.
    std::optional<double> lipschitz;
    ProjectionMode mode = ProjectionMode::equivariant;
    /// Output width in invariant mode.
    int invariant_out_dim = 1;
    bool output_bias = true;
};

/// Persistent power-iteration vectors, one per linear map of a network.
struct SpectralNormState {
    std::vector<Vector> u;
    double target = 0.9;
    int iterations_per_step = 5;
};

/// Krylov dimension of the Rayleigh-Ritz refinement that follows the power steps.
inline constexpr int kRitzDimension = 8;

/// Power-iteration estimate of the largest singular value, refined by Rayleigh-Ritz on
/// a small Krylov space.  Never exceeds the true value up to roundoff.  `u` is the
/// warm-start left vector and is updated in place.  Returns 0 for the zero matrix.
double spectral_norm(const Matrix& w, Vector& u, int iterations);

/**
 * Lift -> group convolutions -> projection over a finite group.
 *
 *   lift:       F[g]  = s(A R_in(g)^T x + b)
 *   group conv: F'[g] = s(sum_k W_k F[g k] + c)
 *   projection: y     = (1/|G|) sum_g R_out(g) P F[g] + avg_g R_out(g) b_out
 *
 * Each stage is realized by an explicit linear expansion of its weights, so the
 * equivariance law holds for every parameter value.  Feature tables are stored with
 * group element g occupying rows [g*m, (g+1)*m).
 */
class EquivariantNetwork {
public:
    /// Equivariant mode: `out` is the output representation.
    EquivariantNetwork(std::string prefix, Representation in, Representation out, NetworkConfig config);
    /// Invariant mode: output of width config.invariant_out_dim, unchanged by the group.
    EquivariantNetwork(std::string prefix, Representation in, NetworkConfig config);

    const std::string& prefix() const { return prefix_; }
    const NetworkConfig& config() const { return config_; }
    const Representation& rep_in() const { return in_; }
    const std::optional<Representation>& rep_out() const { return out_; }
    int in_dim() const { return in_.dim(); }
    int out_dim() const;
    int linear_map_count() const { return static_cast<int>(ops_.size()); }

    void init_params(ParameterStore& store, Rng& rng);
    std::size_t parameter_count() const;
    std::vector<std::string> parameter_names() const;

    template <class Ctx>
    struct Trace {
        typename Ctx::Value y;
        std::vector<typename Ctx::Value> maps;    // expanded linear maps
        std::vector<typename Ctx::Value> slopes;  // s'(pre-activation) per hidden layer
    };

    template <class Ctx>
    Trace<Ctx> run(Ctx& ctx, const typename Ctx::Value& x, bool keep_slopes) const;

    /// Jacobian-vector product at the traced point; tangent is in_dim x batch.
    template <class Ctx>
    typename Ctx::Value jvp(Ctx& ctx, const Trace<Ctx>& trace, const typename Ctx::Value& tangent) const;

    Matrix forward(const ParameterStore& store, const Matrix& x) const;
    /// Dense out x in Jacobian at a single input.
    Matrix jacobian(const ParameterStore& store, const Vector& x) const;

    /// The expanded linear maps (lift, convs, projection) at the current parameters.
    std::vector<Matrix> linear_maps(const ParameterStore& store) const;
    /// Product of freshly estimated spectral norms: a Lipschitz upper bound for 1-Lipschitz nonlinearities.
    double lipschitz_bound(const ParameterStore& store, int iterations = 100) const;

    SpectralNormState& spectral_state() { return spectral_; }
    const SpectralNormState& spectral_state() const { return spectral_; }
    /// Rescales every linear map W to (c / max(sigma, c)) W using the persistent state.
    void normalize_lipschitz(ParameterStore& store, double c, int iterations);
    void normalize_lipschitz(ParameterStore& store) {
        normalize_lipschitz(store, spectral_.target, spectral_.iterations_per_step);
    }
    /// Chain rule through W -> c W / max(c, sigma(W)) at a normalized W: on every map whose
    /// constraint is active the gradient loses its component along W, so the optimizer
    /// moves tangentially instead of pushing against the projection.
    void normalized_gradient(const ParameterStore& store, ParameterStore& grads) const;

private:
    struct Stage {
        std::string weight;           // parameter name
        std::string bias;             // empty when absent
        ad::LinearOp expand;          // weight -> dense linear map
        std::optional<ad::LinearOp> bias_expand;
        bool hidden = true;           // followed by the nonlinearity
    };

    void build();

    std::string prefix_;
    Representation in_;
    std::optional<Representation> out_;
    NetworkConfig config_;
    std::vector<Stage> ops_;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_;  // weight shapes
    std::vector<int> fan_in_;
    Eigen::Index out_bias_rows_ = 0;
    SpectralNormState spectral_;
    std::string slope_name_;
};

/// max over g and samples of |net(R_in(g) x) - R_out(g) net(x)|_inf (R_out = I in invariant mode).
double equivariance_error(const EquivariantNetwork& net, const ParameterStore& store, int n_samples, Rng& rng);

template <class Ctx>
EquivariantNetwork::Trace<Ctx> EquivariantNetwork::run(Ctx& ctx, const typename Ctx::Value& x,
                                                       bool keep_slopes) const {
    Trace<Ctx> trace;
    typename Ctx::Value h = x;
    for (const Stage& stage : ops_) {
        auto w = ctx.linear(ctx.param(stage.weight), stage.expand);
        trace.maps.push_back(w);
        auto a = ctx.matmul(w, h);
        if (!stage.bias.empty()) a = ctx.add_col(a, ctx.linear(ctx.param(stage.bias), *stage.bias_expand));
        if (stage.hidden) {
            if (keep_slopes) trace.slopes.push_back(ctx.unary(slope_name_, a));
            h = ctx.unary(config_.nonlinearity, a);
        } else {
            h = a;
        }
    }
    trace.y = h;
    return trace;
}

template <class Ctx>
typename Ctx::Value EquivariantNetwork::jvp(Ctx& ctx, const Trace<Ctx>& trace,
                                           const typename Ctx::Value& tangent) const {
    typename Ctx::Value t = tangent;
    std::size_t hidden = 0;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        t = ctx.matmul(trace.maps[i], t);
        if (ops_[i].hidden) t = ctx.hadamard(trace.slopes[hidden++], t);
    }
    return t;
}

}  // namespace equiflow
