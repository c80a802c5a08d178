#pragma once

#include "equiflow/diff.hpp"
#include "equiflow/group.hpp"
#include "equiflow/nets.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace equiflow {

class FlowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fixed-point inversion did not reach tolerance; carries the last step size.
class NonConvergence : public FlowError {
public:
    NonConvergence(const std::string& what, double last_residual)
        : FlowError(what), last_residual_(last_residual) {}
    double last_residual() const { return last_residual_; }

private:
    double last_residual_;
};

/// A Lipschitz certificate required by a log-det estimator failed.
class CertificateError : public FlowError {
public:
    using FlowError::FlowError;
};

/// Batched layer result: y is dim x batch, logdet is 1 x batch.
struct LayerOutput {
    Matrix y;
    Matrix logdet;
};

using TapePair = std::pair<ad::Var, ad::Var>;

class FlowLayer {
public:
    virtual ~FlowLayer() = default;

    virtual std::string kind() const = 0;
    virtual int dim() const = 0;
    virtual const Representation& rep() const = 0;
    virtual void init_params(ParameterStore& store, Rng& rng) = 0;

    virtual LayerOutput forward(const ParameterStore& store, const Matrix& x) const = 0;
    /// Inverse map; logdet is that of the inverse (the negated forward log-det at the preimage).
    virtual LayerOutput inverse(const ParameterStore& store, const Matrix& y) const = 0;

    virtual TapePair forward_tape(ad::TapeContext& ctx, ad::Var x) const = 0;
    virtual TapePair inverse_tape(ad::TapeContext& ctx, ad::Var y) const = 0;

    /// Restores structural constraints after a parameter update (Lipschitz scale, commutant).
    virtual void project_params(ParameterStore&) {}
    /// Adjusts a loss gradient for the layer's parameter constraint (see project_params).
    virtual void constrain_gradient(const ParameterStore&, ParameterStore&) const {}

    virtual std::vector<const EquivariantNetwork*> networks() const { return {}; }
    virtual std::vector<EquivariantNetwork*> mutable_networks() { return {}; }

protected:
    void check_rows(Eigen::Index rows) const;
};

/// Affine coupling over two d-blocks with the diagonal permutation representation.
class GCouplingLayer final : public FlowLayer {
public:
    /// parity false: first block conditions, second is transformed; true: the reverse.
    GCouplingLayer(std::string prefix, const Representation& base, NetworkConfig config, bool parity);

    std::string kind() const override { return "coupling"; }
    int dim() const override { return rep_.dim(); }
    const Representation& rep() const override { return rep_; }
    bool parity() const { return parity_; }
    const std::string& prefix() const { return prefix_; }
    const EquivariantNetwork& s_net() const { return s_net_; }
    const EquivariantNetwork& t_net() const { return t_net_; }

    void init_params(ParameterStore& store, Rng& rng) override;
    LayerOutput forward(const ParameterStore& store, const Matrix& x) const override;
    LayerOutput inverse(const ParameterStore& store, const Matrix& y) const override;
    TapePair forward_tape(ad::TapeContext& ctx, ad::Var x) const override;
    TapePair inverse_tape(ad::TapeContext& ctx, ad::Var y) const override;
    std::vector<const EquivariantNetwork*> networks() const override { return {&s_net_, &t_net_}; }
    std::vector<EquivariantNetwork*> mutable_networks() override { return {&s_net_, &t_net_}; }

    template <class Ctx>
    std::pair<typename Ctx::Value, typename Ctx::Value> apply(Ctx& ctx, const typename Ctx::Value& in,
                                                              bool invert) const;

private:
    std::string prefix_;
    Representation rep_;
    EquivariantNetwork s_net_, t_net_;
    bool parity_;
    int half_;
};

struct LogDetConfig {
    enum class Kind { exact, series, hutchinson };
    Kind kind = Kind::exact;
    int terms = 30;   // series truncation N
    int probes = 1;   // Hutchinson probes per sample
    std::uint64_t seed = 0;
};

std::string to_string(LogDetConfig::Kind kind);

struct FixedPointConfig {
    int max_iters = 500;
    double tol = 1e-12;
};

/// Largest dimension for which the dense Jacobian log-det path is allowed.
inline constexpr int kExactLogDetCap = 16;

/// x + h(x) with an equivariant, spectrally normalized h.
class GResidualLayer final : public FlowLayer {
public:
    GResidualLayer(std::string prefix, const Representation& rep, NetworkConfig config,
                   LogDetConfig logdet = {}, FixedPointConfig fixed_point = {});

    std::string kind() const override { return "residual"; }
    int dim() const override { return rep_.dim(); }
    const Representation& rep() const override { return rep_; }
    const std::string& prefix() const { return prefix_; }
    const EquivariantNetwork& h_net() const { return h_net_; }
    EquivariantNetwork& h_net() { return h_net_; }
    const LogDetConfig& logdet_config() const { return logdet_; }
    void set_logdet_config(LogDetConfig cfg) { logdet_ = cfg; }
    const FixedPointConfig& fixed_point() const { return fixed_point_; }
    double lipschitz_scale() const { return *h_net_.config().lipschitz; }
    /// Varies the Hutchinson probes between training steps.
    void set_probe_step(std::uint64_t step) { probe_step_ = step; }

    void init_params(ParameterStore& store, Rng& rng) override;
    LayerOutput forward(const ParameterStore& store, const Matrix& x) const override;
    LayerOutput inverse(const ParameterStore& store, const Matrix& y) const override;
    TapePair forward_tape(ad::TapeContext& ctx, ad::Var x) const override;
    /// Not differentiable on the tape: throws UnsupportedPrimitive.
    TapePair inverse_tape(ad::TapeContext& ctx, ad::Var y) const override;
    void project_params(ParameterStore& store) override;
    void constrain_gradient(const ParameterStore& store, ParameterStore& grads) const override {
        h_net_.normalized_gradient(store, grads);
    }
    std::vector<const EquivariantNetwork*> networks() const override { return {&h_net_}; }
    std::vector<EquivariantNetwork*> mutable_networks() override { return {&h_net_}; }

    /// Throws CertificateError unless the product of spectral norms is below one.
    double certify(const ParameterStore& store) const;

    /// Fixed-point iteration count used by the most recent inverse() call.
    int last_inverse_iterations() const { return last_iters_; }

    template <class Ctx>
    std::pair<typename Ctx::Value, typename Ctx::Value> apply(Ctx& ctx, const typename Ctx::Value& x,
                                                              const LogDetConfig& cfg) const;

private:
    Matrix probe_matrix(Eigen::Index batch, int probe) const;

    std::string prefix_;
    Representation rep_;
    EquivariantNetwork h_net_;
    LogDetConfig logdet_;
    FixedPointConfig fixed_point_;
    std::uint64_t probe_step_ = 0;
    mutable int last_iters_ = 0;
};

/// Autoregressive affine transform over k equal permutation blocks.
class GIAFLayer final : public FlowLayer {
public:
    GIAFLayer(std::string prefix, const Representation& base, int k, NetworkConfig config);

    std::string kind() const override { return "iaf"; }
    int dim() const override { return rep_.dim(); }
    const Representation& rep() const override { return rep_; }
    int blocks() const { return k_; }
    const std::string& prefix() const { return prefix_; }
    /// Conditioner networks for block i >= 1 (zero-based), s then t.
    const EquivariantNetwork& s_net(int i) const { return s_nets_.at(static_cast<std::size_t>(i - 1)); }
    const EquivariantNetwork& t_net(int i) const { return t_nets_.at(static_cast<std::size_t>(i - 1)); }
    std::string first_block_scale() const { return prefix_ + ".block0.s"; }
    std::string first_block_shift() const { return prefix_ + ".block0.t"; }

    void init_params(ParameterStore& store, Rng& rng) override;
    LayerOutput forward(const ParameterStore& store, const Matrix& x) const override;
    LayerOutput inverse(const ParameterStore& store, const Matrix& y) const override;
    TapePair forward_tape(ad::TapeContext& ctx, ad::Var x) const override;
    TapePair inverse_tape(ad::TapeContext& ctx, ad::Var y) const override;
    std::vector<const EquivariantNetwork*> networks() const override;
    std::vector<EquivariantNetwork*> mutable_networks() override;

    template <class Ctx>
    std::pair<typename Ctx::Value, typename Ctx::Value> apply(Ctx& ctx, const typename Ctx::Value& in,
                                                              bool invert) const;

private:
    std::string prefix_;
    Representation base_;
    Representation rep_;
    int k_;
    std::vector<EquivariantNetwork> s_nets_, t_nets_;
    ad::LinearOp fixed_op_;
};

/// y = exp(K) x with K in the commutant of the representation.
class MatrixExpLayer final : public FlowLayer {
public:
    MatrixExpLayer(std::string prefix, const Representation& rep, double init_scale = 0.1);

    std::string kind() const override { return "matexp"; }
    int dim() const override { return rep_.dim(); }
    const Representation& rep() const override { return rep_; }
    const std::string& prefix() const { return prefix_; }
    std::string generator_name() const { return prefix_ + ".K"; }

    void init_params(ParameterStore& store, Rng& rng) override;
    /// Installs an explicit generator; throws FlowError if it does not commute with every R(g).
    void set_generator(ParameterStore& store, const Matrix& k) const;
    double commutation_error(const ParameterStore& store) const;

    LayerOutput forward(const ParameterStore& store, const Matrix& x) const override;
    LayerOutput inverse(const ParameterStore& store, const Matrix& y) const override;
    TapePair forward_tape(ad::TapeContext& ctx, ad::Var x) const override;
    TapePair inverse_tape(ad::TapeContext& ctx, ad::Var y) const override;
    /// Projects K onto the commutant: (1/|G|) sum_g R(g) K R(g)^T.
    void project_params(ParameterStore& store) override;

private:
    std::string prefix_;
    Representation rep_;
    double init_scale_;
};

/// Commutant projection used by MatrixExpLayer.
Matrix commutant_projection(const Representation& rep, const Matrix& k);

// Free-function views of the individual layer operations.
LayerOutput coupling_forward(const GCouplingLayer& layer, const ParameterStore& store, const Matrix& x);
Matrix coupling_inverse(const GCouplingLayer& layer, const ParameterStore& store, const Matrix& y);
LayerOutput residual_forward(const GResidualLayer& layer, const ParameterStore& store, const Matrix& x);
Matrix residual_inverse(const GResidualLayer& layer, const ParameterStore& store, const Matrix& y);
LayerOutput iaf_forward(const GIAFLayer& layer, const ParameterStore& store, const Matrix& x);
LayerOutput matexp_forward(const MatrixExpLayer& layer, const ParameterStore& store, const Matrix& x);

/// log|det(I + J_h(x))| from the dense Jacobian; x is a single point.
double logdet_exact(const GResidualLayer& layer, const ParameterStore& store, const Vector& x);
/// Truncated series sum_{k=1}^{N} (-1)^{k+1} tr(J_h^k) / k with exact traces.
double logdet_series(const GResidualLayer& layer, const ParameterStore& store, const Vector& x, int terms);
/// Geometric tail bound c^{N+1} / ((N+1)(1-c)).
double logdet_series_tail_bound(double c, int terms);

/// (1/probes) sum_p v_p^T (J v_p) over Rademacher probes.
double hutchinson_trace(const std::function<Vector(const Vector&)>& jvp, int n, int probes, Rng& rng);

enum class Orientation { forward, inverted };

/**
 * Ordered layers f_1..f_K mapping base samples to data: x = f_K(...f_1(z)).
 * An inverted entry uses the layer's inverse as its generative map, so density
 * evaluation calls the layer's forward (e.g. the explicit x + h(x) of a residual block).
 */
class FlowComposition {
public:
    FlowComposition(Representation rep, std::uint64_t seed = 0);

    void add(std::shared_ptr<FlowLayer> layer, Orientation orientation = Orientation::forward);
    /// Initializes every layer's parameters from the composition seed.
    void init_params();

    int dim() const { return rep_.dim(); }
    const Representation& rep() const { return rep_; }
    std::size_t size() const { return layers_.size(); }
    const FlowLayer& layer(std::size_t i) const { return *layers_[i].first; }
    FlowLayer& layer(std::size_t i) { return *layers_[i].first; }
    std::shared_ptr<FlowLayer> layer_ptr(std::size_t i) const { return layers_[i].first; }
    Orientation orientation(std::size_t i) const { return layers_[i].second; }
    std::uint64_t seed() const { return seed_; }

    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    void set_params(ParameterStore params) { params_ = std::move(params); }

    /// Generative map z -> x with the accumulated forward log-det.
    LayerOutput push_forward(const Matrix& z) const;
    /// Data -> base map with the accumulated log-det of the inverse.
    LayerOutput pull_back(const Matrix& x) const;
    /// log p(x) per column.
    Matrix log_prob(const Matrix& x) const;
    Matrix sample(int n, Rng& rng) const;

    ad::Var log_prob_tape(ad::TapeContext& ctx, ad::Var x) const;

    /// Applies every layer's constraint projection after a parameter update.
    void project_params();
    void constrain_gradient(ParameterStore& grads) const;

private:
    Representation rep_;
    std::uint64_t seed_;
    std::vector<std::pair<std::shared_ptr<FlowLayer>, Orientation>> layers_;
    ParameterStore params_;
};

/// -(n/2) log(2 pi) - |z|^2 / 2 per column.
Matrix standard_normal_log_prob(const Matrix& z);

double flow_log_prob(const FlowComposition& flow, const Vector& x);
Vector flow_sample(const FlowComposition& flow, Rng& rng);

/// max over g and samples of |f(R(g) x) - R(g) f(x)|_inf for a single layer's forward map.
double layer_equivariance_error(const FlowLayer& layer, const ParameterStore& store, int n_samples, Rng& rng,
                                double input_scale = 1.0);
/// max over g and samples of |log p(R(g) x) - log p(x)|.
double density_invariance_error(const FlowComposition& flow, const Matrix& x);

Matrix standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace equiflow
