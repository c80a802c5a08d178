#include "equiflow/flows.hpp"

#include "equiflow/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace equiflow {

namespace {

Matrix one_hot_rows(Eigen::Index n, Eigen::Index j, Eigen::Index batch) {
    Matrix e = Matrix::Zero(n, batch);
    e.row(j).setOnes();
    return e;
}

ad::LinearOp fixed_subspace_op(const Representation& rep) {
    const Matrix proj = rep.invariant_projector();
    ad::LinearOp op;
    op.name = "fixed_subspace";
    op.out_rows = proj.rows();
    op.out_cols = 1;
    op.apply = [proj](const Matrix& c) -> Matrix { return proj * c; };
    op.adjoint = [proj](const Matrix& g) -> Matrix { return proj.transpose() * g; };
    return op;
}

// Broadcast a 1x1 value across a 1 x batch row.
template <class Ctx>
typename Ctx::Value broadcast_scalar(Ctx& ctx, const typename Ctx::Value& s, Eigen::Index batch) {
    return ctx.matmul(s, ctx.constant(Matrix::Ones(1, batch)));
}

}  // namespace

void FlowLayer::check_rows(Eigen::Index rows) const {
    if (rows != dim()) throw FlowError(kind() + " layer: expected " + std::to_string(dim()) + " rows, got " +
                                       std::to_string(rows));
}

Matrix standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal;
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
}

// ---------------------------------------------------------------- coupling

GCouplingLayer::GCouplingLayer(std::string prefix, const Representation& base, NetworkConfig config, bool parity)
    : prefix_(std::move(prefix)),
      rep_(diagonal_permutation_rep(base, 2)),
      s_net_(prefix_ + ".s", base, base, config),
      t_net_(prefix_ + ".t", base, base, config),
      parity_(parity),
      half_(base.dim()) {}

void GCouplingLayer::init_params(ParameterStore& store, Rng& rng) {
    s_net_.init_params(store, rng);
    t_net_.init_params(store, rng);
}

template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> GCouplingLayer::apply(Ctx& ctx, const typename Ctx::Value& in,
                                                                          bool invert) const {
    const Eigen::Index d = half_;
    auto cond = ctx.rows(in, parity_ ? d : 0, d);
    auto act = ctx.rows(in, parity_ ? 0 : d, d);
    auto s = s_net_.run(ctx, cond, false).y;
    auto t = t_net_.run(ctx, cond, false).y;
    typename Ctx::Value moved, logdet;
    if (!invert) {
        moved = ctx.add(ctx.hadamard(act, ctx.unary("exp", s)), t);
        logdet = ctx.col_sum(s);
    } else {
        moved = ctx.hadamard(ctx.sub(act, t), ctx.unary("exp", ctx.scale(s, -1.0)));
        logdet = ctx.scale(ctx.col_sum(s), -1.0);
    }
    std::vector<typename Ctx::Value> parts = parity_ ? std::vector<typename Ctx::Value>{moved, cond}
                                                     : std::vector<typename Ctx::Value>{cond, moved};
    return {ctx.vstack(parts), logdet};
}

LayerOutput GCouplingLayer::forward(const ParameterStore& store, const Matrix& x) const {
    check_rows(x.rows());
    ad::EagerContext ctx(store);
    auto [y, ld] = apply(ctx, x, false);
    return {std::move(y), std::move(ld)};
}

LayerOutput GCouplingLayer::inverse(const ParameterStore& store, const Matrix& y) const {
    check_rows(y.rows());
    ad::EagerContext ctx(store);
    auto [x, ld] = apply(ctx, y, true);
    return {std::move(x), std::move(ld)};
}

TapePair GCouplingLayer::forward_tape(ad::TapeContext& ctx, ad::Var x) const {
    check_rows(ctx.value(x).rows());
    return apply(ctx, x, false);
}

TapePair GCouplingLayer::inverse_tape(ad::TapeContext& ctx, ad::Var y) const {
    check_rows(ctx.value(y).rows());
    return apply(ctx, y, true);
}

// ---------------------------------------------------------------- residual

std::string to_string(LogDetConfig::Kind kind) {
    switch (kind) {
        case LogDetConfig::Kind::exact: return "exact";
        case LogDetConfig::Kind::series: return "series";
        case LogDetConfig::Kind::hutchinson: return "hutchinson";
    }
    return "unknown";
}

namespace {

NetworkConfig residual_config(NetworkConfig cfg) {
    if (!cfg.lipschitz) cfg.lipschitz = 0.9;
    return cfg;
}

}  // namespace

GResidualLayer::GResidualLayer(std::string prefix, const Representation& rep, NetworkConfig config,
                               LogDetConfig logdet, FixedPointConfig fixed_point)
    : prefix_(std::move(prefix)),
      rep_(rep),
      h_net_(prefix_ + ".h", rep, rep, residual_config(std::move(config))),
      logdet_(logdet),
      fixed_point_(fixed_point) {
    if (logdet_.kind == LogDetConfig::Kind::exact && rep_.dim() > kExactLogDetCap)
        throw FlowError("exact log-det limited to dimension " + std::to_string(kExactLogDetCap));
    if (logdet_.terms < 1 || logdet_.probes < 1) throw FlowError("log-det series needs terms >= 1 and probes >= 1");
    if (fixed_point_.max_iters < 1 || !(fixed_point_.tol > 0.0)) throw FlowError("invalid fixed-point configuration");
}

void GResidualLayer::init_params(ParameterStore& store, Rng& rng) {
    h_net_.init_params(store, rng);
    h_net_.normalize_lipschitz(store, lipschitz_scale(), 100);
}

void GResidualLayer::project_params(ParameterStore& store) { h_net_.normalize_lipschitz(store); }

double GResidualLayer::certify(const ParameterStore& store) const {
    const double bound = h_net_.lipschitz_bound(store, 100);
    if (!(bound < 1.0))
        throw CertificateError("residual block " + prefix_ + ": Lipschitz certificate " + std::to_string(bound) +
                               " is not below 1");
    return bound;
}

Matrix GResidualLayer::probe_matrix(Eigen::Index batch, int probe) const {
    Rng rng(logdet_.seed * 0x9E3779B97F4A7C15ULL + probe_step_ * 1000003ULL + static_cast<std::uint64_t>(probe));
    std::bernoulli_distribution coin(0.5);
    Matrix v(dim(), batch);
    for (Eigen::Index j = 0; j < batch; ++j)
        for (Eigen::Index i = 0; i < v.rows(); ++i) v(i, j) = coin(rng) ? 1.0 : -1.0;
    return v;
}

template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> GResidualLayer::apply(Ctx& ctx, const typename Ctx::Value& x,
                                                                          const LogDetConfig& cfg) const {
    const Eigen::Index n = dim();
    const Eigen::Index batch = ctx.value(x).cols();
    auto trace = h_net_.run(ctx, x, true);
    auto y = ctx.add(x, trace.y);
    typename Ctx::Value logdet;
    switch (cfg.kind) {
        case LogDetConfig::Kind::exact: {
            std::vector<typename Ctx::Value> cols;
            for (Eigen::Index j = 0; j < n; ++j) {
                auto e = ctx.constant(one_hot_rows(n, j, batch));
                cols.push_back(ctx.add(h_net_.jvp(ctx, trace, e), e));
            }
            logdet = ctx.logabsdet(std::span<const typename Ctx::Value>(cols));
            break;
        }
        case LogDetConfig::Kind::series: {
            logdet = ctx.constant(Matrix::Zero(1, batch));
            for (Eigen::Index j = 0; j < n; ++j) {
                auto w = ctx.constant(one_hot_rows(n, j, batch));
                for (int k = 1; k <= cfg.terms; ++k) {
                    w = h_net_.jvp(ctx, trace, w);
                    const double coef = (k % 2 == 1 ? 1.0 : -1.0) / k;
                    logdet = ctx.add(logdet, ctx.scale(ctx.rows(w, j, 1), coef));
                }
            }
            break;
        }
        case LogDetConfig::Kind::hutchinson: {
            logdet = ctx.constant(Matrix::Zero(1, batch));
            for (int p = 0; p < cfg.probes; ++p) {
                auto v = ctx.constant(probe_matrix(batch, p));
                auto w = v;
                for (int k = 1; k <= cfg.terms; ++k) {
                    w = h_net_.jvp(ctx, trace, w);
                    const double coef = (k % 2 == 1 ? 1.0 : -1.0) / (k * static_cast<double>(cfg.probes));
                    logdet = ctx.add(logdet, ctx.scale(ctx.col_sum(ctx.hadamard(v, w)), coef));
                }
            }
            break;
        }
    }
    return {y, logdet};
}

LayerOutput GResidualLayer::forward(const ParameterStore& store, const Matrix& x) const {
    check_rows(x.rows());
    if (logdet_.kind != LogDetConfig::Kind::exact) certify(store);
    ad::EagerContext ctx(store);
    auto [y, ld] = apply(ctx, x, logdet_);
    return {std::move(y), std::move(ld)};
}

LayerOutput GResidualLayer::inverse(const ParameterStore& store, const Matrix& y) const {
    check_rows(y.rows());
    Matrix x = y;
    double step = 0.0;
    int it = 0;
    for (; it < fixed_point_.max_iters; ++it) {
        Matrix next = y - h_net_.forward(store, x);
        step = (next - x).cwiseAbs().maxCoeff();
        x = std::move(next);
        if (step < fixed_point_.tol) break;
    }
    last_iters_ = it + 1;
    if (!(step < fixed_point_.tol))
        throw NonConvergence("residual inverse did not converge in " + std::to_string(fixed_point_.max_iters) +
                                 " iterations (last step " + std::to_string(step) + ")",
                             step);
    LayerOutput fwd = forward(store, x);
    return {std::move(x), -fwd.logdet};
}

TapePair GResidualLayer::forward_tape(ad::TapeContext& ctx, ad::Var x) const {
    check_rows(ctx.value(x).rows());
    if (logdet_.kind != LogDetConfig::Kind::exact) certify(ctx.store());
    return apply(ctx, x, logdet_);
}

TapePair GResidualLayer::inverse_tape(ad::TapeContext&, ad::Var) const {
    throw UnsupportedPrimitive("residual fixed-point inverse");
}

double logdet_exact(const GResidualLayer& layer, const ParameterStore& store, const Vector& x) {
    if (layer.dim() > kExactLogDetCap)
        throw FlowError("exact log-det limited to dimension " + std::to_string(kExactLogDetCap));
    const Matrix j = layer.h_net().jacobian(store, x);
    return log_abs_det(Matrix::Identity(j.rows(), j.cols()) + j);
}

double logdet_series(const GResidualLayer& layer, const ParameterStore& store, const Vector& x, int terms) {
    if (terms < 1) throw FlowError("series needs at least one term");
    layer.certify(store);
    const Matrix j = layer.h_net().jacobian(store, x);
    Matrix power = Matrix::Identity(j.rows(), j.cols());
    double acc = 0.0;
    for (int k = 1; k <= terms; ++k) {
        power = power * j;
        acc += (k % 2 == 1 ? 1.0 : -1.0) * power.trace() / k;
    }
    return acc;
}

double logdet_series_tail_bound(double c, int terms) {
    return std::pow(c, terms + 1) / ((terms + 1) * (1.0 - c));
}

double hutchinson_trace(const std::function<Vector(const Vector&)>& jvp, int n, int probes, Rng& rng) {
    if (probes < 1) throw std::invalid_argument("hutchinson_trace needs at least one probe");
    std::bernoulli_distribution coin(0.5);
    double acc = 0.0;
    Vector v(n);
    for (int p = 0; p < probes; ++p) {
        for (int i = 0; i < n; ++i) v(i) = coin(rng) ? 1.0 : -1.0;
        acc += v.dot(jvp(v));
    }
    return acc / probes;
}

// ---------------------------------------------------------------- IAF

GIAFLayer::GIAFLayer(std::string prefix, const Representation& base, int k, NetworkConfig config)
    : prefix_(std::move(prefix)), base_(base), rep_(diagonal_permutation_rep(base, k)), k_(k) {
    for (int i = 1; i < k_; ++i) {
        const Representation cond = i == 1 ? base_ : diagonal_permutation_rep(base_, i);
        s_nets_.emplace_back(prefix_ + ".block" + std::to_string(i) + ".s", cond, base_, config);
        t_nets_.emplace_back(prefix_ + ".block" + std::to_string(i) + ".t", cond, base_, config);
    }
    fixed_op_ = fixed_subspace_op(base_);
}

std::vector<const EquivariantNetwork*> GIAFLayer::networks() const {
    std::vector<const EquivariantNetwork*> out;
    for (std::size_t i = 0; i < s_nets_.size(); ++i) {
        out.push_back(&s_nets_[i]);
        out.push_back(&t_nets_[i]);
    }
    return out;
}

std::vector<EquivariantNetwork*> GIAFLayer::mutable_networks() {
    std::vector<EquivariantNetwork*> out;
    for (std::size_t i = 0; i < s_nets_.size(); ++i) {
        out.push_back(&s_nets_[i]);
        out.push_back(&t_nets_[i]);
    }
    return out;
}

void GIAFLayer::init_params(ParameterStore& store, Rng& rng) {
    const Eigen::Index d = base_.dim();
    store.add(first_block_scale(), Matrix::Zero(d, 1));
    store.add(first_block_shift(), Matrix::Zero(d, 1));
    for (std::size_t i = 0; i < s_nets_.size(); ++i) {
        s_nets_[i].init_params(store, rng);
        t_nets_[i].init_params(store, rng);
    }
}

template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> GIAFLayer::apply(Ctx& ctx, const typename Ctx::Value& in,
                                                                     bool invert) const {
    const Eigen::Index d = base_.dim();
    const Eigen::Index batch = ctx.value(in).cols();
    const double sign = invert ? -1.0 : 1.0;

    // Block 0: equivariant constants (fixed by every permutation R(g)).
    auto cs = ctx.linear(ctx.param(first_block_scale()), fixed_op_);
    auto ct = ctx.linear(ctx.param(first_block_shift()), fixed_op_);
    auto logdet = ctx.scale(broadcast_scalar(ctx, ctx.sum(cs), batch), sign);

    std::vector<typename Ctx::Value> out_blocks;
    std::vector<typename Ctx::Value> x_blocks;  // recovered inputs, for the sequential inverse
    auto b0 = ctx.rows(in, 0, d);
    if (!invert) {
        out_blocks.push_back(ctx.add_col(ctx.mul_col(b0, ctx.unary("exp", cs)), ct));
        x_blocks.push_back(b0);
    } else {
        auto x0 = ctx.mul_col(ctx.add_col(b0, ctx.scale(ct, -1.0)), ctx.unary("exp", ctx.scale(cs, -1.0)));
        out_blocks.push_back(x0);
        x_blocks.push_back(x0);
    }
    for (int i = 1; i < k_; ++i) {
        auto cond = invert ? ctx.vstack(std::span<const typename Ctx::Value>(x_blocks)) : ctx.rows(in, 0, i * d);
        auto s = s_nets_[static_cast<std::size_t>(i - 1)].run(ctx, cond, false).y;
        auto t = t_nets_[static_cast<std::size_t>(i - 1)].run(ctx, cond, false).y;
        auto blk = ctx.rows(in, i * d, d);
        if (!invert) {
            out_blocks.push_back(ctx.add(ctx.hadamard(blk, ctx.unary("exp", s)), t));
            logdet = ctx.add(logdet, ctx.col_sum(s));
        } else {
            auto xi = ctx.hadamard(ctx.sub(blk, t), ctx.unary("exp", ctx.scale(s, -1.0)));
            out_blocks.push_back(xi);
            x_blocks.push_back(xi);
            logdet = ctx.sub(logdet, ctx.col_sum(s));
        }
    }
    return {ctx.vstack(std::span<const typename Ctx::Value>(out_blocks)), logdet};
}

LayerOutput GIAFLayer::forward(const ParameterStore& store, const Matrix& x) const {
    check_rows(x.rows());
    ad::EagerContext ctx(store);
    auto [y, ld] = apply(ctx, x, false);
    return {std::move(y), std::move(ld)};
}

LayerOutput GIAFLayer::inverse(const ParameterStore& store, const Matrix& y) const {
    check_rows(y.rows());
    ad::EagerContext ctx(store);
    auto [x, ld] = apply(ctx, y, true);
    return {std::move(x), std::move(ld)};
}

TapePair GIAFLayer::forward_tape(ad::TapeContext& ctx, ad::Var x) const {
    check_rows(ctx.value(x).rows());
    return apply(ctx, x, false);
}

TapePair GIAFLayer::inverse_tape(ad::TapeContext& ctx, ad::Var y) const {
    check_rows(ctx.value(y).rows());
    return apply(ctx, y, true);
}

// ---------------------------------------------------------------- matrix exponential

namespace {
constexpr double kCommutationTolerance = 1e-12;
}

Matrix commutant_projection(const Representation& rep, const Matrix& k) {
    Matrix acc = Matrix::Zero(k.rows(), k.cols());
    for (const Matrix& r : rep.matrices()) acc.noalias() += r * k * r.transpose();
    return acc / static_cast<double>(rep.group().order());
}

MatrixExpLayer::MatrixExpLayer(std::string prefix, const Representation& rep, double init_scale)
    : prefix_(std::move(prefix)), rep_(rep), init_scale_(init_scale) {}

void MatrixExpLayer::init_params(ParameterStore& store, Rng& rng) {
    const Matrix m = init_scale_ * standard_normal_matrix(dim(), dim(), rng);
    store.add(generator_name(), commutant_projection(rep_, m));
}

void MatrixExpLayer::set_generator(ParameterStore& store, const Matrix& k) const {
    if (k.rows() != dim() || k.cols() != dim()) throw FlowError("generator has wrong shape");
    double err = 0.0;
    for (const Matrix& r : rep_.matrices()) err = std::max(err, (k * r - r * k).cwiseAbs().maxCoeff());
    if (err > kCommutationTolerance)
        throw FlowError("generator does not commute with the representation (error " + std::to_string(err) + ")");
    if (store.contains(generator_name())) store.get(generator_name()) = k;
    else store.add(generator_name(), k);
}

double MatrixExpLayer::commutation_error(const ParameterStore& store) const {
    const Matrix& k = store.get(generator_name());
    double err = 0.0;
    for (const Matrix& r : rep_.matrices()) err = std::max(err, (k * r - r * k).cwiseAbs().maxCoeff());
    return err;
}

LayerOutput MatrixExpLayer::forward(const ParameterStore& store, const Matrix& x) const {
    check_rows(x.rows());
    const Matrix& k = store.get(generator_name());
    return {expm(k) * x, Matrix::Constant(1, x.cols(), k.trace())};
}

LayerOutput MatrixExpLayer::inverse(const ParameterStore& store, const Matrix& y) const {
    check_rows(y.rows());
    const Matrix& k = store.get(generator_name());
    return {expm(-k) * y, Matrix::Constant(1, y.cols(), -k.trace())};
}

TapePair MatrixExpLayer::forward_tape(ad::TapeContext& ctx, ad::Var x) const {
    check_rows(ctx.value(x).rows());
    auto k = ctx.param(generator_name());
    return {ctx.matmul(ctx.expm(k), x), broadcast_scalar(ctx, ctx.trace(k), ctx.value(x).cols())};
}

TapePair MatrixExpLayer::inverse_tape(ad::TapeContext& ctx, ad::Var y) const {
    check_rows(ctx.value(y).rows());
    auto neg = ctx.scale(ctx.param(generator_name()), -1.0);
    return {ctx.matmul(ctx.expm(neg), y), broadcast_scalar(ctx, ctx.trace(neg), ctx.value(y).cols())};
}

void MatrixExpLayer::project_params(ParameterStore& store) {
    Matrix& k = store.get(generator_name());
    k = commutant_projection(rep_, k);
}

// ---------------------------------------------------------------- free-function views

LayerOutput coupling_forward(const GCouplingLayer& layer, const ParameterStore& store, const Matrix& x) {
    return layer.forward(store, x);
}

Matrix coupling_inverse(const GCouplingLayer& layer, const ParameterStore& store, const Matrix& y) {
    return layer.inverse(store, y).y;
}

LayerOutput residual_forward(const GResidualLayer& layer, const ParameterStore& store, const Matrix& x) {
    return layer.forward(store, x);
}

Matrix residual_inverse(const GResidualLayer& layer, const ParameterStore& store, const Matrix& y) {
    return layer.inverse(store, y).y;
}

LayerOutput iaf_forward(const GIAFLayer& layer, const ParameterStore& store, const Matrix& x) {
    return layer.forward(store, x);
}

LayerOutput matexp_forward(const MatrixExpLayer& layer, const ParameterStore& store, const Matrix& x) {
    return layer.forward(store, x);
}

// ---------------------------------------------------------------- composition

Matrix standard_normal_log_prob(const Matrix& z) {
    const double norm_const = -0.5 * static_cast<double>(z.rows()) * std::log(2.0 * std::numbers::pi);
    return (-0.5 * z.colwise().squaredNorm()).array() + norm_const;
}

FlowComposition::FlowComposition(Representation rep, std::uint64_t seed)
    : rep_(std::move(rep)), seed_(seed), params_(seed) {}

void FlowComposition::add(std::shared_ptr<FlowLayer> layer, Orientation orientation) {
    if (!layer) throw FlowError("null layer");
    if (layer->dim() != dim()) throw FlowError("layer dimension does not match the flow");
    const Representation& lr = layer->rep();
    if (!lr.group().same_as(rep_.group())) throw FlowError("layer uses a different group");
    for (int g = 0; g < rep_.group().order(); ++g)
        if ((lr.matrix(g) - rep_.matrix(g)).cwiseAbs().maxCoeff() > 1e-12)
            throw FlowError("layer representation differs from the flow representation");
    layers_.emplace_back(std::move(layer), orientation);
}

void FlowComposition::init_params() {
    params_ = ParameterStore(seed_);
    Rng rng(seed_);
    for (auto& [layer, orientation] : layers_) layer->init_params(params_, rng);
}

LayerOutput FlowComposition::push_forward(const Matrix& z) const {
    if (z.rows() != dim()) throw FlowError("sample dimension mismatch");
    Matrix x = z;
    Matrix acc = Matrix::Zero(1, z.cols());
    for (const auto& [layer, orientation] : layers_) {
        LayerOutput out = orientation == Orientation::forward ? layer->forward(params_, x) : layer->inverse(params_, x);
        x = std::move(out.y);
        acc += out.logdet;
    }
    return {std::move(x), std::move(acc)};
}

LayerOutput FlowComposition::pull_back(const Matrix& x) const {
    if (x.rows() != dim()) throw FlowError("input dimension mismatch");
    Matrix z = x;
    Matrix acc = Matrix::Zero(1, x.cols());
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        const auto& [layer, orientation] = *it;
        LayerOutput out = orientation == Orientation::forward ? layer->inverse(params_, z) : layer->forward(params_, z);
        z = std::move(out.y);
        acc += out.logdet;
    }
    return {std::move(z), std::move(acc)};
}

Matrix FlowComposition::log_prob(const Matrix& x) const {
    LayerOutput back = pull_back(x);
    return standard_normal_log_prob(back.y) + back.logdet;
}

Matrix FlowComposition::sample(int n, Rng& rng) const {
    if (n < 1) throw FlowError("sample count must be positive");
    return push_forward(standard_normal_matrix(dim(), n, rng)).y;
}

ad::Var FlowComposition::log_prob_tape(ad::TapeContext& ctx, ad::Var x) const {
    if (ctx.value(x).rows() != dim()) throw FlowError("input dimension mismatch");
    const Eigen::Index batch = ctx.value(x).cols();
    ad::Var z = x;
    ad::Var acc = ctx.constant(Matrix::Zero(1, batch));
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        const auto& [layer, orientation] = *it;
        auto [next, ld] = orientation == Orientation::forward ? layer->inverse_tape(ctx, z) : layer->forward_tape(ctx, z);
        z = next;
        acc = ctx.add(acc, ld);
    }
    const double norm_const = -0.5 * static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi);
    ad::Var base = ctx.add_const(ctx.scale(ctx.col_sum(ctx.unary("square", z)), -0.5), norm_const);
    return ctx.add(base, acc);
}

void FlowComposition::project_params() {
    for (auto& [layer, orientation] : layers_) layer->project_params(params_);
}

void FlowComposition::constrain_gradient(ParameterStore& grads) const {
    for (const auto& [layer, orientation] : layers_) layer->constrain_gradient(params_, grads);
}

double flow_log_prob(const FlowComposition& flow, const Vector& x) {
    const Matrix xm = x;
    return flow.log_prob(xm)(0, 0);
}

Vector flow_sample(const FlowComposition& flow, Rng& rng) { return flow.sample(1, rng).col(0); }

double layer_equivariance_error(const FlowLayer& layer, const ParameterStore& store, int n_samples, Rng& rng,
                                double input_scale) {
    const Matrix x = input_scale * standard_normal_matrix(layer.dim(), n_samples, rng);
    const LayerOutput base = layer.forward(store, x);
    double err = 0.0;
    for (int g = 0; g < layer.rep().group().order(); ++g) {
        const Matrix& r = layer.rep().matrix(g);
        const LayerOutput moved = layer.forward(store, r * x);
        err = std::max(err, (moved.y - r * base.y).cwiseAbs().maxCoeff());
    }
    return err;
}

double density_invariance_error(const FlowComposition& flow, const Matrix& x) {
    const Matrix lp = flow.log_prob(x);
    double err = 0.0;
    for (int g = 0; g < flow.rep().group().order(); ++g)
        err = std::max(err, (flow.log_prob(flow.rep().matrix(g) * x) - lp).cwiseAbs().maxCoeff());
    return err;
}

}  // namespace equiflow
