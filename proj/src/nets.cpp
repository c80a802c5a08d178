#include "equiflow/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace equiflow {

namespace {

ad::LinearOp tile_op(std::string name, int copies, Eigen::Index m) {
    ad::LinearOp op;
    op.name = std::move(name);
    op.out_rows = copies * m;
    op.out_cols = 1;
    op.apply = [copies, m](const Matrix& b) {
        Matrix out(copies * m, 1);
        for (int g = 0; g < copies; ++g) out.middleRows(g * m, m) = b;
        return out;
    };
    op.adjoint = [copies, m](const Matrix& gb) {
        Matrix out = Matrix::Zero(m, 1);
        for (int g = 0; g < copies; ++g) out += gb.middleRows(g * m, m);
        return out;
    };
    return op;
}

}  // namespace

double spectral_norm(const Matrix& w, Vector& u, int iterations) {
    if (w.size() == 0 || w.cwiseAbs().maxCoeff() == 0.0) return 0.0;
    if (u.size() != w.rows() || u.norm() == 0.0) u = Vector::Ones(w.rows()) / std::sqrt(static_cast<double>(w.rows()));
    Vector v;
    for (int it = 0; it < std::max(iterations, 1); ++it) {
        v = w.transpose() * u;
        const double vn = v.norm();
        if (vn == 0.0) {
            // u is orthogonal to the range; restart from a deterministic nonzero direction.
            u = Vector::Ones(w.rows()) / std::sqrt(static_cast<double>(w.rows()));
            u(0) += 0.5;
            u.normalize();
            continue;
        }
        v /= vn;
        Vector wv = w * v;
        const double sigma = wv.norm();
        if (sigma == 0.0) return 0.0;
        u = wv / sigma;
    }
    if (v.size() == 0 || v.norm() == 0.0) return 0.0;

    // Rayleigh-Ritz over a small Krylov space of W^T W seeded by the power iterate.
    // Sharpens the estimate when the top two singular values are close.
    const Eigen::Index dim = std::min<Eigen::Index>(w.cols(), kRitzDimension);
    Matrix basis(w.cols(), dim);
    basis.col(0) = v;
    Eigen::Index used = 1;
    for (; used < dim; ++used) {
        Vector next = w.transpose() * (w * basis.col(used - 1));
        const double scale = next.norm();
        for (int pass = 0; pass < 2; ++pass)
            next -= basis.leftCols(used) * (basis.leftCols(used).transpose() * next);
        const double nn = next.norm();
        if (!(nn > 1e-12 * scale)) break;
        basis.col(used) = next / nn;
    }
    const Matrix wb = w * basis.leftCols(used);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(wb.transpose() * wb);
    const Vector right = basis.leftCols(used) * eig.eigenvectors().col(used - 1);
    const Vector image = w * right;
    const double sigma = image.norm();
    if (sigma == 0.0) return 0.0;
    u = image / sigma;
    return sigma;
}

EquivariantNetwork::EquivariantNetwork(std::string prefix, Representation in, Representation out,
                                       NetworkConfig config)
    : prefix_(std::move(prefix)), in_(std::move(in)), out_(std::move(out)), config_(std::move(config)) {
    config_.mode = ProjectionMode::equivariant;
    if (!in_.group().same_as(out_->group())) throw std::invalid_argument("input and output reps use different groups");
    build();
}

EquivariantNetwork::EquivariantNetwork(std::string prefix, Representation in, NetworkConfig config)
    : prefix_(std::move(prefix)), in_(std::move(in)), config_(std::move(config)) {
    config_.mode = ProjectionMode::invariant;
    if (config_.invariant_out_dim < 1) throw std::invalid_argument("invariant output width must be positive");
    build();
}

int EquivariantNetwork::out_dim() const { return out_ ? out_->dim() : config_.invariant_out_dim; }

void EquivariantNetwork::build() {
    if (config_.channels.empty()) throw std::invalid_argument("network needs a lifting width");
    for (int c : config_.channels)
        if (c < 1) throw std::invalid_argument("channel widths must be positive");
    if (!ad::unary_known(config_.nonlinearity) || config_.nonlinearity.find("_d") != std::string::npos)
        throw UnsupportedPrimitive(config_.nonlinearity);
    slope_name_ = config_.nonlinearity + "_d1";
    if (config_.lipschitz && !(*config_.lipschitz > 0.0 && *config_.lipschitz < 1.0))
        throw std::invalid_argument("lipschitz scale must lie in (0, 1)");

    const FiniteGroup& group = in_.group();
    const int order = group.order();
    const int d_in = in_.dim();
    const std::vector<Matrix> rin = in_.matrices();

    // Lifting: block g of L is A R_in(g)^T.
    {
        const Eigen::Index m = config_.channels[0];
        Stage s;
        s.weight = prefix_ + ".lift.A";
        s.bias = prefix_ + ".lift.b";
        s.expand.name = "lift";
        s.expand.out_rows = order * m;
        s.expand.out_cols = d_in;
        s.expand.apply = [rin, m, order, d_in](const Matrix& a) {
            Matrix l(order * m, d_in);
            for (int g = 0; g < order; ++g) l.middleRows(g * m, m).noalias() = a * rin[static_cast<std::size_t>(g)].transpose();
            return l;
        };
        s.expand.adjoint = [rin, m, order, d_in](const Matrix& gl) {
            Matrix ga = Matrix::Zero(m, d_in);
            for (int g = 0; g < order; ++g) ga.noalias() += gl.middleRows(g * m, m) * rin[static_cast<std::size_t>(g)];
            return ga;
        };
        s.bias_expand = tile_op("tile", order, m);
        ops_.push_back(std::move(s));
        shapes_.emplace_back(m, d_in);
        fan_in_.push_back(d_in);
    }

    // Group convolutions: block (g, h) of C is W_{g^{-1} h}.
    std::vector<int> table(static_cast<std::size_t>(order * order));
    for (int g = 0; g < order; ++g)
        for (int k = 0; k < order; ++k) table[static_cast<std::size_t>(g * order + k)] = group.compose(g, k);
    for (std::size_t i = 1; i < config_.channels.size(); ++i) {
        const Eigen::Index cin = config_.channels[i - 1], cout = config_.channels[i];
        Stage s;
        s.weight = prefix_ + ".conv" + std::to_string(i) + ".W";
        s.bias = prefix_ + ".conv" + std::to_string(i) + ".b";
        s.expand.name = "group_conv";
        s.expand.out_rows = order * cout;
        s.expand.out_cols = order * cin;
        s.expand.apply = [table, order, cin, cout](const Matrix& w) {
            Matrix c(order * cout, order * cin);
            for (int g = 0; g < order; ++g)
                for (int k = 0; k < order; ++k) {
                    const int h = table[static_cast<std::size_t>(g * order + k)];
                    c.block(g * cout, h * cin, cout, cin) = w.middleCols(k * cin, cin);
                }
            return c;
        };
        s.expand.adjoint = [table, order, cin, cout](const Matrix& gc) {
            Matrix gw = Matrix::Zero(cout, order * cin);
            for (int g = 0; g < order; ++g)
                for (int k = 0; k < order; ++k) {
                    const int h = table[static_cast<std::size_t>(g * order + k)];
                    gw.middleCols(k * cin, cin) += gc.block(g * cout, h * cin, cout, cin);
                }
            return gw;
        };
        s.bias_expand = tile_op("tile", order, cout);
        ops_.push_back(std::move(s));
        shapes_.emplace_back(cout, order * cin);
        fan_in_.push_back(order * static_cast<int>(cin));
    }

    // Projection back to the output representation (or group average for invariants).
    {
        const Eigen::Index m = config_.channels.back();
        const Eigen::Index d_out = out_dim();
        std::vector<Matrix> rout;
        for (int g = 0; g < order; ++g)
            rout.push_back(out_ ? out_->matrix(g) : Matrix::Identity(d_out, d_out));
        const double inv_order = 1.0 / order;
        Stage s;
        s.weight = prefix_ + ".proj.P";
        s.hidden = false;
        s.expand.name = "project";
        s.expand.out_rows = d_out;
        s.expand.out_cols = order * m;
        s.expand.apply = [rout, m, order, d_out, inv_order](const Matrix& p) {
            Matrix q(d_out, order * m);
            for (int g = 0; g < order; ++g) q.middleCols(g * m, m).noalias() = inv_order * rout[static_cast<std::size_t>(g)] * p;
            return q;
        };
        s.expand.adjoint = [rout, m, order, d_out, inv_order](const Matrix& gq) {
            Matrix gp = Matrix::Zero(d_out, m);
            for (int g = 0; g < order; ++g)
                gp.noalias() += inv_order * rout[static_cast<std::size_t>(g)].transpose() * gq.middleCols(g * m, m);
            return gp;
        };
        // Output bias restricted to the fixed subspace of R_out; dropped when that subspace is {0}.
        const Matrix proj = out_ ? out_->invariant_projector() : Matrix::Identity(d_out, d_out);
        const bool has_bias = config_.output_bias && (out_ ? out_->invariant_dim() > 0 : true);
        if (has_bias) {
            s.bias = prefix_ + ".proj.b";
            ad::LinearOp bop;
            bop.name = "fixed_subspace";
            bop.out_rows = d_out;
            bop.out_cols = 1;
            bop.apply = [proj](const Matrix& b) -> Matrix { return proj * b; };
            bop.adjoint = [proj](const Matrix& gb) -> Matrix { return proj.transpose() * gb; };
            s.bias_expand = bop;
            out_bias_rows_ = d_out;
        }
        ops_.push_back(std::move(s));
        shapes_.emplace_back(d_out, m);
        fan_in_.push_back(static_cast<int>(m));
    }

    spectral_.target = config_.lipschitz.value_or(0.9);
    spectral_.u.assign(ops_.size(), Vector());
}

void EquivariantNetwork::init_params(ParameterStore& store, Rng& rng) {
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        const auto [r, c] = shapes_[i];
        store.add(ops_[i].weight, ParameterStore::uniform_init(r, c, fan_in_[i], rng));
        if (!ops_[i].bias.empty()) {
            const Eigen::Index rows = ops_[i].hidden ? r : out_bias_rows_;
            store.add(ops_[i].bias, ParameterStore::uniform_init(rows, 1, fan_in_[i], rng));
        }
    }
    // Power-iteration start vectors come from the same seeded stream.
    std::normal_distribution<double> normal;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        Vector u(ops_[i].expand.out_rows);
        for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = normal(rng);
        spectral_.u[i] = u.normalized();
    }
}

std::size_t EquivariantNetwork::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        n += static_cast<std::size_t>(shapes_[i].first * shapes_[i].second);
        if (!ops_[i].bias.empty()) n += static_cast<std::size_t>(ops_[i].hidden ? shapes_[i].first : out_bias_rows_);
    }
    return n;
}

std::vector<std::string> EquivariantNetwork::parameter_names() const {
    std::vector<std::string> names;
    for (const auto& s : ops_) {
        names.push_back(s.weight);
        if (!s.bias.empty()) names.push_back(s.bias);
    }
    return names;
}

Matrix EquivariantNetwork::forward(const ParameterStore& store, const Matrix& x) const {
    if (x.rows() != in_dim()) throw std::invalid_argument("network input dimension mismatch");
    ad::EagerContext ctx(store);
    return run(ctx, x, false).y;
}

Matrix EquivariantNetwork::jacobian(const ParameterStore& store, const Vector& x) const {
    if (x.size() != in_dim()) throw std::invalid_argument("network input dimension mismatch");
    ad::EagerContext ctx(store);
    const Matrix xm = x;
    auto trace = run(ctx, xm, true);
    Matrix j(out_dim(), in_dim());
    for (int c = 0; c < in_dim(); ++c) j.col(c) = jvp(ctx, trace, Matrix(Matrix::Identity(in_dim(), in_dim()).col(c)));
    return j;
}

std::vector<Matrix> EquivariantNetwork::linear_maps(const ParameterStore& store) const {
    std::vector<Matrix> maps;
    for (const auto& s : ops_) maps.push_back(s.expand.apply(store.get(s.weight)));
    return maps;
}

double EquivariantNetwork::lipschitz_bound(const ParameterStore& store, int iterations) const {
    double bound = 1.0;
    std::size_t i = 0;
    for (const Matrix& w : linear_maps(store)) {
        Vector u = spectral_.u[i++];
        bound *= spectral_norm(w, u, iterations);
    }
    return bound;
}

void EquivariantNetwork::normalize_lipschitz(ParameterStore& store, double c, int iterations) {
    if (!(c > 0.0 && c < 1.0)) throw std::invalid_argument("lipschitz scale must lie in (0, 1)");
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        Matrix& w = store.get(ops_[i].weight);
        const double sigma = spectral_norm(ops_[i].expand.apply(w), spectral_.u[i], iterations);
        if (sigma > c) w *= c / sigma;
    }
}

void EquivariantNetwork::normalized_gradient(const ParameterStore& store, ParameterStore& grads) const {
    if (!config_.lipschitz) return;
    const double c = *config_.lipschitz;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
        const Matrix& w = store.get(ops_[i].weight);
        const Matrix dense = ops_[i].expand.apply(w);
        const Vector& u = spectral_.u[i];
        if (u.size() != dense.rows()) continue;
        const Vector right = dense.transpose() * u;
        const double sigma = right.norm();
        if (!(sigma >= c * (1.0 - 1e-9))) continue;
        // d sigma / dW is the adjoint of the expansion applied to u v^T.
        const Matrix dsigma = ops_[i].expand.adjoint(u * (right / sigma).transpose());
        Matrix& g = grads.get(ops_[i].weight);
        g -= (g.cwiseProduct(w).sum() / sigma) * dsigma;
    }
}

double equivariance_error(const EquivariantNetwork& net, const ParameterStore& store, int n_samples, Rng& rng) {
    if (n_samples < 1) throw std::invalid_argument("n_samples must be positive");
    std::normal_distribution<double> normal;
    Matrix x(net.in_dim(), n_samples);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = normal(rng);
    const Matrix y = net.forward(store, x);
    double err = 0.0;
    const Representation& rin = net.rep_in();
    for (int g = 0; g < rin.group().order(); ++g) {
        const Matrix gy = net.forward(store, rin.matrix(g) * x);
        const Matrix expected = net.rep_out() ? Matrix(net.rep_out()->matrix(g) * y) : y;
        err = std::max(err, (gy - expected).cwiseAbs().maxCoeff());
    }
    return err;
}

}  // namespace equiflow
