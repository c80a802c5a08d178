#include "equiflow/diff.hpp"

#include "equiflow/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace equiflow {

Matrix& ParameterStore::add(const std::string& name, Matrix init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_.emplace(name, values_.size());
    names_.push_back(name);
    values_.push_back(std::move(init));
    return values_.back();
}

const Matrix& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return values_[it->second];
}

Matrix& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return values_[it->second];
}

std::size_t ParameterStore::total_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
}

std::vector<double> ParameterStore::flatten() const {
    std::vector<double> out;
    out.reserve(total_count());
    for (const auto& v : values_) out.insert(out.end(), v.data(), v.data() + v.size());
    return out;
}

void ParameterStore::assign_flat(std::span<const double> values) {
    if (values.size() != total_count()) throw std::invalid_argument("flat parameter length mismatch");
    std::size_t off = 0;
    for (auto& v : values_) {
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.data());
        off += static_cast<std::size_t>(v.size());
    }
}

ParameterStore ParameterStore::zeros_like() const {
    ParameterStore out(seed_);
    for (std::size_t i = 0; i < names_.size(); ++i)
        out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
    return out;
}

Matrix ParameterStore::uniform_init(Eigen::Index rows, Eigen::Index cols, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    // Fill row-major so the draw order does not depend on Eigen's storage order.
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

namespace ad {

namespace {

using Array = Eigen::ArrayXXd;

struct UnaryDef {
    std::string_view name;
    Array (*f)(const Array&);
    std::string_view derivative;  // empty when the primitive has no registered derivative
    /// Value and derivative together, for primitives where they share work.
    Array (*with_derivative)(const Array& x, Array& d) = nullptr;
};

// LipSwish: x * sigmoid(x) / 1.1, whose slope stays within [-0.1, 1].
constexpr double kLipSwishScale = 1.1;

Array sigmoid(const Array& x) { return (1.0 + (-x).exp()).inverse(); }

const UnaryDef kUnaries[] = {
    {"identity", [](const Array& x) -> Array { return x; }, "identity_d1"},
    {"identity_d1", [](const Array& x) -> Array { return Array::Ones(x.rows(), x.cols()); }, "zero"},
    {"zero", [](const Array& x) -> Array { return Array::Zero(x.rows(), x.cols()); }, "zero"},
    {"tanh", [](const Array& x) -> Array { return x.tanh(); }, "tanh_d1"},
    {"tanh_d1", [](const Array& x) -> Array { return 1.0 - x.tanh().square(); }, "tanh_d2"},
    {"tanh_d2",
     [](const Array& x) -> Array {
         const Array t = x.tanh();
         return -2.0 * t * (1.0 - t.square());
     },
     ""},
    {"lipswish", [](const Array& x) -> Array { return x * sigmoid(x) / kLipSwishScale; }, "lipswish_d1",
     [](const Array& x, Array& d) -> Array {
         const Array s = sigmoid(x);
         d = (s + x * s * (1.0 - s)) / kLipSwishScale;
         return x * s / kLipSwishScale;
     }},
    {"lipswish_d1",
     [](const Array& x) -> Array {
         const Array s = sigmoid(x);
         return (s + x * s * (1.0 - s)) / kLipSwishScale;
     },
     "lipswish_d2",
     [](const Array& x, Array& d) -> Array {
         const Array s = sigmoid(x);
         const Array ds = s * (1.0 - s);
         d = (2.0 * ds + x * ds * (1.0 - 2.0 * s)) / kLipSwishScale;
         return (s + x * ds) / kLipSwishScale;
     }},
    {"lipswish_d2",
     [](const Array& x) -> Array {
         const Array s = sigmoid(x);
         const Array ds = s * (1.0 - s);
         return (2.0 * ds + x * ds * (1.0 - 2.0 * s)) / kLipSwishScale;
     },
     ""},
    {"exp", [](const Array& x) -> Array { return x.exp(); }, "exp"},
    {"log", [](const Array& x) -> Array { return x.log(); }, "reciprocal"},
    {"reciprocal", [](const Array& x) -> Array { return x.inverse(); }, ""},
    {"square", [](const Array& x) -> Array { return x.square(); }, "twice"},
    {"twice", [](const Array& x) -> Array { return 2.0 * x; }, ""},
};

Matrix apply_unary(const UnaryDef& d, const Matrix& x) { return d.f(x.array()).matrix(); }

const UnaryDef* find_unary(std::string_view name) {
    for (const auto& d : kUnaries)
        if (d.name == name) return &d;
    return nullptr;
}

}  // namespace

double unary_value(std::string_view name, double x) {
    const UnaryDef* d = find_unary(name);
    if (!d) throw UnsupportedPrimitive(std::string(name));
    return d->f(Array::Constant(1, 1, x))(0, 0);
}

bool unary_known(std::string_view name) { return find_unary(name) != nullptr; }

Var Tape::record(std::string op, std::vector<int> inputs, std::function<Matrix(const Tape&, const Node&)> fwd,
                 std::function<void(Tape&, const Node&)> bwd) {
    Node node;
    node.op = std::move(op);
    node.inputs = std::move(inputs);
    for (int id : node.inputs) node.needs_grad = node.needs_grad || needs(id);
    node.forward = std::move(fwd);
    node.backward = std::move(bwd);
    node.value = node.forward(*this, node);
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
}

Var Tape::leaf(Matrix value, std::string name) {
    Node node;
    node.op = "leaf:" + std::move(name);
    node.value = std::move(value);
    node.needs_grad = true;
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) {
    Node node;
    node.op = "constant";
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw std::invalid_argument("matmul: shape mismatch");
    return record(
        "matmul", {a.id, b.id}, [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0) * t.in(n, 1); },
        [](Tape& t, const Node& n) {
            if (t.needs(n.inputs[0])) t.accumulate(n.inputs[0], n.grad * t.in(n, 1).transpose());
            if (t.needs(n.inputs[1])) t.accumulate(n.inputs[1], t.in(n, 0).transpose() * n.grad);
        });
}

Var Tape::add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
        throw std::invalid_argument("add: shape mismatch");
    return record(
        "add", {a.id, b.id}, [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0) + t.in(n, 1); },
        [](Tape& t, const Node& n) {
            t.accumulate(n.inputs[0], n.grad);
            t.accumulate(n.inputs[1], n.grad);
        });
}

Var Tape::sub(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
        throw std::invalid_argument("sub: shape mismatch");
    return record(
        "sub", {a.id, b.id}, [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0) - t.in(n, 1); },
        [](Tape& t, const Node& n) {
            t.accumulate(n.inputs[0], n.grad);
            if (t.needs(n.inputs[1])) t.accumulate(n.inputs[1], -n.grad);
        });
}

Var Tape::add_col(Var a, Var col) {
    if (value(col).cols() != 1 || value(col).rows() != value(a).rows())
        throw std::invalid_argument("add_col: shape mismatch");
    return record(
        "add_col", {a.id, col.id},
        [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0).colwise() + t.in(n, 1).col(0); },
        [](Tape& t, const Node& n) {
            t.accumulate(n.inputs[0], n.grad);
            if (t.needs(n.inputs[1])) t.accumulate(n.inputs[1], n.grad.rowwise().sum());
        });
}

Var Tape::mul_col(Var a, Var col) {
    if (value(col).cols() != 1 || value(col).rows() != value(a).rows())
        throw std::invalid_argument("mul_col: shape mismatch");
    return record(
        "mul_col", {a.id, col.id},
        [](const Tape& t, const Node& n) -> Matrix {
            return t.in(n, 0).array().colwise() * t.in(n, 1).col(0).array();
        },
        [](Tape& t, const Node& n) {
            if (t.needs(n.inputs[0]))
                t.accumulate(n.inputs[0], (n.grad.array().colwise() * t.in(n, 1).col(0).array()).matrix());
            if (t.needs(n.inputs[1]))
                t.accumulate(n.inputs[1], n.grad.cwiseProduct(t.in(n, 0)).rowwise().sum());
        });
}

Var Tape::hadamard(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
        throw std::invalid_argument("hadamard: shape mismatch");
    return record(
        "hadamard", {a.id, b.id},
        [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0).cwiseProduct(t.in(n, 1)); },
        [](Tape& t, const Node& n) {
            if (t.needs(n.inputs[0])) t.accumulate(n.inputs[0], n.grad.cwiseProduct(t.in(n, 1)));
            if (t.needs(n.inputs[1])) t.accumulate(n.inputs[1], n.grad.cwiseProduct(t.in(n, 0)));
        });
}

Var Tape::scale(Var a, double s) {
    return record(
        "scale", {a.id}, [s](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0) * s; },
        [s](Tape& t, const Node& n) { t.accumulate(n.inputs[0], n.grad * s); });
}

Var Tape::add_const(Var a, double c) {
    return record(
        "add_const", {a.id}, [c](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0).array() + c; },
        [](Tape& t, const Node& n) { t.accumulate(n.inputs[0], n.grad); });
}

Var Tape::unary(std::string_view name, Var a) {
    const UnaryDef* def = find_unary(name);
    if (!def) throw UnsupportedPrimitive(std::string(name));
    return record(
        std::string(name), {a.id},
        [def](const Tape& t, const Node& n) -> Matrix {
            if (!def->with_derivative || !n.needs_grad) return apply_unary(*def, t.in(n, 0));
            Array d;
            Matrix v = def->with_derivative(t.in(n, 0).array(), d).matrix();
            n.aux = d.matrix();
            return v;
        },
        [def](Tape& t, const Node& n) {
            if (!t.needs(n.inputs[0])) return;
            if (n.aux.size() > 0) {
                t.accumulate(n.inputs[0], n.grad.cwiseProduct(n.aux));
                return;
            }
            const UnaryDef* d = def->derivative.empty() ? nullptr : find_unary(def->derivative);
            if (!d) throw UnsupportedPrimitive("derivative of " + std::string(def->name));
            t.accumulate(n.inputs[0], n.grad.cwiseProduct(apply_unary(*d, t.in(n, 0))));
        });
}

Var Tape::sum(Var a) {
    return record(
        "sum", {a.id}, [](const Tape& t, const Node& n) -> Matrix { return Matrix::Constant(1, 1, t.in(n, 0).sum()); },
        [](Tape& t, const Node& n) {
            const Matrix& x = t.in(n, 0);
            t.accumulate(n.inputs[0], Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
        });
}

Var Tape::col_sum(Var a) {
    return record(
        "col_sum", {a.id}, [](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0).colwise().sum(); },
        [](Tape& t, const Node& n) {
            const Matrix& x = t.in(n, 0);
            t.accumulate(n.inputs[0], n.grad.replicate(x.rows(), 1));
        });
}

Var Tape::rows(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > value(a).rows()) throw std::invalid_argument("rows: out of range");
    return record(
        "rows", {a.id},
        [start, count](const Tape& t, const Node& n) -> Matrix { return t.in(n, 0).middleRows(start, count); },
        [start, count](Tape& t, const Node& n) {
            if (!t.needs(n.inputs[0])) return;
            const Matrix& x = t.in(n, 0);
            Matrix g = Matrix::Zero(x.rows(), x.cols());
            g.middleRows(start, count) = n.grad;
            t.accumulate(n.inputs[0], g);
        });
}

Var Tape::vstack(std::span<const Var> parts) {
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    if (ids.empty()) throw std::invalid_argument("vstack: no inputs");
    const Eigen::Index cols = value(parts[0]).cols();
    for (Var p : parts)
        if (value(p).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
    return record(
        "vstack", ids,
        [](const Tape& t, const Node& n) -> Matrix {
            Eigen::Index rows = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) rows += t.in(n, k).rows();
            Matrix out(rows, t.in(n, 0).cols());
            Eigen::Index off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                out.middleRows(off, t.in(n, k).rows()) = t.in(n, k);
                off += t.in(n, k).rows();
            }
            return out;
        },
        [](Tape& t, const Node& n) {
            Eigen::Index off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const Eigen::Index r = t.in(n, k).rows();
                if (t.needs(n.inputs[k])) t.accumulate(n.inputs[k], n.grad.middleRows(off, r));
                off += r;
            }
        });
}

Var Tape::linear(Var a, const LinearOp& op) {
    if (!op.apply || !op.adjoint) throw UnsupportedPrimitive(op.name.empty() ? "linear" : op.name);
    auto apply = op.apply;
    auto adjoint = op.adjoint;
    return record(
        "linear:" + op.name, {a.id}, [apply](const Tape& t, const Node& n) -> Matrix { return apply(t.in(n, 0)); },
        [adjoint](Tape& t, const Node& n) {
            if (t.needs(n.inputs[0])) t.accumulate(n.inputs[0], adjoint(n.grad));
        });
}

namespace {

Matrix assemble(const std::vector<const Matrix*>& cols, Eigen::Index sample) {
    const auto n = static_cast<Eigen::Index>(cols.size());
    Matrix m(n, n);
    for (Eigen::Index j = 0; j < n; ++j) m.col(j) = cols[static_cast<std::size_t>(j)]->col(sample);
    return m;
}

// Determinants of 1x1 or 2x2 matrices given as columns, one per sample.
Matrix small_dets(const std::vector<const Matrix*>& cols) {
    if (cols.size() == 1) return *cols[0];
    const Matrix& a = *cols[0];
    const Matrix& c = *cols[1];
    return (a.row(0).array() * c.row(1).array() - c.row(0).array() * a.row(1).array()).matrix();
}

}  // namespace

Var Tape::logabsdet(std::span<const Var> cols) {
    std::vector<int> ids;
    for (Var c : cols) ids.push_back(c.id);
    const auto n = static_cast<Eigen::Index>(ids.size());
    if (n == 0) throw std::invalid_argument("logabsdet: empty matrix");
    for (Var c : cols)
        if (value(c).rows() != n || value(c).cols() != value(cols[0]).cols())
            throw std::invalid_argument("logabsdet: columns must be n x batch");
    return record(
        "logabsdet", ids,
        [](const Tape& t, const Node& n) -> Matrix {
            std::vector<const Matrix*> cs;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) cs.push_back(&t.in(n, k));
            const Eigen::Index batch = cs[0]->cols();
            if (cs.size() <= 2) return small_dets(cs).array().abs().log().matrix();
            Matrix out(1, batch);
            for (Eigen::Index b = 0; b < batch; ++b) out(0, b) = log_abs_det(assemble(cs, b));
            return out;
        },
        [](Tape& t, const Node& n) {
            std::vector<const Matrix*> cs;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) cs.push_back(&t.in(n, k));
            const auto dim = static_cast<Eigen::Index>(cs.size());
            const Eigen::Index batch = cs[0]->cols();
            if (cs.size() <= 2) {
                // closed-form M^{-T} columns, batched
                const Eigen::ArrayXXd w = n.grad.array() / small_dets(cs).array();
                if (cs.size() == 1) {
                    t.accumulate(n.inputs[0], w.matrix());
                    return;
                }
                const Matrix& a = *cs[0];
                const Matrix& c = *cs[1];
                Matrix g0(2, batch), g1(2, batch);
                g0.row(0) = (c.row(1).array() * w).matrix();
                g0.row(1) = (-c.row(0).array() * w).matrix();
                g1.row(0) = (-a.row(1).array() * w).matrix();
                g1.row(1) = (a.row(0).array() * w).matrix();
                t.accumulate(n.inputs[0], g0);
                t.accumulate(n.inputs[1], g1);
                return;
            }
            std::vector<Matrix> grads(cs.size(), Matrix(dim, batch));
            for (Eigen::Index b = 0; b < batch; ++b) {
                // d log|det M| / dM = M^{-T}
                const Matrix inv_t = assemble(cs, b).partialPivLu().inverse().transpose();
                for (Eigen::Index j = 0; j < dim; ++j)
                    grads[static_cast<std::size_t>(j)].col(b) = n.grad(0, b) * inv_t.col(j);
            }
            for (std::size_t k = 0; k < n.inputs.size(); ++k) t.accumulate(n.inputs[k], grads[k]);
        });
}

Var Tape::expm(Var k) {
    if (value(k).rows() != value(k).cols()) throw std::invalid_argument("expm: square matrix required");
    return record(
        "expm", {k.id}, [](const Tape& t, const Node& n) -> Matrix { return equiflow::expm(t.in(n, 0)); },
        [](Tape& t, const Node& n) {
            if (t.needs(n.inputs[0])) t.accumulate(n.inputs[0], expm_frechet_adjoint(t.in(n, 0), n.grad));
        });
}

Var Tape::trace(Var k) {
    if (value(k).rows() != value(k).cols()) throw std::invalid_argument("trace: square matrix required");
    return record(
        "trace", {k.id}, [](const Tape& t, const Node& n) -> Matrix { return Matrix::Constant(1, 1, t.in(n, 0).trace()); },
        [](Tape& t, const Node& n) {
            const Eigen::Index d = t.in(n, 0).rows();
            t.accumulate(n.inputs[0], n.grad(0, 0) * Matrix::Identity(d, d));
        });
}

void Tape::backward(Var out) {
    if (value(out).size() != 1) throw std::invalid_argument("backward: output must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    Node& root = nodes_[static_cast<std::size_t>(out.id)];
    if (!root.needs_grad) return;
    root.grad = Matrix::Ones(1, 1);
    for (int id = out.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
        n.backward(*this, n);
    }
}

bool Tape::replay() {
    bool identical = true;
    for (auto& n : nodes_) {
        if (!n.forward) continue;
        Matrix v = n.forward(*this, n);
        if (v.rows() != n.value.rows() || v.cols() != n.value.cols() ||
            !std::equal(v.data(), v.data() + v.size(), n.value.data()))
            identical = false;
        n.value = std::move(v);
    }
    return identical;
}

Var TapeContext::param(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var v = tape_.leaf(store_.get(name), name);
    leaves_.emplace(name, v);
    return v;
}

Matrix EagerContext::mul_col(const Matrix& a, const Matrix& c) const {
    return a.array().colwise() * c.col(0).array();
}

Matrix EagerContext::unary(std::string_view name, const Matrix& a) const {
    const UnaryDef* d = find_unary(name);
    if (!d) throw UnsupportedPrimitive(std::string(name));
    return apply_unary(*d, a);
}

Matrix EagerContext::vstack(std::span<const Matrix> parts) const {
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.rows();
    Matrix out(rows, parts.empty() ? 0 : parts[0].cols());
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p;
        off += p.rows();
    }
    return out;
}

Matrix EagerContext::logabsdet(std::span<const Matrix> cols) const {
    std::vector<const Matrix*> cs;
    for (const auto& c : cols) cs.push_back(&c);
    if (cs.size() <= 2) return small_dets(cs).array().abs().log().matrix();
    const Eigen::Index batch = cols[0].cols();
    Matrix out(1, batch);
    for (Eigen::Index b = 0; b < batch; ++b) out(0, b) = log_abs_det(assemble(cs, b));
    return out;
}

Matrix EagerContext::expm(const Matrix& k) const { return equiflow::expm(k); }

ValueAndGrad value_and_grad(const LossFn& loss, const ParameterStore& params) {
    Tape tape;
    TapeContext ctx(tape, params);
    Var out = loss(ctx);
    if (tape.value(out).size() != 1) throw std::invalid_argument("loss must be scalar");
    tape.backward(out);
    ValueAndGrad result{tape.value(out)(0, 0), params.zeros_like()};
    for (const auto& [name, v] : ctx.leaves()) {
        if (tape.grad(v).size() != 0) result.grad.get(name) = tape.grad(v);
    }
    return result;
}

double evaluate(const LossFn& loss, const ParameterStore& params) {
    Tape tape;
    TapeContext ctx(tape, params);
    return tape.value(loss(ctx))(0, 0);
}

double finite_diff_check(const LossFn& loss, const ParameterStore& params, double epsilon,
                         std::size_t max_coords, std::uint64_t seed) {
    if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw std::invalid_argument("epsilon must lie in (0, 1e-2]");
    const std::size_t total = params.total_count();
    if (total == 0) return 0.0;
    const auto ad = value_and_grad(loss, params);
    const std::vector<double> grad = ad.grad.flatten();
    const std::vector<double> base = params.flatten();

    std::vector<std::size_t> coords(total);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (total > max_coords) {
        Rng rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
    }

    ParameterStore probe = params;
    std::vector<double> work = base;
    double worst = 0.0;
    for (std::size_t i : coords) {
        work[i] = base[i] + epsilon;
        probe.assign_flat(work);
        const double plus = evaluate(loss, probe);
        work[i] = base[i] - epsilon;
        probe.assign_flat(work);
        const double minus = evaluate(loss, probe);
        work[i] = base[i];
        const double fd = (plus - minus) / (2.0 * epsilon);
        worst = std::max(worst, std::abs(grad[i] - fd) / (std::abs(fd) + 1e-8));
    }
    return worst;
}

}  // namespace ad
}  // namespace equiflow
