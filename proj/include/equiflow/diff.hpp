#pragma once

#include "equiflow/group.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace equiflow {

using Rng = std::mt19937_64;

class UnsupportedPrimitive : public std::runtime_error {
public:
    explicit UnsupportedPrimitive(const std::string& name)
        : std::runtime_error("unsupported primitive: " + name), name_(name) {}
    const std::string& primitive() const { return name_; }

private:
    std::string name_;
};

/**
 * Named real parameter arrays.  Every array is a dense matrix; insertion order is
 * preserved so flattening and serialization are deterministic.
 */
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

    Matrix& add(const std::string& name, Matrix init);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Matrix& get(const std::string& name) const;
    Matrix& get(const std::string& name);
    const std::vector<std::string>& names() const { return names_; }

    std::size_t total_count() const;
    std::uint64_t seed() const { return seed_; }

    std::vector<double> flatten() const;
    void assign_flat(std::span<const double> values);

    /// Zero-valued store with identical names and shapes.
    ParameterStore zeros_like() const;

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initializer.
    static Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, int fan_in, Rng& rng);

private:
    std::uint64_t seed_;
    std::vector<std::string> names_;
    std::vector<Matrix> values_;
    std::map<std::string, std::size_t> index_;
};

namespace ad {

struct Var {
    int id = -1;
};

/// Linear map with an explicit adjoint; used for group-structured weight expansions.
struct LinearOp {
    std::string name;
    Eigen::Index out_rows = 0, out_cols = 0;
    std::function<Matrix(const Matrix&)> apply;
    std::function<Matrix(const Matrix&)> adjoint;
};

/// Elementwise primitives understood by `unary`; derivatives are exposed as
/// separate primitives ("tanh_d1") so Jacobian tangents stay differentiable.
double unary_value(std::string_view name, double x);
bool unary_known(std::string_view name);

/**
 * Reverse-mode tape.  Nodes are evaluated eagerly when recorded; values are dense
 * matrices with one sample per column.  Single-threaded.
 */
class Tape {
public:
    Var leaf(Matrix value, std::string name);
    Var constant(Matrix value);

    const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var add_col(Var a, Var col);
    Var mul_col(Var a, Var col);
    Var hadamard(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, double c);
    Var unary(std::string_view name, Var a);
    Var sum(Var a);
    Var col_sum(Var a);
    Var rows(Var a, Eigen::Index start, Eigen::Index count);
    Var vstack(std::span<const Var> parts);
    Var linear(Var a, const LinearOp& op);
    /// Per-sample log|det| of the matrices whose j-th columns are cols[j] (each n x batch).
    Var logabsdet(std::span<const Var> cols);
    Var expm(Var k);
    Var trace(Var k);

    /// Seeds d(out)/d(out) = 1 for a 1x1 output and accumulates gradients.
    void backward(Var out);
    /// Recomputes every node from its inputs; returns true when all values reproduce bit-for-bit.
    bool replay();

private:
    struct Node {
        std::string op;
        std::vector<int> inputs;
        Matrix value;
        Matrix grad;
        /// Local derivative stashed by the forward pass (elementwise primitives only).
        mutable Matrix aux;
        bool needs_grad = false;
        std::function<Matrix(const Tape&, const Node&)> forward;
        std::function<void(Tape&, const Node&)> backward;
    };

    Var record(std::string op, std::vector<int> inputs, std::function<Matrix(const Tape&, const Node&)> fwd,
               std::function<void(Tape&, const Node&)> bwd);
    const Matrix& in(const Node& n, std::size_t k) const {
        return nodes_[static_cast<std::size_t>(n.inputs[k])].value;
    }
    void accumulate(int id, const Matrix& g);
    bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    std::vector<Node> nodes_;
};

/// Evaluates network code on a tape with parameters drawn from a store.
class TapeContext {
public:
    using Value = Var;

    TapeContext(Tape& tape, const ParameterStore& store) : tape_(tape), store_(store) {}

    Tape& tape() { return tape_; }
    const ParameterStore& store() const { return store_; }
    const Matrix& value(Var v) const { return tape_.value(v); }
    const std::map<std::string, Var>& leaves() const { return leaves_; }

    Var param(const std::string& name);
    Var constant(Matrix m) { return tape_.constant(std::move(m)); }

    Var matmul(Var a, Var b) { return tape_.matmul(a, b); }
    Var add(Var a, Var b) { return tape_.add(a, b); }
    Var sub(Var a, Var b) { return tape_.sub(a, b); }
    Var add_col(Var a, Var c) { return tape_.add_col(a, c); }
    Var mul_col(Var a, Var c) { return tape_.mul_col(a, c); }
    Var hadamard(Var a, Var b) { return tape_.hadamard(a, b); }
    Var scale(Var a, double s) { return tape_.scale(a, s); }
    Var add_const(Var a, double c) { return tape_.add_const(a, c); }
    Var unary(std::string_view name, Var a) { return tape_.unary(name, a); }
    Var sum(Var a) { return tape_.sum(a); }
    Var col_sum(Var a) { return tape_.col_sum(a); }
    Var rows(Var a, Eigen::Index s, Eigen::Index c) { return tape_.rows(a, s, c); }
    Var vstack(std::span<const Var> parts) { return tape_.vstack(parts); }
    Var linear(Var a, const LinearOp& op) { return tape_.linear(a, op); }
    Var logabsdet(std::span<const Var> cols) { return tape_.logabsdet(cols); }
    Var expm(Var k) { return tape_.expm(k); }
    Var trace(Var k) { return tape_.trace(k); }

private:
    Tape& tape_;
    const ParameterStore& store_;
    std::map<std::string, Var> leaves_;
};

/// Same interface as TapeContext, evaluating directly without recording.
class EagerContext {
public:
    using Value = Matrix;

    explicit EagerContext(const ParameterStore& store) : store_(store) {}

    const ParameterStore& store() const { return store_; }
    const Matrix& value(const Matrix& v) const { return v; }

    Matrix param(const std::string& name) const { return store_.get(name); }
    Matrix constant(Matrix m) const { return m; }

    Matrix matmul(const Matrix& a, const Matrix& b) const { return a * b; }
    Matrix add(const Matrix& a, const Matrix& b) const { return a + b; }
    Matrix sub(const Matrix& a, const Matrix& b) const { return a - b; }
    Matrix add_col(const Matrix& a, const Matrix& c) const { return a.colwise() + c.col(0); }
    Matrix mul_col(const Matrix& a, const Matrix& c) const;
    Matrix hadamard(const Matrix& a, const Matrix& b) const { return a.cwiseProduct(b); }
    Matrix scale(const Matrix& a, double s) const { return a * s; }
    Matrix add_const(const Matrix& a, double c) const { return a.array() + c; }
    Matrix unary(std::string_view name, const Matrix& a) const;
    Matrix sum(const Matrix& a) const { return Matrix::Constant(1, 1, a.sum()); }
    Matrix col_sum(const Matrix& a) const { return a.colwise().sum(); }
    Matrix rows(const Matrix& a, Eigen::Index s, Eigen::Index c) const { return a.middleRows(s, c); }
    Matrix vstack(std::span<const Matrix> parts) const;
    Matrix linear(const Matrix& a, const LinearOp& op) const { return op.apply(a); }
    Matrix logabsdet(std::span<const Matrix> cols) const;
    Matrix expm(const Matrix& k) const;
    Matrix trace(const Matrix& k) const { return Matrix::Constant(1, 1, k.trace()); }

private:
    const ParameterStore& store_;
};

/// Scalar loss recorded on a tape from parameters.
using LossFn = std::function<Var(TapeContext&)>;

struct ValueAndGrad {
    double value = 0.0;
    ParameterStore grad;
};

ValueAndGrad value_and_grad(const LossFn& loss, const ParameterStore& params);

/// Loss value only (no backward pass).
double evaluate(const LossFn& loss, const ParameterStore& params);

/**
 * Central-difference check of value_and_grad.  Checks every coordinate when the
 * store holds at most `max_coords` values, otherwise a seeded random subsample of
 * `max_coords` coordinates.  Returns max |g_ad - g_fd| / (|g_fd| + 1e-8).
 */
double finite_diff_check(const LossFn& loss, const ParameterStore& params, double epsilon,
                         std::size_t max_coords = 256, std::uint64_t seed = 0);

}  // namespace ad
}  // namespace equiflow
