#include "equiflow/group.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numbers>

namespace equiflow {

namespace {

constexpr double kRepTolerance = 1e-12;

void check_order(int order, int max_order) {
    if (order < 1) throw GroupError("group order must be positive");
    if (order > max_order) {
        throw GroupError("group order " + std::to_string(order) + " exceeds cap " +
                         std::to_string(max_order));
    }
}

int parse_positive(const std::string& digits, const std::string& name) {
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
        throw GroupError("unrecognized group name: " + name);
    }
    int n = std::stoi(digits);
    if (n < 1) throw GroupError("unrecognized group name: " + name);
    return n;
}

}  // namespace

FiniteGroup FiniteGroup::cyclic(int n, int max_order) {
    check_order(n, max_order);
    FiniteGroup g;
    g.kind_ = GroupKind::cyclic;
    g.order_ = n;
    g.n_ = n;
    g.name_ = "C" + std::to_string(n);
    g.table_.resize(static_cast<std::size_t>(n * n));
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) g.table_[static_cast<std::size_t>(a * n + b)] = (a + b) % n;
    g.finish_inverses();
    return g;
}

FiniteGroup FiniteGroup::dihedral(int n, int max_order) {
    if (n < 1) throw GroupError("dihedral group needs n >= 1");
    check_order(2 * n, max_order);
    FiniteGroup g;
    g.kind_ = GroupKind::dihedral;
    g.order_ = 2 * n;
    g.n_ = n;
    g.name_ = "D" + std::to_string(n);
    const int order = 2 * n;
    g.table_.resize(static_cast<std::size_t>(order * order));
    // r^a s^p * r^b s^q = r^{a + (-1)^p b} s^{p+q}
    for (int x = 0; x < order; ++x) {
        const int a = x % n, p = x / n;
        for (int y = 0; y < order; ++y) {
            const int b = y % n, q = y / n;
            const int rot = ((a + (p ? -b : b)) % n + n) % n;
            const int refl = (p + q) % 2;
            g.table_[static_cast<std::size_t>(x * order + y)] = refl * n + rot;
        }
    }
    g.finish_inverses();
    return g;
}

FiniteGroup FiniteGroup::from_permutations(const std::vector<std::vector<int>>& generators,
                                           int max_order) {
    if (generators.empty()) throw GroupError("explicit group needs at least one generator");
    const std::size_t points = generators.front().size();
    for (const auto& gen : generators) {
        if (gen.size() != points) throw GroupError("generators act on different point counts");
        std::vector<int> sorted = gen;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < points; ++i)
            if (sorted[i] != static_cast<int>(i)) throw GroupError("generator is not a permutation");
    }
    std::vector<int> identity(points);
    for (std::size_t i = 0; i < points; ++i) identity[i] = static_cast<int>(i);

    auto mul = [points](const std::vector<int>& g, const std::vector<int>& h) {
        std::vector<int> out(points);
        for (std::size_t i = 0; i < points; ++i) out[i] = g[static_cast<std::size_t>(h[i])];
        return out;
    };

    std::vector<std::vector<int>> elems{identity};
    std::map<std::vector<int>, int> index{{identity, 0}};
    std::deque<int> frontier{0};
    while (!frontier.empty()) {
        const int cur = frontier.front();
        frontier.pop_front();
        for (const auto& gen : generators) {
            auto next = mul(gen, elems[static_cast<std::size_t>(cur)]);
            if (index.count(next)) continue;
            if (static_cast<int>(elems.size()) >= max_order) {
                throw GroupError("generated group exceeds order cap " + std::to_string(max_order));
            }
            index.emplace(next, static_cast<int>(elems.size()));
            frontier.push_back(static_cast<int>(elems.size()));
            elems.push_back(std::move(next));
        }
    }

    FiniteGroup g;
    g.kind_ = GroupKind::explicit_permutation;
    g.order_ = static_cast<int>(elems.size());
    g.n_ = g.order_;
    g.name_ = "Perm" + std::to_string(points) + "_" + std::to_string(g.order_);
    g.table_.resize(static_cast<std::size_t>(g.order_ * g.order_));
    for (int a = 0; a < g.order_; ++a)
        for (int b = 0; b < g.order_; ++b)
            g.table_[static_cast<std::size_t>(a * g.order_ + b)] =
                index.at(mul(elems[static_cast<std::size_t>(a)], elems[static_cast<std::size_t>(b)]));
    g.perms_ = std::move(elems);
    g.finish_inverses();
    return g;
}

FiniteGroup FiniteGroup::parse(const std::string& name, int translation_size) {
    if (name == "trivial") return cyclic(1);
    if (name.empty()) throw GroupError("empty group name");
    const char head = name.front();
    const std::string rest = name.substr(1);
    if (head == 'C') return cyclic(parse_positive(rest, name));
    if (head == 'D') return dihedral(parse_positive(rest, name));
    if (head == 'T') {
        const int n = rest.empty() ? translation_size : parse_positive(rest, name);
        if (n < 1) throw GroupError("translation group T needs a grid size");
        FiniteGroup g = cyclic(n);
        g.name_ = "T" + std::to_string(n);
        return g;
    }
    throw GroupError("unrecognized group name: " + name);
}

void FiniteGroup::finish_inverses() {
    inverse_.assign(static_cast<std::size_t>(order_), -1);
    for (int a = 0; a < order_; ++a)
        for (int b = 0; b < order_; ++b)
            if (compose(a, b) == 0) inverse_[static_cast<std::size_t>(a)] = b;
    if (std::find(inverse_.begin(), inverse_.end(), -1) != inverse_.end())
        throw GroupError("Cayley table has an element without inverse");
}

const std::vector<int>& FiniteGroup::permutation(int g) const {
    if (kind_ != GroupKind::explicit_permutation) throw GroupError("not an explicit permutation group");
    return perms_.at(static_cast<std::size_t>(g));
}

bool FiniteGroup::verify_axioms() const {
    const int n = order_;
    for (int a = 0; a < n; ++a) {
        if (compose(0, a) != a || compose(a, 0) != a) return false;
        std::vector<bool> row(static_cast<std::size_t>(n)), col(static_cast<std::size_t>(n));
        for (int b = 0; b < n; ++b) {
            const int ab = compose(a, b), ba = compose(b, a);
            if (ab < 0 || ab >= n || row[static_cast<std::size_t>(ab)]) return false;
            if (col[static_cast<std::size_t>(ba)]) return false;
            row[static_cast<std::size_t>(ab)] = true;
            col[static_cast<std::size_t>(ba)] = true;
        }
    }
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c)
                if (compose(compose(a, b), c) != compose(a, compose(b, c))) return false;
    return true;
}

int FiniteGroup::rotation_index(int g) const {
    if (kind_ == GroupKind::explicit_permutation) throw GroupError("no rotation index for explicit groups");
    return g % n_;
}

bool FiniteGroup::is_reflection(int g) const {
    return kind_ == GroupKind::dihedral && g >= n_;
}

bool FiniteGroup::same_as(const FiniteGroup& other) const {
    return this == &other || (kind_ == other.kind_ && order_ == other.order_ && table_ == other.table_ &&
                              perms_ == other.perms_);
}

GroupElement::GroupElement(std::shared_ptr<const FiniteGroup> group, int index)
    : group_(std::move(group)), index_(index) {
    if (!group_) throw GroupError("group element without group");
    if (index_ < 0 || index_ >= group_->order()) throw GroupError("group element index out of range");
}

bool GroupElement::operator==(const GroupElement& other) const {
    return index_ == other.index_ && group_->same_as(*other.group_);
}

GroupElement compose(const GroupElement& g, const GroupElement& h) {
    if (!g.group().same_as(h.group())) throw GroupError("cannot compose elements of different groups");
    return {g.group_ptr(), g.group().compose(g.index(), h.index())};
}

std::string to_string(RepFlavor flavor) {
    switch (flavor) {
        case RepFlavor::rotation2d: return "rotation2d";
        case RepFlavor::regular: return "regular";
        case RepFlavor::diagonal_permutation: return "diagonal-permutation";
        case RepFlavor::trivial: return "trivial";
        case RepFlavor::padded: return "padded";
    }
    return "unknown";
}

Representation::Representation(std::shared_ptr<const FiniteGroup> group, std::vector<Matrix> matrices,
                               RepFlavor flavor, int blocks)
    : group_(std::move(group)), matrices_(std::move(matrices)), flavor_(flavor), blocks_(blocks) {
    if (!group_) throw GroupError("representation without group");
    if (static_cast<int>(matrices_.size()) != group_->order())
        throw GroupError("representation needs one matrix per group element");
    dim_ = static_cast<int>(matrices_.front().rows());
    if (dim_ < 1) throw GroupError("representation dimension must be positive");
    for (const auto& m : matrices_)
        if (m.rows() != dim_ || m.cols() != dim_) throw GroupError("representation matrices must be square and equal-sized");
    if (orthogonality_error() > kRepTolerance) throw GroupError("representation is not orthogonal");
    if (homomorphism_error() > kRepTolerance) throw GroupError("matrices do not form a homomorphism");
    if ((flavor_ == RepFlavor::regular || flavor_ == RepFlavor::diagonal_permutation) && !is_permutation())
        throw GroupError("permutation flavor requires 0/1 permutation matrices");
}

bool Representation::is_permutation() const {
    for (const auto& m : matrices_) {
        for (int i = 0; i < dim_; ++i) {
            int ones = 0;
            for (int j = 0; j < dim_; ++j) {
                const double v = m(i, j);
                if (v == 1.0) ++ones;
                else if (v != 0.0) return false;
            }
            if (ones != 1) return false;
        }
        for (int j = 0; j < dim_; ++j)
            if (m.col(j).sum() != 1.0) return false;
    }
    return true;
}

Matrix Representation::invariant_projector() const {
    Matrix p = Matrix::Zero(dim_, dim_);
    for (const auto& m : matrices_) p += m;
    return p / static_cast<double>(matrices_.size());
}

int Representation::invariant_dim() const {
    return static_cast<int>(std::lround(invariant_projector().trace()));
}

double Representation::homomorphism_error() const {
    double err = (matrices_[0] - Matrix::Identity(dim_, dim_)).cwiseAbs().maxCoeff();
    const int n = group_->order();
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const Matrix diff = matrix(a) * matrix(b) - matrix(group_->compose(a, b));
            err = std::max(err, diff.cwiseAbs().maxCoeff());
        }
    return err;
}

double Representation::orthogonality_error() const {
    double err = 0.0;
    for (const auto& m : matrices_)
        err = std::max(err, (m.transpose() * m - Matrix::Identity(dim_, dim_)).cwiseAbs().maxCoeff());
    return err;
}

Representation rotation2d_rep(std::shared_ptr<const FiniteGroup> group) {
    if (group->kind() == GroupKind::explicit_permutation)
        throw GroupError("explicit permutation groups have no canonical planar action");
    const int n = group->rotation_order();
    std::vector<Matrix> mats;
    mats.reserve(static_cast<std::size_t>(group->order()));
    for (int g = 0; g < group->order(); ++g) {
        const int j = group->rotation_index(g);
        Matrix r(2, 2);
        // Exact values at multiples of pi/2 keep permutation-like reps exactly orthogonal.
        double c = std::cos(2.0 * std::numbers::pi * j / n), s = std::sin(2.0 * std::numbers::pi * j / n);
        if ((4 * j) % n == 0) {
            const int quarter = (4 * j / n) % 4;
            static constexpr double cs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
            c = cs[quarter][0];
            s = cs[quarter][1];
        }
        r << c, -s, s, c;
        if (group->is_reflection(g)) r.col(1) *= -1.0;  // Rot(theta) * diag(1, -1)
        mats.push_back(std::move(r));
    }
    return {std::move(group), std::move(mats), RepFlavor::rotation2d};
}

Representation regular_rep(std::shared_ptr<const FiniteGroup> group, int max_order) {
    const int n = group->order();
    if (n > max_order) throw GroupError("regular representation exceeds order cap");
    std::vector<Matrix> mats;
    mats.reserve(static_cast<std::size_t>(n));
    for (int g = 0; g < n; ++g) {
        Matrix m = Matrix::Zero(n, n);
        for (int j = 0; j < n; ++j) m(group->compose(g, j), j) = 1.0;
        mats.push_back(std::move(m));
    }
    return {std::move(group), std::move(mats), RepFlavor::regular};
}

Representation trivial_rep(std::shared_ptr<const FiniteGroup> group, int dim) {
    std::vector<Matrix> mats(static_cast<std::size_t>(group->order()), Matrix::Identity(dim, dim));
    return {std::move(group), std::move(mats), RepFlavor::trivial};
}

Representation diagonal_permutation_rep(const Representation& base, int k) {
    if (!base.is_permutation() || base.flavor() == RepFlavor::rotation2d)
        throw GroupError("diagonal permutation representation needs a permutation base");
    if (k < 2) throw GroupError("diagonal permutation representation needs k >= 2");
    const int d = base.dim();
    std::vector<Matrix> mats;
    for (const auto& m : base.matrices()) {
        Matrix big = Matrix::Zero(k * d, k * d);
        for (int b = 0; b < k; ++b) big.block(b * d, b * d, d, d) = m;
        mats.push_back(std::move(big));
    }
    return {base.group_ptr(), std::move(mats), RepFlavor::diagonal_permutation, k * base.blocks()};
}

Vector act(const Representation& rep, const GroupElement& g, const Vector& x) {
    if (!rep.group().same_as(g.group())) throw GroupError("element does not belong to the representation's group");
    if (x.size() != rep.dim()) throw GroupError("vector length does not match representation dimension");
    return rep.matrix(g.index()) * x;
}

Matrix act_batch(const Representation& rep, int g, const Matrix& x) {
    if (x.rows() != rep.dim()) throw GroupError("batch rows do not match representation dimension");
    return rep.matrix(g) * x;
}

}  // namespace equiflow
