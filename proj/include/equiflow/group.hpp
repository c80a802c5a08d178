#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace equiflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class GroupError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Default upper bound on group order; every invariant check is exhaustive below it.
inline constexpr int kDefaultMaxGroupOrder = 64;

enum class GroupKind { cyclic, dihedral, explicit_permutation };

/**
 * A finite group stored as a Cayley table over element indices.
 *
 * Cyclic C_n: index j is r^j.  Dihedral D_n: index j < n is r^j and index
 * n + j is r^j s, with s r = r^{-1} s.  Explicit permutation groups are the
 * closure of a generator set, composition (g h)(i) = g(h(i)).
 *
 * Immutable after construction.
 */
class FiniteGroup {
public:
    static FiniteGroup cyclic(int n, int max_order = kDefaultMaxGroupOrder);
    static FiniteGroup dihedral(int n, int max_order = kDefaultMaxGroupOrder);
    static FiniteGroup trivial() { return cyclic(1); }
    static FiniteGroup from_permutations(const std::vector<std::vector<int>>& generators,
                                         int max_order = kDefaultMaxGroupOrder);

    /// Parses "C4", "D8", "T<n>", or "T" (translation group realized as C_n on a circular grid of
    /// size `translation_size`).  "trivial" or "C1" gives the one-element group.
    static FiniteGroup parse(const std::string& name, int translation_size = 0);

    GroupKind kind() const { return kind_; }
    int order() const { return order_; }
    int identity() const { return 0; }
    /// Rotation count n for C_n and D_n.
    int rotation_order() const { return n_; }
    const std::string& name() const { return name_; }

    int compose(int g, int h) const { return table_[static_cast<std::size_t>(g * order_ + h)]; }
    int inverse(int g) const { return inverse_[static_cast<std::size_t>(g)]; }

    /// Permutation realized by element g (explicit groups only).
    const std::vector<int>& permutation(int g) const;

    /// Checks closure, identity, inverses and associativity over every triple.
    bool verify_axioms() const;

    /// Rotation step and reflection flag of element g (C_n and D_n only).
    int rotation_index(int g) const;
    bool is_reflection(int g) const;

    bool same_as(const FiniteGroup& other) const;

private:
    FiniteGroup() = default;
    void finish_inverses();

    GroupKind kind_ = GroupKind::cyclic;
    int order_ = 1;
    int n_ = 1;
    std::string name_;
    std::vector<int> table_;
    std::vector<int> inverse_;
    std::vector<std::vector<int>> perms_;
};

class GroupElement {
public:
    GroupElement(std::shared_ptr<const FiniteGroup> group, int index);

    const FiniteGroup& group() const { return *group_; }
    const std::shared_ptr<const FiniteGroup>& group_ptr() const { return group_; }
    int index() const { return index_; }

    GroupElement inverse() const { return {group_, group_->inverse(index_)}; }
    bool operator==(const GroupElement& other) const;

private:
    std::shared_ptr<const FiniteGroup> group_;
    int index_;
};

/// Group law; throws GroupError when g and h belong to different groups.
GroupElement compose(const GroupElement& g, const GroupElement& h);

enum class RepFlavor { rotation2d, regular, diagonal_permutation, trivial, padded };

std::string to_string(RepFlavor flavor);

/**
 * Orthogonal matrix representation of a finite group.  Construction validates the
 * homomorphism, identity and orthogonality laws exhaustively; non-orthogonal
 * representations are rejected because the standard normal base density is only
 * invariant under orthogonal actions.
 */
class Representation {
public:
    Representation(std::shared_ptr<const FiniteGroup> group, std::vector<Matrix> matrices,
                   RepFlavor flavor, int blocks = 1);

    const FiniteGroup& group() const { return *group_; }
    const std::shared_ptr<const FiniteGroup>& group_ptr() const { return group_; }
    int dim() const { return dim_; }
    RepFlavor flavor() const { return flavor_; }
    /// Number of diagonal copies for diagonal-permutation reps, 1 otherwise.
    int blocks() const { return blocks_; }
    const Matrix& matrix(int g) const { return matrices_[static_cast<std::size_t>(g)]; }
    const std::vector<Matrix>& matrices() const { return matrices_; }

    bool is_permutation() const;

    /// Projector onto the subspace fixed by every R(g).
    Matrix invariant_projector() const;
    /// Dimension of the fixed subspace.
    int invariant_dim() const;

    /// Max deviation from the homomorphism, identity and orthogonality laws.
    double homomorphism_error() const;
    double orthogonality_error() const;

private:
    std::shared_ptr<const FiniteGroup> group_;
    std::vector<Matrix> matrices_;
    RepFlavor flavor_;
    int dim_;
    int blocks_;
};

Representation rotation2d_rep(std::shared_ptr<const FiniteGroup> group);
Representation regular_rep(std::shared_ptr<const FiniteGroup> group,
                           int max_order = kDefaultMaxGroupOrder);
Representation trivial_rep(std::shared_ptr<const FiniteGroup> group, int dim);
/// Block-diagonal repetition of a permutation representation k times (k >= 2).
Representation diagonal_permutation_rep(const Representation& base, int k);

/// R(g) x.
Vector act(const Representation& rep, const GroupElement& g, const Vector& x);
/// R(g) X for a batch stored column-wise.
Matrix act_batch(const Representation& rep, int g, const Matrix& x);

}  // namespace equiflow
