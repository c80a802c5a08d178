#include "equiflow/linalg.hpp"

#include <cmath>

namespace equiflow {

Matrix expm(const Matrix& k, int order) {
    const Eigen::Index n = k.rows();
    const double norm = k.cwiseAbs().rowwise().sum().maxCoeff();
    int squarings = 0;
    if (norm > 0.25) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.25)));
    const Matrix scaled = k / std::ldexp(1.0, squarings);

    // Horner form of sum_{m=0}^{order} A^m / m!
    Matrix result = Matrix::Identity(n, n);
    for (int m = order; m >= 1; --m) {
        result = Matrix::Identity(n, n) + scaled * result / static_cast<double>(m);
    }
    for (int s = 0; s < squarings; ++s) result = result * result;
    return result;
}

Matrix expm_frechet_adjoint(const Matrix& k, const Matrix& g, int order) {
    // exp([[A, E], [0, A]]) carries L(A, E) in its upper-right block, and the adjoint of
    // L(K, .) is L(K^T, .).
    const Eigen::Index n = k.rows();
    Matrix block = Matrix::Zero(2 * n, 2 * n);
    block.topLeftCorner(n, n) = k.transpose();
    block.bottomRightCorner(n, n) = k.transpose();
    block.topRightCorner(n, n) = g;
    return expm(block, order).topRightCorner(n, n);
}

double log_abs_det(const Matrix& m) {
    Eigen::PartialPivLU<Matrix> lu(m);
    const Matrix& packed = lu.matrixLU();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < packed.rows(); ++i) acc += std::log(std::abs(packed(i, i)));
    return acc;
}

}  // namespace equiflow
