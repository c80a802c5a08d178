#pragma once

#include "equiflow/group.hpp"

namespace equiflow {

/// Truncated Taylor order used inside scaling-and-squaring.
inline constexpr int kExpmSeriesOrder = 12;

/// Matrix exponential by scaling-and-squaring around a truncated Taylor series.
Matrix expm(const Matrix& k, int order = kExpmSeriesOrder);

/// Adjoint of the Frechet derivative of expm at k applied to g, i.e. the gradient of
/// <g, expm(k)> with respect to k.
Matrix expm_frechet_adjoint(const Matrix& k, const Matrix& g, int order = kExpmSeriesOrder);

/// log|det m| via partial-pivot LU.
double log_abs_det(const Matrix& m);

}  // namespace equiflow
