#pragma once

#include <functional>
#include <vector>

#include "mlae/matrix.hpp"

namespace mlae {

/// Central-difference validation of analytic gradients.
///
/// `fn` maps parameter matrices to a scalar and must be deterministic;
/// this is checked by evaluating twice at the base point (ContractError
/// if the two values differ). `analytic` holds one gradient matrix per
/// parameter, shape-matched. Returns the max over all entries of
///   |analytic - central_difference| / (|central_difference| + 1e-12).
/// eps must lie in [1e-7, 1e-3].
double finite_diff_check(const std::function<double(const std::vector<Matrix>&)>& fn,
                         const std::vector<Matrix>& params,
                         const std::vector<Matrix>& analytic, double eps);

}  // namespace mlae
