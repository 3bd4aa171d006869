#include "mlae/gradcheck.hpp"

#include <cmath>

namespace mlae {

double finite_diff_check(const std::function<double(const std::vector<Matrix>&)>& fn,
                         const std::vector<Matrix>& params,
                         const std::vector<Matrix>& analytic, double eps) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw ParameterError("finite_diff_check: eps must be in [1e-7, 1e-3]");
  }
  if (params.size() != analytic.size()) {
    throw ShapeError("finite_diff_check: params/analytic count mismatch");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].same_shape(analytic[p])) {
      throw ShapeError("finite_diff_check: gradient shape mismatch at param " +
                       std::to_string(p));
    }
  }

  const double base = fn(params);
  const double base_again = fn(params);
  if (base != base_again) {
    throw ContractError("finite_diff_check: fn is not deterministic");
  }

  std::vector<Matrix> work = params;
  double max_rel = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double saved = work[p].data()[i];
      work[p].data()[i] = saved + eps;
      const double up = fn(work);
      work[p].data()[i] = saved - eps;
      const double down = fn(work);
      work[p].data()[i] = saved;
      const double central = (up - down) / (2.0 * eps);
      const double rel =
          std::fabs(analytic[p].data()[i] - central) / (std::fabs(central) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mlae
