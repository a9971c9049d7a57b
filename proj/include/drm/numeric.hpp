#ifndef DRM_NUMERIC_HPP
#define DRM_NUMERIC_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include <Eigen/Dense>

#include "drm/basis.hpp"
#include "drm/error.hpp"

namespace drm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum_i exp(args[i])), shifted by the max argument. Returns -inf for an
// empty range or when every argument is -inf.
inline double log_sum_exp(std::span<const double> args) {
  if (args.empty()) return kNegInf;
  const double mx = *std::max_element(args.begin(), args.end());
  if (mx == kNegInf) return kNegInf;
  if (mx == std::numeric_limits<double>::infinity()) return mx;
  double sum = 0.0;
  for (double a : args) sum += std::exp(a - mx);
  return mx + std::log(sum);
}

/// alpha = -log sum_i w_i exp(beta' q(y_i)): the normalizer of an exponentially
/// tilted discrete law.
inline double compute_alpha(const BasisSpec& basis, std::span<const double> weights,
                            const Eigen::VectorXd& beta, std::span<const double> atoms) {
  require(weights.size() == atoms.size(), "weights and atoms differ in length");
  require(beta.size() == basis.dim(), "beta has the wrong dimension");
  std::vector<double> args(atoms.size());
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    require(weights[i] >= 0.0, "weights must be nonnegative");
    args[i] = std::log(weights[i]) + beta.dot(eval_basis(basis, atoms[i]));
  }
  const double lse = log_sum_exp(args);
  if (lse == kNegInf)
    fail(ErrorCode::infeasible_state, "normalizer undefined: every exponent is -inf");
  return -lse;
}

}  // namespace drm

#endif  // DRM_NUMERIC_HPP
