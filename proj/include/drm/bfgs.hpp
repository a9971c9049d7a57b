#ifndef DRM_BFGS_HPP
#define DRM_BFGS_HPP

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace drm {

struct BfgsOptions {
  double grad_tol = 1e-6;  // on the infinity norm of the gradient
  int max_iter = 500;
  double backtrack = 0.5;
  double armijo = 1e-4;
  int max_backtracks = 60;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trajectory;  // objective at each accepted iterate
};

/// Maximizes `objective(x, grad) -> value` by BFGS with backtracking.
///
/// The objective returns -inf or NaN for points outside its domain; the line
/// search backs off from those. `inv_hess0` is
/// the initial approximation to the inverse of the negated Hessian.
///
/// Near the optimum the Armijo test can drown in rounding error of the
/// objective; a step whose value change is at rounding level is accepted when
/// it reduces the gradient norm.
template <typename Objective>
BfgsResult maximize_bfgs(Objective&& objective, Eigen::VectorXd x0,
                         const Eigen::MatrixXd& inv_hess0, const BfgsOptions& opt) {
  BfgsResult res;
  const auto dim = x0.size();
  Eigen::VectorXd g(dim);
  double f = objective(x0, g);
  ++res.evaluations;
  if (!std::isfinite(f)) {
    res.x = x0;
    res.value = f;
    res.grad = g;
    res.message = "objective not finite at the starting point";
    return res;
  }
  Eigen::MatrixXd hinv = inv_hess0;
  Eigen::VectorXd x = std::move(x0);
  res.trajectory.push_back(f);

  Eigen::VectorXd x_new(dim), g_new(dim);
  for (int it = 0; it < opt.max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }
    Eigen::VectorXd dir = hinv * g;
    double slope = g.dot(dir);
    if (!(slope > 0.0)) {
      // Lost positive definiteness: restart along the preconditioned gradient.
      hinv = inv_hess0;
      dir = hinv * g;
      slope = g.dot(dir);
    }

    double t = 1.0;
    bool accepted = false;
    double f_new = 0.0;
    for (int b = 0; b < opt.max_backtracks; ++b, t *= opt.backtrack) {
      x_new = x + t * dir;
      f_new = objective(x_new, g_new);
      ++res.evaluations;
      if (!std::isfinite(f_new)) continue;
      if (f_new >= f + opt.armijo * t * slope) {
        accepted = true;
        break;
      }
      const double noise = 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(f));
      if (std::abs(f_new - f) <= noise &&
          g_new.lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>()) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      res.message = "line search failed to find an ascent step";
      break;
    }

    const Eigen::VectorXd s = x_new - x;
    // Curvature pair for the minimization of -f.
    const Eigen::VectorXd yv = g - g_new;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = hinv * yv;
      hinv += (rho * rho * yv.dot(hy) + rho) * (s * s.transpose()) -
              rho * (hy * s.transpose() + s * hy.transpose());
    }
    x = x_new;
    g = g_new;
    f = f_new;
    res.trajectory.push_back(f);
    res.iterations = it + 1;
  }
  if (!res.converged && res.message.empty()) {
    if (g.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
    } else {
      res.message = "iteration limit reached";
    }
  }
  res.x = std::move(x);
  res.value = f;
  res.grad = std::move(g);
  return res;
}

}  // namespace drm

#endif  // DRM_BFGS_HPP
