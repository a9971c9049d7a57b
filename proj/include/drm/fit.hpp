#ifndef DRM_FIT_HPP
#define DRM_FIT_HPP

#include <algorithm>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/basis.hpp"
#include "drm/model.hpp"

namespace drm {

/// Absolute residuals of the three constraints on (p, alpha):
/// total mass, identifiability moment and per-observation normalization.
struct ConstraintResiduals {
  double total_mass = 0.0;     // |sum p - 1|
  double moment = 0.0;         // ||sum p q(y)||_inf
  double normalization = 0.0;  // max_kj |sum p exp{alpha_kj + beta_kj' q} - 1|

  double max() const { return std::max({total_mass, moment, normalization}); }
};

struct FitDiagnostics {
  std::string algorithm;
  bool converged = false;
  std::string message;
  int outer_iterations = 0;
  int evaluations = 0;
  long inner_cycles = 0;
  double gradient_norm = 0.0;
  double objective = 0.0;
  ConstraintResiduals residuals;
  double wall_seconds = 0.0;
  std::vector<double> trajectory;
};

struct Atom {
  double y;
  int index;
};

/// A fitted DRM. Atoms are the observations in their original order;
/// `support` lists them sorted by y.
struct DrmFit {
  ModelSpec spec;
  ThetaParams theta_hat;
  Eigen::VectorXd p_hat;
  Eigen::VectorXd alpha_hat;
  Eigen::VectorXd lambda_hat;
  Eigen::VectorXd center;
  Eigen::VectorXd atoms_y;
  Eigen::MatrixXd atoms_q;  // d x n, centred
  std::vector<Atom> support;
  FitDiagnostics diagnostics;

  int n() const { return static_cast<int>(atoms_y.size()); }
  int levels() const { return theta_hat.levels(); }

  /// Centred basis value q(y) - center.
  Eigen::VectorXd basis_at(double y) const { return eval_basis(spec.basis, y) - center; }

  /// beta(x; theta_hat_k) for a 1-based level.
  Eigen::VectorXd beta(const Eigen::Ref<const Eigen::VectorXd>& x, int level) const {
    require(level >= 1 && level <= levels(), "treatment level out of range");
    return eval_beta(spec.features, theta_hat[level - 1], x);
  }
};

inline std::vector<Atom> sorted_support(const Eigen::VectorXd& y) {
  std::vector<Atom> s(static_cast<std::size_t>(y.size()));
  for (Eigen::Index i = 0; i < y.size(); ++i) s[static_cast<std::size_t>(i)] = {y[i], static_cast<int>(i)};
  std::stable_sort(s.begin(), s.end(), [](const Atom& a, const Atom& b) { return a.y < b.y; });
  return s;
}

inline nlohmann::json to_json(const ConstraintResiduals& r) {
  return {{"total_mass", r.total_mass}, {"moment", r.moment}, {"normalization", r.normalization}};
}

inline nlohmann::json to_json(const FitDiagnostics& d) {
  return {{"algorithm", d.algorithm},
          {"converged", d.converged},
          {"message", d.message},
          {"iterations", d.outer_iterations},
          {"evaluations", d.evaluations},
          {"inner_cycles", d.inner_cycles},
          {"gradient_norm", d.gradient_norm},
          {"objective", d.objective},
          {"residuals", to_json(d.residuals)},
          {"wall_time_seconds", d.wall_seconds}};
}

inline nlohmann::json fit_report(const DrmFit& fit) {
  nlohmann::json theta = nlohmann::json::array();
  for (int k = 0; k < fit.levels(); ++k) theta.push_back(to_json(fit.theta_hat[k]));
  return {{"model", to_json(fit.spec)},
          {"n", fit.n()},
          {"theta", theta},
          {"lambda", to_json(fit.lambda_hat)},
          {"basis_center", to_json(fit.center)},
          {"diagnostics", to_json(fit.diagnostics)}};
}

}  // namespace drm

#endif  // DRM_FIT_HPP
