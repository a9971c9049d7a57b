#ifndef DRM_COUNTERFACTUAL_HPP
#define DRM_COUNTERFACTUAL_HPP

// Counterfactual laws implied by a fitted DRM. Every law lives on the observed
// outcomes: the fitted baseline weights tilted by exp{alpha + beta' q(y)},
// with alpha recomputed at the query covariates so the masses sum to one.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/dataset.hpp"
#include "drm/error.hpp"
#include "drm/fit.hpp"
#include "drm/numeric.hpp"

namespace drm {

/// Step CDF on a strictly increasing atom grid.
class CounterfactualCdf {
 public:
  CounterfactualCdf() = default;

  CounterfactualCdf(std::vector<double> atoms, std::vector<double> masses, int level,
                    std::string descriptor)
      : atoms_(std::move(atoms)), masses_(std::move(masses)), level_(level),
        descriptor_(std::move(descriptor)) {
    require(!atoms_.empty(), "a distribution needs at least one atom");
    require(atoms_.size() == masses_.size(), "one mass per atom required");
    for (std::size_t i = 0; i < atoms_.size(); ++i) {
      require(std::isfinite(atoms_[i]), "atoms must be finite");
      require(i == 0 || atoms_[i] > atoms_[i - 1], "atoms must be strictly increasing");
      require(masses_[i] >= 0.0 && std::isfinite(masses_[i]), "masses must be nonnegative");
    }
    cumulative_.resize(masses_.size());
    double run = 0.0;
    for (std::size_t i = 0; i < masses_.size(); ++i) cumulative_[i] = (run += masses_[i]);
    require(std::abs(run - 1.0) < 1e-8, "masses must sum to one (got " + std::to_string(run) + ")");
  }

  std::size_t size() const { return atoms_.size(); }
  const std::vector<double>& atoms() const { return atoms_; }
  const std::vector<double>& masses() const { return masses_; }
  const std::vector<double>& cumulative() const { return cumulative_; }
  int level() const { return level_; }
  const std::string& descriptor() const { return descriptor_; }
  const std::optional<Eigen::VectorXd>& x() const { return x_; }
  void set_x(Eigen::VectorXd x) { x_ = std::move(x); }

  /// F(y) = total mass on atoms <= y.
  double cdf(double y) const {
    const auto it = std::upper_bound(atoms_.begin(), atoms_.end(), y);
    if (it == atoms_.begin()) return 0.0;
    return cumulative_[static_cast<std::size_t>(it - atoms_.begin()) - 1];
  }

  /// inf{y : F(y) >= prob}, taken over the atoms.
  double quantile(double prob) const {
    if (!(prob > 0.0 && prob < 1.0))
      fail(ErrorCode::invalid_input, "quantile level must lie in (0, 1), got " + std::to_string(prob));
    const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), prob);
    if (it == cumulative_.end()) return atoms_.back();
    return atoms_[static_cast<std::size_t>(it - cumulative_.begin())];
  }

  double mean() const {
    double m = 0.0;
    for (std::size_t i = 0; i < atoms_.size(); ++i) m += atoms_[i] * masses_[i];
    return m;
  }

  nlohmann::json provenance() const {
    nlohmann::json j{{"level", level_}, {"conditioning", descriptor_}, {"atoms", atoms_.size()}};
    if (x_) j["x"] = std::vector<double>(x_->data(), x_->data() + x_->size());
    return j;
  }

 private:
  std::vector<double> atoms_;
  std::vector<double> masses_;
  std::vector<double> cumulative_;
  int level_ = 0;
  std::string descriptor_;
  std::optional<Eigen::VectorXd> x_;
};

inline double quantile(const CounterfactualCdf& cdf, double prob) { return cdf.quantile(prob); }

namespace detail {

inline void check_level(const DrmFit& fit, int level) {
  require(level >= 1 && level <= fit.levels(),
          "treatment level " + std::to_string(level) + " outside 1.." + std::to_string(fit.levels()));
}

inline void check_x(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x) {
  require(x.allFinite(), "covariate vector must be finite");
  require(fit.spec.features.max_index() < x.size(),
          "covariate vector has " + std::to_string(x.size()) + " entries; the feature map needs " +
              std::to_string(fit.spec.features.max_index() + 1));
}

// Collapse per-observation masses onto the sorted distinct outcomes.
inline CounterfactualCdf collapse(const DrmFit& fit, const Eigen::VectorXd& mass, int level,
                                  std::string descriptor) {
  std::vector<double> atoms, masses;
  atoms.reserve(fit.support.size());
  masses.reserve(fit.support.size());
  for (const Atom& a : fit.support) {
    if (!atoms.empty() && atoms.back() == a.y) {
      masses.back() += mass[a.index];
    } else {
      atoms.push_back(a.y);
      masses.push_back(mass[a.index]);
    }
  }
  return CounterfactualCdf(std::move(atoms), std::move(masses), level, std::move(descriptor));
}

}  // namespace detail

/// alpha_k(x) = -log sum_i p_i exp{beta(x; theta_k)' q(y_i)}.
inline double conditional_alpha(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x, int level) {
  detail::check_level(fit, level);
  detail::check_x(fit, x);
  const Eigen::VectorXd b = fit.beta(x, level);
  const Eigen::VectorXd expo = fit.p_hat.array().log().matrix() + fit.atoms_q.transpose() * b;
  return -log_sum_exp(std::span<const double>(expo.data(), static_cast<std::size_t>(expo.size())));
}

/// Masses of G_k(. | x) on each observation, in the original order.
inline Eigen::VectorXd conditional_masses(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x,
                                          int level) {
  detail::check_level(fit, level);
  detail::check_x(fit, x);
  const Eigen::VectorXd b = fit.beta(x, level);
  Eigen::VectorXd expo = fit.p_hat.array().log().matrix() + fit.atoms_q.transpose() * b;
  const double alpha =
      -log_sum_exp(std::span<const double>(expo.data(), static_cast<std::size_t>(expo.size())));
  return (expo.array() + alpha).exp();
}

inline CounterfactualCdf conditional_cdf(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x,
                                         int level) {
  auto cdf = detail::collapse(fit, conditional_masses(fit, x, level), level, "covariates");
  cdf.set_x(x);
  return cdf;
}

/// E_k[Y | x] under the fitted law.
inline double conditional_mean(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x, int level) {
  return conditional_masses(fit, x, level).dot(fit.atoms_y);
}

/// Uniform mixture of G_k(. | x_i) over the selected rows of `data`.
inline CounterfactualCdf marginal_counterfactual_cdf(const DrmFit& fit, const Dataset& data, int level,
                                                     const std::vector<int>& rows,
                                                     std::string descriptor = "selected units") {
  if (rows.empty()) fail(ErrorCode::invalid_input, "subpopulation selector matched no units");
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(fit.n());
  for (int i : rows) {
    require(i >= 0 && i < data.n(), "selected row " + std::to_string(i) + " out of range");
    mass += conditional_masses(fit, data.x_row(i), level);
  }
  mass /= static_cast<double>(rows.size());
  return detail::collapse(fit, mass, level, std::move(descriptor));
}

/// Mixture over every unit observed at level `group` (e.g. the treated units).
inline CounterfactualCdf marginal_counterfactual_cdf(const DrmFit& fit, const Dataset& data, int level,
                                                     int group) {
  require(group >= 1 && group <= data.levels(), "selector level out of range");
  return marginal_counterfactual_cdf(fit, data, level, data.group(group),
                                     "units at level " + data.level_labels()[static_cast<std::size_t>(group - 1)]);
}

/// log dG_a(y|x) / dG_b(y|x) = {alpha_a(x) - alpha_b(x)} + {beta_a(x) - beta_b(x)}' q(y).
inline double log_density_ratio(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x, int a,
                                 int b, double y) {
  const Eigen::VectorXd qy = fit.basis_at(y);
  if (a == b) return 0.0;
  return conditional_alpha(fit, x, a) - conditional_alpha(fit, x, b) +
         (fit.beta(x, a) - fit.beta(x, b)).dot(qy);
}

/// CSV with a provenance line "# {json}" followed by columns y,mass,cdf.
inline void write_cdf_csv(std::ostream& out, const CounterfactualCdf& cdf,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json head = cdf.provenance();
  for (const auto& [k, v] : extra.items()) head[k] = v;
  out << "# " << head.dump() << "\n" << "y,mass,cdf\n";
  char buf[96];
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", cdf.atoms()[i], cdf.masses()[i],
                  cdf.cumulative()[i]);
    out << buf;
  }
}

inline void write_cdf_csv(const std::string& path, const CounterfactualCdf& cdf,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::invalid_input, "cannot write " + path);
  write_cdf_csv(out, cdf, extra);
}

}  // namespace drm

#endif  // DRM_COUNTERFACTUAL_HPP
