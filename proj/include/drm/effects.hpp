#ifndef DRM_EFFECTS_HPP
#define DRM_EFFECTS_HPP

// Causal contrasts from a fitted DRM, and the regression / weighting
// comparators. Levels are 1-based; every operation takes an explicit
// (treated, control) pair. Propensity-based estimators model
// P(A = treated | x, A in {treated, control}).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/counterfactual.hpp"
#include "drm/dataset.hpp"
#include "drm/error.hpp"
#include "drm/features.hpp"
#include "drm/fit.hpp"

namespace drm {

enum class Estimand { ate, cate, qtet };

inline std::string to_string(Estimand e) {
  switch (e) {
    case Estimand::ate: return "ATE";
    case Estimand::cate: return "CATE";
    case Estimand::qtet: return "QTET";
  }
  return "?";
}

struct EffectReport {
  Estimand estimand = Estimand::ate;
  std::string estimator;
  std::vector<double> values;
  /// QTET: probability levels. CATE: unused.
  std::vector<double> probs;
  /// CATE: one covariate row per value.
  Eigen::MatrixXd points;
  std::string treated;
  std::string control;

  double value() const {
    require(!values.empty(), "empty effect report");
    return values.front();
  }
};

inline nlohmann::json to_json(const EffectReport& r) {
  nlohmann::json j{{"estimand", to_string(r.estimand)},
                   {"estimator", r.estimator},
                   {"treated", r.treated},
                   {"control", r.control}};
  switch (r.estimand) {
    case Estimand::ate: j["value"] = r.value(); break;
    case Estimand::qtet: j["probs"] = r.probs; j["values"] = r.values; break;
    case Estimand::cate: {
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index i = 0; i < r.points.rows(); ++i) {
        std::vector<double> x(static_cast<std::size_t>(r.points.cols()));
        for (Eigen::Index c = 0; c < r.points.cols(); ++c) x[static_cast<std::size_t>(c)] = r.points(i, c);
        rows.push_back({{"x", x}, {"value", r.values[static_cast<std::size_t>(i)]}});
      }
      j["points"] = rows;
      break;
    }
  }
  return j;
}

inline std::string to_text(const EffectReport& r) {
  std::ostringstream os;
  char buf[128];
  os << to_string(r.estimand) << "  " << r.estimator << "  (" << r.treated << " vs " << r.control << ")\n";
  switch (r.estimand) {
    case Estimand::ate:
      std::snprintf(buf, sizeof buf, "  %-10s %14.6f\n", "value", r.value());
      os << buf;
      break;
    case Estimand::qtet:
      std::snprintf(buf, sizeof buf, "  %-10s %14s\n", "prob", "value");
      os << buf;
      for (std::size_t i = 0; i < r.values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "  %-10.4g %14.6f\n", r.probs[i], r.values[i]);
        os << buf;
      }
      break;
    case Estimand::cate:
      for (Eigen::Index i = 0; i < r.points.rows(); ++i) {
        os << "  x=(";
        for (Eigen::Index c = 0; c < r.points.cols(); ++c) {
          std::snprintf(buf, sizeof buf, "%s%.4g", c ? ", " : "", r.points(i, c));
          os << buf;
        }
        std::snprintf(buf, sizeof buf, ")  %14.6f\n", r.values[static_cast<std::size_t>(i)]);
        os << buf;
      }
      break;
  }
  return os.str();
}

namespace detail {

inline void check_pair(const Dataset& data, int treated, int control) {
  require(treated >= 1 && treated <= data.levels(), "treated level out of range");
  require(control >= 1 && control <= data.levels(), "control level out of range");
}

inline void check_probs(const std::vector<double>& probs) {
  require(!probs.empty(), "at least one probability level is required");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] > 0.0 && probs[i] < 1.0))
      fail(ErrorCode::invalid_input, "probability levels must lie in (0, 1)");
    require(i == 0 || probs[i] > probs[i - 1], "probability levels must be strictly increasing");
  }
}

inline EffectReport make_report(Estimand e, std::string tag, const Dataset& data, int treated, int control) {
  EffectReport r;
  r.estimand = e;
  r.estimator = std::move(tag);
  r.treated = data.level_labels()[static_cast<std::size_t>(treated - 1)];
  r.control = data.level_labels()[static_cast<std::size_t>(control - 1)];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------- DRM

inline double drm_cate(const DrmFit& fit, const Eigen::Ref<const Eigen::VectorXd>& x, int treated,
                       int control) {
  if (treated == control) {
    detail::check_level(fit, treated);
    return 0.0;
  }
  return conditional_mean(fit, x, treated) - conditional_mean(fit, x, control);
}

inline EffectReport drm_cate(const DrmFit& fit, const Dataset& data, const Eigen::MatrixXd& points,
                             int treated, int control) {
  detail::check_pair(data, treated, control);
  EffectReport r = detail::make_report(Estimand::cate, "DRM", data, treated, control);
  r.points = points;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    r.values.push_back(drm_cate(fit, points.row(i).transpose(), treated, control));
  return r;
}

/// CATE averaged over the covariates of all n units.
inline double drm_ate(const DrmFit& fit, const Dataset& data, int treated, int control) {
  detail::check_pair(data, treated, control);
  if (treated == control) return 0.0;
  double sum = 0.0;
  for (int i = 0; i < data.n(); ++i) sum += drm_cate(fit, data.x_row(i), treated, control);
  return sum / data.n();
}

/// Quantile contrasts of the two counterfactual laws mixed over the units
/// observed at the treated level.
inline EffectReport drm_qtet(const DrmFit& fit, const Dataset& data, int treated, int control,
                             const std::vector<double>& probs) {
  detail::check_pair(data, treated, control);
  detail::check_probs(probs);
  EffectReport r = detail::make_report(Estimand::qtet, "DRM", data, treated, control);
  r.probs = probs;
  if (treated == control) {
    r.values.assign(probs.size(), 0.0);
    return r;
  }
  const auto g1 = marginal_counterfactual_cdf(fit, data, treated, treated);
  const auto g0 = marginal_counterfactual_cdf(fit, data, control, treated);
  for (double p : probs) r.values.push_back(g1.quantile(p) - g0.quantile(p));
  return r;
}

// ---------------------------------------------------------------- regression

/// Least-squares regression of y on (1, phi(x)) within one arm.
struct OutcomeModel {
  FeatureMap features;
  Eigen::VectorXd coef;

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return features.eval(x).dot(coef);
  }
  Eigen::VectorXd predict_all(const Eigen::MatrixXd& x) const { return features.design(x) * coef; }
};

inline OutcomeModel fit_outcome_model(const Dataset& data, const FeatureMap& features, int level) {
  require(level >= 1 && level <= data.levels(), "level out of range");
  OutcomeModel m{features.with_intercept(), {}};
  m.features.validate(data.p());
  const auto& rows = data.group(level);
  const int cols = m.features.dim();
  Eigen::MatrixXd design(static_cast<Eigen::Index>(rows.size()), cols);
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    design.row(row) = m.features.eval(data.x_row(rows[r])).transpose();
    y[row] = data.y(rows[r]);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < cols) {
    std::string names;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index c = qr.rank(); c < cols; ++c)
      names += (names.empty() ? "" : ", ") + m.features.terms()[static_cast<std::size_t>(perm[c])].label();
    fail(ErrorCode::rank_deficient,
         "outcome regression for level " + data.level_labels()[static_cast<std::size_t>(level - 1)] +
             " is rank deficient (rank " + std::to_string(qr.rank()) + " of " + std::to_string(cols) +
             "); collinear terms: " + names);
  }
  m.coef = qr.solve(y);
  return m;
}

inline double gformula_ate(const Dataset& data, const FeatureMap& features, int treated, int control) {
  detail::check_pair(data, treated, control);
  if (treated == control) return 0.0;
  const OutcomeModel m1 = fit_outcome_model(data, features, treated);
  const OutcomeModel m0 = fit_outcome_model(data, features, control);
  return (m1.predict_all(data.x()) - m0.predict_all(data.x())).mean();
}

// ---------------------------------------------------------------- propensity

struct PropensityModel {
  FeatureMap features;
  Eigen::VectorXd coef;
  /// Fitted probabilities for every unit of the dataset, clipped.
  Eigen::VectorXd fitted;
  int treated = 2;
  int control = 1;
  int iterations = 0;
  bool converged = false;

  static constexpr double kClipLow = 1e-6;
  static constexpr double kClipHigh = 1.0 - 1e-6;

  static double clip(double p) { return std::clamp(p, kClipLow, kClipHigh); }

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return clip(1.0 / (1.0 + std::exp(-features.eval(x).dot(coef))));
  }

  /// Fixed probability for every unit; used by tests and degenerate designs.
  static PropensityModel constant(const Dataset& data, double p, int treated, int control) {
    PropensityModel m{FeatureMap({FeatureTerm::intercept()}), Eigen::VectorXd::Constant(1, std::log(p / (1 - p))),
                      Eigen::VectorXd::Constant(data.n(), clip(p)), treated, control, 0, true};
    return m;
  }
};

/// Logistic regression of 1{A = treated} on (1, phi(x)) over the units in the
/// two arms, by iteratively reweighted least squares.
inline PropensityModel fit_propensity(const Dataset& data, const FeatureMap& features, int treated,
                                      int control = -1, double tol = 1e-8, int max_iter = 100) {
  if (control < 0) {
    require(data.levels() == 2, "control level required when there are more than two levels");
    control = treated == 1 ? 2 : 1;
  }
  detail::check_pair(data, treated, control);
  require(treated != control, "propensity model needs two distinct levels");
  PropensityModel m;
  m.features = features.with_intercept();
  m.features.validate(data.p());
  m.treated = treated;
  m.control = control;

  std::vector<int> rows;
  for (int i = 0; i < data.n(); ++i)
    if (data.level(i) == treated || data.level(i) == control) rows.push_back(i);
  const auto n = static_cast<Eigen::Index>(rows.size());
  const int cols = m.features.dim();
  Eigen::MatrixXd design(n, cols);
  Eigen::VectorXd z(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int i = rows[static_cast<std::size_t>(r)];
    design.row(r) = m.features.eval(data.x_row(i)).transpose();
    z[r] = data.level(i) == treated ? 1.0 : 0.0;
  }
  const double share = z.mean();
  require(share > 0.0 && share < 1.0, "both arms must be present to fit a propensity model");

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(cols);
  beta[0] = std::log(share / (1.0 - share));
  auto separated = [&](const Eigen::VectorXd& eta) {
    double dev = 0.0;
    for (Eigen::Index r = 0; r < n; ++r)
      dev += z[r] > 0.5 ? std::log1p(std::exp(-eta[r])) : std::log1p(std::exp(eta[r]));
    return dev < 1e-6 * static_cast<double>(n) || beta.lpNorm<Eigen::Infinity>() > 1e6;
  };
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd eta = design * beta;
    const Eigen::ArrayXd pi = (1.0 + (-eta.array()).exp()).inverse();
    const Eigen::ArrayXd w = (pi * (1.0 - pi)).max(1e-12);
    const Eigen::MatrixXd info = design.transpose() * w.matrix().asDiagonal() * design;
    const Eigen::VectorXd step =
        info.colPivHouseholderQr().solve(design.transpose() * (z.array() - pi).matrix());
    if (!step.allFinite())
      fail(ErrorCode::separation, "propensity IRLS produced a non-finite step (separation?)");
    beta += step;
    m.iterations = it;
    if (step.lpNorm<Eigen::Infinity>() < tol) {
      m.converged = true;
      break;
    }
    if (it >= 8 && separated(design * beta))
      fail(ErrorCode::separation,
           "treatment is perfectly separated by the propensity features; coefficients diverge");
  }
  if (!m.converged && separated(design * beta))
    fail(ErrorCode::separation, "treatment is perfectly separated by the propensity features");
  m.coef = beta;
  m.fitted.resize(data.n());
  for (int i = 0; i < data.n(); ++i) m.fitted[i] = m.predict(data.x_row(i));
  return m;
}

// ---------------------------------------------------------------- weighting

namespace detail {

inline void check_propensity(const Dataset& data, const PropensityModel& prop) {
  require(prop.fitted.size() == data.n(), "propensity model was fitted to a different dataset");
}

}  // namespace detail

/// Self-normalized (Hajek) inverse probability weighting.
inline double ipw_ate(const Dataset& data, const PropensityModel& prop, int treated, int control) {
  detail::check_pair(data, treated, control);
  if (treated == control) return 0.0;
  detail::check_propensity(data, prop);
  double s1 = 0, w1 = 0, s0 = 0, w0 = 0;
  for (int i = 0; i < data.n(); ++i) {
    const double pi = PropensityModel::clip(prop.fitted[i]);
    if (data.level(i) == treated) {
      s1 += data.y(i) / pi;
      w1 += 1.0 / pi;
    } else if (data.level(i) == control) {
      s0 += data.y(i) / (1.0 - pi);
      w0 += 1.0 / (1.0 - pi);
    }
  }
  if (!(w1 > 0.0) || !(w0 > 0.0)) fail(ErrorCode::invalid_input, "an arm has zero total weight");
  return s1 / w1 - s0 / w0;
}

/// Normalized Hajek weights per arm, for inspection; each arm sums to one.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> ipw_weights(const Dataset& data, const PropensityModel& prop,
                                                               int treated, int control) {
  detail::check_pair(data, treated, control);
  detail::check_propensity(data, prop);
  Eigen::VectorXd w1 = Eigen::VectorXd::Zero(data.n()), w0 = Eigen::VectorXd::Zero(data.n());
  for (int i = 0; i < data.n(); ++i) {
    const double pi = PropensityModel::clip(prop.fitted[i]);
    if (data.level(i) == treated) w1[i] = 1.0 / pi;
    if (data.level(i) == control) w0[i] = 1.0 / (1.0 - pi);
  }
  if (!(w1.sum() > 0.0) || !(w0.sum() > 0.0)) fail(ErrorCode::invalid_input, "an arm has zero total weight");
  return {w1 / w1.sum(), w0 / w0.sum()};
}

/// Augmented IPW with supplied outcome predictions for both arms.
inline double aipw_ate(const Dataset& data, const PropensityModel& prop, const Eigen::VectorXd& m1,
                       const Eigen::VectorXd& m0, int treated, int control) {
  detail::check_pair(data, treated, control);
  if (treated == control) return 0.0;
  detail::check_propensity(data, prop);
  require(m1.size() == data.n() && m0.size() == data.n(), "one outcome prediction per unit required");
  double sum = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const double pi = PropensityModel::clip(prop.fitted[i]);
    double v = m1[i] - m0[i];
    if (data.level(i) == treated) v += (data.y(i) - m1[i]) / pi;
    else if (data.level(i) == control) v -= (data.y(i) - m0[i]) / (1.0 - pi);
    sum += v;
  }
  return sum / data.n();
}

inline double aipw_ate(const Dataset& data, const PropensityModel& prop, const FeatureMap& features,
                       int treated, int control) {
  detail::check_pair(data, treated, control);
  if (treated == control) return 0.0;
  const OutcomeModel o1 = fit_outcome_model(data, features, treated);
  const OutcomeModel o0 = fit_outcome_model(data, features, control);
  return aipw_ate(data, prop, o1.predict_all(data.x()), o0.predict_all(data.x()), treated, control);
}

/// Unnormalized (Horvitz-Thompson) IPW: aipw_ate with zero outcome models.
inline double ipw_ate_ht(const Dataset& data, const PropensityModel& prop, int treated, int control) {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(data.n());
  return aipw_ate(data, prop, zero, zero, treated, control);
}

/// Left-continuous quantile of the discrete law putting weight w_i on v_i.
inline double weighted_quantile(const std::vector<double>& values, const std::vector<double>& weights,
                                double prob) {
  require(values.size() == weights.size() && !values.empty(), "weighted quantile needs matching non-empty inputs");
  if (!(prob > 0.0 && prob < 1.0)) fail(ErrorCode::invalid_input, "quantile level must lie in (0, 1)");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), "weights must be nonnegative and finite");
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorCode::invalid_input, "weights sum to zero");
  double run = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    run += weights[order[k]];
    // Ties in value share one step of the CDF.
    if (k + 1 < order.size() && values[order[k + 1]] == values[order[k]]) continue;
    if (run / total >= prob) return values[order[k]];
  }
  return values[order.back()];
}

/// Treated-arm empirical quantiles against control quantiles reweighted by
/// pi / (1 - pi) towards the treated covariate law.
inline EffectReport ipw_qtet(const Dataset& data, const PropensityModel& prop, int treated, int control,
                             const std::vector<double>& probs) {
  detail::check_pair(data, treated, control);
  detail::check_probs(probs);
  EffectReport r = detail::make_report(Estimand::qtet, "IPW", data, treated, control);
  r.probs = probs;
  if (treated == control) {
    r.values.assign(probs.size(), 0.0);
    return r;
  }
  detail::check_propensity(data, prop);
  std::vector<double> y1, w1, y0, w0;
  for (int i = 0; i < data.n(); ++i) {
    const double pi = PropensityModel::clip(prop.fitted[i]);
    if (data.level(i) == treated) {
      y1.push_back(data.y(i));
      w1.push_back(1.0);
    } else if (data.level(i) == control) {
      y0.push_back(data.y(i));
      w0.push_back(pi / (1.0 - pi));
    }
  }
  if (y1.empty()) fail(ErrorCode::invalid_input, "no treated units");
  if (y0.empty()) fail(ErrorCode::invalid_input, "no control units");
  for (double p : probs) r.values.push_back(weighted_quantile(y1, w1, p) - weighted_quantile(y0, w0, p));
  return r;
}

inline EffectReport scalar_report(Estimand e, const std::string& tag, const Dataset& data, int treated,
                                  int control, double value) {
  EffectReport r = detail::make_report(e, tag, data, treated, control);
  r.values = {value};
  return r;
}

}  // namespace drm

#endif  // DRM_EFFECTS_HPP
