#ifndef DRM_EL_SOLVER_HPP
#define DRM_EL_SOLVER_HPP

// Empirical-likelihood fitting of the density ratio model.
//
// The baseline G0 puts mass p_i on every observed y_i. For fixed theta the
// profile problem is solved either by the alternating scheme (p <- closed form
// given alpha and lambda, alpha <- normalizers given p, lambda <- Newton root
// of the moment condition) or by the covariate-free marginal DRM, whose p is
// reused for every theta. theta is then found by BFGS on the log-EL.
//
// Observations sharing a level and an identical feature row are collapsed
// into weighted units; every O(n^2) pass runs over (units x atoms).

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/bfgs.hpp"
#include "drm/dataset.hpp"
#include "drm/error.hpp"
#include "drm/fit.hpp"
#include "drm/model.hpp"
#include "drm/numeric.hpp"

namespace drm {

struct SolverConfig {
  enum class Algorithm { iterative, marginal_approx };

  Algorithm algorithm = Algorithm::marginal_approx;
  double inner_tol = 1e-8;
  int inner_max_iter = 5000;
  double outer_tol = 1e-6;
  int outer_max_iter = 500;
  double lambda_newton_tol = 1e-10;
  double damping = 0.5;
  /// Anderson memory for the alternating inner solver; 0 runs plain cycles.
  int acceleration = 5;
  /// Debug: keep theta at zero and only solve for (p, alpha, lambda).
  bool freeze_theta = false;

  void validate() const {
    require(inner_tol > 0 && outer_tol > 0 && lambda_newton_tol > 0,
            "solver tolerances must be positive");
    require(inner_max_iter >= 1 && outer_max_iter >= 1, "iteration limits must be >= 1");
    require(damping > 0 && damping < 1, "damping must lie in (0, 1)");
    require(acceleration >= 0 && acceleration <= 50, "acceleration memory must lie in 0..50");
  }
};

inline std::string to_string(SolverConfig::Algorithm a) {
  return a == SolverConfig::Algorithm::iterative ? "iterative" : "marginal-approx";
}

inline SolverConfig::Algorithm parse_algorithm(const std::string& s) {
  if (s == "iterative") return SolverConfig::Algorithm::iterative;
  if (s == "marginal-approx" || s == "marginal_approx" || s == "marginal")
    return SolverConfig::Algorithm::marginal_approx;
  fail(ErrorCode::invalid_input, "unknown algorithm '" + s + "'");
}

inline nlohmann::json to_json(const SolverConfig& c) {
  return {{"algorithm", to_string(c.algorithm)},     {"inner_tol", c.inner_tol},
          {"inner_max_iter", c.inner_max_iter},      {"outer_tol", c.outer_tol},
          {"outer_max_iter", c.outer_max_iter},      {"lambda_newton_tol", c.lambda_newton_tol},
          {"damping", c.damping},                    {"acceleration", c.acceleration},
          {"freeze_theta", c.freeze_theta}};
}

inline SolverConfig solver_from_json(const nlohmann::json& j) {
  SolverConfig c;
  try {
    if (j.contains("algorithm")) c.algorithm = parse_algorithm(j["algorithm"].get<std::string>());
    c.inner_tol = j.value("inner_tol", c.inner_tol);
    c.inner_max_iter = j.value("inner_max_iter", c.inner_max_iter);
    c.outer_tol = j.value("outer_tol", c.outer_tol);
    c.outer_max_iter = j.value("outer_max_iter", c.outer_max_iter);
    c.lambda_newton_tol = j.value("lambda_newton_tol", c.lambda_newton_tol);
    c.damping = j.value("damping", c.damping);
    c.acceleration = j.value("acceleration", c.acceleration);
    c.freeze_theta = j.value("freeze_theta", c.freeze_theta);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_input, std::string("malformed solver config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Solution variables of the profile problem at a fixed theta.
struct InnerState {
  Eigen::VectorXd p;       // per atom
  Eigen::VectorXd alpha;   // per observation
  Eigen::VectorXd lambda;  // d
  ConstraintResiduals residuals;
  int cycles = 0;
};

namespace detail {

// alpha_u = -log sum_i exp{logp_i + b_u' q_i} for every column b_u of `betas`.
// If `moments` is given, column u receives sum_i q_i w_ui with w_u the
// normalized tilt weights.
inline void tilt_normalizers(const Eigen::MatrixXd& q, const Eigen::VectorXd& logp,
                             const Eigen::MatrixXd& betas, Eigen::VectorXd& alpha,
                             Eigen::MatrixXd* moments) {
  const Eigen::Index n = q.cols(), d = q.rows(), units = betas.cols();
  alpha.resize(units);
  if (moments) moments->resize(d, units);
  std::vector<double> args(static_cast<std::size_t>(n));
  std::vector<double> acc(static_cast<std::size_t>(d));
  const double* qd = q.data();
  for (Eigen::Index u = 0; u < units; ++u) {
    const double* b = betas.col(u).data();
    double mx = kNegInf;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double* qi = qd + i * d;
      double s = logp[i];
      for (Eigen::Index l = 0; l < d; ++l) s += b[l] * qi[l];
      args[static_cast<std::size_t>(i)] = s;
      mx = std::max(mx, s);
    }
    double sum = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);
    if (moments) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double e = std::exp(args[static_cast<std::size_t>(i)] - mx);
        sum += e;
        const double* qi = qd + i * d;
        for (Eigen::Index l = 0; l < d; ++l) acc[static_cast<std::size_t>(l)] += e * qi[l];
      }
      for (Eigen::Index l = 0; l < d; ++l) (*moments)(l, u) = acc[static_cast<std::size_t>(l)] / sum;
    } else {
      for (Eigen::Index i = 0; i < n; ++i) sum += std::exp(args[static_cast<std::size_t>(i)] - mx);
    }
    alpha[u] = -(mx + std::log(sum));
  }
}

// log S_i = log sum_u exp{offset_u + b_u' q_i} for every atom i.
inline Eigen::VectorXd log_tilt_sums(const Eigen::MatrixXd& q, const Eigen::MatrixXd& betas,
                                     const Eigen::VectorXd& offset) {
  const Eigen::Index n = q.cols(), d = q.rows(), units = betas.cols();
  Eigen::VectorXd out(n);
  std::vector<double> args(static_cast<std::size_t>(units));
  const double* bd = betas.data();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* qi = q.col(i).data();
    double mx = kNegInf;
    for (Eigen::Index u = 0; u < units; ++u) {
      const double* b = bd + u * d;
      double s = offset[u];
      for (Eigen::Index l = 0; l < d; ++l) s += b[l] * qi[l];
      args[static_cast<std::size_t>(u)] = s;
      mx = std::max(mx, s);
    }
    double sum = 0.0;
    for (Eigen::Index u = 0; u < units; ++u) sum += std::exp(args[static_cast<std::size_t>(u)] - mx);
    out[i] = mx + std::log(sum);
  }
  return out;
}

// Maximizes h(lambda) = sum_i log(S_i + lambda' q_i) by damped Newton, so that
// sum_i q_i / (S_i + lambda' q_i) = 0. Every accepted iterate keeps all
// denominators positive.
inline Eigen::VectorXd newton_lambda(const Eigen::MatrixXd& q, const Eigen::VectorXd& s,
                                     Eigen::VectorXd lambda, double tol, double damping,
                                     int max_iter = 200) {
  const Eigen::Index n = q.cols(), d = q.rows();
  auto denominators = [&](const Eigen::VectorXd& lam, Eigen::VectorXd& den) {
    den = s + q.transpose() * lam;
    return (den.array() > 0.0).all() && den.allFinite();
  };
  Eigen::VectorXd den(n);
  for (int shrink = 0; !denominators(lambda, den); ++shrink) {
    if (shrink > 200) lambda.setZero();
    else lambda *= damping;
  }
  double h = den.array().log().sum();
  Eigen::VectorXd g(d);
  Eigen::MatrixXd hess(d, d);
  double gnorm = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::ArrayXd inv = den.array().inverse();
    g = q * inv.matrix();
    // Judged on the normalized weights: when 0 is outside the hull of q the
    // raw gradient also vanishes as |lambda| grows without bound.
    gnorm = g.lpNorm<Eigen::Infinity>() / inv.sum();
    if (gnorm < tol) return lambda;
    hess = q * (inv.square().matrix().asDiagonal()) * q.transpose();
    const Eigen::VectorXd step = hess.ldlt().solve(g);
    if (!step.allFinite())
      throw SolverFailure("lambda Newton step is singular", it, gnorm);

    double t = 1.0;
    bool moved = false;
    Eigen::VectorXd trial(d), den_trial(n);
    for (int b = 0; b < 80; ++b, t *= damping) {
      trial = lambda + t * step;
      if (!denominators(trial, den_trial)) continue;
      const double h_trial = den_trial.array().log().sum();
      if (h_trial >= h) {
        moved = true;
        lambda = trial;
        den = den_trial;
        h = h_trial;
        break;
      }
      const Eigen::ArrayXd inv_trial = den_trial.array().inverse();
      const Eigen::VectorXd g_trial = q * inv_trial.matrix();
      if (g_trial.lpNorm<Eigen::Infinity>() / inv_trial.sum() < gnorm) {
        moved = true;
        lambda = trial;
        den = den_trial;
        h = h_trial;
        break;
      }
    }
    if (!moved)
      throw SolverFailure("lambda Newton line search stalled (is 0 inside the convex hull of q?)",
                          it, gnorm);
  }
  throw SolverFailure("lambda Newton did not converge", max_iter, gnorm);
}

}  // namespace detail

/// Data, basis values and weighted units for one (Dataset, ModelSpec) pair.
class ElProblem {
 public:
  ElProblem(const Dataset& data, const ModelSpec& spec) : data_(data), spec_(spec) {
    spec_.validate();
    require(spec_.levels == data_.levels(),
            "model has " + std::to_string(spec_.levels) + " levels but the data has " +
                std::to_string(data_.levels()));
    spec_.features.validate(data_.p());
    data_.validate_support(spec_.basis);
    if (spec_.level_labels.empty()) spec_.level_labels = data_.level_labels();

    const int n = data_.n(), d = spec_.d(), m = spec_.m();
    q_.resize(d, n);
    for (int i = 0; i < n; ++i) eval_basis_into(spec_.basis, data_.y(i), q_.col(i));
    center_ = Eigen::VectorXd::Zero(d);
    if (spec_.center_basis) center_ = q_.rowwise().mean();
    q_.colwise() -= center_;

    const Eigen::MatrixXd phi = spec_.features.design(data_.x());
    std::map<std::vector<double>, int> index;
    unit_of_obs_.resize(static_cast<std::size_t>(n));
    std::vector<double> key(static_cast<std::size_t>(m + 1));
    std::vector<double> weights;
    for (int i = 0; i < n; ++i) {
      key[0] = data_.level(i);
      for (int f = 0; f < m; ++f) key[static_cast<std::size_t>(f + 1)] = phi(i, f);
      auto [it, inserted] = index.emplace(key, static_cast<int>(unit_level_.size()));
      if (inserted) {
        unit_level_.push_back(data_.level(i) - 1);
        unit_rows_.push_back(i);
        weights.push_back(0.0);
      }
      weights[static_cast<std::size_t>(it->second)] += 1.0;
      unit_of_obs_[static_cast<std::size_t>(i)] = it->second;
    }
    const int units = static_cast<int>(unit_level_.size());
    unit_phi_.resize(m, units);
    unit_weight_.resize(units);
    for (int u = 0; u < units; ++u) {
      unit_phi_.col(u) = phi.row(unit_rows_[static_cast<std::size_t>(u)]).transpose();
      unit_weight_[u] = weights[static_cast<std::size_t>(u)];
    }
    log_weight_ = unit_weight_.array().log();

    suff_.assign(static_cast<std::size_t>(spec_.levels), Eigen::MatrixXd::Zero(m, d));
    for (int i = 0; i < n; ++i)
      suff_[static_cast<std::size_t>(data_.level(i) - 1)] += phi.row(i).transpose() * q_.col(i).transpose();
  }

  const Dataset& data() const { return data_; }
  const ModelSpec& spec() const { return spec_; }
  int n() const { return data_.n(); }
  int d() const { return spec_.d(); }
  int m() const { return spec_.m(); }
  int levels() const { return spec_.levels; }
  int units() const { return static_cast<int>(unit_level_.size()); }

  /// Centred basis values, d x n.
  const Eigen::MatrixXd& q() const { return q_; }
  const Eigen::VectorXd& center() const { return center_; }
  const Eigen::VectorXd& unit_weight() const { return unit_weight_; }
  const Eigen::VectorXd& unit_log_weight() const { return log_weight_; }
  const Eigen::MatrixXd& unit_phi() const { return unit_phi_; }
  int unit_level(int u) const { return unit_level_[static_cast<std::size_t>(u)]; }
  int unit_of(int i) const { return unit_of_obs_[static_cast<std::size_t>(i)]; }
  /// sum_j phi(x_kj) q(y_kj)' for 0-based level k.
  const Eigen::MatrixXd& sufficient(int k) const { return suff_[static_cast<std::size_t>(k)]; }

  void check_theta(const ThetaParams& theta) const {
    require(theta.levels() == levels(), "theta has the wrong number of levels");
    for (int k = 0; k < levels(); ++k)
      require(theta[k].rows() == m() && theta[k].cols() == d(), "theta_k must be m x d");
  }

  /// d x U matrix of beta(x_u; theta_k(u)).
  Eigen::MatrixXd unit_betas(const ThetaParams& theta) const {
    check_theta(theta);
    Eigen::MatrixXd b(d(), units());
    for (int u = 0; u < units(); ++u)
      b.col(u) = theta[unit_level(u)].transpose() * unit_phi_.col(u);
    return b;
  }

  /// d x n matrix of beta(x_kj; theta_k) per observation.
  Eigen::MatrixXd obs_betas(const ThetaParams& theta) const {
    const Eigen::MatrixXd b = unit_betas(theta);
    Eigen::MatrixXd out(d(), n());
    for (int i = 0; i < n(); ++i) out.col(i) = b.col(unit_of(i));
    return out;
  }

  Eigen::VectorXd expand(const Eigen::VectorXd& per_unit) const {
    Eigen::VectorXd out(n());
    for (int i = 0; i < n(); ++i) out[i] = per_unit[unit_of(i)];
    return out;
  }

  Eigen::VectorXd contract(const Eigen::VectorXd& per_obs) const {
    Eigen::VectorXd out(units());
    for (int u = 0; u < units(); ++u) out[u] = per_obs[unit_rows_[static_cast<std::size_t>(u)]];
    return out;
  }

  ModelSpec marginal_spec() const {
    ModelSpec s = spec_;
    s.features = FeatureMap({FeatureTerm::intercept()});
    return s;
  }

 private:
  Dataset data_;
  ModelSpec spec_;
  Eigen::MatrixXd q_;
  Eigen::VectorXd center_;
  std::vector<int> unit_level_;
  std::vector<int> unit_rows_;
  std::vector<int> unit_of_obs_;
  Eigen::MatrixXd unit_phi_;
  Eigen::VectorXd unit_weight_;
  Eigen::VectorXd log_weight_;
  std::vector<Eigen::MatrixXd> suff_;
};

inline void check_weights(const Eigen::VectorXd& p) {
  if (!((p.array() > 0.0).all() && p.allFinite()))
    fail(ErrorCode::infeasible_state, "baseline weights must be positive and finite");
}

/// p_i = [sum_kj exp{alpha_kj + beta_kj' q(y_i)} + lambda' q(y_i)]^{-1}, unnormalized.
inline Eigen::VectorXd update_p(const ElProblem& problem, const ThetaParams& theta,
                                const Eigen::VectorXd& alpha, const Eigen::VectorXd& lambda) {
  require(alpha.size() == problem.n(), "alpha must have one entry per observation");
  require(lambda.size() == problem.d(), "lambda must have dimension d");
  const Eigen::VectorXd log_s = detail::log_tilt_sums(problem.q(), problem.obs_betas(theta), alpha);
  const Eigen::VectorXd den = log_s.array().exp().matrix() + problem.q().transpose() * lambda;
  for (Eigen::Index i = 0; i < den.size(); ++i)
    if (!(den[i] > 0.0) || !std::isfinite(den[i]))
      fail(ErrorCode::infeasible_state,
           "nonpositive denominator for atom " + std::to_string(i) + "; damp the step");
  return den.array().inverse();
}

/// alpha_kj = -log sum_i p_i exp{beta_kj' q(y_i)}, per observation.
inline Eigen::VectorXd update_alpha(const ElProblem& problem, const ThetaParams& theta,
                                    const Eigen::VectorXd& p) {
  require(p.size() == problem.n(), "p must have one entry per atom");
  check_weights(p);
  Eigen::VectorXd alpha_u;
  detail::tilt_normalizers(problem.q(), p.array().log(), problem.unit_betas(theta), alpha_u, nullptr);
  return problem.expand(alpha_u);
}

/// lambda solving sum_i p_i(lambda) q(y_i) = 0 with alpha held fixed.
inline Eigen::VectorXd solve_lambda(const ElProblem& problem, const ThetaParams& theta,
                                    const Eigen::VectorXd& alpha, const SolverConfig& cfg,
                                    std::optional<Eigen::VectorXd> start = std::nullopt) {
  require(alpha.size() == problem.n(), "alpha must have one entry per observation");
  const Eigen::VectorXd log_s = detail::log_tilt_sums(problem.q(), problem.obs_betas(theta), alpha);
  if (!log_s.allFinite()) fail(ErrorCode::infeasible_state, "exponent sums are not finite");
  Eigen::VectorXd lam0 = start.value_or(Eigen::VectorXd::Zero(problem.d()));
  return detail::newton_lambda(problem.q(), log_s.array().exp(), std::move(lam0),
                               cfg.lambda_newton_tol, cfg.damping);
}

/// Residuals of the three constraints at (p, alpha).
inline ConstraintResiduals constraint_residuals(const ElProblem& problem, const ThetaParams& theta,
                                                const Eigen::VectorXd& p,
                                                const Eigen::VectorXd& alpha) {
  ConstraintResiduals r;
  r.total_mass = std::abs(p.sum() - 1.0);
  r.moment = (problem.q() * p).lpNorm<Eigen::Infinity>();
  Eigen::VectorXd exact;
  detail::tilt_normalizers(problem.q(), p.array().log(), problem.unit_betas(theta), exact, nullptr);
  for (int i = 0; i < problem.n(); ++i)
    r.normalization = std::max(r.normalization, std::abs(std::exp(alpha[i] - exact[problem.unit_of(i)]) - 1.0));
  return r;
}

/// Alternating scheme: cycle update_p -> update_alpha -> solve_lambda to a fixed point.
/// p is renormalized after each update. Each cycle maps the normalizers alpha
/// to new normalizers; with cfg.acceleration > 0 that map is extrapolated by
/// Anderson mixing over the last few cycles, which leaves the fixed point
/// unchanged. Convergence is declared on the sup-change of (p, alpha, lambda)
/// over one plain cycle.
inline InnerState inner_solve_iterative(const ElProblem& problem, const ThetaParams& theta,
                                        const SolverConfig& cfg,
                                        const InnerState* warm = nullptr) {
  const int n = problem.n(), units = problem.units();
  const Eigen::MatrixXd betas = problem.unit_betas(theta);
  const Eigen::MatrixXd& q = problem.q();

  Eigen::VectorXd p = Eigen::VectorXd::Constant(n, 1.0 / n);
  Eigen::VectorXd alpha_u(units);
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(problem.d());
  if (warm) {
    p = warm->p;
    lambda = warm->lambda;
  }
  detail::tilt_normalizers(q, p.array().log(), betas, alpha_u, nullptr);

  // One cycle from normalizers alpha: lambda solve, p update, new normalizers.
  Eigen::VectorXd p_new, lambda_new, alpha_new;
  auto cycle_map = [&](const Eigen::VectorXd& alpha) {
    const Eigen::VectorXd log_s = detail::log_tilt_sums(q, betas, alpha + problem.unit_log_weight());
    if (!log_s.allFinite()) fail(ErrorCode::infeasible_state, "exponent sums are not finite");
    const Eigen::VectorXd s = log_s.array().exp();
    lambda_new = detail::newton_lambda(q, s, lambda, cfg.lambda_newton_tol, cfg.damping);
    p_new = (s + q.transpose() * lambda_new).array().inverse();
    p_new /= p_new.sum();
    detail::tilt_normalizers(q, p_new.array().log(), betas, alpha_new, nullptr);
  };

  const int memory = cfg.acceleration;
  Eigen::MatrixXd d_res(units, std::max(memory, 1)), d_map(units, std::max(memory, 1));
  Eigen::VectorXd prev_res, prev_map;
  int stored = 0, head = 0;

  double change = std::numeric_limits<double>::infinity();
  int cycle = 0;
  while (cycle < cfg.inner_max_iter) {
    ++cycle;
    cycle_map(alpha_u);
    change = std::max({(p_new - p).lpNorm<Eigen::Infinity>(),
                       (alpha_new - alpha_u).lpNorm<Eigen::Infinity>(),
                       (lambda_new - lambda).lpNorm<Eigen::Infinity>()});
    p = p_new;
    lambda = lambda_new;
    if (change < cfg.inner_tol) {
      alpha_u = alpha_new;
      break;
    }
    if (memory == 0) {
      alpha_u = alpha_new;
      continue;
    }
    const Eigen::VectorXd res = alpha_new - alpha_u;
    if (prev_res.size() == units) {
      d_res.col(head) = res - prev_res;
      d_map.col(head) = alpha_new - prev_map;
      head = (head + 1) % memory;
      stored = std::min(stored + 1, memory);
    }
    prev_res = res;
    prev_map = alpha_new;
    Eigen::VectorXd next = alpha_new;
    if (stored > 0) {
      const Eigen::VectorXd gamma =
          d_res.leftCols(stored).colPivHouseholderQr().solve(res);
      if (gamma.allFinite()) next -= d_map.leftCols(stored) * gamma;
    }
    // Extrapolation may not wander far from the plain iterate.
    if (!next.allFinite() || (next - alpha_new).lpNorm<Eigen::Infinity>() > 10.0 * (1.0 + res.lpNorm<Eigen::Infinity>())) {
      next = alpha_new;
      stored = 0;
      head = 0;
    }
    alpha_u = next;
  }
  if (!(change < cfg.inner_tol))
    throw SolverFailure("the alternating scheme did not converge within " + std::to_string(cycle) +
                            " cycles (last change " + std::to_string(change) + ")",
                        cycle, change);
  InnerState st;
  st.p = std::move(p);
  st.alpha = problem.expand(alpha_u);
  st.lambda = std::move(lambda);
  st.cycles = cycle;
  st.residuals = constraint_residuals(problem, theta, st.p, st.alpha);
  return st;
}

/// log-EL sum_i log p_i + sum_kj {alpha_kj + beta_kj' q(y_kj)} with alpha
/// recomputed from p for this theta.
inline double log_el(const ElProblem& problem, const ThetaParams& theta, const Eigen::VectorXd& p) {
  check_weights(p);
  Eigen::VectorXd alpha_u;
  detail::tilt_normalizers(problem.q(), p.array().log(), problem.unit_betas(theta), alpha_u, nullptr);
  double v = p.array().log().sum() + problem.unit_weight().dot(alpha_u);
  for (int k = 0; k < problem.levels(); ++k) v += (theta[k].array() * problem.sufficient(k).array()).sum();
  return v;
}

/// Explicit profile log-EL:
///   sum_kj {alpha_kj + beta_kj' q(y_kj)} - sum_i log[sum_kj exp{alpha_kj + beta_kj' q(y_i)} + lambda' q(y_i)]
/// with alpha recomputed from state.p for this theta, and lambda from the state.
inline double profile_logel(const ElProblem& problem, const ThetaParams& theta,
                            const InnerState& state) {
  check_weights(state.p);
  const Eigen::MatrixXd betas = problem.unit_betas(theta);
  Eigen::VectorXd alpha_u;
  detail::tilt_normalizers(problem.q(), state.p.array().log(), betas, alpha_u, nullptr);
  double v = problem.unit_weight().dot(alpha_u);
  for (int k = 0; k < problem.levels(); ++k) v += (theta[k].array() * problem.sufficient(k).array()).sum();
  const Eigen::VectorXd log_s =
      detail::log_tilt_sums(problem.q(), betas, alpha_u + problem.unit_log_weight());
  const Eigen::VectorXd den = log_s.array().exp().matrix() + problem.q().transpose() * state.lambda;
  for (Eigen::Index i = 0; i < den.size(); ++i)
    if (!(den[i] > 0.0)) fail(ErrorCode::infeasible_state, "nonpositive log argument in profile log-EL");
  return v - den.array().log().sum();
}

namespace detail {

// Gradient of log_el in theta given normalizers' moments:
// sum_j phi_kj {q(y_kj) - E_k[q | x_kj]}'.
inline ThetaParams score_from_moments(const ElProblem& problem, const Eigen::MatrixXd& moments) {
  ThetaParams g;
  g.theta.reserve(static_cast<std::size_t>(problem.levels()));
  for (int k = 0; k < problem.levels(); ++k) g.theta.push_back(problem.sufficient(k));
  for (int u = 0; u < problem.units(); ++u)
    g[problem.unit_level(u)].noalias() -=
        problem.unit_weight()[u] * problem.unit_phi().col(u) * moments.col(u).transpose();
  return g;
}

// log_el value and its gradient in one pass over (units x atoms).
inline double log_el_and_score(const ElProblem& problem, const ThetaParams& theta,
                               const Eigen::VectorXd& logp, ThetaParams* grad) {
  Eigen::VectorXd alpha_u;
  Eigen::MatrixXd moments;
  tilt_normalizers(problem.q(), logp, problem.unit_betas(theta), alpha_u, grad ? &moments : nullptr);
  double v = logp.sum() + problem.unit_weight().dot(alpha_u);
  for (int k = 0; k < problem.levels(); ++k) v += (theta[k].array() * problem.sufficient(k).array()).sum();
  if (grad) *grad = score_from_moments(problem, moments);
  return v;
}

}  // namespace detail

/// Score d l / d theta_k = sum_j phi(x_kj) {q(y_kj) - E_k[q(Y) | x_kj]}', with
/// alpha and the conditional moments recomputed from state.p for this theta.
inline ThetaParams score(const ElProblem& problem, const ThetaParams& theta, const InnerState& state) {
  check_weights(state.p);
  problem.check_theta(theta);
  ThetaParams g;
  detail::log_el_and_score(problem, theta, state.p.array().log(), &g);
  return g;
}

/// Covariate-free DRM dG_k(y) = exp{alpha_bar_k + beta_bar_k' q(y)} dG0(y).
struct MarginalDrm {
  Eigen::VectorXd p;
  Eigen::VectorXd lambda;
  Eigen::MatrixXd beta_bar;   // d x K
  Eigen::VectorXd alpha_bar;  // K
  ConstraintResiduals residuals;
  int outer_iterations = 0;
  long inner_cycles = 0;
};

namespace detail {

// Inverse of the negated log-EL Hessian at theta = 0 with every conditional
// law equal to the baseline p: blockdiag_k kron(Cov_p(q), Phi_k' W Phi_k).
inline Eigen::MatrixXd initial_inverse_hessian(const ElProblem& problem, const Eigen::VectorXd& p) {
  const int m = problem.m(), d = problem.d(), levels = problem.levels();
  const Eigen::VectorXd mean = problem.q() * p;
  const Eigen::MatrixXd centred = problem.q().colwise() - mean;
  Eigen::MatrixXd cov = centred * p.asDiagonal() * centred.transpose();
  cov.diagonal().array() += 1e-10 * (1.0 + cov.diagonal().maxCoeff());
  std::vector<Eigen::MatrixXd> gram(static_cast<std::size_t>(levels), Eigen::MatrixXd::Zero(m, m));
  for (int u = 0; u < problem.units(); ++u)
    gram[static_cast<std::size_t>(problem.unit_level(u))].noalias() +=
        problem.unit_weight()[u] * problem.unit_phi().col(u) * problem.unit_phi().col(u).transpose();

  const int block = m * d;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(levels * block, levels * block);
  for (int k = 0; k < levels; ++k) {
    Eigen::MatrixXd gk = gram[static_cast<std::size_t>(k)];
    gk.diagonal().array() += 1e-10 * (1.0 + gk.diagonal().maxCoeff());
    Eigen::MatrixXd h(block, block);
    for (int l = 0; l < d; ++l)
      for (int l2 = 0; l2 < d; ++l2) h.block(l * m, l2 * m, m, m) = cov(l, l2) * gk;
    out.block(k * block, k * block, block, block) =
        h.ldlt().solve(Eigen::MatrixXd::Identity(block, block));
  }
  return out;
}

struct OuterResult {
  ThetaParams theta;
  BfgsResult bfgs;
  std::optional<InnerState> state;  // iterative: state at the final theta
  long inner_cycles = 0;
};

inline BfgsOptions bfgs_options(const SolverConfig& cfg) {
  BfgsOptions o;
  o.grad_tol = cfg.outer_tol;
  o.max_iter = cfg.outer_max_iter;
  o.backtrack = cfg.damping;
  return o;
}

// BFGS over theta with the inner state re-solved by the alternating scheme per theta.
inline OuterResult maximize_iterative(const ElProblem& problem, const SolverConfig& cfg) {
  const int levels = problem.levels(), m = problem.m(), d = problem.d();
  OuterResult out;
  std::optional<InnerState> warm;
  Eigen::VectorXd warm_x;
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) -> double {
    const ThetaParams theta = ThetaParams::unflatten(x, levels, m, d);
    InnerState st;
    try {
      st = inner_solve_iterative(problem, theta, cfg, warm ? &*warm : nullptr);
    } catch (const Error&) {
      return kNegInf;
    }
    out.inner_cycles += st.cycles;
    ThetaParams grad;
    const double v = detail::log_el_and_score(problem, theta, st.p.array().log(), &grad);
    g = grad.flatten();
    warm = std::move(st);
    warm_x = x;
    return v;
  };
  const Eigen::VectorXd p0 = Eigen::VectorXd::Constant(problem.n(), 1.0 / problem.n());
  out.bfgs = maximize_bfgs(objective, ThetaParams::zeros(levels, m, d).flatten(),
                           initial_inverse_hessian(problem, p0), bfgs_options(cfg));
  out.theta = ThetaParams::unflatten(out.bfgs.x, levels, m, d);
  if (warm && warm_x.size() == out.bfgs.x.size() && warm_x == out.bfgs.x) {
    out.state = std::move(warm);
  } else {
    out.state = inner_solve_iterative(problem, out.theta, cfg, warm ? &*warm : nullptr);
    out.inner_cycles += out.state->cycles;
  }
  return out;
}

// BFGS over theta with the baseline weights held fixed.
inline OuterResult maximize_fixed_baseline(const ElProblem& problem, const Eigen::VectorXd& p,
                                           const SolverConfig& cfg) {
  const int levels = problem.levels(), m = problem.m(), d = problem.d();
  const Eigen::VectorXd logp = p.array().log();
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) -> double {
    const ThetaParams theta = ThetaParams::unflatten(x, levels, m, d);
    ThetaParams grad;
    const double v = detail::log_el_and_score(problem, theta, logp, &grad);
    g = grad.flatten();
    return v;
  };
  OuterResult out;
  out.bfgs = maximize_bfgs(objective, ThetaParams::zeros(levels, m, d).flatten(),
                           initial_inverse_hessian(problem, p), bfgs_options(cfg));
  out.theta = ThetaParams::unflatten(out.bfgs.x, levels, m, d);
  return out;
}

inline std::string trajectory_tail(const std::vector<double>& t) {
  std::ostringstream os;
  os.precision(12);
  const std::size_t from = t.size() > 5 ? t.size() - 5 : 0;
  for (std::size_t i = from; i < t.size(); ++i) os << (i > from ? ", " : "") << t[i];
  return os.str();
}

}  // namespace detail

/// Marginal approximation, first stage: EL fit of the covariate-free DRM to the pooled
/// responses, each level with its own (alpha_bar_k, beta_bar_k).
inline MarginalDrm fit_marginal_model(const ElProblem& problem, const SolverConfig& cfg) {
  const ElProblem marginal(problem.data(), problem.marginal_spec());
  auto outer = detail::maximize_iterative(marginal, cfg);
  if (!outer.bfgs.converged)
    throw SolverFailure("marginal DRM fit did not converge (" + outer.bfgs.message + ") after " +
                            std::to_string(outer.bfgs.iterations) +
                            " iterations; last objective values: " + detail::trajectory_tail(outer.bfgs.trajectory),
                        outer.bfgs.iterations, outer.bfgs.grad.lpNorm<Eigen::Infinity>());
  MarginalDrm res;
  res.p = outer.state->p;
  res.lambda = outer.state->lambda;
  res.residuals = outer.state->residuals;
  res.beta_bar.resize(problem.d(), problem.levels());
  res.alpha_bar.resize(problem.levels());
  for (int k = 0; k < problem.levels(); ++k) {
    res.beta_bar.col(k) = outer.theta[k].row(0).transpose();
    res.alpha_bar[k] = outer.state->alpha[problem.data().group(k + 1).front()];
  }
  res.outer_iterations = outer.bfgs.iterations;
  res.inner_cycles = outer.inner_cycles;
  return res;
}

/// Marginal approximation, second stage: (p^mar, alpha^mar(theta), lambda^mar).
inline InnerState marginal_state(const ElProblem& problem, const MarginalDrm& marginal,
                                 const ThetaParams& theta) {
  InnerState st;
  st.p = marginal.p;
  st.lambda = marginal.lambda;
  st.alpha = update_alpha(problem, theta, marginal.p);
  st.residuals = constraint_residuals(problem, theta, st.p, st.alpha);
  return st;
}

inline InnerState fit_marginal_drm(const ElProblem& problem, const ThetaParams& theta,
                                   const SolverConfig& cfg) {
  return marginal_state(problem, fit_marginal_model(problem, cfg), theta);
}

/// Maximum EL estimator of theta, started from theta = 0.
inline DrmFit fit_mele(const ElProblem& problem, const SolverConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const int levels = problem.levels(), m = problem.m(), d = problem.d();

  DrmFit fit;
  fit.spec = problem.spec();
  fit.center = problem.center();
  fit.atoms_y = problem.data().y();
  fit.atoms_q = problem.q();
  fit.support = sorted_support(fit.atoms_y);
  auto& diag = fit.diagnostics;
  diag.algorithm = to_string(cfg.algorithm);

  InnerState state;
  if (cfg.freeze_theta) {
    fit.theta_hat = ThetaParams::zeros(levels, m, d);
    if (cfg.algorithm == SolverConfig::Algorithm::iterative) {
      state = inner_solve_iterative(problem, fit.theta_hat, cfg);
      diag.inner_cycles = state.cycles;
    } else {
      const MarginalDrm marginal = fit_marginal_model(problem, cfg);
      state = marginal_state(problem, marginal, fit.theta_hat);
      diag.inner_cycles = marginal.inner_cycles;
    }
    diag.converged = true;
    diag.message = "theta frozen at zero";
    ThetaParams g = score(problem, fit.theta_hat, state);
    diag.gradient_norm = g.flatten().lpNorm<Eigen::Infinity>();
    diag.objective = log_el(problem, fit.theta_hat, state.p);
  } else {
    detail::OuterResult outer;
    if (cfg.algorithm == SolverConfig::Algorithm::iterative) {
      outer = detail::maximize_iterative(problem, cfg);
      state = std::move(*outer.state);
    } else {
      const MarginalDrm marginal = fit_marginal_model(problem, cfg);
      outer = detail::maximize_fixed_baseline(problem, marginal.p, cfg);
      state = marginal_state(problem, marginal, outer.theta);
      outer.inner_cycles += marginal.inner_cycles;
    }
    fit.theta_hat = outer.theta;
    diag.converged = outer.bfgs.converged;
    diag.message = outer.bfgs.message;
    diag.outer_iterations = outer.bfgs.iterations;
    diag.evaluations = outer.bfgs.evaluations;
    diag.inner_cycles = outer.inner_cycles;
    diag.gradient_norm = outer.bfgs.grad.lpNorm<Eigen::Infinity>();
    diag.objective = outer.bfgs.value;
    diag.trajectory = outer.bfgs.trajectory;
    if (!outer.bfgs.converged)
      throw SolverFailure("MELE did not converge (" + outer.bfgs.message + ") after " +
                              std::to_string(outer.bfgs.iterations) +
                              " iterations; gradient norm " + std::to_string(diag.gradient_norm) +
                              "; last objective values: " + detail::trajectory_tail(diag.trajectory),
                          outer.bfgs.iterations, diag.gradient_norm);
  }
  if (!(state.residuals.max() <= std::max(1e-6, 100.0 * cfg.inner_tol)))
    fail(ErrorCode::infeasible_state,
         "fitted weights violate the constraints (max residual " + std::to_string(state.residuals.max()) +
             "); is 0 inside the convex hull of the centred basis values?");
  fit.p_hat = state.p;
  fit.alpha_hat = state.alpha;
  fit.lambda_hat = state.lambda;
  diag.residuals = state.residuals;
  diag.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return fit;
}

inline DrmFit fit_mele(const Dataset& data, const ModelSpec& spec, const SolverConfig& cfg) {
  return fit_mele(ElProblem(data, spec), cfg);
}

}  // namespace drm

#endif  // DRM_EL_SOLVER_HPP
