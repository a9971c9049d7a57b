#ifndef DRM_DATAGEN_HPP
#define DRM_DATAGEN_HPP

// Synthetic designs used by the simulation studies. Treatment is binary and
// stored as level 1 = control (a = 0), level 2 = treated (a = 1); covariates
// are the columns (x1, x2).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/dataset.hpp"
#include "drm/error.hpp"
#include "drm/rng.hpp"

namespace drm {

enum class Family { gaussian, gamma, poisson, exponential };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::gamma: return "gamma";
    case Family::poisson: return "poisson";
    case Family::exponential: return "exponential";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  for (Family f : {Family::gaussian, Family::gamma, Family::poisson, Family::exponential})
    if (s == to_string(f)) return f;
  fail(ErrorCode::invalid_input,
       "unknown family '" + s + "' (expected gaussian, gamma, poisson or exponential)");
}

struct DgpSpec {
  Family family = Family::gaussian;
  int n = 1000;
  std::uint64_t seed = 0;
};

inline const std::array<double, 5> kQtetLevels{0.1, 0.3, 0.5, 0.7, 0.9};
inline const std::vector<std::string> kBinaryLabels{"0", "1"};

namespace detail {

inline double ilogit(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// One unit's covariates, treatment and both potential outcomes. The observed
// outcome is y[a]. Draw order is fixed per family, so a unit's values depend
// only on (seed, unit).
struct UnitDraw {
  double x1 = 0, x2 = 0;
  int a = 0;
  std::array<double, 2> y{};
};

inline double gamma_draw(CounterRng& g, double shape, double scale) {
  return std::gamma_distribution<double>(shape, scale)(g);
}

inline UnitDraw draw_unit(Family family, CounterRng& g) {
  UnitDraw u;
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (family) {
    case Family::gaussian: {
      u.a = g.uniform() < 0.5 ? 1 : 0;
      u.x1 = 1.0 + normal(g);
      u.x2 = 2.0 * u.a * u.x1 + normal(g);
      const double eps = normal(g);
      u.y[0] = 1.0 + u.x1 + eps;
      u.y[1] = 2.0 + 3.0 * u.x1 - 0.5 * u.x1 * u.x1 + u.x2 + eps;
      break;
    }
    case Family::gamma: {
      // Gamma(shape, scale) throughout.
      u.a = g.uniform() < 0.5 ? 1 : 0;
      u.x1 = gamma_draw(g, 1.0, 0.5);
      u.x2 = gamma_draw(g, (u.a + 1.0) * (u.x1 + 1.0), 1.0);
      for (int a = 0; a <= 1; ++a) {
        const double mu = gamma_draw(g, (a + 1.0) * (u.x1 + 1.0), 1.0);
        u.y[static_cast<std::size_t>(a)] = 0.5 * (a + 1.0) * (mu + u.x2);
      }
      break;
    }
    case Family::poisson: {
      u.x1 = -1.0 + 2.0 * g.uniform();
      u.x2 = normal(g);
      u.a = g.uniform() < ilogit(0.5 - 0.5 * u.x1 - 2.0 * u.x1 * u.x1 - 0.5 * u.x2) ? 1 : 0;
      for (int a = 0; a <= 1; ++a) {
        const double rate = std::exp(5.0 - 0.1 * (a + 1) * u.x1 - a * u.x1 * u.x1 - 0.1 * (a + 1) * u.x2);
        u.y[static_cast<std::size_t>(a)] = static_cast<double>(std::poisson_distribution<long>(rate)(g));
      }
      break;
    }
    case Family::exponential: {
      u.x1 = -1.0 + 2.0 * g.uniform();
      u.x2 = -std::log(g.uniform());
      u.a = g.uniform() < ilogit(1.0 - u.x1 + 0.5 * u.x2 - u.x1 * u.x2) ? 1 : 0;
      for (int a = 0; a <= 1; ++a) {
        const double rate = 0.1 * (1.0 + a * (u.x1 + 1.0) + 0.5 * (a + 1) * u.x2 + (u.x1 + 1.0) * u.x2);
        u.y[static_cast<std::size_t>(a)] = -std::log(g.uniform()) / rate;
      }
      break;
    }
  }
  return u;
}

}  // namespace detail

/// Dataset for one design, a pure function of the spec. Unit i draws from its
/// own stream, so the result does not depend on generation order.
inline Dataset generate(const DgpSpec& spec) {
  require(spec.n >= 2, "generated datasets need n >= 2");
  const int n = spec.n;
  Eigen::VectorXd y(n);
  Eigen::MatrixXd x(n, 2);
  std::vector<int> a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    CounterRng g(spec.seed, static_cast<std::uint64_t>(i));
    const detail::UnitDraw u = detail::draw_unit(spec.family, g);
    x(i, 0) = u.x1;
    x(i, 1) = u.x2;
    a[static_cast<std::size_t>(i)] = u.a + 1;
    y[i] = u.y[static_cast<std::size_t>(u.a)];
  }
  for (int k = 1; k <= 2; ++k)
    if (std::find(a.begin(), a.end(), k) == a.end())
      fail(ErrorCode::invalid_input, "generated sample has an empty treatment arm; use a larger n");
  return Dataset(std::move(y), std::move(a), std::move(x), 2, kBinaryLabels);
}

struct TrueEffects {
  Family family = Family::gaussian;
  double ate = 0.0;
  std::array<double, 5> qtet{};
  std::string qtet_source = "published";
  /// Closed-form CATE, empty when the design has none.
  std::string cate;
  std::optional<double> ate_mc;
  std::optional<std::array<double, 5>> qtet_mc;
  long mc_draws = 0;
};

/// Left-continuous empirical quantile: the smallest order statistic whose
/// empirical CDF reaches `prob`.
inline double empirical_quantile(std::vector<double>& v, double prob) {
  require(!v.empty(), "quantile of an empty sample");
  require(prob > 0.0 && prob < 1.0, "quantile level must lie in (0, 1)");
  auto k = static_cast<std::size_t>(std::ceil(prob * static_cast<double>(v.size())));
  k = std::clamp<std::size_t>(k, 1, v.size()) - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

/// Monte-Carlo ATE and treated-unit QTET from `draws` potential-outcome pairs.
inline std::pair<double, std::array<double, 5>> monte_carlo_effects(Family family, long draws,
                                                                    std::uint64_t seed) {
  require(draws >= 10, "Monte-Carlo truth needs at least 10 draws");
  std::vector<double> y1, y0;
  y1.reserve(static_cast<std::size_t>(draws / 2));
  y0.reserve(static_cast<std::size_t>(draws / 2));
  double diff = 0.0;
  for (long i = 0; i < draws; ++i) {
    CounterRng g(seed, static_cast<std::uint64_t>(i));
    const detail::UnitDraw u = detail::draw_unit(family, g);
    diff += u.y[1] - u.y[0];
    if (u.a == 1) {
      y1.push_back(u.y[1]);
      y0.push_back(u.y[0]);
    }
  }
  std::array<double, 5> qtet{};
  for (std::size_t j = 0; j < kQtetLevels.size(); ++j)
    qtet[j] = empirical_quantile(y1, kQtetLevels[j]) - empirical_quantile(y0, kQtetLevels[j]);
  return {diff / static_cast<double>(draws), qtet};
}

/// Published effects for each design; with mc_draws > 0 the QTET and ATE are
/// also re-derived by simulation and stored next to the published values.
inline TrueEffects true_effects(Family family, long mc_draws = 0, std::uint64_t mc_seed = 20240917) {
  TrueEffects t;
  t.family = family;
  switch (family) {
    case Family::gaussian:
      t.ate = 3.0;
      t.qtet = {0.091, 2.847, 4.444, 5.792, 7.328};
      t.cate = "1 + 2*x1 - 0.5*x1^2 + x2";
      break;
    case Family::gamma:
      t.ate = 3.375;
      t.qtet = {1.730, 2.619, 3.411, 4.384, 6.188};
      t.cate = "1.5*(1 + x1) + 0.5*x2";
      break;
    case Family::poisson:
      t.ate = -35.753;
      t.qtet = {-50, -36, -26, -16, -1};
      break;
    case Family::exponential:
      t.ate = -2.063;
      t.qtet = {-0.167, -0.600, -1.245, -2.335, -4.927};
      break;
  }
  if (mc_draws > 0) {
    auto [ate, qtet] = monte_carlo_effects(family, mc_draws, mc_seed);
    t.ate_mc = ate;
    t.qtet_mc = qtet;
    t.mc_draws = mc_draws;
  }
  return t;
}

/// How far a Monte-Carlo QTET may sit from the published value. The published
/// values carry three decimals; Poisson quantiles are integers and must match.
inline double qtet_tolerance(Family family) {
  switch (family) {
    case Family::gaussian:
    case Family::gamma: return 0.02;
    case Family::exponential: return 0.01;
    case Family::poisson: return 0.0;
  }
  return 0.0;
}

inline double true_cate(Family family, double x1, double x2) {
  switch (family) {
    case Family::gaussian: return 1.0 + 2.0 * x1 - 0.5 * x1 * x1 + x2;
    case Family::gamma: return 1.5 * (1.0 + x1) + 0.5 * x2;
    default:
      fail(ErrorCode::unsupported, "no closed-form CATE for the " + to_string(family) + " design");
  }
}

inline nlohmann::json to_json(const TrueEffects& t) {
  nlohmann::json j{{"family", to_string(t.family)},
                   {"ate", t.ate},
                   {"qtet_levels", kQtetLevels},
                   {"qtet", t.qtet},
                   {"qtet_source", t.qtet_source}};
  if (!t.cate.empty()) j["cate"] = t.cate;
  if (t.qtet_mc) {
    j["monte_carlo"] = {{"draws", t.mc_draws}, {"ate", *t.ate_mc}, {"qtet", *t.qtet_mc}};
  }
  return j;
}

}  // namespace drm

#endif  // DRM_DATAGEN_HPP
