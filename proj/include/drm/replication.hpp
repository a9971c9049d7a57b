#ifndef DRM_REPLICATION_HPP
#define DRM_REPLICATION_HPP

// Seeded Monte-Carlo studies over the synthetic designs: every repetition
// draws a fresh dataset from seed base_seed + r, runs the requested
// estimators and is compared with the known effects. Aggregates depend only
// on the per-repetition values, which are reduced in repetition order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/counterfactual.hpp"
#include "drm/datagen.hpp"
#include "drm/effects.hpp"
#include "drm/el_solver.hpp"

namespace drm {

enum class Method { drm, gformula, ipw, aipw };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::drm: return "DRM";
    case Method::gformula: return "G-formula";
    case Method::ipw: return "IPW";
    case Method::aipw: return "AIPW";
  }
  return "?";
}

/// An estimator such as "DRM(full)" or "IPW(mis)".
struct EstimatorTag {
  Method method = Method::drm;
  std::string variant = "full";

  std::string str() const { return to_string(method) + "(" + variant + ")"; }
  bool has_qtet() const { return method == Method::drm || method == Method::ipw; }

  static EstimatorTag parse(const std::string& s) {
    const auto open = s.find('(');
    if (open == std::string::npos || s.back() != ')')
      fail(ErrorCode::invalid_input, "estimator tag '" + s + "' must look like METHOD(variant)");
    const std::string m = s.substr(0, open), v = s.substr(open + 1, s.size() - open - 2);
    for (Method cand : {Method::drm, Method::gformula, Method::ipw, Method::aipw})
      if (m == to_string(cand)) return {cand, v};
    fail(ErrorCode::invalid_input, "unknown estimator method '" + m + "' (DRM, G-formula, IPW or AIPW)");
  }

  friend bool operator==(const EstimatorTag&, const EstimatorTag&) = default;
};

/// Model choices for one (design, estimator) pair. `features` excludes the
/// intercept; the DRM adds one, the regressions fit their own.
struct VariantSpec {
  BasisSpec basis;
  FeatureMap features;
};

namespace detail {

using FT = FeatureTerm;

inline std::map<std::string, VariantSpec> variant_table(Family family, Method method) {
  const BasisSpec lin_sq({BasisTerm::identity, BasisTerm::square});
  const BasisSpec lin_log({BasisTerm::identity, BasisTerm::log});
  const BasisSpec sqrt_lin({BasisTerm::sqrt, BasisTerm::identity});
  const BasisSpec sqrt_only({BasisTerm::sqrt});
  const FeatureMap x1({FT::raw(0)}), x2({FT::raw(1)}), x1x2({FT::raw(0), FT::raw(1)});
  const FeatureMap x1_sq_x2({FT::raw(0), FT::squared(0), FT::raw(1)});
  const FeatureMap x1x2_int({FT::raw(0), FT::raw(1), FT::interaction(0, 1)});
  switch (family) {
    case Family::gaussian:
      return {{"full", {lin_sq, x1_sq_x2}}, {"mis1", {lin_sq, x1x2}}, {"mis2", {lin_sq, x1}}};
    case Family::gamma:
      if (method == Method::drm)
        return {{"full", {lin_log, x1x2}}, {"mis1", {lin_sq, x1x2}}, {"mis2", {lin_log, x1}}};
      return {{"full", {lin_log, x1x2}}, {"mis", {lin_log, x1}}};
    case Family::poisson:
      return {{"full", {sqrt_lin, x1_sq_x2}}, {"mis", {sqrt_lin, x2}}};
    case Family::exponential:
      return {{"full", {sqrt_only, x1x2_int}}, {"mis", {sqrt_only, x1x2}}};
  }
  return {};
}

}  // namespace detail

inline VariantSpec variant_spec(Family family, const EstimatorTag& tag) {
  const auto table = detail::variant_table(family, tag.method);
  const auto it = table.find(tag.variant);
  if (it == table.end()) {
    std::string known;
    for (const auto& [k, v] : table) known += (known.empty() ? "" : ", ") + k;
    fail(ErrorCode::unsupported, "variant '" + tag.variant + "' is not defined for " + to_string(tag.method) +
                                     " on the " + to_string(family) + " design (known: " + known + ")");
  }
  return it->second;
}

inline ModelSpec drm_model(Family family, const EstimatorTag& tag) {
  const VariantSpec v = variant_spec(family, tag);
  ModelSpec m;
  m.basis = v.basis;
  m.features = v.features.with_intercept();
  m.levels = 2;
  m.level_labels = kBinaryLabels;
  return m;
}

/// Every estimator defined for a design, in table order.
inline std::vector<EstimatorTag> all_estimators(Family family) {
  std::vector<EstimatorTag> out;
  for (Method m : {Method::drm, Method::gformula, Method::ipw, Method::aipw})
    for (const auto& [variant, spec] : detail::variant_table(family, m)) out.push_back({m, variant});
  return out;
}

struct ReplicationConfig {
  Family family = Family::gaussian;
  int n = 1000;
  int repetitions = 100;
  std::uint64_t base_seed = 20240101;
  int workers = 1;
  std::vector<EstimatorTag> estimators;
  std::vector<double> probs{kQtetLevels.begin(), kQtetLevels.end()};
  SolverConfig solver;
  /// Draws for a Monte-Carlo QTET truth when probs are not the published levels.
  long truth_draws = 2000000;

  void validate() const {
    require(n >= 2, "replication needs n >= 2");
    require(repetitions >= 1, "repetitions must be >= 1");
    require(workers >= 1, "workers must be >= 1");
    require(!estimators.empty(), "no estimators requested");
    for (const auto& e : estimators) variant_spec(family, e);
    for (std::size_t i = 0; i < probs.size(); ++i)
      require(probs[i] > 0 && probs[i] < 1 && (i == 0 || probs[i] > probs[i - 1]),
              "QTET levels must be strictly increasing in (0, 1)");
    solver.validate();
  }
};

struct RepRecord {
  int rep = 0;
  std::uint64_t seed = 0;
  std::string estimator;
  Estimand estimand = Estimand::ate;
  double level = 0.0;  // QTET probability; 0 for ATE
  double value = 0.0;
  double truth = 0.0;
};

struct RepFailure {
  int rep = 0;
  std::uint64_t seed = 0;
  std::string estimator;
  std::string message;
};

struct Aggregate {
  std::string estimator;
  Estimand estimand = Estimand::ate;
  double level = 0.0;
  int reps = 0;
  int failures = 0;
  double bias = 0.0;
  double abs_bias = 0.0;
  std::optional<double> se;
  double rmse = 0.0;
};

struct SimStudyResult {
  ReplicationConfig config;
  TrueEffects truth;
  std::vector<double> qtet_truth;
  std::vector<RepRecord> records;
  std::vector<RepFailure> failures;
  std::vector<Aggregate> aggregates;
};

namespace detail {

struct RepOutput {
  std::vector<RepRecord> records;
  std::vector<RepFailure> failures;
};

inline RepOutput run_one_rep(const ReplicationConfig& cfg, int rep, const std::vector<double>& qtet_truth,
                             double ate_truth) {
  RepOutput out;
  const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(rep);
  const Dataset data = generate({cfg.family, cfg.n, seed});
  constexpr int treated = 2, control = 1;
  auto push = [&](const EstimatorTag& tag, Estimand e, double level, double value, double truth) {
    out.records.push_back({rep, seed, tag.str(), e, level, value, truth});
  };
  for (const EstimatorTag& tag : cfg.estimators) {
    try {
      const VariantSpec v = variant_spec(cfg.family, tag);
      std::vector<double> qtet;
      double ate = 0.0;
      switch (tag.method) {
        case Method::drm: {
          const DrmFit fit = fit_mele(data, drm_model(cfg.family, tag), cfg.solver);
          ate = drm_ate(fit, data, treated, control);
          qtet = drm_qtet(fit, data, treated, control, cfg.probs).values;
          break;
        }
        case Method::gformula: ate = gformula_ate(data, v.features, treated, control); break;
        case Method::ipw: {
          const PropensityModel prop = fit_propensity(data, v.features, treated, control);
          ate = ipw_ate(data, prop, treated, control);
          qtet = ipw_qtet(data, prop, treated, control, cfg.probs).values;
          break;
        }
        case Method::aipw: {
          const PropensityModel prop = fit_propensity(data, v.features, treated, control);
          ate = aipw_ate(data, prop, v.features, treated, control);
          break;
        }
      }
      if (!std::isfinite(ate)) fail(ErrorCode::solver_failure, "non-finite ATE estimate");
      push(tag, Estimand::ate, 0.0, ate, ate_truth);
      for (std::size_t j = 0; j < qtet.size(); ++j)
        push(tag, Estimand::qtet, cfg.probs[j], qtet[j], qtet_truth[j]);
    } catch (const Error& e) {
      out.failures.push_back({rep, seed, tag.str(), std::string(to_string(e.code())) + ": " + e.what()});
    }
  }
  return out;
}

inline std::vector<Aggregate> aggregate(const ReplicationConfig& cfg, const std::vector<RepRecord>& records,
                                        const std::vector<RepFailure>& failures) {
  std::vector<Aggregate> out;
  for (const EstimatorTag& tag : cfg.estimators) {
    const std::string name = tag.str();
    int failed = 0;
    for (const auto& f : failures) failed += f.estimator == name;
    std::vector<std::pair<Estimand, double>> cells{{Estimand::ate, 0.0}};
    if (tag.has_qtet())
      for (double p : cfg.probs) cells.emplace_back(Estimand::qtet, p);
    for (const auto& [estimand, level] : cells) {
      std::vector<const RepRecord*> rows;
      for (const auto& r : records)
        if (r.estimator == name && r.estimand == estimand && r.level == level) rows.push_back(&r);
      std::sort(rows.begin(), rows.end(), [](const RepRecord* a, const RepRecord* b) { return a->rep < b->rep; });
      Aggregate a;
      a.estimator = name;
      a.estimand = estimand;
      a.level = level;
      a.failures = failed;
      a.reps = static_cast<int>(rows.size());
      if (a.reps == 0) {
        a.bias = a.abs_bias = a.rmse = std::numeric_limits<double>::quiet_NaN();
        out.push_back(a);
        continue;
      }
      double sum = 0, abs_sum = 0, sq = 0;
      for (const RepRecord* r : rows) {
        const double err = r->value - r->truth;
        sum += err;
        abs_sum += std::abs(err);
        sq += err * err;
      }
      const double R = a.reps;
      a.bias = sum / R;
      a.abs_bias = abs_sum / R;
      a.rmse = std::sqrt(sq / R);
      if (a.reps > 1) {
        double ss = 0;
        for (const RepRecord* r : rows) ss += std::pow(r->value - r->truth - a.bias, 2);
        a.se = std::sqrt(ss / (R - 1));
      }
      out.push_back(a);
    }
  }
  return out;
}

}  // namespace detail

/// Runs the study on `workers` threads. Each repetition is independent and
/// lands in its own slot, so results do not depend on the worker count.
inline SimStudyResult run_replication(const ReplicationConfig& cfg) {
  cfg.validate();
  SimStudyResult res;
  res.config = cfg;
  res.truth = true_effects(cfg.family);
  const bool published = cfg.probs.size() == kQtetLevels.size() &&
                         std::equal(cfg.probs.begin(), cfg.probs.end(), kQtetLevels.begin());
  if (published) {
    res.qtet_truth.assign(res.truth.qtet.begin(), res.truth.qtet.end());
  } else {
    std::vector<double> y1, y0;
    for (long i = 0; i < cfg.truth_draws; ++i) {
      CounterRng g(0x5eed, static_cast<std::uint64_t>(i));
      const auto u = detail::draw_unit(cfg.family, g);
      if (u.a == 1) {
        y1.push_back(u.y[1]);
        y0.push_back(u.y[0]);
      }
    }
    for (double p : cfg.probs) res.qtet_truth.push_back(empirical_quantile(y1, p) - empirical_quantile(y0, p));
    res.truth.qtet_source = "monte-carlo";
  }

  std::vector<detail::RepOutput> slots(static_cast<std::size_t>(cfg.repetitions));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r; (r = next.fetch_add(1)) < cfg.repetitions;)
      slots[static_cast<std::size_t>(r)] = detail::run_one_rep(cfg, r + 1, res.qtet_truth, res.truth.ate);
  };
  const int threads = std::min(cfg.workers, cfg.repetitions);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& s : slots) {
    res.records.insert(res.records.end(), s.records.begin(), s.records.end());
    res.failures.insert(res.failures.end(), s.failures.begin(), s.failures.end());
  }
  if (res.records.empty())
    fail(ErrorCode::solver_failure, "every repetition failed; first error: " +
                                        (res.failures.empty() ? std::string("none") : res.failures.front().message));
  res.aggregates = detail::aggregate(cfg, res.records, res.failures);
  return res;
}

inline const Aggregate& find_aggregate(const SimStudyResult& res, const std::string& estimator, Estimand e,
                                       double level = 0.0) {
  for (const auto& a : res.aggregates)
    if (a.estimator == estimator && a.estimand == e && std::abs(a.level - level) < 1e-12) return a;
  fail(ErrorCode::invalid_input, "no aggregate for " + estimator + " " + to_string(e));
}

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string level_cell(Estimand e, double level) { return e == Estimand::qtet ? fmt(level) : ""; }

}  // namespace detail

/// estimator,estimand,level,bias,se,rmse,abs_bias,reps,failures
inline void write_aggregate_csv(std::ostream& out, const SimStudyResult& res) {
  out << "estimator,estimand,level,bias,se,rmse,abs_bias,reps,failures\n";
  for (const auto& a : res.aggregates)
    out << a.estimator << ',' << to_string(a.estimand) << ',' << detail::level_cell(a.estimand, a.level) << ','
        << detail::fmt(a.bias) << ',' << (a.se ? detail::fmt(*a.se) : "") << ',' << detail::fmt(a.rmse) << ','
        << detail::fmt(a.abs_bias) << ',' << a.reps << ',' << a.failures << '\n';
}

inline std::string aggregate_csv(const SimStudyResult& res) {
  std::ostringstream os;
  write_aggregate_csv(os, res);
  return os.str();
}

/// rep,seed,estimator,estimand,level,value,truth: one row per repetition and
/// (estimator, estimand, level) cell.
inline void write_raw_csv(std::ostream& out, const SimStudyResult& res) {
  out << "rep,seed,estimator,estimand,level,value,truth\n";
  char buf[48];
  for (const auto& r : res.records) {
    out << r.rep << ',' << r.seed << ',' << r.estimator << ',' << to_string(r.estimand) << ','
        << detail::level_cell(r.estimand, r.level) << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.truth);
    out << buf << '\n';
  }
}

inline void write_failures_csv(std::ostream& out, const SimStudyResult& res) {
  out << "rep,seed,estimator,message\n";
  for (const auto& f : res.failures) {
    std::string msg = f.message;
    std::replace(msg.begin(), msg.end(), '"', '\'');
    out << f.rep << ',' << f.seed << ',' << f.estimator << ",\"" << msg << "\"\n";
  }
}

inline nlohmann::json to_json(const ReplicationConfig& c) {
  std::vector<std::string> tags;
  for (const auto& e : c.estimators) tags.push_back(e.str());
  return {{"family", to_string(c.family)}, {"n", c.n},
          {"repetitions", c.repetitions},  {"base_seed", c.base_seed},
          {"workers", c.workers},          {"estimators", tags},
          {"probs", c.probs},              {"solver", to_json(c.solver)}};
}

inline nlohmann::json summary_json(const SimStudyResult& res) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& a : res.aggregates) {
    nlohmann::json r{{"estimator", a.estimator}, {"estimand", to_string(a.estimand)}, {"reps", a.reps},
                     {"failures", a.failures},   {"bias", a.bias},                    {"abs_bias", a.abs_bias},
                     {"rmse", a.rmse}};
    if (a.estimand == Estimand::qtet) r["level"] = a.level;
    r["se"] = a.se ? nlohmann::json(*a.se) : nlohmann::json(nullptr);
    rows.push_back(r);
  }
  nlohmann::json truth = to_json(res.truth);
  truth["qtet_at_probs"] = res.qtet_truth;
  return {{"config", to_json(res.config)}, {"truth", truth}, {"aggregates", rows},
          {"failures", res.failures.size()}};
}

// ---------------------------------------------------------------- plot data

/// Empirical percentile by linear interpolation between order statistics.
inline double percentile(std::vector<double> v, double q) {
  require(!v.empty(), "percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// drm_cate over a grid x 1st covariate by 2nd covariate spanning their 5th to
/// 95th percentiles; other covariates are held at their medians.
/// Columns: x1,x2,cate (header uses the covariate names).
inline void write_cate_grid(std::ostream& out, const DrmFit& fit, const Dataset& data, int treated, int control,
                            int steps = 20, const std::vector<std::string>& names = {}) {
  require(data.p() >= 2, "a CATE grid needs at least two covariates");
  require(steps >= 2, "a CATE grid needs at least two steps per axis");
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(data.p()));
  for (int c = 0; c < data.p(); ++c)
    for (int i = 0; i < data.n(); ++i) cols[static_cast<std::size_t>(c)].push_back(data.x()(i, c));
  Eigen::VectorXd x(data.p());
  for (int c = 0; c < data.p(); ++c) x[c] = percentile(cols[static_cast<std::size_t>(c)], 0.5);
  const double lo0 = percentile(cols[0], 0.05), hi0 = percentile(cols[0], 0.95);
  const double lo1 = percentile(cols[1], 0.05), hi1 = percentile(cols[1], 0.95);
  out << (names.size() >= 2 ? names[0] : "x1") << ',' << (names.size() >= 2 ? names[1] : "x2") << ",cate\n";
  char buf[96];
  for (int i = 0; i < steps; ++i)
    for (int j = 0; j < steps; ++j) {
      x[0] = lo0 + (hi0 - lo0) * i / (steps - 1);
      x[1] = lo1 + (hi1 - lo1) * j / (steps - 1);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", x[0], x[1], drm_cate(fit, x, treated, control));
      out << buf;
    }
}

/// One CSV per level: the counterfactual law of Y(k) mixed over all units.
/// Returns the written paths.
inline std::vector<std::string> write_cdf_overlay(const std::filesystem::path& dir, const DrmFit& fit,
                                                  const Dataset& data) {
  std::filesystem::create_directories(dir);
  std::vector<int> all(static_cast<std::size_t>(data.n()));
  for (int i = 0; i < data.n(); ++i) all[static_cast<std::size_t>(i)] = i;
  std::vector<std::string> paths;
  for (int k = 1; k <= fit.levels(); ++k) {
    const std::string label = data.level_labels()[static_cast<std::size_t>(k - 1)];
    const auto cdf = marginal_counterfactual_cdf(fit, data, k, all, "all units");
    const auto path = (dir / ("cdf_level_" + label + ".csv")).string();
    write_cdf_csv(path, cdf, nlohmann::json{{"level_label", label}});
    paths.push_back(path);
  }
  return paths;
}

}  // namespace drm

#endif  // DRM_REPLICATION_HPP
