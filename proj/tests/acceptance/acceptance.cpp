// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Pass criterion numbers as arguments to run a subset, e.g. `acceptance 2 3`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "drm/drm.hpp"
#include "oracles.hpp"

using namespace drm;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kResidualTol = 1e-7;
constexpr double kConstraintSuiteSeconds = 120;
constexpr double kOneSampleTol = 1e-8;
constexpr double kScoreRelTol = 1e-4;

constexpr int kGaussianReps = 100;
constexpr int kGammaReps = 100;
constexpr int kPoissonReps = 50;
constexpr int kExponentialReps = 50;
constexpr int kReplicationN = 1000;
constexpr std::uint64_t kBaseSeed = 20240101;
constexpr double kReplicationSeconds = 30 * 60;

constexpr double kGaussianDrmRmse = 0.25;
constexpr double kGaussianMis2Low = 0.8, kGaussianMis2High = 1.2;
constexpr double kIpwRmseRatio = 4.0;
constexpr double kGaussianQtetBias = 0.15, kGaussianQtetSe = 0.45;
constexpr double kGammaDrmRmse = 0.20;
constexpr double kGammaMis2Low = 0.9, kGammaMis2High = 1.4;
constexpr double kPoissonDrmRmse = 2.5, kPoissonBias = 1.0;
constexpr double kExponentialDrmRmse = 0.9;

constexpr int kAgreementReps = 10;
constexpr double kAgreementTol = 0.05;

constexpr int kConsistencySeeds = 20;
constexpr int kConsistencySmallN = 500, kConsistencyLargeN = 4000;

constexpr long kTruthDraws = 10000000;

using FT = FeatureTerm;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

SimStudyResult study(Family family, int reps, std::vector<std::string> tags) {
  ReplicationConfig c;
  c.family = family;
  c.n = kReplicationN;
  c.repetitions = reps;
  c.base_seed = kBaseSeed;
  c.workers = default_workers();
  for (const auto& t : tags) c.estimators.push_back(EstimatorTag::parse(t));
  return run_replication(c);
}

std::string failures_note(const SimStudyResult& r) {
  return r.failures.empty() ? "" : "; " + std::to_string(r.failures.size()) + " failed fits";
}

// The Gaussian study feeds criteria 4 and 5; it runs once.
const SimStudyResult& gaussian_study() {
  static const SimStudyResult r = study(Family::gaussian, kGaussianReps, {"DRM(full)", "DRM(mis2)", "IPW(full)"});
  return r;
}
double gaussian_seconds = 0;

Dataset one_group(const std::vector<double>& ys) {
  const auto n = static_cast<Eigen::Index>(ys.size());
  return Dataset(Eigen::Map<const Eigen::VectorXd>(ys.data(), n), std::vector<int>(ys.size(), 1),
                 Eigen::MatrixXd::Zero(n, 1), 1);
}

SolverConfig tight_iterative() {
  SolverConfig c;
  c.algorithm = SolverConfig::Algorithm::iterative;
  c.inner_tol = 1e-13;
  c.lambda_newton_tol = 1e-14;
  return c;
}

// ---------------------------------------------------------------- criteria

Outcome constraint_suite() {
  const auto start = Clock::now();
  double worst = 0;
  int converged = 0, failed = 0;
  for (Family f : {Family::gaussian, Family::gamma, Family::poisson, Family::exponential})
    for (std::uint64_t seed : {101, 102, 103}) {
      const Dataset data = generate({f, 500, seed});
      try {
        const DrmFit fit = fit_mele(data, drm_model(f, EstimatorTag::parse("DRM(full)")), SolverConfig{});
        worst = std::max(worst, fit.diagnostics.residuals.max());
        ++converged;
      } catch (const Error&) {
        ++failed;
      }
    }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  return {converged > 0 && worst < kResidualTol && secs < kConstraintSuiteSeconds,
          std::to_string(converged) + "/12 fits converged; max residual " + fmt("%.2e", worst) + " < " +
              fmt("%.0e", kResidualTol) + "; " + fmt("%.1f", secs) + " s < " + fmt("%.0f", kConstraintSuiteSeconds) +
              " s"};
}

Outcome degenerate_oracle() {
  double worst = 0;
  std::string note;
  for (int n : {5, 20, 50}) {
    const std::vector<BasisTerm> basis = n < 10 ? std::vector<BasisTerm>{BasisTerm::identity}
                                                : std::vector<BasisTerm>{BasisTerm::identity, BasisTerm::log_abs};
    const ModelSpec spec(BasisSpec(basis), FeatureMap({FT::intercept()}), 1, false);
    std::optional<Dataset> data;
    Eigen::VectorXd want;
    for (std::uint64_t seed = 1; !data && seed < 50; ++seed) {
      std::mt19937_64 rng(1000 * seed + static_cast<std::uint64_t>(n));
      std::normal_distribution<double> z(0.3, 1.2);
      std::vector<double> ys(static_cast<std::size_t>(n));
      for (auto& v : ys) v = z(rng);
      Dataset cand = one_group(ys);
      try {
        want = oracle::one_sample_el(ElProblem(cand, spec).q());
        data = std::move(cand);
      } catch (const std::runtime_error&) {
      }
    }
    if (!data) return {false, "no feasible sample found for n=" + std::to_string(n)};
    SolverConfig cfg = tight_iterative();
    cfg.freeze_theta = true;
    const DrmFit fit = fit_mele(*data, spec, cfg);
    const double err = (fit.p_hat - want).lpNorm<Eigen::Infinity>();
    worst = std::max(worst, err);
    note += (note.empty() ? "" : ", ") + ("n=" + std::to_string(n) + " " + fmt("%.1e", err));
  }
  return {worst < kOneSampleTol, "max |p - p_oracle| " + note + " (tol " + fmt("%.0e", kOneSampleTol) + ")"};
}

Outcome gradient_check() {
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int inst = 0; inst < 5; ++inst) {
    std::mt19937_64 drng(500 + static_cast<std::uint64_t>(inst));
    std::normal_distribution<double> z;
    const int n = 30;
    Eigen::VectorXd y(n);
    Eigen::MatrixXd x(n, 1);
    std::vector<int> a(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = z(drng);
      a[static_cast<std::size_t>(i)] = i % 2 + 1;
      y[i] = 0.5 * a[static_cast<std::size_t>(i)] + 0.4 * x(i, 0) + z(drng);
    }
    const ModelSpec spec(BasisSpec({BasisTerm::identity, BasisTerm::square}),
                         FeatureMap({FT::intercept(), FT::raw(0)}), 2);
    const ElProblem pr(Dataset(y, a, x, 2), spec);
    ThetaParams t = ThetaParams::zeros(2, 2, 2);
    for (int k = 0; k < 2; ++k) {
      for (Eigen::Index i = 0; i < t[k].size(); ++i) t[k].data()[i] = 0.3 * z(rng);
      t[k](0, 1) = -std::abs(t[k](0, 1));
    }
    const InnerState st = inner_solve_iterative(pr, t, tight_iterative());
    const Eigen::VectorXd g = score(pr, t, st).flatten();
    const Eigen::VectorXd th = t.flatten();
    Eigen::VectorXd fd(th.size());
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < th.size(); ++i) {
      Eigen::VectorXd up = th, dn = th;
      up[i] += h;
      dn[i] -= h;
      fd[i] = (profile_logel(pr, ThetaParams::unflatten(up, 2, 2, 2), st) -
               profile_logel(pr, ThetaParams::unflatten(dn, 2, 2, 2), st)) /
              (2 * h);
    }
    worst = std::max(worst, (fd - g).norm() / g.norm());
  }
  return {worst < kScoreRelTol, "max relative error " + fmt("%.2e", worst) + " < " + fmt("%.0e", kScoreRelTol)};
}

Outcome gaussian_replication() {
  const auto start = Clock::now();
  const auto& r = gaussian_study();
  gaussian_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  const auto& full = find_aggregate(r, "DRM(full)", Estimand::ate);
  const auto& mis2 = find_aggregate(r, "DRM(mis2)", Estimand::ate);
  const auto& ipw = find_aggregate(r, "IPW(full)", Estimand::ate);
  const bool ok = full.rmse <= kGaussianDrmRmse && mis2.abs_bias >= kGaussianMis2Low &&
                  mis2.abs_bias <= kGaussianMis2High && ipw.rmse >= kIpwRmseRatio * full.rmse &&
                  gaussian_seconds <= kReplicationSeconds;
  return {ok, "DRM(full) RMSE " + fmt("%.4f", full.rmse) + " <= " + fmt("%.2f", kGaussianDrmRmse) +
                  "; DRM(mis2) abs bias " + fmt("%.4f", mis2.abs_bias) + " in [" + fmt("%.1f", kGaussianMis2Low) +
                  ", " + fmt("%.1f", kGaussianMis2High) + "]; IPW(full) RMSE " + fmt("%.4f", ipw.rmse) +
                  " >= 4 x DRM(full); " + fmt("%.0f", gaussian_seconds) + " s" + failures_note(r)};
}

Outcome gaussian_qtet() {
  const auto& a = find_aggregate(gaussian_study(), "DRM(full)", Estimand::qtet, 0.5);
  const double se = a.se.value_or(std::numeric_limits<double>::infinity());
  return {std::abs(a.bias) <= kGaussianQtetBias && se <= kGaussianQtetSe,
          "DRM(full) QTET(0.5) bias " + fmt("%.4f", a.bias) + " (|.| <= " + fmt("%.2f", kGaussianQtetBias) + "), SE " +
              fmt("%.4f", se) + " <= " + fmt("%.2f", kGaussianQtetSe)};
}

Outcome gamma_replication() {
  const auto r = study(Family::gamma, kGammaReps, {"DRM(full)", "DRM(mis2)"});
  const auto& full = find_aggregate(r, "DRM(full)", Estimand::ate);
  const auto& mis2 = find_aggregate(r, "DRM(mis2)", Estimand::ate);
  return {full.rmse <= kGammaDrmRmse && mis2.abs_bias >= kGammaMis2Low && mis2.abs_bias <= kGammaMis2High,
          "DRM(full) RMSE " + fmt("%.4f", full.rmse) + " <= " + fmt("%.2f", kGammaDrmRmse) + "; DRM(mis2) abs bias " +
              fmt("%.4f", mis2.abs_bias) + " in [" + fmt("%.1f", kGammaMis2Low) + ", " + fmt("%.1f", kGammaMis2High) +
              "]" + failures_note(r)};
}

Outcome poisson_replication() {
  const auto r = study(Family::poisson, kPoissonReps, {"DRM(full)"});
  const auto& full = find_aggregate(r, "DRM(full)", Estimand::ate);
  return {full.rmse <= kPoissonDrmRmse && std::abs(full.bias) <= kPoissonBias,
          "DRM(full) RMSE " + fmt("%.4f", full.rmse) + " <= " + fmt("%.1f", kPoissonDrmRmse) + "; mean bias " +
              fmt("%.4f", full.bias) + " (|.| <= " + fmt("%.1f", kPoissonBias) + ")" + failures_note(r)};
}

Outcome exponential_replication() {
  const auto r = study(Family::exponential, kExponentialReps, {"DRM(full)"});
  const auto& full = find_aggregate(r, "DRM(full)", Estimand::ate);
  return {full.rmse <= kExponentialDrmRmse,
          "DRM(full) RMSE " + fmt("%.4f", full.rmse) + " <= " + fmt("%.1f", kExponentialDrmRmse) + failures_note(r)};
}

Outcome algorithm_agreement() {
  const ModelSpec spec = drm_model(Family::gaussian, EstimatorTag::parse("DRM(full)"));
  SolverConfig iter;
  iter.algorithm = SolverConfig::Algorithm::iterative;
  double worst = 0;
  for (int rep = 1; rep <= kAgreementReps; ++rep) {
    const Dataset data = generate({Family::gaussian, kReplicationN, kBaseSeed + static_cast<std::uint64_t>(rep)});
    const ElProblem pr(data, spec);
    const DrmFit a = fit_mele(pr, iter);
    const DrmFit b = fit_mele(pr, SolverConfig{});
    worst = std::max(worst, std::abs(drm_ate(a, data, 2, 1) - drm_ate(b, data, 2, 1)));
  }
  return {worst < kAgreementTol, "max |ATE_iterative - ATE_marginal| over " + std::to_string(kAgreementReps) +
                                     " replicates " + fmt("%.4f", worst) + " < " + fmt("%.2f", kAgreementTol)};
}

// Population coefficients of the Gaussian design under the full model. The
// pooled outcome law is matched by N(4, 14.25), so each arm's tilt is the log
// ratio of N(mu_k(x), 1) to that reference.
ThetaParams gaussian_population_theta() {
  const double v = 14.25, quad = (1.0 / v - 1.0) / 2.0;
  ThetaParams t = ThetaParams::zeros(2, 4, 2);
  t[0] << 1.0 - 4.0 / v, quad, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0;
  t[1] << 2.0 - 4.0 / v, quad, 3.0, 0.0, -0.5, 0.0, 1.0, 0.0;
  return t;
}

Outcome consistency_trend() {
  const ModelSpec spec = drm_model(Family::gaussian, EstimatorTag::parse("DRM(full)"));
  const Eigen::VectorXd truth = gaussian_population_theta().flatten();
  auto median_error = [&](int n) {
    std::vector<double> errs;
    for (int s = 0; s < kConsistencySeeds; ++s) {
      const Dataset data = generate({Family::gaussian, n, 9000 + static_cast<std::uint64_t>(s)});
      try {
        errs.push_back((fit_mele(data, spec, SolverConfig{}).theta_hat.flatten() - truth).norm());
      } catch (const Error&) {
        errs.push_back(std::numeric_limits<double>::infinity());
      }
    }
    std::nth_element(errs.begin(), errs.begin() + kConsistencySeeds / 2, errs.end());
    const double hi = errs[kConsistencySeeds / 2];
    std::nth_element(errs.begin(), errs.begin() + kConsistencySeeds / 2 - 1, errs.end());
    return 0.5 * (hi + errs[kConsistencySeeds / 2 - 1]);
  };
  const double small = median_error(kConsistencySmallN), large = median_error(kConsistencyLargeN);
  return {large < small, "median |theta_hat - theta| " + fmt("%.4f", small) + " at n=" +
                             std::to_string(kConsistencySmallN) + " > " + fmt("%.4f", large) + " at n=" +
                             std::to_string(kConsistencyLargeN)};
}

Outcome truth_concordance() {
  bool ok = true;
  std::string note;
  for (Family f : {Family::gaussian, Family::gamma, Family::poisson, Family::exponential}) {
    const TrueEffects t = true_effects(f, kTruthDraws);
    double worst = 0;
    for (std::size_t j = 0; j < t.qtet.size(); ++j) worst = std::max(worst, std::abs((*t.qtet_mc)[j] - t.qtet[j]));
    ok = ok && worst <= qtet_tolerance(f);
    note += (note.empty() ? "" : "; ") + to_string(f) + " " + fmt("%.4f", worst) + " <= " +
            fmt("%.2f", qtet_tolerance(f));
  }
  return {ok, "max |QTET_mc - published| (" + std::to_string(kTruthDraws) + " draws): " + note};
}

Outcome determinism() {
  ReplicationConfig c;
  c.family = Family::gaussian;
  c.n = 400;
  c.repetitions = 8;
  c.base_seed = kBaseSeed;
  for (const char* t : {"DRM(full)", "G-formula(full)", "IPW(full)", "AIPW(full)"})
    c.estimators.push_back(EstimatorTag::parse(t));
  c.workers = 1;
  const std::string one = aggregate_csv(run_replication(c));
  c.workers = 8;
  const std::string eight = aggregate_csv(run_replication(c));
  return {one == eight, std::string("aggregate CSV with 1 and 8 workers ") + (one == eight ? "identical" : "differs") +
                            " (" + std::to_string(one.size()) + " bytes)"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "constraint suite", constraint_suite},
      {2, "degenerate one-sample oracle", degenerate_oracle},
      {3, "score gradient check", gradient_check},
      {4, "gaussian replication", gaussian_replication},
      {5, "gaussian QTET", gaussian_qtet},
      {6, "gamma replication", gamma_replication},
      {7, "poisson replication", poisson_replication},
      {8, "exponential replication", exponential_replication},
      {9, "algorithm agreement", algorithm_agreement},
      {10, "consistency trend", consistency_trend},
      {11, "true-effect concordance", truth_concordance},
      {12, "worker determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    failed += !o.pass;
    std::printf("%s  %2d  %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
