#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "drm/basis.hpp"
#include "drm/dataset.hpp"
#include "drm/features.hpp"
#include "drm/model.hpp"
#include "drm/numeric.hpp"

using namespace drm;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::invalid_input;
}

}  // namespace

// ---- eval_basis -----------------------------------------------------------

TEST(EvalBasis, IdentitySquare) {
  const auto q = eval_basis(BasisSpec({BasisTerm::identity, BasisTerm::square}), 2.0);
  ASSERT_EQ(q.size(), 2);
  EXPECT_DOUBLE_EQ(q[0], 2.0);
  EXPECT_DOUBLE_EQ(q[1], 4.0);
}

TEST(EvalBasis, IdentityLogAtOne) {
  const auto q = eval_basis(BasisSpec({BasisTerm::identity, BasisTerm::log}), 1.0);
  EXPECT_DOUBLE_EQ(q[0], 1.0);
  EXPECT_DOUBLE_EQ(q[1], 0.0);
}

TEST(EvalBasis, SqrtOfNegativeIsSupportError) {
  const BasisSpec b({BasisTerm::sqrt, BasisTerm::identity});
  EXPECT_EQ(code_of([&] { eval_basis(b, -1.0); }), ErrorCode::support_domain);
}

TEST(EvalBasis, LogDomainExcludesZero) {
  const BasisSpec b({BasisTerm::log});
  EXPECT_EQ(code_of([&] { eval_basis(b, 0.0); }), ErrorCode::support_domain);
  EXPECT_EQ(code_of([&] { eval_basis(BasisSpec({BasisTerm::log_abs}), 0.0); }), ErrorCode::support_domain);
  EXPECT_NEAR(eval_basis(BasisSpec({BasisTerm::log_abs}), -std::exp(1.0))[0], 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(eval_basis(BasisSpec({BasisTerm::sqrt_abs}), -9.0)[0], 3.0);
}

TEST(EvalBasis, DuplicateComponentsRejected) {
  EXPECT_EQ(code_of([] { BasisSpec({BasisTerm::identity, BasisTerm::identity}); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { BasisSpec(std::vector<BasisTerm>{}); }), ErrorCode::invalid_input);
}

TEST(EvalBasis, ParseNames) {
  EXPECT_EQ(parse_basis_term("y"), BasisTerm::identity);
  EXPECT_EQ(parse_basis_term("y^2"), BasisTerm::square);
  EXPECT_EQ(parse_basis_term("sqrt_abs"), BasisTerm::sqrt_abs);
  EXPECT_EQ(code_of([] { parse_basis_term("cube"); }), ErrorCode::invalid_input);
}

// ---- eval_beta ------------------------------------------------------------

TEST(EvalBeta, SingleRawFeature) {
  const FeatureMap f({FeatureTerm::raw(0)});
  Eigen::MatrixXd theta(1, 2);
  theta << 1, 2;
  const auto b = eval_beta(f, theta, Eigen::VectorXd::Constant(1, 3.0));
  EXPECT_DOUBLE_EQ(b[0], 3.0);
  EXPECT_DOUBLE_EQ(b[1], 6.0);
}

TEST(EvalBeta, ZeroParameters) {
  const FeatureMap f({FeatureTerm::raw(0), FeatureTerm::squared(0)});
  const auto b = eval_beta(f, Eigen::MatrixXd::Zero(2, 3), Eigen::VectorXd::Constant(1, 7.0));
  EXPECT_EQ(b.size(), 3);
  EXPECT_EQ(b.lpNorm<Eigen::Infinity>(), 0.0);
}

TEST(EvalBeta, InteractionMatchesDotProductOracle) {
  const FeatureMap f({FeatureTerm::raw(0), FeatureTerm::raw(1), FeatureTerm::interaction(0, 1)});
  Eigen::Vector2d x(2, 3);
  const Eigen::VectorXd phi = f.eval(x);
  EXPECT_DOUBLE_EQ(phi[0], 2);
  EXPECT_DOUBLE_EQ(phi[1], 3);
  EXPECT_DOUBLE_EQ(phi[2], 6);
  Eigen::MatrixXd theta(3, 2);
  theta << 1, 0, 0, 1, 1, 1;
  const auto b = eval_beta(f, theta, x);
  for (int l = 0; l < 2; ++l) {
    double dot = 0;
    for (int r = 0; r < 3; ++r) dot += phi[r] * theta(r, l);
    EXPECT_DOUBLE_EQ(b[l], dot);
  }
  EXPECT_DOUBLE_EQ(b[0], 8);
  EXPECT_DOUBLE_EQ(b[1], 9);
}

TEST(EvalBeta, LinearInTheta) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  const FeatureMap f({FeatureTerm::intercept(), FeatureTerm::raw(0), FeatureTerm::squared(1),
                      FeatureTerm::interaction(0, 1)});
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::MatrixXd t1(4, 2), t2(4, 2);
    for (int i = 0; i < 8; ++i) {
      t1.data()[i] = z(rng);
      t2.data()[i] = z(rng);
    }
    Eigen::Vector2d x(z(rng), z(rng));
    const double a = z(rng), c = z(rng);
    const Eigen::VectorXd lhs = eval_beta(f, a * t1 + c * t2, x);
    const Eigen::VectorXd rhs = a * eval_beta(f, t1, x) + c * eval_beta(f, t2, x);
    EXPECT_LT((lhs - rhs).lpNorm<Eigen::Infinity>(), 1e-12);
  }
}

TEST(FeatureMap, IndexValidation) {
  const FeatureMap f({FeatureTerm::raw(2)});
  EXPECT_EQ(code_of([&] { f.validate(2); }), ErrorCode::invalid_input);
  EXPECT_NO_THROW(f.validate(3));
  EXPECT_EQ(code_of([&] { eval_beta(f, Eigen::MatrixXd::Zero(2, 1), Eigen::VectorXd::Zero(3)); }),
            ErrorCode::invalid_input);
}

TEST(FeatureMap, LabelsAreOneBased) {
  EXPECT_EQ(FeatureTerm::raw(0).label(), "x1");
  EXPECT_EQ(FeatureTerm::squared(1).label(), "x2^2");
  EXPECT_EQ(FeatureTerm::interaction(1, 0).label(), "x1*x2");
}

// ---- compute_alpha --------------------------------------------------------

TEST(ComputeAlpha, ZeroBetaGivesZero) {
  const BasisSpec b({BasisTerm::identity, BasisTerm::square});
  const std::vector<double> w{0.2, 0.3, 0.5}, atoms{-1.5, 0.3, 4.0};
  EXPECT_NEAR(compute_alpha(b, w, Eigen::VectorXd::Zero(2), atoms), 0.0, 1e-15);
}

TEST(ComputeAlpha, TwoSymmetricAtomsGiveMinusLogCosh) {
  const BasisSpec b({BasisTerm::identity});
  const std::vector<double> w{0.5, 0.5}, atoms{-1.0, 1.0};
  const double got = compute_alpha(b, w, Eigen::VectorXd::Constant(1, 1.0), atoms);
  EXPECT_NEAR(got, -std::log(std::cosh(1.0)), 1e-14);
  EXPECT_NEAR(got, -0.43378, 1e-5);
}

TEST(ComputeAlpha, SingleAtomAtZero) {
  const BasisSpec b({BasisTerm::identity});
  const std::vector<double> w{1.0}, atoms{0.0};
  EXPECT_DOUBLE_EQ(compute_alpha(b, w, Eigen::VectorXd::Constant(1, 5.0), atoms), 0.0);
}

TEST(ComputeAlpha, StabilizationDoesNotChangeValue) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-3, 3), wu(0.01, 1);
  const BasisSpec b({BasisTerm::identity, BasisTerm::square});
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + rep % 20;
    std::vector<double> w(n), atoms(n);
    for (int i = 0; i < n; ++i) {
      w[i] = wu(rng);
      atoms[i] = u(rng);
    }
    Eigen::Vector2d beta(u(rng), u(rng) / 3.0);
    double naive = 0, mx = -1e300;
    for (int i = 0; i < n; ++i) {
      const double e = beta.dot(eval_basis(b, atoms[i]));
      mx = std::max(mx, e);
      naive += w[i] * std::exp(e);
    }
    if (mx >= 30) continue;
    EXPECT_NEAR(compute_alpha(b, w, beta, atoms), -std::log(naive), 1e-12);
  }
}

TEST(ComputeAlpha, LargeExponentsStayFinite) {
  const BasisSpec b({BasisTerm::identity});
  const std::vector<double> w{0.5, 0.5}, atoms{1000.0, 999.0};
  const double got = compute_alpha(b, w, Eigen::VectorXd::Constant(1, 1.0), atoms);
  EXPECT_TRUE(std::isfinite(got));
  EXPECT_NEAR(got, -(1000.0 + std::log(0.5 * (1 + std::exp(-1.0)))), 1e-10);
}

TEST(ComputeAlpha, AllZeroWeightsIsInfeasible) {
  const BasisSpec b({BasisTerm::identity});
  const std::vector<double> w{0.0, 0.0}, atoms{1.0, 2.0};
  EXPECT_EQ(code_of([&] { compute_alpha(b, w, Eigen::VectorXd::Zero(1), atoms); }), ErrorCode::infeasible_state);
}

TEST(LogSumExp, EmptyAndNegInf) {
  EXPECT_EQ(log_sum_exp({}), kNegInf);
  const std::vector<double> v{kNegInf, kNegInf};
  EXPECT_EQ(log_sum_exp(v), kNegInf);
  const std::vector<double> w{0.0, std::log(3.0)};
  EXPECT_NEAR(log_sum_exp(w), std::log(4.0), 1e-15);
}

// ---- Dataset, ThetaParams, JSON ---------------------------------------------

TEST(Dataset, ValidatesShapeAndLevels) {
  Eigen::VectorXd y(3);
  y << 1, 2, 3;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(3, 1);
  EXPECT_NO_THROW(Dataset(y, {1, 2, 1}, x, 2));
  EXPECT_EQ(code_of([&] { Dataset(y, {1, 1, 1}, x, 2); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([&] { Dataset(y, {1, 3, 1}, x, 2); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([&] { Dataset(y, {1, 2}, x, 2); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([&] { Dataset(y, {1, 2, 1}, Eigen::MatrixXd::Zero(2, 1), 2); }), ErrorCode::invalid_input);
  Eigen::VectorXd bad = y;
  bad[1] = std::nan("");
  EXPECT_EQ(code_of([&] { Dataset(bad, {1, 2, 1}, x, 2); }), ErrorCode::invalid_input);
}

TEST(Dataset, GroupsAndLabels) {
  Eigen::VectorXd y(4);
  y << 1, 2, 3, 4;
  const Dataset d(y, {2, 1, 2, 2}, Eigen::MatrixXd::Zero(4, 0), 2, {"ctl", "trt"});
  EXPECT_EQ(d.group_size(1), 1);
  EXPECT_EQ(d.group(2), (std::vector<int>{0, 2, 3}));
  EXPECT_EQ(d.level_of("trt"), 2);
  EXPECT_EQ(d.level_of("none"), -1);
}

TEST(Dataset, SupportCheckNamesObservation) {
  Eigen::VectorXd y(2);
  y << 1.0, -0.5;
  const Dataset d(y, {1, 2}, Eigen::MatrixXd::Zero(2, 0), 2);
  try {
    d.validate_support(BasisSpec({BasisTerm::log}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::support_domain);
    EXPECT_NE(std::string(e.what()).find("observation 1"), std::string::npos);
  }
}

TEST(ThetaParams, FlattenRoundTrip) {
  ThetaParams t = ThetaParams::zeros(3, 2, 4);
  double v = 0;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 8; ++i) t[k].data()[i] = ++v;
  const Eigen::VectorXd flat = t.flatten();
  ASSERT_EQ(flat.size(), 24);
  EXPECT_EQ(flat[0], 1);
  EXPECT_EQ(flat[23], 24);
  const ThetaParams back = ThetaParams::unflatten(flat, 3, 2, 4);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(back[k], t[k]);
  EXPECT_TRUE(back.all_finite());
  t[1](0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
  EXPECT_EQ(code_of([&] { ThetaParams::unflatten(flat, 2, 2, 4); }), ErrorCode::invalid_input);
}

TEST(ModelJson, RoundTrip) {
  ModelSpec spec(BasisSpec({BasisTerm::sqrt, BasisTerm::identity}),
                 FeatureMap({FeatureTerm::intercept(), FeatureTerm::raw(0), FeatureTerm::squared(0),
                             FeatureTerm::interaction(0, 1)}),
                 2, false);
  spec.level_labels = {"0", "1"};
  const auto j = to_json(spec);
  EXPECT_EQ(j["features"][2], "x1^2");
  const ModelSpec back = model_from_json(j);
  EXPECT_EQ(back.basis, spec.basis);
  EXPECT_EQ(back.features, spec.features);
  EXPECT_EQ(back.levels, 2);
  EXPECT_EQ(back.level_labels, spec.level_labels);
  EXPECT_FALSE(back.center_basis);
}

TEST(ModelJson, AcceptsZeroBasedObjects) {
  const auto j = nlohmann::json::parse(
      R"({"basis":["y","y2"],"features":["intercept",{"raw":1},{"squared":0},{"interaction":[0,1]}],"treatment_levels":3})");
  const ModelSpec s = model_from_json(j);
  EXPECT_EQ(s.levels, 3);
  EXPECT_EQ(s.features.terms()[1], FeatureTerm::raw(1));
  EXPECT_EQ(s.features.terms()[3], FeatureTerm::interaction(0, 1));
  EXPECT_TRUE(s.center_basis);
}

TEST(ModelJson, MalformedIsInvalidInput) {
  EXPECT_EQ(code_of([] { model_from_json(nlohmann::json::parse(R"({"basis":["y"]})")); }),
            ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { model_from_json(nlohmann::json::parse(R"({"basis":["y"],"features":["z9"]})")); }),
            ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { model_from_json(nlohmann::json::parse(R"({"basis":[3],"features":[]})")); }),
            ErrorCode::invalid_input);
}
