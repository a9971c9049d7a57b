#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "drm/datagen.hpp"
#include "drm/rng.hpp"

using namespace drm;

namespace {

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// E f(X1, X2) for X1 ~ U(-1, 1) and X2 with density `pdf2` on [lo, hi], by
// midpoint sums on a fine grid.
double expect_uniform_x1(const std::function<double(double, double)>& f,
                         const std::function<double(double)>& pdf2, double lo, double hi) {
  const int n1 = 800, n2 = 4000;
  const double h1 = 2.0 / n1, h2 = (hi - lo) / n2;
  double s = 0;
  for (int i = 0; i < n1; ++i) {
    const double x1 = -1 + (i + 0.5) * h1;
    for (int j = 0; j < n2; ++j) {
      const double x2 = lo + (j + 0.5) * h2;
      s += f(x1, x2) * pdf2(x2) * 0.5 * h1 * h2;
    }
  }
  return s;
}

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi); }
double exp_pdf(double x) { return std::exp(-x); }

struct Moments {
  double mean = 0, sd = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x / static_cast<double>(v.size());
  for (double x : v) m.sd += (x - m.mean) * (x - m.mean) / static_cast<double>(v.size() - 1);
  m.sd = std::sqrt(m.sd);
  return m;
}

double treated_share(const Dataset& d) { return static_cast<double>(d.group_size(2)) / d.n(); }

constexpr int kLarge = 100000;

}  // namespace

TEST(Rng, CounterStreamsAreDeterministicAndDistinct) {
  CounterRng a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  for (int i = 0; i < 100; ++i) {
    const auto va = a();
    EXPECT_EQ(va, b());
    EXPECT_NE(va, c());
    EXPECT_NE(va, d());
  }
  CounterRng u(1, 1);
  for (int i = 0; i < 10000; ++i) {
    const double x = u.uniform();
    ASSERT_GT(x, 0.0);
    ASSERT_LT(x, 1.0);
  }
}

TEST(Generate, SameSeedIsBitIdentical) {
  for (Family f : {Family::gaussian, Family::gamma, Family::poisson, Family::exponential}) {
    const Dataset a = generate({f, 500, 99}), b = generate({f, 500, 99}), c = generate({f, 500, 100});
    EXPECT_TRUE(a == b) << to_string(f);
    EXPECT_FALSE(a == c) << to_string(f);
    EXPECT_EQ(a.level_labels(), kBinaryLabels);
  }
}

TEST(Generate, PrefixStable) {
  // Unit i depends only on (seed, i): a longer sample extends a shorter one.
  const Dataset a = generate({Family::gamma, 100, 5}), b = generate({Family::gamma, 300, 5});
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.y(i), b.y(i));
    EXPECT_EQ(a.level(i), b.level(i));
    EXPECT_EQ(a.x()(i, 1), b.x()(i, 1));
  }
}

TEST(Generate, RejectsTinySamples) { EXPECT_THROW(generate({Family::gaussian, 1, 1}), Error); }

TEST(Marginals, Gaussian) {
  const Dataset d = generate({Family::gaussian, kLarge, 2024});
  std::vector<double> x1(d.x().col(0).data(), d.x().col(0).data() + d.n());
  const Moments m = moments(x1);
  EXPECT_NEAR(m.mean, 1.0, 0.02);
  EXPECT_NEAR(m.mean, 1.0, 3 * 1.0 / std::sqrt(kLarge));
  EXPECT_NEAR(m.sd, 1.0, 0.01);
  EXPECT_NEAR(treated_share(d), 0.5, 0.01);
  EXPECT_NEAR(treated_share(d), 0.5, 3 * 0.5 / std::sqrt(kLarge));
}

TEST(Marginals, Gamma) {
  const Dataset d = generate({Family::gamma, kLarge, 2025});
  std::vector<double> x1(d.x().col(0).data(), d.x().col(0).data() + d.n());
  // X1 ~ Gamma(shape 1, scale 0.5): mean 0.5, sd 0.5.
  EXPECT_NEAR(moments(x1).mean, 0.5, 3 * 0.5 / std::sqrt(kLarge));
  EXPECT_NEAR(treated_share(d), 0.5, 3 * 0.5 / std::sqrt(kLarge));
  EXPECT_GT(d.y().minCoeff(), 0.0);
  EXPECT_GT(d.x().minCoeff(), 0.0);
}

TEST(Marginals, Poisson) {
  const Dataset d = generate({Family::poisson, kLarge, 2026});
  std::vector<double> x1(d.x().col(0).data(), d.x().col(0).data() + d.n());
  std::vector<double> x2(d.x().col(1).data(), d.x().col(1).data() + d.n());
  EXPECT_NEAR(moments(x1).mean, 0.0, 3 * std::sqrt(1.0 / 3.0) / std::sqrt(kLarge));
  EXPECT_NEAR(moments(x2).mean, 0.0, 3 / std::sqrt(kLarge));
  for (int i = 0; i < d.n(); ++i) {
    ASSERT_GE(d.y(i), 0.0);
    ASSERT_EQ(d.y(i), std::floor(d.y(i)));
  }
  auto pi = [](double a, double b) { return logistic(0.5 - 0.5 * a - 2 * a * a - 0.5 * b); };
  const double share = expect_uniform_x1(pi, normal_pdf, -9, 9);
  EXPECT_NEAR(treated_share(d), share, 3 * std::sqrt(share * (1 - share) / kLarge));

  // E[Y | A = 0] = E[(1 - pi) rate_0] / E[1 - pi].
  auto num = [&](double a, double b) { return (1 - pi(a, b)) * std::exp(5 - 0.1 * a - 0.1 * b); };
  const double want = expect_uniform_x1(num, normal_pdf, -9, 9) / (1 - share);
  double got = 0;
  for (int i : d.group(1)) got += d.y(i) / d.group_size(1);
  EXPECT_NEAR(got, want, 0.02 * want);
}

TEST(Marginals, Exponential) {
  const Dataset d = generate({Family::exponential, kLarge, 2027});
  std::vector<double> x2(d.x().col(1).data(), d.x().col(1).data() + d.n());
  EXPECT_NEAR(moments(x2).mean, 1.0, 3 / std::sqrt(kLarge));
  EXPECT_GT(d.y().minCoeff(), 0.0);
  auto pi = [](double a, double b) { return logistic(1 - a + 0.5 * b - a * b); };
  const double share = expect_uniform_x1(pi, exp_pdf, 0, 40);
  EXPECT_NEAR(treated_share(d), share, 3 * std::sqrt(share * (1 - share) / kLarge));
}

TEST(TrueEffects, PublishedValues) {
  const auto g = true_effects(Family::gaussian);
  EXPECT_EQ(g.ate, 3.0);
  const std::array<double, 5> gq{0.091, 2.847, 4.444, 5.792, 7.328};
  EXPECT_EQ(g.qtet, gq);
  EXPECT_EQ(g.qtet_source, "published");
  EXPECT_EQ(true_effects(Family::exponential).ate, -2.063);
  EXPECT_EQ(true_effects(Family::gamma).ate, 3.375);
  EXPECT_EQ(true_effects(Family::poisson).ate, -35.753);
  for (double v : true_effects(Family::poisson).qtet) EXPECT_EQ(v, std::round(v));
  const auto j = to_json(g);
  EXPECT_EQ(j["qtet"].size(), 5u);
  EXPECT_FALSE(j.contains("monte_carlo"));
}

TEST(TrueEffects, MonteCarloConcordanceQuick) {
  // Coarse check; the acceptance run uses far more draws.
  const auto t = true_effects(Family::gaussian, 1000000);
  ASSERT_TRUE(t.qtet_mc.has_value());
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR((*t.qtet_mc)[j], t.qtet[j], 0.06);
  EXPECT_NEAR(*t.ate_mc, 3.0, 0.02);
  EXPECT_TRUE(to_json(t).contains("monte_carlo"));
}

TEST(TrueCate, ClosedForms) {
  EXPECT_EQ(true_cate(Family::gaussian, 0, 0), 1.0);
  EXPECT_EQ(true_cate(Family::gaussian, 2, 0), 3.0);
  EXPECT_EQ(true_cate(Family::gamma, 1, 2), 4.0);
  try {
    true_cate(Family::poisson, 0, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unsupported);
  }
  EXPECT_THROW(true_cate(Family::exponential, 0, 0), Error);
}

TEST(EmpiricalQuantile, LeftContinuous) {
  std::vector<double> v{4, 1, 3, 2};
  EXPECT_EQ(empirical_quantile(v, 0.5), 2);
  EXPECT_EQ(empirical_quantile(v, 0.51), 3);
  EXPECT_EQ(empirical_quantile(v, 1e-9), 1);
}

TEST(Family, ParseRoundTrip) {
  for (Family f : {Family::gaussian, Family::gamma, Family::poisson, Family::exponential})
    EXPECT_EQ(parse_family(to_string(f)), f);
  EXPECT_THROW(parse_family("cauchy"), Error);
}
