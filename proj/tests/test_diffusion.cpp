#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dmalign/diffusion.hpp"

using namespace dmalign;
using namespace dmalign::diffusion;

namespace {

Tensor filled(Shape s, float v) { return Tensor(s, v); }

Tensor randn_tensor(Shape s, Rng& rng) { return randn(s, rng); }

// schedule with a single prescribed alpha_bar at t=1
NoiseSchedule one_step(double abar) { return schedule_from_betas({1.0 - abar}); }

}  // namespace

TEST(Schedule, TwoStepProduct) {
  const auto s = schedule_from_betas({0.5, 0.5});
  EXPECT_EQ(s.T, 2);
  EXPECT_DOUBLE_EQ(s.alpha_bar[1], 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar[2], 0.25);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 1.0);
}

TEST(Schedule, SingleStep) {
  const auto s = schedule_from_betas({0.1});
  EXPECT_DOUBLE_EQ(s.alpha_bar[1], 0.9);
}

TEST(Schedule, DefaultLinearEndsNearZeroAndDecreases) {
  const auto s = make_schedule(1000, "linear", 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.beta[1], 1e-4);
  EXPECT_NEAR(s.beta[1000], 0.02, 1e-15);
  // independent oracle: product of (1 - beta_i) in long double
  long double prod = 1.0L;
  for (int i = 0; i < 1000; ++i) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * i / 999.0L);
  EXPECT_NEAR(s.alpha_bar[1000], static_cast<double>(prod), 1e-12);
  EXPECT_LT(s.alpha_bar[1000], 0.01);
  for (int t = 1; t <= 1000; ++t) {
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_EQ(s.alpha_bar[t], s.alpha_bar[t - 1] * s.alpha[t]);
  }
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(make_schedule(0), ConfigError);
  EXPECT_THROW(make_schedule(10, "linear", 0.0, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, "linear", 0.03, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, "linear", 1e-4, 1.0), ConfigError);
  EXPECT_THROW(make_schedule(10, "cosine"), ConfigError);
}

TEST(Schedule, JsonRoundTripKeepsFingerprint) {
  const auto s = make_schedule(500, "linear", 2e-4, 0.03);
  const auto r = schedule_from_json(s.to_json());
  EXPECT_EQ(r.fingerprint(), s.fingerprint());
  EXPECT_EQ(r.alpha_bar, s.alpha_bar);
  EXPECT_NE(make_schedule(501).fingerprint(), make_schedule(500).fingerprint());
}

TEST(QSample, FirstStepIsNearlyClean) {
  const auto s = make_schedule(1000);
  Rng rng(1);
  const Tensor x0 = randn_tensor({1, 4, 8, 8}, rng);
  const Tensor eps = randn_tensor({1, 4, 8, 8}, rng);
  const Tensor xt = q_sample(x0, 1, eps, s);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(xt[i], x0[i], 0.05);
}

TEST(QSample, DirectSubstitution) {
  const auto s = one_step(0.25);
  const Tensor a = q_sample(filled({1, 4, 2, 2}, 0.f), 1, filled({1, 4, 2, 2}, 1.f), s);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 0.8660254, 1e-6);
  const Tensor b = q_sample(filled({1, 4, 2, 2}, 1.f), 1, filled({1, 4, 2, 2}, 0.f), s);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_FLOAT_EQ(b[i], 0.5f);
}

TEST(QSample, ShapeMismatchThrows) {
  const auto s = make_schedule(10);
  EXPECT_THROW(q_sample(Tensor({1, 4, 2, 2}), 1, Tensor({1, 4, 2, 3}), s), ShapeError);
  EXPECT_THROW(q_sample(Tensor({1, 4, 2, 2}), 11, Tensor({1, 4, 2, 2}), s), ParameterError);
}

TEST(QSample, MomentsMatchWithinThreeStandardErrors) {
  const auto s = make_schedule(1000);
  Rng rng(11);
  for (int t : {1, 250, 999}) {
    const int n = 20000;
    const Tensor eps = randn_tensor({1, 1, 1, n}, rng);
    const Tensor xt = q_sample(filled({1, 1, 1, n}, 0.7f), t, eps, s);
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += xt[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= n - 1;
    const double ab = s.alpha_bar[t];
    const double want_var = 1.0 - ab;
    EXPECT_NEAR(mean, std::sqrt(ab) * 0.7, 3.0 * std::sqrt(want_var / n)) << "t=" << t;
    // standard error of the sample variance of a Gaussian: var * sqrt(2/(n-1))
    EXPECT_NEAR(var, want_var, 3.0 * want_var * std::sqrt(2.0 / (n - 1))) << "t=" << t;
  }
}

TEST(EpsFromX0, InvertsQSample) {
  const auto s = make_schedule(1000);
  Rng rng(3);
  std::uniform_int_distribution<int> pick(1, 1000);
  for (int k = 0; k < 20; ++k) {
    const int t = pick(rng);
    const Tensor x0 = randn_tensor({2, 4, 4, 4}, rng);
    const Tensor eps = randn_tensor({2, 4, 4, 4}, rng);
    const Tensor got = eps_from_x0(q_sample(x0, t, eps, s), x0, t, s);
    const double tol = 1e-6 / std::sqrt(1.0 - s.alpha_bar[t]) * 8;
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], eps[i], tol) << "t=" << t;
  }
}

TEST(EpsFromX0, KnownValues) {
  const auto s = one_step(0.25);
  Tensor x({1, 1, 1, 3});
  x[0] = 1.f;
  x[1] = -2.f;
  x[2] = 0.5f;
  const Tensor e = eps_from_x0(x, x, 1, s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(e[i], x[i] * 0.5 / std::sqrt(0.75), 1e-6);
  const Tensor z = eps_from_x0(filled({1, 1, 2, 2}, 0.f), filled({1, 1, 2, 2}, 0.f), 1, s);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z[i], 0.f);
}

TEST(EpsFromX0, AlphaBarOneIsRejected) {
  const auto s = make_schedule(10);
  EXPECT_THROW(eps_from_x0(Tensor({1, 1, 1, 1}), Tensor({1, 1, 1, 1}), 0, s), ParameterError);
}

TEST(X0FromEps, RecoversTrueX0) {
  const auto s = make_schedule(1000);
  Rng rng(4);
  const Tensor x0 = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor eps = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor back = x0_from_eps(q_sample(x0, 400, eps, s), eps, 400, s);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], x0[i], 1e-5);
}

TEST(DdimStep, FinalStepReturnsX0Exactly) {
  const auto s = make_schedule(1000);
  Rng rng(5);
  const Tensor xt = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor x0 = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor out = ddim_step(xt, x0, 20, 0, 0.0, s);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], x0[i]);
}

TEST(DdimStep, OracleLandsOnForwardMarginal) {
  const auto s = make_schedule(1000);
  Rng rng(6);
  const Tensor x0 = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor eps = randn_tensor({1, 4, 4, 4}, rng);
  const Tensor xt = q_sample(x0, 700, eps, s);
  const Tensor got = ddim_step(xt, x0, 700, 300, 0.0, s);
  const Tensor want = q_sample(x0, 300, eps, s);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-5);
}

TEST(DdimStep, ScalarWorkedExample) {
  // alpha_bar_t = 0.25 at t=2, alpha_bar_prev = 0.81 at t=1
  const auto s = schedule_from_betas({0.19, 1.0 - 0.25 / 0.81});
  const Tensor out = ddim_step(filled({1, 1, 1, 1}, 1.f), filled({1, 1, 1, 1}, 0.4f), 2, 1, 0.0, s);
  const double eps = (1.0 - 0.5 * 0.4) / std::sqrt(0.75);
  EXPECT_NEAR(eps, 0.92376, 1e-5);
  EXPECT_NEAR(out[0], 0.9 * 0.4 + std::sqrt(0.19) * eps, 1e-6);
  // quoted figure is truncated; exact is 0.762658
  EXPECT_NEAR(out[0], 0.76264, 2e-5);
}

TEST(DdimStep, SigmaBoundsAndNoiseContract) {
  const auto s = make_schedule(1000);
  const Tensor x({1, 1, 2, 2});
  const double limit = std::sqrt(1.0 - s.alpha_bar[500]);
  EXPECT_THROW(ddim_step(x, x, 600, 500, limit * 1.01, s, &x), ParameterError);
  EXPECT_THROW(ddim_step(x, x, 600, 500, 0.1, s), ParameterError);
  EXPECT_THROW(ddim_step(x, x, 500, 500, 0.0, s), ParameterError);
  EXPECT_THROW(ddim_step(x, x, 0, 0, 0.0, s), ParameterError);
  EXPECT_NO_THROW(ddim_step(x, x, 600, 500, limit * 0.99, s, &x));
}

TEST(DdimStep, StochasticTermAddsSigmaTimesNoise) {
  const auto s = make_schedule(1000);
  Rng rng(8);
  const Tensor xt = randn_tensor({1, 2, 3, 3}, rng);
  const Tensor x0 = randn_tensor({1, 2, 3, 3}, rng);
  const Tensor z = randn_tensor({1, 2, 3, 3}, rng);
  const double sigma = 0.2;
  const Tensor got = ddim_step(xt, x0, 800, 600, sigma, s, &z);
  const double ab = s.alpha_bar[800];
  const double abp = s.alpha_bar[600];
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double e = (xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
    const double want = std::sqrt(abp) * x0[i] + std::sqrt(1.0 - abp - sigma * sigma) * e + sigma * z[i];
    EXPECT_NEAR(got[i], want, 1e-5);
  }
}

TEST(DdimStep, OracleTrajectoriesEndAtX0ForRandomStrides) {
  const auto s = make_schedule(1000);
  Rng rng(9);
  std::uniform_int_distribution<int> pick_stride(1, 1000);
  for (int pattern = 0; pattern < 5; ++pattern) {
    const int stride = pattern == 0 ? 1 : pick_stride(rng);
    const Tensor x0 = randn_tensor({1, 4, 4, 4}, rng);
    const Tensor eps = randn_tensor({1, 4, 4, 4}, rng);
    Tensor x = q_sample(x0, 1000, eps, s);
    for (const auto& [t, t_prev] : stride_schedule(1000, stride)) {
      x = ddim_step(x, x0, t, t_prev, 0.0, s);
      const Tensor want = q_sample(x0, t_prev, eps, s);
      for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(x[i], want[i], 1e-3) << "stride " << stride << " t " << t_prev;
    }
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], x0[i]) << "stride " << stride;
  }
  // any starting point works too
  const Tensor x0 = randn_tensor({1, 4, 4, 4}, rng);
  Tensor x = randn_tensor({1, 4, 4, 4}, rng);
  for (const auto& [t, t_prev] : stride_schedule(1000, 37)) x = ddim_step(x, x0, t, t_prev, 0.0, s);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], x0[i]);
}

TEST(StrideSchedule, VisitsExpectedSteps) {
  const auto a = stride_schedule(1000, 20);
  ASSERT_EQ(a.size(), 50u);
  EXPECT_EQ(a.front(), std::make_pair(1000, 980));
  EXPECT_EQ(a.back(), std::make_pair(20, 0));
  const auto b = stride_schedule(1000, 1000);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0], std::make_pair(1000, 0));
  const auto c = stride_schedule(10, 3);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c.back(), std::make_pair(1, 0));
  EXPECT_THROW(stride_schedule(10, 0), ParameterError);
  EXPECT_THROW(stride_schedule(10, 11), ParameterError);
}
