#include "test_helpers.hpp"

#include "quadcv/control_variates.hpp"
#include "quadcv/estimators.hpp"
#include "quadcv/models.hpp"

#include <gtest/gtest.h>

namespace quadcv {
namespace {

using testing::sample_mean;

constexpr FamilyKind kAllKinds[] = {FamilyKind::MeanLogScale, FamilyKind::MeanDiagLowRank, FamilyKind::MeanCholesky};
constexpr double kSigns[] = {-1.0, 1.0};

QuadSurrogate zero_surrogate(Index d, Index rank) {
  return {Vector::Zero(d), DiagPlusLowRank(Vector::Zero(d), Matrix::Zero(d, rank)), Vector::Zero(d)};
}

QuadSurrogate with_params(const QuadSurrogate& s, const Vector& v) {
  QuadSurrogate t = s;
  assign_flat(t, v);
  return t;
}

FamilyParams family_at(const FamilyParams& f, const Vector& w) {
  FamilyParams g = f;
  assign_flat(g, w);
  return g;
}

TEST(QuadSurrogate, InitialState) {
  std::mt19937_64 rng(1);
  const auto s = QuadSurrogate::initial(200, 10, rng);
  EXPECT_TRUE(s.b.isZero(0.0));
  EXPECT_TRUE(s.curvature.diag.isZero(0.0));
  EXPECT_TRUE(s.z0.isZero(0.0));
  EXPECT_EQ(s.num_params(), 2 * 200 + 200 * 10);
  const double var = s.curvature.factor.squaredNorm() / 2000.0;
  EXPECT_NEAR(var, 1e-4, 1e-5);
  EXPECT_EQ(s.lowrank_sign, -1.0);
  EXPECT_THROW(QuadSurrogate::initial(3, 1, rng, 0.5), std::invalid_argument);
}

TEST(QuadSurrogate, FlattenRoundTrip) {
  std::mt19937_64 rng(2);
  const auto s = random_surrogate(5, 2, rng);
  const Vector v = flatten(s);
  EXPECT_EQ(v.size(), s.num_params());
  EXPECT_EQ(v.head(5), s.b);
  EXPECT_EQ(v.segment(5, 5), s.curvature.diag);
  EXPECT_EQ(v(10 + 5), s.curvature.factor(0, 1));
  EXPECT_EQ(flatten(with_params(s, v)), v);
}

TEST(CurvatureHelpers, MatchDenseCurvature) {
  std::mt19937_64 rng(3);
  for (double sign : kSigns) {
    const auto s = random_surrogate(7, 3, rng, sign);
    const Matrix b = testing::dense_curvature(s);
    const Vector x = random_normal(7, rng);
    EXPECT_LE(relative_error(curvature_apply(s, x), b * x), 1e-12);
    const Matrix xs = random_normal(7, 4, rng);
    EXPECT_LE(testing::rel_diff(curvature_apply(s, xs), b * xs), 1e-12);
    EXPECT_LE(relative_error(curvature_diag(s), b.diagonal()), 1e-12);
    for (auto kind : kAllKinds) {
      const auto f = random_family(kind, 7, 2, rng);
      EXPECT_LE(testing::rel_diff(curvature_trace(s, mean_cov(f).second), (b * testing::dense_cov(f)).trace()), 1e-12);
    }
  }
}

TEST(QuadGrad, Examples) {
  std::mt19937_64 rng(4);
  const Vector z = random_normal(4, rng);
  EXPECT_TRUE(quad_grad(zero_surrogate(4, 2), z).isZero(0.0));
  const auto s = random_surrogate(4, 2, rng);
  EXPECT_EQ(quad_grad(s, s.z0), s.b);
}

TEST(QuadGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (double sign : kSigns) {
    const auto s = random_surrogate(6, 2, rng, sign);
    const Vector z = random_normal(6, rng);
    EXPECT_LE(relative_error(quad_grad(s, z), fd_gradient([&](const Vector& x) { return quad_value(s, x); }, z)), 1e-6);
  }
}

TEST(ExpectedQuadratic, Examples) {
  std::mt19937_64 rng(6);
  const auto f = random_family(FamilyKind::MeanCholesky, 3, 0, rng);
  EXPECT_EQ(expected_quadratic(zero_surrogate(3, 1), f), 0.0);
  // B = I, b = 0, z0 = mu, Sigma = I_2 -> 1/2 tr(Sigma) = 1
  QuadSurrogate s{Vector::Zero(2), DiagPlusLowRank(Vector::Ones(2), Matrix(2, 0)), Vector::Zero(2)};
  EXPECT_DOUBLE_EQ(expected_quadratic(s, FamilyParams::isotropic(FamilyKind::MeanLogScale, 2, 1.0)), 1.0);
}

TEST(ExpectedQuadratic, MatchesMonteCarloMean) {
  std::mt19937_64 rng(7);
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, 5, 2, rng);
      const auto s = random_surrogate(5, 2, rng, sign);
      const auto est = sample_mean(1000000, [&] {
        return Vector::Constant(1, quad_value(s, transform(f, sample_noise(f, rng))));
      });
      const double err = std::abs(est.mean(0) - expected_quadratic(s, f));
      EXPECT_LE(err, 3.0 * est.stderr_(0)) << to_string(kind) << " sign " << sign;
    }
  }
}

TEST(GradExpectedQuadratic, Examples) {
  std::mt19937_64 rng(8);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, 4, 2, rng);
    auto s = zero_surrogate(4, 2);
    s.b = random_normal(4, rng);
    s.z0 = random_normal(4, rng);
    const auto g = grad_expected_quadratic(s, f);
    EXPECT_EQ(g.mean_block, s.b);
    EXPECT_TRUE(g.scale_block.isZero(0.0));

    auto t = random_surrogate(4, 2, rng);
    t.b.setZero();
    t.z0 = f.mean;
    EXPECT_TRUE(grad_expected_quadratic(t, f).mean_block.isZero(0.0));
  }
}

TEST(GradExpectedQuadratic, MatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, 6, 2, rng);
      const auto s = random_surrogate(6, 3, rng, sign);
      const Vector fd = fd_gradient([&](const Vector& w) { return expected_quadratic(s, family_at(f, w)); }, flatten(f));
      EXPECT_LE(relative_error(grad_expected_quadratic(s, f).flat(), fd), 1e-6) << to_string(kind);
    }
  }
}

TEST(CvValue, ZeroSurrogateGivesZero) {
  std::mt19937_64 rng(10);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, 4, 2, rng);
    EXPECT_TRUE(cv_value(zero_surrogate(4, 2), f, sample_noise(f, rng)).flat().isZero(0.0));
  }
}

TEST(CvValue, ZeroMeanOverDraws) {
  std::mt19937_64 rng(11);
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, 4, 2, rng);
      const auto s = random_surrogate(4, 2, rng, sign);
      const auto est = sample_mean(100000, [&] { return cv_value(s, f, sample_noise(f, rng)).flat(); });
      EXPECT_LE(est.max_z(), 3.0) << to_string(kind) << " sign " << sign;
    }
  }
}

TEST(CvValue, ExactCancellationOnQuadraticTarget) {
  std::mt19937_64 rng(12);
  const Index d = 6;
  const Matrix p = testing::random_spd(d, rng);
  const Vector m = random_normal(d, rng);
  const GaussianTarget target(m, p);
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, d, 2, rng);
      const auto s = testing::exact_surrogate(m, p, random_normal(d, rng), sign);
      const auto first = base_grad(target, f, sample_noise(f, rng));
      const Vector ref = (first.g + cv_value(s, f, first.noise)).flat();
      for (int k = 0; k < 50; ++k) {
        const auto n = sample_noise(f, rng);
        const Vector x = (base_grad(target, f, n).g + cv_value(s, f, n)).flat();
        EXPECT_LE(relative_error(x, ref), 1e-10) << to_string(kind) << " sign " << sign;
      }
    }
  }
}

TEST(FitGradMethod2, ExactSurrogateGivesZero) {
  std::mt19937_64 rng(13);
  const Matrix p = testing::random_spd(4, rng);
  const Vector m = random_normal(4, rng);
  const GaussianTarget target(m, p);
  const auto f = random_family(FamilyKind::MeanLogScale, 4, 0, rng);
  const auto s = testing::exact_surrogate(m, p, f.mean);
  const auto n = sample_noise(f, rng);
  EXPECT_LE(fit_grad_method2(s, f, n, target.grad(transform(f, n))).flat().norm(), 1e-12);
}

TEST(FitGradMethod2, ScalarExpansion) {
  QuadSurrogate s{Vector::Constant(1, 0.3), DiagPlusLowRank(Vector::Constant(1, -0.7), Matrix(1, 0)),
                  Vector::Constant(1, 0.2)};
  const auto f = FamilyParams::mean_log_scale(Vector::Constant(1, 0.1), Vector::Zero(1));
  const NoiseDraw n{Vector::Constant(1, 1.5), Vector()};
  const double z = 1.6, gf = -2.0;
  const double r = gf - (0.3 - 0.7 * (z - 0.2));
  const auto h = fit_grad_method2(s, f, n, Vector::Constant(1, gf));
  EXPECT_NEAR(h.b(0), -r, 1e-15);
  EXPECT_NEAR(h.diag(0), -r * (z - 0.2), 1e-15);
  EXPECT_EQ(h.factor.size(), 0);
}

TEST(FitGradMethod2, MatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  const LogisticRegression model(synth_logistic(40, 5, 3));
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, 6, 2, rng);
      const auto s = random_surrogate(6, 2, rng, sign);
      const auto n = sample_noise(f, rng);
      const Vector z = transform(f, n);
      const Vector gf = model.grad(z);
      const Vector fd = fd_gradient(
          [&](const Vector& v) { return 0.5 * (gf - quad_grad(with_params(s, v), z)).squaredNorm(); }, flatten(s));
      EXPECT_LE(relative_error(fit_grad_method2(s, f, n, gf).flat(), fd), 1e-6) << to_string(kind);
    }
  }
}

TEST(FitGradMethod1, ZeroInputsGiveZero) {
  std::mt19937_64 rng(15);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, 4, 2, rng);
    const auto h = fit_grad_method1(zero_surrogate(4, 1), f, sample_noise(f, rng), WGradient::zeros_like(f));
    EXPECT_TRUE(h.flat().isZero(0.0));
  }
}

TEST(FitGradMethod1, MatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  const LogisticRegression model(synth_logistic(40, 4, 4));
  for (auto kind : kAllKinds) {
    for (double sign : kSigns) {
      const auto f = random_family(kind, 5, 2, rng);
      const auto s = random_surrogate(5, 1, rng, sign);
      const auto n = sample_noise(f, rng);
      const WGradient g = base_grad(model, f, n).g;
      const Vector fd =
          fd_gradient([&](const Vector& v) { return (g + cv_value(with_params(s, v), f, n)).squared_norm(); }, flatten(s));
      EXPECT_LE(relative_error(fit_grad_method1(s, f, n, g).flat(), fd), 1e-5) << to_string(kind);
    }
  }
}

TEST(FitGradMethod1, StationaritySanityAgainstSamplingOracle) {
  // At f-hat = f and z0 = mu, average h over 10^4 draws and compare with the
  // finite-difference gradient of the brute-force sample objective
  // v -> mean_i |g_i + c_v,i|^2 over the same draws.
  std::mt19937_64 rng(17);
  const Index d = 4;
  const Matrix p = testing::random_spd(d, rng);
  const Vector m = random_normal(d, rng);
  const GaussianTarget target(m, p);
  const auto f = random_family(FamilyKind::MeanLogScale, d, 0, rng);
  const auto s = testing::exact_surrogate(m, p, f.mean);
  const long n = 10000;
  std::vector<NoiseDraw> noises;
  std::vector<WGradient> gs;
  for (long i = 0; i < n; ++i) {
    noises.push_back(sample_noise(f, rng));
    gs.push_back(base_grad(target, f, noises.back()).g);
  }
  std::size_t i = 0;
  const auto h = sample_mean(n, [&] {
    const Vector out = fit_grad_method1(s, f, noises[i], gs[i]).flat();
    ++i;
    return out;
  });
  const Vector oracle = fd_gradient(
      [&](const Vector& v) {
        const auto t = with_params(s, v);
        double acc = 0.0;
        for (long k = 0; k < n; ++k) acc += (gs[k] + cv_value(t, f, noises[k])).squared_norm();
        return acc / static_cast<double>(n);
      },
      flatten(s), 1e-4);
  EXPECT_LE(std::abs(h.mean.norm() - oracle.norm()), 3.0 * h.stderr_.norm());
  EXPECT_LE(relative_error(h.mean, oracle), 1e-5);
}

TEST(TaylorCv, ScalarExample) {
  // f(z) = -z^2 / 2, mu = 0, psi = 0, eps = 2. The mean block is -H (z - mu) = +2
  // under the (expectation - sample) sign shared with the quadratic control
  // variate; the scale block vanishes because grad f(0) = 0.
  const GaussianTarget target = GaussianTarget::standard(1);
  const auto f = FamilyParams::mean_log_scale(Vector::Zero(1), Vector::Zero(1));
  const auto c = taylor_cv(f, NoiseDraw{Vector::Constant(1, 2.0), Vector()}, target);
  EXPECT_DOUBLE_EQ(c.mean_block(0), 2.0);
  EXPECT_DOUBLE_EQ(c.scale_block(0), 0.0);
}

TEST(TaylorCv, ZeroMeanOverDraws) {
  std::mt19937_64 rng(18);
  const LogisticRegression model(synth_logistic(30, 3, 5));
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, 4, 2, rng);
    const Vector g0 = model.grad(f.mean);
    const auto est = sample_mean(100000, [&] { return taylor_cv(f, sample_noise(f, rng), model, g0).flat(); });
    EXPECT_LE(est.max_z(), 3.0) << to_string(kind);
  }
}

TEST(TaylorCv, OneGradientOneHvpAtTheMean) {
  std::mt19937_64 rng(19);
  const LogisticRegression inner(synth_logistic(30, 3, 6));
  CountingModel model(inner);
  const auto f = random_family(FamilyKind::MeanDiagLowRank, 4, 2, rng);
  taylor_cv(f, sample_noise(f, rng), model);
  EXPECT_EQ(model.evaluations(), 1);
  EXPECT_EQ(model.hvps(), 1);
}

TEST(TaylorCv, BaselineFormCancelsToZeroOrder) {
  std::mt19937_64 rng(20);
  const LogisticRegression model(synth_logistic(50, 6, 7));
  for (int n : {2, 5}) {
    const auto f = random_family(FamilyKind::MeanLogScale, 7, 0, rng);
    std::vector<NoiseDraw> noises;
    for (int i = 0; i < n; ++i) noises.push_back(sample_noise(f, rng));
    Vector sum = Vector::Zero(7);
    for (const auto& c : taylor_scale_cv_baseline(f, noises, model)) sum += c;
    EXPECT_LE(relative_error(sum, taylor_scale_cv_zero_order_sum(f, noises, model)), 1e-12) << "N=" << n;
  }
}

TEST(GammaTracker, ZeroBeforeFirstUpdate) {
  const GammaTracker t;
  EXPECT_EQ(t.gamma(), 0.0);
  EXPECT_EQ(t.updates(), 0);
}

WGradient vec_grad(const Vector& x) { return {x, Vector()}; }

TEST(GammaTracker, PerfectAnticorrelationGivesOne) {
  std::mt19937_64 rng(21);
  GammaTracker t;
  std::vector<WGradient> g, c;
  for (int k = 0; k < 2000; ++k) {
    const Vector e = random_normal(3, rng);
    g.push_back(vec_grad(e));
    c.push_back(vec_grad(-e));
    t.update(c.back(), g.back());
  }
  EXPECT_NEAR(t.gamma(), 1.0, 1e-12);
  std::vector<WGradient> sum;
  for (std::size_t k = 0; k < g.size(); ++k) sum.push_back(g[k] + t.gamma() * c[k]);
  EXPECT_LE(empirical_variance(sum), 1e-20);
}

TEST(GammaTracker, IndependentDrawsGiveNearZero) {
  std::mt19937_64 rng(22);
  GammaTracker t(0.999);
  for (int k = 0; k < 100000; ++k) t.update(vec_grad(random_normal(3, rng)), vec_grad(random_normal(3, rng)));
  // Standard deviation of the EMA ratio is about sqrt((1 - decay) / 2 / 3).
  EXPECT_LE(std::abs(t.gamma()), 3.0 * std::sqrt(0.001 / 6.0));
}

TEST(GammaTracker, ClampAndFloor) {
  GammaTracker t(0.5, 1e-12, 10.0);
  t.update(vec_grad(Vector::Constant(1, 1e-3)), vec_grad(Vector::Constant(1, -1.0)));
  EXPECT_EQ(t.gamma(), 10.0);
  GammaTracker zero_c;
  zero_c.update(vec_grad(Vector::Zero(2)), vec_grad(Vector::Ones(2)));
  EXPECT_EQ(zero_c.gamma(), 0.0);
  EXPECT_THROW(GammaTracker(1.0), std::invalid_argument);
}

TEST(GammaTracker, EmaRecurrence) {
  GammaTracker t(0.9);
  const WGradient c = vec_grad(Vector{{1.0, 2.0}});
  const WGradient g = vec_grad(Vector{{-3.0, 0.5}});
  t.update(c, g);
  EXPECT_DOUBLE_EQ(t.ema_cg(), 0.1 * (-2.0));
  EXPECT_DOUBLE_EQ(t.ema_cc(), 0.1 * 5.0);
  t.update(c, g);
  EXPECT_DOUBLE_EQ(t.ema_cg(), 0.9 * 0.1 * (-2.0) + 0.1 * (-2.0));
  EXPECT_NEAR(t.gamma(), 0.4, 1e-15);
}

}  // namespace
}  // namespace quadcv
