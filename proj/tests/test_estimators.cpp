#include "test_helpers.hpp"

#include "quadcv/control_variates.hpp"
#include "quadcv/estimators.hpp"
#include "quadcv/models.hpp"

#include <gtest/gtest.h>

namespace quadcv {
namespace {

using testing::sample_mean;

constexpr FamilyKind kAllKinds[] = {FamilyKind::MeanLogScale, FamilyKind::MeanDiagLowRank, FamilyKind::MeanCholesky};

/// f = 0.
class ZeroModel final : public LogJointModel {
 public:
  explicit ZeroModel(Index d) : d_(d) {}
  Index dim() const override { return d_; }
  std::string name() const override { return "zero"; }
  double log_joint(const Vector&) const override { return 0.0; }
  Vector grad(const Vector&) const override { return Vector::Zero(d_); }
  Vector hvp(const Vector&, const Vector&) const override { return Vector::Zero(d_); }

 private:
  Index d_;
};

/// ELBO of q against the normalized Gaussian target N(m, P^-1), i.e. -KL(q || p).
double gaussian_elbo(const FamilyParams& f, const Vector& m, const Matrix& p) {
  const Matrix sigma = testing::dense_cov(f);
  const Vector diff = f.mean - m;
  const double d = static_cast<double>(f.dim());
  const double kl = 0.5 * ((p * sigma).trace() + diff.dot(p * diff) - d - testing::dense_logdet(p) -
                           testing::dense_logdet(sigma));
  return -kl;
}

TEST(BaseGrad, ScalarHandExpansion) {
  const GaussianTarget target = GaussianTarget::standard(1);
  const double m = 0.7;
  const auto f = FamilyParams::mean_log_scale(Vector::Constant(1, m), Vector::Constant(1, -0.4));
  const auto s = base_grad(target, f, NoiseDraw{Vector::Zero(1), Vector()});
  EXPECT_DOUBLE_EQ(s.g.mean_block(0), -m);
  EXPECT_DOUBLE_EQ(s.g.scale_block(0), 1.0);
  EXPECT_EQ(s.z, f.mean);
  EXPECT_TRUE(s.c.flat().isZero(0.0));
}

TEST(BaseGrad, EntropyOnlyTarget) {
  std::mt19937_64 rng(1);
  const ZeroModel zero(5);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, 5, 2, rng);
    const auto s = base_grad(zero, f, sample_noise(f, rng));
    EXPECT_EQ(s.g.flat(), entropy_grad(f).flat());
    EXPECT_EQ(s.f_value, 0.0);
  }
}

TEST(BaseGrad, UnbiasedForClosedFormElbo) {
  std::mt19937_64 rng(2);
  const Index d = 3;
  const Matrix p = testing::random_spd(d, rng);
  const Vector m = random_normal(d, rng);
  const GaussianTarget target(m, p);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, d, 2, rng);
    const auto est = sample_mean(100000, [&] { return base_grad(target, f, sample_noise(f, rng)).g.flat(); });
    const Vector exact = fd_gradient(
        [&](const Vector& w) {
          FamilyParams g = f;
          assign_flat(g, w);
          return gaussian_elbo(g, m, p);
        },
        flatten(f));
    const Vector z = (est.mean - exact).cwiseAbs().cwiseQuotient(est.stderr_.cwiseMax(1e-12));
    EXPECT_LE(z.maxCoeff(), 3.0) << to_string(kind);
  }
}

TEST(CorrectedGrad, Examples) {
  std::mt19937_64 rng(3);
  const LogisticRegression model(synth_logistic(30, 3, 1));
  const auto f = random_family(FamilyKind::MeanLogScale, 4, 0, rng);
  const auto s0 = base_grad(model, f, sample_noise(f, rng));
  EXPECT_EQ(corrected_grad(s0, 0.7).flat(), s0.g.flat());
  auto s1 = s0;
  s1.c = taylor_cv(f, s1.noise, model);
  EXPECT_EQ(corrected_grad(s1, 0.0).flat(), s1.g.flat());
  EXPECT_EQ(corrected_grad(s1, 0.5).flat(), (s1.g + 0.5 * s1.c).flat());
}

TEST(CorrectedGrad, MeanIndependentOfGamma) {
  std::mt19937_64 rng(4);
  const LogisticRegression model(synth_logistic(30, 3, 2));
  const auto f = random_family(FamilyKind::MeanDiagLowRank, 4, 2, rng);
  const auto s = random_surrogate(4, 2, rng);
  const CvSpec spec{CvKind::QuadraticM2, &s, 0.0};
  std::vector<NoiseDraw> noises;
  for (int i = 0; i < 10000; ++i) noises.push_back(sample_noise(f, rng));
  const auto samples = evaluate_noise(model, f, spec, noises);
  const auto base = corrected_grads(samples, 0.0);
  for (double gamma : {0.5, 1.0}) {
    const auto cg = corrected_grads(samples, gamma);
    std::size_t i = 0;
    // mean of the difference g_cv - g = gamma c, paired on the same draws
    const auto diff = sample_mean(10000, [&] {
      const Vector x = cg[i].flat() - base[i].flat();
      ++i;
      return x;
    });
    EXPECT_LE(diff.max_z(), 3.0) << "gamma " << gamma;
  }
}

TEST(MultiSample, SingleSampleEqualsCorrectedGrad) {
  std::mt19937_64 a(5), b(5);
  const LogisticRegression model(synth_logistic(30, 3, 3));
  const auto f = FamilyParams::isotropic(FamilyKind::MeanLogScale, 4, 0.5);
  const CvSpec spec{CvKind::Taylor, nullptr, 0.8};
  const auto ms = multi_sample(model, f, spec, 1, a);
  const auto noise = sample_noise(f, b);
  auto s = base_grad(model, f, noise);
  s.c = taylor_cv(f, noise, model);
  EXPECT_EQ(ms.mean.flat(), corrected_grad(s, 0.8).flat());
}

TEST(MultiSample, AveragingDividesVariance) {
  std::mt19937_64 rng(6);
  const Index d = 3;
  const GaussianTarget target(Vector::Zero(d), testing::random_spd(d, rng));
  const auto f = random_family(FamilyKind::MeanLogScale, d, 0, rng);
  const CvSpec none{};
  std::vector<WGradient> singles, means;
  for (int r = 0; r < 1000; ++r) {
    singles.push_back(multi_sample(target, f, none, 1, rng).mean);
    means.push_back(multi_sample(target, f, none, 10, rng).mean);
  }
  const double ratio = empirical_variance(means) / (empirical_variance(singles) / 10.0);
  EXPECT_NEAR(ratio, 1.0, 0.2);
}

TEST(MultiSample, DeterministicAndThreadIndependent) {
  const LogisticRegression model(synth_logistic(50, 4, 4));
  std::mt19937_64 init(7);
  const auto f = random_family(FamilyKind::MeanCholesky, 5, 0, init);
  const auto s = random_surrogate(5, 2, init);
  const CvSpec spec{CvKind::QuadraticM1, &s, 0.3};
  std::mt19937_64 a(8), b(8), c(8);
  const auto x = multi_sample(model, f, spec, 10, a, 1);
  const auto y = multi_sample(model, f, spec, 10, b, 1);
  const auto z = multi_sample(model, f, spec, 10, c, 4);
  EXPECT_EQ(x.mean.flat(), y.mean.flat());
  EXPECT_EQ(x.mean.flat(), z.mean.flat());
  ASSERT_EQ(x.samples.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(x.samples[i].c.flat(), z.samples[i].c.flat());
}

TEST(MultiSample, RejectsZeroSamples) {
  std::mt19937_64 rng(9);
  const auto g = GaussianTarget::standard(2);
  EXPECT_THROW(multi_sample(g, FamilyParams::isotropic(FamilyKind::MeanLogScale, 2, 1.0), CvSpec{}, 0, rng),
               std::invalid_argument);
  EXPECT_THROW(multi_sample(g, FamilyParams::isotropic(FamilyKind::MeanLogScale, 2, 1.0),
                            CvSpec{CvKind::QuadraticM2, nullptr, 0.0}, 1, rng),
               std::invalid_argument);
}

WGradient wg(Vector mean, Vector scale) { return {std::move(mean), std::move(scale)}; }

TEST(EmpiricalVariance, Examples) {
  const std::vector<WGradient> same(4, wg(Vector{{1.0, 2.0}}, Vector{{3.0}}));
  EXPECT_EQ(empirical_variance(same), 0.0);
  const std::vector<WGradient> pm{wg(Vector{{1.0, 0.0}}, Vector::Zero(1)), wg(Vector{{-1.0, 0.0}}, Vector::Zero(1))};
  EXPECT_EQ(empirical_variance(pm), 1.0);
  EXPECT_EQ(empirical_variance(pm, Block::Mean), 1.0);
  EXPECT_EQ(empirical_variance(pm, Block::Scale), 0.0);
  EXPECT_THROW(empirical_variance(std::vector<WGradient>(1, pm[0])), std::invalid_argument);
}

TEST(EmpiricalVariance, MatchesTextbookOracle) {
  std::mt19937_64 rng(10);
  std::vector<WGradient> xs;
  for (int i = 0; i < 500; ++i) xs.push_back(wg(random_normal(4, rng, 3.0).array() + 10.0, random_normal(6, rng)));
  // sum over coordinates of the 1/N per-coordinate variance, accumulated in long double
  auto oracle = [&](Block b) {
    long double total = 0.0L;
    const Index n = b == Block::Mean ? 4 : b == Block::Scale ? 6 : 10;
    const Index off = b == Block::Scale ? 4 : 0;
    for (Index j = 0; j < n; ++j) {
      long double s = 0.0L, s2 = 0.0L;
      for (const auto& x : xs) {
        const long double v = x.flat()(off + j);
        s += v;
        s2 += v * v;
      }
      const long double nn = xs.size();
      total += s2 / nn - (s / nn) * (s / nn);
    }
    return static_cast<double>(total);
  };
  for (Block b : {Block::All, Block::Mean, Block::Scale})
    EXPECT_LE(testing::rel_diff(empirical_variance(xs, b), oracle(b)), 1e-10);
}

TEST(EmpiricalVariance, VarianceIdentity) {
  std::mt19937_64 rng(11);
  const LogisticRegression model(synth_logistic(40, 4, 5));
  const auto f = random_family(FamilyKind::MeanDiagLowRank, 5, 2, rng);
  const auto s = random_surrogate(5, 2, rng);
  std::vector<NoiseDraw> noises;
  for (int i = 0; i < 300; ++i) noises.push_back(sample_noise(f, rng));
  const auto samples = evaluate_noise(model, f, CvSpec{CvKind::QuadraticM2, &s, 0.0}, noises);
  std::vector<WGradient> g, c;
  for (const auto& x : samples) {
    g.push_back(x.g);
    c.push_back(x.c);
  }
  for (double gamma : {-0.7, 0.4, 1.3}) {
    const double direct = empirical_variance(corrected_grads(samples, gamma));
    const double assembled =
        empirical_variance(g) + 2.0 * gamma * empirical_covariance(g, c) + gamma * gamma * empirical_variance(c);
    EXPECT_LE(testing::rel_diff(direct, assembled), 1e-8);
  }
}

TEST(ElboEstimate, EntropyOnlyTarget) {
  std::mt19937_64 rng(12);
  const ZeroModel zero(4);
  const auto f = random_family(FamilyKind::MeanCholesky, 4, 0, rng);
  std::vector<NoiseDraw> noises(3, sample_noise(f, rng));
  EXPECT_EQ(elbo_estimate(evaluate_noise(zero, f, CvSpec{}, noises), f), entropy(f));
  EXPECT_THROW(elbo_estimate(std::vector<GradSample>{}, f), std::invalid_argument);
}

TEST(ElboEstimate, MatchesClosedFormKl) {
  std::mt19937_64 rng(13);
  const Index d = 3;
  const Matrix p = testing::random_spd(d, rng);
  const Vector m = random_normal(d, rng);
  const GaussianTarget target(m, p);
  for (auto kind : kAllKinds) {
    const auto f = random_family(kind, d, 2, rng);
    std::vector<NoiseDraw> noises;
    for (int i = 0; i < 100000; ++i) noises.push_back(sample_noise(f, rng));
    const auto samples = evaluate_noise(target, f, CvSpec{}, noises);
    const auto fv = sample_mean(static_cast<long>(samples.size()), [&, i = std::size_t{0}]() mutable {
      return Vector::Constant(1, samples[i++].f_value);
    });
    const double est = elbo_estimate(samples, f);
    EXPECT_LE(std::abs(est - gaussian_elbo(f, m, p)), 3.0 * fv.stderr_(0)) << to_string(kind);
  }
}

TEST(ElboEstimate, ZeroAtExactPosterior) {
  std::mt19937_64 rng(14);
  const auto target = GaussianTarget::standard(1);
  const auto f = FamilyParams::isotropic(FamilyKind::MeanLogScale, 1, 1.0);
  std::vector<NoiseDraw> noises;
  for (int i = 0; i < 100000; ++i) noises.push_back(sample_noise(f, rng));
  // f_value + H has standard deviation 1/sqrt(2) per draw
  EXPECT_NEAR(elbo_estimate(evaluate_noise(target, f, CvSpec{}, noises), f), 0.0, 3.0 * std::sqrt(0.5 / 100000));
}

}  // namespace
}  // namespace quadcv
