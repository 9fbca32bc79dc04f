#ifndef QUADCV_GRADCHECK_HPP
#define QUADCV_GRADCHECK_HPP

// Central finite-difference checks for every analytic gradient in the
// library: model gradients and Hessian-vector products, the reparameterization
// Jacobian products, entropy, the surrogate expectation and both surrogate
// fitting gradients.

#include "quadcv/control_variates.hpp"
#include "quadcv/datasets.hpp"
#include "quadcv/estimators.hpp"
#include "quadcv/families.hpp"
#include "quadcv/models.hpp"

#include <cstdint>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace quadcv {

inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  Vector g(x.size());
  Vector xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    xp(i) = xi + h;
    const double fp = f(xp);
    xp(i) = xi - h;
    const double fm = f(xp);
    xp(i) = xi;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// (g(x + h v) - g(x - h v)) / 2h.
inline Vector fd_directional(const std::function<Vector(const Vector&)>& g, const Vector& x, const Vector& v,
                             double h = 1e-5) {
  return (g(x + h * v) - g(x - h * v)) / (2.0 * h);
}

/// |a - b| / max(|a|, |b|), 0 when both vanish.
inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

template <typename Rng>
Vector random_normal(Index n, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

template <typename Rng>
Matrix random_normal(Index rows, Index cols, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

/// Well-conditioned random parameters: log scales in about [-0.7, 0.3].
template <typename Rng>
FamilyParams random_family(FamilyKind kind, Index d, Index rank, Rng& rng) {
  const Vector mu = random_normal(d, rng, 0.5);
  const Vector psi = (random_normal(d, rng, 0.2).array() - 0.2).matrix();
  switch (kind) {
    case FamilyKind::MeanLogScale: return FamilyParams::mean_log_scale(mu, psi);
    case FamilyKind::MeanDiagLowRank: return FamilyParams::mean_diag_low_rank(mu, psi, random_normal(d, rank, rng, 0.3));
    case FamilyKind::MeanCholesky: {
      Matrix s = random_normal(d, d, rng, 0.3);
      s.diagonal() = psi;
      return FamilyParams::mean_cholesky(mu, s);
    }
  }
  throw std::logic_error("unreachable");
}

template <typename Rng>
QuadSurrogate random_surrogate(Index d, Index rank, Rng& rng, double lowrank_sign = kDefaultLowRankSign) {
  return {random_normal(d, rng), DiagPlusLowRank(random_normal(d, rng), random_normal(d, rank, rng, 0.5)),
          random_normal(d, rng, 0.5), lowrank_sign};
}

struct GradCheck {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return rel_error <= tolerance; }
};

inline constexpr double kGradTolerance = 1e-5;
inline constexpr double kHvpTolerance = 1e-4;

inline void check_model(const LogJointModel& model, std::uint64_t seed, double z_scale, std::vector<GradCheck>& out) {
  std::mt19937_64 rng(seed);
  const Vector z = random_normal(model.dim(), rng, z_scale);
  const Vector v = random_normal(model.dim(), rng);
  out.push_back({model.name() + " grad",
                 relative_error(model.grad(z), fd_gradient([&](const Vector& x) { return model.log_joint(x); }, z)),
                 kGradTolerance});
  out.push_back({model.name() + " hvp",
                 relative_error(model.hvp(z, v), fd_directional([&](const Vector& x) { return model.grad(x); }, z, v)),
                 kHvpTolerance});
}

/// Family and surrogate checks for one family kind, composed with `model`.
inline void check_family(FamilyKind kind, const LogJointModel& model, std::uint64_t seed, std::vector<GradCheck>& out) {
  std::mt19937_64 rng(seed);
  const Index d = model.dim();
  const std::string tag(to_string(kind));
  const FamilyParams f = random_family(kind, d, 2, rng);
  const NoiseDraw n = sample_noise(f, rng);
  const Vector w = flatten(f);
  auto at = [&](const Vector& x) {
    FamilyParams g = f;
    assign_flat(g, x);
    return g;
  };

  out.push_back({tag + " entropy_grad",
                 relative_error(entropy_grad(f).flat(), fd_gradient([&](const Vector& x) { return entropy(at(x)); }, w)),
                 kGradTolerance});

  const Vector grad_f = model.grad(transform(f, n));
  out.push_back({tag + " jtvp composite",
                 relative_error(jtvp(f, n, grad_f).flat(),
                                fd_gradient([&](const Vector& x) { return model.log_joint(transform(at(x), n)); }, w)),
                 kGradTolerance});

  const Vector dir = random_normal(num_params(f) - d, rng);
  Vector full_dir = Vector::Zero(w.size());
  full_dir.tail(dir.size()) = dir;
  out.push_back({tag + " scale_jvp",
                 relative_error(scale_jvp(f, n, dir),
                                fd_directional([&](const Vector& x) { return transform(at(x), n); }, w, full_dir)),
                 kGradTolerance});

  for (const Index rv : {Index{0}, Index{1}, Index{3}}) {
    const double sign = rv == 1 ? 1.0 : -1.0;  // both curvature signs get covered
    const std::string rtag = tag + " r_v=" + std::to_string(rv) + (sign > 0 ? "+" : "-");
    QuadSurrogate s = random_surrogate(d, rv, rng, sign);
    out.push_back({rtag + " grad_expected_quadratic",
                   relative_error(grad_expected_quadratic(s, f).flat(),
                                  fd_gradient([&](const Vector& x) { return expected_quadratic(s, at(x)); }, w)),
                   kGradTolerance});

    const Vector z = transform(f, n);
    out.push_back({rtag + " quad_grad",
                   relative_error(quad_grad(s, z), fd_gradient([&](const Vector& x) { return quad_value(s, x); }, z)),
                   kGradTolerance});

    const Vector v = flatten(s);
    auto with = [&](const Vector& x) {
      QuadSurrogate t = s;
      assign_flat(t, x);
      return t;
    };
    const WGradient g = base_grad(model, f, n).g;
    out.push_back({rtag + " fit_grad_method1",
                   relative_error(fit_grad_method1(s, f, n, g).flat(), fd_gradient([&](const Vector& x) {
                                    return (g + cv_value(with(x), f, n)).squared_norm();
                                  }, v)),
                   kGradTolerance});
    out.push_back({rtag + " fit_grad_method2",
                   relative_error(fit_grad_method2(s, f, n, grad_f).flat(), fd_gradient([&](const Vector& x) {
                                    return 0.5 * (grad_f - quad_grad(with(x), z)).squaredNorm();
                                  }, v)),
                   kGradTolerance});
  }
}

/// Small synthetic instances of every model, and each family composed with
/// the logistic model.
inline std::vector<GradCheck> run_grad_checks(std::uint64_t seed = 0) {
  std::vector<GradCheck> out;
  const LogisticRegression logistic(synth_logistic(60, 5, seed + 1));
  const HierarchicalPoisson hierarchical(synth_frisk(2, 4, seed + 2));
  const BayesianNeuralNet bnn(synth_regression(15, 3, seed + 3), 4);
  std::mt19937_64 rng(seed + 4);
  const Matrix a = random_normal(4, 4, rng);
  const GaussianTarget gaussian(random_normal(4, rng), a * a.transpose() + Matrix::Identity(4, 4));
  check_model(logistic, seed + 10, 0.5, out);
  check_model(hierarchical, seed + 11, 0.5, out);
  check_model(bnn, seed + 12, 0.5, out);
  check_model(gaussian, seed + 13, 1.0, out);
  std::uint64_t s = seed + 20;
  for (const auto kind : {FamilyKind::MeanLogScale, FamilyKind::MeanDiagLowRank, FamilyKind::MeanCholesky})
    check_family(kind, logistic, s++, out);
  return out;
}

/// One line per check; returns true when all pass.
inline bool print_grad_checks(const std::vector<GradCheck>& checks, std::ostream& os) {
  bool ok = true;
  for (const auto& c : checks) {
    ok = ok && c.passed();
    os << std::left << std::setw(48) << c.name << (c.passed() ? "PASS" : "FAIL") << "  rel_err=" << std::scientific
       << std::setprecision(2) << c.rel_error << "  tol=" << c.tolerance << std::defaultfloat << '\n';
  }
  return ok;
}

}  // namespace quadcv

#endif  // QUADCV_GRADCHECK_HPP
