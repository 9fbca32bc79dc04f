#ifndef QUADCV_CONTROL_VARIATES_HPP
#define QUADCV_CONTROL_VARIATES_HPP

// Quadratic-surrogate control variate for reparameterization gradients.
//
// The surrogate is fhat(z) = b^T (z - z0) + 1/2 (z - z0)^T B (z - z0) with
// B = diag(d_B) + s U U^T, s = +1 or -1. Its expectation under any q with mean mu and
// covariance Sigma is
//
//   E fhat = b^T (mu - z0) + 1/2 tr(B Sigma) + 1/2 (mu - z0)^T B (mu - z0),
//
// so c = grad_w E fhat - (dT/dw)^T grad fhat(T(eps)) is zero-mean and, when
// fhat tracks f, cancels most of the noise in g = (dT/dw)^T grad f(T(eps)).
// Costs are O(d (1 + r_v)(1 + r_w)) for diagonal / diagonal-plus-low-rank
// families and O(d^2 r_v) for the Cholesky family.

#include "quadcv/families.hpp"
#include "quadcv/linalg.hpp"
#include "quadcv/models.hpp"

#include <algorithm>
#include <random>
#include <span>
#include <vector>

namespace quadcv {

/// Log joints are locally concave around their modes, so the default sign is
/// -1: diag(d_B) - U U^T reaches a negative-definite Hessian with a small U,
/// while diag(d_B) + U U^T needs a large negative diagonal offset to do so.
inline constexpr double kDefaultLowRankSign = -1.0;

struct QuadSurrogate {
  Vector b;
  DiagPlusLowRank curvature;  // holds d_B and U; B = diag(d_B) + lowrank_sign * U U^T
  Vector z0;
  double lowrank_sign = kDefaultLowRankSign;  // +1 or -1, not a trainable parameter

  /// b = 0, d_B = 0, U_ij ~ N(0, 1e-4), z0 = 0.
  template <typename Rng>
  static QuadSurrogate initial(Index d, Index rank, Rng& rng, double lowrank_sign = kDefaultLowRankSign) {
    if (lowrank_sign != 1.0 && lowrank_sign != -1.0) throw std::invalid_argument("QuadSurrogate: sign must be +1 or -1");
    std::normal_distribution<double> normal(0.0, 1e-2);
    Matrix u(d, rank);
    for (Index j = 0; j < rank; ++j)
      for (Index i = 0; i < d; ++i) u(i, j) = normal(rng);
    return {Vector::Zero(d), DiagPlusLowRank(Vector::Zero(d), std::move(u)), Vector::Zero(d), lowrank_sign};
  }

  Index dim() const { return b.size(); }
  Index rank() const { return curvature.rank(); }
  Index num_params() const { return 2 * dim() + dim() * rank(); }
};

/// Gradient with respect to the surrogate parameters v = (b, d_B, U).
/// Flattened as [ b | d_B | U column-major ].
struct SurrogateGradient {
  Vector b;
  Vector diag;
  Matrix factor;

  Vector flat() const {
    Vector out(b.size() + diag.size() + factor.size());
    out << b, diag, factor.reshaped();
    return out;
  }
};

inline Vector flatten(const QuadSurrogate& s) {
  Vector out(s.num_params());
  out << s.b, s.curvature.diag, s.curvature.factor.reshaped();
  return out;
}

inline void assign_flat(QuadSurrogate& s, const Vector& flat) {
  detail::require_dim(s.num_params(), flat.size(), "assign_flat(QuadSurrogate)");
  const Index d = s.dim();
  s.b = flat.head(d);
  s.curvature.diag = flat.segment(d, d);
  s.curvature.factor = flat.tail(d * s.rank()).reshaped(d, s.rank());
}

/// B x.
inline Vector curvature_apply(const QuadSurrogate& s, const Vector& x) {
  detail::require_dim(s.dim(), x.size(), "curvature_apply");
  Vector out = s.curvature.diag.cwiseProduct(x);
  if (s.rank() > 0) out.noalias() += s.lowrank_sign * (s.curvature.factor * (s.curvature.factor.transpose() * x));
  return out;
}

/// B X, column by column.
inline Matrix curvature_apply(const QuadSurrogate& s, const Matrix& x) {
  detail::require_dim(s.dim(), x.rows(), "curvature_apply");
  Matrix out = s.curvature.diag.asDiagonal() * x;
  if (s.rank() > 0 && x.cols() > 0)
    out.noalias() += s.lowrank_sign * (s.curvature.factor * (s.curvature.factor.transpose() * x));
  return out;
}

inline Vector curvature_diag(const QuadSurrogate& s) {
  Vector out = s.curvature.diag;
  if (s.rank() > 0) out += s.lowrank_sign * s.curvature.factor.rowwise().squaredNorm();
  return out;
}

/// tr(B Sigma) through the structured kernels.
inline double curvature_trace(const QuadSurrogate& s, const Covariance& cov) {
  double t = trace_product(DiagMat{s.curvature.diag}, cov);
  if (s.rank() > 0) t += s.lowrank_sign * trace_product(DiagPlusLowRank(Vector::Zero(s.dim()), s.curvature.factor), cov);
  return t;
}

inline double quad_value(const QuadSurrogate& s, const Vector& z) {
  const Vector delta = z - s.z0;
  return s.b.dot(delta) + 0.5 * delta.dot(curvature_apply(s, delta));
}

/// grad fhat(z) = b + B (z - z0).
inline Vector quad_grad(const QuadSurrogate& s, const Vector& z) {
  detail::require_dim(s.dim(), z.size(), "quad_grad");
  return s.b + curvature_apply(s, Vector(z - s.z0));
}

inline double expected_quadratic(const QuadSurrogate& s, const FamilyParams& f) {
  detail::require_dim(s.dim(), f.dim(), "expected_quadratic");
  const auto [mu, cov] = mean_cov(f);
  const Vector offset = mu - s.z0;
  return s.b.dot(offset) + 0.5 * curvature_trace(s, cov) + 0.5 * offset.dot(curvature_apply(s, offset));
}

/// grad_w E_q fhat with z0 held fixed.
inline WGradient grad_expected_quadratic(const QuadSurrogate& s, const FamilyParams& f) {
  detail::require_dim(s.dim(), f.dim(), "grad_expected_quadratic");
  const Index d = f.dim();
  WGradient g{s.b + curvature_apply(s, Vector(f.mean - s.z0)), Vector(scale_size(f.kind, d, f.rank()))};
  switch (f.kind) {
    case FamilyKind::MeanLogScale:
      g.scale_block = curvature_diag(s).cwiseProduct((2.0 * f.log_scale.array()).exp().matrix());
      break;
    case FamilyKind::MeanDiagLowRank:
      g.scale_block.head(d) = curvature_diag(s).cwiseProduct((2.0 * f.log_scale.array()).exp().matrix());
      g.scale_block.tail(d * f.rank()) = curvature_apply(s, f.factor).reshaped();
      break;
    case FamilyKind::MeanCholesky: {
      // 1/2 d tr(B L L^T) / dL = B L, restricted to the lower triangle.
      const Matrix l = f.cholesky_factor();
      g.scale_block = detail::pack_cholesky_grad(curvature_apply(s, l), f);
      break;
    }
  }
  return g;
}

/// c_v(w, eps) = grad_w E fhat - (dT/dw)^T grad fhat(T_w(eps)).
inline WGradient cv_value(const QuadSurrogate& s, const FamilyParams& f, const NoiseDraw& n) {
  WGradient c = grad_expected_quadratic(s, f);
  c -= jtvp(f, n, quad_grad(s, transform(f, n)));
  return c;
}

/// Per-sample gradient of 1/2 |grad f(z) - grad fhat(z)|^2 w.r.t. v.
inline SurrogateGradient fit_grad_method2(const QuadSurrogate& s, const FamilyParams& f, const NoiseDraw& n,
                                          const Vector& grad_f_at_z) {
  const Vector z = transform(f, n);
  detail::require_dim(s.dim(), grad_f_at_z.size(), "fit_grad_method2");
  const Vector delta = z - s.z0;
  const Vector r = grad_f_at_z - s.b - curvature_apply(s, delta);
  const Matrix& u = s.curvature.factor;
  SurrogateGradient h{-r, -r.cwiseProduct(delta), Matrix(s.dim(), s.rank())};
  if (s.rank() > 0) {
    h.factor.noalias() = -r * (u.transpose() * delta).transpose();
    h.factor.noalias() -= delta * (u.transpose() * r).transpose();
    h.factor *= s.lowrank_sign;
  }
  return h;
}

namespace detail {

// With S the scale matrix (z - mu = S eps) and dS its derivative along a
// scale-block direction, these give diag(dS S^T) and (dS S^T + S dS^T) X.

inline Vector scale_cross_diag(const FamilyParams& f, const Vector& dir) {
  const Index d = f.dim();
  switch (f.kind) {
    case FamilyKind::MeanLogScale: return ((2.0 * f.log_scale.array()).exp() * dir.array()).matrix();
    case FamilyKind::MeanDiagLowRank: {
      Vector out = ((2.0 * f.log_scale.array()).exp() * dir.head(d).array()).matrix();
      if (f.rank() > 0) out += dir.tail(d * f.rank()).reshaped(d, f.rank()).cwiseProduct(f.factor).rowwise().sum();
      return out;
    }
    case FamilyKind::MeanCholesky: {
      const Matrix dl = unpack_cholesky_direction(dir, f);
      const Matrix l = f.cholesky_factor();
      return dl.cwiseProduct(l).rowwise().sum();
    }
  }
  throw std::logic_error("unreachable");
}

inline Matrix scale_cross_sym_apply(const FamilyParams& f, const Vector& dir, const Matrix& x) {
  const Index d = f.dim();
  switch (f.kind) {
    case FamilyKind::MeanLogScale:
      return 2.0 * ((2.0 * f.log_scale.array()).exp() * dir.array()).matrix().asDiagonal() * x;
    case FamilyKind::MeanDiagLowRank: {
      Matrix out = 2.0 * ((2.0 * f.log_scale.array()).exp() * dir.head(d).array()).matrix().asDiagonal() * x;
      if (f.rank() > 0) {
        const auto df = dir.tail(d * f.rank()).reshaped(d, f.rank());
        out.noalias() += df * (f.factor.transpose() * x);
        out.noalias() += f.factor * (df.transpose() * x);
      }
      return out;
    }
    case FamilyKind::MeanCholesky: {
      const Matrix dl = unpack_cholesky_direction(dir, f);
      const Matrix l = f.cholesky_factor();
      const Matrix ltx = l.transpose().triangularView<Eigen::Upper>() * x;
      const Matrix dltx = dl.transpose().triangularView<Eigen::Upper>() * x;
      Matrix out = dl.triangularView<Eigen::Lower>() * ltx;
      out.noalias() += l.triangularView<Eigen::Lower>() * dltx;
      return out;
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace detail

/// Per-sample gradient of |g + c_v|^2 w.r.t. v, where g is the base estimator
/// at the same (w, eps). c_v is linear in (b, B); writing <e, c_v> = -p^T b +
/// tr(B M) with e = g + c_v, p = J_scale e_scale and
///   M = -(z - mu) e_mean^T + dS S^T - (z - z0) p^T,
/// the gradient is (-2p, 2 diag(M), 2 s (M + M^T) U).
inline SurrogateGradient fit_grad_method1(const QuadSurrogate& s, const FamilyParams& f, const NoiseDraw& n,
                                          const WGradient& g) {
  detail::require_dim(s.dim(), f.dim(), "fit_grad_method1");
  if (g.mean_block.size() != f.dim() || g.scale_block.size() != scale_size(f.kind, f.dim(), f.rank()))
    throw std::invalid_argument("fit_grad_method1: gradient layout does not match family");
  const WGradient e = g + cv_value(s, f, n);
  const Vector x = scale_noise(f, n);
  const Vector delta = f.mean + x - s.z0;
  const Vector p = scale_jvp(f, n, e.scale_block);

  SurrogateGradient h;
  h.b = -2.0 * p;
  h.diag = 2.0 * (detail::scale_cross_diag(f, e.scale_block) - x.cwiseProduct(e.mean_block) - delta.cwiseProduct(p));
  const Matrix& u = s.curvature.factor;
  if (s.rank() > 0) {
    Matrix sym = detail::scale_cross_sym_apply(f, e.scale_block, u);
    sym.noalias() -= x * (u.transpose() * e.mean_block).transpose();
    sym.noalias() -= e.mean_block * (u.transpose() * x).transpose();
    sym.noalias() -= delta * (u.transpose() * p).transpose();
    sym.noalias() -= p * (u.transpose() * delta).transpose();
    h.factor = 2.0 * s.lowrank_sign * sym;
  } else {
    h.factor.resize(s.dim(), 0);
  }
  return h;
}

/// Taylor-expansion control variate: a first-order expansion of grad f at mu
/// for the mean block and a zero-order one for the scale block,
///   mean:  -H(mu) (z - mu)      scale: -(dT/dw_scale)^T grad f(mu).
/// Same sign convention as cv_value, so g + c reduces variance.
inline WGradient taylor_cv(const FamilyParams& f, const NoiseDraw& n, const LogJointModel& model,
                           const Vector& grad_at_mean) {
  detail::require_dim(model.dim(), f.dim(), "taylor_cv");
  WGradient c = jtvp(f, n, grad_at_mean);
  c.scale_block = -c.scale_block;
  c.mean_block = -model.hvp(f.mean, scale_noise(f, n));
  return c;
}

inline WGradient taylor_cv(const FamilyParams& f, const NoiseDraw& n, const LogJointModel& model) {
  return taylor_cv(f, n, model, model.grad(f.mean));
}

/// Log-scale control variates of the second-order/minibatch-baseline form for
/// a MeanLogScale family, one per sample:
///   (grad f(mu) + H s_i) * eps_i * e^psi - 1/(N-1) sum_{j != i} (H s_j) * eps_j * e^psi,
/// with s_i = e^psi * eps_i. Sign follows (sample - expectation).
inline std::vector<Vector> taylor_scale_cv_baseline(const FamilyParams& f, std::span<const NoiseDraw> noises,
                                                    const LogJointModel& model) {
  if (f.kind != FamilyKind::MeanLogScale) throw std::invalid_argument("taylor_scale_cv_baseline: MeanLogScale only");
  const Index n = static_cast<Index>(noises.size());
  if (n < 2) throw std::invalid_argument("taylor_scale_cv_baseline: need at least two samples");
  const Vector sd = f.log_scale.array().exp().matrix();
  const Vector g0 = model.grad(f.mean);
  std::vector<Vector> curv(noises.size());
  Vector curv_sum = Vector::Zero(f.dim());
  for (std::size_t i = 0; i < noises.size(); ++i) {
    const Vector s = sd.cwiseProduct(noises[i].eps_d);
    curv[i] = model.hvp(f.mean, s).cwiseProduct(noises[i].eps_d).cwiseProduct(sd);
    curv_sum += curv[i];
  }
  std::vector<Vector> out;
  out.reserve(noises.size());
  for (std::size_t i = 0; i < noises.size(); ++i) {
    const Vector first = g0.cwiseProduct(noises[i].eps_d).cwiseProduct(sd) + curv[i];
    out.push_back(first - (curv_sum - curv[i]) / static_cast<double>(n - 1));
  }
  return out;
}

/// sum_i grad f(mu) * eps_i * e^psi: the zero-order form summed over samples.
inline Vector taylor_scale_cv_zero_order_sum(const FamilyParams& f, std::span<const NoiseDraw> noises,
                                             const LogJointModel& model) {
  if (f.kind != FamilyKind::MeanLogScale) throw std::invalid_argument("taylor_scale_cv_zero_order_sum: MeanLogScale only");
  const Vector sd = f.log_scale.array().exp().matrix();
  const Vector g0 = model.grad(f.mean);
  Vector eps_sum = Vector::Zero(f.dim());
  for (const auto& n : noises) eps_sum += n.eps_d;
  return g0.cwiseProduct(eps_sum).cwiseProduct(sd);
}

/// Running estimate of the variance-minimizing weight gamma = -E[c^T g] / E[c^T c]
/// (E c = 0, so these are the covariance and variance).
class GammaTracker {
 public:
  explicit GammaTracker(double decay = 0.9, double floor = 1e-12, double gamma_max = 10.0)
      : decay_(decay), floor_(floor), gamma_max_(gamma_max) {
    if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("GammaTracker: decay must lie in (0, 1)");
  }

  void update(const WGradient& c, const WGradient& g) {
    ema_cg_ = decay_ * ema_cg_ + (1.0 - decay_) * c.dot(g);
    ema_cc_ = decay_ * ema_cc_ + (1.0 - decay_) * c.squared_norm();
    ++updates_;
    gamma_ = std::clamp(-ema_cg_ / std::max(ema_cc_, floor_), -gamma_max_, gamma_max_);
  }

  double gamma() const { return gamma_; }
  double ema_cg() const { return ema_cg_; }
  double ema_cc() const { return ema_cc_; }
  double decay() const { return decay_; }
  long updates() const { return updates_; }

 private:
  double decay_;
  double floor_;
  double gamma_max_;
  double ema_cg_ = 0.0;
  double ema_cc_ = 0.0;
  double gamma_ = 0.0;
  long updates_ = 0;
};

}  // namespace quadcv

#endif  // QUADCV_CONTROL_VARIATES_HPP
