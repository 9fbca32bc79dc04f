#ifndef QUADCV_FAMILIES_HPP
#define QUADCV_FAMILIES_HPP

// Reparameterizable Gaussian variational families.
//
//   MeanLogScale     z = mu + exp(psi) * eps
//   MeanDiagLowRank  z = mu + exp(psi) * eps_d + F eps_r,  Sigma = diag(exp(2 psi)) + F F^T
//   MeanCholesky     z = mu + L eps,  Sigma = L L^T, L_ii = exp(S_ii), L_ij = S_ij (i > j)
//
// Flattened parameter / gradient layout:
//   [ mean (d) | psi (d) | F column-major (d * r) ]      MeanLogScale stops after psi
//   [ mean (d) | S lower triangle, row-major (d(d+1)/2) ] MeanCholesky, S_ii in log form

#include "quadcv/linalg.hpp"

#include <numbers>
#include <random>
#include <string>
#include <string_view>

namespace quadcv {

enum class FamilyKind { MeanLogScale, MeanDiagLowRank, MeanCholesky };

inline std::string_view to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::MeanLogScale: return "diag";
    case FamilyKind::MeanDiagLowRank: return "diag_lr";
    case FamilyKind::MeanCholesky: return "full";
  }
  return "?";
}

inline FamilyKind family_kind_from_string(std::string_view s) {
  if (s == "diag") return FamilyKind::MeanLogScale;
  if (s == "diag_lr") return FamilyKind::MeanDiagLowRank;
  if (s == "full") return FamilyKind::MeanCholesky;
  throw std::invalid_argument("unknown family '" + std::string(s) + "' (expected diag, diag_lr or full)");
}

/// Position of (i, j), j <= i, in the row-major packed lower triangle.
inline constexpr Index tri_index(Index i, Index j) { return i * (i + 1) / 2 + j; }

struct FamilyParams {
  FamilyKind kind = FamilyKind::MeanLogScale;
  Vector mean;
  Vector log_scale;  // psi; unused for MeanCholesky
  Matrix factor;     // F, d x r_w; MeanDiagLowRank only
  Matrix chol;       // S, lower triangle with log diagonal; MeanCholesky only

  static FamilyParams mean_log_scale(Vector mu, Vector psi) {
    FamilyParams p;
    p.kind = FamilyKind::MeanLogScale;
    p.mean = std::move(mu);
    p.log_scale = std::move(psi);
    p.validate();
    return p;
  }

  static FamilyParams mean_diag_low_rank(Vector mu, Vector psi, Matrix f) {
    FamilyParams p;
    p.kind = FamilyKind::MeanDiagLowRank;
    p.mean = std::move(mu);
    p.log_scale = std::move(psi);
    p.factor = std::move(f);
    if (p.factor.size() == 0) p.factor.resize(p.mean.size(), 0);
    p.validate();
    return p;
  }

  /// `s` holds the raw lower triangle with the diagonal in log form.
  static FamilyParams mean_cholesky(Vector mu, Matrix s) {
    FamilyParams p;
    p.kind = FamilyKind::MeanCholesky;
    p.mean = std::move(mu);
    p.chol = std::move(s);
    p.chol.triangularView<Eigen::StrictlyUpper>().setZero();
    p.validate();
    return p;
  }

  /// mu = 0 and Sigma = sigma^2 I in the requested parameterization.
  static FamilyParams isotropic(FamilyKind kind, Index d, double sigma, Index rank = 0) {
    const double ls = std::log(sigma);
    switch (kind) {
      case FamilyKind::MeanLogScale: return mean_log_scale(Vector::Zero(d), Vector::Constant(d, ls));
      case FamilyKind::MeanDiagLowRank:
        return mean_diag_low_rank(Vector::Zero(d), Vector::Constant(d, ls), Matrix::Zero(d, rank));
      case FamilyKind::MeanCholesky: {
        Matrix s = Matrix::Zero(d, d);
        s.diagonal().setConstant(ls);
        return mean_cholesky(Vector::Zero(d), std::move(s));
      }
    }
    throw std::logic_error("unreachable");
  }

  Index dim() const { return mean.size(); }
  Index rank() const { return kind == FamilyKind::MeanDiagLowRank ? factor.cols() : 0; }

  /// L with the exponentiated diagonal.
  Matrix cholesky_factor() const {
    Matrix l = chol.triangularView<Eigen::StrictlyLower>();
    l.diagonal() = chol.diagonal().array().exp().matrix();
    return l;
  }

  void validate() const {
    const Index d = mean.size();
    if (!mean.allFinite()) throw std::invalid_argument("FamilyParams: non-finite mean");
    switch (kind) {
      case FamilyKind::MeanDiagLowRank:
        if (factor.rows() != d) throw std::invalid_argument("FamilyParams: factor row count differs from d");
        if (!factor.allFinite()) throw std::invalid_argument("FamilyParams: non-finite factor");
        [[fallthrough]];
      case FamilyKind::MeanLogScale:
        if (log_scale.size() != d) throw std::invalid_argument("FamilyParams: log-scale length differs from d");
        if (!log_scale.allFinite()) throw std::invalid_argument("FamilyParams: non-finite log-scale");
        break;
      case FamilyKind::MeanCholesky:
        if (chol.rows() != d || chol.cols() != d) throw std::invalid_argument("FamilyParams: Cholesky factor must be d x d");
        if (!chol.allFinite()) throw std::invalid_argument("FamilyParams: non-finite Cholesky factor");
        break;
    }
  }
};

inline Index scale_size(FamilyKind kind, Index d, Index rank) {
  switch (kind) {
    case FamilyKind::MeanLogScale: return d;
    case FamilyKind::MeanDiagLowRank: return d + d * rank;
    case FamilyKind::MeanCholesky: return d * (d + 1) / 2;
  }
  return 0;
}

inline Index num_params(const FamilyParams& f) { return f.dim() + scale_size(f.kind, f.dim(), f.rank()); }

/// Gradient-shaped quantity in the family's flattened layout.
struct WGradient {
  Vector mean_block;
  Vector scale_block;

  static WGradient zeros_like(const FamilyParams& f) {
    return {Vector::Zero(f.dim()), Vector::Zero(scale_size(f.kind, f.dim(), f.rank()))};
  }

  Index size() const { return mean_block.size() + scale_block.size(); }

  Vector flat() const {
    Vector out(size());
    out << mean_block, scale_block;
    return out;
  }

  double dot(const WGradient& o) const { return mean_block.dot(o.mean_block) + scale_block.dot(o.scale_block); }
  double squared_norm() const { return mean_block.squaredNorm() + scale_block.squaredNorm(); }
  bool all_finite() const { return mean_block.allFinite() && scale_block.allFinite(); }

  WGradient& operator+=(const WGradient& o) {
    mean_block += o.mean_block;
    scale_block += o.scale_block;
    return *this;
  }
  WGradient& operator-=(const WGradient& o) {
    mean_block -= o.mean_block;
    scale_block -= o.scale_block;
    return *this;
  }
  WGradient& operator*=(double a) {
    mean_block *= a;
    scale_block *= a;
    return *this;
  }
};

inline WGradient operator+(WGradient a, const WGradient& b) { return a += b; }
inline WGradient operator-(WGradient a, const WGradient& b) { return a -= b; }
inline WGradient operator*(double s, WGradient a) { return a *= s; }

inline Vector flatten(const FamilyParams& f) {
  const Index d = f.dim();
  Vector out(num_params(f));
  out.head(d) = f.mean;
  switch (f.kind) {
    case FamilyKind::MeanLogScale: out.segment(d, d) = f.log_scale; break;
    case FamilyKind::MeanDiagLowRank:
      out.segment(d, d) = f.log_scale;
      out.tail(d * f.rank()) = f.factor.reshaped();
      break;
    case FamilyKind::MeanCholesky:
      for (Index i = 0; i < d; ++i)
        for (Index j = 0; j <= i; ++j) out(d + tri_index(i, j)) = f.chol(i, j);
      break;
  }
  return out;
}

/// Inverse of flatten; the shape of `f` (kind, d, r) is kept.
inline void assign_flat(FamilyParams& f, const Vector& flat) {
  const Index d = f.dim();
  detail::require_dim(num_params(f), flat.size(), "assign_flat");
  f.mean = flat.head(d);
  switch (f.kind) {
    case FamilyKind::MeanLogScale: f.log_scale = flat.segment(d, d); break;
    case FamilyKind::MeanDiagLowRank:
      f.log_scale = flat.segment(d, d);
      f.factor = flat.tail(d * f.rank()).reshaped(d, f.rank());
      break;
    case FamilyKind::MeanCholesky:
      for (Index i = 0; i < d; ++i)
        for (Index j = 0; j <= i; ++j) f.chol(i, j) = flat(d + tri_index(i, j));
      break;
  }
}

inline WGradient unflatten_gradient(const FamilyParams& f, const Vector& flat) {
  detail::require_dim(num_params(f), flat.size(), "unflatten_gradient");
  return {flat.head(f.dim()), flat.tail(flat.size() - f.dim())};
}

/// Draw from the base density: eps_r is empty unless the family has a factor.
struct NoiseDraw {
  Vector eps_d;
  Vector eps_r;
};

template <typename Rng>
NoiseDraw sample_noise(const FamilyParams& f, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  NoiseDraw n{Vector(f.dim()), Vector(f.rank())};
  for (Index i = 0; i < n.eps_d.size(); ++i) n.eps_d(i) = normal(rng);
  for (Index i = 0; i < n.eps_r.size(); ++i) n.eps_r(i) = normal(rng);
  return n;
}

namespace detail {

inline void check_noise(const FamilyParams& f, const NoiseDraw& n) {
  if (n.eps_d.size() != f.dim() || n.eps_r.size() != f.rank())
    throw std::invalid_argument("noise shape (" + std::to_string(n.eps_d.size()) + ", " +
                                std::to_string(n.eps_r.size()) + ") does not match family (" +
                                std::to_string(f.dim()) + ", " + std::to_string(f.rank()) + ")");
}

/// Cholesky scale-block gradient from a d x d gradient w.r.t. L, applying the
/// log-diagonal chain rule.
inline Vector pack_cholesky_grad(const Matrix& grad_l, const FamilyParams& f) {
  const Index d = f.dim();
  Vector out(d * (d + 1) / 2);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < i; ++j) out(tri_index(i, j)) = grad_l(i, j);
    out(tri_index(i, i)) = grad_l(i, i) * std::exp(f.chol(i, i));
  }
  return out;
}

/// Direction in S-coordinates -> direction dL in L-coordinates.
inline Matrix unpack_cholesky_direction(const Vector& dir, const FamilyParams& f) {
  const Index d = f.dim();
  Matrix dl = Matrix::Zero(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < i; ++j) dl(i, j) = dir(tri_index(i, j));
    dl(i, i) = dir(tri_index(i, i)) * std::exp(f.chol(i, i));
  }
  return dl;
}

}  // namespace detail

/// z - mu for the given noise.
inline Vector scale_noise(const FamilyParams& f, const NoiseDraw& n) {
  detail::check_noise(f, n);
  switch (f.kind) {
    case FamilyKind::MeanLogScale: return f.log_scale.array().exp().matrix().cwiseProduct(n.eps_d);
    case FamilyKind::MeanDiagLowRank: {
      Vector out = f.log_scale.array().exp().matrix().cwiseProduct(n.eps_d);
      if (f.rank() > 0) out.noalias() += f.factor * n.eps_r;
      return out;
    }
    case FamilyKind::MeanCholesky: return f.cholesky_factor().triangularView<Eigen::Lower>() * n.eps_d;
  }
  throw std::logic_error("unreachable");
}

inline Vector transform(const FamilyParams& f, const NoiseDraw& n) { return f.mean + scale_noise(f, n); }

inline std::pair<Vector, Covariance> mean_cov(const FamilyParams& f) {
  switch (f.kind) {
    case FamilyKind::MeanLogScale:
      return {f.mean, DiagMat{(2.0 * f.log_scale.array()).exp().matrix()}};
    case FamilyKind::MeanDiagLowRank:
      return {f.mean, DiagPlusLowRank((2.0 * f.log_scale.array()).exp().matrix(), f.factor)};
    case FamilyKind::MeanCholesky: return {f.mean, LowerTriangular{f.cholesky_factor()}};
  }
  throw std::logic_error("unreachable");
}

inline double entropy(const FamilyParams& f) {
  const double d = static_cast<double>(f.dim());
  double ld = 0.0;
  switch (f.kind) {
    case FamilyKind::MeanLogScale: ld = 2.0 * f.log_scale.sum(); break;
    case FamilyKind::MeanCholesky: ld = 2.0 * f.chol.diagonal().sum(); break;
    case FamilyKind::MeanDiagLowRank: ld = logdet(std::get<DiagPlusLowRank>(mean_cov(f).second)); break;
  }
  return 0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) + ld);
}

inline WGradient entropy_grad(const FamilyParams& f) {
  WGradient g = WGradient::zeros_like(f);
  const Index d = f.dim();
  switch (f.kind) {
    case FamilyKind::MeanLogScale: g.scale_block.setOnes(); break;
    case FamilyKind::MeanCholesky:
      for (Index i = 0; i < d; ++i) g.scale_block(tri_index(i, i)) = 1.0;
      break;
    case FamilyKind::MeanDiagLowRank: {
      // With D = diag(e^{2 psi}), G = D^-1 F and K = I + F^T D^-1 F:
      //   Sigma^-1 F = G K^-1,  diag(Sigma^-1)_i = 1/D_i - G_i K^-1 G_i^T.
      const Index r = f.rank();
      if (r == 0) {
        g.scale_block.head(d).setOnes();
        break;
      }
      const Vector dvals = (2.0 * f.log_scale.array()).exp().matrix();
      const Matrix gm = dvals.cwiseInverse().asDiagonal() * f.factor;
      Matrix k = Matrix::Identity(r, r);
      k.noalias() += f.factor.transpose() * gm;
      const Eigen::LLT<Matrix> llt(k);
      if (llt.info() != Eigen::Success) throw std::domain_error("entropy_grad: capacitance matrix not positive definite");
      const Matrix gk = llt.solve(gm.transpose()).transpose();  // G K^-1
      const Vector quad = gk.cwiseProduct(gm).rowwise().sum();
      g.scale_block.head(d) = (Vector::Ones(d) - dvals.cwiseProduct(quad));
      g.scale_block.tail(d * r) = gk.reshaped();
      break;
    }
  }
  return g;
}

/// (dT_w(eps)/dw)^T u.
inline WGradient jtvp(const FamilyParams& f, const NoiseDraw& n, const Vector& u) {
  detail::check_noise(f, n);
  detail::require_dim(f.dim(), u.size(), "jtvp");
  const Index d = f.dim();
  WGradient g{u, Vector(scale_size(f.kind, d, f.rank()))};
  switch (f.kind) {
    case FamilyKind::MeanLogScale:
      g.scale_block = f.log_scale.array().exp() * n.eps_d.array() * u.array();
      break;
    case FamilyKind::MeanDiagLowRank:
      g.scale_block.head(d) = f.log_scale.array().exp() * n.eps_d.array() * u.array();
      g.scale_block.tail(d * f.rank()) = (u * n.eps_r.transpose()).reshaped();
      break;
    case FamilyKind::MeanCholesky:
      for (Index i = 0; i < d; ++i) {
        for (Index j = 0; j < i; ++j) g.scale_block(tri_index(i, j)) = u(i) * n.eps_d(j);
        g.scale_block(tri_index(i, i)) = u(i) * n.eps_d(i) * std::exp(f.chol(i, i));
      }
      break;
  }
  return g;
}

/// Directional derivative of T_w(eps) along a scale-block direction.
inline Vector scale_jvp(const FamilyParams& f, const NoiseDraw& n, const Vector& dir) {
  detail::check_noise(f, n);
  const Index d = f.dim();
  detail::require_dim(scale_size(f.kind, d, f.rank()), dir.size(), "scale_jvp");
  switch (f.kind) {
    case FamilyKind::MeanLogScale: return (f.log_scale.array().exp() * n.eps_d.array() * dir.array()).matrix();
    case FamilyKind::MeanDiagLowRank: {
      Vector out = (f.log_scale.array().exp() * n.eps_d.array() * dir.head(d).array()).matrix();
      if (f.rank() > 0) out.noalias() += dir.tail(d * f.rank()).reshaped(d, f.rank()) * n.eps_r;
      return out;
    }
    case FamilyKind::MeanCholesky:
      return detail::unpack_cholesky_direction(dir, f).triangularView<Eigen::Lower>() * n.eps_d;
  }
  throw std::logic_error("unreachable");
}

}  // namespace quadcv

#endif  // QUADCV_FAMILIES_HPP
