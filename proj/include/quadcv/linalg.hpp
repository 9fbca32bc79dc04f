#ifndef QUADCV_LINALG_HPP
#define QUADCV_LINALG_HPP

// Structured matrices used for variational covariances and surrogate
// curvature. Every kernel on DiagPlusLowRank runs in O(d * r) time and
// memory; nothing here forms a d x d product except where the input is
// already a dense lower-triangular factor.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>

namespace quadcv {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Diagonal matrix diag(entries).
struct DiagMat {
  Vector entries;

  Index dim() const { return entries.size(); }
};

/// D + F F^T with D = diag(diag) and F of shape d x r. r = 0 is legal.
struct DiagPlusLowRank {
  Vector diag;
  Matrix factor;

  DiagPlusLowRank() = default;
  DiagPlusLowRank(Vector d, Matrix f) : diag(std::move(d)), factor(std::move(f)) {
    if (factor.size() == 0) factor.resize(diag.size(), 0);
    if (factor.rows() != diag.size())
      throw std::invalid_argument("DiagPlusLowRank: factor has " + std::to_string(factor.rows()) +
                                  " rows, diagonal has " + std::to_string(diag.size()));
  }

  Index dim() const { return diag.size(); }
  Index rank() const { return factor.cols(); }
};

/// Cholesky-type factor L. As a covariance it denotes Sigma = L L^T; the
/// strictly upper triangle is ignored.
struct LowerTriangular {
  Matrix factor;

  Index dim() const { return factor.rows(); }
};

using Covariance = std::variant<DiagMat, DiagPlusLowRank, LowerTriangular>;

namespace detail {

inline void require_dim(Index expected, Index got, const char* what) {
  if (expected != got)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                std::to_string(expected) + " vs " + std::to_string(got) + ")");
}

}  // namespace detail

inline Vector matvec(const DiagMat& m, const Vector& x) {
  detail::require_dim(m.dim(), x.size(), "matvec");
  return m.entries.cwiseProduct(x);
}

inline Vector matvec(const DiagPlusLowRank& m, const Vector& x) {
  detail::require_dim(m.dim(), x.size(), "matvec");
  Vector out = m.diag.cwiseProduct(x);
  if (m.rank() > 0) out.noalias() += m.factor * (m.factor.transpose() * x);
  return out;
}

/// L x, the factor itself rather than L L^T.
inline Vector matvec(const LowerTriangular& m, const Vector& x) {
  detail::require_dim(m.dim(), x.size(), "matvec");
  return m.factor.triangularView<Eigen::Lower>() * x;
}

inline Vector matvec(const Covariance& m, const Vector& x) {
  return std::visit([&](const auto& a) { return matvec(a, x); }, m);
}

/// Same as matvec(m, x) but applied to every column of x.
inline Matrix matmul(const DiagPlusLowRank& m, const Matrix& x) {
  detail::require_dim(m.dim(), x.rows(), "matmul");
  Matrix out = m.diag.asDiagonal() * x;
  if (m.rank() > 0 && x.cols() > 0) out.noalias() += m.factor * (m.factor.transpose() * x);
  return out;
}

// tr(B * Sigma) for the structured pairs that occur. B is symmetric.

inline double trace_product(const DiagMat& b, const DiagMat& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  return b.entries.dot(s.entries);
}

inline double trace_product(const DiagMat& b, const DiagPlusLowRank& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  double t = b.entries.dot(s.diag);
  if (s.rank() > 0) t += b.entries.dot(s.factor.rowwise().squaredNorm());
  return t;
}

inline double trace_product(const DiagMat& b, const LowerTriangular& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  double t = 0.0;
  for (Index i = 0; i < s.dim(); ++i) t += b.entries(i) * s.factor.row(i).head(i + 1).squaredNorm();
  return t;
}

inline double trace_product(const DiagPlusLowRank& b, const DiagMat& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  double t = b.diag.dot(s.entries);
  if (b.rank() > 0) t += s.entries.dot(b.factor.rowwise().squaredNorm());
  return t;
}

inline double trace_product(const DiagPlusLowRank& b, const DiagPlusLowRank& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  double t = b.diag.dot(s.diag);
  if (s.rank() > 0) t += b.diag.dot(s.factor.rowwise().squaredNorm());
  if (b.rank() > 0) t += s.diag.dot(b.factor.rowwise().squaredNorm());
  if (b.rank() > 0 && s.rank() > 0) t += (b.factor.transpose() * s.factor).squaredNorm();
  return t;
}

inline double trace_product(const DiagPlusLowRank& b, const LowerTriangular& s) {
  detail::require_dim(b.dim(), s.dim(), "trace_product");
  // sum_i d_i |L_i,:|^2 plus |U^T L|_F^2, O(d^2 r)
  double t = 0.0;
  for (Index i = 0; i < s.dim(); ++i) t += b.diag(i) * s.factor.row(i).head(i + 1).squaredNorm();
  if (b.rank() > 0) {
    Matrix lt_u = s.factor.transpose().triangularView<Eigen::Upper>() * b.factor;
    t += lt_u.squaredNorm();
  }
  return t;
}

template <typename B>
double trace_product(const B& b, const Covariance& s) {
  return std::visit([&](const auto& a) { return trace_product(b, a); }, s);
}

inline double logdet(const DiagMat& s) {
  if ((s.entries.array() <= 0.0).any()) throw std::domain_error("logdet: non-positive diagonal");
  return s.entries.array().log().sum();
}

/// Matrix determinant lemma: log|D + F F^T| = log|D| + log|I + F^T D^-1 F|.
inline double logdet(const DiagPlusLowRank& s) {
  if ((s.diag.array() <= 0.0).any()) throw std::domain_error("logdet: non-positive diagonal");
  double ld = s.diag.array().log().sum();
  if (s.rank() > 0) {
    Matrix scaled = s.diag.cwiseInverse().cwiseSqrt().asDiagonal() * s.factor;
    Matrix core = Matrix::Identity(s.rank(), s.rank());
    core.noalias() += scaled.transpose() * scaled;
    Eigen::LLT<Matrix> llt(core);
    if (llt.info() != Eigen::Success) throw std::domain_error("logdet: capacitance matrix not positive definite");
    ld += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  return ld;
}

inline double logdet(const LowerTriangular& s) {
  const Vector diag = s.factor.diagonal();
  if ((diag.array() <= 0.0).any()) throw std::domain_error("logdet: non-positive Cholesky diagonal");
  return 2.0 * diag.array().log().sum();
}

inline double logdet(const Covariance& s) {
  return std::visit([](const auto& a) { return logdet(a); }, s);
}

inline Vector diag_of(const DiagPlusLowRank& b) {
  Vector out = b.diag;
  if (b.rank() > 0) out += b.factor.rowwise().squaredNorm();
  return out;
}

}  // namespace quadcv

#endif  // QUADCV_LINALG_HPP
