#ifndef QUADCV_MODELS_HPP
#define QUADCV_MODELS_HPP

// Log-joint targets f(z) = log p(x, z) with analytic gradients and
// Hessian-vector products.

#include "quadcv/datasets.hpp"
#include "quadcv/linalg.hpp"

#include <atomic>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

namespace quadcv {

class LogJointModel {
 public:
  virtual ~LogJointModel() = default;

  virtual Index dim() const = 0;
  virtual std::string name() const = 0;
  virtual double log_joint(const Vector& z) const = 0;
  virtual Vector grad(const Vector& z) const = 0;
  virtual Vector hvp(const Vector& z, const Vector& v) const = 0;

  /// f(z), writing grad f(z) into `grad_out`. Models override this to share work.
  virtual double value_and_grad(const Vector& z, Vector& grad_out) const {
    grad_out = grad(z);
    return log_joint(z);
  }
};

namespace detail {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

inline void check_input(const Vector& z, Index d, const char* model) {
  if (z.size() != d)
    throw std::invalid_argument(std::string(model) + ": expected z of length " + std::to_string(d) + ", got " +
                                std::to_string(z.size()));
  if (z.hasNaN()) throw std::invalid_argument(std::string(model) + ": NaN in z");
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Bayesian logistic regression: z = (w_0, w), w_i ~ N(0, 1),
/// P(y_i = 1) = (1 + exp(w_0 + w . x_i))^-1.
class LogisticRegression final : public LogJointModel {
 public:
  explicit LogisticRegression(const ClassificationData& data)
      : design_(data.rows(), data.cols() + 1), labels_(data.labels) {
    if (data.rows() == 0) throw std::invalid_argument("LogisticRegression: no rows");
    if (((labels_.array() != 0.0) && (labels_.array() != 1.0)).any())
      throw std::invalid_argument("LogisticRegression: labels must be 0 or 1");
    design_.col(0).setOnes();
    design_.rightCols(data.cols()) = data.features;
  }

  Index dim() const override { return design_.cols(); }
  std::string name() const override { return "logistic"; }

  double log_joint(const Vector& z) const override {
    detail::check_input(z, dim(), "logistic");
    const Vector a = design_ * z;
    double f = -0.5 * z.squaredNorm() - static_cast<double>(dim()) * detail::kHalfLog2Pi;
    for (Index i = 0; i < a.size(); ++i)
      f -= labels_(i) * detail::softplus(a(i)) + (1.0 - labels_(i)) * detail::softplus(-a(i));
    return f;
  }

  Vector grad(const Vector& z) const override {
    Vector g;
    value_and_grad(z, g);
    return g;
  }

  double value_and_grad(const Vector& z, Vector& grad_out) const override {
    detail::check_input(z, dim(), "logistic");
    const Vector a = design_ * z;
    Vector dlda(a.size());
    double f = -0.5 * z.squaredNorm() - static_cast<double>(dim()) * detail::kHalfLog2Pi;
    for (Index i = 0; i < a.size(); ++i) {
      f -= labels_(i) * detail::softplus(a(i)) + (1.0 - labels_(i)) * detail::softplus(-a(i));
      dlda(i) = (1.0 - labels_(i)) - detail::sigmoid(a(i));
    }
    grad_out = design_.transpose() * dlda - z;
    return f;
  }

  Vector hvp(const Vector& z, const Vector& v) const override {
    detail::check_input(z, dim(), "logistic");
    detail::require_dim(dim(), v.size(), "logistic hvp");
    const Vector a = design_ * z;
    Vector w = design_ * v;
    for (Index i = 0; i < a.size(); ++i) {
      const double s = detail::sigmoid(a(i));
      w(i) *= s * (1.0 - s);
    }
    return -v - design_.transpose() * w;
  }

 private:
  Matrix design_;  // n x (p + 1), bias column first
  Vector labels_;
};

/// Hierarchical Poisson regression on stop counts.
/// z = (mu, log sigma_alpha, log sigma_beta, alpha_1..E, beta_1..P).
class HierarchicalPoisson final : public LogJointModel {
 public:
  explicit HierarchicalPoisson(FriskData data) : data_(std::move(data)) {
    if (data_.stops.size() == 0) throw std::invalid_argument("HierarchicalPoisson: no cells");
    if ((data_.arrests.array() < 1).any()) throw std::invalid_argument("HierarchicalPoisson: offsets must be >= 1");
    if ((data_.stops.array() < 0).any()) throw std::invalid_argument("HierarchicalPoisson: negative counts");
    log_offset_ = data_.arrests.cast<double>().array().log().matrix();
    log_fact_ = 0.0;
    for (Index i = 0; i < data_.stops.size(); ++i) log_fact_ += std::lgamma(data_.stops.data()[i] + 1.0);
  }

  Index dim() const override { return 3 + data_.ethnicities() + data_.precincts(); }
  std::string name() const override { return "hierarchical"; }

  double log_joint(const Vector& z) const override {
    return evaluate(z, nullptr);
  }

  Vector grad(const Vector& z) const override {
    Vector g;
    evaluate(z, &g);
    return g;
  }

  double value_and_grad(const Vector& z, Vector& grad_out) const override { return evaluate(z, &grad_out); }

  Vector hvp(const Vector& z, const Vector& v) const override {
    detail::check_input(z, dim(), "hierarchical");
    detail::require_dim(dim(), v.size(), "hierarchical hvp");
    const Index ne = data_.ethnicities(), np = data_.precincts();
    const double mu = z(0), sa = z(1), sb = z(2);
    const auto alpha = z.segment(3, ne);
    const auto beta = z.segment(3 + ne, np);
    const double ia = std::exp(-2.0 * sa), ib = std::exp(-2.0 * sb);
    Vector out = Vector::Zero(dim());
    // priors
    out(0) = -v(0) / 100.0;
    out(1) = -v(1) / 100.0 - 2.0 * ia * alpha.squaredNorm() * v(1);
    out(2) = -v(2) / 100.0 - 2.0 * ib * beta.squaredNorm() * v(2);
    for (Index e = 0; e < ne; ++e) {
      out(1) += 2.0 * ia * alpha(e) * v(3 + e);
      out(3 + e) += 2.0 * ia * alpha(e) * v(1) - ia * v(3 + e);
    }
    for (Index p = 0; p < np; ++p) {
      out(2) += 2.0 * ib * beta(p) * v(3 + ne + p);
      out(3 + ne + p) += 2.0 * ib * beta(p) * v(2) - ib * v(3 + ne + p);
    }
    // Poisson: -lambda on the (mu, alpha_e, beta_p) block of each cell
    for (Index e = 0; e < ne; ++e) {
      for (Index p = 0; p < np; ++p) {
        const double lambda = std::exp(mu + alpha(e) + beta(p) + log_offset_(e, p));
        const double s = lambda * (v(0) + v(3 + e) + v(3 + ne + p));
        out(0) -= s;
        out(3 + e) -= s;
        out(3 + ne + p) -= s;
      }
    }
    return out;
  }

 private:
  double evaluate(const Vector& z, Vector* grad_out) const {
    detail::check_input(z, dim(), "hierarchical");
    const Index ne = data_.ethnicities(), np = data_.precincts();
    const double mu = z(0), sa = z(1), sb = z(2);
    const auto alpha = z.segment(3, ne);
    const auto beta = z.segment(3 + ne, np);
    const double ia = std::exp(-2.0 * sa), ib = std::exp(-2.0 * sb);
    constexpr double kLog10 = 2.30258509299404568402;

    double f = -(mu * mu + sa * sa + sb * sb) / 200.0 - 3.0 * (kLog10 + detail::kHalfLog2Pi);
    f += -0.5 * ia * alpha.squaredNorm() - static_cast<double>(ne) * (sa + detail::kHalfLog2Pi);
    f += -0.5 * ib * beta.squaredNorm() - static_cast<double>(np) * (sb + detail::kHalfLog2Pi);
    if (grad_out) {
      Vector& g = *grad_out;
      g.setZero(dim());
      g(0) = -mu / 100.0;
      g(1) = -sa / 100.0 + ia * alpha.squaredNorm() - static_cast<double>(ne);
      g(2) = -sb / 100.0 + ib * beta.squaredNorm() - static_cast<double>(np);
      g.segment(3, ne) = -ia * alpha;
      g.segment(3 + ne, np) = -ib * beta;
    }
    for (Index e = 0; e < ne; ++e) {
      for (Index p = 0; p < np; ++p) {
        const double eta = mu + alpha(e) + beta(p) + log_offset_(e, p);
        const double lambda = std::exp(eta);
        const double y = data_.stops(e, p);
        f += y * eta - lambda;
        if (grad_out) {
          const double r = y - lambda;
          (*grad_out)(0) += r;
          (*grad_out)(3 + e) += r;
          (*grad_out)(3 + ne + p) += r;
        }
      }
    }
    return f - log_fact_;
  }

  FriskData data_;
  Matrix log_offset_;
  double log_fact_ = 0.0;
};

namespace detail {

/// Forward-mode number used to differentiate the analytic BNN gradient.
struct Dual {
  double v = 0.0;
  double t = 0.0;

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit from constants
  Dual(double value, double tangent) : v(value), t(tangent) {}

  Dual& operator+=(const Dual& o) {
    v += o.v;
    t += o.t;
    return *this;
  }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.t - b.t}; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.t}; }
inline Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.t * b.v + a.v * b.t}; }
inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, e * a.t};
}
inline double value_of(const Dual& a) { return a.v; }
inline double value_of(double a) { return a; }
using std::exp;

}  // namespace detail

/// One-hidden-layer ReLU regression network with hierarchical priors.
/// z = (log alpha, log tau, W1 (hidden x p, row-major), b1, w2, b2).
/// alpha, tau ~ Gamma(shape 1, rate 0.1) expressed on the log scale (with
/// the log-Jacobian), weights ~ N(0, 1/alpha), y ~ N(yhat, 1/tau).
class BayesianNeuralNet final : public LogJointModel {
 public:
  static constexpr double kGammaShape = 1.0;
  static constexpr double kGammaRate = 0.1;

  explicit BayesianNeuralNet(RegressionData data, Index hidden = 50) : data_(std::move(data)), hidden_(hidden) {
    if (data_.rows() == 0) throw std::invalid_argument("BayesianNeuralNet: no rows");
    if (hidden_ < 1) throw std::invalid_argument("BayesianNeuralNet: hidden must be >= 1");
  }

  Index dim() const override { return 2 + num_weights(); }
  Index num_weights() const { return hidden_ * data_.cols() + 2 * hidden_ + 1; }
  std::string name() const override { return "bnn"; }

  double log_joint(const Vector& z) const override {
    detail::check_input(z, dim(), "bnn");
    std::vector<double> zz(z.data(), z.data() + z.size());
    return evaluate<double>(zz, nullptr);
  }

  Vector grad(const Vector& z) const override {
    Vector g;
    value_and_grad(z, g);
    return g;
  }

  double value_and_grad(const Vector& z, Vector& grad_out) const override {
    detail::check_input(z, dim(), "bnn");
    std::vector<double> zz(z.data(), z.data() + z.size());
    std::vector<double> g(zz.size());
    const double f = evaluate<double>(zz, &g);
    grad_out = Eigen::Map<Vector>(g.data(), static_cast<Index>(g.size()));
    return f;
  }

  /// Forward-over-reverse: push a tangent v through the analytic gradient.
  Vector hvp(const Vector& z, const Vector& v) const override {
    detail::check_input(z, dim(), "bnn");
    detail::require_dim(dim(), v.size(), "bnn hvp");
    std::vector<detail::Dual> zz(z.size());
    for (Index i = 0; i < z.size(); ++i) zz[i] = {z(i), v(i)};
    std::vector<detail::Dual> g(zz.size());
    evaluate<detail::Dual>(zz, &g);
    Vector out(z.size());
    for (Index i = 0; i < z.size(); ++i) out(i) = g[i].t;
    return out;
  }

 private:
  template <typename T>
  double evaluate(const std::vector<T>& z, std::vector<T>* grad_out) const {
    using detail::exp;
    using detail::value_of;
    const Index p = data_.cols(), h = hidden_, n = data_.rows();
    const Index w1 = 2, b1 = w1 + h * p, w2 = b1 + h, b2 = w2 + h;
    const Index nw = num_weights();
    const T log_alpha = z[0], log_tau = z[1];
    const T alpha = exp(log_alpha), tau = exp(log_tau);
    const double log_rate = std::log(kGammaRate);
    const double lgamma_shape = std::lgamma(kGammaShape);

    T sum_w2 = 0.0;
    for (Index k = 0; k < nw; ++k) sum_w2 += z[2 + k] * z[2 + k];

    T f = 2.0 * (kGammaShape * log_rate - lgamma_shape);
    f += T(kGammaShape) * log_alpha - T(kGammaRate) * alpha;
    f += T(kGammaShape) * log_tau - T(kGammaRate) * tau;
    f += T(0.5 * nw) * log_alpha - T(0.5) * alpha * sum_w2 - T(nw * detail::kHalfLog2Pi);

    std::vector<T> act(h);
    std::vector<T> hid(h);
    if (grad_out) std::fill(grad_out->begin(), grad_out->end(), T(0.0));
    T sum_r2 = 0.0;
    for (Index i = 0; i < n; ++i) {
      T yhat = z[b2];
      for (Index k = 0; k < h; ++k) {
        T a = z[b1 + k];
        for (Index j = 0; j < p; ++j) a += z[w1 + k * p + j] * T(data_.features(i, j));
        act[k] = a;
        hid[k] = value_of(a) > 0.0 ? a : T(0.0);
        yhat += z[w2 + k] * hid[k];
      }
      const T r = T(data_.targets(i)) - yhat;
      sum_r2 += r * r;
      if (grad_out) {
        auto& g = *grad_out;
        const T s = tau * r;  // d loglik / d yhat
        g[b2] += s;
        for (Index k = 0; k < h; ++k) {
          g[w2 + k] += s * hid[k];
          if (value_of(act[k]) > 0.0) {
            const T back = s * z[w2 + k];
            g[b1 + k] += back;
            for (Index j = 0; j < p; ++j) g[w1 + k * p + j] += back * T(data_.features(i, j));
          }
        }
      }
    }
    f += T(0.5 * n) * log_tau - T(0.5) * tau * sum_r2 - T(n * detail::kHalfLog2Pi);
    if (grad_out) {
      auto& g = *grad_out;
      g[0] = T(kGammaShape) - T(kGammaRate) * alpha + T(0.5 * nw) - T(0.5) * alpha * sum_w2;
      g[1] = T(kGammaShape) - T(kGammaRate) * tau + T(0.5 * n) - T(0.5) * tau * sum_r2;
      for (Index k = 0; k < nw; ++k) g[2 + k] = g[2 + k] - alpha * z[2 + k];
    }
    return value_of(f);
  }

  RegressionData data_;
  Index hidden_;
};

/// Normalized Gaussian target log N(z | mean, precision^-1).
class GaussianTarget final : public LogJointModel {
 public:
  GaussianTarget(Vector mean, Matrix precision) : mean_(std::move(mean)), precision_(std::move(precision)) {
    detail::require_dim(mean_.size(), precision_.rows(), "GaussianTarget");
    detail::require_dim(mean_.size(), precision_.cols(), "GaussianTarget");
    const Eigen::LLT<Matrix> llt(precision_);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("GaussianTarget: precision not positive definite");
    half_logdet_ = llt.matrixLLT().diagonal().array().log().sum();
  }

  static GaussianTarget standard(Index d) { return {Vector::Zero(d), Matrix::Identity(d, d)}; }

  Index dim() const override { return mean_.size(); }
  std::string name() const override { return "gaussian"; }
  const Vector& mean() const { return mean_; }
  const Matrix& precision() const { return precision_; }

  double log_joint(const Vector& z) const override {
    detail::check_input(z, dim(), "gaussian");
    const Vector r = z - mean_;
    return -0.5 * r.dot(precision_ * r) + half_logdet_ - static_cast<double>(dim()) * detail::kHalfLog2Pi;
  }

  Vector grad(const Vector& z) const override {
    detail::check_input(z, dim(), "gaussian");
    return -(precision_ * (z - mean_));
  }

  double value_and_grad(const Vector& z, Vector& grad_out) const override {
    detail::check_input(z, dim(), "gaussian");
    const Vector r = z - mean_;
    grad_out = -(precision_ * r);
    return 0.5 * r.dot(grad_out) + half_logdet_ - static_cast<double>(dim()) * detail::kHalfLog2Pi;
  }

  Vector hvp(const Vector& z, const Vector& v) const override {
    detail::check_input(z, dim(), "gaussian");
    return -(precision_ * v);
  }

 private:
  Vector mean_;
  Matrix precision_;
  double half_logdet_ = 0.0;
};

/// Wraps a model and counts calls that touch the data (value and gradient).
class CountingModel final : public LogJointModel {
 public:
  explicit CountingModel(const LogJointModel& inner) : inner_(inner) {}

  Index dim() const override { return inner_.dim(); }
  std::string name() const override { return inner_.name(); }
  double log_joint(const Vector& z) const override {
    ++evaluations_;
    return inner_.log_joint(z);
  }
  Vector grad(const Vector& z) const override {
    ++evaluations_;
    return inner_.grad(z);
  }
  double value_and_grad(const Vector& z, Vector& g) const override {
    ++evaluations_;
    return inner_.value_and_grad(z, g);
  }
  Vector hvp(const Vector& z, const Vector& v) const override {
    ++hvps_;
    return inner_.hvp(z, v);
  }

  long evaluations() const { return evaluations_.load(); }
  long hvps() const { return hvps_.load(); }
  void reset() {
    evaluations_ = 0;
    hvps_ = 0;
  }

 private:
  const LogJointModel& inner_;
  mutable std::atomic<long> evaluations_{0};
  mutable std::atomic<long> hvps_{0};
};

}  // namespace quadcv

#endif  // QUADCV_MODELS_HPP
