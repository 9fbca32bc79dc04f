#ifndef QUADCV_ESTIMATORS_HPP
#define QUADCV_ESTIMATORS_HPP

// Base and control-variate-corrected ELBO gradient estimators, and the
// variance statistics reported by the experiment drivers.

#include "quadcv/control_variates.hpp"
#include "quadcv/families.hpp"
#include "quadcv/models.hpp"

#include <algorithm>
#include <exception>
#include <span>
#include <stdexcept>
#include <string_view>
#include <thread>
#include <vector>

namespace quadcv {

enum class CvKind { None, QuadraticM1, QuadraticM2, Taylor };

inline std::string_view to_string(CvKind k) {
  switch (k) {
    case CvKind::None: return "none";
    case CvKind::QuadraticM1: return "quadratic_m1";
    case CvKind::QuadraticM2: return "quadratic_m2";
    case CvKind::Taylor: return "taylor";
  }
  return "?";
}

inline CvKind cv_kind_from_string(std::string_view s) {
  if (s == "none") return CvKind::None;
  if (s == "quadratic_m1") return CvKind::QuadraticM1;
  if (s == "quadratic_m2") return CvKind::QuadraticM2;
  if (s == "taylor") return CvKind::Taylor;
  throw std::invalid_argument("unknown control variate '" + std::string(s) +
                              "' (expected none, quadratic_m1, quadratic_m2 or taylor)");
}

inline bool is_quadratic(CvKind k) { return k == CvKind::QuadraticM1 || k == CvKind::QuadraticM2; }

/// surrogate must be non-null for the quadratic kinds.
struct CvSpec {
  CvKind kind = CvKind::None;
  const QuadSurrogate* surrogate = nullptr;
  double gamma = 0.0;
};

struct GradSample {
  WGradient g;  // includes the entropy gradient
  WGradient c;  // zero when no control variate is used
  Vector z;
  Vector grad_f;  // grad log p at z, kept for the surrogate fit
  double f_value = 0.0;
  NoiseDraw noise;
};

inline GradSample base_grad(const LogJointModel& model, const FamilyParams& f, const NoiseDraw& n) {
  detail::require_dim(model.dim(), f.dim(), "base_grad");
  GradSample s;
  s.noise = n;
  s.z = transform(f, n);
  s.f_value = model.value_and_grad(s.z, s.grad_f);
  s.g = jtvp(f, n, s.grad_f);
  s.g += entropy_grad(f);
  s.c = WGradient::zeros_like(f);
  return s;
}

inline WGradient corrected_grad(const GradSample& s, double gamma) {
  if (s.g.mean_block.size() != s.c.mean_block.size() || s.g.scale_block.size() != s.c.scale_block.size())
    throw std::invalid_argument("corrected_grad: g and c layouts differ");
  WGradient out = s.c;
  out *= gamma;
  out += s.g;
  return out;
}

namespace detail {

inline void validate_cv(const CvSpec& cv, const FamilyParams& f) {
  if (is_quadratic(cv.kind)) {
    if (cv.surrogate == nullptr) throw std::invalid_argument("quadratic control variate requires a surrogate");
    require_dim(f.dim(), cv.surrogate->dim(), "surrogate");
  }
}

/// Evaluates samples[i] for every i, on up to `threads` workers with a static
/// partition. Results land by index so the output does not depend on threads.
inline void evaluate_samples(const LogJointModel& model, const FamilyParams& f, const CvSpec& cv,
                             std::span<const NoiseDraw> noises, const Vector* grad_at_mean,
                             std::vector<GradSample>& out, int threads) {
  out.resize(noises.size());
  auto work = [&](std::size_t i) {
    out[i] = base_grad(model, f, noises[i]);
    switch (cv.kind) {
      case CvKind::None: break;
      case CvKind::QuadraticM1:
      case CvKind::QuadraticM2: out[i].c = cv_value(*cv.surrogate, f, noises[i]); break;
      case CvKind::Taylor: out[i].c = taylor_cv(f, noises[i], model, *grad_at_mean); break;
    }
  };
  const std::size_t n = noises.size();
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) work(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Per-sample estimators for pre-drawn noise. Taylor needs one extra gradient
/// evaluation at the mean, shared by all samples.
inline std::vector<GradSample> evaluate_noise(const LogJointModel& model, const FamilyParams& f, const CvSpec& cv,
                                              std::span<const NoiseDraw> noises, int threads = 1) {
  detail::validate_cv(cv, f);
  Vector grad_at_mean;
  if (cv.kind == CvKind::Taylor) grad_at_mean = model.grad(f.mean);
  std::vector<GradSample> out;
  detail::evaluate_samples(model, f, cv, noises, &grad_at_mean, out, threads);
  return out;
}

struct MultiSample {
  WGradient mean;
  std::vector<GradSample> samples;
};

/// Average of M corrected single-sample estimators. Noise is drawn serially
/// from rng before any evaluation, so the result is independent of threads.
template <typename Rng>
MultiSample multi_sample(const LogJointModel& model, const FamilyParams& f, const CvSpec& cv, Index m, Rng& rng,
                         int threads = 1) {
  if (m < 1) throw std::invalid_argument("multi_sample: need at least one sample");
  std::vector<NoiseDraw> noises;
  noises.reserve(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) noises.push_back(sample_noise(f, rng));
  MultiSample out{WGradient::zeros_like(f), evaluate_noise(model, f, cv, noises, threads)};
  for (const auto& s : out.samples) out.mean += corrected_grad(s, cv.gamma);
  out.mean *= 1.0 / static_cast<double>(m);
  return out;
}

enum class Block { All, Mean, Scale };

namespace detail {

inline auto block_view(const WGradient& x, Block b) {
  switch (b) {
    case Block::Mean: return x.mean_block;
    case Block::Scale: return x.scale_block;
    case Block::All: break;
  }
  return x.flat();
}

}  // namespace detail

/// E|X|^2 - |E X|^2 over the requested block (1/N normalization), computed in
/// two passes.
inline double empirical_variance(std::span<const WGradient> xs, Block block = Block::All) {
  if (xs.size() < 2) throw std::invalid_argument("empirical_variance: need at least two samples");
  Vector mean = detail::block_view(xs.front(), block);
  mean.setZero();
  for (const auto& x : xs) mean += detail::block_view(x, block);
  mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (const auto& x : xs) acc += (detail::block_view(x, block) - mean).squaredNorm();
  return acc / static_cast<double>(xs.size());
}

/// E[a^T b] - E[a]^T E[b], same normalization as empirical_variance.
inline double empirical_covariance(std::span<const WGradient> as, std::span<const WGradient> bs,
                                   Block block = Block::All) {
  if (as.size() != bs.size()) throw std::invalid_argument("empirical_covariance: sample counts differ");
  if (as.size() < 2) throw std::invalid_argument("empirical_covariance: need at least two samples");
  Vector ma = detail::block_view(as.front(), block);
  Vector mb = detail::block_view(bs.front(), block);
  ma.setZero();
  mb.setZero();
  for (std::size_t i = 0; i < as.size(); ++i) {
    ma += detail::block_view(as[i], block);
    mb += detail::block_view(bs[i], block);
  }
  const double n = static_cast<double>(as.size());
  ma /= n;
  mb /= n;
  double acc = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i)
    acc += (detail::block_view(as[i], block) - ma).dot(detail::block_view(bs[i], block) - mb);
  return acc / n;
}

inline std::vector<WGradient> corrected_grads(std::span<const GradSample> samples, double gamma) {
  std::vector<WGradient> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(corrected_grad(s, gamma));
  return out;
}

/// Mean of f over the samples plus the closed-form entropy.
inline double elbo_estimate(std::span<const GradSample> samples, const FamilyParams& f) {
  if (samples.empty()) throw std::invalid_argument("elbo_estimate: no samples");
  double acc = 0.0;
  for (const auto& s : samples) acc += s.f_value;
  return acc / static_cast<double>(samples.size()) + entropy(f);
}

}  // namespace quadcv

#endif  // QUADCV_ESTIMATORS_HPP
