#ifndef QUADCV_TRAINER_HPP
#define QUADCV_TRAINER_HPP

// The double-descent optimization loop (ascent on w, descent on the
// surrogate parameters v) and the experiment drivers built on it.
//
// Random streams derived from one seed: training noise, surrogate
// initialization and variance probes each get their own generator, so probing
// never changes the training path and cv=none sees the same noise as cv=quadratic.

#include "quadcv/adam.hpp"
#include "quadcv/config.hpp"
#include "quadcv/control_variates.hpp"
#include "quadcv/datasets.hpp"
#include "quadcv/error.hpp"
#include "quadcv/estimators.hpp"
#include "quadcv/families.hpp"
#include "quadcv/models.hpp"
#include "quadcv/trace.hpp"

#include <chrono>
#include <cstdint>
#include <fstream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace quadcv {

using Rng = std::mt19937_64;

enum class Stream : std::uint64_t { Training = 1, SurrogateInit = 2, Probe = 3, SweepProbe = 4, SweepFit = 5 };

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index)};
  return Rng(seq);
}

inline std::unique_ptr<LogJointModel> make_model(const RunConfig& c) {
  if (c.model == "synth_logistic")
    return std::make_unique<LogisticRegression>(synth_logistic(c.synth_n, c.synth_p, c.data_seed, c.synth_density));
  if (c.model == "logistic") return std::make_unique<LogisticRegression>(load_libsvm(c.data, c.num_features));
  if (c.model == "synth_hierarchical")
    return std::make_unique<HierarchicalPoisson>(synth_frisk(c.synth_ethnicities, c.synth_precincts, c.data_seed));
  if (c.model == "hierarchical") return std::make_unique<HierarchicalPoisson>(load_frisk(c.data));
  if (c.model == "synth_bnn")
    return std::make_unique<BayesianNeuralNet>(synth_regression(c.synth_n, c.synth_p, c.data_seed), c.hidden);
  if (c.model == "bnn")
    return std::make_unique<BayesianNeuralNet>(load_csv(c.data, c.target_column, c.delimiter), c.hidden);
  if (c.model == "gaussian") return std::make_unique<GaussianTarget>(GaussianTarget::standard(c.gaussian_dim));
  throw std::invalid_argument("unknown model '" + c.model + "'");
}

struct TrainOptions {
  CvKind cv = CvKind::QuadraticM2;
  Index samples = 10;
  double step_w = 1e-3;
  double step_v = 1e-2;
  double gamma_decay = 0.9;
  double gamma_max = 10.0;
  double gamma_floor = 1e-12;
  int threads = 1;
  double lowrank_sign = kDefaultLowRankSign;
  bool pin_gamma_zero = false;  // use gamma = 0 in every primary step
};

inline TrainOptions train_options(const RunConfig& c) {
  return {c.cv, c.samples, c.step_w, c.step_v, c.gamma_decay, c.gamma_max, c.gamma_floor, c.threads, c.lowrank_sign, false};
}

struct RunState {
  const LogJointModel* model = nullptr;
  TrainOptions options;
  FamilyParams family;
  QuadSurrogate surrogate;
  AdamState adam_w;
  AdamState adam_v;
  GammaTracker tracker;
  Rng rng;
  long iteration = 0;

  double step_gamma() const { return options.pin_gamma_zero ? 0.0 : tracker.gamma(); }

  CvSpec cv_spec() const {
    return {options.cv, is_quadratic(options.cv) ? &surrogate : nullptr, step_gamma()};
  }
};

/// w0 = given family, v0 = QuadSurrogate::initial with z0 = mu, gamma = 0.
inline RunState make_run_state(const LogJointModel& model, FamilyParams init, Index rank_v, const TrainOptions& opt,
                               std::uint64_t seed) {
  detail::require_dim(model.dim(), init.dim(), "make_run_state");
  init.validate();
  RunState st;
  st.model = &model;
  st.options = opt;
  st.family = std::move(init);
  Rng init_rng = make_rng(seed, Stream::SurrogateInit);
  st.surrogate = QuadSurrogate::initial(st.family.dim(), is_quadratic(opt.cv) ? rank_v : 0, init_rng, opt.lowrank_sign);
  st.surrogate.z0 = st.family.mean;
  st.adam_w = AdamState(num_params(st.family), opt.step_w);
  st.adam_v = AdamState(st.surrogate.num_params(), opt.step_v);
  st.tracker = GammaTracker(opt.gamma_decay, opt.gamma_floor, opt.gamma_max);
  st.rng = make_rng(seed, Stream::Training);
  return st;
}

inline FamilyParams initial_family(const RunConfig& c, Index d) {
  return FamilyParams::isotropic(c.family, d, c.init_scale, c.family == FamilyKind::MeanDiagLowRank ? c.rank_w : 0);
}

/// One iteration: M samples at w_k, primary step with the previous gamma,
/// gamma update, z0 <- mu_{k+1}, dual step from the stored samples. The dual
/// step evaluates no model quantities.
inline MultiSample train_step(RunState& st) {
  const long k = st.iteration;
  MultiSample ms = multi_sample(*st.model, st.family, st.cv_spec(), st.options.samples, st.rng, st.options.threads);
  if (!ms.mean.all_finite()) {
    std::ostringstream msg;
    msg << "iteration " << k << ": non-finite gradient estimate (gamma " << st.tracker.gamma() << ", |mu| "
        << st.family.mean.norm() << ")";
    throw NonFiniteError(msg.str());
  }

  const FamilyParams sampled = st.family;
  Vector w = flatten(st.family);
  adam_step(st.adam_w, w, ms.mean.flat(), true);
  assign_flat(st.family, w);

  if (st.options.cv != CvKind::None)
    for (const auto& s : ms.samples) st.tracker.update(s.c, s.g);

  if (is_quadratic(st.options.cv)) {
    st.surrogate.z0 = st.family.mean;
    Vector h = Vector::Zero(st.surrogate.num_params());
    for (const auto& s : ms.samples) {
      h += st.options.cv == CvKind::QuadraticM1 ? fit_grad_method1(st.surrogate, sampled, s.noise, s.g).flat()
                                                : fit_grad_method2(st.surrogate, sampled, s.noise, s.grad_f).flat();
    }
    h /= static_cast<double>(ms.samples.size());
    if (!h.allFinite()) throw NonFiniteError("iteration " + std::to_string(k) + ": non-finite surrogate gradient");
    Vector v = flatten(st.surrogate);
    adam_step(st.adam_v, v, h, false);
    assign_flat(st.surrogate, v);
  }
  ++st.iteration;
  return ms;
}

/// ELBO and per-sample gradient variance at the current state from fresh
/// noise. Uses the gamma the next primary step would use.
template <typename R>
TraceRow probe(const RunState& st, Index probe_samples, R& rng) {
  std::vector<NoiseDraw> noises;
  noises.reserve(static_cast<std::size_t>(probe_samples));
  for (Index i = 0; i < probe_samples; ++i) noises.push_back(sample_noise(st.family, rng));
  const CvSpec spec = st.cv_spec();
  const auto samples = evaluate_noise(*st.model, st.family, spec, noises, st.options.threads);
  const auto grads = corrected_grads(samples, spec.gamma);
  TraceRow row;
  row.iteration = st.iteration;
  row.elbo_estimate = elbo_estimate(samples, st.family);
  row.var_total = empirical_variance(grads, Block::All);
  row.var_mean_block = empirical_variance(grads, Block::Mean);
  row.var_scale_block = empirical_variance(grads, Block::Scale);
  row.gamma = spec.gamma;
  return row;
}

struct RunResult {
  std::vector<TraceRow> trace;
  FamilyParams family;
  QuadSurrogate surrogate;
  double gamma = 0.0;
};

/// Runs cfg.iterations steps, probing after every probe_interval-th step and
/// after the last one. Rows are streamed to `out` (header first) when given.
/// elapsed_ms counts optimization time only, not probes.
inline RunResult run(const RunConfig& cfg, const LogJointModel& model, std::ostream* out = nullptr) {
  cfg.validate();
  RunState st = make_run_state(model, initial_family(cfg, model.dim()), cfg.effective_rank_v(), train_options(cfg), cfg.seed);
  Rng probe_rng = make_rng(cfg.seed, Stream::Probe);
  RunResult result;
  if (out) write_trace_header(*out);
  using Clock = std::chrono::steady_clock;
  Clock::duration busy{};
  for (long k = 1; k <= cfg.iterations; ++k) {
    const auto t0 = Clock::now();
    train_step(st);
    busy += Clock::now() - t0;
    if (k % cfg.probe_interval == 0 || k == cfg.iterations) {
      TraceRow row = probe(st, cfg.probe_samples, probe_rng);
      row.elapsed_ms = cfg.record_time ? std::chrono::duration_cast<std::chrono::milliseconds>(busy).count() : 0;
      result.trace.push_back(row);
      if (out) {
        write_trace_row(*out, row);
        out->flush();
      }
    }
  }
  result.family = st.family;
  result.surrogate = st.surrogate;
  result.gamma = st.tracker.gamma();
  return result;
}

inline RunResult run(const RunConfig& cfg) {
  const auto model = make_model(cfg);
  if (cfg.output.empty()) return run(cfg, *model);
  std::ofstream out(cfg.output);
  if (!out) throw std::runtime_error("cannot write '" + cfg.output + "'");
  auto result = run(cfg, *model, &out);
  if (!out) throw std::runtime_error("write failed for '" + cfg.output + "'");
  return result;
}

struct FitOptions {
  long iterations = 20000;
  double step = 1e-2;
  Index samples = 1;
  double final_step_ratio = 1.0;  // geometric decay of the step to step * ratio
};

/// Dual steps only: trains v at fixed w (z0 is left as is) by Adam descent on
/// the Method 1 or Method 2 objective.
template <typename R>
void fit_surrogate(const LogJointModel& model, const FamilyParams& f, QuadSurrogate& s, CvKind method,
                   const FitOptions& opt, R& rng) {
  if (!is_quadratic(method)) throw std::invalid_argument("fit_surrogate: method must be quadratic_m1 or quadratic_m2");
  if (opt.samples < 1) throw std::invalid_argument("fit_surrogate: need at least one sample");
  AdamState adam(s.num_params(), opt.step);
  const double decay =
      opt.iterations > 1 ? std::pow(opt.final_step_ratio, 1.0 / static_cast<double>(opt.iterations - 1)) : 1.0;
  Vector v = flatten(s);
  Vector h(s.num_params());
  for (long it = 0; it < opt.iterations; ++it) {
    h.setZero();
    for (Index m = 0; m < opt.samples; ++m) {
      const NoiseDraw n = sample_noise(f, rng);
      const GradSample gs = base_grad(model, f, n);
      h += method == CvKind::QuadraticM1 ? fit_grad_method1(s, f, n, gs.g).flat()
                                         : fit_grad_method2(s, f, n, gs.grad_f).flat();
    }
    h /= static_cast<double>(opt.samples);
    adam_step(adam, v, h, false);
    assign_flat(s, v);
    adam.alpha *= decay;
  }
}

struct SweepOptions {
  Index rank_w = 0;
  Index rank_v = 20;
  long fit_iters = 20000;
  double step_v = 1e-2;
  double fit_final_step_ratio = 0.1;
  double lowrank_sign = kDefaultLowRankSign;
  Index probe_samples = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// For each sigma: w fixed at mu = 0, Sigma = sigma^2 I; quadratic
/// surrogates trained for fit_iters dual steps (M = 1, step decaying from
/// step_v to step_v * fit_final_step_ratio); then the variance of g + c
/// (gamma = 1) over probe samples shared by all estimators.
inline std::vector<SweepRow> sigma_sweep(const LogJointModel& model, FamilyKind kind, const std::vector<double>& sigmas,
                                         const std::vector<CvKind>& estimators, const SweepOptions& opt) {
  std::vector<SweepRow> rows;
  const Index d = model.dim();
  for (std::size_t si = 0; si < sigmas.size(); ++si) {
    if (!(sigmas[si] > 0.0)) throw std::invalid_argument("sigma_sweep: sigmas must be positive");
    const FamilyParams f =
        FamilyParams::isotropic(kind, d, sigmas[si], kind == FamilyKind::MeanDiagLowRank ? opt.rank_w : 0);
    Rng probe_rng = make_rng(opt.seed, Stream::SweepProbe, si);
    std::vector<NoiseDraw> noises;
    for (Index i = 0; i < opt.probe_samples; ++i) noises.push_back(sample_noise(f, probe_rng));
    for (const CvKind cv : estimators) {
      QuadSurrogate s;
      if (is_quadratic(cv)) {
        Rng init_rng = make_rng(opt.seed, Stream::SurrogateInit, si);
        s = QuadSurrogate::initial(d, opt.rank_v, init_rng, opt.lowrank_sign);
        s.z0 = f.mean;
        Rng fit_rng = make_rng(opt.seed, Stream::SweepFit, si);
        fit_surrogate(model, f, s, cv, {opt.fit_iters, opt.step_v, 1, opt.fit_final_step_ratio}, fit_rng);
      }
      const CvSpec spec{cv, is_quadratic(cv) ? &s : nullptr, 1.0};
      const auto grads = corrected_grads(evaluate_noise(model, f, spec, noises, opt.threads), 1.0);
      rows.push_back({sigmas[si], std::string(to_string(cv)), empirical_variance(grads, Block::All),
                      empirical_variance(grads, Block::Mean), empirical_variance(grads, Block::Scale)});
    }
  }
  return rows;
}

inline std::vector<SweepRow> sigma_sweep(const RunConfig& cfg, const LogJointModel& model) {
  cfg.validate();
  return sigma_sweep(model, cfg.family, cfg.sigmas, cfg.sweep_estimators,
                     {cfg.rank_w, cfg.effective_rank_v(), cfg.fit_iters, cfg.step_v, cfg.fit_final_step_ratio,
                      cfg.lowrank_sign, cfg.probe_samples, cfg.seed, cfg.threads});
}

/// Output path for one member of a step-size grid: "trace.csv" becomes
/// "trace_stepw0.001.csv".
inline std::string stepsize_output(const std::string& base, double step) {
  const std::string tag = "_stepw" + detail::format_double(step);
  const auto slash = base.find_last_of('/');
  const auto dot = base.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return base + tag + ".csv";
  return base.substr(0, dot) + tag + base.substr(dot);
}

/// One run per step size in cfg.step_grid, each written to its own file.
/// Returns the paths written.
inline std::vector<std::string> stepsize_sweep(const RunConfig& cfg) {
  cfg.validate();
  const auto model = make_model(cfg);
  std::vector<std::string> paths;
  for (double step : cfg.step_grid) {
    RunConfig c = cfg;
    c.step_w = step;
    c.output = stepsize_output(cfg.output, step);
    std::ofstream out(c.output);
    if (!out) throw std::runtime_error("cannot write '" + c.output + "'");
    run(c, *model, &out);
    paths.push_back(c.output);
  }
  return paths;
}

}  // namespace quadcv

#endif  // QUADCV_TRAINER_HPP
