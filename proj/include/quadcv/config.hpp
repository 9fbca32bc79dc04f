#ifndef QUADCV_CONFIG_HPP
#define QUADCV_CONFIG_HPP

// Run configuration: a flat key=value text file, one key per line, '#' starts
// a comment. Every key except `model` and `family` has a default.

#include "quadcv/datasets.hpp"
#include "quadcv/error.hpp"
#include "quadcv/estimators.hpp"
#include "quadcv/families.hpp"

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace quadcv {

struct RunConfig {
  // model and data
  std::string model;  // synth_logistic | logistic | synth_hierarchical | hierarchical | synth_bnn | bnn | gaussian
  std::string data;   // path for logistic (libsvm), hierarchical (frisk table), bnn (csv)
  Index num_features = 0;  // libsvm; 0 infers from the file
  std::string target_column = "quality";
  char delimiter = ';';
  Index hidden = 50;
  Index synth_n = 200;
  Index synth_p = 19;
  double synth_density = 0.25;
  Index synth_ethnicities = 3;
  Index synth_precincts = 31;
  std::uint64_t data_seed = 1;
  Index gaussian_dim = 5;

  // variational family and estimator
  FamilyKind family = FamilyKind::MeanLogScale;
  Index rank_w = 10;
  CvKind cv = CvKind::QuadraticM2;
  Index rank_v = -1;  // -1: 10, or 20 for the full-rank family
  double lowrank_sign = kDefaultLowRankSign;  // surrogate curvature diag(d_B) + sign * U U^T
  Index samples = 10;
  double init_scale = 1.0;

  // optimization
  long iterations = 1000;
  double step_w = 1e-3;
  double step_v = 1e-2;
  double gamma_decay = 0.9;
  double gamma_max = 10.0;
  double gamma_floor = 1e-12;
  std::uint64_t seed = 0;
  int threads = 1;

  // output and probes
  std::string output = "trace.csv";
  long probe_interval = 500;
  Index probe_samples = 1000;
  bool record_time = true;

  // sweeps
  std::vector<double> sigmas{0.1, 0.3, 1.0};
  std::vector<CvKind> sweep_estimators{CvKind::None, CvKind::QuadraticM1, CvKind::QuadraticM2, CvKind::Taylor};
  long fit_iters = 20000;
  double fit_final_step_ratio = 0.1;  // sweep fits decay the surrogate step geometrically to step_v * ratio
  std::vector<double> step_grid{1e-4, 3e-4, 1e-3, 3e-3, 1e-2};

  Index effective_rank_v() const {
    if (rank_v >= 0) return rank_v;
    return family == FamilyKind::MeanCholesky ? 20 : 10;
  }

  /// Throws std::invalid_argument naming the offending key.
  void validate() const;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

}  // namespace detail

inline void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw std::invalid_argument(key + ": " + msg); };
  static const char* kModels[] = {"synth_logistic", "logistic", "synth_hierarchical", "hierarchical",
                                  "synth_bnn",      "bnn",      "gaussian"};
  if (std::find(std::begin(kModels), std::end(kModels), model) == std::end(kModels))
    fail("model", "unknown model '" + model + "'");
  if ((model == "logistic" || model == "hierarchical" || model == "bnn") && data.empty())
    fail("data", "model '" + model + "' needs a data path");
  if (rank_w < 0) fail("rank_w", "must be >= 0");
  if (rank_v < -1) fail("rank_v", "must be >= 0 or auto");
  if (samples < 1) fail("samples", "must be >= 1");
  if (iterations < 0) fail("iterations", "must be >= 0");
  if (!(step_w > 0.0)) fail("step_w", "must be positive");
  if (!(step_v > 0.0)) fail("step_v", "must be positive");
  if (!(gamma_decay > 0.0 && gamma_decay < 1.0)) fail("gamma_decay", "must lie in (0, 1)");
  if (!(gamma_max > 0.0)) fail("gamma_max", "must be positive");
  if (!(gamma_floor > 0.0)) fail("gamma_floor", "must be positive");
  if (!(init_scale > 0.0)) fail("init_scale", "must be positive");
  if (threads < 1) fail("threads", "must be >= 1");
  if (probe_interval < 1) fail("probe_interval", "must be >= 1");
  if (probe_samples < 2) fail("probe_samples", "must be >= 2");
  if (hidden < 1) fail("hidden", "must be >= 1");
  if (synth_n < 1 || synth_p < 1) fail("synth_n/synth_p", "must be >= 1");
  if (!(synth_density > 0.0 && synth_density <= 1.0)) fail("synth_density", "must lie in (0, 1]");
  if (synth_ethnicities < 1 || synth_precincts < 1) fail("synth_ethnicities/synth_precincts", "must be >= 1");
  if (gaussian_dim < 1) fail("gaussian_dim", "must be >= 1");
  if (sigmas.empty()) fail("sigmas", "must not be empty");
  for (double s : sigmas)
    if (!(s > 0.0)) fail("sigmas", "entries must be positive");
  if (sweep_estimators.empty()) fail("sweep_estimators", "must not be empty");
  if (fit_iters < 0) fail("fit_iters", "must be >= 0");
  if (!(fit_final_step_ratio > 0.0 && fit_final_step_ratio <= 1.0)) fail("fit_final_step_ratio", "must lie in (0, 1]");
  if (lowrank_sign != 1.0 && lowrank_sign != -1.0) fail("surrogate_lowrank", "must be positive or negative");
  if (step_grid.empty()) fail("step_grid", "must not be empty");
  for (double s : step_grid)
    if (!(s > 0.0)) fail("step_grid", "entries must be positive");
}

namespace detail {

struct ConfigField {
  std::function<void(RunConfig&, std::string_view)> parse;  // throws std::invalid_argument
  std::function<std::string(const RunConfig&)> print;
};

inline double config_double(std::string_view v) {
  const auto x = parse_double(v);
  if (!x) throw std::invalid_argument("expected a number, got '" + std::string(v) + "'");
  return *x;
}

inline long long config_int(std::string_view v) {
  const auto x = parse_int(v);
  if (!x) throw std::invalid_argument("expected an integer, got '" + std::string(v) + "'");
  return *x;
}

inline bool config_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(v) + "'");
}

inline std::vector<double> config_doubles(std::string_view v) {
  std::vector<double> out;
  for (auto cell : split(v, ',')) out.push_back(config_double(trim(cell)));
  return out;
}

inline std::vector<CvKind> config_cvs(std::string_view v) {
  std::vector<CvKind> out;
  for (auto cell : split(v, ',')) out.push_back(cv_kind_from_string(trim(cell)));
  return out;
}

// Declaration order is the serialization order.
inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  using C = RunConfig;
  static const auto fields = [] {
    std::vector<std::pair<std::string, ConfigField>> f;
    auto str = [&](const char* key, std::string C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) { c.*m = std::string(v); }, [m](const C& c) { return c.*m; }}});
    };
    auto idx = [&](const char* key, Index C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) { c.*m = static_cast<Index>(config_int(v)); },
                         [m](const C& c) { return std::to_string(c.*m); }}});
    };
    auto lng = [&](const char* key, long C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) { c.*m = static_cast<long>(config_int(v)); },
                         [m](const C& c) { return std::to_string(c.*m); }}});
    };
    auto u64 = [&](const char* key, std::uint64_t C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) {
                           const auto x = config_int(v);
                           if (x < 0) throw std::invalid_argument("expected a non-negative integer");
                           c.*m = static_cast<std::uint64_t>(x);
                         },
                         [m](const C& c) { return std::to_string(c.*m); }}});
    };
    auto dbl = [&](const char* key, double C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) { c.*m = config_double(v); },
                         [m](const C& c) { return format_double(c.*m); }}});
    };
    auto dbls = [&](const char* key, std::vector<double> C::*m) {
      f.push_back({key, {[m](C& c, std::string_view v) { c.*m = config_doubles(v); },
                         [m](const C& c) { return join<double>(c.*m, [](const double& x) { return format_double(x); }); }}});
    };

    str("model", &C::model);
    str("data", &C::data);
    idx("num_features", &C::num_features);
    str("target_column", &C::target_column);
    f.push_back({"delimiter", {[](C& c, std::string_view v) {
                                 if (v == "tab" || v == "\\t") c.delimiter = '\t';
                                 else if (v.size() == 1) c.delimiter = v[0];
                                 else throw std::invalid_argument("expected a single character or 'tab'");
                               },
                               [](const C& c) { return c.delimiter == '\t' ? std::string("tab") : std::string(1, c.delimiter); }}});
    idx("hidden", &C::hidden);
    idx("synth_n", &C::synth_n);
    idx("synth_p", &C::synth_p);
    dbl("synth_density", &C::synth_density);
    idx("synth_ethnicities", &C::synth_ethnicities);
    idx("synth_precincts", &C::synth_precincts);
    u64("data_seed", &C::data_seed);
    idx("gaussian_dim", &C::gaussian_dim);
    f.push_back({"family", {[](C& c, std::string_view v) { c.family = family_kind_from_string(v); },
                            [](const C& c) { return std::string(to_string(c.family)); }}});
    idx("rank_w", &C::rank_w);
    f.push_back({"cv", {[](C& c, std::string_view v) { c.cv = cv_kind_from_string(v); },
                        [](const C& c) { return std::string(to_string(c.cv)); }}});
    f.push_back({"rank_v", {[](C& c, std::string_view v) { c.rank_v = v == "auto" ? -1 : static_cast<Index>(config_int(v)); },
                            [](const C& c) { return c.rank_v < 0 ? std::string("auto") : std::to_string(c.rank_v); }}});
    f.push_back({"surrogate_lowrank",
                 {[](C& c, std::string_view v) {
                    if (v == "negative") c.lowrank_sign = -1.0;
                    else if (v == "positive") c.lowrank_sign = 1.0;
                    else throw std::invalid_argument("expected negative or positive");
                  },
                  [](const C& c) { return std::string(c.lowrank_sign < 0 ? "negative" : "positive"); }}});
    idx("samples", &C::samples);
    dbl("init_scale", &C::init_scale);
    lng("iterations", &C::iterations);
    dbl("step_w", &C::step_w);
    dbl("step_v", &C::step_v);
    dbl("gamma_decay", &C::gamma_decay);
    dbl("gamma_max", &C::gamma_max);
    dbl("gamma_floor", &C::gamma_floor);
    u64("seed", &C::seed);
    f.push_back({"threads", {[](C& c, std::string_view v) { c.threads = static_cast<int>(config_int(v)); },
                             [](const C& c) { return std::to_string(c.threads); }}});
    str("output", &C::output);
    lng("probe_interval", &C::probe_interval);
    idx("probe_samples", &C::probe_samples);
    f.push_back({"record_time", {[](C& c, std::string_view v) { c.record_time = config_bool(v); },
                                 [](const C& c) { return std::string(c.record_time ? "true" : "false"); }}});
    dbls("sigmas", &C::sigmas);
    f.push_back({"sweep_estimators",
                 {[](C& c, std::string_view v) { c.sweep_estimators = config_cvs(v); },
                  [](const C& c) {
                    return join<CvKind>(c.sweep_estimators, [](const CvKind& k) { return std::string(to_string(k)); });
                  }}});
    lng("fit_iters", &C::fit_iters);
    dbl("fit_final_step_ratio", &C::fit_final_step_ratio);
    dbls("step_grid", &C::step_grid);
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Parses config text; `source` names the input in error messages.
inline RunConfig parse_config_text(std::istream& in, const std::string& source = "<config>") {
  const auto& fields = detail::config_fields();
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view text = line;
    if (const auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
    text = detail::trim(text);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, lineno, "expected key=value");
    const std::string key(detail::trim(text.substr(0, eq)));
    const auto value = detail::trim(text.substr(eq + 1));
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ParseError(source, lineno, "unknown key '" + key + "'");
    if (const auto prev = seen.find(key); prev != seen.end())
      throw ParseError(source, lineno, "duplicate key '" + key + "' (first set on line " + std::to_string(prev->second) + ")");
    seen[key] = lineno;
    try {
      it->second.parse(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ParseError(source, lineno, key + ": " + e.what());
    }
  }
  for (const char* required : {"model", "family"})
    if (!seen.count(required)) throw ParseError(source, 0, std::string("missing required key '") + required + "'");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto key = msg.substr(0, msg.find(':'));
    throw ParseError(source, seen.count(key) ? seen[key] : 0, msg);
  }
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  return parse_config_text(in, path);
}

/// Every key, one per line, in a form parse_config_text reads back unchanged.
inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& [key, field] : detail::config_fields()) out << key << '=' << field.print(cfg) << '\n';
  return out.str();
}

}  // namespace quadcv

#endif  // QUADCV_CONFIG_HPP
