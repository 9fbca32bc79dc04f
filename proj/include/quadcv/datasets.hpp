#ifndef QUADCV_DATASETS_HPP
#define QUADCV_DATASETS_HPP

// Dataset containers, file readers/writers and seeded synthetic generators
// for the three benchmark models.

#include "quadcv/error.hpp"
#include "quadcv/linalg.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace quadcv {

/// Binary classification data; labels are 0 or 1. The model prepends a bias.
struct ClassificationData {
  Matrix features;  // n x p
  Vector labels;    // n

  Index rows() const { return features.rows(); }
  Index cols() const { return features.cols(); }
};

/// Stop counts Y_ep and offsets N_ep (arrests), ethnicity x precinct.
struct FriskData {
  Eigen::MatrixXi stops;
  Eigen::MatrixXi arrests;

  Index ethnicities() const { return stops.rows(); }
  Index precincts() const { return stops.cols(); }
};

struct RegressionData {
  Matrix features;  // n x p
  Vector targets;   // n

  Index rows() const { return features.rows(); }
  Index cols() const { return features.cols(); }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::string_view unquote(std::string_view s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
    return s.substr(1, s.size() - 2);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::string_view> split(std::string_view s, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(delim, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  return out;
}

}  // namespace detail

/// libsvm sparse format: "label idx:val ...", 1-based indices, labels
/// +1/1 -> 1 and -1/0 -> 0. `num_features` = 0 infers p from the largest index.
inline ClassificationData load_libsvm(const std::string& path, Index num_features = 0) {
  auto in = detail::open_input(path);
  std::vector<std::vector<std::pair<Index, double>>> rows;
  std::vector<double> labels;
  Index max_index = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    const auto tokens = detail::split_ws(body);
    if (tokens.empty()) continue;
    const auto label = detail::parse_double(tokens[0]);
    if (!label) throw ParseError(path, lineno, "bad label '" + std::string(tokens[0]) + "'");
    if (*label == 1.0)
      labels.push_back(1.0);
    else if (*label == -1.0 || *label == 0.0)
      labels.push_back(0.0);
    else
      throw ParseError(path, lineno, "label must be +1/-1 (or 1/0), got '" + std::string(tokens[0]) + "'");
    auto& row = rows.emplace_back();
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      const auto colon = tokens[t].find(':');
      if (colon == std::string_view::npos) throw ParseError(path, lineno, "expected idx:val, got '" + std::string(tokens[t]) + "'");
      const auto idx = detail::parse_int(tokens[t].substr(0, colon));
      const auto val = detail::parse_double(tokens[t].substr(colon + 1));
      if (!idx || !val) throw ParseError(path, lineno, "bad entry '" + std::string(tokens[t]) + "'");
      if (*idx < 1) throw ParseError(path, lineno, "feature index must be >= 1");
      if (num_features > 0 && *idx > num_features)
        throw ParseError(path, lineno, "feature index " + std::to_string(*idx) + " exceeds declared feature count " +
                                           std::to_string(num_features));
      max_index = std::max<Index>(max_index, *idx);
      row.emplace_back(static_cast<Index>(*idx - 1), *val);
    }
  }
  if (rows.empty()) throw ParseError(path, 0, "no rows");
  const Index p = num_features > 0 ? num_features : max_index;
  ClassificationData data{Matrix::Zero(static_cast<Index>(rows.size()), p),
                          Eigen::Map<Vector>(labels.data(), static_cast<Index>(labels.size()))};
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (const auto& [j, v] : rows[i]) data.features(static_cast<Index>(i), j) = v;
  return data;
}

inline void write_libsvm(const std::string& path, const ClassificationData& data) {
  auto out = detail::open_output(path);
  for (Index i = 0; i < data.rows(); ++i) {
    out << (data.labels(i) == 1.0 ? "+1" : "-1");
    for (Index j = 0; j < data.cols(); ++j)
      if (data.features(i, j) != 0.0) out << ' ' << (j + 1) << ':' << detail::format_double(data.features(i, j));
    out << '\n';
  }
}

/// Delimited text with a header row. `target_column` is a header name or,
/// failing that, a 0-based column index.
inline RegressionData load_csv(const std::string& path, const std::string& target_column, char delimiter = ',') {
  auto in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (header.empty() && std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    for (auto cell : detail::split(line, delimiter)) header.emplace_back(detail::unquote(cell));
  }
  if (header.empty()) throw ParseError(path, 0, "no rows");
  std::size_t target = header.size();
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c] == target_column) target = c;
  if (target == header.size()) {
    const auto idx = detail::parse_int(target_column);
    if (!idx || *idx < 0 || static_cast<std::size_t>(*idx) >= header.size())
      throw ParseError(path, lineno, "target column '" + target_column + "' not found in header");
    target = static_cast<std::size_t>(*idx);
  }
  std::vector<double> values;
  std::vector<double> targets;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split(line, delimiter);
    if (cells.size() != header.size())
      throw ParseError(path, lineno, "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto v = detail::parse_double(detail::unquote(cells[c]));
      if (!v) throw ParseError(path, lineno, "non-numeric field '" + std::string(cells[c]) + "'");
      (c == target ? targets : values).push_back(*v);
    }
  }
  if (targets.empty()) throw ParseError(path, 0, "no rows");
  const Index n = static_cast<Index>(targets.size());
  const Index p = static_cast<Index>(header.size()) - 1;
  RegressionData data;
  data.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(values.data(), n, p);
  data.targets = Eigen::Map<const Vector>(targets.data(), n);
  return data;
}

inline void write_csv(const std::string& path, const RegressionData& data, char delimiter = ',') {
  auto out = detail::open_output(path);
  for (Index j = 0; j < data.cols(); ++j) out << 'x' << (j + 1) << delimiter;
  out << "y\n";
  for (Index i = 0; i < data.rows(); ++i) {
    for (Index j = 0; j < data.cols(); ++j) out << detail::format_double(data.features(i, j)) << delimiter;
    out << detail::format_double(data.targets(i)) << '\n';
  }
}

/// Whitespace table with columns (ethnicity_id, precinct_id, stops, arrests),
/// 1-based ids, one row per cell, every cell present. A non-numeric first
/// line is treated as a header.
inline FriskData load_frisk(const std::string& path) {
  auto in = detail::open_input(path);
  struct Cell {
    long long e, p, y, n;
    std::size_t line;
  };
  std::vector<Cell> cells;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    const auto tok = detail::split_ws(body);
    if (tok.empty()) continue;
    if (first && !detail::parse_int(tok[0])) {
      first = false;
      continue;
    }
    first = false;
    if (tok.size() != 4) throw ParseError(path, lineno, "expected 4 columns, got " + std::to_string(tok.size()));
    std::array<long long, 4> v{};
    for (std::size_t k = 0; k < 4; ++k) {
      const auto x = detail::parse_int(tok[k]);
      if (!x) throw ParseError(path, lineno, "non-integer field '" + std::string(tok[k]) + "'");
      v[k] = *x;
    }
    if (v[0] < 1 || v[1] < 1) throw ParseError(path, lineno, "ids are 1-based");
    if (v[2] < 0) throw ParseError(path, lineno, "negative stop count");
    if (v[3] < 1) throw ParseError(path, lineno, "arrest count must be >= 1");
    cells.push_back({v[0], v[1], v[2], v[3], lineno});
  }
  if (cells.empty()) throw ParseError(path, 0, "no rows");
  long long ne = 0, np = 0;
  for (const auto& c : cells) {
    ne = std::max(ne, c.e);
    np = std::max(np, c.p);
  }
  FriskData data{Eigen::MatrixXi::Constant(ne, np, -1), Eigen::MatrixXi::Constant(ne, np, -1)};
  for (const auto& c : cells) {
    if (data.stops(c.e - 1, c.p - 1) >= 0) throw ParseError(path, c.line, "duplicate cell");
    data.stops(c.e - 1, c.p - 1) = static_cast<int>(c.y);
    data.arrests(c.e - 1, c.p - 1) = static_cast<int>(c.n);
  }
  if ((data.stops.array() < 0).any()) throw ParseError(path, 0, "missing (ethnicity, precinct) cells");
  return data;
}

inline void write_frisk(const std::string& path, const FriskData& data) {
  auto out = detail::open_output(path);
  out << "ethnicity precinct stops arrests\n";
  for (Index e = 0; e < data.ethnicities(); ++e)
    for (Index p = 0; p < data.precincts(); ++p)
      out << (e + 1) << ' ' << (p + 1) << ' ' << data.stops(e, p) << ' ' << data.arrests(e, p) << '\n';
}

// Synthetic stand-ins for the benchmark datasets. All are pure functions of
// their arguments.

/// Binary one-hot-style features (like a1a): each feature is active with
/// probability `density`. Labels follow the logistic model with a standard
/// normal ground-truth coefficient vector (bias first), returned through
/// `truth` when requested.
inline ClassificationData synth_logistic(Index n, Index p, std::uint64_t seed, double density = 0.25,
                                         Vector* truth = nullptr) {
  if (n < 1 || p < 1) throw std::invalid_argument("synth_logistic: n and p must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution active(density);
  std::uniform_real_distribution<double> unif;
  Vector w(p + 1);
  for (Index j = 0; j <= p; ++j) w(j) = normal(rng);
  ClassificationData data{Matrix::Zero(n, p), Vector::Zero(n)};
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) data.features(i, j) = active(rng) ? 1.0 : 0.0;
    const double a = w(0) + data.features.row(i).dot(w.tail(p));
    // P(y = 1) = (1 + exp(a))^-1
    data.labels(i) = unif(rng) < 1.0 / (1.0 + std::exp(a)) ? 1.0 : 0.0;
  }
  if (truth) *truth = w;
  return data;
}

/// Poisson counts from the hierarchical model with moderate group effects.
inline FriskData synth_frisk(Index ethnicities, Index precincts, std::uint64_t seed) {
  if (ethnicities < 1 || precincts < 1) throw std::invalid_argument("synth_frisk: need at least one cell");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> arrests(5, 150);
  const double mu = -0.5;
  Vector alpha(ethnicities), beta(precincts);
  for (Index e = 0; e < ethnicities; ++e) alpha(e) = 0.4 * normal(rng);
  for (Index p = 0; p < precincts; ++p) beta(p) = 0.6 * normal(rng);
  FriskData data{Eigen::MatrixXi(ethnicities, precincts), Eigen::MatrixXi(ethnicities, precincts)};
  for (Index e = 0; e < ethnicities; ++e) {
    for (Index p = 0; p < precincts; ++p) {
      data.arrests(e, p) = arrests(rng);
      const double lambda = std::exp(mu + alpha(e) + beta(p) + std::log(data.arrests(e, p)));
      data.stops(e, p) = std::poisson_distribution<int>(lambda)(rng);
    }
  }
  return data;
}

/// Standardized features; targets from a small random ReLU network plus
/// unit-scale noise, centred near 5.6 like wine quality scores.
inline RegressionData synth_regression(Index n, Index p, std::uint64_t seed) {
  if (n < 1 || p < 1) throw std::invalid_argument("synth_regression: n and p must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RegressionData data{Matrix(n, p), Vector(n)};
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) data.features(i, j) = normal(rng);
  const Index hidden = 5;
  Matrix w1(hidden, p);
  Vector w2(hidden);
  for (Index k = 0; k < hidden; ++k) {
    for (Index j = 0; j < p; ++j) w1(k, j) = normal(rng) / std::sqrt(static_cast<double>(p));
    w2(k) = normal(rng);
  }
  for (Index i = 0; i < n; ++i) {
    const Vector h = (w1 * data.features.row(i).transpose()).cwiseMax(0.0);
    data.targets(i) = 5.6 + w2.dot(h) + 0.5 * normal(rng);
  }
  return data;
}

}  // namespace quadcv

#endif  // QUADCV_DATASETS_HPP
