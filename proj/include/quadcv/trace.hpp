#ifndef QUADCV_TRACE_HPP
#define QUADCV_TRACE_HPP

// CSV schemas written by the experiment drivers. Headers are fixed; doubles
// are written in shortest round-trip form so repeated runs compare bytewise.

#include "quadcv/datasets.hpp"
#include "quadcv/error.hpp"

#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace quadcv {

inline constexpr const char* kTraceHeader =
    "iteration,elapsed_ms,elbo_estimate,var_total,var_mean_block,var_scale_block,gamma";
inline constexpr const char* kSweepHeader = "sigma,estimator,var_total,var_mean_block,var_scale_block";

struct TraceRow {
  long iteration = 0;
  long long elapsed_ms = 0;
  double elbo_estimate = 0.0;
  double var_total = 0.0;
  double var_mean_block = 0.0;
  double var_scale_block = 0.0;
  double gamma = 0.0;

  bool operator==(const TraceRow&) const = default;
};

struct SweepRow {
  double sigma = 0.0;
  std::string estimator;
  double var_total = 0.0;
  double var_mean_block = 0.0;
  double var_scale_block = 0.0;

  bool operator==(const SweepRow&) const = default;
};

inline void write_trace_header(std::ostream& out) { out << kTraceHeader << '\n'; }

inline void write_trace_row(std::ostream& out, const TraceRow& r) {
  using detail::format_double;
  out << r.iteration << ',' << r.elapsed_ms << ',' << format_double(r.elbo_estimate) << ','
      << format_double(r.var_total) << ',' << format_double(r.var_mean_block) << ','
      << format_double(r.var_scale_block) << ',' << format_double(r.gamma) << '\n';
}

inline void write_sweep(std::ostream& out, const std::vector<SweepRow>& rows) {
  using detail::format_double;
  out << kSweepHeader << '\n';
  for (const auto& r : rows)
    out << format_double(r.sigma) << ',' << r.estimator << ',' << format_double(r.var_total) << ','
        << format_double(r.var_mean_block) << ',' << format_double(r.var_scale_block) << '\n';
}

namespace detail {

inline std::vector<std::string_view> read_record(const std::string& line, std::size_t fields, const std::string& source,
                                                 std::size_t lineno) {
  auto cells = split(trim(line), ',');
  if (cells.size() != fields)
    throw ParseError(source, lineno, "expected " + std::to_string(fields) + " fields, got " + std::to_string(cells.size()));
  return cells;
}

inline double field_double(std::string_view s, const std::string& source, std::size_t lineno) {
  const auto v = parse_double(s);
  if (!v) throw ParseError(source, lineno, "bad number '" + std::string(s) + "'");
  return *v;
}

inline long long field_int(std::string_view s, const std::string& source, std::size_t lineno) {
  const auto v = parse_int(s);
  if (!v) throw ParseError(source, lineno, "bad integer '" + std::string(s) + "'");
  return *v;
}

inline void expect_header(std::istream& in, const char* header, const std::string& source) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != header) throw ParseError(source, 1, std::string("expected header '") + header + "'");
}

}  // namespace detail

inline std::vector<TraceRow> read_trace(std::istream& in, const std::string& source = "<trace>") {
  detail::expect_header(in, kTraceHeader, source);
  std::vector<TraceRow> rows;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::read_record(line, 7, source, lineno);
    TraceRow r;
    r.iteration = static_cast<long>(detail::field_int(c[0], source, lineno));
    r.elapsed_ms = detail::field_int(c[1], source, lineno);
    r.elbo_estimate = detail::field_double(c[2], source, lineno);
    r.var_total = detail::field_double(c[3], source, lineno);
    r.var_mean_block = detail::field_double(c[4], source, lineno);
    r.var_scale_block = detail::field_double(c[5], source, lineno);
    r.gamma = detail::field_double(c[6], source, lineno);
    if (!rows.empty() && r.iteration <= rows.back().iteration)
      throw ParseError(source, lineno, "iteration not strictly increasing");
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<SweepRow> read_sweep(std::istream& in, const std::string& source = "<sweep>") {
  detail::expect_header(in, kSweepHeader, source);
  std::vector<SweepRow> rows;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::read_record(line, 5, source, lineno);
    rows.push_back({detail::field_double(c[0], source, lineno), std::string(c[1]),
                    detail::field_double(c[2], source, lineno), detail::field_double(c[3], source, lineno),
                    detail::field_double(c[4], source, lineno)});
  }
  return rows;
}

}  // namespace quadcv

#endif  // QUADCV_TRACE_HPP
