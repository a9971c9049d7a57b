#ifndef DRM_CSV_HPP
#define DRM_CSV_HPP

// Dataset ingestion from and export to delimited text with a header row.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "drm/dataset.hpp"
#include "drm/error.hpp"

namespace drm {

struct ColumnMapping {
  std::string outcome = "y";
  std::string treatment = "a";
  std::vector<std::string> covariates;
  /// Treatment labels in level order. Empty: first-appearance order.
  std::vector<std::string> levels;
};

inline nlohmann::json to_json(const ColumnMapping& m) {
  return {{"outcome", m.outcome}, {"treatment", m.treatment}, {"covariates", m.covariates}, {"levels", m.levels}};
}

inline ColumnMapping mapping_from_json(const nlohmann::json& j) {
  ColumnMapping m;
  try {
    m.outcome = j.value("outcome", m.outcome);
    m.treatment = j.value("treatment", m.treatment);
    if (j.contains("covariates")) m.covariates = j["covariates"].get<std::vector<std::string>>();
    if (j.contains("levels")) m.levels = j["levels"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_input, std::string("malformed column mapping: ") + e.what());
  }
  return m;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Splits one record; double quotes group a field and "" escapes a quote.
inline std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* b = s.data() + (s[0] == '+' ? 1 : 0);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(b, s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

struct IngestResult {
  Dataset data;
  std::vector<std::string> covariates;
};

inline IngestResult ingest_csv(std::istream& in, const ColumnMapping& mapping, const std::string& source = "input") {
  std::string line;
  int line_no = 0;
  // Skip leading comment lines.
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty() && line[0] != '#') break;
  }
  if (detail::trim(line).empty()) fail(ErrorCode::parse_error, source + ": missing header row");
  const auto header = detail::split_record(line);
  auto column = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<int>(c);
    fail(ErrorCode::parse_error, source + ": missing column '" + name + "'");
  };
  const int ycol = column(mapping.outcome);
  const int acol = column(mapping.treatment);
  std::vector<std::string> covs = mapping.covariates;
  if (covs.empty())
    for (const auto& h : header)
      if (h != mapping.outcome && h != mapping.treatment) covs.push_back(h);
  std::vector<int> xcols;
  for (const auto& c : covs) xcols.push_back(column(c));

  std::vector<std::string> labels = mapping.levels;
  const bool fixed_levels = !labels.empty();
  std::vector<double> ys, xs;
  std::vector<int> as;
  int row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_record(line);
    if (cells.size() != header.size())
      fail(ErrorCode::parse_error, source + ": row " + std::to_string(row) + " (line " + std::to_string(line_no) +
                                       ") has " + std::to_string(cells.size()) + " fields, header has " +
                                       std::to_string(header.size()));
    auto real = [&](int col) {
      const auto v = detail::parse_real(cells[static_cast<std::size_t>(col)]);
      if (!v)
        fail(ErrorCode::parse_error, source + ": row " + std::to_string(row) + ", column '" +
                                         header[static_cast<std::size_t>(col)] + "': cannot parse '" +
                                         cells[static_cast<std::size_t>(col)] + "' as a finite number");
      return *v;
    };
    ys.push_back(real(ycol));
    for (int c : xcols) xs.push_back(real(c));
    const std::string& label = cells[static_cast<std::size_t>(acol)];
    if (label.empty())
      fail(ErrorCode::parse_error, source + ": row " + std::to_string(row) + ", column '" + mapping.treatment +
                                       "': empty treatment label");
    int level = 0;
    for (std::size_t k = 0; k < labels.size(); ++k)
      if (labels[k] == label) level = static_cast<int>(k) + 1;
    if (level == 0) {
      if (fixed_levels)
        fail(ErrorCode::parse_error, source + ": row " + std::to_string(row) + ", column '" + mapping.treatment +
                                         "': unknown treatment label '" + label + "'");
      labels.push_back(label);
      level = static_cast<int>(labels.size());
    }
    as.push_back(level);
  }
  if (ys.empty()) fail(ErrorCode::parse_error, source + ": no data rows");
  const auto n = static_cast<Eigen::Index>(ys.size());
  const auto p = static_cast<Eigen::Index>(xcols.size());
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ys.data(), n);
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < p; ++c) x(i, c) = xs[static_cast<std::size_t>(i * p + c)];
  for (std::size_t k = 0; k < labels.size(); ++k)
    if (std::find(as.begin(), as.end(), static_cast<int>(k) + 1) == as.end())
      fail(ErrorCode::parse_error, source + ": treatment level '" + labels[k] + "' has no rows");
  const int levels = static_cast<int>(labels.size());
  return {Dataset(std::move(y), std::move(as), std::move(x), levels, std::move(labels)), std::move(covs)};
}

inline IngestResult ingest_csv(const std::string& path, const ColumnMapping& mapping) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::invalid_input, "cannot open " + path);
  return ingest_csv(in, mapping, path);
}

/// Columns y, a, then one column per covariate; reals printed with 17
/// significant digits so a re-read reproduces every value exactly.
inline void write_dataset_csv(std::ostream& out, const Dataset& data, std::vector<std::string> covariates = {}) {
  if (covariates.empty())
    for (int c = 0; c < data.p(); ++c) covariates.push_back("x" + std::to_string(c + 1));
  require(static_cast<int>(covariates.size()) == data.p(), "one name per covariate required");
  out << "y,a";
  for (const auto& c : covariates) out << ',' << c;
  out << '\n';
  char buf[32];
  for (int i = 0; i < data.n(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", data.y(i));
    out << buf << ',' << data.level_labels()[static_cast<std::size_t>(data.level(i) - 1)];
    for (int c = 0; c < data.p(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data.x()(i, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void write_dataset_csv(const std::string& path, const Dataset& data, std::vector<std::string> covariates = {}) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::invalid_input, "cannot write " + path);
  write_dataset_csv(out, data, std::move(covariates));
}

}  // namespace drm

#endif  // DRM_CSV_HPP
