#pragma once
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "attempt/core/error.hpp"

namespace attempt {

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace detail

// Per-instance attention rows: instance_id, task_id, then one weight per
// bank entry (target last unless absent).
inline void write_instance_attention_csv(
    const std::string& path, const std::vector<std::string>& task_ids,
    const std::vector<std::vector<double>>& attention,
    const std::vector<std::string>& column_names) {
  if (task_ids.size() != attention.size())
    throw DimensionError("attention csv: one task id per instance required");
  std::ofstream out(path);
  if (!out) throw IoError("attention csv: cannot open '" + path + "'");
  out << "instance_id,task_id";
  for (const auto& c : column_names) out << "," << detail::csv_quote(c);
  out << "\n";
  for (std::size_t i = 0; i < attention.size(); ++i) {
    if (attention[i].size() != column_names.size())
      throw DimensionError("attention csv: row " + std::to_string(i) +
                           " has " + std::to_string(attention[i].size()) +
                           " weights, expected " + std::to_string(column_names.size()));
    out << i << "," << detail::csv_quote(task_ids[i]);
    for (double v : attention[i]) out << "," << detail::fmt(v);
    out << "\n";
  }
}

// Task-by-prompt matrix of mean attention weights. Each row must be a
// probability vector.
inline void write_mean_attention_csv(const std::string& path,
                                     const std::vector<std::string>& row_names,
                                     const std::vector<std::string>& column_names,
                                     const std::vector<std::vector<double>>& matrix,
                                     double tol = 1e-6) {
  if (row_names.size() != matrix.size())
    throw DimensionError("mean attention csv: one name per row required");
  std::ofstream out(path);
  if (!out) throw IoError("mean attention csv: cannot open '" + path + "'");
  out << "task";
  for (const auto& c : column_names) out << "," << detail::csv_quote(c);
  out << "\n";
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    if (matrix[i].size() != column_names.size())
      throw DimensionError("mean attention csv: row " + std::to_string(i) +
                           " width mismatch");
    double s = 0;
    for (double v : matrix[i]) s += v;
    if (std::abs(s - 1.0) > tol)
      throw NumericError("mean attention csv: row '" + row_names[i] +
                         "' sums to " + detail::fmt(s) + ", not 1");
    out << detail::csv_quote(row_names[i]);
    for (double v : matrix[i]) out << "," << detail::fmt(v);
    out << "\n";
  }
}

// Grayscale heatmap of the mean-attention matrix: one <rect> per cell, fill
// rgb(k,k,k) with k decreasing monotonically in the weight (heavier
// attention draws darker).
inline void write_attention_svg(const std::string& path,
                                const std::vector<std::string>& row_names,
                                const std::vector<std::string>& column_names,
                                const std::vector<std::vector<double>>& matrix) {
  if (row_names.size() != matrix.size())
    throw DimensionError("attention svg: one name per row required");
  const int cell = 40, left = 120, top = 60;
  const std::size_t rows = matrix.size(), cols = column_names.size();
  std::ofstream out(path);
  if (!out) throw IoError("attention svg: cannot open '" + path + "'");
  const int width = left + static_cast<int>(cols) * cell + 20;
  const int height = top + static_cast<int>(rows) * cell + 20;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  for (std::size_t j = 0; j < cols; ++j)
    out << "  <text x=\"" << left + static_cast<int>(j) * cell + cell / 2
        << "\" y=\"" << top - 10
        << "\" font-size=\"11\" text-anchor=\"middle\">" << column_names[j]
        << "</text>\n";
  for (std::size_t i = 0; i < rows; ++i) {
    if (matrix[i].size() != cols)
      throw DimensionError("attention svg: row " + std::to_string(i) +
                           " width mismatch");
    out << "  <text x=\"" << left - 8 << "\" y=\""
        << top + static_cast<int>(i) * cell + cell / 2 + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << row_names[i]
        << "</text>\n";
    for (std::size_t j = 0; j < cols; ++j) {
      const double w = std::clamp(matrix[i][j], 0.0, 1.0);
      const int k = static_cast<int>(std::lround(255.0 * (1.0 - w)));
      out << "  <rect x=\"" << left + static_cast<int>(j) * cell << "\" y=\""
          << top + static_cast<int>(i) * cell << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << k << "," << k << ","
          << k << ")\" stroke=\"white\"/>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace attempt
