#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "puredesk/shift.hpp"

namespace puredesk {

// CSV conventions: comma separator, one header row, LF line endings, '.'
// decimal point. Doubles are written with %.17g so values round-trip exactly.

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_lambda_csv(const std::string& path, const ShiftScales& scales) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "t,lambda\n";
  for (int t = 1; t <= scales.T(); ++t) f << t << "," << format_double(scales.at(t)) << "\n";
}

inline ShiftScales read_lambda_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "t,lambda")
    throw std::runtime_error(path + ": expected header 't,lambda'");
  ShiftScales out;
  out.provenance = ShiftProvenance::Fixed;
  int expect_t = 1;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error(path + ": malformed row: " + line);
    const int t = std::stoi(line.substr(0, comma));
    if (t != expect_t)
      throw std::runtime_error(path + ": rows must be consecutive timesteps from 1");
    out.lambda.push_back(std::stod(line.substr(comma + 1)));
    ++expect_t;
  }
  if (out.lambda.empty()) throw std::runtime_error(path + ": no rows");
  return out;
}

inline void write_trace_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i)
    f << (i + 1) << "," << format_double(losses[i]) << "\n";
}

/// One row per named value; generic key/value report.
inline void write_report_csv(const std::string& path,
                             const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "key,value\n";
  for (const auto& [k, v] : rows) f << k << "," << v << "\n";
}

}  // namespace puredesk
