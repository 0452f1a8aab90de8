#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace kvguard {

// Shortest round-trip-ish formatting ("%.9g"); NaN prints as "nan" so CSV
// output is byte-stable across platforms.
std::string fmt_double(double v);

// Minimal deterministic CSV emitter: fixed header, caller supplies cells in
// order, everything already stringified.
class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);
    size_t rows_written() const { return rows_; }

  private:
    std::ofstream out_;
    size_t n_cols_;
    size_t rows_ = 0;
};

void write_json(const std::string& path, const nlohmann::json& j);

// One polyline per series over a shared x grid; used for the cumulative
// corruption curves and per-bit rate charts. Pure static SVG.
struct ChartSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series);

}  // namespace kvguard
