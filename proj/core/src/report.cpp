#include "kvguard/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace kvguard {

std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::trunc), n_cols_(header.size()) {
    if (!out_) throw std::runtime_error("csv: cannot open " + path);
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) out_ << ',';
        out_ << header[i];
    }
    out_ << '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    if (cells.size() != n_cols_) throw std::logic_error("csv: wrong cell count for row");
    for (size_t i = 0; i < cells.size(); ++i) {
        if (i) out_ << ',';
        out_ << cells[i];
    }
    out_ << '\n';
    ++rows_;
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("json: cannot open " + path);
    f << j.dump(2) << "\n";
}

namespace {

// chart box in a 720x480 canvas
constexpr double kW = 720, kH = 480;
constexpr double kLeft = 70, kRight = 690, kTop = 50, kBottom = 420;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series) {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series) {
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (first) {
                xmin = xmax = s.x[i];
                ymin = ymax = s.y[i];
                first = false;
            }
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * (kRight - kLeft); };
    auto py = [&](double y) { return kBottom - (y - ymin) / (ymax - ymin) * (kBottom - kTop); };

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("svg: cannot open " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << kW / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">"
      << esc(title) << "</text>\n";

    // axes with 5 ticks each
    f << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kRight << "\" y2=\""
      << kBottom << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
      << kBottom << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 5; ++t) {
        double fx = xmin + (xmax - xmin) * t / 5.0;
        double fy = ymin + (ymax - ymin) * t / 5.0;
        f << "<line x1=\"" << px(fx) << "\" y1=\"" << kBottom << "\" x2=\"" << px(fx) << "\" y2=\""
          << kBottom + 5 << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << px(fx) << "\" y=\"" << kBottom + 20
          << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
          << fmt_double(fx) << "</text>\n";
        f << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << py(fy) << "\" x2=\"" << kLeft << "\" y2=\""
          << py(fy) << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(fy) + 4
          << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt_double(fy)
          << "</text>\n";
    }
    f << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kH - 14
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" << esc(x_label)
      << "</text>\n";
    f << "<text x=\"18\" y=\"" << (kTop + kBottom) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 18 "
      << (kTop + kBottom) / 2 << ")\">" << esc(y_label) << "</text>\n";

    size_t ci = 0;
    double legend_y = kTop + 6;
    for (const auto& s : series) {
        const char* color = kPalette[ci % (sizeof(kPalette) / sizeof(kPalette[0]))];
        f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i) {
            f << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        }
        f << "\"/>\n";
        f << "<text x=\"" << kRight - 120 << "\" y=\"" << legend_y
          << "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"" << color << "\">"
          << esc(s.label) << "</text>\n";
        legend_y += 14;
        ++ci;
    }
    f << "</svg>\n";
}

}  // namespace kvguard
