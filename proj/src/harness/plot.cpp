// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "quad2lin/harness.hpp"

namespace q2l {

namespace {

constexpr double kWidth = 720, kHeight = 440;
constexpr double kLeft = 80, kRight = 170, kTop = 40, kBottom = 60;
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

struct Axis {
  double lo, hi;
  bool log;
  double map(double v, double a, double b) const {
    const double t = log ? (std::log10(v) - lo) / (hi - lo) : (v - lo) / (hi - lo);
    return a + t * (b - a);
  }
  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (double e = std::floor(lo); e <= std::ceil(hi) + 1e-9; e += 1)
        if (e >= lo - 1e-9 && e <= hi + 1e-9) out.push_back(std::pow(10.0, e));
      if (out.size() < 2) out = {std::pow(10.0, lo), std::pow(10.0, hi)};
      return out;
    }
    for (int i = 0; i <= 5; ++i) out.push_back(lo + (hi - lo) * i / 5.0);
    return out;
  }
};

Axis make_axis(std::vector<double> values, bool log) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values) {
    if (!std::isfinite(v) || (log && v <= 0)) continue;
    const double u = log ? std::log10(v) : v;
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) {
    const double pad = std::max(std::abs(lo) * 0.05, log ? 0.5 : 1.0);
    lo -= pad;
    hi += pad;
  }
  return {lo, hi, log};
}

}  // namespace

std::string render_svg(const std::vector<PlotSeries>& series, const PlotSpec& spec) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ContractError("render_svg: x and y lengths differ in '" + s.name + "'");
    xs.insert(xs.end(), s.x.begin(), s.x.end());
    ys.insert(ys.end(), s.y.begin(), s.y.end());
  }
  const Axis ax = make_axis(xs, spec.log_x), ay = make_axis(ys, spec.log_y);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(spec.title)
     << "</text>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (double t : ax.ticks()) {
    const double px = ax.map(t, x0, x1);
    os << "<line x1=\"" << px << "\" y1=\"" << y0 << "\" x2=\"" << px << "\" y2=\"" << y0 + 5
       << "\" stroke=\"black\"/><text x=\"" << px << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\">" << fmt(t)
       << "</text>\n";
  }
  for (double t : ay.ticks()) {
    const double py = ay.map(t, y0, y1);
    os << "<line x1=\"" << x0 - 5 << "\" y1=\"" << py << "\" x2=\"" << x0 << "\" y2=\"" << py
       << "\" stroke=\"black\"/><text x=\"" << x0 - 8 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">" << fmt(t)
       << "</text>\n";
  }
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 15 << "\" text-anchor=\"middle\">"
     << escape(spec.x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << (y0 + y1) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(spec.y_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    std::ostringstream pts;
    std::string marks;
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      if ((spec.log_x && s.x[k] <= 0) || (spec.log_y && s.y[k] <= 0)) continue;
      const double px = ax.map(s.x[k], x0, x1), py = ay.map(s.y[k], y0, y1);
      pts << px << ',' << py << ' ';
      marks += "<circle cx=\"" + fmt(px) + "\" cy=\"" + fmt(py) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n"
       << marks;
    const double ly = kTop + 10 + 20 * static_cast<double>(i);
    os << "<line x1=\"" << x1 + 15 << "\" y1=\"" << ly << "\" x2=\"" << x1 + 35 << "\" y2=\"" << ly << "\" stroke=\""
       << color << "\" stroke-width=\"2\"/><text x=\"" << x1 + 40 << "\" y=\"" << ly + 4 << "\">" << escape(s.name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string plot_csv_files(const std::vector<std::filesystem::path>& files, const std::string& y_column,
                           const std::string& title) {
  if (files.empty()) throw ConfigError("no input files", "files");
  std::vector<PlotSeries> series;
  std::string x_name;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw ConfigError("cannot open", f.string());
    const CsvTable t = read_csv(in);
    const bool bench = std::find(t.header.begin(), t.header.end(), "context_length") != t.header.end();
    x_name = bench ? "context_length" : "step";
    const std::size_t xc = t.column(x_name), yc = t.column(y_column);
    const auto status = std::find(t.header.begin(), t.header.end(), "status");
    PlotSeries s{f.stem().string(), {}, {}};
    for (const auto& row : t.rows) {
      if (status != t.header.end() && row[status - t.header.begin()] != "ok") continue;
      if (row[xc].empty() || row[yc].empty()) continue;
      s.x.push_back(std::stod(row[xc]));
      s.y.push_back(std::stod(row[yc]));
    }
    series.push_back(std::move(s));
  }
  PlotSpec spec{title.empty() ? y_column : title, x_name, y_column, x_name == "context_length", false};
  return render_svg(series, spec);
}

}  // namespace q2l
