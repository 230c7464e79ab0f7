#include "agnofed/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace agnofed {

namespace {

constexpr double kWidth = 640;
constexpr double kHeight = 420;
constexpr double kLeft = 80;
constexpr double kRight = 150;
constexpr double kTop = 30;
constexpr double kBottom = 55;

const char* const kPalette[] = {"#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

void require_columns(const CsvTable& table, const std::vector<std::string>& names) {
  std::vector<std::string> missing;
  for (const auto& n : names) {
    if (table.column(n) < 0) missing.push_back(n);
  }
  if (!missing.empty()) throw MissingColumnsError(std::move(missing));
  if (table.rows.empty()) throw ValidationError("CSV has no data rows");
}

double cell_number(const CsvTable& table, std::size_t row, int col) {
  const auto& cells = table.rows[row];
  if (col < 0 || static_cast<std::size_t>(col) >= cells.size()) throw ValidationError("CSV row is too short");
  const std::string& s = cells[static_cast<std::size_t>(col)];
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("CSV cell \"" + s + "\" is not a number");
  }
}

// Linear map from data range [lo, hi] to pixel range [a, b].
struct Scale {
  double lo, hi, a, b;
  double operator()(double v) const { return hi == lo ? 0.5 * (a + b) : a + (v - lo) / (hi - lo) * (b - a); }
};

std::vector<double> nice_ticks(double lo, double hi, int target) {
  if (hi <= lo) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (raw <= step) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * step; t += step) out.push_back(std::abs(t) < 1e-12 * step ? 0.0 : t);
  return out;
}

class SvgCanvas {
 public:
  SvgCanvas() {
    out_ << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
         << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
         << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& attrs) {
    out_ << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2) << "\" y2=\"" << fmt(y2)
         << "\" " << attrs << "/>\n";
  }

  void text(double x, double y, const std::string& s, const std::string& attrs = "") {
    out_ << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" " << attrs << '>' << escape_xml(s) << "</text>\n";
  }

  void raw(const std::string& s) { out_ << s; }

  void frame(const std::string& xlabel, const std::string& ylabel) {
    const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    out_ << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y1) << "\" width=\"" << fmt(x1 - x0) << "\" height=\""
         << fmt(y0 - y1) << "\" fill=\"none\" stroke=\"black\"/>\n";
    text(0.5 * (x0 + x1), kHeight - 12, xlabel, "text-anchor=\"middle\"");
    out_ << "<text x=\"18\" y=\"" << fmt(0.5 * (y0 + y1)) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
         << fmt(0.5 * (y0 + y1)) << ")\">" << escape_xml(ylabel) << "</text>\n";
  }

  std::string finish() {
    out_ << "</svg>\n";
    return out_.str();
  }

 private:
  std::ostringstream out_;
};

}  // namespace

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable parse_csv(const std::string& text) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream row(line);
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  return table;
}

MissingColumnsError::MissingColumnsError(std::vector<std::string> missing)
    : ValidationError([&] {
        std::string msg = "missing CSV column(s):";
        for (const auto& m : missing) msg += " " + m;
        return msg;
      }()),
      missing_(std::move(missing)) {}

std::string render_loss_curves_svg(const CsvTable& table) {
  require_columns(table, {"rule", "round", "objective_aggregate"});
  const int rule_col = table.column("rule");
  const int round_col = table.column("round");
  const int value_col = table.column("objective_aggregate");

  // rule -> round -> (sum, count)
  std::map<std::string, std::map<double, std::pair<double, int>>> series;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& cells = table.rows[r];
    if (static_cast<std::size_t>(rule_col) >= cells.size()) throw ValidationError("CSV row is too short");
    const double round = cell_number(table, r, round_col);
    const double value = std::max(cell_number(table, r, value_col), kLogPlotFloor);
    auto& acc = series[cells[static_cast<std::size_t>(rule_col)]][round];
    acc.first += value;
    acc.second += 1;
  }

  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& [rule, points] : series) {
    for (const auto& [x, acc] : points) {
      const double y = std::log10(std::max(acc.first / acc.second, kLogPlotFloor));
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  ymin = std::floor(ymin);
  ymax = std::ceil(ymax);
  if (ymax == ymin) ymax = ymin + 1;
  const Scale sx{xmin, xmax, kLeft, kWidth - kRight};
  const Scale sy{ymin, ymax, kHeight - kBottom, kTop};

  SvgCanvas svg;
  svg.frame("global round", "objective (log scale)");
  for (double t : nice_ticks(xmin, xmax, 6)) {
    svg.line(sx(t), kHeight - kBottom, sx(t), kHeight - kBottom + 5, "stroke=\"black\"");
    svg.text(sx(t), kHeight - kBottom + 18, tick_label(t), "text-anchor=\"middle\"");
  }
  const int decade_step = std::max(1, static_cast<int>((ymax - ymin) / 8));
  for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); e += decade_step) {
    svg.line(kLeft - 5, sy(e), kLeft, sy(e), "stroke=\"black\"");
    svg.text(kLeft - 8, sy(e) + 4, "1e" + std::to_string(e), "text-anchor=\"end\"");
  }

  std::size_t color = 0;
  double legend_y = kTop + 10;
  for (const auto& [rule, points] : series) {
    const char* stroke = kPalette[color++ % std::size(kPalette)];
    std::ostringstream pts;
    for (const auto& [x, acc] : points) {
      pts << fmt(sx(x)) << ',' << fmt(sy(std::log10(std::max(acc.first / acc.second, kLogPlotFloor)))) << ' ';
    }
    svg.raw("<polyline class=\"series\" fill=\"none\" stroke=\"" + std::string(stroke) +
            "\" stroke-width=\"1.5\" points=\"" + pts.str() + "\"/>\n");
    svg.raw("<g class=\"legend\">");
    svg.line(kWidth - kRight + 12, legend_y, kWidth - kRight + 36, legend_y,
             "stroke=\"" + std::string(stroke) + "\" stroke-width=\"2\"");
    svg.text(kWidth - kRight + 42, legend_y + 4, rule);
    svg.raw("</g>\n");
    legend_y += 18;
  }
  return svg.finish();
}

std::string render_skew_scatter_svg(const CsvTable& table) {
  require_columns(table, {"skew", "difference"});
  const int skew_col = table.column("skew");
  const int diff_col = table.column("difference");
  std::vector<std::pair<double, double>> points;
  points.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    points.emplace_back(cell_number(table, r, skew_col), cell_number(table, r, diff_col));
  }
  double xmin = 0.0, xmax = -INFINITY, ymin = 0.0, ymax = 0.0;
  for (const auto& [x, y] : points) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  const Scale sx{xmin, xmax * 1.05, kLeft, kWidth - kRight};
  const Scale sy{ymin, ymax, kHeight - kBottom, kTop};

  SvgCanvas svg;
  svg.frame("participation skew ||p - 1/N||_1", "final loss difference (weighted - agnostic)");
  for (double t : nice_ticks(sx.lo, sx.hi, 6)) {
    svg.line(sx(t), kHeight - kBottom, sx(t), kHeight - kBottom + 5, "stroke=\"black\"");
    svg.text(sx(t), kHeight - kBottom + 18, tick_label(t), "text-anchor=\"middle\"");
  }
  for (double t : nice_ticks(ymin, ymax, 6)) {
    svg.line(kLeft - 5, sy(t), kLeft, sy(t), "stroke=\"black\"");
    svg.text(kLeft - 8, sy(t) + 4, tick_label(t), "text-anchor=\"end\"");
  }
  svg.line(kLeft, sy(0.0), kWidth - kRight, sy(0.0), "class=\"zero\" stroke=\"gray\" stroke-dasharray=\"5,4\"");
  for (const auto& [x, y] : points) {
    svg.raw("<circle class=\"point\" cx=\"" + fmt(sx(x)) + "\" cy=\"" + fmt(sy(y)) +
            "\" r=\"4\" fill=\"#2ca02c\" fill-opacity=\"0.75\" stroke=\"black\" stroke-width=\"0.5\"/>\n");
  }
  return svg.finish();
}

}  // namespace agnofed
