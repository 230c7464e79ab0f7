#pragma once

// Standalone SVG renderers for run summaries and skew sweeps.

#include <string>
#include <vector>

#include "agnofed/error.hpp"

namespace agnofed {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // -1 when absent.
  int column(const std::string& name) const;
};

// Plain comma-separated values with a header line; no quoting.
CsvTable parse_csv(const std::string& text);

class MissingColumnsError : public ValidationError {
 public:
  explicit MissingColumnsError(std::vector<std::string> missing);
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

inline constexpr double kLogPlotFloor = 1e-12;

// Needs columns rule, round, objective_aggregate. One polyline per rule,
// averaged over seeds, on a log10 vertical axis floored at kLogPlotFloor.
std::string render_loss_curves_svg(const CsvTable& table);

// Needs columns skew, difference. One marker per row plus a dashed zero line.
std::string render_skew_scatter_svg(const CsvTable& table);

}  // namespace agnofed
