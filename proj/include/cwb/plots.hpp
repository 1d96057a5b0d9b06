#pragma once

#include <string>
#include <vector>

namespace cwb {

// Standalone SVG documents; no external viewer or font dependencies.

// Signed heatmap with a color scale symmetric around zero. Rows are layers,
// columns heads.
std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::string& title,
                        const std::string& row_label = "layer", const std::string& col_label = "head");

struct XY {
  double x = 0.0;
  double y = 0.0;
};
std::string scatter_svg(const std::vector<XY>& points, const std::string& title, const std::string& x_label,
                        const std::string& y_label);

struct Bar {
  std::string label;
  double value = 0.0;
  double error = 0.0;  // half-height of the error bar; 0 draws none
};
std::string bar_svg(const std::vector<Bar>& bars, const std::string& title, const std::string& y_label);

std::string histogram_svg(const std::vector<double>& values, int bins, const std::string& title,
                          const std::string& x_label);

// Escapes &, <, >, " for SVG text.
std::string xml_escape(const std::string& s);

}  // namespace cwb
