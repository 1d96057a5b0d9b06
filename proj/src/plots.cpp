#include "cwb/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace cwb {

std::string xml_escape(const std::string& s) {
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

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string open_svg(double w, double h, const std::string& title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px(w) << "\" height=\"" << px(h)
    << "\" viewBox=\"0 0 " << px(w) << " " << px(h) << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << px(w / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  return o.str();
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", double rotate = 0) {
  std::ostringstream o;
  o << "<text x=\"" << px(x) << "\" y=\"" << px(y) << "\" text-anchor=\"" << anchor << "\"";
  if (rotate != 0) o << " transform=\"rotate(" << px(rotate) << " " << px(x) << " " << px(y) << ")\"";
  o << ">" << xml_escape(s) << "</text>\n";
  return o.str();
}

// Blue for negative, red for positive, white at zero.
std::string signed_color(double v, double scale) {
  const double t = scale > 0 ? std::clamp(v / scale, -1.0, 1.0) : 0.0;
  const int fade = static_cast<int>(std::lround(255 * (1 - std::abs(t))));
  char buf[16];
  if (t < 0) {
    std::snprintf(buf, sizeof buf, "#%02x%02xff", fade, fade);
  } else {
    std::snprintf(buf, sizeof buf, "#ff%02x%02x", fade, fade);
  }
  return buf;
}

struct Range {
  double lo = 0, hi = 1;
  double map(double v, double a, double b) const { return hi == lo ? (a + b) / 2 : a + (v - lo) / (hi - lo) * (b - a); }
};

Range range_of(const std::vector<double>& v, bool include_zero) {
  Range r;
  if (v.empty()) return r;
  r.lo = *std::min_element(v.begin(), v.end());
  r.hi = *std::max_element(v.begin(), v.end());
  if (include_zero) {
    r.lo = std::min(r.lo, 0.0);
    r.hi = std::max(r.hi, 0.0);
  }
  if (r.hi == r.lo) {
    r.lo -= 1;
    r.hi += 1;
  }
  return r;
}

}  // namespace

std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::string& title,
                        const std::string& row_label, const std::string& col_label) {
  const size_t rows = m.size();
  size_t cols = 0;
  for (const auto& r : m) cols = std::max(cols, r.size());
  const double cell = 28, left = 50, top = 40;
  const double w = left + cols * cell + 90, h = top + rows * cell + 40;
  double scale = 0;
  for (const auto& r : m) {
    for (double v : r) scale = std::max(scale, std::abs(v));
  }
  std::ostringstream o;
  o << open_svg(w, h, title);
  for (size_t i = 0; i < rows; ++i) {
    o << text(left - 6, top + i * cell + cell / 2 + 4, std::to_string(i), "end");
    for (size_t j = 0; j < m[i].size(); ++j) {
      o << "<rect x=\"" << px(left + j * cell) << "\" y=\"" << px(top + i * cell) << "\" width=\"" << px(cell)
        << "\" height=\"" << px(cell) << "\" fill=\"" << signed_color(m[i][j], scale)
        << "\" stroke=\"#ddd\"><title>" << i << "." << j << ": " << num(m[i][j]) << "</title></rect>\n";
    }
  }
  for (size_t j = 0; j < cols; ++j) o << text(left + j * cell + cell / 2, top + rows * cell + 14, std::to_string(j));
  o << text(left + cols * cell / 2, top + rows * cell + 32, col_label);
  o << text(14, top + rows * cell / 2, row_label, "middle", -90);
  // Color bar.
  const double bx = left + cols * cell + 20, bh = rows * cell;
  for (int k = 0; k < 20; ++k) {
    const double v = scale * (1 - 2.0 * k / 19);
    o << "<rect x=\"" << px(bx) << "\" y=\"" << px(top + k * bh / 20) << "\" width=\"14\" height=\"" << px(bh / 20 + 0.5)
      << "\" fill=\"" << signed_color(v, scale) << "\"/>\n";
  }
  o << text(bx + 18, top + 8, num(scale), "start") << text(bx + 18, top + bh, num(-scale), "start");
  o << "</svg>\n";
  return o.str();
}

std::string scatter_svg(const std::vector<XY>& points, const std::string& title, const std::string& x_label,
                        const std::string& y_label) {
  const double w = 420, h = 340, l = 60, r = 20, t = 36, b = 46;
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  const Range rx = range_of(xs, false), ry = range_of(ys, true);
  std::ostringstream o;
  o << open_svg(w, h, title);
  o << "<rect x=\"" << px(l) << "\" y=\"" << px(t) << "\" width=\"" << px(w - l - r) << "\" height=\""
    << px(h - t - b) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  const double y0 = ry.map(0, h - b, t);
  o << "<line x1=\"" << px(l) << "\" x2=\"" << px(w - r) << "\" y1=\"" << px(y0) << "\" y2=\"" << px(y0)
    << "\" stroke=\"#bbb\"/>\n";
  for (const auto& p : points) {
    o << "<circle cx=\"" << px(rx.map(p.x, l, w - r)) << "\" cy=\"" << px(ry.map(p.y, h - b, t))
      << "\" r=\"2.5\" fill=\"#2b6cb0\" fill-opacity=\"0.6\"/>\n";
  }
  o << text(l, h - b + 14, num(rx.lo), "start") << text(w - r, h - b + 14, num(rx.hi), "end");
  o << text(l - 4, h - b, num(ry.lo), "end") << text(l - 4, t + 8, num(ry.hi), "end");
  o << text((l + w - r) / 2, h - 10, x_label) << text(14, (t + h - b) / 2, y_label, "middle", -90);
  o << "</svg>\n";
  return o.str();
}

std::string bar_svg(const std::vector<Bar>& bars, const std::string& title, const std::string& y_label) {
  const double slot = 44, l = 60, r = 20, t = 36, b = 70;
  const double w = l + r + std::max<size_t>(bars.size(), 1) * slot, h = 320;
  std::vector<double> vals;
  for (const auto& bar : bars) {
    vals.push_back(bar.value + bar.error);
    vals.push_back(bar.value - bar.error);
  }
  const Range ry = range_of(vals, true);
  std::ostringstream o;
  o << open_svg(w, h, title);
  const double y0 = ry.map(0, h - b, t);
  for (size_t i = 0; i < bars.size(); ++i) {
    const double x = l + i * slot + 8, y = ry.map(bars[i].value, h - b, t);
    o << "<rect x=\"" << px(x) << "\" y=\"" << px(std::min(y, y0)) << "\" width=\"" << px(slot - 16)
      << "\" height=\"" << px(std::abs(y - y0)) << "\" fill=\"" << (bars[i].value < 0 ? "#3182ce" : "#e53e3e")
      << "\"><title>" << xml_escape(bars[i].label) << ": " << num(bars[i].value) << "</title></rect>\n";
    if (bars[i].error > 0) {
      const double cx = x + (slot - 16) / 2;
      o << "<line x1=\"" << px(cx) << "\" x2=\"" << px(cx) << "\" y1=\""
        << px(ry.map(bars[i].value - bars[i].error, h - b, t)) << "\" y2=\""
        << px(ry.map(bars[i].value + bars[i].error, h - b, t)) << "\" stroke=\"black\"/>\n";
    }
    o << text(x + (slot - 16) / 2, h - b + 12, bars[i].label, "end", -45);
  }
  o << "<line x1=\"" << px(l) << "\" x2=\"" << px(w - r) << "\" y1=\"" << px(y0) << "\" y2=\"" << px(y0)
    << "\" stroke=\"#444\"/>\n";
  o << text(l - 4, h - b, num(ry.lo), "end") << text(l - 4, t + 8, num(ry.hi), "end");
  o << text(14, (t + h - b) / 2, y_label, "middle", -90);
  o << "</svg>\n";
  return o.str();
}

std::string histogram_svg(const std::vector<double>& values, int bins, const std::string& title,
                          const std::string& x_label) {
  bins = std::max(bins, 1);
  const Range rx = range_of(values, false);
  std::vector<int> counts(bins, 0);
  for (double v : values) {
    const int k = std::clamp(static_cast<int>((v - rx.lo) / (rx.hi - rx.lo) * bins), 0, bins - 1);
    ++counts[k];
  }
  const double w = 420, h = 300, l = 50, r = 20, t = 36, b = 46;
  const int peak = std::max(1, *std::max_element(counts.begin(), counts.end()));
  std::ostringstream o;
  o << open_svg(w, h, title);
  const double bw = (w - l - r) / bins;
  for (int k = 0; k < bins; ++k) {
    const double bh = (h - t - b) * counts[k] / peak;
    o << "<rect x=\"" << px(l + k * bw) << "\" y=\"" << px(h - b - bh) << "\" width=\"" << px(bw - 1)
      << "\" height=\"" << px(bh) << "\" fill=\"#4a5568\"/>\n";
  }
  o << text(l, h - b + 14, num(rx.lo), "start") << text(w - r, h - b + 14, num(rx.hi), "end");
  o << text(l - 4, t + 8, std::to_string(peak), "end") << text((l + w - r) / 2, h - 10, x_label);
  o << "</svg>\n";
  return o.str();
}

}  // namespace cwb
