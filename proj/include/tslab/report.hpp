#pragma once

// Run logs and their on-disk form: CSV tables, meta.json and optional SVG
// line plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/error.hpp"

namespace tslab {

/// Shortest round-trippable-enough text for a double; identical bits give
/// identical text.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

template <class T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != header.size()) throw Error("table row width does not match header");
    rows.push_back(std::move(row));
  }
  std::string csv() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }
};

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Plot {
  std::string file;  // relative to the plots directory
  std::string title, x_label, y_label;
  std::vector<Series> series;
};

struct RunLog {
  std::string config_hash;
  nlohmann::json config;
  nlohmann::json meta = nlohmann::json::object();
  Table summary;
  std::map<std::string, Table> tables;  // extra CSVs by relative path
  std::vector<Plot> plots;
  bool checks_passed = true;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
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

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

}  // namespace detail

/// One polyline per series on linear axes with labeled ticks and a legend.
/// Non-finite points are skipped.
inline std::string render_svg(const Plot& p) {
  const double W = 720, H = 440, left = 70, right = 180, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const Series& s : p.series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
        y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
      }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << detail::xml_escape(p.title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
    o << "<line x1=\"" << sx(xv) << "\" y1=\"" << top + ph << "\" x2=\"" << sx(xv) << "\" y2=\""
      << top + ph + 5 << "\" stroke=\"black\"/>";
    o << "<text x=\"" << sx(xv) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
      << fmt(xv) << "</text>\n";
    o << "<line x1=\"" << left - 5 << "\" y1=\"" << sy(yv) << "\" x2=\"" << left << "\" y2=\""
      << sy(yv) << "\" stroke=\"black\"/>";
    o << "<text x=\"" << left - 8 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">"
      << fmt(yv) << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">"
    << detail::xml_escape(p.x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << top + ph / 2 << ")\">" << detail::xml_escape(p.y_label) << "</text>\n";
  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const Series& s = p.series[k];
    o << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
    o << "\"/>\n";
    const double ly = top + 10 + 16 * static_cast<double>(k);
    o << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30
      << "\" y2=\"" << ly << "\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"2\"/>";
    o << "<text x=\"" << left + pw + 35 << "\" y=\"" << ly + 4 << "\">" << detail::xml_escape(s.name)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

namespace detail {
inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}
}  // namespace detail

/// Writes summary.csv, every extra table, meta.json and, when requested,
/// plots/*.svg under out_dir. Re-emitting the same log gives the same bytes
/// apart from the wall-clock field of meta.json.
inline void emit_reports(const RunLog& log, const std::string& out_dir, bool plots) {
  const std::filesystem::path root(out_dir);
  detail::write_file(root / "summary.csv", log.summary.csv());
  for (const auto& [name, table] : log.tables) detail::write_file(root / name, table.csv());
  nlohmann::json meta = log.meta;
  meta["config"] = log.config;
  meta["config_hash"] = log.config_hash;
  meta["checks_passed"] = log.checks_passed;
  meta["wall_seconds"] = log.wall_seconds;
  detail::write_file(root / "meta.json", meta.dump(2) + "\n");
  if (plots)
    for (const Plot& p : log.plots) detail::write_file(root / "plots" / p.file, render_svg(p));
}

}  // namespace tslab
