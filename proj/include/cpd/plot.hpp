// Copyright 2026 The cpd-toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cpd/error.hpp"

namespace cpd::plot {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

// Unquoted comma-separated values, as written by the toolkit.
inline Table read_csv(std::istream& in) {
  Table t;
  std::string line;
  const auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(in, line) || line.empty()) throw Error("plot: empty CSV");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.header.size())
      throw Error("plot: row has " + std::to_string(row.size()) + " cells, header has " +
                  std::to_string(t.header.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::optional<double> number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

enum class ChartKind { heatmap, lines };

// Heatmap exports carry bucket/label/mean columns; everything else is drawn
// as one line per numeric series against the first column.
inline ChartKind infer_kind(const Table& t) {
  if (t.column("bucket") && t.column("label") && t.column("mean")) return ChartKind::heatmap;
  return ChartKind::lines;
}

namespace detail {

inline std::string fmt(double v, const char* f = "%.3g") {
  char buf[32];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

// Diverging blue-white-red ramp on [-1, 1].
inline std::string diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  const auto mix = [](double a, double b, double s) { return static_cast<int>(std::lround(a + (b - a) * s)); };
  int r, g, b;
  if (t < 0) {
    r = mix(255, 33, -t); g = mix(255, 102, -t); b = mix(255, 172, -t);
  } else {
    r = mix(255, 178, t); g = mix(255, 24, t); b = mix(255, 43, t);
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace detail

inline void heatmap_svg(const Table& t, std::ostream& out, const std::string& title) {
  const std::size_t cb = *t.column("bucket"), cl = *t.column("label"), cm = *t.column("mean");
  std::vector<std::string> buckets, labels;
  for (const auto& r : t.rows) {
    if (std::find(buckets.begin(), buckets.end(), r[cb]) == buckets.end()) buckets.push_back(r[cb]);
    if (std::find(labels.begin(), labels.end(), r[cl]) == labels.end()) labels.push_back(r[cl]);
  }
  double scale = 0.0;
  for (const auto& r : t.rows)
    if (auto v = number(r[cm])) scale = std::max(scale, std::abs(*v));
  if (scale == 0.0) scale = 1.0;

  const int cw = 110, ch = 34, left = 60, top = 50;
  const int w = left + cw * static_cast<int>(labels.size()) + 20;
  const int h = top + ch * static_cast<int>(buckets.size()) + 40;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << detail::escape(title)
      << "</text>\n";
  for (std::size_t j = 0; j < labels.size(); ++j)
    out << "<text x=\"" << left + cw * static_cast<int>(j) + cw / 2 << "\" y=\"" << top - 8
        << "\" text-anchor=\"middle\">" << detail::escape(labels[j]) << "</text>\n";
  for (std::size_t i = 0; i < buckets.size(); ++i)
    out << "<text x=\"" << left - 8 << "\" y=\"" << top + ch * static_cast<int>(i) + ch / 2 + 4
        << "\" text-anchor=\"end\">" << detail::escape(buckets[i]) << "</text>\n";
  for (const auto& r : t.rows) {
    const auto i = std::find(buckets.begin(), buckets.end(), r[cb]) - buckets.begin();
    const auto j = std::find(labels.begin(), labels.end(), r[cl]) - labels.begin();
    const int x = left + cw * static_cast<int>(j), y = top + ch * static_cast<int>(i);
    const auto v = number(r[cm]);
    out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw << "\" height=\"" << ch << "\" fill=\""
        << (v ? detail::diverging(*v / scale) : std::string("#dddddd")) << "\" stroke=\"#ffffff\"/>\n";
    out << "<text x=\"" << x + cw / 2 << "\" y=\"" << y + ch / 2 + 4 << "\" text-anchor=\"middle\">"
        << (v ? detail::fmt(*v) : std::string("n/a")) << "</text>\n";
  }
  out << "<text x=\"" << left << "\" y=\"" << h - 12 << "\">rows: turn distance, cells: mean "
      << detail::escape(t.header[cm]) << "</text>\n";
  out << "</svg>\n";
}

inline void lines_svg(const Table& t, std::ostream& out, const std::string& title) {
  if (t.header.size() < 2) throw Error("plot: need an x column and at least one series");
  std::vector<std::size_t> series;
  for (std::size_t c = 1; c < t.header.size(); ++c) {
    const std::string& name = t.header[c];
    if (name == "count" || name == "wins" || name == "trials" || name == "sign_p") continue;
    bool numeric = !t.rows.empty();
    for (const auto& r : t.rows) numeric = numeric && (r[c].empty() || number(r[c]));
    if (numeric) series.push_back(c);
  }
  if (series.empty()) throw Error("plot: no numeric series to draw");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : t.rows)
    for (std::size_t c : series)
      if (auto v = number(r[c])) lo = std::min(lo, *v), hi = std::max(hi, *v);
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  const int w = 560, h = 360, left = 60, right = 150, top = 40, bottom = 50;
  const int pw = w - left - right, ph = h - top - bottom;
  const std::size_t n = t.rows.size();
  const auto px = [&](std::size_t i) { return left + (n <= 1 ? pw / 2.0 : pw * static_cast<double>(i) / (n - 1)); };
  const auto py = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<text x=\"" << left + pw / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << detail::escape(title) << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    out << "<text x=\"" << left - 6 << "\" y=\"" << detail::fmt(py(v) + 4, "%.1f") << "\" text-anchor=\"end\">"
        << detail::fmt(v) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i)
    out << "<text x=\"" << detail::fmt(px(i), "%.1f") << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << detail::escape(t.rows[i][0]) << "</text>\n";
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">"
      << detail::escape(t.header[0]) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = detail::kPalette[s % std::size(detail::kPalette)];
    std::string points;
    for (std::size_t i = 0; i < n; ++i)
      if (auto v = number(t.rows[i][series[s]]))
        points += detail::fmt(px(i), "%.1f") + "," + detail::fmt(py(*v), "%.1f") + " ";
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << points << "\"/>\n";
    const int ly = top + 16 + 18 * static_cast<int>(s);
    out << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\""
        << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << detail::escape(t.header[series[s]])
        << "</text>\n";
  }
  out << "</svg>\n";
}

inline ChartKind render_svg(std::istream& csv, std::ostream& svg, const std::string& title) {
  const Table t = read_csv(csv);
  const ChartKind kind = infer_kind(t);
  if (kind == ChartKind::heatmap) heatmap_svg(t, svg, title);
  else lines_svg(t, svg, title);
  return kind;
}

}  // namespace cpd::plot
