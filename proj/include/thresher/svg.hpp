#ifndef THRESHER_SVG_HPP
#define THRESHER_SVG_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "thresher/core.hpp"

namespace thresher::svg {

// Fixed chart geometry; tests recompute coordinates from these constants.
inline constexpr double kWidth = 640.0;
inline constexpr double kHeight = 400.0;
inline constexpr double kMarginLeft = 64.0;
inline constexpr double kMarginRight = 24.0;
inline constexpr double kMarginTop = 24.0;
inline constexpr double kMarginBottom = 48.0;

inline constexpr const char* kPalette[6] = {"#1f77b4", "#d62728", "#2ca02c",
                                            "#ff7f0e", "#9467bd", "#8c564b"};

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct Range {
    double lo = 0.0, hi = 1.0;

    static Range of(double lo, double hi) {
        if (!(lo < hi)) {  // pad degenerate ranges so mapping stays finite
            const double pad = std::abs(lo) > 0 ? std::abs(lo) * 0.05 : 0.5;
            return {lo - pad, hi + pad};
        }
        return {lo, hi};
    }
};

inline double map_x(double x, const Range& r) {
    return kMarginLeft + (x - r.lo) / (r.hi - r.lo) * (kWidth - kMarginLeft - kMarginRight);
}

inline double map_y(double y, const Range& r) {
    return kHeight - kMarginBottom -
           (y - r.lo) / (r.hi - r.lo) * (kHeight - kMarginTop - kMarginBottom);
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

// One line chart: a polyline per series, optional vertical knot markers,
// 5 ticks per axis.
inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& x_label, const std::string& y_label,
                             const std::vector<Series>& series,
                             const std::vector<double>& knot_lines = {}) {
    if (series.empty()) throw std::invalid_argument("write_line_chart: no series");
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size() || s.x.empty())
            throw std::invalid_argument("write_line_chart: bad series '" + s.label + "'");
        for (double v : s.x) {
            xmin = std::min(xmin, v);
            xmax = std::max(xmax, v);
        }
        for (double v : s.y) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    const Range xr = Range::of(xmin, xmax);
    const Range yr = Range::of(ymin, ymax);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << format_double(kWidth)
        << " " << format_double(kHeight) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"" << format_double(kWidth) << "\" height=\"" << format_double(kHeight)
        << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << format_double(kWidth / 2) << "\" y=\"16\" text-anchor=\"middle\">"
        << escape(title) << "</text>\n";

    // Axes.
    const double x0 = kMarginLeft, x1 = kWidth - kMarginRight;
    const double y0 = kHeight - kMarginBottom, y1 = kMarginTop;
    out << "<line x1=\"" << format_double(x0) << "\" y1=\"" << format_double(y0) << "\" x2=\""
        << format_double(x1) << "\" y2=\"" << format_double(y0)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    out << "<line x1=\"" << format_double(x0) << "\" y1=\"" << format_double(y0) << "\" x2=\""
        << format_double(x0) << "\" y2=\"" << format_double(y1)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";

    for (int t = 0; t < 5; ++t) {
        const double fx = xr.lo + (xr.hi - xr.lo) * t / 4.0;
        const double px = map_x(fx, xr);
        out << "<line x1=\"" << format_double(px) << "\" y1=\"" << format_double(y0) << "\" x2=\""
            << format_double(px) << "\" y2=\"" << format_double(y0 + 4)
            << "\" stroke=\"black\"/>\n";
        out << "<text x=\"" << format_double(px) << "\" y=\"" << format_double(y0 + 18)
            << "\" text-anchor=\"middle\">" << format_fixed(fx, 2) << "</text>\n";
        const double fy = yr.lo + (yr.hi - yr.lo) * t / 4.0;
        const double py = map_y(fy, yr);
        out << "<line x1=\"" << format_double(x0 - 4) << "\" y1=\"" << format_double(py)
            << "\" x2=\"" << format_double(x0) << "\" y2=\"" << format_double(py)
            << "\" stroke=\"black\"/>\n";
        out << "<text x=\"" << format_double(x0 - 8) << "\" y=\"" << format_double(py + 4)
            << "\" text-anchor=\"end\">" << format_fixed(fy, 2) << "</text>\n";
    }

    out << "<text x=\"" << format_double((x0 + x1) / 2) << "\" y=\""
        << format_double(kHeight - 10) << "\" text-anchor=\"middle\">" << escape(x_label)
        << "</text>\n";
    out << "<text x=\"14\" y=\"" << format_double((y0 + y1) / 2)
        << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
        << format_double((y0 + y1) / 2) << ")\">" << escape(y_label) << "</text>\n";

    // Knot markers.
    for (double k : knot_lines) {
        if (k < xr.lo || k > xr.hi) continue;
        const double px = map_x(k, xr);
        out << "<line class=\"knot\" x1=\"" << format_double(px) << "\" y1=\""
            << format_double(y0) << "\" x2=\"" << format_double(px) << "\" y2=\""
            << format_double(y1)
            << "\" stroke=\"#888888\" stroke-dasharray=\"4 3\" stroke-width=\"1\"/>\n";
    }

    // Series.
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % 6];
        out << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            if (i) out << ' ';
            out << format_double(map_x(series[s].x[i], xr)) << ','
                << format_double(map_y(series[s].y[i], yr));
        }
        out << "\"/>\n";
    }

    // Legend.
    for (std::size_t s = 0; s < series.size(); ++s) {
        const double ly = kMarginTop + 14.0 * static_cast<double>(s);
        out << "<rect class=\"legend\" x=\"" << format_double(x1 - 110) << "\" y=\""
            << format_double(ly) << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[s % 6]
            << "\"/>\n";
        out << "<text x=\"" << format_double(x1 - 96) << "\" y=\"" << format_double(ly + 9)
            << "\">" << escape(series[s].label) << "</text>\n";
    }

    out << "</svg>\n";
}

}  // namespace thresher::svg

#endif  // THRESHER_SVG_HPP
