#include "cqfuse/report.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cqf::report {

namespace {

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("report: cannot open " + tmp.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("report: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

// Pixel coordinates: two decimals is below visual resolution and keeps the
// output stable across platforms.
std::string px(double v) { return format_fixed(v, 2); }

struct Range {
  double lo = 0.0, hi = 1.0;
};

Range data_range(const PlotSpec& spec, bool y_axis) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : spec.series)
    for (const auto& [x, y] : s.points) {
      const double v = y_axis ? y : x;
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double fixed_lo = y_axis ? spec.y_min : spec.x_min;
  const double fixed_hi = y_axis ? spec.y_max : spec.x_max;
  if (std::isfinite(fixed_lo)) lo = fixed_lo;
  if (std::isfinite(fixed_hi)) hi = fixed_hi;
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  if (lo == hi) {
    const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
    return {lo - pad, hi + pad};
  }
  return {lo, hi};
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_fixed(double v, int decimals) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, decimals);
  if (res.ec != std::errc{}) throw std::runtime_error("format_fixed: value out of range");
  return std::string(buf, res.ptr);
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  atomic_write(path, content);
}

std::string Csv::to_string() const {
  std::string out;
  auto emit_row = [&out](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      // Cells with separators or quotes get quoted per RFC 4180.
      const std::string& cell = row[i];
      if (cell.find_first_of(",\"\n") != std::string::npos) {
        out += '"';
        for (char c : cell) {
          out += c;
          if (c == '"') out += '"';
        }
        out += '"';
      } else {
        out += cell;
      }
    }
    out += '\n';
  };
  emit_row(header);
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw std::invalid_argument("Csv: row width " + std::to_string(row.size()) +
                                  " != header width " + std::to_string(header.size()));
    emit_row(row);
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const Csv& csv) {
  atomic_write(path, csv.to_string());
}

std::string render_svg(const PlotSpec& spec) {
  const double w = spec.width, h = spec.height;
  const double ml = 58, mr = 16, mt = 34, mb = 46;  // margins
  const double pw = w - ml - mr, ph = h - mt - mb;  // plot area
  const Range rx = data_range(spec, false);
  const Range ry = data_range(spec, true);

  auto sx = [&](double x) { return ml + (x - rx.lo) / (rx.hi - rx.lo) * pw; };
  auto sy = [&](double y) { return mt + ph - (y - ry.lo) / (ry.hi - ry.lo) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\""
      << spec.height << "\" viewBox=\"0 0 " << spec.width << " " << spec.height << "\">\n";
  svg << "<rect width=\"" << spec.width << "\" height=\"" << spec.height
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << px(w / 2) << "\" y=\"20\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">"
      << xml_escape(spec.title) << "</text>\n";

  // Frame and ticks (5 per axis, evenly spaced over the final range).
  svg << "<rect x=\"" << px(ml) << "\" y=\"" << px(mt) << "\" width=\"" << px(pw)
      << "\" height=\"" << px(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double fx = rx.lo + (rx.hi - rx.lo) * i / kTicks;
    const double fy = ry.lo + (ry.hi - ry.lo) * i / kTicks;
    const double tx = sx(fx), ty = sy(fy);
    svg << "<line x1=\"" << px(tx) << "\" y1=\"" << px(mt + ph) << "\" x2=\"" << px(tx)
        << "\" y2=\"" << px(mt + ph + 5) << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << px(tx) << "\" y=\"" << px(mt + ph + 18)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
        << format_fixed(fx, 2) << "</text>\n";
    svg << "<line x1=\"" << px(ml - 5) << "\" y1=\"" << px(ty) << "\" x2=\"" << px(ml)
        << "\" y2=\"" << px(ty) << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << px(ml - 8) << "\" y=\"" << px(ty + 3)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
        << format_fixed(fy, 2) << "</text>\n";
  }
  svg << "<text x=\"" << px(ml + pw / 2) << "\" y=\"" << px(h - 10)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << xml_escape(spec.x_label) << "</text>\n";
  svg << "<text x=\"14\" y=\"" << px(mt + ph / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "transform=\"rotate(-90 14 "
      << px(mt + ph / 2) << ")\">" << xml_escape(spec.y_label) << "</text>\n";

  for (const auto& s : spec.series) {
    // Split at non-finite points so gaps stay gaps.
    std::vector<std::string> segment;
    auto flush = [&]() {
      if (segment.size() >= 2) {
        svg << "<polyline fill=\"none\" stroke=\"" << xml_escape(s.color)
            << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < segment.size(); ++i) {
          if (i) svg << ' ';
          svg << segment[i];
        }
        svg << "\"/>\n";
      } else if (segment.size() == 1) {
        // Lone point: draw a dot so it is not silently invisible.
        const auto comma = segment[0].find(',');
        svg << "<circle cx=\"" << segment[0].substr(0, comma) << "\" cy=\""
            << segment[0].substr(comma + 1) << "\" r=\"2\" fill=\"" << xml_escape(s.color)
            << "\"/>\n";
      }
      segment.clear();
    };
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) {
        flush();
        continue;
      }
      segment.push_back(px(sx(x)) + "," + px(sy(y)));
    }
    flush();
  }

  // Legend (only when labels would disambiguate something).
  if (spec.series.size() > 1) {
    double ly = mt + 14;
    for (const auto& s : spec.series) {
      svg << "<line x1=\"" << px(ml + pw - 110) << "\" y1=\"" << px(ly - 4) << "\" x2=\""
          << px(ml + pw - 90) << "\" y2=\"" << px(ly - 4) << "\" stroke=\"" << xml_escape(s.color)
          << "\" stroke-width=\"2\"/>\n";
      svg << "<text x=\"" << px(ml + pw - 84) << "\" y=\"" << px(ly)
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(s.label)
          << "</text>\n";
      ly += 16;
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_svg(const std::filesystem::path& path, const PlotSpec& spec) {
  atomic_write(path, render_svg(spec));
}

}  // namespace cqf::report
