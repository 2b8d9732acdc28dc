#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cqf::report {

// Locale-independent double formatting. `format_double` is the shortest
// representation that parses back to the same bits, so repeated runs of a
// deterministic pipeline produce byte-identical artifacts. `format_fixed`
// is for human-facing columns with an agreed decimal count.
std::string format_double(double v);
std::string format_fixed(double v, int decimals);

// Writes tmp + rename so readers never observe a half-written artifact.
void write_text(const std::filesystem::path& path, const std::string& content);

// Minimal CSV container; every cell is a pre-formatted string, so the
// numeric policy lives with the caller. Row width mismatches throw.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_string() const;
};

void write_csv(const std::filesystem::path& path, const Csv& csv);

// Self-contained SVG line plots (no external CSS/fonts), enough for PR
// curves and training loss. Non-finite points break the polyline.
struct Series {
  std::string label;
  std::string color = "#1f77b4";
  std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  int width = 640;
  int height = 420;
  // NaN = derive the range from the data (with padding).
  double x_min = NAN, x_max = NAN, y_min = NAN, y_max = NAN;
};

std::string render_svg(const PlotSpec& spec);
void write_svg(const std::filesystem::path& path, const PlotSpec& spec);

}  // namespace cqf::report
