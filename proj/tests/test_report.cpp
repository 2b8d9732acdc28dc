#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cqfuse/report.hpp"
#include "doctest.h"

using namespace cqf;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("double formatting is deterministic and round-trips") {
  CHECK(report::format_double(0.1) == "0.1");
  CHECK(report::format_double(-3.0) == "-3");
  CHECK(report::format_double(416000.0) == "416000");
  // Shortest repr must parse back to the same bits.
  for (double v : {0.1 + 0.2, 1.0 / 3.0, 998400.0 / 1e6, 1e-15, 123456.789}) {
    const double back = std::stod(report::format_double(v));
    CHECK(back == v);
  }

  CHECK(report::format_fixed(0.416, 3) == "0.416");
  CHECK(report::format_fixed(0.9984, 3) == "0.998");
  CHECK(report::format_fixed(2.0, 3) == "2.000");
  CHECK(report::format_fixed(-0.5, 2) == "-0.50");
}

TEST_CASE("csv rendering quotes only when needed and checks widths") {
  report::Csv csv;
  csv.header = {"k", "label", "value"};
  csv.rows = {{"1", "plain", "0.5"}, {"2", "with,comma", "0.25"}, {"3", "with\"quote", "1"}};
  CHECK(csv.to_string() ==
        "k,label,value\n"
        "1,plain,0.5\n"
        "2,\"with,comma\",0.25\n"
        "3,\"with\"\"quote\",1\n");

  csv.rows.push_back({"too", "short"});
  CHECK_THROWS_AS((void)csv.to_string(), std::invalid_argument);
}

TEST_CASE("artifact writes are atomic and byte-stable") {
  const auto dir = std::filesystem::temp_directory_path() / "cqfuse_report_test";
  std::filesystem::create_directories(dir);

  report::Csv csv;
  csv.header = {"a", "b"};
  csv.rows = {{report::format_double(1.0 / 3.0), report::format_fixed(0.125, 3)}};
  report::write_csv(dir / "t.csv", csv);
  CHECK(!std::filesystem::exists(dir / "t.csv.tmp"));
  const auto first = slurp(dir / "t.csv");
  report::write_csv(dir / "t.csv", csv);
  CHECK(slurp(dir / "t.csv") == first);

  report::write_text(dir / "t.txt", "line\n");
  CHECK(slurp(dir / "t.txt") == "line\n");
  CHECK(!std::filesystem::exists(dir / "t.txt.tmp"));
}

TEST_CASE("svg plots are self-contained and deterministic") {
  report::PlotSpec spec;
  spec.title = "precision vs recall";
  spec.x_label = "recall";
  spec.y_label = "precision";
  spec.x_min = 0.0;
  spec.x_max = 1.0;
  spec.y_min = 0.0;
  spec.y_max = 1.0;
  report::Series s;
  s.label = "AP50";
  s.points = {{0.0, 1.0}, {0.5, 0.8}, {1.0, 0.6}};
  spec.series.push_back(s);

  const auto svg = report::render_svg(spec);
  CHECK(svg.rfind("<svg xmlns=\"http://www.w3.org/2000/svg\"", 0) == 0);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("precision vs recall") != std::string::npos);
  CHECK(svg.find("href") == std::string::npos);  // no external references
  CHECK(report::render_svg(spec) == svg);

  SUBCASE("non-finite points split the polyline") {
    spec.series[0].points = {{0.0, 0.1}, {0.2, 0.2}, {0.4, NAN}, {0.6, 0.3}, {0.8, 0.4}};
    const auto broken = report::render_svg(spec);
    std::size_t n = 0;
    for (std::size_t pos = 0; (pos = broken.find("<polyline", pos)) != std::string::npos; ++pos)
      ++n;
    CHECK(n == 2);
  }

  SUBCASE("degenerate ranges still render") {
    spec.x_min = NAN;
    spec.x_max = NAN;
    spec.y_min = NAN;
    spec.y_max = NAN;
    spec.series[0].points = {{2.0, 5.0}};
    const auto dot = report::render_svg(spec);
    CHECK(dot.find("<circle") != std::string::npos);
  }

  SUBCASE("file write is atomic") {
    const auto dir = std::filesystem::temp_directory_path() / "cqfuse_report_test";
    std::filesystem::create_directories(dir);
    report::write_svg(dir / "p.svg", spec);
    CHECK(!std::filesystem::exists(dir / "p.svg.tmp"));
    CHECK(slurp(dir / "p.svg") == svg);
  }

  SUBCASE("two series get a legend") {
    report::Series s2;
    s2.label = "AP70";
    s2.color = "#d62728";
    s2.points = {{0.0, 0.9}, {1.0, 0.4}};
    spec.series.push_back(s2);
    const auto two = report::render_svg(spec);
    CHECK(two.find("AP70") != std::string::npos);
    CHECK(two.find("#d62728") != std::string::npos);
  }
}
