#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cqfuse/config.hpp"
#include "doctest.h"

using namespace cqf;

namespace {

// Convenience: parse a JSON literal and expect a ConfigError whose path()
// names the offending field.
void expect_error_at(const char* text, const std::string& path) {
  const auto j = nlohmann::json::parse(text);
  try {
    (void)config::from_json(j);
    FAIL("expected ConfigError at '", path, "'");
  } catch (const config::ConfigError& e) {
    CHECK(e.path() == path);
  }
}

}  // namespace

TEST_CASE("defaults are desk scale and synchronized") {
  const auto c = config::default_config();
  CHECK(c.dims.d == 32);
  CHECK(c.dims.n_queries == 64);
  CHECK(c.dims.k == 8);
  CHECK(c.dims.max_agents == 4);
  CHECK(c.dims.classes == 1);
  CHECK(c.mask.tau == doctest::Approx(10.0));
  CHECK(c.mask.theta == doctest::Approx(0.2));
  CHECK(c.seed == 1);

  // Derived fields mirror dims.
  CHECK(c.mask.max_agents == c.dims.max_agents);
  CHECK(c.emu.d == c.dims.d);
  CHECK(c.emu.n_queries == c.dims.n_queries);
  CHECK(c.emu.classes == c.dims.classes);
  CHECK(c.scenario.n_cavs == c.dims.max_agents - 1);
  CHECK(c.scenario.max_agents == c.dims.max_agents);
}

TEST_CASE("json round trip is exact") {
  const auto c = config::default_config();
  const auto j = config::to_json(c);
  const auto c2 = config::from_json(j);
  CHECK(config::to_json(c2).dump(2) == j.dump(2));
}

TEST_CASE("partial documents override only what they mention") {
  const auto j = nlohmann::json::parse(R"({
    "dims": {"k": 2, "max_agents": 3},
    "mask": {"theta": 0.05},
    "seed": 42
  })");
  const auto c = config::from_json(j);
  CHECK(c.dims.k == 2);
  CHECK(c.dims.max_agents == 3);
  CHECK(c.dims.d == 32);  // untouched default
  CHECK(c.mask.theta == doctest::Approx(0.05));
  CHECK(c.mask.tau == doctest::Approx(10.0));
  CHECK(c.seed == 42);
  // sync() ran after parsing
  CHECK(c.mask.max_agents == 3);
  CHECK(c.scenario.n_cavs == 2);
}

TEST_CASE("unknown keys are rejected with their path") {
  expect_error_at(R"({"dimz": {}})", "dimz");
  expect_error_at(R"({"dims": {"depth": 4}})", "dims.depth");
  expect_error_at(R"({"mask": {"tav": 5}})", "mask.tav");
  expect_error_at(R"({"roi": {"mid": [0, 0, 0]}})", "roi.mid");
  expect_error_at(R"({"train": {"epochs": 3}})", "train.epochs");
}

TEST_CASE("type errors are rejected with their path") {
  expect_error_at(R"({"dims": {"d": "big"}})", "dims.d");
  expect_error_at(R"({"mask": {"use_ssm": 1.5}})", "mask.use_ssm");
  expect_error_at(R"({"roi": {"min": [1, 2]}})", "roi.min");
  expect_error_at(R"({"roi": {"min": [1, 2, "z"]}})", "roi.min");
  expect_error_at(R"({"roi": 7})", "roi");
  expect_error_at(R"({"seed": "one"})", "seed");
  expect_error_at(R"({"dims": 3})", "dims");
}

TEST_CASE("tau accepts the string inf and round-trips it") {
  const auto j = nlohmann::json::parse(R"({"mask": {"tau": "inf"}})");
  const auto c = config::from_json(j);
  CHECK(std::isinf(c.mask.tau));

  const auto out = config::to_json(c);
  CHECK(out["mask"]["tau"].is_string());
  CHECK(out["mask"]["tau"].get<std::string>() == "inf");

  const auto c2 = config::from_json(out);
  CHECK(std::isinf(c2.mask.tau));

  expect_error_at(R"({"mask": {"tau": "huge"}})", "mask.tau");
}

TEST_CASE("semantic validation names the offending field") {
  expect_error_at(R"({"dims": {"k": 70}})", "dims.k");  // exceeds n_queries=64
  expect_error_at(R"({"dims": {"max_agents": 0}})", "dims.max_agents");
  expect_error_at(R"({"dims": {"heads": 5}})", "dims.heads");  // 5 does not divide 32
  expect_error_at(R"({"mask": {"theta": 1.0}})", "mask.theta");
  expect_error_at(R"({"mask": {"theta": -0.1}})", "mask.theta");
  expect_error_at(R"({"mask": {"tau": -1}})", "mask.tau");
  expect_error_at(R"({"roi": {"min": [0, 0, 0], "max": [0, 10, 4]}})", "roi");
}

TEST_CASE("roi document parses into both roi and scenario") {
  const auto j = nlohmann::json::parse(
      R"({"roi": {"min": [-20, -30, -1], "max": [20, 30, 5]}})");
  const auto c = config::from_json(j);
  CHECK(c.roi.min_pt.x == doctest::Approx(-20.0));
  CHECK(c.roi.max_pt.y == doctest::Approx(30.0));
  CHECK(c.scenario.roi.min_pt.x == doctest::Approx(-20.0));
  CHECK(c.scenario.roi.max_pt.z == doctest::Approx(5.0));
}

TEST_CASE("file load and save round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "cqfuse_config_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "run.json";

  auto c = config::default_config();
  c.dims.k = 4;
  c.seed = 7;
  c.mask.tau = std::numeric_limits<double>::infinity();
  c.sync();
  config::save(path, c);
  CHECK(!std::filesystem::exists(dir / "run.json.tmp"));

  const auto c2 = config::load(path);
  CHECK(config::to_json(c2).dump(2) == config::to_json(c).dump(2));

  SUBCASE("missing file") {
    CHECK_THROWS_AS((void)config::load(dir / "nope.json"), config::ConfigError);
  }
  SUBCASE("malformed JSON") {
    const auto bad = dir / "bad.json";
    std::ofstream(bad) << "{ not json";
    CHECK_THROWS_AS((void)config::load(bad), config::ConfigError);
  }
}

TEST_CASE("derived train and pipeline configs mirror the run config") {
  auto c = config::default_config();
  c.train_steps = 123;
  c.train_batch = 2;
  c.all_layer_supervision = false;
  c.score_threshold = 0.33;
  c.use_wire = false;
  c.comm_range = 55.0;
  c.sync();

  const auto t = c.train_config();
  CHECK(t.steps == 123);
  CHECK(t.batch == 2);
  CHECK(!t.all_layer_supervision);
  CHECK(t.dims.d == c.dims.d);
  CHECK(t.score_threshold == doctest::Approx(0.33));
  CHECK(t.val_seeds.empty());  // val_every == 0

  const auto p = c.pipeline_config();
  CHECK(p.k == c.dims.k);
  CHECK(!p.use_wire);
  CHECK(p.comm_range == doctest::Approx(55.0));
  CHECK(p.score_threshold == doctest::Approx(0.33));

  c.val_every = 50;
  const auto tv = c.train_config();
  CHECK(tv.val_seeds.size() == 5);
}
