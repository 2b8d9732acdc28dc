#include "cqfuse/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cqfuse/config.hpp"
#include "cqfuse/model.hpp"
#include "cqfuse/report.hpp"
#include "cqfuse/sim.hpp"
#include "cqfuse/verify.hpp"

namespace cqf::cli {

namespace {

namespace fs = std::filesystem;

// Flag overrides shared by the config-driven subcommands. Optionals keep
// "not given" distinct from any real value.
struct Overrides {
  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::optional<std::string> tau;
  std::optional<double> theta;
  std::optional<std::size_t> agents;
};

void add_common_flags(CLI::App* cmd, Overrides& o, bool with_checkpoint) {
  cmd->add_option("--config", o.config_path, "JSON run configuration (defaults when omitted)");
  cmd->add_option("--out", o.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "base seed override");
  cmd->add_option("--k", o.k, "transmitted queries per agent");
  cmd->add_option("--tau", o.tau, "proximity gate radius in meters, or 'inf'");
  cmd->add_option("--theta", o.theta, "score gate threshold");
  cmd->add_option("--agents", o.agents, "agent budget including the ego");
  if (with_checkpoint)
    cmd->add_option("--checkpoint", o.checkpoint, "trained model checkpoint (CKP1)");
}

double parse_tau(const std::string& text) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw config::ConfigError("mask.tau", "expected a number or \"inf\"");
  }
}

// Load + override + re-validate. The json round trip reruns every schema
// and semantic check on the post-override document, so bad flag values
// fail with the same field paths as bad files.
config::RunConfig effective_config(const Overrides& o) {
  config::RunConfig c =
      o.config_path.empty() ? config::default_config() : config::load(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.k) c.dims.k = *o.k;
  if (o.tau) c.mask.tau = parse_tau(*o.tau);
  if (o.theta) c.mask.theta = *o.theta;
  if (o.agents) c.dims.max_agents = *o.agents;
  c.sync();
  return config::from_json(config::to_json(c));
}

model::ModelParams model_for(const Overrides& o, config::RunConfig& c) {
  if (!o.checkpoint.empty()) {
    if (!fs::exists(o.checkpoint))
      throw config::ConfigError("checkpoint", "checkpoint not found: " + o.checkpoint);
    auto params = model::load_checkpoint(o.checkpoint);
    // The checkpoint fixes the architecture; inference-time knobs (k and
    // the masks) stay with the flags/config.
    const std::size_t k = c.dims.k;
    c.dims = params.dims;
    c.dims.k = k;
    c.sync();
    c = config::from_json(config::to_json(c));
    return params;
  }
  Rng rng(mix_seed(c.seed, 0x90de1));
  return model::init_model(rng, c.dims);
}

std::string mb_of(std::uint64_t bits) { return wire::format_megabits(bits); }

struct SeedEval {
  std::uint64_t seed = 0;
  sim::PipelineResult result;
};

std::vector<SeedEval> eval_seeds(const config::RunConfig& c, const model::ModelParams& params,
                                 const sim::PipelineConfig& pipe) {
  std::vector<SeedEval> out;
  for (std::size_t i = 0; i < c.n_eval_seeds; ++i) {
    const std::uint64_t seed = c.eval_seed(i);
    const auto scn = sim::gen_scenario(seed, c.scenario);
    out.push_back({seed, sim::run_pipeline(scn, params, pipe, seed)});
  }
  return out;
}

double mean_ap50(const std::vector<SeedEval>& evals) {
  double s = 0;
  for (const auto& e : evals) s += e.result.eval.ap50;
  return evals.empty() ? 0.0 : s / static_cast<double>(evals.size());
}

double mean_ap70(const std::vector<SeedEval>& evals) {
  double s = 0;
  for (const auto& e : evals) s += e.result.eval.ap70;
  return evals.empty() ? 0.0 : s / static_cast<double>(evals.size());
}

int cmd_bandwidth(const std::string& k_spec, std::uint64_t d, std::uint64_t c,
                  const std::string& out_dir) {
  std::vector<std::uint64_t> ks;
  const auto c1 = k_spec.find(':');
  if (c1 == std::string::npos) {
    ks.push_back(std::stoull(k_spec));
  } else {
    const auto c2 = k_spec.find(':', c1 + 1);
    if (c2 == std::string::npos)
      throw config::ConfigError("k", "sweep syntax is lo:hi:step");
    const std::uint64_t lo = std::stoull(k_spec.substr(0, c1));
    const std::uint64_t hi = std::stoull(k_spec.substr(c1 + 1, c2 - c1 - 1));
    const std::uint64_t step = std::stoull(k_spec.substr(c2 + 1));
    if (step == 0 || hi < lo) throw config::ConfigError("k", "sweep syntax is lo:hi:step");
    for (std::uint64_t k = lo; k <= hi; k += step) ks.push_back(k);
  }

  std::printf("%8s %8s %8s %12s %10s\n", "k", "D", "C", "bits", "Mb");
  report::Csv csv;
  csv.header = {"k", "d", "c", "bits", "mb"};
  for (const std::uint64_t k : ks) {
    const std::uint64_t bits = wire::bandwidth_bits(k, d, c);
    std::printf("%8llu %8llu %8llu %12llu %10s\n", static_cast<unsigned long long>(k),
                static_cast<unsigned long long>(d), static_cast<unsigned long long>(c),
                static_cast<unsigned long long>(bits), mb_of(bits).c_str());
    csv.rows.push_back({std::to_string(k), std::to_string(d), std::to_string(c),
                        std::to_string(bits), mb_of(bits)});
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    report::write_csv(fs::path(out_dir) / "bandwidth.csv", csv);
  }
  return 0;
}

int cmd_simulate(const Overrides& o) {
  auto c = effective_config(o);
  const auto params = model_for(o, c);
  const fs::path out(o.out_dir);
  fs::create_directories(out);

  const auto evals = eval_seeds(c, params, c.pipeline_config());

  report::Csv detections;
  detections.header = {"seed",  "det",    "x",   "y",     "z",       "length",
                       "width", "height", "yaw", "score", "class_id"};
  report::Csv metrics;
  metrics.header = {"seed", "ap50", "ap70", "bandwidth_bits", "mb"};
  for (const auto& e : evals) {
    for (std::size_t i = 0; i < e.result.detections.size(); ++i) {
      const auto& d = e.result.detections[i];
      detections.rows.push_back(
          {std::to_string(e.seed), std::to_string(i), report::format_double(d.box.center.x),
           report::format_double(d.box.center.y), report::format_double(d.box.center.z),
           report::format_double(d.box.length), report::format_double(d.box.width),
           report::format_double(d.box.height), report::format_double(d.box.yaw),
           report::format_double(d.score), std::to_string(d.class_id)});
    }
    metrics.rows.push_back({std::to_string(e.seed), report::format_double(e.result.eval.ap50),
                            report::format_double(e.result.eval.ap70),
                            std::to_string(e.result.eval.bandwidth_bits),
                            mb_of(e.result.eval.bandwidth_bits)});
  }
  report::write_csv(out / "detections.csv", detections);
  report::write_csv(out / "metrics.csv", metrics);

  report::PlotSpec plot;
  plot.title = "precision vs recall at IoU 0.5 (seed " + std::to_string(evals.front().seed) + ")";
  plot.x_label = "recall";
  plot.y_label = "precision";
  plot.x_min = 0;
  plot.x_max = 1;
  plot.y_min = 0;
  plot.y_max = 1;
  report::Series s;
  s.label = "AP50";
  for (const auto& [recall, precision] : evals.front().result.eval.pr50)
    s.points.emplace_back(recall, precision);
  plot.series.push_back(s);
  report::write_svg(out / "pr_curve.svg", plot);

  config::save(out / "config.json", c);

  std::printf("seeds %zu  mean ap50 %s  mean ap70 %s  bandwidth %s Mb\n", evals.size(),
              report::format_fixed(mean_ap50(evals), 4).c_str(),
              report::format_fixed(mean_ap70(evals), 4).c_str(),
              mb_of(evals.front().result.eval.bandwidth_bits).c_str());
  std::printf("wrote %s\n", (out / "metrics.csv").string().c_str());
  return 0;
}

int cmd_train(const Overrides& o, bool final_layer_only) {
  auto c = effective_config(o);
  if (final_layer_only) c.all_layer_supervision = false;
  const fs::path out(o.out_dir);
  fs::create_directories(out);

  auto t = c.train_config();
  t.checkpoint_path = out / "checkpoint.ckpt";
  const auto result = sim::train_toy(t);

  sim::write_train_log(out / "train_log.jsonl", result.log);
  config::save(out / "config.json", c);

  report::PlotSpec plot;
  plot.title = "training loss";
  plot.x_label = "step";
  plot.y_label = "loss";
  report::Series total, shared;
  total.label = "total";
  shared.label = "shared";
  shared.color = "#d62728";
  for (const auto& e : result.log) {
    total.points.emplace_back(static_cast<double>(e.step), e.total);
    shared.points.emplace_back(static_cast<double>(e.step), e.shared);
  }
  plot.series.push_back(total);
  plot.series.push_back(shared);
  report::write_svg(out / "loss.svg", plot);

  std::printf("steps %zu  final smoothed shared loss %s\n", result.log.size(),
              report::format_fixed(sim::final_smoothed_shared(result.log), 4).c_str());
  std::printf("wrote %s\n", t.checkpoint_path.string().c_str());
  return 0;
}

int cmd_ablate(const Overrides& o) {
  if (o.checkpoint.empty())
    throw config::ConfigError("checkpoint", "ablation requires --checkpoint");
  auto c = effective_config(o);
  const auto params = model_for(o, c);
  const fs::path out(o.out_dir);
  fs::create_directories(out);

  report::Csv grid;
  grid.header = {"section", "k",    "tau",  "qsm", "pcm",
                 "ssm",     "ap50", "ap70", "bandwidth_bits", "mb"};
  auto tau_text = [](double tau) {
    return std::isinf(tau) ? std::string("inf") : report::format_double(tau);
  };
  auto push_eval_row = [&](const std::string& section, const sim::PipelineConfig& pipe) {
    const auto evals = eval_seeds(c, params, pipe);
    std::uint64_t bits = evals.front().result.eval.bandwidth_bits;
    grid.rows.push_back({section, std::to_string(pipe.k), tau_text(pipe.mask.tau),
                         pipe.mask.use_qsm ? "1" : "0", pipe.mask.use_pcm ? "1" : "0",
                         pipe.mask.use_ssm ? "1" : "0",
                         report::format_double(mean_ap50(evals)),
                         report::format_double(mean_ap70(evals)), std::to_string(bits),
                         mb_of(bits)});
    return evals;
  };

  // Every on/off combination of the three interaction gates.
  for (int bitsel = 7; bitsel >= 0; --bitsel) {
    sim::PipelineConfig pipe = c.pipeline_config();
    pipe.mask.use_qsm = (bitsel & 4) != 0;
    pipe.mask.use_pcm = (bitsel & 2) != 0;
    pipe.mask.use_ssm = (bitsel & 1) != 0;
    push_eval_row("masks", pipe);
  }

  // Proximity radius sweep, with the per-seed breakdown kept for the
  // directional comparison.
  report::Csv tau_seeds;
  tau_seeds.header = {"tau", "seed", "ap50", "ap70"};
  const double taus[] = {5, 10, 20, 30, std::numeric_limits<double>::infinity()};
  for (const double tau : taus) {
    sim::PipelineConfig pipe = c.pipeline_config();
    pipe.mask.tau = tau;
    const auto evals = push_eval_row("tau", pipe);
    for (const auto& e : evals)
      tau_seeds.rows.push_back({tau_text(tau), std::to_string(e.seed),
                                report::format_double(e.result.eval.ap50),
                                report::format_double(e.result.eval.ap70)});
  }

  // Inference-time transmission budget at desk scale. Only the CAV
  // payloads shrink; the ego keeps its configured candidate set.
  for (const std::size_t k : {1, 2, 4, 6, 8}) {
    if (k > c.dims.n_queries) continue;
    sim::PipelineConfig pipe = c.pipeline_config();
    pipe.k = k;
    pipe.ego_k = c.dims.k;
    push_eval_row("topk", pipe);
  }

  // Paper-parity payload arithmetic (no detection columns at this scale).
  for (std::uint64_t k = 120; k >= 20; k -= 10) {
    const std::uint64_t bits = wire::bandwidth_bits(k, 256, 1);
    grid.rows.push_back({"paper_bandwidth", std::to_string(k), "", "", "", "", "", "",
                         std::to_string(bits), mb_of(bits)});
  }

  report::write_csv(out / "ablation.csv", grid);
  report::write_csv(out / "tau_seeds.csv", tau_seeds);
  config::save(out / "config.json", c);
  std::printf("wrote %s (%zu rows)\n", (out / "ablation.csv").string().c_str(),
              grid.rows.size());
  return 0;
}

int cmd_verify(std::uint64_t seed, bool inject_fault) {
  const auto results = verify::run_all({seed, inject_fault});
  for (const auto& r : results)
    std::printf("[%s] %-10s %-34s %6.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.module.c_str(),
                r.name.c_str(), r.seconds, r.detail.c_str());
  if (!verify::all_passed(results)) {
    for (const auto& r : results)
      if (!r.passed)
        std::fprintf(stderr, "verification failed: %s / %s: %s\n", r.module.c_str(),
                     r.name.c_str(), r.detail.c_str());
    return 1;
  }
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"object-query cooperative perception toolkit"};
  app.require_subcommand(1);

  std::string bw_k = "10:120:10";
  std::uint64_t bw_d = 256, bw_c = 1;
  std::string bw_out;
  bool paper_parity = false;
  auto* bandwidth = app.add_subcommand("bandwidth", "payload size table for k queries");
  bandwidth->add_option("--k", bw_k, "query count, or a lo:hi:step sweep")
      ->capture_default_str();
  bandwidth->add_option("--D", bw_d, "feature dimension")->capture_default_str();
  bandwidth->add_option("--C", bw_c, "class count")->capture_default_str();
  bandwidth->add_flag("--paper-parity", paper_parity, "force D=256, C=1");
  bandwidth->add_option("--out", bw_out, "also write bandwidth.csv here");

  Overrides sim_o;
  auto* simulate = app.add_subcommand("simulate", "run the pipeline over the evaluation seeds");
  add_common_flags(simulate, sim_o, true);

  Overrides train_o;
  bool final_layer_only = false;
  auto* train = app.add_subcommand("train", "optimize the fusion stack on generated scenes");
  add_common_flags(train, train_o, false);
  train->add_flag("--final-layer-only", final_layer_only,
                  "supervise only the last fusion layer");

  Overrides ablate_o;
  auto* ablate = app.add_subcommand("ablate", "mask/tau/top-k ablation grid");
  add_common_flags(ablate, ablate_o, true);

  std::uint64_t verify_seed = 2026;
  bool inject_fault = false;
  auto* verify_cmd = app.add_subcommand("verify", "run the property suite");
  verify_cmd->add_option("--seed", verify_seed, "property suite seed")->capture_default_str();
  verify_cmd->add_flag("--inject-fault", inject_fault)->group("");  // test shim, hidden

  try {
    app.parse(argc, argv);
    if (bandwidth->parsed()) {
      if (paper_parity) {
        bw_d = 256;
        bw_c = 1;
      }
      return cmd_bandwidth(bw_k, bw_d, bw_c, bw_out);
    }
    if (simulate->parsed()) return cmd_simulate(sim_o);
    if (train->parsed()) return cmd_train(train_o, final_layer_only);
    if (ablate->parsed()) return cmd_ablate(ablate_o);
    if (verify_cmd->parsed()) return cmd_verify(verify_seed, inject_fault);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const config::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace cqf::cli
