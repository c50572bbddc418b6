// atbm: run scenarios, recompute metrics, print bounds, run the property
// campaign. Exit codes: 0 success, 2 validation error, 3 solver failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "atbm/io.hpp"
#include "atbm/orchestrator.hpp"
#include "atbm/plot.hpp"
#include "atbm/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitValidation = 2;
constexpr int kExitSolver = 3;

struct RunArgs {
  std::string scenario;
  std::string controller;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool monitors = false;
  bool dump = false;
  bool timing = false;
};

void write_json(const fs::path& path, const atbm::Json& j) {
  std::ofstream out(path);
  if (!out) throw atbm::IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

int run(const RunArgs& a) {
  atbm::ScenarioConfig sc = atbm::load_scenario(a.scenario);
  if (!a.controller.empty()) sc.controller = atbm::parse_controller(a.controller);
  if (a.seed) sc.seed = *a.seed;
  if (!a.out.empty()) sc.output_dir = a.out;
  const fs::path dir(sc.output_dir);
  fs::create_directories(dir);

  atbm::ClosedLoopOptions opt = atbm::closed_loop_options(sc);
  opt.timing = a.timing;
  std::optional<atbm::LipschitzEstimates> est;
  if (a.monitors && sc.controller != atbm::ControllerKind::lqr) {
    est = atbm::estimate_problem_lipschitz(sc.problem, sc.seed);
    opt.monitor = &*est;
  }
  std::ofstream dump;
  if (a.dump && sc.controller != atbm::ControllerKind::lqr) {
    dump.open(dir / "subproblems.jsonl");
    if (!dump) throw atbm::IoError("cannot write subproblem dump");
    opt.on_subproblem = [&dump](atbm::Index step, atbm::Index it, const atbm::ConvexSubproblem& p) {
      atbm::dump_subproblem(dump, step, it, p);
    };
  }

  const atbm::ClosedLoopTrace trace = atbm::closed_loop(sc.problem, opt);
  atbm::save_scenario(sc, (dir / "scenario.json").string());
  atbm::write_trace(trace, (dir / "trace.csv").string());
  if (!trace.rows.empty()) {
    const atbm::MetricsReport m = atbm::compute_metrics(trace, sc.problem);
    write_json(dir / "metrics.json", atbm::metrics_json(m));
    atbm::emit_plots(trace, (dir / "").string());
    std::cout << atbm::format_metrics(m);
  }
  if (est) {
    std::ofstream mon(dir / "monitors.csv");
    atbm::write_monitors(trace, mon);
    atbm::Json bounds = {{"lipschitz", atbm::lipschitz_json(*est)},
                         {"a_priori", atbm::bound_report_json(atbm::a_priori_bounds(sc.problem, sc.adapt, *est))},
                         {"monitors", atbm::monitor_totals_json(atbm::summarize_monitors(trace))}};
    atbm::Json post = atbm::Json::array();
    for (std::size_t s = 0; s < trace.solves.size(); ++s) {
      if (auto r = atbm::a_posteriori_bounds(trace.solves[s], sc.adapt, *est, sc.problem.horizon)) {
        atbm::Json j = atbm::bound_report_json(*r);
        j["step"] = s;
        post.push_back(j);
      }
    }
    bounds["a_posteriori"] = post;
    write_json(dir / "bounds.json", bounds);
  }
  if (trace.failed) {
    std::cerr << "solver failure: " << trace.failure << "\n";
    return kExitSolver;
  }
  std::cout << "wrote " << trace.rows.size() << " steps to " << dir.string() << "\n";
  return kExitOk;
}

int report(const std::string& trace_path, const std::string& scenario) {
  const atbm::ClosedLoopTrace t = atbm::read_trace(trace_path);
  if (t.rows.empty()) throw atbm::ValidationError(trace_path + ": trace has no rows");
  atbm::R2RProblem bounds;
  if (!scenario.empty()) bounds = atbm::load_scenario(scenario).problem;
  std::cout << atbm::format_metrics(atbm::compute_metrics(t, bounds));
  return kExitOk;
}

int bounds(const std::string& scenario, atbm::Index pairs) {
  const atbm::ScenarioConfig sc = atbm::load_scenario(scenario);
  const atbm::LipschitzEstimates est = atbm::estimate_problem_lipschitz(sc.problem, sc.seed, pairs);
  const atbm::BoundReport r = atbm::a_priori_bounds(sc.problem, sc.adapt, est);
  const atbm::Json j = {{"lipschitz", atbm::lipschitz_json(est)}, {"a_priori", atbm::bound_report_json(r)}};
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int verify(std::uint64_t seed, atbm::Index instances) {
  const atbm::CampaignReport r = atbm::run_property_campaign(seed, instances);
  std::cout << atbm::format_campaign(r);
  return r.passed() ? kExitOk : kExitError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive trajectory bundle method for roll-to-roll web tension control"};
  app.require_subcommand(1);

  RunArgs ra;
  auto* run_cmd = app.add_subcommand("run", "simulate a scenario in closed loop");
  run_cmd->add_option("--scenario", ra.scenario, "scenario JSON file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--controller", ra.controller, "atbm, tbm-fixed or lqr (default: from the scenario)");
  run_cmd->add_option("--out", ra.out, "output directory (default: from the scenario)");
  run_cmd->add_option("--seed", ra.seed, "override the scenario seed");
  run_cmd->add_flag("--monitors", ra.monitors, "log certificate monitors and bound reports");
  run_cmd->add_flag("--dump-subproblems", ra.dump, "write every bundle subproblem to subproblems.jsonl");
  run_cmd->add_flag("--timing", ra.timing, "record wall times in the trace (breaks bit-identical replays)");

  std::string trace_path, report_scenario;
  auto* report_cmd = app.add_subcommand("report", "recompute metrics from a trace CSV");
  report_cmd->add_option("--trace", trace_path, "trace CSV")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--scenario", report_scenario, "scenario for the hard bounds (default bounds otherwise)");

  std::string bounds_scenario;
  atbm::Index pairs = 2000;
  auto* bounds_cmd = app.add_subcommand("bounds", "print the a priori iteration bounds");
  bounds_cmd->add_option("--scenario", bounds_scenario, "scenario JSON file")->required()->check(CLI::ExistingFile);
  bounds_cmd->add_option("--pairs", pairs, "sample pairs for the Lipschitz estimates")->check(CLI::PositiveNumber);

  std::uint64_t verify_seed = 1;
  atbm::Index instances = 50;
  auto* verify_cmd = app.add_subcommand("verify", "run the randomized property campaign");
  verify_cmd->add_option("--seed", verify_seed, "campaign seed");
  verify_cmd->add_option("--instances", instances, "number of instances")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*run_cmd) return run(ra);
    if (*report_cmd) return report(trace_path, report_scenario);
    if (*bounds_cmd) return bounds(bounds_scenario, pairs);
    if (*verify_cmd) return verify(verify_seed, instances);
  } catch (const atbm::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const atbm::ContractViolation& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const atbm::BaselineUnavailable& e) {
    std::cerr << "baseline unavailable: " << e.what() << "\n";
    return kExitSolver;
  } catch (const atbm::EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return kExitSolver;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
