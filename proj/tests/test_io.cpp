#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

#include "atbm/io.hpp"
#include "atbm/plot.hpp"

using namespace atbm;
namespace fs = std::filesystem;

namespace {

std::string scenario_path(const char* name) { return std::string(ATBM_SCENARIO_DIR) + "/" + name; }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("atbm_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Six rollers tracking 30 N and 0.1 m/s exactly, two soft classes.
ClosedLoopTrace flat_trace(Index rows) {
  ClosedLoopTrace t;
  t.rollers = 6;
  t.soft_classes = 2;
  for (Index s = 0; s < rows; ++s) {
    StepRecord r;
    r.time = 0.01 * static_cast<double>(s);
    r.tension_ref = Vector::Constant(6, 30.0);
    r.velocity_ref = Vector::Constant(6, 0.1);
    r.x = make_state(r.tension_ref, r.velocity_ref);
    r.u = Vector::Constant(6, 0.25);
    r.nu_dyn = 1e-6;
    r.delta = 0.5;
    r.mu = 10;
    r.gammas = (Vector(2) << 100, 10).finished();
    r.iterations = 3;
    t.rows.push_back(r);
  }
  return t;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + ATBM_CLI + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Io, ShippedScenariosLoad) {
  const ScenarioConfig step = load_scenario(scenario_path("tension_step.json"));
  EXPECT_EQ(step.problem.plant.rollers, 6);
  EXPECT_EQ(step.problem.horizon, 15);
  ASSERT_EQ(step.problem.tension_refs.size(), 6u);
  const double refs[] = {28, 36, 20, 40, 24, 32};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(step.problem.tension_refs[i].initial, refs[i]);
  ASSERT_EQ(step.problem.tension_refs[2].events.size(), 1u);
  EXPECT_EQ(step.problem.tension_refs[2].at(0.6), 44.0);

  const ScenarioConfig vel = load_scenario(scenario_path("velocity_change.json"));
  EXPECT_EQ(vel.problem.upstream.at(0.0), 0.01);
  EXPECT_EQ(vel.problem.upstream.at(0.5), 0.10);
  for (const StepSchedule& s : vel.problem.tension_refs) EXPECT_EQ(s.initial, 30.0);
}

TEST(Io, NonIncreasingEventTimesNameTheEvent) {
  std::ifstream in(scenario_path("tension_step.json"));
  Json j = Json::parse(in);
  j["tension_references"][2]["events"] = Json::array({{{"time_s", 0.5}, {"value", 40}}, {{"time_s", 0.5}, {"value", 41}}});
  try {
    parse_scenario(j.dump());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("event index 1"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("tension_references[2]"), std::string::npos) << e.what();
  }
}

TEST(Io, RejectsWrongTypesWithPath) {
  std::ifstream in(scenario_path("velocity_change.json"));
  Json j = Json::parse(in);
  j["plant"]["dt_s"] = "fast";
  try {
    parse_scenario(j.dump());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("plant.dt_s"), std::string::npos) << e.what();
  }
}

TEST(Io, SaveLoadIsIdempotent) {
  const fs::path dir = scratch_dir("roundtrip");
  const ScenarioConfig a = load_scenario(scenario_path("tension_step.json"));
  save_scenario(a, (dir / "a.json").string());
  const ScenarioConfig b = load_scenario((dir / "a.json").string());
  save_scenario(b, (dir / "b.json").string());
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(dump_scenario(a), dump_scenario(b));
}

TEST(Io, TraceHeaderColumnCount) {
  const auto h = trace_header(6, 2);
  EXPECT_EQ(h.size(), 39u);
  EXPECT_EQ(h.front(), "time_s");
  EXPECT_EQ(h.back(), "solve_ms");
}

TEST(Io, EmptyTraceWritesHeaderOnly) {
  std::ostringstream out;
  write_trace(flat_trace(0), out);
  const std::string s = out.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1);
  EXPECT_EQ(std::count(s.begin(), s.end(), ','), 38);
}

TEST(Io, TraceRoundTrip) {
  ClosedLoopTrace t = flat_trace(5);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (StepRecord& r : t.rows) {
    for (Index i = 0; i < r.x.size(); ++i) r.x[i] += n(rng);
    r.u[1] = n(rng);
    r.solve_ms = std::abs(n(rng));
  }
  std::stringstream io;
  write_trace(t, io);
  const ClosedLoopTrace back = read_trace(io);
  ASSERT_EQ(back.rows.size(), t.rows.size());
  EXPECT_EQ(back.rollers, 6);
  EXPECT_EQ(back.soft_classes, 2);
  for (std::size_t s = 0; s < t.rows.size(); ++s) {
    const StepRecord& a = t.rows[s];
    const StepRecord& b = back.rows[s];
    EXPECT_LE((a.x - b.x).lpNorm<Eigen::Infinity>(), 1e-8 * (1 + a.x.lpNorm<Eigen::Infinity>()));
    EXPECT_LE((a.u - b.u).lpNorm<Eigen::Infinity>(), 1e-8);
    EXPECT_EQ(a.gammas, b.gammas);
    EXPECT_EQ(a.iterations, b.iterations);
    EXPECT_NEAR(a.solve_ms, b.solve_ms, 1e-8);
  }
}

TEST(Io, ReadTraceReportsBadCell) {
  std::ostringstream out;
  write_trace(flat_trace(2), out);
  std::string s = out.str();
  s.replace(s.rfind("0.25"), 4, "abc");
  std::istringstream in(s);
  try {
    read_trace(in, "t.csv");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("t.csv:3"), std::string::npos) << e.what();
  }
}

TEST(Io, MetricsPerfectTracking) {
  const MetricsReport m = compute_metrics(flat_trace(10), R2RProblem{});
  EXPECT_EQ(m.span_rmse, Vector::Zero(6));
  EXPECT_EQ(m.aggregate_rmse, 0.0);
  EXPECT_EQ(m.velocity_rmse, 0.0);
  EXPECT_EQ(m.mean_iterations, 3.0);
  EXPECT_TRUE(m.settling.empty());
}

TEST(Io, MetricsSingleSpanOffset) {
  ClosedLoopTrace t = flat_trace(10);
  for (StepRecord& r : t.rows) r.x[3] += 1.0;
  const MetricsReport m = compute_metrics(t, R2RProblem{});
  EXPECT_DOUBLE_EQ(m.span_rmse[3], 1.0);
  EXPECT_EQ(m.span_rmse[0], 0.0);
  EXPECT_DOUBLE_EQ(m.aggregate_rmse, std::sqrt(1.0 / 6.0));
}

TEST(Io, MetricsHardViolation) {
  ClosedLoopTrace t = flat_trace(3);
  t.rows[1].u[4] = 31.5;
  EXPECT_DOUBLE_EQ(compute_metrics(t, R2RProblem{}).max_hard_violation, 1.5);
}

TEST(Io, SettlingAfterTensionEvent) {
  ClosedLoopTrace t = flat_trace(20);
  for (std::size_t s = 10; s < 20; ++s) {
    t.rows[s].tension_ref[2] = 40.0;
    t.rows[s].x[2] = s < 14 ? 35.0 : 40.1;
  }
  const MetricsReport m = compute_metrics(t, R2RProblem{});
  ASSERT_EQ(m.settling.size(), 1u);
  EXPECT_DOUBLE_EQ(m.settling[0].event_time, 0.1);
  EXPECT_EQ(m.settling[0].spans, std::vector<Index>{2});
  ASSERT_TRUE(m.settling[0].settling.has_value());
  EXPECT_NEAR(*m.settling[0].settling, 0.04, 1e-12);
}

TEST(Io, UnsettledRunHasNoSettlingTime) {
  ClosedLoopTrace t = flat_trace(6);
  for (std::size_t s = 3; s < 6; ++s) t.rows[s].velocity_ref = Vector::Constant(6, 0.2);
  t.rows[5].x[0] = 20.0;
  const MetricsReport m = compute_metrics(t, R2RProblem{});
  ASSERT_EQ(m.settling.size(), 1u);
  EXPECT_EQ(m.settling[0].spans.size(), 6u);
  EXPECT_FALSE(m.settling[0].settling.has_value());
}

TEST(Io, EmitsFourPlots) {
  const fs::path dir = scratch_dir("plots");
  const auto paths = emit_plots(flat_trace(4), (dir / "").string());
  ASSERT_EQ(paths.size(), 4u);
  for (const auto& p : paths) {
    const std::string svg = slurp(p);
    EXPECT_EQ(svg.rfind("<?xml", 0), 0u) << p;
    EXPECT_NE(svg.find("</svg>"), std::string::npos) << p;
  }
}

TEST(Io, SingleRowPlotsUseMarkers) {
  for (const PlotPanel& panel : trace_panels(flat_trace(1))) {
    const std::string svg = render_svg(panel);
    EXPECT_EQ(svg.find("<polyline"), std::string::npos);
    EXPECT_NE(svg.find("<circle"), std::string::npos);
  }
}

TEST(Io, ReferenceBreakpointAtEventTime) {
  ClosedLoopTrace t = flat_trace(20);
  for (std::size_t s = 10; s < 20; ++s) t.rows[s].tension_ref[0] = 40.0;
  const std::string svg = render_svg(trace_panels(t)[0]);
  auto attr = [&](const char* name) {
    const std::regex re(std::string(name) + "=\"([-0-9.e+]+)\"");
    std::smatch m;
    EXPECT_TRUE(std::regex_search(svg, m, re)) << name;
    return std::stod(m[1]);
  };
  const double t0 = attr("data-t-min"), t1 = attr("data-t-max");
  const double left = attr("data-plot-left"), right = attr("data-plot-right");
  const std::regex line_re("data-series=\"Tref_1\"[^>]* points=\"([^\"]*)\"");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(svg, m, line_re));
  std::istringstream pts(m[1].str());
  std::string pt;
  double prev_y = std::nan(""), jump_x = std::nan("");
  while (pts >> pt) {
    const auto comma = pt.find(',');
    const double x = std::stod(pt.substr(0, comma)), y = std::stod(pt.substr(comma + 1));
    if (!std::isnan(prev_y) && y != prev_y) jump_x = x;
    prev_y = y;
  }
  ASSERT_FALSE(std::isnan(jump_x));
  const double t_jump = t0 + (jump_x - left) / (right - left) * (t1 - t0);
  EXPECT_NEAR(t_jump, 0.1, 0.01 * (t1 - t0));
}

TEST(Io, SubproblemDumpIsOneObjectPerLine) {
  ScenarioConfig sc = load_scenario(scenario_path("tension_step.json"));
  sc.problem.horizon = 3;
  ClosedLoopOptions o = closed_loop_options(sc);
  o.duration = 0.01;
  o.budget = 2;
  std::ostringstream dump;
  o.on_subproblem = [&dump](Index step, Index it, const ConvexSubproblem& p) { dump_subproblem(dump, step, it, p); };
  closed_loop(sc.problem, o);
  std::istringstream in(dump.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    EXPECT_EQ(j["step"], 0);
    EXPECT_EQ(j["iteration"], lines);
    ASSERT_EQ(j["stages"].size(), 3u);
    EXPECT_EQ(j["stages"][0]["W_x"].size(), 12u);
    EXPECT_EQ(j["stages"][0]["W_x"][0].size(), 57u);
    ++lines;
  }
  EXPECT_GE(lines, 1);
  EXPECT_LE(lines, 2);
}

TEST(Io, CliExitCodes) {
  const fs::path dir = scratch_dir("cli");
  ScenarioConfig sc = load_scenario(scenario_path("tension_step.json"));
  sc.duration = 0.05;
  sc.problem.tension_refs[2].events.clear();
  sc.controller = ControllerKind::lqr;
  const std::string scenario = (dir / "short.json").string();
  save_scenario(sc, scenario);

  EXPECT_EQ(run_cli("run --scenario " + scenario + " --out " + (dir / "out").string()), 0);
  for (const char* f : {"trace.csv", "metrics.json", "scenario.json", "tensions.svg", "velocities.svg",
                        "torques.svg", "adaptation.svg"}) {
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  }
  EXPECT_EQ(run_cli("report --trace " + (dir / "out" / "trace.csv").string()), 0);
  EXPECT_EQ(run_cli("run --scenario " + scenario + " --controller bogus"), 2);
  EXPECT_EQ(run_cli("run --scenario " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run_cli(""), 2);

  std::ofstream(dir / "broken.json") << "{\"schema_version\": 1,";
  EXPECT_EQ(run_cli("run --scenario " + (dir / "broken.json").string()), 2);
}
