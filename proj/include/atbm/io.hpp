#pragma once

// Scenario files (JSON, schema-versioned), trace CSV, metrics and the
// subproblem dump.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atbm/adapt.hpp"
#include "atbm/orchestrator.hpp"
#include "atbm/problem.hpp"
#include "atbm/subproblem.hpp"
#include "atbm/types.hpp"

namespace atbm {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::string notes;
  R2RProblem problem;
  AdaptConfig adapt;
  Index budget = 30;
  double duration = 1.0;
  std::uint64_t seed = 0;
  ControllerKind controller = ControllerKind::atbm;
  std::string output_dir = "out";
};

namespace detail {

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline std::string indexed(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

[[noreturn]] inline void invalid(const std::string& path, const std::string& msg) {
  throw ValidationError(path + ": " + msg);
}

inline const Json& member(const Json& obj, const std::string& path, const char* key) {
  if (!obj.is_object()) invalid(path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) invalid(join(path, key), "missing required field");
  return *it;
}

inline const Json* optional_member(const Json& obj, const std::string& path, const char* key) {
  if (!obj.is_object()) invalid(path, "expected an object");
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline double number(const Json& j, const std::string& path) {
  if (!j.is_number()) invalid(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) invalid(path, "must be finite");
  return v;
}

inline double positive(const Json& j, const std::string& path) {
  const double v = number(j, path);
  if (!(v > 0)) invalid(path, "must be positive");
  return v;
}

inline Index count(const Json& j, const std::string& path, Index min) {
  if (!j.is_number_integer()) invalid(path, "expected an integer");
  const auto v = j.get<std::int64_t>();
  if (v < min) invalid(path, "must be at least " + std::to_string(min));
  return static_cast<Index>(v);
}

inline Vector vector(const Json& j, const std::string& path, Index size) {
  if (!j.is_array()) invalid(path, "expected an array");
  if (static_cast<Index>(j.size()) != size) {
    invalid(path, "expected " + std::to_string(size) + " entries, found " + std::to_string(j.size()));
  }
  Vector v(size);
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = number(j[i], indexed(path, i));
  return v;
}

inline Json to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline StepSchedule schedule(const Json& j, const std::string& path, double duration) {
  StepSchedule s;
  s.initial = number(member(j, path, "initial"), join(path, "initial"));
  const std::string ep = join(path, "events");
  const Json* events = optional_member(j, path, "events");
  if (!events) return s;
  if (!events->is_array()) invalid(ep, "expected an array");
  for (std::size_t i = 0; i < events->size(); ++i) {
    const std::string p = indexed(ep, i);
    const Json& e = (*events)[i];
    StepSchedule::Event ev;
    ev.time = number(member(e, p, "time_s"), join(p, "time_s"));
    ev.value = number(member(e, p, "value"), join(p, "value"));
    if (ev.time < 0 || ev.time > duration) {
      invalid(join(p, "time_s"), "event index " + std::to_string(i) + " lies outside [0, duration]");
    }
    if (!s.events.empty() && !(ev.time > s.events.back().time)) {
      invalid(join(p, "time_s"), "event index " + std::to_string(i) + " is not strictly after the previous event");
    }
    s.events.push_back(ev);
  }
  return s;
}

inline Json schedule_json(const StepSchedule& s) {
  Json events = Json::array();
  for (const auto& e : s.events) events.push_back({{"time_s", e.time}, {"value", e.value}});
  return {{"initial", s.initial}, {"events", events}};
}

inline PlantParams plant_from_json(const Json& j, const std::string& path) {
  PlantParams p;
  p.rollers = count(member(j, path, "rollers"), join(path, "rollers"), 1);
  const Index n = p.rollers;
  p.stiffness = positive(member(j, path, "stiffness_N"), join(path, "stiffness_N"));
  p.span_lengths = vector(member(j, path, "span_lengths_m"), join(path, "span_lengths_m"), n);
  p.inertias = vector(member(j, path, "inertias_kgm2"), join(path, "inertias_kgm2"), n);
  p.frictions = vector(member(j, path, "frictions"), join(path, "frictions"), n);
  p.radii = vector(member(j, path, "radii_m"), join(path, "radii_m"), n);
  p.noise_gains = vector(member(j, path, "noise_gains"), join(path, "noise_gains"), n);
  p.dt = positive(member(j, path, "dt_s"), join(path, "dt_s"));
  auto all_positive = [&](const Vector& v, const char* key) {
    for (Index i = 0; i < v.size(); ++i) {
      if (!(v[i] > 0)) invalid(indexed(join(path, key), static_cast<std::size_t>(i)), "must be positive");
    }
  };
  all_positive(p.span_lengths, "span_lengths_m");
  all_positive(p.inertias, "inertias_kgm2");
  all_positive(p.radii, "radii_m");
  for (Index i = 0; i < n; ++i) {
    if (p.frictions[i] < 0) invalid(indexed(join(path, "frictions"), static_cast<std::size_t>(i)), "must be non-negative");
    if (p.noise_gains[i] < 0) {
      invalid(indexed(join(path, "noise_gains"), static_cast<std::size_t>(i)), "must be non-negative");
    }
  }
  return p;
}

inline Json plant_json(const PlantParams& p) {
  return {{"rollers", p.rollers},
          {"stiffness_N", p.stiffness},
          {"span_lengths_m", to_json(p.span_lengths)},
          {"inertias_kgm2", to_json(p.inertias)},
          {"frictions", to_json(p.frictions)},
          {"radii_m", to_json(p.radii)},
          {"noise_gains", to_json(p.noise_gains)},
          {"dt_s", p.dt}};
}

inline std::pair<double, double> bounds(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2) invalid(path, "expected [lower, upper]");
  const double lo = number(j[0], indexed(path, 0));
  const double hi = number(j[1], indexed(path, 1));
  if (!(lo < hi)) invalid(path, "lower bound must be below upper bound");
  return {lo, hi};
}

inline AdaptConfig adapt_from_json(const Json& j, const std::string& path, Index classes) {
  AdaptConfig c;
  auto num = [&](const char* key, double& out) {
    if (const Json* v = optional_member(j, path, key)) out = number(*v, join(path, key));
  };
  num("beta_exp", c.beta_exp);
  num("beta_con", c.beta_con);
  num("delta_init", c.delta_init);
  num("delta_min", c.delta_min);
  num("delta_max", c.delta_max);
  num("tau_feas", c.tau_feas);
  num("tau_viol", c.tau_viol);
  num("rho_mu", c.rho_mu);
  num("rho_gamma", c.rho_gamma);
  num("mu_init", c.mu_init);
  num("mu_max", c.mu_max);
  num("eps_feas", c.eps_feas);
  num("eps_z", c.eps_z);
  auto vec = [&](const char* key, Vector& out) {
    if (const Json* v = optional_member(j, path, key)) out = vector(*v, join(path, key), classes);
  };
  vec("gamma_init", c.gamma_init);
  vec("gamma_max", c.gamma_max);
  vec("tau_soft", c.tau_soft);
  try {
    c.validate();
  } catch (const ValidationError& e) {
    invalid(path, e.what());
  }
  return c;
}

inline Json adapt_json(const AdaptConfig& c) {
  return {{"beta_exp", c.beta_exp},   {"beta_con", c.beta_con},     {"delta_init", c.delta_init},
          {"delta_min", c.delta_min}, {"delta_max", c.delta_max},   {"tau_feas", c.tau_feas},
          {"tau_viol", c.tau_viol},   {"rho_mu", c.rho_mu},         {"rho_gamma", c.rho_gamma},
          {"mu_init", c.mu_init},     {"mu_max", c.mu_max},         {"eps_feas", c.eps_feas},
          {"eps_z", c.eps_z},         {"gamma_init", to_json(c.gamma_init)},
          {"gamma_max", to_json(c.gamma_max)},                      {"tau_soft", to_json(c.tau_soft)}};
}

}  // namespace detail

inline ScenarioConfig scenario_from_json(const Json& j) {
  using namespace detail;
  if (!j.is_object()) invalid("<root>", "expected an object");
  const Json& version = member(j, "", "schema_version");
  if (!version.is_number_integer() || version.get<int>() != kSchemaVersion) {
    invalid("schema_version", "unsupported version (expected " + std::to_string(kSchemaVersion) + ")");
  }
  ScenarioConfig s;
  if (const Json* name = optional_member(j, "", "name")) {
    if (!name->is_string()) invalid("name", "expected a string");
    s.name = name->get<std::string>();
  }
  if (const Json* notes = optional_member(j, "", "notes")) {
    if (!notes->is_string()) invalid("notes", "expected a string");
    s.notes = notes->get<std::string>();
  }
  const Json& seed = member(j, "", "seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
    invalid("seed", "expected a non-negative integer");
  }
  s.seed = seed.get<std::uint64_t>();
  s.duration = positive(member(j, "", "duration_s"), "duration_s");
  if (const Json* b = optional_member(j, "", "budget")) s.budget = count(*b, "budget", 1);
  if (const Json* c = optional_member(j, "", "controller")) {
    if (!c->is_string()) invalid("controller", "expected a string");
    try {
      s.controller = parse_controller(c->get<std::string>());
    } catch (const ValidationError& e) {
      invalid("controller", e.what());
    }
  }
  if (const Json* o = optional_member(j, "", "output_dir")) {
    if (!o->is_string() || o->get<std::string>().empty()) invalid("output_dir", "expected a non-empty string");
    s.output_dir = o->get<std::string>();
  }

  R2RProblem& p = s.problem;
  p.plant = plant_from_json(member(j, "", "plant"), "plant");
  const Index n = p.plant.rollers;
  const Json& pj = member(j, "", "problem");
  p.horizon = count(member(pj, "problem", "horizon"), "problem.horizon", 2);
  p.q = vector(member(pj, "problem", "q_diag"), "problem.q_diag", 2 * n);
  p.r = vector(member(pj, "problem", "r_diag"), "problem.r_diag", n);
  p.s = vector(member(pj, "problem", "s_diag"), "problem.s_diag", n);
  for (const auto& [key, v] : {std::pair<const char*, const Vector*>{"q_diag", &p.q}, {"r_diag", &p.r}, {"s_diag", &p.s}}) {
    for (Index i = 0; i < v->size(); ++i) {
      if ((*v)[i] < 0) invalid(indexed(join("problem", key), static_cast<std::size_t>(i)), "weights must be non-negative");
    }
  }
  std::tie(p.tension_min, p.tension_max) = bounds(member(pj, "problem", "tension_bounds_N"), "problem.tension_bounds_N");
  std::tie(p.velocity_min, p.velocity_max) =
      bounds(member(pj, "problem", "velocity_bounds_mps"), "problem.velocity_bounds_mps");
  p.torque_limit = positive(member(pj, "problem", "torque_limit_Nm"), "problem.torque_limit_Nm");
  p.soft_tension_max = vector(member(pj, "problem", "soft_tension_max_N"), "problem.soft_tension_max_N", n);
  p.soft_tension_min = vector(member(pj, "problem", "soft_tension_min_N"), "problem.soft_tension_min_N", n);
  for (Index i = 0; i < n; ++i) {
    if (!(p.soft_tension_min[i] < p.soft_tension_max[i])) {
      invalid(indexed("problem.soft_tension_min_N", static_cast<std::size_t>(i)), "must be below soft_tension_max_N");
    }
  }

  const Json& refs = member(j, "", "tension_references");
  if (!refs.is_array() || static_cast<Index>(refs.size()) != n) {
    invalid("tension_references", "expected one schedule per span (" + std::to_string(n) + ")");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const std::string path = indexed("tension_references", i);
    p.tension_refs.push_back(schedule(refs[i], path, s.duration));
    auto check = [&](double v, const std::string& where) {
      if (!(v > p.tension_min && v < p.tension_max) || !(v < p.plant.stiffness)) {
        invalid(where, "reference tension must lie inside the hard tension bounds and below EA");
      }
    };
    check(p.tension_refs.back().initial, join(path, "initial"));
    for (std::size_t e = 0; e < p.tension_refs.back().events.size(); ++e) {
      check(p.tension_refs.back().events[e].value, join(indexed(join(path, "events"), e), "value"));
    }
  }
  p.upstream = schedule(member(j, "", "upstream_velocity"), "upstream_velocity", s.duration);
  if (!(p.upstream.initial > 0)) invalid("upstream_velocity.initial", "must be positive");
  for (std::size_t e = 0; e < p.upstream.events.size(); ++e) {
    if (!(p.upstream.events[e].value > 0)) {
      invalid(join(indexed("upstream_velocity.events", e), "value"), "must be positive");
    }
  }

  const Json* aj = optional_member(j, "", "adapt");
  s.adapt = aj ? adapt_from_json(*aj, "adapt", R2RProblem::kSoftClasses) : AdaptConfig{};
  if (s.adapt.soft_classes() != R2RProblem::kSoftClasses) invalid("adapt", "expected two soft classes");
  try {
    p.validate();
  } catch (const ContractViolation& e) {
    invalid("problem", e.what());
  }
  return s;
}

/// Canonical form: every field written, keys sorted.
inline Json scenario_to_json(const ScenarioConfig& s) {
  using namespace detail;
  const R2RProblem& p = s.problem;
  Json refs = Json::array();
  for (const auto& r : p.tension_refs) refs.push_back(schedule_json(r));
  return {{"schema_version", kSchemaVersion},
          {"name", s.name},
          {"notes", s.notes},
          {"seed", s.seed},
          {"duration_s", s.duration},
          {"budget", s.budget},
          {"controller", to_string(s.controller)},
          {"output_dir", s.output_dir},
          {"plant", plant_json(p.plant)},
          {"problem",
           {{"horizon", p.horizon},
            {"q_diag", to_json(p.q)},
            {"r_diag", to_json(p.r)},
            {"s_diag", to_json(p.s)},
            {"tension_bounds_N", {p.tension_min, p.tension_max}},
            {"velocity_bounds_mps", {p.velocity_min, p.velocity_max}},
            {"torque_limit_Nm", p.torque_limit},
            {"soft_tension_max_N", to_json(p.soft_tension_max)},
            {"soft_tension_min_N", to_json(p.soft_tension_min)}}},
          {"tension_references", refs},
          {"upstream_velocity", schedule_json(p.upstream)},
          {"adapt", adapt_json(s.adapt)}};
}

inline std::string dump_scenario(const ScenarioConfig& s) { return scenario_to_json(s).dump(2) + "\n"; }

inline ScenarioConfig parse_scenario(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(std::string("parse error: ") + e.what());
  }
  return scenario_from_json(j);
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scenario file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_scenario(buf.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void save_scenario(const ScenarioConfig& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << dump_scenario(s);
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline ClosedLoopOptions closed_loop_options(const ScenarioConfig& s) {
  ClosedLoopOptions o;
  o.kind = s.controller;
  o.config = s.adapt;
  o.budget = s.budget;
  o.duration = s.duration;
  o.seed = s.seed;
  return o;
}

// Trace CSV ---------------------------------------------------------------

inline std::vector<std::string> trace_header(Index rollers, Index soft_classes) {
  std::vector<std::string> h{"time_s"};
  for (const char* base : {"T", "v", "u", "Tref", "vref"}) {
    for (Index i = 1; i <= rollers; ++i) h.push_back(std::string(base) + "_" + std::to_string(i));
  }
  for (const char* name : {"nu_dyn", "nu_hard", "delta", "mu"}) h.emplace_back(name);
  for (Index j = 1; j <= soft_classes; ++j) h.push_back("gamma_" + std::to_string(j));
  h.emplace_back("iters");
  h.emplace_back("solve_ms");
  return h;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_trace(const ClosedLoopTrace& t, std::ostream& out) {
  const auto header = trace_header(t.rollers, t.soft_classes);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const StepRecord& r : t.rows) {
    out << format_number(r.time);
    for (const Vector* v : {&r.x, &r.u, &r.tension_ref, &r.velocity_ref}) {
      for (Index i = 0; i < v->size(); ++i) out << "," << format_number((*v)[i]);
    }
    for (double v : {r.nu_dyn, r.nu_hard, r.delta, r.mu}) out << "," << format_number(v);
    for (Index j = 0; j < r.gammas.size(); ++j) out << "," << format_number(r.gammas[j]);
    out << "," << r.iterations << "," << format_number(r.solve_ms) << "\n";
  }
}

inline void write_trace(const ClosedLoopTrace& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_trace(t, out);
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline ClosedLoopTrace read_trace(std::istream& in, const std::string& name = "<trace>") {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(name + ": empty file");
  const auto header = split(line);
  Index rollers = 0;
  while (std::find(header.begin(), header.end(), "T_" + std::to_string(rollers + 1)) != header.end()) ++rollers;
  Index classes = 0;
  while (std::find(header.begin(), header.end(), "gamma_" + std::to_string(classes + 1)) != header.end()) ++classes;
  if (rollers == 0 || header != trace_header(rollers, classes)) throw ValidationError(name + ": unrecognized header");

  ClosedLoopTrace t;
  t.rollers = rollers;
  t.soft_classes = classes;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw ValidationError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                            " columns, found " + std::to_string(cells.size()));
    }
    std::vector<double> v(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      try {
        std::size_t used = 0;
        v[i] = std::stod(cells[i], &used);
        if (used != cells[i].size()) throw std::invalid_argument(cells[i]);
      } catch (const std::exception&) {
        throw ValidationError(name + ":" + std::to_string(lineno) + ": column '" + header[i] + "' is not a number");
      }
    }
    StepRecord r;
    std::size_t at = 0;
    r.time = v[at++];
    auto take = [&](Index k) {
      Vector out(k);
      for (Index i = 0; i < k; ++i) out[i] = v[at++];
      return out;
    };
    Vector t_part = take(rollers), v_part = take(rollers);
    r.x = make_state(t_part, v_part);
    r.u = take(rollers);
    r.tension_ref = take(rollers);
    r.velocity_ref = take(rollers);
    r.nu_dyn = v[at++];
    r.nu_hard = v[at++];
    r.delta = v[at++];
    r.mu = v[at++];
    r.gammas = take(classes);
    r.iterations = static_cast<Index>(std::llround(v[at++]));
    r.solve_ms = v[at++];
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline ClosedLoopTrace read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace '" + path + "'");
  return read_trace(in, path);
}

// Metrics -----------------------------------------------------------------

/// A change of any reference between two consecutive rows. Spans whose
/// tension reference moved are the affected spans; a change of the velocity
/// references alone (an upstream event) affects every span.
struct SettlingTime {
  double event_time = 0;
  std::vector<Index> spans;
  std::optional<double> settling;  // empty when the run ends outside the band
};

inline constexpr double kSettlingBand = 0.02;

struct MetricsReport {
  Vector span_rmse;
  double aggregate_rmse = 0;
  double velocity_rmse = 0;
  double max_hard_violation = 0;
  std::vector<SettlingTime> settling;
  double mean_solve_ms = 0;
  double max_solve_ms = 0;
  double mean_iterations = 0;
  Index max_iterations = 0;
  Index steps = 0;
};

inline double hard_violation(const R2RProblem& bounds, const StepRecord& r, Index n) {
  double worst = 0;
  for (Index i = 0; i < n; ++i) {
    const double t = r.x[i], v = r.x[n + i], u = r.u[i];
    worst = std::max({worst, bounds.tension_min - t, t - bounds.tension_max, bounds.velocity_min - v,
                      v - bounds.velocity_max, std::abs(u) - bounds.torque_limit});
  }
  return worst;
}

/// Settling time: from the event until the first sample after which every
/// affected span stays within 2% of its new reference up to the next event.
inline MetricsReport compute_metrics(const ClosedLoopTrace& t, const R2RProblem& bounds) {
  require(!t.rows.empty(), "compute_metrics: empty trace");
  const Index n = t.rollers;
  MetricsReport m;
  m.steps = static_cast<Index>(t.rows.size());
  m.span_rmse = Vector::Zero(n);
  double vel = 0;
  for (const StepRecord& r : t.rows) {
    m.span_rmse += (r.x.head(n) - r.tension_ref).cwiseAbs2();
    vel += (r.x.tail(n) - r.velocity_ref).squaredNorm();
    m.max_hard_violation = std::max(m.max_hard_violation, hard_violation(bounds, r, n));
    m.mean_solve_ms += r.solve_ms;
    m.max_solve_ms = std::max(m.max_solve_ms, r.solve_ms);
    m.mean_iterations += static_cast<double>(r.iterations);
    m.max_iterations = std::max(m.max_iterations, r.iterations);
  }
  const double steps = static_cast<double>(m.steps);
  m.aggregate_rmse = std::sqrt(m.span_rmse.sum() / (steps * static_cast<double>(n)));
  m.span_rmse = (m.span_rmse / steps).cwiseSqrt();
  m.velocity_rmse = std::sqrt(vel / (steps * static_cast<double>(n)));
  m.mean_solve_ms /= steps;
  m.mean_iterations /= steps;

  std::vector<std::size_t> starts;
  for (std::size_t s = 1; s < t.rows.size(); ++s) {
    const StepRecord& a = t.rows[s - 1];
    const StepRecord& b = t.rows[s];
    if (a.tension_ref != b.tension_ref || a.velocity_ref != b.velocity_ref) starts.push_back(s);
  }
  for (std::size_t e = 0; e < starts.size(); ++e) {
    const std::size_t s0 = starts[e];
    const std::size_t s1 = e + 1 < starts.size() ? starts[e + 1] : t.rows.size();
    SettlingTime st;
    st.event_time = t.rows[s0].time;
    for (Index i = 0; i < n; ++i) {
      if (t.rows[s0 - 1].tension_ref[i] != t.rows[s0].tension_ref[i]) st.spans.push_back(i);
    }
    if (st.spans.empty()) {
      for (Index i = 0; i < n; ++i) st.spans.push_back(i);
    }
    std::optional<std::size_t> last_out;
    for (std::size_t s = s0; s < s1; ++s) {
      for (Index i : st.spans) {
        const double ref = t.rows[s].tension_ref[i];
        if (std::abs(t.rows[s].x[i] - ref) > kSettlingBand * std::abs(ref)) last_out = s;
      }
    }
    if (!last_out) {
      st.settling = 0.0;
    } else if (*last_out + 1 < s1) {
      st.settling = t.rows[*last_out + 1].time - st.event_time;
    }
    m.settling.push_back(std::move(st));
  }
  return m;
}

inline Json metrics_json(const MetricsReport& m) {
  Json settling = Json::array();
  for (const SettlingTime& s : m.settling) {
    Json spans = Json::array();
    for (Index i : s.spans) spans.push_back(i + 1);
    settling.push_back({{"event_time_s", s.event_time},
                        {"spans", spans},
                        {"settling_time_s", s.settling ? Json(*s.settling) : Json(nullptr)}});
  }
  return {{"span_tension_rmse_N", detail::to_json(m.span_rmse)},
          {"aggregate_tension_rmse_N", m.aggregate_rmse},
          {"velocity_rmse_mps", m.velocity_rmse},
          {"max_hard_violation", m.max_hard_violation},
          {"settling", settling},
          {"solver",
           {{"mean_solve_ms", m.mean_solve_ms},
            {"max_solve_ms", m.max_solve_ms},
            {"mean_outer_iterations", m.mean_iterations},
            {"max_outer_iterations", m.max_iterations}}},
          {"steps", m.steps}};
}

inline std::string format_metrics(const MetricsReport& m) {
  std::ostringstream out;
  out << "steps                     " << m.steps << "\n";
  for (Index i = 0; i < m.span_rmse.size(); ++i) {
    out << "tension rmse span " << i + 1 << "       " << format_number(m.span_rmse[i]) << " N\n";
  }
  out << "aggregate tension rmse    " << format_number(m.aggregate_rmse) << " N\n";
  out << "velocity rmse             " << format_number(m.velocity_rmse) << " m/s\n";
  out << "max hard violation        " << format_number(m.max_hard_violation) << "\n";
  for (const SettlingTime& s : m.settling) {
    out << "settling after t=" << format_number(s.event_time) << " s  "
        << (s.settling ? format_number(*s.settling) + " s" : std::string("not settled")) << "\n";
  }
  out << "outer iterations          mean " << format_number(m.mean_iterations) << ", max " << m.max_iterations << "\n";
  out << "solve time                mean " << format_number(m.mean_solve_ms) << " ms, max "
      << format_number(m.max_solve_ms) << " ms\n";
  return out.str();
}

// Subproblem dump -----------------------------------------------------------

inline Json matrix_json(const Matrix& a) {
  Json rows = Json::array();
  for (Index i = 0; i < a.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(a.cols()));
    for (Index j = 0; j < a.cols(); ++j) row[static_cast<std::size_t>(j)] = a(i, j);
    rows.push_back(row);
  }
  return rows;
}

/// One JSON object per line.
inline void dump_subproblem(std::ostream& out, Index step, Index iteration, const ConvexSubproblem& p) {
  Json stages = Json::array();
  for (const StageBundle& s : p.bundles.stages) {
    Json soft = Json::array();
    for (const Matrix& w : s.soft) soft.push_back(matrix_json(w));
    stages.push_back({{"W_x", matrix_json(s.x)},
                      {"W_u", matrix_json(s.u)},
                      {"W_f", matrix_json(s.f)},
                      {"W_r", matrix_json(s.r)},
                      {"W_hard", matrix_json(s.hard)},
                      {"W_soft", soft}});
  }
  const Json j = {{"step", step},
                  {"iteration", iteration},
                  {"mu", p.mu},
                  {"gammas", detail::to_json(p.gammas)},
                  {"x_init", detail::to_json(p.x_init)},
                  {"center_column", p.bundles.center_column},
                  {"stages", stages}};
  out << j.dump() << "\n";
}

// Bounds and monitors ------------------------------------------------------

inline Json lipschitz_json(const LipschitzEstimates& e) {
  return {{"L_r", e.l_r}, {"L_F", e.l_f}, {"L_c", e.l_c}, {"R", e.r_bound}, {"method", e.method}};
}

inline Json bound_report_json(const BoundReport& r) {
  return {{"L_phi", r.l_phi},
          {"delta_bar", r.delta_bar},
          {"mu_bar", r.mu_bar},
          {"K_star", r.k_star},
          {"K_delta", r.k_delta},
          {"N_viol", r.n_viol},
          {"K_feas", r.k_feas},
          {"phi_at_K_star", r.phi_at_k_star},
          {"phi_min", r.phi_min},
          {"phi_min_source", r.phi_min_source},
          {"C_approx", kApproximationConstant}};
}

struct MonitorSummary {
  Index satisfied = 0;
  Index violated = 0;
  Index not_applicable = 0;

  void add(MonitorOutcome o) {
    if (o == MonitorOutcome::satisfied) ++satisfied;
    if (o == MonitorOutcome::violated) ++violated;
    if (o == MonitorOutcome::not_applicable) ++not_applicable;
  }
  /// Share of applicable checks that held; 1 when none applied.
  double pass_rate() const {
    const Index applicable = satisfied + violated;
    return applicable ? static_cast<double>(satisfied) / static_cast<double>(applicable) : 1.0;
  }
};

struct MonitorTotals {
  MonitorSummary approximation, variation, decrease;
};

inline MonitorTotals summarize_monitors(const ClosedLoopTrace& t) {
  MonitorTotals m;
  for (const StepSummary& s : t.solves) {
    for (const MonitorRecord& r : s.monitors) {
      m.approximation.add(r.approximation.outcome);
      m.variation.add(r.variation.outcome);
      m.decrease.add(r.decrease.outcome);
    }
  }
  return m;
}

inline Json monitor_totals_json(const MonitorTotals& m) {
  auto one = [](const MonitorSummary& s) {
    return Json{{"satisfied", s.satisfied}, {"violated", s.violated}, {"not_applicable", s.not_applicable},
                {"pass_rate", s.pass_rate()}};
  };
  return {{"approximation", one(m.approximation)}, {"variation", one(m.variation)}, {"decrease", one(m.decrease)}};
}

/// One row per monitored outer iteration.
inline void write_monitors(const ClosedLoopTrace& t, std::ostream& out) {
  out << "step,iteration,phi_prev,phi_next,l_phi,radius,delta_bar,mu";
  for (const char* check : {"approximation", "variation", "decrease"}) {
    out << "," << check << "_lhs," << check << "_rhs," << check;
  }
  out << "\n";
  for (std::size_t s = 0; s < t.solves.size(); ++s) {
    const auto& mons = t.solves[s].monitors;
    for (std::size_t i = 0; i < mons.size(); ++i) {
      const MonitorRecord& r = mons[i];
      out << s << "," << i;
      for (double v : {r.phi_prev, r.phi_next, r.l_phi, r.radius, r.delta_bar, r.mu}) out << "," << format_number(v);
      for (const MonitorCheck* c : {&r.approximation, &r.variation, &r.decrease}) {
        out << "," << format_number(c->lhs) << "," << format_number(c->rhs) << "," << to_string(c->outcome);
      }
      out << "\n";
    }
  }
}

}  // namespace atbm
