#pragma once

// JSON configuration for scenarios and batches.
//
// Every tunable constant is listed once in a `fields` visitor per struct, so
// the same table drives reading, writing the defaults and rejecting unknown
// keys. Unknown keys and type mismatches raise ConfigError.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "platoon/sim.hpp"

namespace platoon {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace config_detail {

// Reads fields from a JSON object and remembers which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void operator()(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      read(j_.at(key), value, path_ + "." + key);
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  template <class T, class F>
  void nested(const char* key, T& value, F&& fields_fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Reader sub(j_.at(key), path_ + "." + key);
    fields_fn(sub, value);
    sub.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  template <class T>
  static void read(const json& j, T& value, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError(where + ": expected a boolean");
      value = j.get<bool>();
    } else if constexpr (std::is_arithmetic_v<T>) {
      if (!j.is_number()) throw ConfigError(where + ": expected a number");
      value = j.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError(where + ": expected a string");
      value = j.get<std::string>();
    } else {
      if (!j.is_array()) throw ConfigError(where + ": expected an array");
      value = j.get<T>();
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <class T>
  void operator()(const char* key, T& value) {
    j_[key] = value;
  }
  template <class T, class F>
  void nested(const char* key, T& value, F&& fields_fn) {
    Writer sub;
    fields_fn(sub, value);
    j_[key] = sub.j_;
  }
  json j_ = json::object();
};

}  // namespace config_detail

template <class V>
void fields(V& v, FuelParams& f) {
  v("willans_eff", f.willans_eff);
  v("lhv", f.lhv);
  v("p_idle", f.p_idle);
}

template <class V>
void fields(V& v, ShiftMap& s) {
  v("omega_down", s.omega_down);
  v("omega_max", s.omega_max);
  v("hysteresis", s.hysteresis);
}

template <class V>
void fields(V& v, TruckParams& p) {
  v("mass", p.mass);
  v("length", p.length);
  v("wheel_radius", p.wheel_radius);
  v("frontal_area", p.frontal_area);
  v("drag_coef", p.drag_coef);
  v("rolling_coef", p.rolling_coef);
  v("final_drive", p.final_drive);
  v("gear_ratios", p.gear_ratios);
  v("gear_efficiency", p.gear_efficiency);
  v("tau_max", p.tau_max);
  v("p_max", p.p_max);
  v("brake_decel", p.brake_decel);
  v("tau_d", p.tau_d);
  v("e0", p.e0);
  v("e1", p.e1);
  v("rho", p.rho);
  v("grav", p.grav);
  v.nested("fuel", p.fuel, [](auto& w, FuelParams& f) { fields(w, f); });
  v.nested("shift", p.shift, [](auto& w, ShiftMap& s) { fields(w, s); });
}

template <class V>
void fields(V& v, DragReductionModel& m) {
  v("a", m.a);
  v("b", m.b);
  v("c", m.c);
  v("d", m.d_coef);
  v("gap_max", m.gap_max);
}

template <class V>
void fields(V& v, OcpConfig& c) {
  v("n_stages", c.n_stages);
  v("n_nodes", c.n_nodes);
  v("dt", c.dt);
  v("q_t", c.q_t);
  v("q_u", c.q_u);
  v("q_v", c.q_v);
  v("q_d", c.q_d);
  v("q_c", c.q_c);
  v("q_eps", c.q_eps);
  v("headway", c.headway);
  v("v_max", c.v_max);
  v("d_min", c.d_min);
  v("v_ref", c.v_ref);
  v("s_f", c.s_f);
  v("t_f", c.t_f);
  v("preview_samples", c.preview_samples);
  v("preview_margin", c.preview_margin);
  v("max_follower_age", c.max_follower_age);
  v.nested("drag", c.drag, [](auto& w, DragReductionModel& m) { fields(w, m); });
}

template <class V>
void fields(V& v, CaccGains& g) {
  v("k_p", g.k_p);
  v("k_v", g.k_v);
  v("k_ff", g.k_ff);
  v("headway", g.headway);
}

template <class V>
void fields(V& v, nlp::SqpOptions& o) {
  v("kkt_tol", o.kkt_tol);
  v("max_iter", o.max_iter);
  v("ls_contraction", o.ls_contraction);
  v("min_step", o.min_step);
  v("armijo", o.armijo);
  v("lambda_init", o.lambda_init);
  v("lambda_min", o.lambda_min);
  v("lambda_max", o.lambda_max);
  v("min_curvature", o.min_curvature);
}

/// Route selection. `kind` is "s_road", "rolling" or "file".
struct RouteSpec {
  std::string kind = "s_road";
  std::string path;  ///< CSV for kind = "file", relative to the config file
  double downhill_grade = -0.04;
  double uphill_grade = 0.04;
  std::vector<double> segments{5000, 10000, 5000, 10000, 5000};
  double transition = 500.0;
  double length = 70000.0;  ///< kind = "rolling"

  GradeProfile build(const std::filesystem::path& base_dir = {}) const {
    if (kind == "s_road") return make_s_road(downhill_grade, uphill_grade, segments, transition);
    if (kind == "rolling") return make_rolling_route(length);
    if (kind == "file") {
      std::filesystem::path p(path);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      return load_route(p.string());
    }
    throw ConfigError("route.kind must be s_road, rolling or file (got '" + kind + "')");
  }
};

template <class V>
void fields(V& v, RouteSpec& r) {
  v("kind", r.kind);
  v("path", r.path);
  v("downhill_grade", r.downhill_grade);
  v("uphill_grade", r.uphill_grade);
  v("segments", r.segments);
  v("transition", r.transition);
  v("length", r.length);
}

/// Permutation study settings.
struct BatchSettings {
  std::string id = "batch";
  std::vector<double> mass_set{14000, 22000, 30000, 38000};
  int platoon_size = 3;
  std::vector<std::string> controllers{"considerate", "anticipative"};
  int jobs = 1;
};

template <class V>
void fields(V& v, BatchSettings& b) {
  v("id", b.id);
  v("mass_set", b.mass_set);
  v("platoon_size", b.platoon_size);
  v("controllers", b.controllers);
  v("jobs", b.jobs);
}

/// Everything one config file describes.
struct ExperimentConfig {
  std::string name = "scenario";
  RouteSpec route;
  TruckParams truck_defaults;
  /// Per-truck overrides of truck_defaults (front to back). Each entry may
  /// also carry "v0".
  json trucks = json::array();
  std::vector<double> initial_gaps;
  double v0 = 25.0;
  double s_start = 0.0;
  double s_end = -1.0;
  double t_max = 1e9;
  double dt_ctrl = 0.2;
  int plant_substeps = 10;
  double disengage_gap = 110.0;
  double drop_probability = 0.0;
  int staleness_limit = 3;
  std::uint64_t seed = 0;
  std::string message_log;
  std::string controller = "considerate";
  OcpConfig ocp;
  CaccGains cacc;
  nlp::SqpOptions sqp;
  DragReductionModel plant_drag = default_drag_model();
  BatchSettings batch;
  std::filesystem::path base_dir;  ///< directory of the config file
};

template <class V>
void fields(V& v, ExperimentConfig& e) {
  v("name", e.name);
  v.nested("route", e.route, [](auto& w, RouteSpec& r) { fields(w, r); });
  v.nested("truck_defaults", e.truck_defaults, [](auto& w, TruckParams& p) { fields(w, p); });
  v("initial_gaps", e.initial_gaps);
  v("v0", e.v0);
  v("s_start", e.s_start);
  v("s_end", e.s_end);
  v("t_max", e.t_max);
  v("dt_ctrl", e.dt_ctrl);
  v("plant_substeps", e.plant_substeps);
  v("disengage_gap", e.disengage_gap);
  v("drop_probability", e.drop_probability);
  v("staleness_limit", e.staleness_limit);
  v("seed", e.seed);
  v("message_log", e.message_log);
  v("controller", e.controller);
  v.nested("ocp", e.ocp, [](auto& w, OcpConfig& c) { fields(w, c); });
  v.nested("cacc", e.cacc, [](auto& w, CaccGains& g) { fields(w, g); });
  v.nested("sqp", e.sqp, [](auto& w, nlp::SqpOptions& o) { fields(w, o); });
  v.nested("plant_drag", e.plant_drag, [](auto& w, DragReductionModel& m) { fields(w, m); });
  v.nested("batch", e.batch, [](auto& w, BatchSettings& b) { fields(w, b); });
}

inline ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig e;
  config_detail::Reader r(j, "config");
  fields(r, e);
  r("trucks", e.trucks);
  r.finish();
  e.base_dir = base_dir;
  if (!e.trucks.is_array()) throw ConfigError("config.trucks: expected an array");
  auto check_kind = [](const std::string& name, const std::string& where) {
    try {
      parse_controller_kind(name);
    } catch (const std::invalid_argument& err) {
      throw ConfigError(where + ": " + err.what());
    }
  };
  check_kind(e.controller, "config.controller");
  for (const auto& name : e.batch.controllers) check_kind(name, "config.batch.controllers");
  return e;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j, std::filesystem::path(path).parent_path());
}

/// The full default configuration, every key present.
inline json default_config_json() {
  ExperimentConfig e;
  config_detail::Writer w;
  fields(w, e);
  w.j_["trucks"] = json::array({json{{"mass", 14000.0}}, json{{"mass", 38000.0}}, json{{"mass", 38000.0}}});
  return w.j_;
}

/// Truck parameters for position k: the defaults with the k-th override.
inline TruckSetup truck_setup(const ExperimentConfig& e, std::size_t k) {
  TruckSetup t;
  t.params = e.truck_defaults;
  t.v0 = e.v0;
  if (k < e.trucks.size()) {
    json over = e.trucks[k];
    if (!over.is_object()) throw ConfigError("config.trucks[" + std::to_string(k) + "]: expected an object");
    if (over.contains("v0")) {
      if (!over["v0"].is_number()) throw ConfigError("config.trucks[" + std::to_string(k) + "].v0: expected a number");
      t.v0 = over["v0"].get<double>();
      over.erase("v0");
    }
    config_detail::Reader r(over, "config.trucks[" + std::to_string(k) + "]");
    fields(r, t.params);
    r.finish();
  }
  return t;
}

/// Scenario for the configured trucks, or for `masses` (front to back) when
/// given, in which case each truck gets the defaults with that mass.
inline ScenarioConfig make_scenario(const ExperimentConfig& e, const std::vector<double>& masses = {}) {
  ScenarioConfig c;
  c.name = e.name;
  try {
    c.profile = e.route.build(e.base_dir);
  } catch (const ParseError& err) {
    throw ConfigError(std::string("route: ") + err.what());
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("route: ") + err.what());
  }
  if (masses.empty()) {
    if (e.trucks.empty()) throw ConfigError("config.trucks: at least one truck required");
    for (std::size_t k = 0; k < e.trucks.size(); ++k) c.trucks.push_back(truck_setup(e, k));
  } else {
    for (double m : masses) {
      TruckSetup t;
      t.params = e.truck_defaults;
      t.params.mass = m;
      t.v0 = e.v0;
      c.trucks.push_back(t);
    }
  }
  c.initial_gaps = e.initial_gaps;
  c.s_start = e.s_start;
  c.s_end = e.s_end;
  c.t_max = e.t_max;
  c.dt_ctrl = e.dt_ctrl;
  c.plant_substeps = e.plant_substeps;
  c.disengage_gap = e.disengage_gap;
  c.drop_probability = e.drop_probability;
  c.staleness_limit = e.staleness_limit;
  c.seed = e.seed;
  c.message_log = e.message_log;
  c.plant_drag = e.plant_drag;
  c.controller.kind = parse_controller_kind(e.controller);
  c.controller.ocp = e.ocp;
  c.controller.cacc = e.cacc;
  c.controller.sqp = e.sqp;
  try {
    c.validate();
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  } catch (const std::out_of_range& err) {
    throw ConfigError(err.what());
  }
  return c;
}

}  // namespace platoon
