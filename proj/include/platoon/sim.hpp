#pragma once

// Closed-loop simulation: controller cycling, plant integration, latched
// disengagement, trajectory logging, and per-truck run metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "platoon/platoon.hpp"

namespace platoon {

struct TruckSetup {
  TruckParams params;
  double v0 = 25.0;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::vector<TruckSetup> trucks;
  std::vector<double> initial_gaps;  ///< K-1 gaps; empty means T*v0
  GradeProfile profile;
  double s_start = 0.0;  ///< leader's initial position
  double s_end = -1.0;   ///< finish line; negative means profile length
  ControllerConfig controller;
  double dt_ctrl = 0.2;
  int plant_substeps = 10;
  double t_max = 1e9;
  double disengage_gap = 110.0;
  double drop_probability = 0.0;
  std::uint64_t seed = 0;
  int staleness_limit = 3;
  DragReductionModel plant_drag = default_drag_model();
  std::string message_log;  ///< JSON-lines file, empty for none

  int n_trucks() const { return static_cast<int>(trucks.size()); }
  double finish() const { return s_end >= 0 ? s_end : profile.length(); }

  void validate() const {
    auto fail = [](const std::string& w) { throw std::invalid_argument("ScenarioConfig: " + w); };
    if (trucks.empty()) fail("need at least one truck");
    if (!(dt_ctrl > 0)) fail("dt_ctrl must be positive");
    if (plant_substeps < 1) fail("plant_substeps must be >= 1");
    if (!(disengage_gap > controller.ocp.d_min)) fail("disengage_gap must exceed d_min");
    if (!initial_gaps.empty() && static_cast<int>(initial_gaps.size()) != n_trucks() - 1)
      fail("initial_gaps needs one entry per follower");
    for (double g : initial_gaps)
      if (!(g > 0)) fail("initial gaps must be positive");
    if (profile.positions().empty()) fail("no grade profile");
    if (!(finish() > s_start)) fail("finish line must lie ahead of the start");
    if (drop_probability < 0 || drop_probability > 1) fail("drop_probability outside [0, 1]");
    for (const auto& t : trucks) t.params.validate();
    controller.ocp.validate();
    controller.cacc.validate();
  }
};

struct TrajectoryRow {
  double t = 0;
  int k = 0;
  double s = 0, v = 0, a_t = 0, u = 0;
  int gear = 0;
  double gap = std::numeric_limits<double>::quiet_NaN();
  double torque = 0, fuel = 0, eps1 = 0, eps2 = 0, kkt = 0;
  int iters = 0;
  bool disengaged = false;
};

struct SolveSample {
  int k = 0;
  bool joint = false;
  bool converged = false;
  double kkt = 0;
  int iterations = 0;
  double wall_time = 0;
  double t = 0;
  nlp::SolveStatus status = nlp::SolveStatus::converged;
};

struct TrajectoryLog {
  int n_trucks = 0;
  double dt = 0.2;
  std::vector<TrajectoryRow> rows;  ///< cycle-major, truck-minor
  std::vector<SolveSample> solves;

  /// Rows of one truck in time order.
  std::vector<TrajectoryRow> truck(int k) const {
    std::vector<TrajectoryRow> out;
    for (const auto& r : rows)
      if (r.k == k) out.push_back(r);
    return out;
  }

  void write_csv(std::ostream& os) const {
    os << "t,k,s,v,a_t,u,gear,gap,torque,fuel,eps1,eps2,kkt,iters,disengaged\n";
    os.precision(10);
    for (const auto& r : rows) {
      os << r.t << ',' << r.k << ',' << r.s << ',' << r.v << ',' << r.a_t << ',' << r.u << ',' << r.gear << ',';
      if (std::isfinite(r.gap)) os << r.gap;
      os << ',' << r.torque << ',' << r.fuel << ',' << r.eps1 << ',' << r.eps2 << ',' << r.kkt << ',' << r.iters
         << ',' << (r.disengaged ? 1 : 0) << '\n';
    }
  }
};

struct TruckMetrics {
  int k = 0;
  double mass = 0;
  double fuel_per_100km = 0;
  double headway = std::numeric_limits<double>::quiet_NaN();
  double gap_rmse = std::numeric_limits<double>::quiet_NaN();      ///< engaged samples
  double gap_rmse_raw = std::numeric_limits<double>::quiet_NaN();  ///< all samples
  int disengagements = 0;
  double travel_time = 0;
  double max_gap = std::numeric_limits<double>::quiet_NaN();
  double min_gap = std::numeric_limits<double>::quiet_NaN();
  bool complete = true;
};

struct RunMetrics {
  std::vector<TruckMetrics> trucks;
  bool complete = true;

  static void write_header(std::ostream& os) {
    os << "k,mass,fuel_kg_per_100km,headway_s,gap_rmse_m,gap_rmse_raw_m,disengagements,travel_time_s,max_gap_m,"
          "min_gap_m,complete\n";
  }

  void write_csv(std::ostream& os) const {
    write_header(os);
    os.precision(10);
    auto num = [&](double x) {
      if (std::isfinite(x)) os << x;
    };
    for (const auto& m : trucks) {
      os << m.k << ',' << m.mass << ',';
      num(m.fuel_per_100km);
      os << ',';
      num(m.headway);
      os << ',';
      num(m.gap_rmse);
      os << ',';
      num(m.gap_rmse_raw);
      os << ',' << m.disengagements << ',';
      num(m.travel_time);
      os << ',';
      num(m.max_gap);
      os << ',';
      num(m.min_gap);
      os << ',' << (m.complete ? 1 : 0) << '\n';
    }
  }
};

struct RunResult {
  TrajectoryLog log;
  RunMetrics metrics;
  bool aborted = false;
  std::string message;
};

class PlantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Latches once the gap leaves the drafting envelope.
inline bool detect_disengagement(double gap, bool disengaged, double disengage_gap = 110.0) {
  return disengaged || gap > disengage_gap;
}

/// Metrics from a trajectory log. Samples after a truck crosses the finish
/// line are ignored; fuel and travel time are interpolated at the crossing.
inline RunMetrics compute_metrics(const TrajectoryLog& log, const ScenarioConfig& cfg) {
  RunMetrics out;
  const double finish = cfg.finish();
  const double T = cfg.controller.ocp.headway;
  for (int k = 0; k < log.n_trucks; ++k) {
    const auto rows = log.truck(k);
    TruckMetrics m;
    m.k = k;
    m.mass = k < cfg.n_trucks() ? cfg.trucks[k].params.mass : 0.0;
    if (rows.empty()) throw std::invalid_argument("compute_metrics: truck without samples");
    const double s0 = rows.front().s;
    double fuel_end = rows.back().fuel, t_end = rows.back().t, s_end = rows.back().s;
    m.complete = false;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].s >= finish && rows[i - 1].s < finish) {
        const double w = (finish - rows[i - 1].s) / (rows[i].s - rows[i - 1].s);
        fuel_end = rows[i - 1].fuel + w * (rows[i].fuel - rows[i - 1].fuel);
        t_end = rows[i - 1].t + w * (rows[i].t - rows[i - 1].t);
        s_end = finish;
        m.complete = true;
        break;
      }
    }
    if (rows.front().s >= finish) m.complete = true;
    const double dist = s_end - s0;
    if (!(dist > 0)) throw std::invalid_argument("compute_metrics: zero distance travelled");
    m.fuel_per_100km = (fuel_end - rows.front().fuel) / dist * 1e5;
    m.travel_time = t_end - rows.front().t;

    if (k > 0) {
      double hw = 0, se = 0, sr = 0, gmax = -std::numeric_limits<double>::infinity();
      double gmin = std::numeric_limits<double>::infinity();
      int nh = 0, ne = 0, nr = 0;
      bool was = false;
      for (const auto& r : rows) {
        if (r.s >= finish && r.t > t_end) break;
        if (!std::isfinite(r.gap)) continue;
        const double e = r.gap - T * r.v;
        sr += e * e;
        ++nr;
        gmax = std::max(gmax, r.gap);
        gmin = std::min(gmin, r.gap);
        if (r.disengaged && !was) ++m.disengagements;
        was = was || r.disengaged;
        if (r.disengaged) continue;
        se += e * e;
        ++ne;
        if (r.v > 1.0) {
          hw += r.gap / r.v;
          ++nh;
        }
      }
      if (nh) m.headway = hw / nh;
      if (ne) m.gap_rmse = std::sqrt(se / ne);
      if (nr) m.gap_rmse_raw = std::sqrt(sr / nr);
      if (nr) {
        m.max_gap = gmax;
        m.min_gap = gmin;
      }
    }
    out.complete = out.complete && m.complete;
    out.trucks.push_back(m);
  }
  return out;
}

inline RunResult run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  const int K = cfg.n_trucks();
  const double T = cfg.controller.ocp.headway;
  const double finish = cfg.finish();

  std::vector<TruckState> x(K);
  for (int k = 0; k < K; ++k) {
    const TruckParams& p = cfg.trucks[k].params;
    x[k].v = cfg.trucks[k].v0;
    if (k == 0) {
      x[k].s = cfg.s_start;
    } else {
      const double gap = cfg.initial_gaps.empty() ? T * x[k].v : cfg.initial_gaps[k - 1];
      x[k].s = x[k - 1].s - cfg.trucks[k - 1].params.length - gap;
    }
    x[k].gear = settled_gear(x[k].v, p);
  }
  auto gap_of = [&](int k) { return x[k - 1].s - cfg.trucks[k - 1].params.length - x[k].s; };
  for (int k = 0; k < K; ++k) {
    std::optional<double> g;
    if (k > 0) g = gap_of(k);
    x[k].a_t = equilibrium_traction(x[k].v, cfg.profile.grade_at(x[k].s), g, cfg.trucks[k].params, cfg.plant_drag);
  }

  std::vector<TruckController> ctrl;
  ctrl.reserve(K);
  for (int k = 0; k < K; ++k) ctrl.emplace_back(k, K, cfg.trucks[k].params, cfg.controller);

  MessageBus bus(K, cfg.drop_probability, cfg.seed, cfg.staleness_limit);
  std::ofstream msg_log;
  if (!cfg.message_log.empty()) {
    msg_log.open(cfg.message_log);
    bus.set_log(&msg_log);
  }

  RunResult res;
  res.log.n_trucks = K;
  res.log.dt = cfg.dt_ctrl;
  std::vector<bool> dis(K, false);
  std::vector<double> u(K, 0.0);
  std::vector<StepOutput> outs(K);

  auto log_rows = [&](double t, bool final_row) {
    for (int k = 0; k < K; ++k) {
      TrajectoryRow r;
      r.t = t;
      r.k = k;
      r.s = x[k].s;
      r.v = x[k].v;
      r.a_t = x[k].a_t;
      r.u = final_row ? 0.0 : u[k];
      r.gear = x[k].gear;
      if (k > 0) r.gap = gap_of(k);
      r.torque = engine_torque(cfg.trucks[k].params.mass * x[k].a_t, x[k].gear, cfg.trucks[k].params);
      r.fuel = x[k].fuel_used;
      if (!final_row) {
        r.eps1 = outs[k].eps1;
        r.eps2 = outs[k].eps2;
        r.kkt = outs[k].kkt;
        r.iters = outs[k].iterations;
      }
      r.disengaged = dis[k];
      res.log.rows.push_back(r);
    }
  };

  const long max_cycles = static_cast<long>(std::ceil(cfg.t_max / cfg.dt_ctrl));
  long cycle = 0;
  double t = 0.0;
  try {
    for (;; ++cycle) {
      t = cycle * cfg.dt_ctrl;
      bool all_done = true;
      for (int k = 0; k < K; ++k) all_done = all_done && x[k].s >= finish;
      if (all_done || cycle >= max_cycles) break;

      bus.exchange(static_cast<int>(cycle));
      for (int k = 0; k < K; ++k) {
        StepInput in;
        in.t = t;
        in.cycle = static_cast<int>(cycle);
        in.x = x[k];
        in.road = &cfg.profile;
        in.inbox = bus.inbox(k);
        if (k > 0) {
          in.radar_gap = gap_of(k);
          in.radar_v_lead = x[k - 1].v;
        }
        outs[k] = ctrl[k].step(in);
        u[k] = outs[k].u;
        if (outs[k].solved)
          res.log.solves.push_back({k, outs[k].joint, outs[k].converged, outs[k].kkt, outs[k].iterations,
                                    outs[k].solve_time, t, outs[k].status});
        outs[k].solution.reset();
      }
      for (int k = 0; k < K; ++k) bus.post(k, std::move(outs[k].out));
      log_rows(t, false);

      // Plants, front to back, so each follower sees its predecessor's step.
      std::vector<TruckState> next(K);
      for (int k = 0; k < K; ++k) {
        const TruckParams& p = cfg.trucks[k].params;
        ExogenousInput w;
        w.grade = [&](double s) { return cfg.profile.grade_at(s); };
        w.drag = &cfg.plant_drag;
        if (k > 0) {
          w.leader = LeaderTrack{x[k - 1].s, x[k - 1].v, next[k - 1].s, next[k - 1].v, cfg.dt_ctrl};
          w.leader_length = cfg.trucks[k - 1].params.length;
        }
        const double uk = admissible_control_set(std::max(x[k].v, 0.0), x[k].gear, p).clamp(u[k]);
        next[k] = integrate_step(x[k], uk, w, p, cfg.dt_ctrl, cfg.plant_substeps);
        if (!std::isfinite(next[k].s) || !std::isfinite(next[k].v) || !std::isfinite(next[k].a_t))
          throw PlantError("non-finite plant state for truck " + std::to_string(k) + " at t = " +
                           std::to_string(t));
      }
      x = next;
      for (int k = 1; k < K; ++k) {
        const bool now = detect_disengagement(gap_of(k), dis[k], cfg.disengage_gap) || outs[k].request_disengage;
        if (now && !dis[k]) {
          dis[k] = true;
          ctrl[k].set_disengaged(true);
        }
      }
    }
  } catch (const PlantError& e) {
    res.aborted = true;
    res.message = e.what();
  }
  log_rows(cycle * cfg.dt_ctrl, true);
  res.metrics = compute_metrics(res.log, cfg);
  if (cycle >= max_cycles) res.metrics.complete = false;
  return res;
}

}  // namespace platoon
