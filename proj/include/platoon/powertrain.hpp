#pragma once

// Longitudinal truck model: drag with drafting benefit, rolling/grade
// resistance, gearbox force limits, first-order traction lag, Willans-line
// fuel rate and a speed-threshold shift map.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace platoon {

/// Guard speed for the isometric power bound at standstill (m/s).
inline constexpr double kPowerSpeedGuard = 0.1;

struct FuelParams {
  double willans_eff = 0.40;  ///< indicated efficiency
  double lhv = 42.5e6;        ///< lower heating value, J/kg
  double p_idle = 5000.0;     ///< idle/friction power offset, W
};

/// Engine-speed thresholds driving the automatic shift schedule.
/// Upshift when the next gear would still turn the engine at
/// omega_down * (1 + hysteresis) or more (or when over omega_max);
/// downshift when the engine drops below omega_down.
struct ShiftMap {
  double omega_down = 100.0;
  double omega_max = 220.0;
  double hysteresis = 0.10;
};

struct TruckParams {
  double mass = 38000.0;
  double length = 20.0;
  double wheel_radius = 0.5;
  double frontal_area = 10.0;
  double drag_coef = 0.6;
  double rolling_coef = 0.007;
  double final_drive = 2.64;
  // 12-speed box, geometric steps of ~0.777, direct 1.00 and one overdrive.
  std::vector<double> gear_ratios{12.5, 9.71, 7.55, 5.86, 4.56, 3.54,
                                  2.75, 2.14, 1.66, 1.29, 1.00, 0.78};
  std::vector<double> gear_efficiency = std::vector<double>(12, 0.96);
  double tau_max = 2500.0;
  double p_max = 330e3;
  double brake_decel = 2.0;  ///< service brake floor, m/s^2 (u_min = -brake_decel)
  double tau_d = 0.5;
  double e0 = 0.04;
  double e1 = 0.0025;
  FuelParams fuel{};
  ShiftMap shift{};
  double rho = 1.2;
  double grav = 9.81;

  int gear_count() const { return static_cast<int>(gear_ratios.size()); }

  void check_gear(int gear) const {
    if (gear < 0 || gear >= gear_count())
      throw std::out_of_range("gear index " + std::to_string(gear) + " outside [0, " +
                              std::to_string(gear_count()) + ")");
  }

  double effective_mass(int gear) const {
    check_gear(gear);
    const double ir = gear_ratios[gear];
    return mass * (1.0 + e0 + e1 * ir * ir);
  }

  /// Throws std::invalid_argument naming the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("TruckParams: " + what); };
    if (!(mass > 0)) fail("mass must be positive");
    if (!(wheel_radius > 0)) fail("wheel_radius must be positive");
    if (!(tau_d > 0)) fail("tau_d must be positive");
    if (!(p_max > 0)) fail("p_max must be positive");
    if (!(tau_max > 0)) fail("tau_max must be positive");
    if (!(length >= 0)) fail("length must be non-negative");
    if (!(brake_decel > 0)) fail("brake_decel must be positive");
    if (gear_ratios.empty()) fail("gear_ratios empty");
    if (gear_efficiency.size() != gear_ratios.size()) fail("gear_efficiency size mismatch");
    for (std::size_t i = 0; i < gear_ratios.size(); ++i) {
      if (!(gear_ratios[i] > 0)) fail("gear ratios must be positive");
      if (i > 0 && !(gear_ratios[i] < gear_ratios[i - 1])) fail("gear ratios must be strictly decreasing");
      if (!(gear_efficiency[i] > 0 && gear_efficiency[i] <= 1)) fail("gear efficiency outside (0, 1]");
    }
    if (e0 < 0 || e1 < 0) fail("rotational-mass coefficients must be non-negative");
    if (!(fuel.willans_eff > 0 && fuel.willans_eff < 0.6)) fail("willans_eff outside (0, 0.6)");
    if (!(fuel.lhv > 0)) fail("lhv must be positive");
    if (fuel.p_idle < 0) fail("p_idle must be non-negative");
    if (!(shift.omega_down > 0 && shift.omega_max > shift.omega_down * (1 + shift.hysteresis)))
      fail("shift map thresholds inconsistent");
  }
};

struct TruckState {
  double s = 0.0;
  double v = 0.0;
  double a_t = 0.0;
  int gear = 0;
  double fuel_used = 0.0;
};

// ---------------------------------------------------------------------------
// Drafting drag reduction beta(d) = A exp(B d) + C exp(D d)

struct DragReductionModel {
  double a = 0.85;
  double b = 1e-4;
  double c = 0.04;
  double d_coef = 0.02;
  double gap_max = 110.0;

  /// Unclamped two-exponential curve.
  double raw(double d) const { return a * std::exp(b * d) + c * std::exp(d_coef * d); }
  double raw_slope(double d) const {
    return a * b * std::exp(b * d) + c * d_coef * std::exp(d_coef * d);
  }
};

/// Drag factor at gap d. Inside the drafting envelope [0, gap_max] the fitted
/// curve is clamped to at most 1; beyond it the factor is exactly 1.
inline double drag_reduction(double d, const DragReductionModel& model) {
  if (!(d >= 0.0)) throw std::domain_error("drag_reduction: negative gap");
  if (d > model.gap_max) return 1.0;
  return std::min(model.raw(d), 1.0);
}

/// Value and slope of beta at a gap already clamped into the envelope.
/// Used by the optimizer, which treats the envelope edges as flat.
inline std::pair<double, double> drag_reduction_clamped(double d, const DragReductionModel& model) {
  if (d <= 0.0) return {std::min(model.raw(0.0), 1.0), 0.0};
  if (d >= model.gap_max) return {std::min(model.raw(model.gap_max), 1.0), 0.0};
  const double beta = model.raw(d);
  if (beta >= 1.0) return {1.0, 0.0};
  return {beta, model.raw_slope(d)};
}

struct DragFitResult {
  DragReductionModel model;
  double rmse = 0.0;
  int iterations = 0;
};

class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

namespace detail {

struct LmOutcome {
  Eigen::Vector4d p;
  double rmse;
  int iterations;
  bool converged;
};

inline LmOutcome levenberg_marquardt_two_exp(const std::vector<std::pair<double, double>>& data,
                                             Eigen::Vector4d p) {
  const int m = static_cast<int>(data.size());
  auto residuals = [&](const Eigen::Vector4d& q, Eigen::VectorXd& r) {
    r.resize(m);
    for (int i = 0; i < m; ++i) {
      const double d = data[i].first;
      r[i] = q[0] * std::exp(q[1] * d) + q[2] * std::exp(q[3] * d) - data[i].second;
    }
  };
  auto jacobian = [&](const Eigen::Vector4d& q, Eigen::MatrixXd& J) {
    J.resize(m, 4);
    for (int i = 0; i < m; ++i) {
      const double d = data[i].first;
      const double e1 = std::exp(q[1] * d);
      const double e2 = std::exp(q[3] * d);
      J(i, 0) = e1;
      J(i, 1) = q[0] * d * e1;
      J(i, 2) = e2;
      J(i, 3) = q[2] * d * e2;
    }
  };

  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  residuals(p, r);
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  bool converged = false;
  int it = 0;
  for (; it < 500; ++it) {
    jacobian(p, J);
    const Eigen::Matrix4d JtJ = J.transpose() * J;
    const Eigen::Vector4d g = J.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() < 1e-15) {
      converged = true;
      break;
    }
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      Eigen::Matrix4d A = JtJ;
      A.diagonal() += lambda * JtJ.diagonal().cwiseMax(1e-12);
      const Eigen::Vector4d step = A.ldlt().solve(-g);
      const Eigen::Vector4d trial = p + step;
      Eigen::VectorXd rt;
      residuals(trial, rt);
      const double ct = rt.squaredNorm();
      if (std::isfinite(ct) && ct < cost) {
        const double rel = (cost - ct) / std::max(cost, 1e-300);
        p = trial;
        r = rt;
        cost = ct;
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
        if (rel < 1e-14 || step.norm() < 1e-14 * (1 + p.norm())) converged = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) {
      converged = true;  // no descent possible: stationary to working precision
      break;
    }
    if (converged) break;
  }
  return {p, std::sqrt(cost / m), it, converged};
}

}  // namespace detail

/// Nonlinear least-squares fit of the two-exponential drag curve.
/// Starts from the nominal seed and a fixed set of alternative seeds, keeping
/// the lowest-residual local minimum.
inline DragFitResult fit_drag_reduction(const std::vector<std::pair<double, double>>& data,
                                        double gap_max = 110.0) {
  if (data.size() < 4) throw std::invalid_argument("fit_drag_reduction: need at least 4 points");
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t j = i + 1; j < data.size(); ++j)
      if (data[i].first == data[j].first)
        throw std::invalid_argument("fit_drag_reduction: duplicate gap values");

  static const std::array<Eigen::Vector4d, 4> seeds = {
      Eigen::Vector4d(0.85, 1e-4, 0.04, 0.02), Eigen::Vector4d(0.9, 1e-3, -0.05, -0.1),
      Eigen::Vector4d(1.0, -1e-3, -0.1, -0.05), Eigen::Vector4d(0.5, 2e-3, 0.4, -1e-3)};

  std::optional<detail::LmOutcome> best;
  double worst_residual = 0.0;
  for (const auto& seed : seeds) {
    auto out = detail::levenberg_marquardt_two_exp(data, seed);
    if (!out.converged || !out.p.allFinite() || !std::isfinite(out.rmse)) {
      worst_residual = std::max(worst_residual, out.rmse);
      continue;
    }
    if (!best || out.rmse < best->rmse) best = out;
  }
  if (!best) throw FitError("fit_drag_reduction: no seed converged", worst_residual);
  DragFitResult res;
  res.model = {best->p[0], best->p[1], best->p[2], best->p[3], gap_max};
  res.rmse = best->rmse;
  res.iterations = best->iterations;
  return res;
}

/// Drafting data measured on a test track (gap m, drag factor).
inline const std::vector<std::pair<double, double>>& reference_drag_data() {
  static const std::vector<std::pair<double, double>> data = {
      {15, 0.90497}, {20, 0.91298}, {30, 0.92834}, {40, 0.93729}, {50, 0.94624},
      {60, 0.95519}, {70, 0.96415}, {80, 0.97310}, {100, 0.99100}};
  return data;
}

/// Fit of reference_drag_data(), computed once.
inline const DragReductionModel& default_drag_model() {
  static const DragReductionModel model = fit_drag_reduction(reference_drag_data()).model;
  return model;
}

// ---------------------------------------------------------------------------
// Forces

inline double aero_force(double v, std::optional<double> gap, const TruckParams& p,
                         const DragReductionModel& model) {
  if (v < 0) throw std::domain_error("aero_force: negative speed");
  double beta = 1.0;
  if (gap) beta = drag_reduction(*gap, model);
  return 0.5 * p.rho * p.frontal_area * p.drag_coef * beta * v * v;
}

inline double rolling_force(double grade, const TruckParams& p) {
  return p.mass * p.grav * (p.rolling_coef * std::cos(grade) + std::sin(grade));
}

inline double gear_gain(int gear, const TruckParams& p) {
  p.check_gear(gear);
  return p.gear_efficiency[gear] * p.final_drive * p.gear_ratios[gear] / p.wheel_radius;
}

/// F_bar(gear): wheel force at full engine torque.
inline double max_wheel_force(int gear, const TruckParams& p) { return p.tau_max * gear_gain(gear, p); }

inline double engine_speed(double v, int gear, const TruckParams& p) {
  p.check_gear(gear);
  return v * p.final_drive * p.gear_ratios[gear] / p.wheel_radius;
}

/// Engine torque that produces wheel force F in the given gear.
inline double engine_torque(double force, int gear, const TruckParams& p) {
  return force / gear_gain(gear, p);
}

struct ControlBounds {
  double u_min = 0.0;
  double u_max = 0.0;
  double clamp(double u) const { return std::clamp(u, u_min, u_max); }
};

/// Admissible tractive-acceleration interval: torque limit, isometric power
/// limit and the service-brake floor.
inline ControlBounds admissible_control_set(double v, int gear, const TruckParams& p) {
  const double force_cap = std::min(max_wheel_force(gear, p), p.p_max / std::max(v, kPowerSpeedGuard));
  return {-p.brake_decel, force_cap / p.mass};
}

inline double fuel_rate(double tau, double omega, const FuelParams& f) {
  if (omega < 0) throw std::domain_error("fuel_rate: negative engine speed");
  return (std::max(tau * omega, 0.0) / f.willans_eff + f.p_idle) / f.lhv;
}

/// One step of the shift schedule; changes gear by at most one.
inline int shift_logic(double v, int gear, const TruckParams& p) {
  p.check_gear(gear);
  const ShiftMap& m = p.shift;
  const double omega = engine_speed(v, gear, p);
  if (gear + 1 < p.gear_count()) {
    const double omega_next = engine_speed(v, gear + 1, p);
    if (omega_next >= m.omega_down * (1.0 + m.hysteresis) || omega > m.omega_max) return gear + 1;
  }
  if (gear > 0 && omega < m.omega_down && engine_speed(v, gear - 1, p) <= m.omega_max) return gear - 1;
  return gear;
}

/// Gear the shift schedule settles into at constant speed v, starting from first.
inline int settled_gear(double v, const TruckParams& p) {
  int gear = 0;
  for (int i = 0; i < p.gear_count(); ++i) {
    const int next = shift_logic(v, gear, p);
    if (next == gear) break;
    gear = next;
  }
  return gear;
}

// ---------------------------------------------------------------------------
// Dynamics

/// Motion of the preceding truck over one integration step, cubic Hermite in
/// time between the step end points.
struct LeaderTrack {
  double s0 = 0, v0 = 0, s1 = 0, v1 = 0, h = 0;

  static LeaderTrack hold(double s, double v) { return {s, v, s, v, 0.0}; }

  double position(double t) const {
    if (h <= 0) return s0 + v0 * t;
    const double x = t / h;
    const double x2 = x * x, x3 = x2 * x;
    return (2 * x3 - 3 * x2 + 1) * s0 + (x3 - 2 * x2 + x) * h * v0 + (-2 * x3 + 3 * x2) * s1 +
           (x3 - x2) * h * v1;
  }
};

/// Disturbances acting on one truck: road grade along the route and the
/// preceding truck (if any) that sets the drafting gap.
struct ExogenousInput {
  std::function<double(double)> grade;  ///< alpha(s), rad
  std::optional<LeaderTrack> leader;
  double leader_length = 0.0;
  const DragReductionModel* drag = nullptr;  ///< defaults to default_drag_model()

  double grade_at(double s) const { return grade ? grade(s) : 0.0; }

  std::optional<double> gap_at(double s, double t) const {
    if (!leader) return std::nullopt;
    return leader->position(t) - leader_length - s;
  }

  const DragReductionModel& drag_model() const { return drag ? *drag : default_drag_model(); }
};

struct StateRate {
  double ds = 0, dv = 0, da_t = 0;
};

/// Aerodynamic force for a (possibly negative, i.e. overlapping) gap: outside
/// [0, gap_max] the truck sees undisturbed air.
inline double plant_aero_force(double v, std::optional<double> gap, const TruckParams& p,
                               const DragReductionModel& model) {
  const double vv = std::max(v, 0.0);
  std::optional<double> g;
  if (gap && *gap >= 0.0) g = gap;
  return aero_force(vv, g, p, model);
}

inline StateRate state_derivative(const TruckState& x, double u, const ExogenousInput& w,
                                  const TruckParams& p, double t = 0.0) {
  const double fa = plant_aero_force(x.v, w.gap_at(x.s, t), p, w.drag_model());
  const double fr = rolling_force(w.grade_at(x.s), p);
  StateRate r;
  r.ds = x.v;
  r.dv = (p.mass * x.a_t - fa - fr) / p.effective_mass(x.gear);
  r.da_t = (u - x.a_t) / p.tau_d;
  return r;
}

/// Instantaneous fuel rate of a truck state: traction force m*a_t mapped to
/// engine torque through the current gear.
inline double state_fuel_rate(const TruckState& x, const TruckParams& p) {
  const double force = p.mass * x.a_t;
  const double tau = engine_torque(force, x.gear, p);
  return fuel_rate(tau, engine_speed(std::max(x.v, 0.0), x.gear, p), p.fuel);
}

/// Advance one truck by h seconds with n_sub classical RK4 substeps and u held.
/// Fuel is integrated as a fourth state; speed is clamped at zero after every
/// substep; the shift schedule acts once at the end of the step.
inline TruckState integrate_step(const TruckState& x0, double u, const ExogenousInput& w,
                                 const TruckParams& p, double h, int n_sub) {
  if (!(h > 0)) throw std::invalid_argument("integrate_step: h must be positive");
  if (n_sub < 1) throw std::invalid_argument("integrate_step: n_sub must be >= 1");
  const double dt = h / n_sub;
  using V4 = Eigen::Vector4d;
  auto rhs = [&](const V4& y, double t) {
    TruckState xs{y[0], y[1], y[2], x0.gear, 0.0};
    const StateRate r = state_derivative(xs, u, w, p, t);
    return V4(r.ds, r.dv, r.da_t, state_fuel_rate(xs, p));
  };
  V4 y(x0.s, x0.v, x0.a_t, x0.fuel_used);
  double t = 0.0;
  for (int k = 0; k < n_sub; ++k) {
    const V4 k1 = rhs(y, t);
    const V4 k2 = rhs(y + 0.5 * dt * k1, t + 0.5 * dt);
    const V4 k3 = rhs(y + 0.5 * dt * k2, t + 0.5 * dt);
    const V4 k4 = rhs(y + dt * k3, t + dt);
    y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    y[1] = std::max(y[1], 0.0);
    t += dt;
  }
  TruckState out{y[0], y[1], y[2], x0.gear, y[3]};
  out.gear = shift_logic(out.v, out.gear, p);
  // An upshift lowers the force the engine can deliver; the traction state
  // cannot keep a force the new gear cannot produce.
  if (out.gear != x0.gear) out.a_t = std::min(out.a_t, max_wheel_force(out.gear, p) / p.mass);
  return out;
}

/// Tractive acceleration that holds speed constant at the given state.
inline double equilibrium_traction(double v, double grade, std::optional<double> gap, const TruckParams& p,
                                   const DragReductionModel& model) {
  std::optional<double> g;
  if (gap && *gap >= 0.0) g = gap;
  return (aero_force(std::max(v, 0.0), g, p, model) + rolling_force(grade, p)) / p.mass;
}

}  // namespace platoon
