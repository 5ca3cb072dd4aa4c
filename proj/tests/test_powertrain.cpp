#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "platoon/powertrain.hpp"
#include "platoon/road.hpp"

using namespace platoon;

namespace {

TruckParams single_gear(double ratio, double eff) {
  TruckParams p;
  p.gear_ratios = {ratio};
  p.gear_efficiency = {eff};
  return p;
}

ExogenousInput on_road(const GradeProfile& road) {
  ExogenousInput w;
  w.grade = [&road](double s) { return road.grade_at(s); };
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Drag reduction

TEST(DragReduction, FitsReferenceTable) {
  const auto fit = fit_drag_reduction(reference_drag_data());
  EXPECT_LE(fit.rmse, 0.002);
  EXPECT_NEAR(drag_reduction(15.0, fit.model), 0.90497, 0.003);
  double ss = 0;
  for (const auto& [d, b] : reference_drag_data()) ss += std::pow(fit.model.raw(d) - b, 2);
  EXPECT_NEAR(std::sqrt(ss / reference_drag_data().size()), fit.rmse, 1e-12);
}

TEST(DragReduction, EnvelopeEdges) {
  const auto& m = default_drag_model();
  EXPECT_EQ(drag_reduction(200.0, m), 1.0);
  EXPECT_EQ(drag_reduction(110.0001, m), 1.0);
  const double at_edge = drag_reduction(110.0, m);
  EXPECT_GE(at_edge, 0.995);
  EXPECT_LE(at_edge, 1.0);
  EXPECT_LE(std::abs(at_edge - 1.0), 0.01);
  EXPECT_THROW(drag_reduction(-1.0, m), std::domain_error);
}

TEST(DragReduction, MonotoneAndInUnitInterval) {
  const auto& m = default_drag_model();
  double prev = drag_reduction(0.0, m);
  for (double d = 0.1; d <= 110.0; d += 0.1) {
    const double b = drag_reduction(d, m);
    EXPECT_LE(prev, b + 1e-15) << d;
    EXPECT_GT(b, 0.0);
    EXPECT_LE(b, 1.0);
    prev = b;
  }
}

TEST(DragReduction, RecoversKnownCoefficients) {
  const DragReductionModel truth{0.85, 1e-4, 0.04, 0.02, 110.0};
  std::vector<std::pair<double, double>> data;
  for (int i = 0; i < 10; ++i) {
    const double d = 10.0 + 10.0 * i;
    data.emplace_back(d, truth.raw(d));
  }
  const auto fit = fit_drag_reduction(data);
  for (const auto& [d, b] : data) EXPECT_NEAR(fit.model.raw(d), b, 1e-6);
}

TEST(DragReduction, RejectsUnderdeterminedData) {
  EXPECT_THROW(fit_drag_reduction({{10, 0.9}, {20, 0.91}, {30, 0.92}}), std::invalid_argument);
  EXPECT_THROW(fit_drag_reduction({{10, 0.9}, {10, 0.91}, {30, 0.92}, {40, 0.93}}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Forces and gearbox

TEST(Forces, Aero) {
  TruckParams p;
  const auto& m = default_drag_model();
  EXPECT_DOUBLE_EQ(aero_force(25.0, std::nullopt, p, m), 2250.0);
  EXPECT_DOUBLE_EQ(aero_force(0.0, std::nullopt, p, m), 0.0);
  EXPECT_NEAR(aero_force(25.0, 15.0, p, m), 2250.0 * 0.90497, 2250.0 * 0.003);
  EXPECT_DOUBLE_EQ(aero_force(25.0, 15.0, p, m), 2250.0 * drag_reduction(15.0, m));
}

TEST(Forces, Rolling) {
  TruckParams p;
  EXPECT_NEAR(rolling_force(0.0, p), 2609.46, 0.01);
  EXPECT_NEAR(rolling_force(0.03, p), 38000 * 9.81 * (0.007 * std::cos(0.03) + std::sin(0.03)), 1e-9);
  EXPECT_NEAR(rolling_force(0.03, p), 13791.0, 2.0);
  p.rolling_coef = 0.0;
  EXPECT_DOUBLE_EQ(rolling_force(-0.02, p), 38000 * 9.81 * std::sin(-0.02));
}

TEST(Gearbox, MaxWheelForce) {
  EXPECT_NEAR(max_wheel_force(0, single_gear(1.0, 1.0)), 13200.0, 1e-9);
  EXPECT_NEAR(max_wheel_force(0, single_gear(1.0, 0.96)), 12672.0, 1e-9);
  TruckParams p;
  for (int g = 1; g < p.gear_count(); ++g) EXPECT_GT(max_wheel_force(g - 1, p), max_wheel_force(g, p));
  EXPECT_THROW(max_wheel_force(12, p), std::out_of_range);
  EXPECT_THROW(max_wheel_force(-1, p), std::out_of_range);
}

TEST(Gearbox, EngineSpeed) {
  EXPECT_NEAR(engine_speed(25.0, 0, single_gear(1.0, 1.0)), 132.0, 1e-12);
  EXPECT_EQ(engine_speed(0.0, 0, single_gear(1.0, 1.0)), 0.0);
  EXPECT_NEAR(engine_speed(20.0, 0, single_gear(1.53, 1.0)), 161.568, 1e-9);
}

TEST(Gearbox, EffectiveMassAtLeastMass) {
  TruckParams p;
  for (int g = 0; g < p.gear_count(); ++g) EXPECT_GE(p.effective_mass(g), p.mass);
}

TEST(AdmissibleSet, Examples) {
  TruckParams p = single_gear(1.0, 1.0);
  p.tau_max = 20000.0 / 5.28;  // F_bar = 20 kN
  p.p_max = 300e3;
  EXPECT_NEAR(admissible_control_set(25.0, 0, p).u_max, 12000.0 / 38000.0, 1e-12);
  EXPECT_NEAR(admissible_control_set(0.0, 0, p).u_max, 20000.0 / 38000.0, 1e-12);
  EXPECT_NEAR(admissible_control_set(10.0, 0, p).u_max, 20000.0 / 38000.0, 1e-12);
  EXPECT_NEAR(admissible_control_set(10.0, 0, p).u_max, 0.5263, 1e-4);
  EXPECT_DOUBLE_EQ(admissible_control_set(10.0, 0, p).u_min, -2.0);
}

TEST(AdmissibleSet, RespectsForceAndPowerLimits) {
  TruckParams p;
  for (double m : {14000.0, 38000.0}) {
    p.mass = m;
    for (int g = 0; g < p.gear_count(); ++g)
      for (double v = 0.0; v <= 35.0; v += 0.25) {
        const auto b = admissible_control_set(v, g, p);
        const double F = p.mass * b.u_max;
        EXPECT_LE(F, max_wheel_force(g, p) * (1 + 1e-15));
        EXPECT_LE(F * v, p.p_max + 1e-9);
      }
  }
}

TEST(FuelRate, Examples) {
  FuelParams f;
  EXPECT_DOUBLE_EQ(fuel_rate(0.0, 0.0, f), 5000.0 / 42.5e6);
  EXPECT_NEAR(fuel_rate(1000.0, 200.0, f), 505000.0 / 42.5e6, 1e-15);
  EXPECT_NEAR(fuel_rate(1000.0, 200.0, f), 0.011882, 1e-6);
  EXPECT_DOUBLE_EQ(fuel_rate(-800.0, 150.0, f), 5000.0 / 42.5e6);
  EXPECT_THROW(fuel_rate(10.0, -1.0, f), std::domain_error);
}

// ---------------------------------------------------------------------------
// Shift logic

TEST(ShiftLogic, HysteresisBandHoldsGear) {
  TruckParams p;
  // Gear 5 stays put while omega >= omega_down and the next gear would sit
  // below omega_down * (1 + hysteresis).
  const int g = 5;
  const double k = p.final_drive / p.wheel_radius;
  const double v_low = p.shift.omega_down / (k * p.gear_ratios[g]);
  const double v_high = p.shift.omega_down * (1 + p.shift.hysteresis) / (k * p.gear_ratios[g + 1]);
  ASSERT_LT(v_low, v_high);
  EXPECT_EQ(shift_logic(0.5 * (v_low + v_high), g, p), g);
  EXPECT_EQ(shift_logic(v_high * 1.001, g, p), g + 1);
  EXPECT_EQ(shift_logic(v_low * 0.999, g, p), g - 1);
}

TEST(ShiftLogic, TopGearSaturates) {
  TruckParams p;
  EXPECT_EQ(shift_logic(60.0, p.gear_count() - 1, p), p.gear_count() - 1);
  EXPECT_EQ(shift_logic(0.0, 0, p), 0);
}

TEST(ShiftLogic, RampVisitsEachGearOnce) {
  TruckParams p;
  int gear = 0;
  std::vector<int> visited{0};
  for (double v = 0.0; v <= 30.0; v += 0.01) {
    const int next = shift_logic(v, gear, p);
    ASSERT_GE(next, gear);
    ASSERT_LE(next - gear, 1);
    if (next != gear) visited.push_back(next);
    gear = next;
  }
  ASSERT_EQ(static_cast<int>(visited.size()), p.gear_count());
  for (int g = 0; g < p.gear_count(); ++g) EXPECT_EQ(visited[g], g);
}

// ---------------------------------------------------------------------------
// Dynamics

TEST(StateDerivative, EquilibriumIsFixedPoint) {
  TruckParams p;
  const GradeProfile flat({0.0}, {0.0});
  const auto w = on_road(flat);
  const double a_eq = equilibrium_traction(25.0, 0.0, std::nullopt, p, default_drag_model());
  const TruckState x{100.0, 25.0, a_eq, 10, 0.0};
  const auto r = state_derivative(x, a_eq, w, p);
  EXPECT_NEAR(r.dv, 0.0, 1e-14);
  EXPECT_NEAR(r.da_t, 0.0, 1e-14);
  EXPECT_DOUBLE_EQ(r.ds, 25.0);
}

TEST(StateDerivative, LagAndCoasting) {
  TruckParams p;
  const GradeProfile flat({0.0}, {0.0});
  const auto w = on_road(flat);
  const TruckState x{0.0, 25.0, 0.0, 10, 0.0};
  EXPECT_DOUBLE_EQ(state_derivative(x, 0.3, w, p).da_t, 0.3 / p.tau_d);
  const double F = aero_force(25.0, std::nullopt, p, default_drag_model()) + rolling_force(0.0, p);
  EXPECT_NEAR(state_derivative(x, 0.0, w, p).dv, -F / p.effective_mass(10), 1e-14);
  EXPECT_LT(state_derivative(x, 0.0, w, p).dv, 0.0);
}

TEST(IntegrateStep, ZeroForcesMoveLinearly) {
  TruckParams p;
  p.rho = 0.0;
  p.rolling_coef = 0.0;
  const GradeProfile flat({0.0}, {0.0});
  const auto w = on_road(flat);
  const TruckState x{12.5, 20.0, 0.0, settled_gear(20.0, p), 0.0};
  const auto y = integrate_step(x, 0.0, w, p, 1.0, 10);
  EXPECT_DOUBLE_EQ(y.s, 32.5);
  EXPECT_DOUBLE_EQ(y.v, 20.0);
}

TEST(IntegrateStep, MatchesFineOracleOnSRoad) {
  TruckParams p;
  const auto road = make_s_road();
  const auto w = on_road(road);
  for (double s : {3000.0, 9000.0, 19600.0, 25000.0, 30100.0}) {
    const TruckState x{s, 22.0, 0.2, settled_gear(22.0, p), 0.0};
    const auto coarse = integrate_step(x, 0.6, w, p, 1.0, 10);
    const auto fine = integrate_step(x, 0.6, w, p, 1.0, 1000);
    EXPECT_NEAR(coarse.v, fine.v, 1e-6) << s;
  }
}

TEST(IntegrateStep, FourthOrderConvergence) {
  TruckParams p;
  const auto road = make_s_road();
  const auto w = on_road(road);
  const TruckState x{25000.0, 22.0, 0.4, settled_gear(22.0, p), 0.0};
  auto v = [&](int n) { return integrate_step(x, 0.8, w, p, 1.0, n).v; };
  const double ratio = (v(10) - v(20)) / (v(20) - v(40));
  EXPECT_NEAR(ratio, 16.0, 2.0);
}

TEST(IntegrateStep, SpeedNeverNegative) {
  TruckParams p;
  const GradeProfile hill({0.0}, {0.05});
  const auto w = on_road(hill);
  const TruckState x{0.0, 0.3, -2.0, 0, 0.0};
  const auto y = integrate_step(x, -2.0, w, p, 1.0, 10);
  EXPECT_GE(y.v, 0.0);
  EXPECT_EQ(y.v, 0.0);
}

TEST(IntegrateStep, FuelStrictlyIncreases) {
  TruckParams p;
  const auto road = make_s_road();
  const auto w = on_road(road);
  TruckState x{0.0, 25.0, 0.0, settled_gear(25.0, p), 0.0};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 0.6);
  for (int k = 0; k < 300; ++k) {
    const auto y = integrate_step(x, u(rng), w, p, 0.2, 10);
    if (engine_speed(x.v, x.gear, p) > 0) EXPECT_GT(y.fuel_used, x.fuel_used);
    x = y;
  }
}

TEST(IntegrateStep, UpshiftCapsTraction) {
  TruckParams p;
  const GradeProfile flat({0.0}, {0.0});
  const auto w = on_road(flat);
  const int g = 8;
  const double k = p.final_drive / p.wheel_radius;
  const double v_up = p.shift.omega_down * (1 + p.shift.hysteresis) / (k * p.gear_ratios[g + 1]);
  const double a_full = max_wheel_force(g, p) / p.mass;
  const TruckState x{0.0, v_up - 0.01, a_full, g, 0.0};
  const auto y = integrate_step(x, a_full, w, p, 0.2, 10);
  ASSERT_EQ(y.gear, g + 1);
  EXPECT_LE(p.mass * y.a_t, max_wheel_force(g + 1, p) * (1 + 1e-12));
}
