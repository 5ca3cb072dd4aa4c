#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "platoon/ocp.hpp"

using namespace platoon;

namespace {

const GradeProfile& flat_road() {
  static const GradeProfile g({0.0, 1e6}, {0.0, 0.0});
  return g;
}

EgoContext make_ctx(Role role, const TruckParams& p, const GradeProfile& road, double s, double v,
                    const OcpConfig& cfg, std::optional<double> gap_for_eq = std::nullopt) {
  EgoContext c;
  c.role = role;
  c.params = p;
  const double a = equilibrium_traction(v, road.grade_at(s), gap_for_eq, p, cfg.drag);
  c.x = {s, v, a, settled_gear(v, p), 0.0};
  c.preview = fit_preview(road, s, v * cfg.horizon() + cfg.preview_margin, cfg.preview_samples);
  return c;
}

// A predecessor driving at constant speed v_lead, currently at s_lead.
void constant_speed_plan(EgoContext& c, double s_lead, double v_lead, double length, const OcpConfig& cfg) {
  c.leader_position = s_lead;
  c.leader_length = length;
  c.leader_plan.resize(cfg.n_stages);
  for (int i = 0; i < cfg.n_stages; ++i) c.leader_plan[i] = s_lead + v_lead * (i + 1) * cfg.dt;
}

double eq_traction(const TruckParams& p, double v, std::optional<double> gap = std::nullopt) {
  return equilibrium_traction(v, 0.0, gap, p, default_drag_model());
}

void expect_admissible(const OcpProblem& prob, const OcpSolution& sol, const std::vector<TruckParams>& params,
                       const std::vector<TruckState>& x0) {
  for (int k = 0; k < prob.n_trucks(); ++k) {
    const auto& p = params[k];
    const auto b = admissible_control_set(x0[k].v, x0[k].gear, p);
    EXPECT_LE(sol.u[k][0], b.u_max + 1e-12);
    for (int i = 0; i < prob.n_stages(); ++i) {
      EXPECT_LE(std::abs(p.mass * sol.u[k][i]), max_wheel_force(x0[k].gear, p) + 1e-6);
      if (i > 0) EXPECT_LE(p.mass * sol.u[k][i] * sol.v[k][i], p.p_max + 1e-6) << "truck " << k << " stage " << i;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Cost and constraint pieces

TEST(StageCost, Examples) {
  OcpConfig cfg;
  StageValues sv;
  sv.v = 25.0;
  EXPECT_EQ(stage_cost(sv, cfg, Role::leader, std::nullopt, 25.0), 0.0);
  sv = {};
  sv.v = 20.0;
  sv.d = cfg.headway * 20.0;
  EXPECT_EQ(stage_cost(sv, cfg, Role::last, 0.0, 25.0), 0.0);
  cfg.q_u = 0.1;
  cfg.q_d = 0.5;
  cfg.q_c = 0.2;
  cfg.headway = 1.2;
  sv = {};
  sv.u = 0.3;
  sv.d = 40.0;
  sv.v = 30.0;
  EXPECT_NEAR(stage_cost(sv, cfg, Role::mid, 0.1, 25.0), 0.1 * 0.09 + 0.5 * 16.0 + 0.2 * 0.04, 1e-12);
  EXPECT_NEAR(stage_cost(sv, cfg, Role::mid, 0.1, 25.0), 8.017, 1e-12);
  // Without a suggestion the compliance term is inactive.
  EXPECT_NEAR(stage_cost(sv, cfg, Role::mid, std::nullopt, 25.0), 8.009, 1e-12);
}

TEST(TerminalCost, Examples) {
  OcpConfig cfg;
  cfg.q_t = 1.0;
  cfg.s_f = 11000.0;
  cfg.t_f = 500.0;
  EXPECT_NEAR(terminal_cost(10000.0, 25.0, 460.0, cfg), 0.0, 1e-20);
  EXPECT_NEAR(terminal_cost(10000.0, 20.0, 460.0, cfg), 25.0, 1e-12);
  cfg.q_t = 2.0;
  cfg.s_f = 1234.0;
  cfg.t_f = 56.7;
  const double pace = 1234.0 / 56.7;
  EXPECT_NEAR(terminal_cost(0.0, 20.0, 0.0, cfg), 2.0 * (pace - 20.0) * (pace - 20.0), 1e-12);
  // Past the trip end time the pace term falls back to nu tracking.
  EXPECT_NEAR(terminal_cost(0.0, 20.0, 60.0, cfg), 2.0 * 25.0, 1e-12);
}

TEST(PathConstraints, Examples) {
  OcpConfig cfg;
  StageValues sv;
  sv.v = 25.0;
  auto r = path_constraints(sv, cfg, false);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_GT(r[0], 0.0);
  EXPECT_GT(r[1], 0.0);
  sv.d = cfg.d_min;
  r = path_constraints(sv, cfg, true);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[2], 0.0);
  sv.v = 32.0;
  EXPECT_LT(path_constraints(sv, cfg, false)[1], 0.0);
  sv.eps1 = 2.0;
  EXPECT_GE(path_constraints(sv, cfg, false)[1], 0.0);
}

// ---------------------------------------------------------------------------
// Problem construction

TEST(BuildConsiderate, LayoutAndCounts) {
  OcpConfig cfg;
  TruckParams p;
  auto ego = make_ctx(Role::leader, p, flat_road(), 1000.0, 25.0, cfg);
  auto fol = make_ctx(Role::last, p, flat_road(), 1000.0 - 20.0 - 18.0, 25.0, cfg);
  const auto prob = build_considerate(ego, fol, cfg);
  EXPECT_EQ(prob.n_vars(), 2 * 3 * 23 + 2 * 22 + 4);
  EXPECT_EQ(prob.n_vars(), 186);
  EXPECT_EQ(prob.n_eq(), 2 * 3 * 22);
  // Slices are disjoint and cover every variable.
  std::vector<int> hits(prob.n_vars(), 0);
  for (const auto& sl : prob.layout())
    for (int i = sl.begin; i < sl.begin + sl.count; ++i) ++hits[i];
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_EQ(prob.lower()[prob.slack_index(0, 0)], 0.0);
  EXPECT_EQ(prob.lower()[prob.slack_index(1, 1)], 0.0);
}

TEST(BuildSolo, FollowerNeedsPlan) {
  OcpConfig cfg;
  TruckParams p;
  auto fol = make_ctx(Role::last, p, flat_road(), 0.0, 25.0, cfg);
  EXPECT_THROW(build_solo(fol, cfg), std::invalid_argument);
}

TEST(BuildSolo, LeaderHoldsEquilibrium) {
  OcpConfig cfg;
  TruckParams p;
  const auto ego = make_ctx(Role::leader, p, flat_road(), 0.0, cfg.v_ref, cfg);
  const auto prob = build_solo(ego, cfg);
  const auto sol = solve_ocp(prob, prob.cold_start());
  ASSERT_EQ(sol.report.status, nlp::SolveStatus::converged);
  EXPECT_NEAR(sol.u[0][0], eq_traction(p, cfg.v_ref), 5e-3);
  for (double v : sol.v[0]) EXPECT_NEAR(v, cfg.v_ref, 0.1);
}

TEST(BuildSolo, ComplianceGateIdempotentWhenWeightZero) {
  OcpConfig cfg;
  cfg.q_c = 0.0;
  TruckParams p;
  auto fol = make_ctx(Role::last, p, flat_road(), 0.0, 24.0, cfg);
  constant_speed_plan(fol, 40.0, 25.0, p.length, cfg);
  fol.suggested.assign(cfg.n_stages, 0.1);
  const auto a = solve_ocp(build_solo(fol, cfg, true), build_solo(fol, cfg, true).cold_start());
  const auto b = solve_ocp(build_solo(fol, cfg, false), build_solo(fol, cfg, false).cold_start());
  ASSERT_EQ(a.report.status, nlp::SolveStatus::converged);
  EXPECT_EQ(a.report.iterations, b.report.iterations);
  for (int i = 0; i < cfg.n_stages; ++i) EXPECT_EQ(a.u[0][i], b.u[0][i]);
}

TEST(BuildSolo, UnavoidableCloseCallUsesGapSlack) {
  OcpConfig cfg;
  TruckParams p;
  auto fol = make_ctx(Role::last, p, flat_road(), 0.0, 25.0, cfg);
  // The predecessor brakes at 6 m/s^2 from 14 m ahead, far beyond the brake floor.
  fol.leader_position = 34.0;
  fol.leader_length = 20.0;
  fol.leader_plan.resize(cfg.n_stages);
  for (int i = 0; i < cfg.n_stages; ++i) {
    const double t = std::min((i + 1) * cfg.dt, 25.0 / 6.0);
    fol.leader_plan[i] = 34.0 + 25.0 * t - 3.0 * t * t;
  }
  const auto prob = build_solo(fol, cfg);
  const auto sol = solve_ocp(prob, prob.cold_start());
  ASSERT_EQ(sol.report.status, nlp::SolveStatus::converged);
  EXPECT_GT(sol.slack[0][1], 0.0);
  for (int i = 1; i <= cfg.n_stages; ++i)
    EXPECT_GE(prob.gap(sol.z, 0, i) + sol.slack[0][1] - cfg.d_min, -1e-6);
  EXPECT_NEAR(sol.u[0][0], -p.brake_decel, 1e-6);
}

TEST(BuildConsiderate, IdenticalPairAtEquilibrium) {
  OcpConfig cfg;
  TruckParams p;
  const double v = cfg.v_ref, gap = cfg.headway * v;
  const auto ego = make_ctx(Role::leader, p, flat_road(), 1000.0, v, cfg);
  const auto fol = make_ctx(Role::last, p, flat_road(), 1000.0 - p.length - gap, v, cfg, gap);
  const auto prob = build_considerate(ego, fol, cfg);
  const auto sol = solve_ocp(prob, prob.cold_start());
  ASSERT_EQ(sol.report.status, nlp::SolveStatus::converged);
  EXPECT_NEAR(sol.u[0][0], eq_traction(p, v), 5e-3);
  EXPECT_NEAR(sol.u[1][0], eq_traction(p, v, gap), 5e-3);
  // The steady cost is effort only; anything above it is small.
  const double floor = cfg.n_stages * cfg.q_u *
                       (std::pow(eq_traction(p, v), 2) + std::pow(eq_traction(p, v, gap), 2));
  EXPECT_LE(sol.objective, floor * 1.001);
  expect_admissible(prob, sol, {p, p}, {ego.x, fol.x});
}

TEST(BuildConsiderate, DecouplesWithoutCouplingWeights) {
  OcpConfig cfg;
  cfg.q_c = 0.0;
  cfg.q_d = 0.0;
  cfg.q_t = 0.0;
  TruckParams p;
  TruckParams heavy = p;
  heavy.mass = 38000;
  p.mass = 14000;
  const auto road = make_s_road();
  const auto ego = make_ctx(Role::leader, p, road, 24000.0, 23.0, cfg);
  const auto fol = make_ctx(Role::last, heavy, road, 24000.0 - 20.0 - 18.0, 22.0, cfg);
  const auto joint = build_considerate(ego, fol, cfg);
  const auto js = solve_ocp(joint, joint.cold_start());
  const auto solo = build_solo(ego, cfg, false);
  const auto ss = solve_ocp(solo, solo.cold_start());
  ASSERT_EQ(js.report.status, nlp::SolveStatus::converged);
  ASSERT_EQ(ss.report.status, nlp::SolveStatus::converged);
  for (int i = 0; i < cfg.n_stages; ++i) EXPECT_NEAR(js.u[0][i], ss.u[0][i], 1e-6) << i;
}

TEST(BuildConsiderate, StaleFollowerFallsBack) {
  OcpConfig cfg;
  TruckParams p;
  const auto ego = make_ctx(Role::leader, p, flat_road(), 1000.0, 25.0, cfg);
  auto fol = make_ctx(Role::last, p, flat_road(), 960.0, 25.0, cfg);
  fol.age_cycles = cfg.max_follower_age + 1;
  const auto prob = build_considerate(ego, fol, cfg);
  EXPECT_TRUE(prob.fell_back_to_solo());
  EXPECT_EQ(prob.n_trucks(), 1);
  EXPECT_FALSE(prob.has_compliance(0));
}

TEST(RoleGating, FollowerIgnoresSpeedReference) {
  // nu reaches a follower only through the terminal-pace fallback, so the
  // stage terms are compared with q_t = 0.
  OcpConfig a_cfg;
  a_cfg.q_t = 0.0;
  OcpConfig b_cfg = a_cfg;
  b_cfg.v_ref = 18.0;
  TruckParams p;
  auto fol = make_ctx(Role::last, p, flat_road(), 0.0, 24.0, a_cfg);
  constant_speed_plan(fol, p.length + a_cfg.headway * 24.0 + 0.3, 24.0, p.length, a_cfg);
  const auto a = solve_ocp(build_solo(fol, a_cfg), build_solo(fol, a_cfg).cold_start());
  const auto b = solve_ocp(build_solo(fol, b_cfg), build_solo(fol, b_cfg).cold_start());
  ASSERT_EQ(a.report.status, nlp::SolveStatus::converged);
  EXPECT_LT(a.u[0][0], admissible_control_set(fol.x.v, fol.x.gear, p).u_max - 1e-3);  // not saturated
  EXPECT_EQ(a.u[0][0], b.u[0][0]);

  const auto leader = build_solo(make_ctx(Role::leader, p, flat_road(), 0.0, 24.0, a_cfg), a_cfg);
  EXPECT_FALSE(leader.has_gap(0));
  EXPECT_FALSE(leader.has_compliance(0));
}

TEST(Solution, GapConsistencyAndZeroSlack) {
  OcpConfig cfg;
  TruckParams p;
  const auto road = make_s_road();
  auto fol = make_ctx(Role::mid, p, road, 21000.0, 23.0, cfg);
  constant_speed_plan(fol, 21000.0 + 20.0 + 17.0, 22.5, p.length, cfg);
  fol.suggested.assign(cfg.n_stages, 0.2);
  const auto prob = build_solo(fol, cfg);
  const auto sol = solve_ocp(prob, prob.cold_start());
  ASSERT_EQ(sol.report.status, nlp::SolveStatus::converged);
  for (int i = 0; i <= cfg.n_stages; ++i) {
    const double lead = i == 0 ? fol.leader_position : fol.leader_plan[i - 1];
    EXPECT_NEAR(lead - p.length - sol.s[0][i], prob.gap(sol.z, 0, i), 1e-9);
  }
  EXPECT_NEAR(sol.slack[0][0], 0.0, 1e-9);
  EXPECT_NEAR(sol.slack[0][1], 0.0, 1e-9);
  expect_admissible(prob, sol, {p}, {fol.x});
}

// ---------------------------------------------------------------------------
// Optimality against brute force

TEST(Optimality, TwoStageGridSearch) {
  OcpConfig cfg;
  cfg.n_stages = 2;
  TruckParams p;
  const auto ego = make_ctx(Role::leader, p, flat_road(), 0.0, 22.0, cfg);
  const auto prob = build_solo(ego, cfg);
  const auto sol = solve_ocp(prob, prob.cold_start());
  ASSERT_EQ(sol.report.status, nlp::SolveStatus::converged);

  const int u0 = prob.control_index(0, 0), u1 = prob.control_index(1, 0);
  const double lo0 = prob.lower()[u0], hi0 = prob.upper()[u0];
  const double lo1 = prob.lower()[u1], hi1 = prob.upper()[u1];
  const auto spec = prob.spec();
  nlp::NlpEvaluation ev;
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a <= 400; ++a)
    for (int b = 0; b <= 400; ++b) {
      const double x = lo0 + (hi0 - lo0) * a / 400.0, y = lo1 + (hi1 - lo1) * b / 400.0;
      const Eigen::VectorXd z = prob.rollout({{x, y}});
      spec.evaluate(z, false, ev);
      if (ev.c_in.size() && ev.c_in.minCoeff() < 0) continue;
      best = std::min(best, prob.objective_terms(z));
    }
  EXPECT_NEAR(sol.objective, best, 1e-4);
  EXPECT_LE(sol.objective, best + 1e-9);
}

TEST(Derivatives, ConsiderateProblemAtRandomPoint) {
  OcpConfig cfg;
  TruckParams p, heavy;
  p.mass = 14000;
  heavy.mass = 38000;
  const auto road = make_s_road();
  auto ego = make_ctx(Role::mid, p, road, 19800.0, 24.0, cfg);
  constant_speed_plan(ego, 19800.0 + 38.0, 24.5, p.length, cfg);
  ego.suggested.assign(cfg.n_stages, 0.1);
  const auto fol = make_ctx(Role::last, heavy, road, 19800.0 - 20.0 - 25.0, 23.5, cfg);
  const auto prob = build_considerate(ego, fol, cfg);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  Eigen::VectorXd z = prob.cold_start();
  for (int i = 0; i < z.size(); ++i) z[i] += 1e-2 * nd(rng) * (1.0 + std::abs(z[i]) * 1e-2);
  for (int k = 0; k < 2; ++k)
    for (int w = 0; w < 2; ++w) z[prob.slack_index(k, w)] = 0.5;
  const auto dc = nlp::check_derivatives(prob.spec(), z);
  EXPECT_LE(dc.max_rel_error, 1e-5) << dc.worst;
}

// ---------------------------------------------------------------------------
// Warm start

TEST(WarmStart, ShiftsControls) {
  OcpConfig cfg;
  TruckParams p;
  const auto ego = make_ctx(Role::leader, p, flat_road(), 0.0, 22.0, cfg);
  const auto prob = build_solo(ego, cfg);
  OcpSolution prev = prob.unpack(prob.cold_start());
  for (int i = 0; i < cfg.n_stages; ++i) prev.u[0][i] = 0.01 * i;
  const Eigen::VectorXd z = warm_start(prev, prob);
  for (int i = 0; i + 1 < cfg.n_stages; ++i) EXPECT_NEAR(z[prob.control_index(i, 0)], prev.u[0][i + 1], 1e-15);
  EXPECT_NEAR(z[prob.control_index(cfg.n_stages - 1, 0)], prev.u[0][cfg.n_stages - 1], 1e-15);
}

TEST(WarmStart, ColdStartHoldsSpeed) {
  OcpConfig cfg;
  TruckParams p;
  const auto prob = build_solo(make_ctx(Role::leader, p, flat_road(), 0.0, 25.0, cfg), cfg);
  const Eigen::VectorXd z = prob.cold_start();
  for (int i = 0; i <= cfg.n_stages; ++i) EXPECT_EQ(z[prob.state_index(i, 0, 1)], 25.0);
}

TEST(WarmStart, ConvergesFasterThanCold) {
  OcpConfig cfg;
  TruckParams light, heavy;
  light.mass = 14000;
  heavy.mass = 38000;
  const auto road = make_s_road();
  auto ego = make_ctx(Role::leader, light, road, 20500.0, 21.0, cfg);
  auto fol = make_ctx(Role::last, heavy, road, 20500.0 - 20.0 - 20.0, 21.5, cfg);
  const auto p0 = build_considerate(ego, fol, cfg);
  const auto s0 = solve_ocp(p0, p0.cold_start());
  ASSERT_EQ(s0.report.status, nlp::SolveStatus::converged);

  // Advance both trucks along their plans by one stage and re-solve.
  ego.x = {s0.s[0][1], s0.v[0][1], s0.a[0][1], ego.x.gear, 0.0};
  fol.x = {s0.s[1][1], s0.v[1][1], s0.a[1][1], fol.x.gear, 0.0};
  ego.t_now = fol.t_now = cfg.dt;
  ego.preview = fit_preview(road, ego.x.s, ego.x.v * cfg.horizon() + cfg.preview_margin, cfg.preview_samples);
  fol.preview = fit_preview(road, fol.x.s, fol.x.v * cfg.horizon() + cfg.preview_margin, cfg.preview_samples);
  const auto p1 = build_considerate(ego, fol, cfg);
  const auto warm = solve_ocp(p1, warm_start(s0, p1));
  const auto cold = solve_ocp(p1, p1.cold_start());
  ASSERT_EQ(warm.report.status, nlp::SolveStatus::converged);
  ASSERT_EQ(cold.report.status, nlp::SolveStatus::converged);
  EXPECT_LE(warm.report.iterations, 3);
  EXPECT_LE(warm.report.iterations, cold.report.iterations);
}
