#include <cmath>

#include <gtest/gtest.h>

#include "platoon/platoon.hpp"

using namespace platoon;

namespace {

const GradeProfile& flat_road() {
  static const GradeProfile g({0.0, 1e6}, {0.0, 0.0});
  return g;
}

TruckState steady_state(double s, double v, const TruckParams& p, std::optional<double> gap = std::nullopt) {
  return {s, v, equilibrium_traction(v, 0.0, gap, p, default_drag_model()), settled_gear(v, p), 0.0};
}

BackwardMessage report_from(int k, int cycle, const TruckState& x, const TruckParams& p) {
  BackwardMessage m;
  m.from = k;
  m.cycle = cycle;
  m.x = x;
  m.mass = p.mass;
  m.p_max = p.p_max;
  m.tau_max = p.tau_max;
  m.gear_ratios = p.gear_ratios;
  return m;
}

ForwardMessage constant_plan(int k, int cycle, double s0, double v, double length, const OcpConfig& cfg) {
  ForwardMessage m;
  m.from = k;
  m.cycle = cycle;
  m.s0 = s0;
  m.v0 = v;
  m.length = length;
  m.dt = cfg.dt;
  for (int i = 0; i < cfg.n_stages; ++i) m.S_r.push_back(s0 + v * (i + 1) * cfg.dt);
  return m;
}

}  // namespace

TEST(CaccLaw, ZeroErrorsGiveZero) {
  const CaccGains g;
  EXPECT_DOUBLE_EQ(cacc_law(g.headway * 22.0, 22.0, 22.0, 0.0, g), 0.0);
}

TEST(CaccLaw, GapShortByFiveMetres) {
  const CaccGains g;
  EXPECT_NEAR(cacc_law(g.headway * 20.0 - 5.0, 20.0, 20.0, 0.0, g), -1.0, 1e-12);
}

TEST(CaccLaw, ClampedToAdmissibleSet) {
  const CaccGains g;
  const ControlBounds b{-3.0, 0.31};
  // Demand 0.8 from a gap deficit the other way round.
  const double gap = g.headway * 20.0 + 4.0;
  ASSERT_NEAR(cacc_law(gap, 20.0, 20.0, 0.0, g), 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(cacc_law(gap, 20.0, 20.0, 0.0, g, b), 0.31);
}

TEST(MessageBus, OneCycleDelay) {
  MessageBus bus(3);
  for (int k = 0; k < 3; ++k) {
    Outbox o;
    if (k < 2) o.fwd = ForwardMessage{.from = k, .cycle = 0};
    if (k > 0) o.bwd = BackwardMessage{.from = k, .cycle = 0};
    bus.post(k, o);
  }
  EXPECT_FALSE(bus.inbox(1).fwd);
  bus.exchange(1);
  EXPECT_FALSE(bus.inbox(0).fwd);
  EXPECT_EQ(bus.inbox(1).fwd->from, 0);
  EXPECT_EQ(bus.inbox(2).fwd->from, 1);
  EXPECT_EQ(bus.inbox(0).bwd->from, 1);
  EXPECT_EQ(bus.inbox(1).bwd->from, 2);
  EXPECT_FALSE(bus.inbox(2).bwd);
  for (int k = 0; k < 3; ++k) {
    if (bus.inbox(k).fwd) EXPECT_EQ(bus.inbox(k).fwd->cycle, 0);
    if (bus.inbox(k).bwd) EXPECT_EQ(bus.inbox(k).bwd->cycle, 0);
  }
  EXPECT_EQ(bus.delivered(), 4);
}

TEST(MessageBus, StaleMessagesDiscarded) {
  MessageBus bus(2, 0.0, 0, 3);
  Outbox o;
  o.fwd = ForwardMessage{.from = 0, .cycle = 0};
  bus.post(0, o);
  bus.exchange(1);
  for (int c = 2; c <= 3; ++c) {
    bus.exchange(c);
    EXPECT_TRUE(bus.inbox(1).fwd) << c;
    EXPECT_EQ(bus.inbox(1).fwd_age, c);
  }
  bus.exchange(4);  // four cycles old: past the limit of three
  EXPECT_FALSE(bus.inbox(1).fwd);
  EXPECT_EQ(bus.inbox(1).fwd_missed, 3);
}

TEST(MessageBus, TotalLossGrowsStaleness) {
  MessageBus bus(3, 1.0, 9);
  int prev = -1;
  for (int c = 0; c < 20; ++c) {
    for (int k = 0; k < 3; ++k) {
      Outbox o;
      o.fwd = ForwardMessage{.from = k, .cycle = c};
      o.bwd = BackwardMessage{.from = k, .cycle = c};
      bus.post(k, o);
    }
    bus.exchange(c + 1);
    EXPECT_GT(bus.inbox(1).fwd_missed, prev);
    prev = bus.inbox(1).fwd_missed;
    EXPECT_FALSE(bus.inbox(1).fwd);
    EXPECT_FALSE(bus.inbox(1).bwd);
  }
  EXPECT_EQ(bus.delivered(), 0);
}

TEST(MessageBus, SeededDropRate) {
  MessageBus bus(2, 0.2, 2024);
  for (int c = 0; c < 1000; ++c) {
    Outbox a, b;
    a.fwd = ForwardMessage{.from = 0, .cycle = c};
    b.bwd = BackwardMessage{.from = 1, .cycle = c};
    bus.post(0, a);
    bus.post(1, b);
    bus.exchange(c + 1);
  }
  const double frac = static_cast<double>(bus.delivered()) / (bus.delivered() + bus.dropped());
  EXPECT_EQ(bus.delivered() + bus.dropped(), 2000);
  EXPECT_NEAR(frac, 0.8, 0.03);
}

TEST(MessageBus, RejectsBadArguments) {
  EXPECT_THROW(MessageBus(0), std::invalid_argument);
  EXPECT_THROW(MessageBus(2, 1.5), std::invalid_argument);
}

TEST(ForwardMessage, PositionInterpolation) {
  OcpConfig cfg;
  const auto m = constant_plan(0, 0, 100.0, 20.0, 18.0, cfg);
  EXPECT_DOUBLE_EQ(m.position_at(0.0), 100.0);
  EXPECT_NEAR(m.position_at(0.25), 105.0, 1e-12);
  EXPECT_NEAR(m.position_at(3.3), 166.0, 1e-12);
  // Past the last sample the end slope continues.
  EXPECT_NEAR(m.position_at(cfg.horizon() + 1.0), 100.0 + 20.0 * (cfg.horizon() + 1.0), 1e-9);
}

TEST(Controller, Roles) {
  TruckParams p;
  ControllerConfig cc;
  EXPECT_EQ(TruckController(0, 3, p, cc).role(), Role::leader);
  EXPECT_EQ(TruckController(1, 3, p, cc).role(), Role::mid);
  EXPECT_EQ(TruckController(2, 3, p, cc).role(), Role::last);
  TruckController c(2, 3, p, cc);
  c.set_disengaged(true);
  EXPECT_EQ(c.role(), Role::leader);
}

TEST(Controller, CaccAtSteadyStateCommandsZero) {
  TruckParams p;
  ControllerConfig cc;
  cc.kind = ControllerKind::cacc;
  TruckController c(1, 2, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(0.0, 22.0, p);
  in.radar_gap = cc.cacc.headway * 22.0;
  in.radar_v_lead = 22.0;
  const auto out = c.step(in);
  EXPECT_DOUBLE_EQ(out.u, 0.0);
  EXPECT_FALSE(out.solved);
}

TEST(Controller, ConsiderateLeaderWithIdenticalFollowerAtEquilibrium) {
  TruckParams p;
  ControllerConfig cc;
  const double v = cc.ocp.v_ref;
  const double gap = cc.ocp.headway * v;
  TruckController lead(0, 2, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(1000.0, v, p);
  in.inbox.bwd = report_from(1, 0, steady_state(1000.0 - p.length - gap, v, p, gap), p);
  const auto out = lead.step(in);
  ASSERT_TRUE(out.converged);
  EXPECT_TRUE(out.joint);
  EXPECT_FALSE(out.fell_back);
  EXPECT_NEAR(out.u, equilibrium_traction(v, 0.0, std::nullopt, p, default_drag_model()), 5e-3);
  ASSERT_TRUE(out.out.fwd);
  const auto& U = out.out.fwd->U_r;
  ASSERT_EQ(static_cast<int>(U.size()), cc.ocp.n_stages);
  EXPECT_NEAR(U[0], equilibrium_traction(v, 0.0, gap, p, default_drag_model()), 5e-3);
  // The suggestions are the follower block of the joint solution.
  ASSERT_TRUE(out.solution);
  EXPECT_EQ(U, out.solution->u[1]);
  EXPECT_EQ(static_cast<int>(out.out.fwd->S_r.size()), cc.ocp.n_stages);
  for (std::size_t i = 1; i < out.out.fwd->S_r.size(); ++i) EXPECT_GE(out.out.fwd->S_r[i], out.out.fwd->S_r[i - 1]);
}

TEST(Controller, AnticipativeFollowerHoldsEquilibrium) {
  TruckParams p;
  ControllerConfig cc;
  cc.kind = ControllerKind::anticipative;
  const double v = cc.ocp.v_ref;  // the terminal pace falls back to the reference
  const double gap = cc.ocp.headway * v;
  TruckController fol(1, 2, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(0.0, v, p, gap);
  in.inbox.fwd = constant_plan(0, 0, p.length + gap, v, p.length, cc.ocp);
  in.radar_gap = gap;
  in.radar_v_lead = v;
  const auto out = fol.step(in);
  ASSERT_TRUE(out.converged);
  EXPECT_FALSE(out.joint);
  EXPECT_NEAR(out.u, equilibrium_traction(v, 0.0, gap, p, default_drag_model()), 1e-3);
  EXPECT_FALSE(out.out.fwd);  // last truck has nobody to plan for
  ASSERT_TRUE(out.out.bwd);
  EXPECT_EQ(out.out.bwd->mass, p.mass);
}

TEST(Controller, AnticipativeLeaderSendsOwnControls) {
  TruckParams p;
  ControllerConfig cc;
  cc.kind = ControllerKind::anticipative;
  TruckController lead(0, 2, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(0.0, 24.0, p);
  const auto out = lead.step(in);
  ASSERT_TRUE(out.converged);
  ASSERT_TRUE(out.out.fwd);
  EXPECT_EQ(out.out.fwd->U_r, out.solution->u[0]);
}

TEST(Controller, MissingFollowerReportFallsBack) {
  TruckParams p;
  ControllerConfig cc;
  TruckController lead(0, 2, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(0.0, 24.0, p);
  const auto out = lead.step(in);
  EXPECT_TRUE(out.fell_back);
  EXPECT_FALSE(out.joint);

  TruckController fol(1, 2, p, cc);
  in.radar_gap = 30.0;
  in.radar_v_lead = 24.0;
  EXPECT_TRUE(fol.step(in).fell_back);
}

TEST(Controller, FailureFallbackStaysAdmissibleAndDisengages) {
  TruckParams p;
  ControllerConfig cc;
  cc.sqp.max_iter = 1;
  TruckController lead(0, 1, p, cc);
  StepInput in;
  in.road = &flat_road();
  in.x = steady_state(0.0, 12.0, p);  // far from the 25 m/s reference
  const auto b = admissible_control_set(in.x.v, in.x.gear, p);
  const auto first = lead.step(in);
  ASSERT_FALSE(first.converged);
  EXPECT_TRUE(first.shift_fallback);
  EXPECT_FALSE(first.request_disengage);
  EXPECT_GE(first.u, b.u_min);
  EXPECT_LE(first.u, b.u_max);
  in.t = 0.2;
  in.cycle = 1;
  const auto second = lead.step(in);
  ASSERT_FALSE(second.converged);
  EXPECT_TRUE(second.request_disengage);
  EXPECT_GE(second.u, b.u_min);
  EXPECT_LE(second.u, b.u_max);
  EXPECT_EQ(lead.consecutive_failures(), 2);
}

TEST(Messages, SerializeToJson) {
  OcpConfig cfg;
  const auto j = to_json(constant_plan(0, 7, 10.0, 20.0, 18.0, cfg));
  EXPECT_EQ(j["cycle"], 7);
  EXPECT_EQ(j["S_r"].size(), static_cast<std::size_t>(cfg.n_stages));
}
