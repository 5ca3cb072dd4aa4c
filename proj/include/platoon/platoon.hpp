#pragma once

// Platoon topology: V2V messages, the delayed message bus, and the per-truck
// controllers (considerate MPC, anticipative MPC, CACC baseline).
//
// Truck k sends a ForwardMessage to k+1 (planned positions S_r and suggested
// controls U_r) and a BackwardMessage to k-1 (its state and powertrain
// limits). Messages sent in cycle c are readable in cycle c+1.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "platoon/ocp.hpp"

namespace platoon {

enum class ControllerKind { considerate, anticipative, cacc };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::considerate: return "considerate";
    case ControllerKind::anticipative: return "anticipative";
    case ControllerKind::cacc: return "cacc";
  }
  return "?";
}

inline ControllerKind parse_controller_kind(const std::string& s) {
  if (s == "considerate") return ControllerKind::considerate;
  if (s == "anticipative") return ControllerKind::anticipative;
  if (s == "cacc") return ControllerKind::cacc;
  throw std::invalid_argument("unknown controller kind '" + s + "'");
}

struct CaccGains {
  double k_p = 0.2;
  double k_v = 0.7;
  double k_ff = 1.0;
  double headway = 0.72;

  void validate() const {
    if (k_p < 0 || k_v < 0 || k_ff < 0) throw std::invalid_argument("CaccGains: gains must be >= 0");
    if (!(headway > 0)) throw std::invalid_argument("CaccGains: headway must be positive");
  }
};

/// Constant-time-headway PD law with acceleration feedforward (unclamped).
inline double cacc_law(double gap, double v_ego, double v_lead, double a_lead, const CaccGains& g) {
  return g.k_p * (gap - g.headway * v_ego) + g.k_v * (v_lead - v_ego) + g.k_ff * a_lead;
}

inline double cacc_law(double gap, double v_ego, double v_lead, double a_lead, const CaccGains& g,
                       const ControlBounds& bounds) {
  return bounds.clamp(cacc_law(gap, v_ego, v_lead, a_lead, g));
}

struct ForwardMessage {
  int from = 0;
  int cycle = 0;
  double t_sent = 0.0;
  double s0 = 0.0;  ///< sender position at t_sent
  double v0 = 0.0;
  double a0 = 0.0;  ///< sender net acceleration at t_sent
  double length = 0.0;
  double dt = 0.5;  ///< spacing of the plan samples
  std::vector<double> S_r;  ///< positions at t_sent + (i+1) dt
  std::vector<double> U_r;  ///< suggested controls per stage (may be empty)

  /// Sender position at absolute time t (linear in time between samples,
  /// extrapolated with the slope of the end segments).
  double position_at(double t) const {
    const double tau = (t - t_sent) / dt;
    if (S_r.empty()) return s0 + v0 * (t - t_sent);
    auto node = [&](int j) { return j == 0 ? s0 : S_r[j - 1]; };
    const int last = static_cast<int>(S_r.size());
    int j = static_cast<int>(std::floor(tau));
    j = std::clamp(j, 0, last - 1);
    const double w = tau - j;
    return node(j) + w * (node(j + 1) - node(j));
  }

  /// Suggested control in force at absolute time t (sample and hold).
  double suggestion_at(double t) const {
    const int last = static_cast<int>(U_r.size()) - 1;
    const int j = std::clamp(static_cast<int>(std::floor((t - t_sent) / dt + 1e-9)), 0, last);
    return U_r[j];
  }
};

struct BackwardMessage {
  int from = 0;
  int cycle = 0;
  double t_sent = 0.0;
  TruckState x;
  double mass = 0.0;
  double p_max = 0.0;
  double tau_max = 0.0;
  std::vector<double> gear_ratios;
  bool engaged = true;
};

inline nlohmann::json to_json(const ForwardMessage& m) {
  return {{"type", "forward"}, {"from", m.from}, {"cycle", m.cycle}, {"t_sent", m.t_sent},
          {"s0", m.s0},        {"v0", m.v0},     {"a0", m.a0},       {"length", m.length},
          {"dt", m.dt},        {"S_r", m.S_r},   {"U_r", m.U_r}};
}

inline nlohmann::json to_json(const BackwardMessage& m) {
  return {{"type", "backward"},
          {"from", m.from},
          {"cycle", m.cycle},
          {"t_sent", m.t_sent},
          {"x", {{"s", m.x.s}, {"v", m.x.v}, {"a_t", m.x.a_t}, {"gear", m.x.gear}, {"fuel", m.x.fuel_used}}},
          {"mass", m.mass},
          {"p_max", m.p_max},
          {"tau_max", m.tau_max},
          {"gear_ratios", m.gear_ratios},
          {"engaged", m.engaged}};
}

/// Latest messages available to one truck and their age in cycles.
struct Inbox {
  std::optional<ForwardMessage> fwd;  ///< from k-1
  std::optional<BackwardMessage> bwd;  ///< from k+1
  int fwd_age = 0;
  int bwd_age = 0;
  int fwd_missed = 0;  ///< consecutive cycles without a new forward message
  int bwd_missed = 0;
};

struct Outbox {
  std::optional<ForwardMessage> fwd;
  std::optional<BackwardMessage> bwd;
};

class MessageBus {
 public:
  MessageBus(int n_trucks, double drop_probability = 0.0, std::uint64_t seed = 0, int staleness_limit = 3)
      : inboxes_(n_trucks), pending_(n_trucks), drop_(drop_probability), rng_(seed), limit_(staleness_limit) {
    if (n_trucks < 1) throw std::invalid_argument("MessageBus: need at least one truck");
    if (drop_ < 0 || drop_ > 1) throw std::invalid_argument("MessageBus: drop probability outside [0, 1]");
  }

  void set_log(std::ostream* log) { log_ = log; }

  /// Queue the messages truck k produced this cycle.
  void post(int k, Outbox out) { pending_.at(k) = std::move(out); }

  /// Deliver everything posted in the previous cycle. Delivery runs in truck
  /// order so the drop draws are reproducible.
  void exchange(int cycle) {
    const int K = static_cast<int>(inboxes_.size());
    std::vector<bool> got_fwd(K, false), got_bwd(K, false);
    for (int k = 0; k < K; ++k) {
      Outbox& o = pending_[k];
      if (o.fwd && k + 1 < K) {
        if (deliver()) {
          if (log_) log(k, k + 1, to_json(*o.fwd));
          inboxes_[k + 1].fwd = std::move(o.fwd);
          got_fwd[k + 1] = true;
        }
      }
      if (o.bwd && k > 0) {
        if (deliver()) {
          if (log_) log(k, k - 1, to_json(*o.bwd));
          inboxes_[k - 1].bwd = std::move(o.bwd);
          got_bwd[k - 1] = true;
        }
      }
      o = Outbox{};
    }
    for (int k = 0; k < K; ++k) {
      Inbox& in = inboxes_[k];
      in.fwd_missed = got_fwd[k] ? 0 : in.fwd_missed + 1;
      in.bwd_missed = got_bwd[k] ? 0 : in.bwd_missed + 1;
      if (in.fwd) {
        in.fwd_age = cycle - in.fwd->cycle;
        if (in.fwd_age > limit_) in.fwd.reset();
      }
      if (in.bwd) {
        in.bwd_age = cycle - in.bwd->cycle;
        if (in.bwd_age > limit_) in.bwd.reset();
      }
    }
  }

  const Inbox& inbox(int k) const { return inboxes_.at(k); }
  long delivered() const { return delivered_; }
  long dropped() const { return dropped_; }
  int staleness_limit() const { return limit_; }

 private:
  bool deliver() {
    if (drop_ > 0.0) {
      const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
      if (r < drop_) {
        ++dropped_;
        return false;
      }
    }
    ++delivered_;
    return true;
  }

  void log(int from, int to, nlohmann::json payload) {
    if (!log_) return;
    const int cycle = payload["cycle"];
    nlohmann::json rec{{"cycle", cycle}, {"from", from}, {"to", to}, {"payload", std::move(payload)}};
    (*log_) << rec.dump() << '\n';
  }

  std::vector<Inbox> inboxes_;
  std::vector<Outbox> pending_;
  double drop_;
  std::mt19937_64 rng_;
  int limit_;
  long delivered_ = 0;
  long dropped_ = 0;
  std::ostream* log_ = nullptr;
};

struct ControllerConfig {
  ControllerKind kind = ControllerKind::considerate;
  OcpConfig ocp;
  CaccGains cacc;
  nlp::SqpOptions sqp;
};

/// What the sim hands a controller each cycle. The radar fields describe the
/// preceding truck as measured on board (gap and speed), available to every
/// follower regardless of the radio.
struct StepInput {
  double t = 0.0;
  int cycle = 0;
  TruckState x;
  const GradeProfile* road = nullptr;
  Inbox inbox;
  std::optional<double> radar_gap;
  std::optional<double> radar_v_lead;
};

struct StepOutput {
  double u = 0.0;
  Outbox out;
  bool solved = false;      ///< an OCP was solved this cycle
  bool converged = false;
  bool joint = false;       ///< considerate two-truck problem
  bool fell_back = false;   ///< stale data forced a simpler problem
  bool shift_fallback = false;
  bool request_disengage = false;
  double kkt = 0.0;
  int iterations = 0;
  double solve_time = 0.0;
  nlp::SolveStatus status = nlp::SolveStatus::converged;
  double eps1 = 0.0, eps2 = 0.0;
  std::optional<OcpSolution> solution;
};

class TruckController {
 public:
  TruckController(int index, int n_trucks, TruckParams params, ControllerConfig cfg)
      : index_(index), K_(n_trucks), params_(std::move(params)), cfg_(std::move(cfg)) {
    cfg_.ocp.validate();
    cfg_.cacc.validate();
  }

  int index() const { return index_; }
  const TruckParams& params() const { return params_; }
  const ControllerConfig& config() const { return cfg_; }
  bool disengaged() const { return disengaged_; }
  void set_disengaged(bool d) { disengaged_ = d; }
  int consecutive_failures() const { return failures_; }

  Role role() const {
    if (index_ == 0 || disengaged_) return Role::leader;
    return index_ == K_ - 1 ? Role::last : Role::mid;
  }

  StepOutput step(const StepInput& in) {
    if (!in.road) throw std::invalid_argument("TruckController::step: no road");
    StepOutput res;
    const ControlBounds bounds = admissible_control_set(std::max(in.x.v, 0.0), in.x.gear, params_);

    if (cfg_.kind == ControllerKind::cacc && role() != Role::leader) {
      double a_lead = 0.0;
      if (in.inbox.fwd) a_lead = in.inbox.fwd->a0;
      const double gap = in.radar_gap.value_or(cfg_.cacc.headway * in.x.v);
      const double v_lead = in.radar_v_lead.value_or(in.x.v);
      res.u = cacc_law(gap, in.x.v, v_lead, a_lead, cfg_.cacc, bounds);
      res.out.fwd = kinematic_message(in);
    } else {
      solve_mpc(in, bounds, res);
    }
    res.out.bwd = backward_message(in);
    return res;
  }

 private:
  EgoContext make_ego(const StepInput& in, const TruckParams& p, const TruckState& x, Role role) const {
    const OcpConfig& oc = cfg_.ocp;
    EgoContext e;
    e.role = role;
    e.x = x;
    e.params = p;
    e.t_now = in.t;
    const double reach = std::max(x.v, 1.0) * oc.horizon() + oc.preview_margin;
    e.preview = fit_preview(*in.road, x.s, reach, oc.preview_samples);
    return e;
  }

  /// Fill the predecessor plan: the radio plan when fresh enough, otherwise a
  /// constant-speed extrapolation of the on-board measurement.
  bool attach_leader(const StepInput& in, EgoContext& e, bool want_suggestion) const {
    const OcpConfig& oc = cfg_.ocp;
    const int N = oc.n_stages;
    e.leader_plan.resize(N);
    if (in.inbox.fwd) {
      const ForwardMessage& m = *in.inbox.fwd;
      e.leader_length = m.length;
      e.leader_position = m.position_at(in.t);
      for (int i = 0; i < N; ++i) e.leader_plan[i] = m.position_at(in.t + (i + 1) * oc.dt);
      if (want_suggestion && !m.U_r.empty()) {
        e.suggested.resize(N);
        for (int i = 0; i < N; ++i) e.suggested[i] = m.suggestion_at(in.t + i * oc.dt);
      }
      return true;
    }
    const double gap = in.radar_gap.value_or(oc.headway * in.x.v);
    const double v_lead = in.radar_v_lead.value_or(in.x.v);
    e.leader_length = 0.0;
    e.leader_position = in.x.s + gap;
    for (int i = 0; i < N; ++i) e.leader_plan[i] = e.leader_position + v_lead * (i + 1) * oc.dt;
    return false;
  }

  std::optional<FollowerContext> make_follower(const StepInput& in) const {
    if (!in.inbox.bwd || !in.inbox.bwd->engaged) return std::nullopt;
    const BackwardMessage& m = *in.inbox.bwd;
    TruckParams p = params_;
    p.mass = m.mass;
    p.p_max = m.p_max;
    p.tau_max = m.tau_max;
    if (!m.gear_ratios.empty()) {
      p.gear_ratios = m.gear_ratios;
      p.gear_efficiency.resize(m.gear_ratios.size(), params_.gear_efficiency.front());
    }
    // Bring the reported state up to now with the follower's own model.
    TruckState x = m.x;
    const double age = in.t - m.t_sent;
    if (age > 1e-9) {
      ExogenousInput w;
      w.grade = [road = in.road](double s) { return road->grade_at(s); };
      w.drag = &cfg_.ocp.drag;
      x = integrate_step(x, x.a_t, w, p, age, 4);
      x.gear = m.x.gear;
    }
    FollowerContext f = make_ego(in, p, x, index_ + 1 == K_ - 1 ? Role::last : Role::mid);
    f.age_cycles = in.inbox.bwd_age;
    return f;
  }

  void solve_mpc(const StepInput& in, const ControlBounds& bounds, StepOutput& res) {
    const Role r = role();
    const bool considerate = cfg_.kind == ControllerKind::considerate;
    EgoContext ego = make_ego(in, params_, in.x, r);
    if (ego.follows()) {
      const bool radio = attach_leader(in, ego, considerate);
      if (!radio) res.fell_back = true;
    }

    std::optional<OcpProblem> problem;
    const bool has_follower = index_ + 1 < K_;
    if (considerate && has_follower) {
      if (auto f = make_follower(in)) {
        problem.emplace(build_considerate(ego, *f, cfg_.ocp));
        res.fell_back = res.fell_back || problem->fell_back_to_solo();
      } else {
        res.fell_back = true;
      }
    }
    if (!problem) problem.emplace(build_solo(ego, cfg_.ocp, considerate && r != Role::leader && !has_follower));
    res.joint = problem->n_trucks() == 2;

    Eigen::VectorXd guess =
        prev_ ? warm_start(*prev_, *problem, in.t - prev_->t_now) : problem->cold_start();
    OcpSolution sol = solve_ocp(*problem, guess, cfg_.sqp);
    res.solved = true;
    res.converged = sol.report.status == nlp::SolveStatus::converged;
    res.kkt = sol.report.kkt_residual;
    res.iterations = sol.report.iterations;
    res.solve_time = sol.report.wall_time;
    res.status = sol.report.status;

    if (res.converged) {
      failures_ = 0;
      res.u = bounds.clamp(sol.u[0][0]);
      res.eps1 = sol.slack[0][0];
      res.eps2 = sol.slack[0][1];
      if (has_follower) {
        ForwardMessage m = plan_message(in, sol);
        if (res.joint)
          m.U_r = sol.u[1];
        else if (!considerate)
          m.U_r = sol.u[0];
        last_plan_ = m;
        res.out.fwd = std::move(m);
      }
      prev_ = sol;
      res.solution = std::move(sol);
      return;
    }

    ++failures_;
    res.shift_fallback = true;
    if (failures_ >= 2 || !prev_) {
      res.u = bounds.clamp(0.0);
      if (failures_ >= 2) res.request_disengage = true;
    } else {
      const double dt = cfg_.ocp.dt;
      const int N = prev_->n_stages();
      const int j = std::clamp(static_cast<int>(std::floor((in.t - prev_->t_now) / dt + 1e-9)), 0, N - 1);
      res.u = bounds.clamp(prev_->u[0][j]);
    }
    if (has_follower && last_plan_) res.out.fwd = last_plan_;
    res.solution = std::move(sol);
  }

  ForwardMessage plan_message(const StepInput& in, const OcpSolution& sol) const {
    ForwardMessage m;
    m.from = index_;
    m.cycle = in.cycle;
    m.t_sent = in.t;
    m.s0 = in.x.s;
    m.v0 = in.x.v;
    m.a0 = (params_.mass * in.x.a_t - plant_forces(in)) / params_.effective_mass(in.x.gear);
    m.length = params_.length;
    m.dt = cfg_.ocp.dt;
    m.S_r.assign(sol.s[0].begin() + 1, sol.s[0].end());
    return m;
  }

  ForwardMessage kinematic_message(const StepInput& in) const {
    ForwardMessage m;
    m.from = index_;
    m.cycle = in.cycle;
    m.t_sent = in.t;
    m.s0 = in.x.s;
    m.v0 = in.x.v;
    m.a0 = (params_.mass * in.x.a_t - plant_forces(in)) / params_.effective_mass(in.x.gear);
    m.length = params_.length;
    m.dt = cfg_.ocp.dt;
    const int N = cfg_.ocp.n_stages;
    m.S_r.resize(N);
    m.U_r.assign(N, in.x.a_t);
    for (int i = 0; i < N; ++i) {
      const double tau = (i + 1) * m.dt;
      m.S_r[i] = m.s0 + std::max(0.0, m.v0 * tau + 0.5 * m.a0 * tau * tau);
    }
    return m;
  }

  double plant_forces(const StepInput& in) const {
    std::optional<double> gap = in.radar_gap;
    if (gap && *gap < 0) gap.reset();
    return aero_force(std::max(in.x.v, 0.0), gap, params_, cfg_.ocp.drag) +
           rolling_force(in.road->grade_at(in.x.s), params_);
  }

  BackwardMessage backward_message(const StepInput& in) const {
    BackwardMessage m;
    m.from = index_;
    m.cycle = in.cycle;
    m.t_sent = in.t;
    m.x = in.x;
    m.mass = params_.mass;
    m.p_max = params_.p_max;
    m.tau_max = params_.tau_max;
    m.gear_ratios = params_.gear_ratios;
    m.engaged = !disengaged_;
    return m;
  }

  int index_;
  int K_;
  TruckParams params_;
  ControllerConfig cfg_;
  bool disengaged_ = false;
  int failures_ = 0;
  std::optional<OcpSolution> prev_;
  std::optional<ForwardMessage> last_plan_;
};

}  // namespace platoon
