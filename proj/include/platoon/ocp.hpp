#pragma once

// Optimal control problems of the platoon MPC, transcribed by direct multiple
// shooting with a fixed-step RK4 integrator per stage.
//
// Decision vector (stage-major, T trucks in the problem, NX = 3T):
//   [X_0 U_0 | X_1 U_1 | ... | X_{N-1} U_{N-1} | X_N | eps1_0 eps2_0 ... ]
// where X_i stacks (s, v, a_t) of every truck at node i and U_i their
// tractive-acceleration commands over stage i. X_0 is pinned to the measured
// state through its bounds. Equality rows i*NX..(i+1)*NX-1 are the defects
// X_{i+1} - Phi(X_i, U_i); node states X_1..X_N are the dependent variables
// the solver eliminates.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "platoon/nlp.hpp"
#include "platoon/powertrain.hpp"
#include "platoon/road.hpp"

namespace platoon {

enum class Role { leader, mid, last };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::leader: return "leader";
    case Role::mid: return "mid";
    case Role::last: return "last";
  }
  return "?";
}

struct OcpConfig {
  int n_stages = 22;
  int n_nodes = 10;
  double dt = 0.5;
  double q_t = 1.0;
  double q_u = 2.0;
  double q_v = 1.0;
  double q_d = 1.0;
  double q_c = 0.5;
  double q_eps = 1e4;
  double headway = 0.72;
  double v_max = 30.0;
  double d_min = 10.0;
  double v_ref = 25.0;
  double s_f = 1e9;
  double t_f = 0.0;
  int preview_samples = 20;
  double preview_margin = 200.0;
  int max_follower_age = 1;  ///< control cycles; older follower data means no joint problem
  DragReductionModel drag = default_drag_model();

  void validate() const {
    auto fail = [](const std::string& w) { throw std::invalid_argument("OcpConfig: " + w); };
    if (n_stages < 2) fail("n_stages must be >= 2");
    if (n_nodes < 1) fail("n_nodes must be >= 1");
    if (!(dt > 0)) fail("dt must be positive");
    for (double q : {q_t, q_u, q_v, q_d, q_c, q_eps})
      if (q < 0) fail("weights must be non-negative");
    if (!(headway > 0)) fail("headway must be positive");
    if (d_min < 0) fail("d_min must be non-negative");
  }

  double horizon() const { return n_stages * dt; }
};

/// What one truck knows when it plans. `leader_plan` holds the predecessor's
/// predicted positions at t_now + (i+1)*dt (i < N) and `leader_position` its
/// position now; `suggested` holds the predecessor's suggested controls mu_i.
struct EgoContext {
  Role role = Role::leader;
  TruckState x;
  TruckParams params;
  LegendrePreview preview;
  std::vector<double> leader_plan;
  double leader_position = 0.0;
  std::vector<double> suggested;
  double leader_length = 0.0;
  double t_now = 0.0;
  int age_cycles = 0;  ///< age of the data this context was built from

  bool follows() const { return role != Role::leader; }
};

/// Truck k+1 as seen by truck k (built from its backward message).
using FollowerContext = EgoContext;

struct StageValues {
  double u = 0.0;
  double v = 0.0;
  double d = 0.0;
  double eps1 = 0.0;
  double eps2 = 0.0;
};

/// Running cost of one stage. Leaders track the speed reference; followers
/// track the headway gap and, when a suggestion mu is known, comply with it.
inline double stage_cost(const StageValues& sv, const OcpConfig& cfg, Role role, std::optional<double> mu,
                         double nu) {
  double j = cfg.q_u * sv.u * sv.u;
  if (role == Role::leader) {
    j += cfg.q_v * (sv.v - nu) * (sv.v - nu);
  } else {
    const double e = sv.d - cfg.headway * sv.v;
    j += cfg.q_d * e * e;
    if (mu) j += cfg.q_c * (sv.u - *mu) * (sv.u - *mu);
  }
  return j;
}

/// Speed the truck must average over the rest of the trip; falls back to the
/// speed reference once the horizon end passes the trip end time.
inline double terminal_pace(double s_N, double t_N, const OcpConfig& cfg) {
  if (cfg.t_f > t_N) return (cfg.s_f - s_N) / (cfg.t_f - t_N);
  return cfg.v_ref;
}

inline double terminal_cost(double s_N, double v_N, double t_N, const OcpConfig& cfg) {
  const double e = terminal_pace(s_N, t_N, cfg) - v_N;
  return cfg.q_t * e * e;
}

/// Soft state constraints, each >= 0 when satisfied:
/// [v + eps1, v_max - v + eps1, d + eps2 - d_min (followers only)].
inline std::vector<double> path_constraints(const StageValues& sv, const OcpConfig& cfg, bool has_gap) {
  std::vector<double> r{sv.v + sv.eps1, cfg.v_max - sv.v + sv.eps1};
  if (has_gap) r.push_back(sv.d + sv.eps2 - cfg.d_min);
  return r;
}

struct OcpSolution {
  std::vector<std::vector<double>> u;  ///< [truck][stage]
  std::vector<std::vector<double>> s, v, a;  ///< [truck][node], N+1 nodes
  std::vector<std::array<double, 2>> slack;
  double objective = 0.0;
  double t_now = 0.0;
  Eigen::VectorXd z;
  nlp::SolveReport report;

  int n_stages() const { return u.empty() ? 0 : static_cast<int>(u.front().size()); }
};

namespace detail {

struct OcpTruck {
  enum class GapSource { none, plan, truck0 };
  Role role = Role::leader;
  double mass = 0, m_eff = 0, tau_d = 0, k_aero = 0, mg = 0, c_r = 0, p_max = 0;
  double u_lo = 0, u_hi = 0, u0_hi = 0;
  LegendrePreview preview;
  GapSource gap = GapSource::none;
  double lead_length = 0;
  std::vector<double> plan;  ///< leader positions at nodes 0..N (GapSource::plan)
  std::vector<double> mu;    ///< compliance targets per stage (empty: none)
  TruckState x0;
};

template <int NT>
struct StageKernel {
  static constexpr int NX = 3 * NT;
  static constexpr int NP = NX + NT;
  using VecX = Eigen::Matrix<double, NX, 1>;
  using VecU = Eigen::Matrix<double, NT, 1>;
  using MatX = Eigen::Matrix<double, NX, NX>;
  using MatS = Eigen::Matrix<double, NX, NP>;

  const std::vector<OcpTruck>& trucks;
  const DragReductionModel& drag;
  double dt;
  int nodes;
  int stage;

  void rhs(const VecX& X, const VecU& U, double tau, VecX& f, MatX* Fx) const {
    if (Fx) Fx->setZero();
    for (int k = 0; k < NT; ++k) {
      const OcpTruck& tk = trucks[k];
      const int o = 3 * k;
      const double s = X[o], v = X[o + 1], a = X[o + 2];
      double beta = 1.0, dbeta = 0.0;
      if (tk.gap != OcpTruck::GapSource::none) {
        double lead;
        if (tk.gap == OcpTruck::GapSource::plan) {
          const double p0 = tk.plan[stage], p1 = tk.plan[stage + 1];
          lead = p0 + (p1 - p0) * tau / dt;
        } else {
          lead = X[0];
        }
        const auto bd = drag_reduction_clamped(lead - tk.lead_length - s, drag);
        beta = bd.first;
        dbeta = bd.second;
      }
      const double av = std::abs(v);
      const double fa = tk.k_aero * beta * v * av;
      const double alpha = eval_preview(tk.preview, s);
      const double dalpha = eval_preview_slope(tk.preview, s);
      const double ca = std::cos(alpha), sa = std::sin(alpha);
      const double fr = tk.mg * (tk.c_r * ca + sa);
      f[o] = v;
      f[o + 1] = (tk.mass * a - fa - fr) / tk.m_eff;
      f[o + 2] = (U[k] - a) / tk.tau_d;
      if (Fx) {
        const double dfa_dd = tk.k_aero * dbeta * v * av;
        const double dfr_ds = tk.mg * (-tk.c_r * sa + ca) * dalpha;
        (*Fx)(o, o + 1) = 1.0;
        (*Fx)(o + 1, o) = (dfa_dd - dfr_ds) / tk.m_eff;  // d = lead - L - s
        if (tk.gap == OcpTruck::GapSource::truck0) (*Fx)(o + 1, 0) += -dfa_dd / tk.m_eff;
        (*Fx)(o + 1, o + 1) = -2.0 * tk.k_aero * beta * av / tk.m_eff;
        (*Fx)(o + 1, o + 2) = tk.mass / tk.m_eff;
        (*Fx)(o + 2, o + 2) = -1.0 / tk.tau_d;
      }
    }
  }

  /// Phi(X, U) over one stage; S receives [dPhi/dX, dPhi/dU] when non-null.
  void integrate(const VecX& X0, const VecU& U, VecX& X1, MatS* S) const {
    const double h = dt / nodes;
    VecX X = X0, k1, k2, k3, k4;
    MatX F1, F2, F3, F4;
    MatS Sm, K1, K2, K3, K4;
    MatS Fu = MatS::Zero();
    if (S) {
      Sm.setZero();
      Sm.template leftCols<NX>().setIdentity();
      for (int k = 0; k < NT; ++k) Fu(3 * k + 2, NX + k) = 1.0 / trucks[k].tau_d;
    }
    double tau = 0.0;
    for (int n = 0; n < nodes; ++n) {
      if (S) {
        rhs(X, U, tau, k1, &F1);
        K1.noalias() = F1 * Sm;
        K1 += Fu;
        rhs(X + 0.5 * h * k1, U, tau + 0.5 * h, k2, &F2);
        K2.noalias() = F2 * (Sm + 0.5 * h * K1);
        K2 += Fu;
        rhs(X + 0.5 * h * k2, U, tau + 0.5 * h, k3, &F3);
        K3.noalias() = F3 * (Sm + 0.5 * h * K2);
        K3 += Fu;
        rhs(X + h * k3, U, tau + h, k4, &F4);
        K4.noalias() = F4 * (Sm + h * K3);
        K4 += Fu;
        Sm += (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4);
      } else {
        rhs(X, U, tau, k1, nullptr);
        rhs(X + 0.5 * h * k1, U, tau + 0.5 * h, k2, nullptr);
        rhs(X + 0.5 * h * k2, U, tau + 0.5 * h, k3, nullptr);
        rhs(X + h * k3, U, tau + h, k4, nullptr);
      }
      X += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      tau += h;
    }
    X1 = X;
    if (S) *S = Sm;
  }
};

}  // namespace detail

class OcpProblem {
 public:
  struct Slice {
    std::string name;
    int begin = 0;
    int count = 0;
  };

  OcpProblem(std::vector<detail::OcpTruck> trucks, const OcpConfig& cfg, double t_now, bool fell_back = false)
      : trucks_(std::move(trucks)), cfg_(cfg), t_now_(t_now), fell_back_(fell_back) {
    cfg_.validate();
    nt_ = static_cast<int>(trucks_.size());
    if (nt_ < 1 || nt_ > 2) throw std::invalid_argument("OcpProblem: 1 or 2 trucks supported");
    // Positions are stored relative to the first truck's start so that the
    // defects do not carry rounding from route coordinates of tens of km.
    origin_ = trucks_[0].x0.s;
    for (auto& tk : trucks_) {
      tk.x0.s -= origin_;
      for (double& p : tk.plan) p -= origin_;
      tk.preview.s_start -= origin_;
    }
    N_ = cfg_.n_stages;
    nx_ = 3 * nt_;
    block_ = nx_ + nt_;
    n_vars_ = N_ * block_ + nx_ + 2 * nt_;
    n_eq_ = N_ * nx_;
    build_layout();
    build_bounds();
    count_rows();
  }

  int n_trucks() const { return nt_; }
  int n_stages() const { return N_; }
  int n_vars() const { return n_vars_; }
  int n_eq() const { return n_eq_; }
  int n_ineq() const { return n_ineq_; }
  int n_res() const { return n_res_; }
  double t_now() const { return t_now_; }
  /// Route position subtracted from all position variables in z.
  double origin() const { return origin_; }
  bool fell_back_to_solo() const { return fell_back_; }
  const OcpConfig& config() const { return cfg_; }
  Role role(int truck) const { return trucks_[truck].role; }
  bool has_gap(int truck) const { return trucks_[truck].gap != detail::OcpTruck::GapSource::none; }
  bool has_compliance(int truck) const { return !trucks_[truck].mu.empty() && cfg_.q_c > 0; }
  const std::vector<Slice>& layout() const { return layout_; }
  const Eigen::VectorXd& lower() const { return lo_; }
  const Eigen::VectorXd& upper() const { return hi_; }

  int state_index(int node, int truck, int comp) const { return node * block_ + 3 * truck + comp; }
  int control_index(int stage, int truck) const { return stage * block_ + nx_ + truck; }
  int slack_index(int truck, int which) const { return N_ * block_ + nx_ + 2 * truck + which; }

  /// Gap of `truck` to its predecessor at `node` under decision vector z.
  double gap(const Eigen::VectorXd& z, int truck, int node) const {
    const auto& tk = trucks_[truck];
    const double s = z[state_index(node, truck, 0)];
    if (tk.gap == detail::OcpTruck::GapSource::plan) return tk.plan[node] - tk.lead_length - s;
    if (tk.gap == detail::OcpTruck::GapSource::truck0) return z[state_index(node, 0, 0)] - tk.lead_length - s;
    return std::numeric_limits<double>::infinity();
  }

  /// Objective recomputed term by term from stage_cost/terminal_cost.
  double objective_terms(const Eigen::VectorXd& z) const {
    double j = 0.0;
    for (int k = 0; k < nt_; ++k) {
      const auto& tk = trucks_[k];
      for (int i = 0; i < N_; ++i) j += cfg_.q_u * sq(z[control_index(i, k)]);
      for (int i = 1; i <= N_; ++i) {
        StageValues sv;
        sv.v = z[state_index(i, k, 1)];
        sv.d = has_gap(k) ? gap(z, k, i) : 0.0;
        j += stage_cost(sv, cfg_, tk.role, std::nullopt, cfg_.v_ref);
      }
      if (has_compliance(k))
        for (int i = 0; i < N_; ++i) j += cfg_.q_c * sq(z[control_index(i, k)] - tk.mu[i]);
      j += terminal_cost(z[state_index(N_, k, 0)] + origin_, z[state_index(N_, k, 1)], t_now_ + cfg_.horizon(), cfg_);
      j += cfg_.q_eps * (z[slack_index(k, 0)] + z[slack_index(k, 1)]);
    }
    return j;
  }

  nlp::NlpSpec spec() const {
    nlp::NlpSpec sp;
    sp.n = n_vars_;
    sp.n_res = n_res_;
    sp.n_eq = n_eq_;
    sp.n_ineq = n_ineq_;
    sp.lo = lo_;
    sp.hi = hi_;
    sp.linear = Eigen::VectorXd::Zero(n_vars_);
    for (int k = 0; k < nt_; ++k) {
      sp.linear[slack_index(k, 0)] = cfg_.q_eps;
      sp.linear[slack_index(k, 1)] = cfg_.q_eps;
    }
    sp.dependent.reserve(n_eq_);
    for (int i = 0; i < N_; ++i)
      for (int r = 0; r < nx_; ++r) sp.dependent.push_back((i + 1) * block_ + r);
    sp.evaluate = [this](const Eigen::VectorXd& x, bool jac, nlp::NlpEvaluation& out) { evaluate(x, jac, out); };
    return sp;
  }

  /// Forward simulation from X_0 under per-truck controls; slacks zero.
  Eigen::VectorXd rollout(const std::vector<std::vector<double>>& controls) const {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n_vars_);
    for (int k = 0; k < nt_; ++k) {
      z[state_index(0, k, 0)] = trucks_[k].x0.s;
      z[state_index(0, k, 1)] = trucks_[k].x0.v;
      z[state_index(0, k, 2)] = trucks_[k].x0.a_t;
      for (int i = 0; i < N_; ++i)
        z[control_index(i, k)] = std::clamp(controls[k][i], lo_[control_index(i, k)], hi_[control_index(i, k)]);
    }
    for (int i = 0; i < N_; ++i) {
      Eigen::VectorXd next(nx_);
      integrate_stage(z, i, next, nullptr);
      z.segment(state_index(i + 1, 0, 0), nx_) = next;
    }
    return z;
  }

  /// Constant-speed guess at the current speeds with equilibrium traction.
  Eigen::VectorXd cold_start() const {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n_vars_);
    for (int k = 0; k < nt_; ++k) {
      const auto& tk = trucks_[k];
      const double v = tk.x0.v;
      const double alpha = eval_preview(tk.preview, tk.x0.s);
      double beta = 1.0;
      if (tk.gap == detail::OcpTruck::GapSource::plan)
        beta = drag_reduction_clamped(tk.plan[0] - tk.lead_length - tk.x0.s, cfg_.drag).first;
      else if (tk.gap == detail::OcpTruck::GapSource::truck0)
        beta = drag_reduction_clamped(trucks_[0].x0.s - tk.lead_length - tk.x0.s, cfg_.drag).first;
      const double a_eq =
          (tk.k_aero * beta * v * v + tk.mg * (tk.c_r * std::cos(alpha) + std::sin(alpha))) / tk.mass;
      for (int i = 0; i <= N_; ++i) {
        z[state_index(i, k, 0)] = tk.x0.s + v * i * cfg_.dt;
        z[state_index(i, k, 1)] = v;
        z[state_index(i, k, 2)] = i == 0 ? tk.x0.a_t : a_eq;
        if (i < N_) z[control_index(i, k)] = std::clamp(a_eq, lo_[control_index(i, k)], hi_[control_index(i, k)]);
      }
    }
    return z;
  }

  OcpSolution unpack(const Eigen::VectorXd& z) const {
    OcpSolution sol;
    sol.z = z;
    sol.t_now = t_now_;
    sol.u.assign(nt_, std::vector<double>(N_));
    sol.s.assign(nt_, std::vector<double>(N_ + 1));
    sol.v = sol.s;
    sol.a = sol.s;
    sol.slack.assign(nt_, {0.0, 0.0});
    for (int k = 0; k < nt_; ++k) {
      for (int i = 0; i < N_; ++i) sol.u[k][i] = z[control_index(i, k)];
      for (int i = 0; i <= N_; ++i) {
        sol.s[k][i] = z[state_index(i, k, 0)] + origin_;
        sol.v[k][i] = z[state_index(i, k, 1)];
        sol.a[k][i] = z[state_index(i, k, 2)];
      }
      sol.slack[k] = {z[slack_index(k, 0)], z[slack_index(k, 1)]};
    }
    sol.objective = objective_terms(z);
    return sol;
  }

  void evaluate(const Eigen::VectorXd& z, bool jac, nlp::NlpEvaluation& out) const {
    out.r.resize(n_res_);
    out.c_eq.resize(n_eq_);
    out.c_in.resize(n_ineq_);
    std::vector<Eigen::Triplet<double>> tr, te, ti;
    if (jac) {
      tr.reserve(4 * n_res_);
      te.reserve(n_eq_ * (block_ + 1));
      ti.reserve(3 * n_ineq_);
    }

    // Dynamics defects.
    Eigen::VectorXd next(nx_);
    Eigen::MatrixXd S(nx_, block_);
    for (int i = 0; i < N_; ++i) {
      integrate_stage(z, i, next, jac ? &S : nullptr);
      const int row0 = i * nx_;
      out.c_eq.segment(row0, nx_) = z.segment(state_index(i + 1, 0, 0), nx_) - next;
      if (jac) {
        for (int r = 0; r < nx_; ++r) {
          for (int c = 0; c < block_; ++c)
            if (S(r, c) != 0.0) te.emplace_back(row0 + r, i * block_ + c, -S(r, c));
          te.emplace_back(row0 + r, state_index(i + 1, 0, 0) + r, 1.0);
        }
      }
    }

    // Least-squares residuals.
    int row = 0;
    const double t_N = t_now_ + cfg_.horizon();
    for (int k = 0; k < nt_; ++k) {
      const auto& tk = trucks_[k];
      const double wu = std::sqrt(cfg_.q_u);
      for (int i = 0; i < N_; ++i) {
        out.r[row] = wu * z[control_index(i, k)];
        if (jac) tr.emplace_back(row, control_index(i, k), wu);
        ++row;
      }
      if (tk.role == Role::leader) {
        const double wv = std::sqrt(cfg_.q_v);
        for (int i = 1; i <= N_; ++i) {
          out.r[row] = wv * (z[state_index(i, k, 1)] - cfg_.v_ref);
          if (jac) tr.emplace_back(row, state_index(i, k, 1), wv);
          ++row;
        }
      } else {
        const double wd = std::sqrt(cfg_.q_d);
        for (int i = 1; i <= N_; ++i) {
          out.r[row] = wd * (gap(z, k, i) - cfg_.headway * z[state_index(i, k, 1)]);
          if (jac) {
            tr.emplace_back(row, state_index(i, k, 0), -wd);
            tr.emplace_back(row, state_index(i, k, 1), -wd * cfg_.headway);
            if (tk.gap == detail::OcpTruck::GapSource::truck0) tr.emplace_back(row, state_index(i, 0, 0), wd);
          }
          ++row;
        }
      }
      if (has_compliance(k)) {
        const double wc = std::sqrt(cfg_.q_c);
        for (int i = 0; i < N_; ++i) {
          out.r[row] = wc * (z[control_index(i, k)] - tk.mu[i]);
          if (jac) tr.emplace_back(row, control_index(i, k), wc);
          ++row;
        }
      }
      const double wt = std::sqrt(cfg_.q_t);
      const double sN = z[state_index(N_, k, 0)], vN = z[state_index(N_, k, 1)];
      out.r[row] = wt * (terminal_pace(sN + origin_, t_N, cfg_) - vN);
      if (jac) {
        if (cfg_.t_f > t_N) tr.emplace_back(row, state_index(N_, k, 0), -wt / (cfg_.t_f - t_N));
        tr.emplace_back(row, state_index(N_, k, 1), -wt);
      }
      ++row;
    }

    // Inequalities.
    row = 0;
    for (int k = 0; k < nt_; ++k) {
      const auto& tk = trucks_[k];
      const int e1 = slack_index(k, 0), e2 = slack_index(k, 1);
      for (int i = 1; i <= N_; ++i) {
        const int iv = state_index(i, k, 1);
        StageValues sv;
        sv.v = z[iv];
        sv.eps1 = z[e1];
        sv.eps2 = z[e2];
        sv.d = has_gap(k) ? gap(z, k, i) : 0.0;
        const auto pc = path_constraints(sv, cfg_, has_gap(k));
        out.c_in[row] = pc[0];
        if (jac) {
          ti.emplace_back(row, iv, 1.0);
          ti.emplace_back(row, e1, 1.0);
        }
        ++row;
        out.c_in[row] = pc[1];
        if (jac) {
          ti.emplace_back(row, iv, -1.0);
          ti.emplace_back(row, e1, 1.0);
        }
        ++row;
        if (has_gap(k)) {
          out.c_in[row] = pc[2];
          if (jac) {
            ti.emplace_back(row, state_index(i, k, 0), -1.0);
            ti.emplace_back(row, e2, 1.0);
            if (tk.gap == detail::OcpTruck::GapSource::truck0) ti.emplace_back(row, state_index(i, 0, 0), 1.0);
          }
          ++row;
        }
      }
      // Isometric power limit, normalized: 1 - m u v / P_max >= 0.
      for (int i = 1; i < N_; ++i) {
        const int iu = control_index(i, k), iv = state_index(i, k, 1);
        const double c = tk.mass / tk.p_max;
        out.c_in[row] = 1.0 - c * z[iu] * z[iv];
        if (jac) {
          ti.emplace_back(row, iu, -c * z[iv]);
          ti.emplace_back(row, iv, -c * z[iu]);
        }
        ++row;
      }
    }

    if (jac) {
      out.J_r.resize(n_res_, n_vars_);
      out.J_r.setFromTriplets(tr.begin(), tr.end());
      out.J_eq.resize(n_eq_, n_vars_);
      out.J_eq.setFromTriplets(te.begin(), te.end());
      out.J_in.resize(n_ineq_, n_vars_);
      out.J_in.setFromTriplets(ti.begin(), ti.end());
    }
  }

  const detail::OcpTruck& truck(int k) const { return trucks_[k]; }

 private:
  static double sq(double x) { return x * x; }

  void integrate_stage(const Eigen::VectorXd& z, int i, Eigen::VectorXd& next, Eigen::MatrixXd* S) const {
    if (nt_ == 1)
      integrate_stage_t<1>(z, i, next, S);
    else
      integrate_stage_t<2>(z, i, next, S);
  }

  template <int NT>
  void integrate_stage_t(const Eigen::VectorXd& z, int i, Eigen::VectorXd& next, Eigen::MatrixXd* S) const {
    using K = detail::StageKernel<NT>;
    const K kernel{trucks_, cfg_.drag, cfg_.dt, cfg_.n_nodes, i};
    typename K::VecX X = z.segment<K::NX>(i * block_);
    typename K::VecU U = z.segment<NT>(i * block_ + K::NX);
    typename K::VecX X1;
    if (S) {
      typename K::MatS Sm;
      kernel.integrate(X, U, X1, &Sm);
      *S = Sm;
    } else {
      kernel.integrate(X, U, X1, nullptr);
    }
    next = X1;
  }

  void build_layout() {
    for (int i = 0; i < N_; ++i) {
      layout_.push_back({"X" + std::to_string(i), i * block_, nx_});
      layout_.push_back({"U" + std::to_string(i), i * block_ + nx_, nt_});
    }
    layout_.push_back({"X" + std::to_string(N_), N_ * block_, nx_});
    layout_.push_back({"eps", N_ * block_ + nx_, 2 * nt_});
  }

  void build_bounds() {
    const double inf = std::numeric_limits<double>::infinity();
    lo_ = Eigen::VectorXd::Constant(n_vars_, -inf);
    hi_ = Eigen::VectorXd::Constant(n_vars_, inf);
    for (int k = 0; k < nt_; ++k) {
      const auto& tk = trucks_[k];
      const double x0[3] = {tk.x0.s, tk.x0.v, tk.x0.a_t};
      for (int c = 0; c < 3; ++c) lo_[state_index(0, k, c)] = hi_[state_index(0, k, c)] = x0[c];
      for (int i = 0; i < N_; ++i) {
        lo_[control_index(i, k)] = tk.u_lo;
        hi_[control_index(i, k)] = i == 0 ? tk.u0_hi : tk.u_hi;
      }
      lo_[slack_index(k, 0)] = 0.0;
      lo_[slack_index(k, 1)] = 0.0;
    }
  }

  void count_rows() {
    n_res_ = 0;
    n_ineq_ = 0;
    for (int k = 0; k < nt_; ++k) {
      n_res_ += N_ + N_ + 1;  // effort, tracking, terminal
      if (has_compliance(k)) n_res_ += N_;
      n_ineq_ += N_ * (has_gap(k) ? 3 : 2) + (N_ - 1);
    }
  }

  std::vector<detail::OcpTruck> trucks_;
  OcpConfig cfg_;
  double t_now_ = 0.0;
  double origin_ = 0.0;
  bool fell_back_ = false;
  int nt_ = 0, N_ = 0, nx_ = 0, block_ = 0;
  int n_vars_ = 0, n_eq_ = 0, n_ineq_ = 0, n_res_ = 0;
  std::vector<Slice> layout_;
  Eigen::VectorXd lo_, hi_;
};

namespace detail {

inline OcpTruck make_ocp_truck(const EgoContext& ctx, const OcpConfig& cfg) {
  const TruckParams& p = ctx.params;
  OcpTruck t;
  t.role = ctx.role;
  t.mass = p.mass;
  t.m_eff = p.effective_mass(ctx.x.gear);
  t.tau_d = p.tau_d;
  t.k_aero = 0.5 * p.rho * p.frontal_area * p.drag_coef;
  t.mg = p.mass * p.grav;
  t.c_r = p.rolling_coef;
  t.p_max = p.p_max;
  const ControlBounds now = admissible_control_set(std::max(ctx.x.v, 0.0), ctx.x.gear, p);
  t.u_lo = now.u_min;
  t.u0_hi = now.u_max;
  t.u_hi = max_wheel_force(ctx.x.gear, p) / p.mass;
  t.preview = ctx.preview;
  t.x0 = ctx.x;
  const int N = cfg.n_stages;
  if (ctx.follows()) {
    if (static_cast<int>(ctx.leader_plan.size()) != N)
      throw std::invalid_argument("OCP: follower needs a leader plan of N positions");
    t.gap = OcpTruck::GapSource::plan;
    t.lead_length = ctx.leader_length;
    t.plan.reserve(N + 1);
    t.plan.push_back(ctx.leader_position);
    t.plan.insert(t.plan.end(), ctx.leader_plan.begin(), ctx.leader_plan.end());
    if (!ctx.suggested.empty()) {
      if (static_cast<int>(ctx.suggested.size()) != N)
        throw std::invalid_argument("OCP: suggested controls must have N entries");
      t.mu = ctx.suggested;
    }
  }
  return t;
}

}  // namespace detail

/// Single-truck problem. With compliance_on = false (anticipative) the
/// compliance weight is zeroed.
inline OcpProblem build_solo(const EgoContext& ego, const OcpConfig& cfg, bool compliance_on = true) {
  OcpConfig c = cfg;
  if (!compliance_on) c.q_c = 0.0;
  auto t = detail::make_ocp_truck(ego, c);
  if (c.q_c == 0.0) t.mu.clear();
  return OcpProblem({t}, c, ego.t_now);
}

/// Joint problem of truck k (ego) and truck k+1 (follower). The follower's
/// gap and drafting are taken against the ego's decision-variable
/// trajectory. Stale follower data falls back to the anticipative solo
/// problem, reported by fell_back_to_solo().
inline OcpProblem build_considerate(const EgoContext& ego, const FollowerContext& follower, const OcpConfig& cfg) {
  if (ego.role == Role::last) throw std::invalid_argument("build_considerate: the last truck has no follower");
  if (follower.age_cycles > cfg.max_follower_age) {
    OcpConfig c = cfg;
    c.q_c = 0.0;
    auto t = detail::make_ocp_truck(ego, c);
    t.mu.clear();
    return OcpProblem({t}, c, ego.t_now, true);
  }
  auto te = detail::make_ocp_truck(ego, cfg);
  FollowerContext f = follower;
  if (f.role == Role::leader) f.role = Role::last;
  f.leader_plan.assign(cfg.n_stages, 0.0);  // placeholder; the gap uses truck 0's states
  f.suggested.clear();  // the suggestion for truck k+1 is what this problem computes
  auto tf = detail::make_ocp_truck(f, cfg);
  tf.gap = detail::OcpTruck::GapSource::truck0;
  tf.lead_length = ego.params.length;
  tf.plan.clear();
  tf.mu.clear();
  return OcpProblem({te, tf}, cfg, ego.t_now);
}

/// Receding-horizon shift of a previous solution by `shift` seconds (one
/// stage by default): controls are resampled (last stage duplicated) and the
/// states re-integrated from the problem's current initial state.
inline Eigen::VectorXd warm_start(const OcpSolution& prev, const OcpProblem& problem, double shift = -1.0) {
  const OcpConfig& cfg = problem.config();
  if (shift < 0) shift = cfg.dt;
  const int N = problem.n_stages();
  if (static_cast<int>(prev.u.size()) != problem.n_trucks() || prev.n_stages() != N) return problem.cold_start();
  std::vector<std::vector<double>> controls(problem.n_trucks(), std::vector<double>(N));
  for (int k = 0; k < problem.n_trucks(); ++k)
    for (int i = 0; i < N; ++i) {
      const int j = std::min(N - 1, static_cast<int>(std::floor((i * cfg.dt + shift) / cfg.dt + 1e-9)));
      controls[k][i] = prev.u[k][j];
    }
  Eigen::VectorXd z = problem.rollout(controls);
  for (int k = 0; k < problem.n_trucks(); ++k) {
    z[problem.slack_index(k, 0)] = prev.slack[k][0];
    z[problem.slack_index(k, 1)] = prev.slack[k][1];
  }
  return z;
}

inline OcpSolution solve_ocp(const OcpProblem& problem, const Eigen::VectorXd& guess,
                             const nlp::SqpOptions& opts = {}) {
  const nlp::NlpSpec sp = problem.spec();
  nlp::SolveReport rep = nlp::solve(sp, guess, opts);
  OcpSolution sol = problem.unpack(rep.x);
  sol.report = std::move(rep);
  return sol;
}

}  // namespace platoon
