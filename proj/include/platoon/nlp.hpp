#pragma once

// Sequential quadratic programming for least-squares objectives
//
//   min  ||r(x)||^2 + l'x
//   s.t. c_eq(x) = 0,  c_in(x) >= 0,  lo <= x <= hi
//
// with a Gauss-Newton Hessian, Levenberg damping, an l1 merit line search and
// QP subproblems solved by the dual active-set method in qp.hpp.
//
// When the problem names one dependent variable per equality constraint
// (the node states of a multiple-shooting transcription) and the equality
// Jacobian restricted to them is lower triangular, each QP is condensed onto
// the remaining free variables by sparse forward substitution. Otherwise the
// equality block is factorized densely, and without a dependent partition
// the equalities are passed to the QP as-is.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "platoon/qp.hpp"

namespace platoon::nlp {

using SparseRM = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct NlpEvaluation {
  Eigen::VectorXd r;
  Eigen::VectorXd c_eq;
  Eigen::VectorXd c_in;
  SparseRM J_r;
  SparseRM J_eq;
  SparseRM J_in;
};

struct NlpSpec {
  int n = 0;
  int n_res = 0;
  int n_eq = 0;
  int n_ineq = 0;
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
  Eigen::VectorXd linear;  ///< l; empty means zero
  /// Fills residuals and constraints; Jacobians only when `jacobians` is set.
  std::function<void(const Eigen::VectorXd& x, bool jacobians, NlpEvaluation& out)> evaluate;
  /// Optional: variable index eliminated by equality row i, for every row.
  std::vector<int> dependent;

  double objective(const NlpEvaluation& ev, const Eigen::VectorXd& x) const {
    double f = ev.r.squaredNorm();
    if (linear.size() == n) f += linear.dot(x);
    return f;
  }

  Eigen::VectorXd gradient(const NlpEvaluation& ev) const {
    Eigen::VectorXd g = 2.0 * (ev.J_r.transpose() * ev.r);
    if (linear.size() == n) g += linear;
    return g;
  }
};

enum class SolveStatus { converged, max_iter, infeasible_qp, numerical_error };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::infeasible_qp: return "infeasible_qp";
    case SolveStatus::numerical_error: return "numerical_error";
  }
  return "?";
}

struct SqpOptions {
  double kkt_tol = 1e-6;
  int max_iter = 50;
  double ls_contraction = 0.5;
  double min_step = 1e-10;
  double armijo = 1e-4;
  double lambda_init = 1e-8;
  double lambda_min = 1e-10;
  double lambda_max = 1e8;
  /// Curvature floor for variables the Gauss-Newton model leaves flat
  /// (variables that only enter linearly, e.g. slacks).
  double min_curvature = 1.0;
  std::string trace_path;  ///< iterate trace written here when non-empty
};

struct KktMeasure {
  double stationarity = 0.0;
  double primal = 0.0;
  double complementarity = 0.0;
  double combined = 0.0;
};

struct SolveReport {
  SolveStatus status = SolveStatus::max_iter;
  Eigen::VectorXd x;
  Eigen::VectorXd y_eq;
  Eigen::VectorXd z_in;
  double objective = 0.0;
  double kkt_residual = std::numeric_limits<double>::infinity();
  KktMeasure kkt;
  int iterations = 0;
  double wall_time = 0.0;
  bool dense_fallback = false;
  /// (merit before, merit after) of every accepted step, same penalty weight.
  std::vector<std::pair<double, double>> merit_steps;
  std::string message;
};

/// KKT residual of (x, y, z). Bound multipliers are implied by the sign of the
/// Lagrangian gradient at active bounds. Stationarity and complementarity are
/// scaled by the mean multiplier magnitude (floored at 100), primal
/// infeasibility is absolute.
inline KktMeasure kkt_measure(const NlpSpec& spec, const NlpEvaluation& ev, const Eigen::VectorXd& x,
                              const Eigen::VectorXd& y, const Eigen::VectorXd& z) {
  KktMeasure k;
  Eigen::VectorXd grad = spec.gradient(ev);
  if (spec.n_eq > 0) grad -= ev.J_eq.transpose() * y;
  if (spec.n_ineq > 0) grad -= ev.J_in.transpose() * z;
  for (int j = 0; j < spec.n; ++j) {
    const double lo = spec.lo[j], hi = spec.hi[j];
    if (lo == hi) continue;
    const double tol_lo = 1e-9 * std::max(1.0, std::abs(lo));
    const double tol_hi = 1e-9 * std::max(1.0, std::abs(hi));
    double viol = std::abs(grad[j]);
    if (std::isfinite(lo) && x[j] - lo <= tol_lo) viol = std::max(-grad[j], 0.0);
    if (std::isfinite(hi) && hi - x[j] <= tol_hi) viol = std::max(grad[j], 0.0);
    k.stationarity = std::max(k.stationarity, viol);
  }
  for (int i = 0; i < spec.n_eq; ++i) k.primal = std::max(k.primal, std::abs(ev.c_eq[i]));
  for (int i = 0; i < spec.n_ineq; ++i) {
    k.primal = std::max(k.primal, -ev.c_in[i]);
    k.complementarity = std::max(k.complementarity, std::abs(z[i] * ev.c_in[i]));
  }
  for (int j = 0; j < spec.n; ++j) {
    k.primal = std::max(k.primal, spec.lo[j] - x[j]);
    k.primal = std::max(k.primal, x[j] - spec.hi[j]);
  }
  const double s_max = 100.0;
  const int m = spec.n_eq + spec.n_ineq;
  const double mult = m > 0 ? (y.lpNorm<1>() + z.lpNorm<1>()) / m : 0.0;
  const double s_d = std::max(s_max, mult) / s_max;
  const double s_c = std::max(s_max, spec.n_ineq > 0 ? z.lpNorm<1>() / spec.n_ineq : 0.0) / s_max;
  k.combined = std::max({k.stationarity / s_d, k.primal, k.complementarity / s_c});
  return k;
}

namespace detail {

inline double constraint_violation(const NlpEvaluation& ev) {
  double v = ev.c_eq.lpNorm<1>();
  for (int i = 0; i < ev.c_in.size(); ++i) v += std::max(0.0, -ev.c_in[i]);
  return v;
}

inline bool finite(const NlpEvaluation& ev) {
  return ev.r.allFinite() && ev.c_eq.allFinite() && ev.c_in.allFinite();
}

// Column partition of the variables for the condensed QP.
struct Partition {
  std::vector<int> free;       // QP variables
  std::vector<int> dependent;  // eliminated through equalities (row order)
  std::vector<int> role;       // per variable: >=0 free idx, <=-2 dependent idx (-2-k), -1 fixed
};

inline Partition make_partition(const NlpSpec& spec, bool condensed) {
  Partition part;
  part.role.assign(spec.n, -1);
  if (condensed) {
    part.dependent = spec.dependent;
    for (std::size_t k = 0; k < part.dependent.size(); ++k) part.role[part.dependent[k]] = -2 - static_cast<int>(k);
  }
  for (int j = 0; j < spec.n; ++j) {
    if (part.role[j] <= -2) continue;
    if (spec.lo[j] == spec.hi[j]) continue;
    part.role[j] = static_cast<int>(part.free.size());
    part.free.push_back(j);
  }
  return part;
}

// Splits a row-major sparse matrix into dense free columns and sparse
// dependent columns.
inline void split_columns(const SparseRM& A, const Partition& part, Eigen::MatrixXd& A_free, SparseRM& A_dep) {
  const int rows = static_cast<int>(A.rows());
  A_free.setZero(rows, static_cast<Eigen::Index>(part.free.size()));
  Eigen::VectorXi per_row = Eigen::VectorXi::Zero(rows);
  for (int i = 0; i < rows; ++i)
    for (SparseRM::InnerIterator it(A, i); it; ++it)
      if (part.role[it.col()] <= -2) ++per_row[i];
  A_dep.resize(rows, static_cast<Eigen::Index>(part.dependent.size()));
  A_dep.reserve(per_row);
  for (int i = 0; i < rows; ++i)
    for (SparseRM::InnerIterator it(A, i); it; ++it) {
      const int role = part.role[it.col()];
      if (role >= 0)
        A_free(i, role) += it.value();
      else if (role <= -2)
        A_dep.coeffRef(i, -2 - role) += it.value();
    }
  A_dep.makeCompressed();
}

inline bool is_unit_lower_banded(const SparseRM& A) {
  if (A.rows() != A.cols()) return false;
  for (int i = 0; i < A.rows(); ++i) {
    bool diag = false;
    for (SparseRM::InnerIterator it(A, i); it; ++it) {
      if (it.col() > i && it.value() != 0.0) return false;
      if (it.col() == i && std::abs(it.value()) > 1e-300) diag = true;
    }
    if (!diag) return false;
  }
  return true;
}

}  // namespace detail

class SqpSolver {
 public:
  /// Relative merit change treated as rounding noise by the line search.
  static constexpr double kMeritNoise = 1e-12;

  SqpSolver(const NlpSpec& spec, SqpOptions opts) : spec_(spec), opts_(std::move(opts)) {}

  SolveReport solve(Eigen::VectorXd x) {
    const auto t0 = std::chrono::steady_clock::now();
    SolveReport rep;
    std::ofstream trace;
    if (!opts_.trace_path.empty()) trace.open(opts_.trace_path);

    x = x.cwiseMax(spec_.lo).cwiseMin(spec_.hi);
    const bool condensed = !spec_.dependent.empty() && static_cast<int>(spec_.dependent.size()) == spec_.n_eq;
    const auto part = detail::make_partition(spec_, condensed);

    NlpEvaluation ev, trial_ev;
    spec_.evaluate(x, true, ev);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(spec_.n_eq);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(spec_.n_ineq);
    double lambda = opts_.lambda_init;
    double mu = 1.0;
    rep.status = SolveStatus::max_iter;

    auto finish = [&](SolveStatus st) {
      rep.status = st;
      rep.x = x;
      rep.y_eq = y;
      rep.z_in = z;
      rep.objective = spec_.objective(ev, x);
      rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (trace) trace << "status " << to_string(st) << " iterations " << rep.iterations << "\n";
    };

    if (!detail::finite(ev)) {
      rep.message = "non-finite evaluation at initial point";
      dump(trace, x, "initial");
      finish(SolveStatus::numerical_error);
      return rep;
    }

    for (int it = 0; it < opts_.max_iter; ++it) {
      rep.iterations = it + 1;
      Eigen::VectorXd p, y_new, z_new;
      QpStatus qs = build_and_solve(part, condensed, x, ev, lambda, p, y_new, z_new, rep);
      if (qs != QpStatus::optimal) {
        rep.message = "QP subproblem infeasible";
        finish(SolveStatus::infeasible_qp);
        return rep;
      }
      y = y_new;
      z = z_new;

      rep.kkt = kkt_measure(spec_, ev, x, y, z);
      rep.kkt_residual = rep.kkt.combined;
      if (trace)
        trace << "iter " << it << " f " << spec_.objective(ev, x) << " viol " << detail::constraint_violation(ev)
              << " kkt " << rep.kkt_residual << " |p| " << p.lpNorm<Eigen::Infinity>() << " lambda " << lambda
              << "\n";
      if (rep.kkt_residual <= opts_.kkt_tol) {
        finish(SolveStatus::converged);
        return rep;
      }

      // l1 merit line search.
      const double mult_max = std::max(y.size() ? y.lpNorm<Eigen::Infinity>() : 0.0,
                                       z.size() ? z.lpNorm<Eigen::Infinity>() : 0.0);
      mu = std::max(mu, 1.1 * mult_max + 1e-6);
      const double f0 = spec_.objective(ev, x);
      const double viol0 = detail::constraint_violation(ev);
      const double merit0 = f0 + mu * viol0;
      const double slope = spec_.gradient(ev).dot(p) - mu * viol0;

      double alpha = 1.0;
      bool accepted = false;
      Eigen::VectorXd x_trial;
      double merit_trial = 0.0;
      bool trial_has_jac = false;
      while (alpha >= opts_.min_step) {
        x_trial = (x + alpha * p).cwiseMax(spec_.lo).cwiseMin(spec_.hi);
        // The full step is usually accepted, so its Jacobian is computed up
        // front and reused as the next linearization.
        trial_has_jac = alpha == 1.0;
        spec_.evaluate(x_trial, trial_has_jac, trial_ev);
        if (detail::finite(trial_ev)) {
          merit_trial = spec_.objective(trial_ev, x_trial) + mu * detail::constraint_violation(trial_ev);
          if (merit_trial <= merit0 + opts_.armijo * alpha * std::min(slope, 0.0)) {
            accepted = true;
            break;
          }
          // Near a solution the predicted decrease drops below what the merit
          // can resolve; changes at that level are rounding noise.
          if (std::abs(merit_trial - merit0) <= kMeritNoise * std::max(1.0, std::abs(merit0))) {
            accepted = true;
            break;
          }
        }
        if (alpha == 1.0 && condensed && detail::finite(trial_ev)) {
          // Second-order correction: pull the dependent variables back onto
          // the equality manifold before shortening the step.
          Eigen::VectorXd x_soc = x_trial;
          const Eigen::VectorXd dd = dep_solve(-trial_ev.c_eq);
          for (std::size_t k = 0; k < part.dependent.size(); ++k) x_soc[part.dependent[k]] += dd[k];
          x_soc = x_soc.cwiseMax(spec_.lo).cwiseMin(spec_.hi);
          trial_has_jac = false;
          spec_.evaluate(x_soc, false, trial_ev);
          if (detail::finite(trial_ev)) {
            const double m_soc = spec_.objective(trial_ev, x_soc) + mu * detail::constraint_violation(trial_ev);
            if (m_soc <= merit0 + opts_.armijo * std::min(slope, 0.0)) {
              x_trial = x_soc;
              merit_trial = m_soc;
              accepted = true;
              break;
            }
          }
        }
        alpha *= opts_.ls_contraction;
      }
      if (!accepted) {
        if (lambda < opts_.lambda_max) {
          lambda = std::min(opts_.lambda_max, std::max(lambda, 1e-4) * 100.0);
          continue;
        }
        rep.message = "line search failed";
        dump(trace, x, "line search failure");
        finish(SolveStatus::numerical_error);
        return rep;
      }
      rep.merit_steps.emplace_back(merit0, merit_trial);
      lambda = alpha == 1.0 ? std::max(opts_.lambda_min, lambda * 0.1) : std::min(opts_.lambda_max, lambda * 10.0);
      x = x_trial;
      if (trial_has_jac)
        std::swap(ev, trial_ev);
      else
        spec_.evaluate(x, true, ev);
      if (!detail::finite(ev)) {
        rep.message = "non-finite evaluation";
        dump(trace, x, "non-finite");
        finish(SolveStatus::numerical_error);
        return rep;
      }
    }
    // Certificate at the final iterate with the latest multipliers.
    rep.kkt = kkt_measure(spec_, ev, x, y, z);
    rep.kkt_residual = rep.kkt.combined;
    finish(rep.kkt_residual <= opts_.kkt_tol ? SolveStatus::converged : SolveStatus::max_iter);
    return rep;
  }

 private:
  static void dump(std::ofstream& trace, const Eigen::VectorXd& x, const char* what) {
    if (!trace) return;
    trace << "dump (" << what << ")";
    for (int i = 0; i < x.size(); ++i) trace << ' ' << x[i];
    trace << "\n";
  }

  QpStatus build_and_solve(const detail::Partition& part, bool condensed, const Eigen::VectorXd& x,
                           const NlpEvaluation& ev, double lambda, Eigen::VectorXd& p, Eigen::VectorXd& y,
                           Eigen::VectorXd& z, SolveReport& rep) {
    const int nf = static_cast<int>(part.free.size());
    const int nd = static_cast<int>(part.dependent.size());
    p = Eigen::VectorXd::Zero(spec_.n);
    y = Eigen::VectorXd::Zero(spec_.n_eq);
    z = Eigen::VectorXd::Zero(spec_.n_ineq);

    Eigen::MatrixXd Jr_f, Jin_f, Jeq_f;
    SparseRM Jr_d, Jin_d, Jeq_d;
    detail::split_columns(ev.J_r, part, Jr_f, Jr_d);
    if (spec_.n_ineq > 0) detail::split_columns(ev.J_in, part, Jin_f, Jin_d);
    if (spec_.n_eq > 0) detail::split_columns(ev.J_eq, part, Jeq_f, Jeq_d);

    Eigen::VectorXd lin_f = Eigen::VectorXd::Zero(nf), lin_d = Eigen::VectorXd::Zero(nd);
    if (spec_.linear.size() == spec_.n) {
      for (int k = 0; k < nf; ++k) lin_f[k] = spec_.linear[part.free[k]];
      for (int k = 0; k < nd; ++k) lin_d[k] = spec_.linear[part.dependent[k]];
    }

    DenseQp qp;
    Eigen::MatrixXd Z;   // p_d = Z p_f + z0
    Eigen::VectorXd z0;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
    bool banded = false;
    Eigen::VectorXd r_shift = ev.r;
    Eigen::MatrixXd Jr_red = Jr_f;
    Eigen::MatrixXd Jin_red = Jin_f;
    Eigen::VectorXd c_in_shift = ev.c_in;

    if (condensed) {
      banded = detail::is_unit_lower_banded(Jeq_d);
      rep.dense_fallback = !banded;
      dep_banded_ = banded;
      dep_J_ = Jeq_d;
      if (banded) {
        Z = Jeq_d.triangularView<Eigen::Lower>().solve(-Jeq_f);
        z0 = Jeq_d.triangularView<Eigen::Lower>().solve(-ev.c_eq);
      } else {
        lu.compute(Eigen::MatrixXd(Jeq_d));
        dep_lu_ = lu;
        Z = lu.solve(-Jeq_f);
        z0 = lu.solve(-ev.c_eq);
      }
      Jr_red.noalias() += Jr_d * Z;
      r_shift += Jr_d * z0;
      if (spec_.n_ineq > 0) {
        Jin_red.noalias() += Jin_d * Z;
        c_in_shift += Jin_d * z0;
      }
    }

    // Gauss-Newton Hessian on the QP variables.
    qp.H.noalias() = 2.0 * Jr_red.transpose() * Jr_red;
    for (int k = 0; k < nf; ++k) {
      if (qp.H(k, k) < opts_.min_curvature) qp.H(k, k) += opts_.min_curvature;
      qp.H(k, k) += lambda * std::max(1.0, qp.H(k, k));
    }
    qp.g = 2.0 * Jr_red.transpose() * r_shift + lin_f;
    if (condensed) qp.g.noalias() += Z.transpose() * lin_d;

    // Bounds on free variables.
    qp.lo.resize(nf);
    qp.hi.resize(nf);
    for (int k = 0; k < nf; ++k) {
      const int j = part.free[k];
      qp.lo[k] = spec_.lo[j] - x[j];
      qp.hi[k] = spec_.hi[j] - x[j];
    }

    // General inequalities, plus finite bounds of dependent variables.
    std::vector<int> dep_lo, dep_hi;
    for (int k = 0; k < nd; ++k) {
      const int j = part.dependent[k];
      if (std::isfinite(spec_.lo[j])) dep_lo.push_back(k);
      if (std::isfinite(spec_.hi[j])) dep_hi.push_back(k);
    }
    const int m_in = spec_.n_ineq + static_cast<int>(dep_lo.size() + dep_hi.size());
    qp.A_in.resize(m_in, nf);
    qp.b_in.resize(m_in);
    if (spec_.n_ineq > 0) {
      qp.A_in.topRows(spec_.n_ineq) = Jin_red;
      qp.b_in.head(spec_.n_ineq) = c_in_shift;
    }
    int row = spec_.n_ineq;
    for (int k : dep_lo) {
      const int j = part.dependent[k];
      qp.A_in.row(row) = Z.row(k);
      qp.b_in[row++] = x[j] + z0[k] - spec_.lo[j];
    }
    for (int k : dep_hi) {
      const int j = part.dependent[k];
      qp.A_in.row(row) = -Z.row(k);
      qp.b_in[row++] = spec_.hi[j] - x[j] - z0[k];
    }

    if (!condensed && spec_.n_eq > 0) {
      qp.A_eq = Jeq_f;
      qp.b_eq = ev.c_eq;
    } else {
      qp.A_eq.resize(0, nf);
      qp.b_eq.resize(0);
    }

    const QpResult sol = solve_qp(qp);
    if (sol.status != QpStatus::optimal) return sol.status;

    for (int k = 0; k < nf; ++k) p[part.free[k]] = sol.p[k];
    if (spec_.n_ineq > 0) z = sol.z_in.head(spec_.n_ineq);
    if (!condensed) {
      if (spec_.n_eq > 0) y = sol.y_eq;
      return QpStatus::optimal;
    }

    const Eigen::VectorXd p_d = Z * sol.p + z0;
    for (int k = 0; k < nd; ++k) p[part.dependent[k]] = p_d[k];

    // Equality multipliers from stationarity in the dependent variables:
    // Jeq_d' y = 2 Jr_d'(r + Jr p) + l_d - Jin_d' z - (bound multipliers).
    const Eigen::VectorXd lin_model = ev.r + ev.J_r * p;
    Eigen::VectorXd w = 2.0 * (Jr_d.transpose() * lin_model) + lin_d;
    if (spec_.n_ineq > 0) w -= Jin_d.transpose() * z;
    row = spec_.n_ineq;
    for (int k : dep_lo) w[k] -= sol.z_in[row++];
    for (int k : dep_hi) w[k] += sol.z_in[row++];
    if (banded)
      y = Jeq_d.transpose().triangularView<Eigen::Upper>().solve(w);
    else
      y = lu.transpose().solve(w);
    return QpStatus::optimal;
  }

  Eigen::VectorXd dep_solve(const Eigen::VectorXd& rhs) const {
    if (dep_banded_) return dep_J_.triangularView<Eigen::Lower>().solve(rhs);
    return dep_lu_.solve(rhs);
  }

  const NlpSpec& spec_;
  SqpOptions opts_;
  SparseRM dep_J_;
  Eigen::PartialPivLU<Eigen::MatrixXd> dep_lu_;
  bool dep_banded_ = false;
};

inline SolveReport solve(const NlpSpec& spec, const Eigen::VectorXd& x0, const SqpOptions& opts = {}) {
  return SqpSolver(spec, opts).solve(x0);
}

struct DerivativeCheck {
  double max_rel_error = 0.0;
  std::string worst;  ///< "r|eq|in(row, col)" of the worst entry
};

/// Central differences against the supplied Jacobians of residuals and
/// constraints; relative error |a - fd| / max(1, |a|, |fd|) per entry.
inline DerivativeCheck check_derivatives(const NlpSpec& spec, const Eigen::VectorXd& x, double h = 1e-5) {
  NlpEvaluation base, plus, minus;
  spec.evaluate(x, true, base);
  const Eigen::MatrixXd Jr = Eigen::MatrixXd(base.J_r);
  const Eigen::MatrixXd Je = spec.n_eq > 0 ? Eigen::MatrixXd(base.J_eq) : Eigen::MatrixXd(0, spec.n);
  const Eigen::MatrixXd Ji = spec.n_ineq > 0 ? Eigen::MatrixXd(base.J_in) : Eigen::MatrixXd(0, spec.n);
  DerivativeCheck out;
  auto compare = [&](const char* tag, const Eigen::MatrixXd& A, const Eigen::VectorXd& fp,
                     const Eigen::VectorXd& fm, int col) {
    for (int i = 0; i < A.rows(); ++i) {
      const double fd = (fp[i] - fm[i]) / (2.0 * h);
      const double a = A(i, col);
      const double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = std::string(tag) + "(" + std::to_string(i) + ", " + std::to_string(col) + ")";
      }
    }
  };
  for (int j = 0; j < spec.n; ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    spec.evaluate(xp, false, plus);
    spec.evaluate(xm, false, minus);
    compare("r", Jr, plus.r, minus.r, j);
    compare("eq", Je, plus.c_eq, minus.c_eq, j);
    compare("in", Ji, plus.c_in, minus.c_in, j);
  }
  return out;
}

}  // namespace platoon::nlp
