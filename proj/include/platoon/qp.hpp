#pragma once

// Dense strictly convex QP solver, dual active-set method of Goldfarb and
// Idnani with Givens updates of the factor J = L^{-T} and R.
//
//   min  1/2 p'Hp + g'p
//   s.t. A_eq p + b_eq  = 0
//        A_in p + b_in >= 0
//        lo <= p <= hi            (infinite entries are ignored)

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace platoon::nlp {

enum class QpStatus { optimal, infeasible, not_convex };

struct DenseQp {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::MatrixXd A_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd A_in;
  Eigen::VectorXd b_in;
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

struct QpResult {
  QpStatus status = QpStatus::optimal;
  Eigen::VectorXd p;
  Eigen::VectorXd y_eq;   ///< equality multipliers (free sign)
  Eigen::VectorXd z_in;   ///< general inequality multipliers (>= 0)
  Eigen::VectorXd z_lo;   ///< lower-bound multipliers (>= 0)
  Eigen::VectorXd z_hi;   ///< upper-bound multipliers (>= 0)
  int iterations = 0;
  double objective = 0.0;
};

class GoldfarbIdnani {
 public:
  explicit GoldfarbIdnani(const DenseQp& qp) : qp_(qp) {}

  QpResult solve() {
    const int n = static_cast<int>(qp_.H.rows());
    const int m_eq = static_cast<int>(qp_.A_eq.rows());
    const int m_in = static_cast<int>(qp_.A_in.rows());
    n_ = n;
    m_eq_ = m_eq;
    m_in_ = m_in;
    m_total_ = m_eq + m_in + 2 * n;

    QpResult res;
    res.p = Eigen::VectorXd::Zero(n);
    res.y_eq = Eigen::VectorXd::Zero(m_eq);
    res.z_in = Eigen::VectorXd::Zero(m_in);
    res.z_lo = Eigen::VectorXd::Zero(n);
    res.z_hi = Eigen::VectorXd::Zero(n);

    Eigen::LLT<Eigen::MatrixXd> llt(qp_.H);
    if (llt.info() != Eigen::Success) {
      res.status = QpStatus::not_convex;
      return res;
    }
    const Eigen::MatrixXd L = llt.matrixL();
    J_ = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n)).transpose();
    R_ = Eigen::MatrixXd::Zero(n, n);
    R_norm_ = 1.0;
    iq_ = 0;
    row_norm_in_.resize(m_in);
    for (int i = 0; i < m_in; ++i) row_norm_in_[i] = qp_.A_in.row(i).lpNorm<Eigen::Infinity>();

    x_ = -llt.solve(qp_.g);
    active_.assign(n + 1, -1);
    u_ = Eigen::VectorXd::Zero(n + 1);
    d_.resize(n);
    z_.resize(n);
    r_.resize(n + 1);
    Eigen::VectorXd np(n);

    for (int i = 0; i < m_eq; ++i) {
      np = qp_.A_eq.row(i).transpose();
      d_.noalias() = J_.transpose() * np;
      update_z();
      update_r();
      double t2 = 0.0;
      const double ztn = z_.dot(np);
      if (std::abs(ztn) > kEps) t2 = (-np.dot(x_) - qp_.b_eq[i]) / ztn;
      x_ += t2 * z_;
      u_[iq_] = t2;
      for (int k = 0; k < iq_; ++k) u_[k] -= t2 * r_[k];
      active_[iq_] = i;
      if (!add_constraint()) {
        res.status = QpStatus::infeasible;
        return res;
      }
    }

    std::vector<char> is_active(m_total_, 0);
    std::vector<char> excluded(m_total_, 0);
    Eigen::VectorXd s(m_total_);
    int iter = 0;
    const int max_iter = 50 * (m_total_ + n) + 100;

    while (true) {
      // Step 1: choose a violated constraint.
      ++iter;
      if (iter > max_iter) {
        res.status = QpStatus::infeasible;
        break;
      }
      std::fill(is_active.begin(), is_active.end(), 0);
      for (int k = m_eq; k < iq_; ++k) is_active[active_[k]] = 1;
      if (m_in > 0) s.segment(m_eq, m_in).noalias() = qp_.A_in * x_ + qp_.b_in;
      const double x_inf = x_.lpNorm<Eigen::Infinity>();
      bool feasible = true;
      for (int c = m_eq; c < m_total_; ++c) {
        if (!usable(c)) {
          s[c] = 0.0;
          continue;
        }
        if (c >= m_eq + m_in) s[c] = slack(c);
        // Violations at rounding level are treated as satisfied.
        const double tol = kFeasTol * (1.0 + std::abs(constant(c)) + row_norm(c) * x_inf);
        if (s[c] < -tol)
          feasible = false;
        else
          s[c] = std::max(s[c], 0.0);
      }
      if (feasible) break;

      const Eigen::VectorXd u_old = u_;
      const std::vector<int> active_old = active_;
      const Eigen::VectorXd x_old = x_;
      const int iq_old = iq_;

      // Step 2: pick the most violated inactive constraint.
      int ip = -1;
      double ss = 0.0;
      for (int c = m_eq; c < m_total_; ++c) {
        if (!usable(c) || is_active[c] || excluded[c]) continue;
        if (s[c] < ss) {
          ss = s[c];
          ip = c;
        }
      }
      if (ip < 0) break;
      normal(ip, np);
      u_[iq_] = 0.0;
      active_[iq_] = ip;
      double s_ip = ss;

      bool restart = false;
      while (!restart) {
        ++iter;
        if (iter > max_iter) break;
        d_.noalias() = J_.transpose() * np;
        update_z();
        update_r();

        // Partial step length (dual feasibility).
        int l = -1;
        double t1 = kInf;
        for (int k = m_eq; k < iq_; ++k) {
          if (r_[k] > 0.0) {
            const double ratio = u_[k] / r_[k];
            if (ratio < t1) {
              t1 = ratio;
              l = active_[k];
            }
          }
        }
        // Full step length (primal).
        double t2 = kInf;
        const double ztn = z_.dot(np);
        if (z_.squaredNorm() > kEps) t2 = -s_ip / ztn;
        const double t = std::min(t1, t2);

        if (t >= kInf) {
          res.status = QpStatus::infeasible;
          fill_result(res);
          res.iterations = iter;
          return res;
        }
        if (t2 >= kInf) {
          for (int k = 0; k < iq_; ++k) u_[k] -= t * r_[k];
          u_[iq_] += t;
          delete_constraint(l);
          continue;
        }
        x_ += t * z_;
        for (int k = 0; k < iq_; ++k) u_[k] -= t * r_[k];
        u_[iq_] += t;

        if (t == t2) {
          if (!add_constraint()) {
            // Linearly dependent with the active set: exclude and roll back.
            excluded[ip] = 1;
            iq_ = iq_old;
            u_ = u_old;
            active_ = active_old;
            x_ = x_old;
            refactor_active();
          }
          restart = true;
          break;
        }
        delete_constraint(l);
        s_ip = slack(ip);
      }
      if (iter > max_iter) {
        res.status = QpStatus::infeasible;
        break;
      }
    }
    if (res.status == QpStatus::optimal) polish();
    fill_result(res);
    res.iterations = iter;
    return res;
  }

 private:
  static constexpr double kEps = std::numeric_limits<double>::epsilon();
  static constexpr double kInf = std::numeric_limits<double>::infinity();
  static constexpr double kFeasTol = 1e-12;

  double row_norm(int c) const { return c >= m_eq_ && c < m_eq_ + m_in_ ? row_norm_in_[c - m_eq_] : 1.0; }

  // Constraint index space: [0, m_eq) equalities, [m_eq, m_eq+m_in) general
  // inequalities, then n lower bounds, then n upper bounds.
  bool usable(int c) const {
    if (c < m_eq_ + m_in_) return true;
    const int j = c - m_eq_ - m_in_;
    if (j < n_) return std::isfinite(qp_.lo[j]);
    return std::isfinite(qp_.hi[j - n_]);
  }

  double slack(int c) const {
    if (c < m_eq_) return qp_.A_eq.row(c).dot(x_) + qp_.b_eq[c];
    if (c < m_eq_ + m_in_) return qp_.A_in.row(c - m_eq_).dot(x_) + qp_.b_in[c - m_eq_];
    const int j = c - m_eq_ - m_in_;
    if (j < n_) return x_[j] - qp_.lo[j];
    return qp_.hi[j - n_] - x_[j - n_];
  }

  void normal(int c, Eigen::VectorXd& np) const {
    if (c < m_eq_) {
      np = qp_.A_eq.row(c).transpose();
    } else if (c < m_eq_ + m_in_) {
      np = qp_.A_in.row(c - m_eq_).transpose();
    } else {
      np.setZero();
      const int j = c - m_eq_ - m_in_;
      if (j < n_)
        np[j] = 1.0;
      else
        np[j - n_] = -1.0;
    }
  }

  void update_z() { z_.noalias() = J_.rightCols(n_ - iq_) * d_.tail(n_ - iq_); }

  void update_r() {
    for (int i = iq_ - 1; i >= 0; --i) {
      double sum = 0.0;
      for (int j = i + 1; j < iq_; ++j) sum += R_(i, j) * r_[j];
      r_[i] = (d_[i] - sum) / R_(i, i);
    }
  }

  bool add_constraint() {
    const int n = n_;
    for (int j = n - 1; j >= iq_ + 1; --j) {
      double cc = d_[j - 1];
      double ss = d_[j];
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d_[j] = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d_[j - 1] = -h;
      } else {
        d_[j - 1] = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < n; ++k) {
        const double t1 = J_(k, j - 1);
        const double t2 = J_(k, j);
        J_(k, j - 1) = t1 * cc + t2 * ss;
        J_(k, j) = xny * (t1 + J_(k, j - 1)) - t2;
      }
    }
    ++iq_;
    for (int i = 0; i < iq_; ++i) R_(i, iq_ - 1) = d_[i];
    if (std::abs(d_[iq_ - 1]) <= kEps * R_norm_) {
      --iq_;
      return false;
    }
    R_norm_ = std::max(R_norm_, std::abs(d_[iq_ - 1]));
    return true;
  }

  void delete_constraint(int l) {
    const int n = n_;
    int qq = -1;
    for (int i = m_eq_; i < iq_; ++i)
      if (active_[i] == l) {
        qq = i;
        break;
      }
    if (qq < 0) return;
    for (int i = qq; i < iq_ - 1; ++i) {
      active_[i] = active_[i + 1];
      u_[i] = u_[i + 1];
      R_.col(i) = R_.col(i + 1);
    }
    active_[iq_ - 1] = active_[iq_];
    u_[iq_ - 1] = u_[iq_];
    active_[iq_] = -1;
    u_[iq_] = 0.0;
    R_.col(iq_ - 1).setZero();
    --iq_;
    if (iq_ == 0) return;
    for (int j = qq; j < iq_; ++j) {
      double cc = R_(j, j);
      double ss = R_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq_; ++k) {
        const double t1 = R_(j, k);
        const double t2 = R_(j + 1, k);
        R_(j, k) = t1 * cc + t2 * ss;
        R_(j + 1, k) = xny * (t1 + R_(j, k)) - t2;
      }
      for (int k = 0; k < n; ++k) {
        const double t1 = J_(k, j);
        const double t2 = J_(k, j + 1);
        J_(k, j) = t1 * cc + t2 * ss;
        J_(k, j + 1) = xny * (J_(k, j) + t1) - t2;
      }
    }
  }

  // Rebuilds J and R from scratch for the current active set (after a
  // rollback, the incremental factors no longer match).
  void refactor_active() {
    Eigen::LLT<Eigen::MatrixXd> llt(qp_.H);
    const Eigen::MatrixXd L = llt.matrixL();
    J_ = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n_, n_)).transpose();
    R_.setZero();
    R_norm_ = 1.0;
    const std::vector<int> act(active_.begin(), active_.begin() + iq_);
    const int count = iq_;
    iq_ = 0;
    Eigen::VectorXd np(n_);
    for (int k = 0; k < count; ++k) {
      normal(act[k], np);
      d_.noalias() = J_.transpose() * np;
      add_constraint();
    }
  }

  // The incremental updates lose accuracy when gradients span many orders of
  // magnitude. Re-solve the KKT system of the final active set directly, with
  // one round of iterative refinement.
  void polish() {
    const int n = n_;
    const int q = iq_;
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + q, n + q);
    Eigen::VectorXd rhs(n + q);
    K.topLeftCorner(n, n) = qp_.H;
    rhs.head(n) = -qp_.g;
    Eigen::VectorXd np(n);
    for (int k = 0; k < q; ++k) {
      const int c = active_[k];
      normal(c, np);
      K.block(0, n + k, n, 1) = -np;
      K.block(n + k, 0, 1, n) = np.transpose();
      rhs[n + k] = -constant(c);
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(K);
    Eigen::VectorXd sol = lu.solve(rhs);
    sol += lu.solve(rhs - K * sol);
    if (!sol.allFinite()) return;
    x_ = sol.head(n);
    u_.head(q) = sol.tail(q);
  }

  double constant(int c) const {
    if (c < m_eq_) return qp_.b_eq[c];
    if (c < m_eq_ + m_in_) return qp_.b_in[c - m_eq_];
    const int j = c - m_eq_ - m_in_;
    if (j < n_) return -qp_.lo[j];
    return qp_.hi[j - n_];
  }

  void fill_result(QpResult& res) const {
    res.p = x_;
    for (int k = 0; k < iq_; ++k) {
      const int c = active_[k];
      if (c < 0) continue;
      if (c < m_eq_) {
        res.y_eq[c] = u_[k];
      } else if (c < m_eq_ + m_in_) {
        res.z_in[c - m_eq_] = u_[k];
      } else {
        const int j = c - m_eq_ - m_in_;
        if (j < n_)
          res.z_lo[j] = u_[k];
        else
          res.z_hi[j - n_] = u_[k];
      }
    }
    res.objective = 0.5 * x_.dot(qp_.H * x_) + qp_.g.dot(x_);
  }

  const DenseQp& qp_;
  int n_ = 0, m_eq_ = 0, m_in_ = 0, m_total_ = 0;
  Eigen::MatrixXd J_, R_;
  Eigen::VectorXd x_, u_, d_, z_, r_;
  Eigen::VectorXd row_norm_in_;
  std::vector<int> active_;
  int iq_ = 0;
  double R_norm_ = 1.0;
};

inline QpResult solve_qp(const DenseQp& qp) { return GoldfarbIdnani(qp).solve(); }

}  // namespace platoon::nlp
