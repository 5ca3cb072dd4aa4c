#pragma once

// Permutation batches over truck-mass orderings, summary tables and
// plot-ready data files.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "platoon/config.hpp"

namespace platoon {

/// All ordered K-selections without repetition from mass_set, in
/// lexicographic order of the mass values.
inline std::vector<std::vector<double>> enumerate_permutations(std::vector<double> mass_set, int K) {
  if (K < 1) throw std::invalid_argument("enumerate_permutations: K must be >= 1");
  if (K > static_cast<int>(mass_set.size()))
    throw std::invalid_argument("enumerate_permutations: K exceeds the mass set size");
  std::sort(mass_set.begin(), mass_set.end());
  if (std::adjacent_find(mass_set.begin(), mass_set.end()) != mass_set.end())
    throw std::invalid_argument("enumerate_permutations: duplicate masses");
  std::vector<std::vector<double>> out;
  std::vector<double> cur;
  std::vector<bool> used(mass_set.size(), false);
  std::function<void()> rec = [&] {
    if (static_cast<int>(cur.size()) == K) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = 0; i < mass_set.size(); ++i) {
      if (used[i]) continue;
      used[i] = true;
      cur.push_back(mass_set[i]);
      rec();
      cur.pop_back();
      used[i] = false;
    }
  };
  rec();
  return out;
}

/// Directory name of an ordering, e.g. "14t-22t-38t" (kg when not whole
/// tonnes).
inline std::string ordering_name(const std::vector<double>& masses) {
  std::string s;
  for (std::size_t i = 0; i < masses.size(); ++i) {
    if (i) s += '-';
    const double t = masses[i] / 1000.0;
    char buf[32];
    if (std::abs(t - std::round(t)) < 1e-9)
      std::snprintf(buf, sizeof buf, "%.0ft", t);
    else
      std::snprintf(buf, sizeof buf, "%.0fkg", masses[i]);
    s += buf;
  }
  return s;
}

struct BatchRun {
  std::string controller;
  std::vector<double> masses;
  std::string ordering;
  std::uint64_t seed = 0;
  bool aborted = false;
  std::string message;
  RunMetrics metrics;
  std::vector<SolveSample> solves;
  double wall_time = 0.0;
};

/// Mean and population standard deviation over the finite samples.
struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  int n = 0;

  static Stat of(const std::vector<double>& xs) {
    Stat s;
    double sum = 0;
    for (double x : xs)
      if (std::isfinite(x)) {
        sum += x;
        ++s.n;
      }
    if (s.n == 0) return s;
    s.mean = sum / s.n;
    double ss = 0;
    for (double x : xs)
      if (std::isfinite(x)) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / s.n);
    return s;
  }
};

struct SummaryRow {
  std::string controller;
  int k = 0;
  int runs = 0;
  Stat fuel, headway, gap_rmse, gap_rmse_raw, disengagements, travel_time;
};

struct SummaryTable {
  std::vector<SummaryRow> rows;
  /// Per controller: platoon-total fuel (sum over trucks of kg/100 km).
  std::map<std::string, Stat> platoon_fuel;
  /// Per controller: share of runs with at least one disengagement.
  std::map<std::string, double> disengaged_share;

  const SummaryRow& row(const std::string& controller, int k) const {
    for (const auto& r : rows)
      if (r.controller == controller && r.k == k) return r;
    throw std::out_of_range("SummaryTable: no row for " + controller + " truck " + std::to_string(k));
  }

  void write_csv(std::ostream& os) const {
    os << "controller,truck,runs,fuel_kg_per_100km_mean,fuel_kg_per_100km_std,headway_s_mean,headway_s_std,"
          "gap_rmse_m_mean,gap_rmse_m_std,gap_rmse_raw_m_mean,gap_rmse_raw_m_std,disengagements_mean,"
          "disengagements_std,travel_time_s_mean,travel_time_s_std\n";
    auto num = [&](double x) {
      if (std::isfinite(x)) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", x);
        os << buf;
      }
    };
    for (const auto& r : rows) {
      os << r.controller << ',' << r.k << ',' << r.runs;
      for (const Stat* s : {&r.fuel, &r.headway, &r.gap_rmse, &r.gap_rmse_raw, &r.disengagements, &r.travel_time}) {
        os << ',';
        num(s->mean);
        os << ',';
        num(s->std);
      }
      os << '\n';
    }
  }

  void write_text(std::ostream& os) const {
    auto cell = [](const Stat& s, int prec) {
      if (!std::isfinite(s.mean)) return std::string("-");
      std::ostringstream o;
      o << std::fixed << std::setprecision(prec) << s.mean << " (" << s.std << ")";
      return o.str();
    };
    std::string last;
    for (const auto& r : rows) {
      if (r.controller != last) {
        last = r.controller;
        os << "\n" << r.controller << " (" << r.runs << " runs)\n";
        os << std::left << std::setw(7) << "truck" << std::setw(22) << "fuel kg/100km" << std::setw(20)
           << "headway s" << std::setw(22) << "gap RMSE m" << std::setw(24) << "gap RMSE raw m" << std::setw(18)
           << "disengagements" << "travel time s\n";
      }
      os << std::left << std::setw(7) << r.k << std::setw(22) << cell(r.fuel, 3) << std::setw(20)
         << cell(r.headway, 3) << std::setw(22) << cell(r.gap_rmse, 2) << std::setw(24) << cell(r.gap_rmse_raw, 2)
         << std::setw(18) << cell(r.disengagements, 2) << cell(r.travel_time, 1) << "\n";
    }
    os << "\nplatoon-total fuel (sum of kg/100km over trucks)\n";
    for (const auto& [name, s] : platoon_fuel)
      os << "  " << std::left << std::setw(14) << name << cell(s, 3) << "   runs with a disengagement: "
         << std::fixed << std::setprecision(1) << 100.0 * disengaged_share.at(name) << " %\n";
  }
};

inline SummaryTable summarize(const std::vector<BatchRun>& runs, const std::vector<std::string>& controllers, int K) {
  SummaryTable t;
  for (const auto& c : controllers) {
    std::vector<const BatchRun*> mine;
    for (const auto& r : runs)
      if (r.controller == c) mine.push_back(&r);
    for (int k = 0; k < K; ++k) {
      SummaryRow row;
      row.controller = c;
      row.k = k;
      std::vector<double> fuel, hw, rmse, raw, dis, tt;
      for (const BatchRun* r : mine) {
        if (r->aborted || k >= static_cast<int>(r->metrics.trucks.size())) continue;
        const auto& m = r->metrics.trucks[k];
        ++row.runs;
        fuel.push_back(m.fuel_per_100km);
        hw.push_back(m.headway);
        rmse.push_back(m.gap_rmse);
        raw.push_back(m.gap_rmse_raw);
        dis.push_back(k > 0 ? m.disengagements : std::numeric_limits<double>::quiet_NaN());
        tt.push_back(m.travel_time);
      }
      row.fuel = Stat::of(fuel);
      row.headway = Stat::of(hw);
      row.gap_rmse = Stat::of(rmse);
      row.gap_rmse_raw = Stat::of(raw);
      row.disengagements = Stat::of(dis);
      row.travel_time = Stat::of(tt);
      t.rows.push_back(row);
    }
    std::vector<double> total;
    int with_dis = 0, counted = 0;
    for (const BatchRun* r : mine) {
      if (r->aborted) continue;
      double sum = 0;
      int d = 0;
      for (const auto& m : r->metrics.trucks) {
        sum += m.fuel_per_100km;
        d += m.disengagements;
      }
      total.push_back(sum);
      ++counted;
      if (d > 0) ++with_dis;
    }
    t.platoon_fuel[c] = Stat::of(total);
    t.disengaged_share[c] = counted ? static_cast<double>(with_dis) / counted : 0.0;
  }
  return t;
}

struct BatchOptions {
  std::string out_dir = "out";
  int jobs = 1;
  bool write_trajectories = true;
  /// Called after each run finishes (from the worker thread, serialized).
  std::function<void(const BatchRun&, int done, int total)> progress;
};

struct BatchResult {
  std::vector<BatchRun> runs;  ///< controller-major, then ordering index
  SummaryTable summary;
  std::filesystem::path dir;
  bool any_aborted = false;
};

/// Runs every (controller, ordering) pair of the configured batch. Runs are
/// independent and their seeds depend only on their index, so the result
/// does not depend on the number of worker threads.
inline BatchResult run_batch(const ExperimentConfig& cfg, const BatchOptions& opt) {
  const auto& b = cfg.batch;
  const auto orderings = enumerate_permutations(b.mass_set, b.platoon_size);
  BatchResult res;
  res.dir = std::filesystem::path(opt.out_dir) / b.id;
  std::filesystem::create_directories(res.dir);

  std::vector<ScenarioConfig> scenarios;
  for (const auto& c : b.controllers) {
    for (const auto& o : orderings) {
      ExperimentConfig e = cfg;
      e.controller = c;
      e.message_log.clear();
      BatchRun r;
      r.controller = c;
      r.masses = o;
      r.ordering = ordering_name(o);
      r.seed = cfg.seed + res.runs.size();
      e.seed = r.seed;
      scenarios.push_back(make_scenario(e, o));
      res.runs.push_back(r);
    }
  }

  const int total = static_cast<int>(res.runs.size());
  std::atomic<int> next{0};
  std::mutex progress_mutex;
  int done = 0;
  auto worker = [&] {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= total) return;
      BatchRun& r = res.runs[i];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        RunResult rr = run_scenario(scenarios[i]);
        r.aborted = rr.aborted;
        r.message = rr.message;
        r.metrics = std::move(rr.metrics);
        r.solves = std::move(rr.log.solves);
        const auto dir = res.dir / r.controller / r.ordering;
        std::filesystem::create_directories(dir);
        if (opt.write_trajectories) {
          std::ofstream tf(dir / "trajectory.csv");
          rr.log.write_csv(tf);
        }
        std::ofstream mf(dir / "metrics.csv");
        r.metrics.write_csv(mf);
      } catch (const std::exception& e) {
        r.aborted = true;
        r.message = e.what();
      }
      r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard<std::mutex> lock(progress_mutex);
      ++done;
      if (opt.progress) opt.progress(r, done, total);
    }
  };
  const int jobs = std::max(1, std::min(opt.jobs, total));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (const auto& r : res.runs) res.any_aborted = res.any_aborted || r.aborted;
  res.summary = summarize(res.runs, b.controllers, b.platoon_size);
  {
    std::ofstream f(res.dir / "summary.csv");
    res.summary.write_csv(f);
  }
  {
    std::ofstream f(res.dir / "summary.txt");
    res.summary.write_text(f);
  }
  {
    std::ofstream f(res.dir / "runs.csv");
    f << "controller,ordering,seed,aborted,disengagements,platoon_fuel_kg_per_100km,message\n";
    for (const auto& r : res.runs) {
      int d = 0;
      double fuel = 0;
      for (const auto& m : r.metrics.trucks) {
        d += m.disengagements;
        fuel += m.fuel_per_100km;
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", fuel);
      std::string msg = r.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      f << r.controller << ',' << r.ordering << ',' << r.seed << ',' << (r.aborted ? 1 : 0) << ',' << d << ','
        << buf << ',' << msg << '\n';
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Plot data

/// Writes a plot-ready CSV for `which` into dir and returns its path.
///   travel: k,s_km,t_s per truck (position-time plot)
///   traces: t_s,k,v,gap,torque,torque_max (velocity, gap and torque traces)
///   delta:  t_s,k,ds,dv,da_t with each quantity the ego value minus the
///           preceding truck's (followers only)
inline std::filesystem::path emit_plot_data(const TrajectoryLog& log, const std::string& which,
                                            const std::filesystem::path& dir,
                                            const std::vector<TruckParams>& params = {}) {
  std::filesystem::create_directories(dir);
  const auto path = dir / (which + ".csv");
  std::ofstream f(path);
  f.precision(10);
  if (which == "travel") {
    f << "k,s_km,t_s\n";
    for (int k = 0; k < log.n_trucks; ++k)
      for (const auto& r : log.truck(k)) f << k << ',' << r.s / 1000.0 << ',' << r.t << '\n';
  } else if (which == "traces") {
    f << "t_s,k,v,gap,torque,torque_max\n";
    for (const auto& r : log.rows) {
      f << r.t << ',' << r.k << ',' << r.v << ',';
      if (std::isfinite(r.gap)) f << r.gap;
      f << ',' << r.torque << ',';
      if (r.k < static_cast<int>(params.size())) f << params[r.k].tau_max;
      f << '\n';
    }
  } else if (which == "delta") {
    f << "t_s,k,ds,dv,da_t\n";
    const int K = log.n_trucks;
    for (std::size_t i = 0; i + K <= log.rows.size(); i += K) {
      for (int k = 1; k < K; ++k) {
        const auto& e = log.rows[i + k];
        const auto& p = log.rows[i + k - 1];
        f << e.t << ',' << k << ',' << e.s - p.s << ',' << e.v - p.v << ',' << e.a_t - p.a_t << '\n';
      }
    }
  } else {
    throw std::invalid_argument("emit_plot_data: unknown figure '" + which + "' (travel, traces, delta)");
  }
  return path;
}

}  // namespace platoon
