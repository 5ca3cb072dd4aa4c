// Command-line front end: run, batch, fit-drag and check.
//
// Exit codes: 0 success, 1 run failure, 2 configuration error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "platoon/batch.hpp"
#include "platoon/config.hpp"

namespace fs = std::filesystem;
using namespace platoon;

namespace {

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool config_required) {
  auto* opt = cmd->add_option("--config", a.config, "JSON scenario file");
  if (config_required) opt->required();
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", a.seed, "override the configured seed");
  cmd->add_option("--jobs", a.jobs, "worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig load_with_overrides(const CommonArgs& a) {
  ExperimentConfig e = a.config.empty() ? parse_config(default_config_json()) : load_config(a.config);
  if (a.seed) e.seed = *a.seed;
  if (a.jobs) e.batch.jobs = *a.jobs;
  return e;
}

void print_metrics(const RunMetrics& m) {
  std::printf("%-3s %8s %12s %9s %10s %10s %7s %10s %9s\n", "k", "mass_t", "fuel/100km", "headway", "rmse_m",
              "rmse_raw", "diseng", "travel_s", "max_gap");
  for (const auto& t : m.trucks) {
    std::printf("%-3d %8.1f %12.3f %9.3f %10.3f %10.3f %7d %10.1f %9.2f\n", t.k, t.mass / 1000.0, t.fuel_per_100km,
                t.headway, t.gap_rmse, t.gap_rmse_raw, t.disengagements, t.travel_time, t.max_gap);
  }
}

// ---------------------------------------------------------------------------

int cmd_run(const CommonArgs& a, const std::string& controller_override) {
  ExperimentConfig e = load_with_overrides(a);
  if (!controller_override.empty()) {
    try {
      parse_controller_kind(controller_override);
    } catch (const std::invalid_argument& err) {
      throw ConfigError(std::string("--controller: ") + err.what());
    }
    e.controller = controller_override;
  }
  ScenarioConfig sc = make_scenario(e);
  const fs::path dir = fs::path(a.out) / e.name / e.controller;
  fs::create_directories(dir);
  if (!sc.message_log.empty() && fs::path(sc.message_log).is_relative())
    sc.message_log = (dir / sc.message_log).string();

  std::printf("run %s: %d trucks, controller %s, route %.1f km\n", e.name.c_str(), sc.n_trucks(),
              e.controller.c_str(), (sc.finish() - sc.s_start) / 1000.0);
  RunResult r = run_scenario(sc);
  {
    std::ofstream f(dir / "trajectory.csv");
    r.log.write_csv(f);
  }
  {
    std::ofstream f(dir / "metrics.csv");
    r.metrics.write_csv(f);
  }
  std::vector<TruckParams> params;
  for (const auto& t : sc.trucks) params.push_back(t.params);
  for (const char* fig : {"travel", "traces", "delta"}) emit_plot_data(r.log, fig, dir / "plots", params);

  print_metrics(r.metrics);
  double total = 0, worst = 0;
  int n = 0, failed = 0;
  for (const auto& s : r.log.solves) {
    total += s.wall_time;
    worst = std::max(worst, s.wall_time);
    ++n;
    failed += s.converged ? 0 : 1;
  }
  if (n > 0)
    std::printf("solves: %d, mean %.2f ms, max %.2f ms, not converged %d\n", n, 1e3 * total / n, 1e3 * worst,
                failed);
  std::printf("output: %s\n", dir.string().c_str());
  if (r.aborted) {
    std::fprintf(stderr, "run aborted: %s\n", r.message.c_str());
    return kRunFailure;
  }
  return kOk;
}

int cmd_batch(const CommonArgs& a) {
  ExperimentConfig e = load_with_overrides(a);
  BatchOptions opt;
  opt.out_dir = a.out;
  opt.jobs = e.batch.jobs;
  opt.progress = [](const BatchRun& r, int done, int total) {
    int d = 0;
    for (const auto& m : r.metrics.trucks) d += m.disengagements;
    std::printf("[%2d/%2d] %-13s %-16s %6.1f s  diseng %d%s\n", done, total, r.controller.c_str(),
                r.ordering.c_str(), r.wall_time, d, r.aborted ? "  ABORTED" : "");
    std::fflush(stdout);
  };
  // Surface config problems (bad masses, K) before any run starts.
  try {
    enumerate_permutations(e.batch.mass_set, e.batch.platoon_size);
    make_scenario(e, std::vector<double>(e.batch.platoon_size, e.batch.mass_set.empty() ? 1.0 : e.batch.mass_set[0]));
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("batch: ") + err.what());
  }
  BatchResult res = run_batch(e, opt);
  res.summary.write_text(std::cout);
  std::printf("output: %s\n", res.dir.string().c_str());
  if (res.any_aborted) {
    for (const auto& r : res.runs)
      if (r.aborted) std::fprintf(stderr, "aborted: %s %s: %s\n", r.controller.c_str(), r.ordering.c_str(),
                                  r.message.c_str());
    return kRunFailure;
  }
  return kOk;
}

std::vector<std::pair<double, double>> read_drag_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open drag data '" + path + "'");
  std::vector<std::pair<double, double>> data;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    double d = 0, b = 0;
    if (comma == std::string::npos || !detail::parse_double(line.substr(0, comma), d) ||
        !detail::parse_double(line.substr(comma + 1), b)) {
      if (lineno == 1) continue;  // header
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'gap_m,beta'");
    }
    data.emplace_back(d, b);
  }
  return data;
}

int cmd_fit_drag(const CommonArgs& a, const std::string& data_path) {
  const auto data = data_path.empty() ? reference_drag_data() : read_drag_csv(data_path);
  DragFitResult fit;
  try {
    fit = fit_drag_reduction(data);
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  } catch (const FitError& err) {
    std::fprintf(stderr, "%s (residual %.3g)\n", err.what(), err.residual());
    return kRunFailure;
  }
  const auto& m = fit.model;
  std::printf("beta(d) = %.8g exp(%.8g d) + %.8g exp(%.8g d)\n", m.a, m.b, m.c, m.d_coef);
  std::printf("rmse %.3e over %zu points, beta(15) = %.6f\n", fit.rmse, data.size(), drag_reduction(15.0, m));

  fs::create_directories(a.out);
  {
    std::ofstream f(fs::path(a.out) / "drag_fit.json");
    f << nlohmann::json{{"a", m.a}, {"b", m.b}, {"c", m.c}, {"d", m.d_coef}, {"rmse", fit.rmse}}.dump(2) << '\n';
  }
  {
    std::ofstream f(fs::path(a.out) / "drag_curve.csv");
    f << "gap_m,beta_fit,beta_data\n";
    f.precision(10);
    for (int i = 0; i <= 120; ++i) f << i << ',' << drag_reduction(i, m) << ",\n";
    for (const auto& [d, b] : data) f << d << ',' << drag_reduction(d, m) << ',' << b << '\n';
  }
  std::printf("output: %s\n", a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// Self-test

struct CheckLine {
  std::string name;
  bool ok;
  std::string detail;
};

EgoContext check_context(const TruckParams& p, const GradeProfile& road, double s, double v, const OcpConfig& cfg,
                         Role role) {
  EgoContext c;
  c.role = role;
  c.params = p;
  c.x = {s, v, equilibrium_traction(v, road.grade_at(s), std::nullopt, p, cfg.drag), settled_gear(v, p), 0.0};
  c.preview = fit_preview(road, s, v * cfg.horizon() + cfg.preview_margin, cfg.preview_samples);
  return c;
}

int cmd_check(const CommonArgs& a) {
  ExperimentConfig e = load_with_overrides(a);
  std::vector<CheckLine> lines;
  auto add = [&](std::string name, bool ok, std::string detail) { lines.push_back({name, ok, detail}); };
  char buf[256];

  // Drag curve: fit quality and monotonicity.
  const auto fit = fit_drag_reduction(reference_drag_data());
  std::snprintf(buf, sizeof buf, "rmse %.2e, beta(15) %.5f", fit.rmse, drag_reduction(15, fit.model));
  add("drag fit", fit.rmse <= 2e-3 && std::abs(drag_reduction(15, fit.model) - 0.90497) <= 3e-3, buf);
  bool mono = true;
  for (double d = 0; d < 110; d += 0.25)
    mono = mono && drag_reduction(d, fit.model) <= drag_reduction(d + 0.25, fit.model) + 1e-15;
  add("drag monotone", mono, "0 to 110 m");

  ScenarioConfig sc = make_scenario(e);
  const GradeProfile& road = sc.profile;
  const TruckParams& p0 = sc.trucks.front().params;
  const OcpConfig& ocp = e.ocp;

  // Admissible controls respect force and power limits.
  bool adm = true;
  for (int g = 0; g < p0.gear_count(); ++g)
    for (double v = 0; v <= 35; v += 0.5) {
      const auto b = admissible_control_set(v, g, p0);
      const double F = p0.mass * b.u_max;
      adm = adm && F <= max_wheel_force(g, p0) * (1 + 1e-12) && F * v <= p0.p_max + 1e-9;
    }
  add("admissible set", adm, "all gears, 0 to 35 m/s");

  // Plant integrator: step halving ratio on the steepest grade.
  {
    std::mt19937_64 rng(e.seed);
    const double s = std::uniform_real_distribution<double>(road.positions().front(), road.length() - 100)(rng);
    const TruckState x0{s, 22.0, 0.4, settled_gear(22.0, p0), 0.0};
    ExogenousInput w;
    w.grade = [&](double q) { return road.grade_at(q); };
    auto v_after = [&](int n) { return integrate_step(x0, 0.8, w, p0, 1.0, n).v; };
    const double ref = v_after(1000);
    const double e1 = v_after(10) - v_after(20), e2 = v_after(20) - v_after(40);
    std::snprintf(buf, sizeof buf, "|v10 - v1000| %.1e, ratio %.2f", std::abs(v_after(10) - ref), e1 / e2);
    add("integrator", std::abs(v_after(10) - ref) <= 1e-6 && std::abs(e1 / e2 - 16) <= 2, buf);
  }

  // Derivatives and a KKT solve on the joint considerate problem.
  {
    const TruckParams& p1 = sc.trucks.size() > 1 ? sc.trucks[1].params : p0;
    const double s0 = sc.s_start + 0.5 * (sc.finish() - sc.s_start);
    EgoContext ego = check_context(p0, road, s0, 24.0, ocp, Role::leader);
    EgoContext fol = check_context(p1, road, s0 - p0.length - 0.72 * 24.0 - 2.0, 24.5, ocp, Role::last);
    OcpProblem prob = build_considerate(ego, fol, ocp);
    Eigen::VectorXd z = prob.cold_start();
    std::mt19937_64 rng(e.seed + 1);
    std::normal_distribution<double> nd(0.0, 1e-3);
    for (int i = 0; i < z.size(); ++i) z[i] += nd(rng) * (1 + std::abs(z[i]));
    const auto dc = nlp::check_derivatives(prob.spec(), z);
    std::snprintf(buf, sizeof buf, "max relative error %.2e", dc.max_rel_error);
    add("derivatives", dc.max_rel_error <= 1e-5, buf);

    const OcpSolution sol = solve_ocp(prob, prob.cold_start(), e.sqp);
    std::snprintf(buf, sizeof buf, "%s after %d iterations, kkt %.2e", nlp::to_string(sol.report.status),
                  sol.report.iterations, sol.report.kkt_residual);
    add("considerate solve", sol.report.status == nlp::SolveStatus::converged && sol.report.kkt_residual <= 1e-6, buf);
  }

  int failed = 0;
  for (const auto& l : lines) {
    std::printf("%-4s %-18s %s\n", l.ok ? "ok" : "FAIL", l.name.c_str(), l.detail.c_str());
    failed += l.ok ? 0 : 1;
  }
  fs::create_directories(a.out);
  std::ofstream f(fs::path(a.out) / "check.csv");
  f << "check,ok,detail\n";
  for (const auto& l : lines) f << l.name << ',' << (l.ok ? 1 : 0) << ",\"" << l.detail << "\"\n";
  return failed ? kRunFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Truck platoon simulator with considerate and anticipative MPC"};
  app.require_subcommand(1);

  CommonArgs run_args, batch_args, fit_args, check_args;
  std::string controller, drag_data;

  auto* run = app.add_subcommand("run", "simulate one scenario");
  add_common(run, run_args, true);
  run->add_option("--controller", controller, "considerate, anticipative or cacc (overrides the config)");

  auto* batch = app.add_subcommand("batch", "permutation study over truck orderings");
  add_common(batch, batch_args, true);

  auto* fit = app.add_subcommand("fit-drag", "refit the drafting drag curve");
  add_common(fit, fit_args, false);
  fit->add_option("--data", drag_data, "CSV of gap_m,beta pairs (default: built-in table)");

  auto* check = app.add_subcommand("check", "model and solver self-test");
  add_common(check, check_args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(run_args, controller);
    if (*batch) return cmd_batch(batch_args);
    if (*fit) return cmd_fit_drag(fit_args, drag_data);
    if (*check) return cmd_check(check_args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRunFailure;
  }
  return kOk;
}
