#pragma once

// Road grade along the route and the cubic Legendre preview of upcoming grade.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace platoon {

inline constexpr double kMaxGrade = 0.15;

/// Interpolation between consecutive breakpoints.
///  - linear: piecewise-linear (route files)
///  - cosine: half-cosine blend, continuous slope at every breakpoint
///  - step:   holds the left breakpoint's value
enum class GradeInterp { linear, cosine, step };

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, int line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class GradeProfile {
 public:
  GradeProfile() = default;

  GradeProfile(std::vector<double> s, std::vector<double> grade, GradeInterp interp = GradeInterp::linear,
               double route_length = -1.0)
      : s_(std::move(s)), grade_(std::move(grade)), interp_(interp) {
    if (s_.empty() || s_.size() != grade_.size())
      throw std::invalid_argument("GradeProfile: breakpoint arrays empty or mismatched");
    for (std::size_t i = 0; i < s_.size(); ++i) {
      if (!std::isfinite(s_[i]) || !std::isfinite(grade_[i]))
        throw std::invalid_argument("GradeProfile: non-finite breakpoint");
      if (i > 0 && !(s_[i] > s_[i - 1]))
        throw std::invalid_argument("GradeProfile: positions must be strictly increasing");
      if (std::abs(grade_[i]) > kMaxGrade) throw std::invalid_argument("GradeProfile: |grade| exceeds 0.15 rad");
    }
    length_ = route_length >= 0 ? route_length : s_.back();
  }

  double length() const { return length_; }
  GradeInterp interpolation() const { return interp_; }
  const std::vector<double>& positions() const { return s_; }
  const std::vector<double>& grades() const { return grade_; }

  double grade_at(double s) const {
    if (s <= s_.front()) return grade_.front();
    if (s >= s_.back()) return grade_.back();
    const auto it = std::upper_bound(s_.begin(), s_.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - s_.begin()) - 1;
    const double t = (s - s_[i]) / (s_[i + 1] - s_[i]);
    switch (interp_) {
      case GradeInterp::step:
        return grade_[i];
      case GradeInterp::cosine:
        return grade_[i] + (grade_[i + 1] - grade_[i]) * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
      case GradeInterp::linear:
      default:
        return grade_[i] + (grade_[i + 1] - grade_[i]) * t;
    }
  }

  double operator()(double s) const { return grade_at(s); }

 private:
  std::vector<double> s_;
  std::vector<double> grade_;
  GradeInterp interp_ = GradeInterp::linear;
  double length_ = 0.0;
};

// ---------------------------------------------------------------------------
// Legendre preview

struct LegendrePreview {
  std::array<double, 4> c{0, 0, 0, 0};
  double s_start = 0.0;
  double s_plus = 1.0;

  double to_unit(double s) const { return std::clamp(2.0 * (s - s_start) / s_plus - 1.0, -1.0, 1.0); }
};

/// P_0..P_3 and their derivatives at l.
inline std::array<double, 4> legendre_basis(double l) {
  return {1.0, l, 0.5 * (3.0 * l * l - 1.0), 0.5 * (5.0 * l * l * l - 3.0 * l)};
}
inline std::array<double, 4> legendre_basis_slope(double l) {
  return {0.0, 1.0, 3.0 * l, 0.5 * (15.0 * l * l - 3.0)};
}

inline double eval_preview(const LegendrePreview& fit, double s) {
  const auto P = legendre_basis(fit.to_unit(s));
  return fit.c[0] * P[0] + fit.c[1] * P[1] + fit.c[2] * P[2] + fit.c[3] * P[3];
}

/// d alpha / d s; zero outside the window where the argument is clamped.
inline double eval_preview_slope(const LegendrePreview& fit, double s) {
  const double raw = 2.0 * (s - fit.s_start) / fit.s_plus - 1.0;
  if (raw <= -1.0 || raw >= 1.0) return 0.0;
  const auto dP = legendre_basis_slope(raw);
  return (fit.c[1] * dP[1] + fit.c[2] * dP[2] + fit.c[3] * dP[3]) * 2.0 / fit.s_plus;
}

template <class GradeFn>
LegendrePreview fit_preview(const GradeFn& grade, double s_start, double s_plus, int n_samples) {
  if (n_samples < 4) throw std::invalid_argument("fit_preview: need at least 4 samples");
  if (!(s_plus > 0)) throw std::invalid_argument("fit_preview: s_plus must be positive");
  Eigen::Matrix<double, Eigen::Dynamic, 4> A(n_samples, 4);
  Eigen::VectorXd b(n_samples);
  for (int k = 0; k < n_samples; ++k) {
    const double l = -1.0 + 2.0 * k / (n_samples - 1);
    const double s = s_start + 0.5 * (l + 1.0) * s_plus;
    const auto P = legendre_basis(l);
    for (int j = 0; j < 4; ++j) A(k, j) = P[j];
    b[k] = grade(s);
  }
  const Eigen::Vector4d c = A.householderQr().solve(b);
  LegendrePreview fit;
  for (int j = 0; j < 4; ++j) fit.c[j] = c[j];
  fit.s_start = s_start;
  fit.s_plus = s_plus;
  return fit;
}

inline LegendrePreview fit_preview(const GradeProfile& profile, double s_start, double s_plus, int n_samples) {
  return fit_preview([&](double s) { return profile.grade_at(s); }, s_start, s_plus, n_samples);
}

// ---------------------------------------------------------------------------
// Route construction

/// S-shaped test road: flat lead-in, downhill, flat valley, uphill, flat
/// run-out. Transitions are half-cosine ramps of `ramp` metres centred on the
/// segment boundaries; ramp = 0 gives a piecewise-constant profile.
inline GradeProfile make_s_road(double downhill_grade = -0.04, double uphill_grade = 0.04,
                                std::vector<double> segment_lengths = {5000, 10000, 5000, 10000, 5000},
                                double ramp = 500.0) {
  if (!(downhill_grade < 0 && uphill_grade > 0) && !(downhill_grade > 0 && uphill_grade < 0))
    throw std::invalid_argument("make_s_road: grades must be nonzero with opposite signs");
  if (segment_lengths.size() != 5) throw std::invalid_argument("make_s_road: need 5 segment lengths");
  const std::array<double, 5> levels{0.0, downhill_grade, 0.0, uphill_grade, 0.0};
  std::vector<double> bounds{0.0};
  for (double len : segment_lengths) {
    if (!(len > ramp)) throw std::invalid_argument("make_s_road: segment shorter than transition ramp");
    bounds.push_back(bounds.back() + len);
  }
  std::vector<double> s, g;
  if (ramp <= 0.0) {
    for (int i = 0; i < 5; ++i) {
      s.push_back(bounds[i]);
      g.push_back(levels[i]);
    }
    return GradeProfile(std::move(s), std::move(g), GradeInterp::step, bounds.back());
  }
  s.push_back(0.0);
  g.push_back(0.0);
  for (int i = 1; i < 5; ++i) {
    s.push_back(bounds[i] - 0.5 * ramp);
    g.push_back(levels[i - 1]);
    s.push_back(bounds[i] + 0.5 * ramp);
    g.push_back(levels[i]);
  }
  s.push_back(bounds.back());
  g.push_back(0.0);
  return GradeProfile(std::move(s), std::move(g), GradeInterp::cosine, bounds.back());
}

/// Synthetic rolling interstate route: three superposed sinusoids (1.5 %,
/// 1.0 %, 0.8 % at 12 km, 5 km, 2.1 km wavelengths) with two hill events of
/// +/-4.5 % blended in by raised-cosine windows. Sampled every `spacing` m.
inline GradeProfile make_rolling_route(double length = 70000.0, double spacing = 50.0) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  struct Hill {
    double start, up_len, down_len;
  };
  // Each event climbs at +4.5 % then descends at -4.5 %.
  const std::array<Hill, 2> hills{Hill{18000.0, 3000.0, 2500.0}, Hill{47000.0, 3500.0, 3000.0}};
  const double edge = 400.0;
  auto window = [&](double s, double a, double b) {
    if (s <= a - edge || s >= b + edge) return 0.0;
    if (s >= a && s <= b) return 1.0;
    const double x = s < a ? (s - (a - edge)) / edge : ((b + edge) - s) / edge;
    return 0.5 * (1.0 - std::cos(std::numbers::pi * x));
  };
  std::vector<double> s, g;
  const int n = static_cast<int>(std::llround(length / spacing));
  for (int k = 0; k <= n; ++k) {
    const double x = k * spacing;
    double a = 0.015 * std::sin(two_pi * x / 12000.0) + 0.010 * std::sin(two_pi * x / 5000.0 + 1.1) +
               0.008 * std::sin(two_pi * x / 2100.0 + 2.3);
    a *= std::min(1.0, x / 2000.0);  // flat start for the formation
    for (const Hill& h : hills) {
      const double mid = h.start + h.up_len;
      const double wu = window(x, h.start, mid);
      const double wd = window(x, mid, mid + h.down_len);
      if (wu > 0) a = (1 - wu) * a + wu * 0.045;
      if (wd > 0 && x > mid) a = (1 - wd) * a + wd * -0.045;
    }
    s.push_back(x);
    g.push_back(a);
  }
  return GradeProfile(std::move(s), std::move(g), GradeInterp::linear, length);
}

// ---------------------------------------------------------------------------
// Route CSV: header `s_m,grade_rad`, one breakpoint per line.

namespace detail {
inline bool parse_double(std::string_view text, double& out) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
  if (text.empty()) return false;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  return res.ec == std::errc() && res.ptr == text.data() + text.size();
}
}  // namespace detail

inline GradeProfile load_route(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open route file");
  std::string line;
  int lineno = 0;
  std::vector<double> s, g;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      header_seen = true;
      if (line != "s_m,grade_rad") throw ParseError(path, lineno, "expected header 's_m,grade_rad'");
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(path, lineno, "expected two comma-separated fields");
    double sv = 0, gv = 0;
    if (!detail::parse_double(std::string_view(line).substr(0, comma), sv) ||
        !detail::parse_double(std::string_view(line).substr(comma + 1), gv))
      throw ParseError(path, lineno, "non-numeric field");
    if (!s.empty() && !(sv > s.back()))
      throw ParseError(path, lineno, "positions must be strictly increasing");
    if (std::abs(gv) > kMaxGrade) throw ParseError(path, lineno, "|grade| exceeds 0.15 rad");
    s.push_back(sv);
    g.push_back(gv);
  }
  if (s.empty()) throw ParseError(path, lineno, "no breakpoints");
  return GradeProfile(std::move(s), std::move(g), GradeInterp::linear);
}

inline void save_route(const GradeProfile& profile, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_route: cannot write " + path);
  out << "s_m,grade_rad\n";
  char buf[64];
  for (std::size_t i = 0; i < profile.positions().size(); ++i) {
    auto write = [&](double v) {
      const auto res = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, res.ptr - buf);
    };
    write(profile.positions()[i]);
    out << ',';
    write(profile.grades()[i]);
    out << '\n';
  }
}

}  // namespace platoon
