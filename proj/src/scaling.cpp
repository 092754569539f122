#include "xmodal/scaling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace xmodal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

void validate_points(std::span<const ScalingPoint> points, std::size_t min_count) {
  if (points.size() < min_count) {
    throw std::invalid_argument("scaling fit needs at least " +
                                std::to_string(min_count) + " points, got " +
                                std::to_string(points.size()));
  }
  for (const auto& p : points) {
    if (!(p.tokens > 0.0) || !std::isfinite(p.tokens)) {
      throw std::invalid_argument("scaling point tokens must be positive and finite");
    }
    if (!(p.misalignment > 0.0) || !std::isfinite(p.misalignment)) {
      throw std::invalid_argument("scaling point misalignment must be positive and finite");
    }
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      if (points[i].tokens == points[j].tokens) {
        throw std::invalid_argument("scaling points must have distinct token counts");
      }
    }
  }
}

// Optimization runs over t = (log E, log B, log beta) so positivity is
// structural and the Jacobian columns stay comparably scaled even when the
// power term is orders of magnitude below E.
struct LogParams {
  double le = 0.0;
  double lb = 0.0;
  double lg = 0.0;
};

struct Surface {
  std::vector<double> log_d;  // ln D_i
  std::vector<double> y;      // ln M_i

  double sse(const LogParams& t) const {
    const double e = std::exp(t.le);
    const double b = std::exp(t.lb);
    const double g = std::exp(t.lg);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double m = e + b * std::exp(-g * log_d[i]);
      if (!(m > 0.0) || !std::isfinite(m)) return kInf;
      const double r = y[i] - std::log(m);
      acc += r * r;
    }
    return std::isfinite(acc) ? acc : kInf;
  }

  // Jacobian of the model (not the residual) w.r.t. t, and residuals.
  void jacobian(const LogParams& t, std::array<double, 3>* jac, double* resid) const {
    const double e = std::exp(t.le);
    const double b = std::exp(t.lb);
    const double g = std::exp(t.lg);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double x = std::exp(-g * log_d[i]);  // D^-beta
      const double m = e + b * x;
      resid[i] = y[i] - std::log(m);
      jac[i][0] = e / m;
      jac[i][1] = b * x / m;
      jac[i][2] = -g * b * x * log_d[i] / m;
    }
  }
};

// Solves the 3x3 system a * x = rhs in place; returns false when singular.
bool solve3(double a[3][3], const double rhs[3], double out[3]) {
  double m[3][4];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r][c] = a[r][c];
    m[r][3] = rhs[r];
  }
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    }
    if (std::fabs(m[pivot][col]) < 1e-300) return false;
    if (pivot != col) std::swap(m[pivot], m[col]);
    for (int r = col + 1; r < 3; ++r) {
      const double f = m[r][col] / m[col][col];
      for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
    }
  }
  for (int r = 2; r >= 0; --r) {
    double v = m[r][3];
    for (int c = r + 1; c < 3; ++c) v -= m[r][c] * out[c];
    out[r] = v / m[r][r];
    if (!std::isfinite(out[r])) return false;
  }
  return true;
}

constexpr double kLogFloor = -745.0;  // exp underflows to 0 just below this
constexpr double kMaxStep = 10.0;     // per-coordinate cap in log space

void clamp(LogParams& t, double le_hi) {
  t.le = std::clamp(t.le, kLogFloor, le_hi);
  t.lb = std::clamp(t.lb, kLogFloor, 745.0);
  t.lg = std::clamp(t.lg, std::log(1e-4), std::log(50.0));
}

struct RefineResult {
  LogParams t;
  double sse = kInf;
  bool converged = false;
};

// Levenberg-style damped Gauss-Newton on the log-space residuals. The
// damping shrinks to zero on successful steps, so the tail behaves like
// pure Gauss-Newton and a zero-residual optimum is reached to machine
// precision (needed by the noiseless-recovery contract).
RefineResult refine(const Surface& s, LogParams t, double le_hi) {
  const std::size_t n = s.y.size();
  std::vector<std::array<double, 3>> jac(n);
  std::vector<double> resid(n);

  RefineResult res;
  clamp(t, le_hi);
  double sse = s.sse(t);
  if (!std::isfinite(sse)) return res;
  double lambda = 1e-3;

  for (int iter = 0; iter < 200; ++iter) {
    s.jacobian(t, jac.data(), resid.data());
    double jtj[3][3] = {};
    double jtr[3] = {};
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) {
        jtr[a] += jac[i][a] * resid[i];
        for (int b = a; b < 3; ++b) jtj[a][b] += jac[i][a] * jac[i][b];
      }
    }
    jtj[1][0] = jtj[0][1];
    jtj[2][0] = jtj[0][2];
    jtj[2][1] = jtj[1][2];

    bool stepped = false;
    for (int attempt = 0; attempt < 16; ++attempt) {
      double damped[3][3];
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) damped[a][b] = jtj[a][b];
        damped[a][a] += lambda * std::max(jtj[a][a], 1e-12);
      }
      double delta[3];
      if (solve3(damped, jtr, delta)) {
        for (double& d : delta) d = std::clamp(d, -kMaxStep, kMaxStep);
        LogParams trial{t.le + delta[0], t.lb + delta[1], t.lg + delta[2]};
        clamp(trial, le_hi);
        const double trial_sse = s.sse(trial);
        if (trial_sse <= sse) {
          const double step = std::max({std::fabs(trial.le - t.le),
                                        std::fabs(trial.lb - t.lb),
                                        std::fabs(trial.lg - t.lg)});
          const double gain = sse - trial_sse;
          t = trial;
          sse = trial_sse;
          lambda = std::max(lambda * 0.25, 1e-14);
          stepped = true;
          if (step < 1e-13 || gain <= 1e-17 * (1.0 + sse)) {
            res.converged = true;
            iter = 200;
          }
          break;
        }
      }
      lambda *= 8.0;
      if (lambda > 1e12) break;
    }
    if (!stepped) {
      // No downhill step available at any damping: local optimum.
      res.converged = true;
      break;
    }
  }
  res.t = t;
  res.sse = sse;
  return res;
}

struct OlsLine {
  double intercept = 0.0;
  double slope = 0.0;
  bool ok = false;
};

OlsLine ols(std::span<const double> u, std::span<const double> v) {
  OlsLine line;
  const std::size_t n = u.size();
  double um = 0.0, vm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    um += u[i];
    vm += v[i];
  }
  um /= static_cast<double>(n);
  vm /= static_cast<double>(n);
  double suu = 0.0, suv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    suu += (u[i] - um) * (u[i] - um);
    suv += (u[i] - um) * (v[i] - vm);
  }
  if (suu <= 0.0) return line;
  line.slope = suv / suu;
  line.intercept = vm - line.slope * um;
  line.ok = true;
  return line;
}

}  // namespace

double ScalingFit::predict(double tokens) const {
  return E + B * std::pow(tokens, -beta);
}

ScalingFit fit_scaling(std::span<const ScalingPoint> points) {
  validate_points(points, 4);
  const std::size_t n = points.size();

  Surface s;
  s.log_d.reserve(n);
  s.y.reserve(n);
  double min_m = kInf;
  double min_log_d = kInf;
  for (const auto& p : points) {
    s.log_d.push_back(std::log(p.tokens));
    s.y.push_back(std::log(p.misalignment));
    min_m = std::min(min_m, p.misalignment);
    min_log_d = std::min(min_log_d, std::log(p.tokens));
  }
  // E can exceed min M mid-search but never by much at an optimum; the bound
  // only keeps log() evaluations sane.
  const double le_hi = std::log(min_m) + 3.0;

  RefineResult best;
  for (int bi = 1; bi <= 20; ++bi) {
    const double beta0 = 0.1 * static_cast<double>(bi);
    for (double frac : {0.25, 0.5, 0.75, 0.95}) {
      const double e0 = frac * min_m;
      // Median of (M_i - E) * D_i^beta is a robust B for this (E, beta).
      std::vector<double> b_est;
      b_est.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double excess = std::exp(s.y[i]) - e0;
        if (excess > 0.0) {
          b_est.push_back(excess * std::exp(beta0 * s.log_d[i]));
        }
      }
      if (b_est.empty()) continue;
      auto mid = b_est.begin() + static_cast<std::ptrdiff_t>(b_est.size() / 2);
      std::nth_element(b_est.begin(), mid, b_est.end());
      const double b0 = *mid;
      if (!(b0 > 0.0) || !std::isfinite(b0)) continue;
      LogParams t0{std::log(e0), std::log(b0), std::log(beta0)};
      RefineResult r = refine(s, t0, le_hi);
      if (r.sse < best.sse) best = r;
    }
  }

  ScalingFit fit;
  fit.r2_loocv = kNaN;
  fit.tokens_at_5pct = kNaN;

  // Exact pure-power-law candidate: with E pinned to 0 the problem is
  // linear in (log B, beta), so ordinary least squares solves it outright.
  const OlsLine pw = ols(s.log_d, s.y);
  double pw_sse = kInf;
  if (pw.ok && pw.slope < 0.0) {
    pw_sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = s.y[i] - (pw.intercept + pw.slope * s.log_d[i]);
      pw_sse += r * r;
    }
  }

  if (pw_sse < best.sse) {
    fit.E = 0.0;
    fit.B = std::exp(pw.intercept);
    fit.beta = -pw.slope;
    fit.converged = true;
    fit.flat = false;
    return fit;
  }

  if (!std::isfinite(best.sse)) {
    throw std::runtime_error("scaling fit failed: no refinement start produced a finite fit");
  }
  fit.E = std::exp(best.t.le);
  fit.B = std::exp(best.t.lb);
  fit.beta = std::exp(best.t.lg);
  fit.converged = best.converged;
  // Largest contribution of the power term over the data range sits at the
  // smallest D; when even that is negligible against E the law is flat and
  // B/beta carry no information.
  const double peak = fit.B * std::exp(-fit.beta * min_log_d);
  fit.flat = fit.E > 0.0 && peak < 1e-5 * fit.E;
  return fit;
}

double tokens_to_within_5pct(const ScalingFit& fit) {
  if (!(fit.E > 0.0)) {
    throw std::domain_error(
        "tokens_to_within_5pct is undefined for E = 0: a pure power law has no asymptote margin");
  }
  if (!(fit.B > 0.0) || !(fit.beta > 0.0)) {
    throw std::domain_error("tokens_to_within_5pct needs B > 0 and beta > 0");
  }
  return std::pow(fit.B / (0.05 * fit.E), 1.0 / fit.beta);
}

double loocv_r2(std::span<const ScalingPoint> points, const ScalingFitter& fitter) {
  validate_points(points, 5);
  const std::size_t n = points.size();
  std::vector<double> y(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::log(points[i].misalignment);
    mean += y[i];
  }
  mean /= static_cast<double>(n);
  double ss_tot = 0.0;
  for (double v : y) ss_tot += (v - mean) * (v - mean);
  if (ss_tot <= 0.0) {
    throw std::invalid_argument("loocv_r2: zero variance in log misalignment");
  }

  double press = 0.0;
  std::vector<ScalingPoint> fold;
  fold.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    fold.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) fold.push_back(points[j]);
    }
    const ScalingFit f = fitter(fold);
    const double pred = f.predict(points[i].tokens);
    const double r = pred > 0.0 ? y[i] - std::log(pred) : kInf;
    press += r * r;
  }
  return 1.0 - press / ss_tot;
}

double loocv_r2(std::span<const ScalingPoint> points) {
  return loocv_r2(points, [](std::span<const ScalingPoint> p) { return fit_scaling(p); });
}

double LinearLogFit::predict(double x) const { return intercept + slope * std::log(x); }

namespace {

void validate_xy(std::span<const double> x, std::span<const double> y, std::size_t min_count) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("linear-log fit: x and y sizes differ");
  }
  if (x.size() < min_count) {
    throw std::invalid_argument("linear-log fit needs at least " +
                                std::to_string(min_count) + " points");
  }
  for (double v : x) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("linear-log fit: x values must be positive and finite");
    }
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw std::invalid_argument("linear-log fit: y values must be finite");
  }
}

}  // namespace

LinearLogFit fit_linear_log(std::span<const double> x, std::span<const double> y) {
  validate_xy(x, y, 3);
  std::vector<double> u(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) u[i] = std::log(x[i]);
  const OlsLine line = ols(u, y);
  if (!line.ok) {
    throw std::invalid_argument("linear-log fit: zero variance in log x");
  }
  return LinearLogFit{line.intercept, line.slope};
}

double loocv_r2_linear_log(std::span<const double> x, std::span<const double> y) {
  validate_xy(x, y, 5);
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);
  double ss_tot = 0.0;
  for (double v : y) ss_tot += (v - mean) * (v - mean);
  if (ss_tot <= 0.0) {
    throw std::invalid_argument("loocv_r2_linear_log: zero variance in y");
  }

  double press = 0.0;
  std::vector<double> xf(n - 1), yf(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) {
        xf[k] = x[j];
        yf[k] = y[j];
        ++k;
      }
    }
    const LinearLogFit f = fit_linear_log(xf, yf);
    const double r = y[i] - f.predict(x[i]);
    press += r * r;
  }
  return 1.0 - press / ss_tot;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_scaling_points(const std::filesystem::path& path,
                         std::span<const ScalingPoint> points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "tokens,misalignment\n";
  for (const auto& p : points) {
    out << fmt_double(p.tokens) << ',' << fmt_double(p.misalignment) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<ScalingPoint> load_scaling_points(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty scaling CSV: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "tokens,misalignment") {
    throw std::runtime_error("scaling CSV must start with header 'tokens,misalignment', got '" +
                             line + "'");
  }
  std::vector<ScalingPoint> points;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error("scaling CSV line " + std::to_string(line_no) +
                               ": expected 'tokens,misalignment'");
    }
    ScalingPoint p;
    try {
      std::size_t used = 0;
      p.tokens = std::stod(line.substr(0, comma), &used);
      p.misalignment = std::stod(line.substr(comma + 1), &used);
    } catch (const std::exception&) {
      throw std::runtime_error("scaling CSV line " + std::to_string(line_no) +
                               ": cannot parse numbers in '" + line + "'");
    }
    if (!(p.tokens > 0.0) || !(p.misalignment > 0.0)) {
      throw std::runtime_error("scaling CSV line " + std::to_string(line_no) +
                               ": tokens and misalignment must be positive");
    }
    points.push_back(p);
  }
  return points;
}

namespace {

nlohmann::json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double null_or_number(const nlohmann::json& j) {
  if (j.is_null()) return kNaN;
  return j.get<double>();
}

}  // namespace

void save_scaling_fit(const std::filesystem::path& path, const ScalingFit& fit) {
  nlohmann::json j{{"E", number_or_null(fit.E)},
                   {"B", number_or_null(fit.B)},
                   {"beta", number_or_null(fit.beta)},
                   {"r2_loocv", number_or_null(fit.r2_loocv)},
                   {"tokens_at_5pct", number_or_null(fit.tokens_at_5pct)},
                   {"converged", fit.converged},
                   {"flat", fit.flat}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ScalingFit load_scaling_fit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  ScalingFit fit;
  fit.E = null_or_number(j.at("E"));
  fit.B = null_or_number(j.at("B"));
  fit.beta = null_or_number(j.at("beta"));
  fit.r2_loocv = null_or_number(j.at("r2_loocv"));
  fit.tokens_at_5pct = null_or_number(j.at("tokens_at_5pct"));
  fit.converged = j.at("converged").get<bool>();
  fit.flat = j.at("flat").get<bool>();
  return fit;
}

}  // namespace xmodal
