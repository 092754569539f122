#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace xmodal {

// One observation on the misalignment-vs-budget curve.
struct ScalingPoint {
  double tokens = 0.0;        // training budget D, > 0
  double misalignment = 0.0;  // measured M at that budget, > 0
};

// Saturating power law M(D) = E + B * D^-beta.
//
// fit_scaling fills E/B/beta and the two flags; r2_loocv and tokens_at_5pct
// are left NaN and are computed separately (loocv_r2, tokens_to_within_5pct)
// because they have their own preconditions.
struct ScalingFit {
  double E = 0.0;     // asymptote, >= 0 (exactly 0 when pure power law wins)
  double B = 0.0;     // > 0
  double beta = 0.0;  // > 0, so the curve is strictly decreasing in D
  double r2_loocv = 0.0;
  double tokens_at_5pct = 0.0;
  // False when no refinement start converged; the best candidate is still
  // returned so callers can inspect it.
  bool converged = false;
  // True when the fitted power term is negligible against E everywhere in
  // the data range, i.e. the data is flat and B/beta are not identified.
  bool flat = false;

  double predict(double tokens) const;
};

// Least-squares fit of log M against log(E + B * D^-beta).
//
// Residuals live in log space because misalignment spans decades across
// training budgets. The loss surface is multimodal, so the fit runs a
// damped Gauss-Newton refinement from a grid of starts (beta 0.1..2.0,
// E from fractions of min M) plus an exact pure-power-law candidate
// (E = 0, solved in closed form by linear regression), and keeps the best.
//
// Requires at least 4 points with pairwise-distinct tokens; throws
// std::invalid_argument otherwise or on nonpositive fields.
ScalingFit fit_scaling(std::span<const ScalingPoint> points);

// Budget at which the predicted misalignment falls to 1.05 * E, i.e. the
// solution of E + B * D^-beta = 1.05 * E:  D = (B / (0.05 * E))^(1/beta).
// Throws std::domain_error when E = 0 (a pure power law never gets within
// a relative margin of its asymptote).
double tokens_to_within_5pct(const ScalingFit& fit);

using ScalingFitter = std::function<ScalingFit(std::span<const ScalingPoint>)>;

// Leave-one-out R^2 in log-M space: 1 - PRESS / SStot where each held-out
// prediction comes from refitting without that point. Requires >= 5 points
// and nonzero variance in log M; throws std::invalid_argument otherwise.
double loocv_r2(std::span<const ScalingPoint> points, const ScalingFitter& fitter);
double loocv_r2(std::span<const ScalingPoint> points);  // fitter = fit_scaling

// Simple y = intercept + slope * ln(x) regression with its own LOOCV R^2,
// for score-against-log-misalignment style summaries on a handful of
// points. x must be positive; fit needs >= 3 points, LOOCV >= 5.
struct LinearLogFit {
  double intercept = 0.0;
  double slope = 0.0;

  double predict(double x) const;
};

LinearLogFit fit_linear_log(std::span<const double> x, std::span<const double> y);
double loocv_r2_linear_log(std::span<const double> x, std::span<const double> y);

// CSV with exact header "tokens,misalignment", one point per line.
void save_scaling_points(const std::filesystem::path& path,
                         std::span<const ScalingPoint> points);
std::vector<ScalingPoint> load_scaling_points(const std::filesystem::path& path);

// UTF-8 JSON round-trip of a fit (NaN fields serialize as null).
void save_scaling_fit(const std::filesystem::path& path, const ScalingFit& fit);
ScalingFit load_scaling_fit(const std::filesystem::path& path);

}  // namespace xmodal
