#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

// Regression machinery for the summary analyses: OLS with fixed effects,
// Type-II analysis of covariance, partial R^2, and leave-one-out R^2.

namespace xmodal {

struct RegressionRow {
  double outcome = 0.0;
  std::map<std::string, double> predictors;
  std::map<std::string, std::string> categorical;  // fixed-effect levels
};

struct RegressionTable {
  std::vector<RegressionRow> rows;

  // Every row must carry the same predictor and categorical keys, and the
  // outcome must take at least 2 distinct values.
  void validate() const;
};

// outcome ~ predictors + fixed effects. Fixed effects are dummy-coded
// against a reference level (the lexicographically first level), which
// Type-II sums of squares do not depend on.
struct Formula {
  std::vector<std::string> predictors;
  std::vector<std::string> fixed_effects;
};

struct OlsFit {
  std::vector<std::string> columns;  // "intercept", predictors, "<fe>=<level>"
  std::vector<double> coefficients;  // aligned with columns
  std::vector<double> fitted;        // per row
  std::vector<double> leverage;      // hat-matrix diagonal per row
  double rss = 0.0;
  int df_resid = 0;
};

// Householder-QR least squares. Throws std::invalid_argument when the
// design matrix is rank deficient, naming the offending column, or when
// there are fewer rows than columns.
OlsFit ols_fit(const RegressionTable& table, const Formula& formula);

struct AncovaTerm {
  std::string term;
  int df = 0;
  double ss = 0.0;
  double ms = 0.0;
  double f = 0.0;
  double p = 0.0;
  double partial_r2 = 0.0;
};

struct AncovaReport {
  std::vector<AncovaTerm> terms;
  int df_resid = 0;
  double ss_resid = 0.0;
  double ms_resid = 0.0;
};

// The per-term arithmetic shared by the full ANCOVA and published-value
// reproductions: MS = SS/df, F = MS/MS_resid, p from the F distribution,
// partial R^2 = SS/(SS + SS_resid).
AncovaTerm ancova_term_from_ss(std::string name, double ss, int df, double ss_resid,
                               int df_resid);

// Type-II decomposition: each term's SS is the RSS increase from removing
// that term (all its dummy columns at once) while keeping every other
// term. Terms are reported in formula order, predictors first.
AncovaReport type2_ancova(const RegressionTable& table, const Formula& formula);

// Leave-one-out R^2 of the linear model, in outcome space. Uses the
// hat-matrix identity e_i/(1 - h_i); when some leverage reaches 1 the
// identity is invalid and the naive per-fold refit runs instead (which
// throws if a fold itself is rank deficient - the statistic is undefined
// in that case). Requires n >= 3.
double loocv_r2_linear(const RegressionTable& table, const Formula& formula);
// Reference implementation refitting n models; the shortcut must match it.
double loocv_r2_linear_naive(const RegressionTable& table, const Formula& formula);

// R^2_cv(controls + focal) - R^2_cv(controls). Focal terms already present
// in the controls are not duplicated, so a fully redundant focal gives 0.
double partial_loocv_r2(const RegressionTable& table, const Formula& focal,
                        const Formula& controls);

// Regularized incomplete beta I_x(a,b) by continued fraction, absolute
// error below 1e-10 for moderate (a, b).
double incomplete_beta(double a, double b, double x);

// P(F > f) for an F distribution with (d1, d2) degrees of freedom.
double f_survival(double f, int d1, int d2);

// CSV loader with declared column roles. The file's first line names the
// columns; fields are comma-separated and must not themselves contain
// commas. Named columns must all exist.
RegressionTable load_regression_csv(const std::filesystem::path& path,
                                    const std::string& outcome,
                                    const std::vector<std::string>& predictors,
                                    const std::vector<std::string>& fixed_effects);

void save_ancova_report(const std::filesystem::path& path, const AncovaReport& report);
AncovaReport load_ancova_report(const std::filesystem::path& path);

// Aligned plain-text rendering: one row per term plus the residual row and
// a partial R^2 footer.
std::string format_ancova_table(const AncovaReport& report);

}  // namespace xmodal
