#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xmodal/analysis.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

RegressionTable line_table(const std::vector<double>& x, const std::vector<double>& y) {
  RegressionTable t;
  for (std::size_t i = 0; i < x.size(); ++i) {
    RegressionRow row;
    row.outcome = y[i];
    row.predictors["x"] = x[i];
    t.rows.push_back(std::move(row));
  }
  return t;
}

double rel_err(double got, double want) { return std::fabs(got - want) / std::fabs(want); }

}  // namespace

TEST_CASE("exact line is recovered with zero residual") {
  RegressionTable t = line_table({0, 1, 2, 3, 4}, {3, 5, 7, 9, 11});  // y = 2x + 3
  const OlsFit fit = ols_fit(t, Formula{{"x"}, {}});
  REQUIRE(fit.columns.size() == 2);
  CHECK(fit.columns[0] == "intercept");
  CHECK(fit.columns[1] == "x");
  CHECK(fit.coefficients[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(fit.coefficients[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit.rss < 1e-20);
  CHECK(fit.df_resid == 3);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    CHECK(fit.fitted[i] == doctest::Approx(t.rows[i].outcome).epsilon(1e-12));
  }
}

TEST_CASE("five-point fit matches the hand calculation") {
  // x = {0..4}, y = {1,2,2,3,4}: Sxy/Sxx = 7/10, intercept 2.4 - 0.7*2 = 1,
  // residuals (0, .3, -.4, -.1, .2) so RSS = 0.30. Leverage of point i is
  // 1/5 + (x_i - 2)^2/10 = {.6, .3, .2, .3, .6}.
  RegressionTable t = line_table({0, 1, 2, 3, 4}, {1, 2, 2, 3, 4});
  const OlsFit fit = ols_fit(t, Formula{{"x"}, {}});
  CHECK(fit.coefficients[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(fit.coefficients[1] == doctest::Approx(0.7).epsilon(1e-10));
  CHECK(fit.rss == doctest::Approx(0.30).epsilon(1e-10));
  const std::vector<double> h{0.6, 0.3, 0.2, 0.3, 0.6};
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(fit.leverage[i] == doctest::Approx(h[i]).epsilon(1e-10));
  }
}

TEST_CASE("dummy coding reproduces group means against the first level") {
  RegressionTable t;
  const std::vector<std::pair<std::string, double>> obs{
      {"a", 1.0}, {"a", 1.0}, {"b", 2.0}, {"b", 2.0}, {"c", 4.0}, {"c", 4.0}};
  for (const auto& [level, y] : obs) {
    RegressionRow row;
    row.outcome = y;
    row.categorical["g"] = level;
    t.rows.push_back(std::move(row));
  }
  const OlsFit fit = ols_fit(t, Formula{{}, {"g"}});
  REQUIRE(fit.columns.size() == 3);
  CHECK(fit.columns[1] == "g=b");
  CHECK(fit.columns[2] == "g=c");
  CHECK(fit.coefficients[0] == doctest::Approx(1.0).epsilon(1e-12));  // reference mean
  CHECK(fit.coefficients[1] == doctest::Approx(1.0).epsilon(1e-12));  // b - a
  CHECK(fit.coefficients[2] == doctest::Approx(3.0).epsilon(1e-12));  // c - a
  CHECK(fit.rss < 1e-20);
  CHECK(fit.df_resid == 3);
}

TEST_CASE("rank deficiency names the collinear column") {
  RegressionTable t;
  for (int i = 0; i < 6; ++i) {
    RegressionRow row;
    row.outcome = i;
    row.predictors["x"] = i;
    row.predictors["x_copy"] = i;
    row.predictors["c"] = 5.0;
    t.rows.push_back(std::move(row));
  }
  CHECK_THROWS_WITH_AS(ols_fit(t, Formula{{"x", "x_copy"}, {}}),
                       doctest::Contains("x_copy"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ols_fit(t, Formula{{"c"}, {}}), doctest::Contains("'c'"),
                       std::invalid_argument);

  // more columns than rows
  RegressionTable small;
  for (int i = 0; i < 2; ++i) {
    RegressionRow row;
    row.outcome = i;
    row.predictors["x"] = i;
    row.predictors["z"] = i * i;
    small.rows.push_back(std::move(row));
  }
  CHECK_THROWS_AS(ols_fit(small, Formula{{"x", "z"}, {}}), std::invalid_argument);

  // unknown names
  CHECK_THROWS_AS(ols_fit(t, Formula{{"missing"}, {}}), std::invalid_argument);
  CHECK_THROWS_AS(ols_fit(t, Formula{{}, {"missing"}}), std::invalid_argument);
}

TEST_CASE("table validation rejects inconsistent or degenerate rows") {
  RegressionTable empty;
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);

  RegressionTable constant;
  for (int i = 0; i < 3; ++i) {
    RegressionRow row;
    row.outcome = 1.0;
    row.predictors["x"] = i;
    constant.rows.push_back(std::move(row));
  }
  CHECK_THROWS_AS(constant.validate(), std::invalid_argument);

  RegressionTable ragged = line_table({0, 1, 2}, {0, 1, 2});
  ragged.rows[1].predictors["extra"] = 1.0;
  CHECK_THROWS_AS(ragged.validate(), std::invalid_argument);
}

TEST_CASE("incomplete beta anchors and symmetry") {
  // I_x(1,1) is the identity
  CHECK(incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(incomplete_beta(2.0, 2.0, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  // I_x(1,b) = 1 - (1-x)^b
  CHECK(incomplete_beta(1.0, 3.0, 0.2) ==
        doctest::Approx(1.0 - std::pow(0.8, 3.0)).epsilon(1e-12));

  // symmetry and monotonicity
  for (double x : {0.05, 0.3, 0.7, 0.95}) {
    CHECK(incomplete_beta(2.5, 4.0, x) + incomplete_beta(4.0, 2.5, 1.0 - x) ==
          doctest::Approx(1.0).epsilon(1e-10));
  }
  double prev = -1.0;
  for (double x = 0.05; x < 1.0; x += 0.05) {
    const double v = incomplete_beta(3.0, 2.0, x);
    CHECK(v > prev);
    prev = v;
  }
  CHECK_THROWS_AS(incomplete_beta(0.0, 1.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(incomplete_beta(1.0, -1.0, 0.5), std::invalid_argument);
}

TEST_CASE("F survival matches closed forms") {
  // F(2,2): P(F > f) = 1/(1+f)
  CHECK(f_survival(1.0, 2, 2) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(f_survival(3.0, 2, 2) == doctest::Approx(0.25).epsilon(1e-12));
  // F(2,d2): P(F > f) = (1 + 2f/d2)^(-d2/2); F(2,6), f = 2 -> 27/125
  CHECK(f_survival(2.0, 2, 6) == doctest::Approx(27.0 / 125.0).epsilon(1e-12));
  // F(1,1): P(F > f) = 1 - 2*atan(sqrt(f))/pi
  CHECK(f_survival(4.0, 1, 1) ==
        doctest::Approx(1.0 - 2.0 * std::atan(2.0) / M_PI).epsilon(1e-10));
  // tabulated 5% critical value of F(1,4)
  CHECK(f_survival(7.70864741755, 1, 4) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(f_survival(0.0, 1, 23) == 1.0);
  CHECK_THROWS_AS(f_survival(-1.0, 1, 4), std::invalid_argument);
  CHECK_THROWS_AS(f_survival(1.0, 0, 4), std::invalid_argument);
}

TEST_CASE("F survival matches an independent continued-fraction evaluation") {
  // Reference values computed with an independently written evaluator at
  // the same (f, d1, d2) arguments; agreement to 1e-8 relative.
  const struct {
    double f;
    int d1, d2;
    double p;
  } cases[] = {
      {11.5105241436, 1, 23, 0.002502291407},
      {158.4399504746, 1, 23, 8.467271446e-12},
      {2.3266611638, 4, 23, 0.08665150259},
      {7.9471295060, 1, 23, 0.009733698788},
      {3.1636515354, 4, 23, 0.03285042585},
      {2.0297730307, 1, 23, 0.1676722354},
  };
  for (const auto& c : cases) {
    CHECK(rel_err(f_survival(c.f, c.d1, c.d2), c.p) < 1e-8);
  }
}

TEST_CASE("published covariance decompositions are reproduced from their sums of squares") {
  // Two published three-term decompositions, each with residual df 23. The
  // printed statistics follow from the sums of squares alone, so the
  // per-term arithmetic is checked against them at their printed precision.
  SUBCASE("interleaved-understanding outcome") {
    const double ssr = 5.573;
    const AncovaTerm mis = ancova_term_from_ss("log_misalignment", 2.789, 1, ssr, 23);
    CHECK(mis.ms == doctest::Approx(2.789).epsilon(1e-12));
    CHECK(std::fabs(mis.f - 11.51) < 0.005);
    CHECK(std::fabs(mis.p - 0.0025) < 5e-5);
    CHECK(std::fabs(mis.partial_r2 - 0.334) < 5e-4);

    const AncovaTerm alpha = ancova_term_from_ss("alpha", 2.255, 4, ssr, 23);
    CHECK(alpha.df == 4);
    CHECK(rel_err(alpha.ms, 0.5638) < 1e-4);
    CHECK(std::fabs(alpha.f - 2.327) < 0.005);
    CHECK(std::fabs(alpha.p - 0.0867) < 5e-4);
    CHECK(std::fabs(alpha.partial_r2 - 0.288) < 5e-4);

    const AncovaTerm tokens = ancova_term_from_ss("log_tokens", 38.39, 1, ssr, 23);
    CHECK(std::fabs(tokens.f - 158.4) < 0.05);
    CHECK(tokens.p < 1e-11);
    CHECK(std::fabs(tokens.p - 8.5e-12) < 5e-14);
    CHECK(std::fabs(tokens.partial_r2 - 0.873) < 5e-4);
  }
  SUBCASE("text-retention outcome") {
    const double ssr = 0.749;
    const AncovaTerm forget = ancova_term_from_ss("log_forgetting", 0.2588, 1, ssr, 23);
    CHECK(std::fabs(forget.f - 7.945) < 0.01);
    CHECK(std::fabs(forget.p - 0.0097) < 5e-5);
    CHECK(std::fabs(forget.partial_r2 - 0.257) < 5e-4);

    const AncovaTerm alpha = ancova_term_from_ss("alpha", 0.4121, 4, ssr, 23);
    CHECK(rel_err(alpha.ms, 0.1030) < 1e-3);
    CHECK(std::fabs(alpha.f - 3.163) < 0.005);
    CHECK(std::fabs(alpha.p - 0.0329) < 5e-4);
    CHECK(std::fabs(alpha.partial_r2 - 0.355) < 5e-4);

    const AncovaTerm tokens = ancova_term_from_ss("log_tokens", 0.0661, 1, ssr, 23);
    CHECK(std::fabs(tokens.f - 2.031) < 0.005);
    CHECK(std::fabs(tokens.p - 0.168) < 5e-4);
    CHECK(std::fabs(tokens.partial_r2 - 0.081) < 5e-4);
  }
  SUBCASE("degenerate inputs") {
    CHECK_THROWS_AS(ancova_term_from_ss("t", 1.0, 0, 5.0, 23), std::invalid_argument);
    CHECK_THROWS_AS(ancova_term_from_ss("t", 1.0, 1, 5.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(ancova_term_from_ss("t", -1.0, 1, 5.0, 23), std::invalid_argument);
    // rounding-level negative SS clamps to zero
    const AncovaTerm zero = ancova_term_from_ss("t", -1e-12, 1, 5.0, 23);
    CHECK(zero.ss == 0.0);
    CHECK(zero.p == 1.0);
  }
}

TEST_CASE("balanced one-way decomposition matches the between-group sum of squares") {
  // Groups a {1,2,3}, b {4,5,6}, c {7,8,9}: between SS = 3*(9+0+9) = 54,
  // within RSS = 6, F = (54/2)/(6/6) = 27, and for F(2,6) the survival is
  // (1 + 2*27/6)^-3 = 1/1000 exactly.
  RegressionTable t;
  const char* levels[] = {"a", "b", "c"};
  double y = 1.0;
  for (const char* level : levels) {
    for (int i = 0; i < 3; ++i) {
      RegressionRow row;
      row.outcome = y;
      y += 1.0;
      row.categorical["g"] = level;
      t.rows.push_back(std::move(row));
    }
  }
  const AncovaReport report = type2_ancova(t, Formula{{}, {"g"}});
  REQUIRE(report.terms.size() == 1);
  const AncovaTerm& g = report.terms[0];
  CHECK(g.term == "g");
  CHECK(g.df == 2);
  CHECK(g.ss == doctest::Approx(54.0).epsilon(1e-9));
  CHECK(g.ms == doctest::Approx(27.0).epsilon(1e-9));
  CHECK(g.f == doctest::Approx(27.0).epsilon(1e-9));
  CHECK(g.p == doctest::Approx(0.001).epsilon(1e-9));
  CHECK(g.partial_r2 == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(report.df_resid == 6);
  CHECK(report.ss_resid == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(report.ms_resid == doctest::Approx(1.0).epsilon(1e-9));
}

namespace {

// y = 1 + 2 x1 - x2 + group effect + bounded noise, with a deterministic
// generator so every run sees the same table.
RegressionTable synthetic_table(std::uint64_t seed, double noise = 0.3) {
  Rng rng(seed);
  const char* levels[] = {"lo", "mid", "hi"};
  const double effect[] = {0.0, 0.8, -0.5};
  RegressionTable t;
  for (int i = 0; i < 24; ++i) {
    RegressionRow row;
    const int g = i % 3;
    const double x1 = rng.normal(0.0, 1.0);
    const double x2 = rng.normal(0.0, 1.0);
    row.predictors["x1"] = x1;
    row.predictors["x2"] = x2;
    row.categorical["g"] = levels[g];
    row.outcome = 1.0 + 2.0 * x1 - x2 + effect[g] + noise * rng.normal(0.0, 1.0);
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace

TEST_CASE("type-II decomposition satisfies its defining identities") {
  const RegressionTable t = synthetic_table(1001);
  const Formula formula{{"x1", "x2"}, {"g"}};
  const AncovaReport report = type2_ancova(t, formula);
  const OlsFit full = ols_fit(t, formula);

  REQUIRE(report.terms.size() == 3);
  CHECK(report.df_resid == 24 - 5);
  CHECK(report.ss_resid == doctest::Approx(full.rss).epsilon(1e-12));

  for (const auto& term : report.terms) {
    CHECK(term.ms == doctest::Approx(term.ss / term.df).epsilon(1e-12));
    CHECK(term.f == doctest::Approx(term.ms / report.ms_resid).epsilon(1e-12));
    CHECK(term.p == doctest::Approx(f_survival(term.f, term.df, report.df_resid))
                        .epsilon(1e-12));
    CHECK(term.partial_r2 ==
          doctest::Approx(term.ss / (term.ss + report.ss_resid)).epsilon(1e-12));
    CHECK(term.ss >= 0.0);
  }
  CHECK(report.terms[0].term == "x1");
  CHECK(report.terms[0].df == 1);
  CHECK(report.terms[2].term == "g");
  CHECK(report.terms[2].df == 2);

  // each SS really is the residual increase from dropping that term
  const OlsFit no_x1 = ols_fit(t, Formula{{"x2"}, {"g"}});
  CHECK(report.terms[0].ss == doctest::Approx(no_x1.rss - full.rss).epsilon(1e-10));
  const OlsFit no_g = ols_fit(t, Formula{{"x1", "x2"}, {}});
  CHECK(report.terms[2].ss == doctest::Approx(no_g.rss - full.rss).epsilon(1e-10));

  // the informative predictors dominate the uninformative grouping's p
  CHECK(report.terms[0].p < 1e-6);
}

TEST_CASE("type-II sums of squares ignore level labels and term order") {
  RegressionTable t = synthetic_table(2002);
  const AncovaReport base = type2_ancova(t, Formula{{"x1", "x2"}, {"g"}});

  // relabel so a different level becomes the coding reference
  RegressionTable relabeled = t;
  for (auto& row : relabeled.rows) {
    std::string& g = row.categorical["g"];
    if (g == "lo") {
      g = "zz";
    } else if (g == "hi") {
      g = "aa";
    }
  }
  const AncovaReport renamed = type2_ancova(relabeled, Formula{{"x1", "x2"}, {"g"}});
  REQUIRE(renamed.terms.size() == base.terms.size());
  for (std::size_t i = 0; i < base.terms.size(); ++i) {
    CHECK(renamed.terms[i].ss == doctest::Approx(base.terms[i].ss).epsilon(1e-9));
    CHECK(renamed.terms[i].f == doctest::Approx(base.terms[i].f).epsilon(1e-9));
  }

  // swapping predictor order permutes the rows but not the values
  const AncovaReport swapped = type2_ancova(t, Formula{{"x2", "x1"}, {"g"}});
  CHECK(swapped.terms[0].term == "x2");
  CHECK(swapped.terms[0].ss == doctest::Approx(base.terms[1].ss).epsilon(1e-9));
  CHECK(swapped.terms[1].ss == doctest::Approx(base.terms[0].ss).epsilon(1e-9));

  CHECK_THROWS_AS(type2_ancova(t, Formula{{}, {}}), std::invalid_argument);
}

TEST_CASE("loocv shortcut equals the explicit refits") {
  SUBCASE("perfect line") {
    RegressionTable t = line_table({0, 1, 2, 3, 4}, {3, 5, 7, 9, 11});
    CHECK(loocv_r2_linear(t, Formula{{"x"}, {}}) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("hand-worked five points") {
    // Same folds as the companion log-space check: PRESS = 69/98,
    // SStot = 26/5, R2 = 2203/2548.
    RegressionTable t = line_table({0, 1, 2, 3, 4}, {1, 2, 2, 3, 4});
    const Formula f{{"x"}, {}};
    CHECK(loocv_r2_linear(t, f) == doctest::Approx(2203.0 / 2548.0).epsilon(1e-12));
    CHECK(loocv_r2_linear_naive(t, f) == doctest::Approx(2203.0 / 2548.0).epsilon(1e-12));
  }
  SUBCASE("mixed design") {
    const RegressionTable t = synthetic_table(3003);
    const Formula f{{"x1", "x2"}, {"g"}};
    CHECK(loocv_r2_linear(t, f) ==
          doctest::Approx(loocv_r2_linear_naive(t, f)).epsilon(1e-10));
    CHECK(loocv_r2_linear(t, f) > 0.8);  // strong signal, mild noise
  }
  SUBCASE("too few rows") {
    RegressionTable t = line_table({0, 1}, {0, 1});
    CHECK_THROWS_AS(loocv_r2_linear(t, Formula{{"x"}, {}}), std::invalid_argument);
  }
}

TEST_CASE("unrelated predictors cross-validate at or below zero") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    RegressionTable t;
    for (int i = 0; i < 16; ++i) {
      RegressionRow row;
      row.predictors["x"] = rng.normal(0.0, 1.0);
      row.outcome = rng.normal(0.0, 1.0);
      t.rows.push_back(std::move(row));
    }
    CHECK(loocv_r2_linear(t, Formula{{"x"}, {}}) <= 0.0);
  }
}

TEST_CASE("unit leverage falls back to explicit refits") {
  // A single-member level gives that row leverage 1: the shortcut formula
  // divides by zero there, but the per-fold refit is still defined (the
  // fold simply never sees the level).
  RegressionTable t;
  const char* levels[] = {"only", "a", "a", "b", "b", "a", "b"};
  const double ys[] = {5.0, 1.0, 1.5, 3.0, 3.5, 0.5, 2.5};
  for (int i = 0; i < 7; ++i) {
    RegressionRow row;
    row.outcome = ys[i];
    row.categorical["g"] = levels[i];
    t.rows.push_back(std::move(row));
  }
  const Formula f{{}, {"g"}};
  const OlsFit fit = ols_fit(t, f);
  CHECK(fit.leverage[0] == doctest::Approx(1.0).epsilon(1e-12));
  const double cv = loocv_r2_linear(t, f);
  CHECK(std::isfinite(cv));
  CHECK(cv == doctest::Approx(loocv_r2_linear_naive(t, f)).epsilon(1e-12));

  // With x = {0,1,1} the first fold's predictor is constant, so the
  // fallback refit is rank deficient and the statistic is undefined.
  RegressionTable bad = line_table({0, 1, 1}, {1, 2, 3});
  CHECK_THROWS_AS(loocv_r2_linear(bad, Formula{{"x"}, {}}), std::invalid_argument);
}

TEST_CASE("partial cross-validated R2") {
  const RegressionTable t = synthetic_table(4004);
  const Formula controls{{"x2"}, {"g"}};

  SUBCASE("redundant focal contributes exactly zero") {
    CHECK(partial_loocv_r2(t, Formula{{"x2"}, {}}, controls) == 0.0);
    CHECK(partial_loocv_r2(t, Formula{{}, {"g"}}, controls) == 0.0);
  }
  SUBCASE("outcome-as-focal saturates the full model") {
    RegressionTable leak = t;
    for (auto& row : leak.rows) row.predictors["y_copy"] = row.outcome;
    const double partial = partial_loocv_r2(leak, Formula{{"y_copy"}, {}}, controls);
    const double controls_only = loocv_r2_linear(leak, controls);
    CHECK(partial == doctest::Approx(1.0 - controls_only).epsilon(1e-9));
  }
  SUBCASE("informative focal helps, and noise erodes it") {
    const double strong = partial_loocv_r2(t, Formula{{"x1"}, {}}, controls);
    CHECK(strong > 0.3);
    const RegressionTable noisy = synthetic_table(4004, 3.0);
    const double weak = partial_loocv_r2(noisy, Formula{{"x1"}, {}}, controls);
    CHECK(weak < strong);
  }
}

TEST_CASE("regression CSV loads declared roles") {
  const auto dir = std::filesystem::temp_directory_path() / "xmodal_analysis_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "rows.csv";
  {
    std::ofstream out(path);
    out << "alpha,misalignment,tokens,run\r\n";
    out << "0.5,0.31,1e8,a\n";
    out << "0.25,0.62,2e8,b\n";
    out << "\n";
    out << "1,0.18,4e8,a\n";
  }
  const RegressionTable t = load_regression_csv(path, "misalignment", {"alpha", "tokens"},
                                                {"run"});
  REQUIRE(t.rows.size() == 3);
  CHECK(t.rows[0].outcome == doctest::Approx(0.31).epsilon(1e-12));
  CHECK(t.rows[1].predictors.at("alpha") == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.rows[2].predictors.at("tokens") == doctest::Approx(4e8).epsilon(1e-12));
  CHECK(t.rows[2].categorical.at("run") == "a");

  CHECK_THROWS_WITH_AS(load_regression_csv(path, "absent", {}, {}),
                       doctest::Contains("absent"), std::runtime_error);
  CHECK_THROWS_AS(load_regression_csv(dir / "missing.csv", "misalignment", {}, {}),
                  std::runtime_error);

  const auto ragged = dir / "ragged.csv";
  {
    std::ofstream out(ragged);
    out << "y,x\n1,2\n3\n";
  }
  CHECK_THROWS_AS(load_regression_csv(ragged, "y", {"x"}, {}), std::runtime_error);

  const auto text = dir / "text.csv";
  {
    std::ofstream out(text);
    out << "y,x\n1,notanumber\n2,3\n";
  }
  CHECK_THROWS_AS(load_regression_csv(text, "y", {"x"}, {}), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ancova report round-trips through JSON") {
  const RegressionTable t = synthetic_table(5005);
  const AncovaReport report = type2_ancova(t, Formula{{"x1", "x2"}, {"g"}});

  const auto dir = std::filesystem::temp_directory_path() / "xmodal_analysis_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "report.json";
  save_ancova_report(path, report);
  const AncovaReport back = load_ancova_report(path);

  REQUIRE(back.terms.size() == report.terms.size());
  for (std::size_t i = 0; i < report.terms.size(); ++i) {
    CHECK(back.terms[i].term == report.terms[i].term);
    CHECK(back.terms[i].df == report.terms[i].df);
    CHECK(back.terms[i].ss == report.terms[i].ss);
    CHECK(back.terms[i].ms == report.terms[i].ms);
    CHECK(back.terms[i].f == report.terms[i].f);
    CHECK(back.terms[i].p == report.terms[i].p);
    CHECK(back.terms[i].partial_r2 == report.terms[i].partial_r2);
  }
  CHECK(back.df_resid == report.df_resid);
  CHECK(back.ss_resid == report.ss_resid);
  CHECK(back.ms_resid == report.ms_resid);
  std::filesystem::remove_all(dir);
}

TEST_CASE("formatted table lists terms, residual row, and partial R2") {
  const RegressionTable t = synthetic_table(6006);
  const AncovaReport report = type2_ancova(t, Formula{{"x1"}, {"g"}});
  const std::string text = format_ancova_table(report);
  CHECK(text.find("Term") != std::string::npos);
  CHECK(text.find("x1") != std::string::npos);
  CHECK(text.find("g") != std::string::npos);
  CHECK(text.find("Residual") != std::string::npos);
  CHECK(text.find("Partial R^2:") != std::string::npos);
  // one header + one row per term + residual + footer
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        static_cast<long>(report.terms.size()) + 3);
}
