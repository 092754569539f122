#include "xmodal/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace xmodal {

void RegressionTable::validate() const {
  if (rows.empty()) throw std::invalid_argument("regression table has no rows");
  const auto& first = rows.front();
  std::set<double> outcomes;
  for (const auto& row : rows) {
    outcomes.insert(row.outcome);
    if (!std::isfinite(row.outcome)) {
      throw std::invalid_argument("regression outcome must be finite");
    }
    if (row.predictors.size() != first.predictors.size() ||
        row.categorical.size() != first.categorical.size()) {
      throw std::invalid_argument("regression rows carry inconsistent columns");
    }
    for (const auto& [k, v] : row.predictors) {
      if (!first.predictors.count(k)) {
        throw std::invalid_argument("regression rows carry inconsistent predictor '" + k + "'");
      }
      if (!std::isfinite(v)) {
        throw std::invalid_argument("regression predictor '" + k + "' must be finite");
      }
    }
    for (const auto& [k, v] : row.categorical) {
      (void)v;
      if (!first.categorical.count(k)) {
        throw std::invalid_argument("regression rows carry inconsistent fixed effect '" + k +
                                    "'");
      }
    }
  }
  if (outcomes.size() < 2) {
    throw std::invalid_argument("regression outcome must take at least 2 distinct values");
  }
}

namespace {

// Dense design matrix with named columns: intercept, numeric predictors,
// then reference-coded dummies for each fixed effect.
struct Design {
  std::vector<std::string> columns;
  std::vector<double> x;  // n x p row-major
  std::vector<double> y;
  std::size_t n = 0;
  std::size_t p = 0;
};

Design build_design(const RegressionTable& table, const Formula& formula) {
  table.validate();
  const auto& first = table.rows.front();

  Design d;
  d.n = table.rows.size();
  d.columns.push_back("intercept");
  for (const auto& name : formula.predictors) {
    if (!first.predictors.count(name)) {
      throw std::invalid_argument("formula names unknown predictor '" + name + "'");
    }
    d.columns.push_back(name);
  }
  // level -> dummy column, skipping the lexicographically first level
  struct FeCoding {
    std::string name;
    std::map<std::string, std::size_t> column_of_level;  // absent for reference
  };
  std::vector<FeCoding> codings;
  for (const auto& name : formula.fixed_effects) {
    if (!first.categorical.count(name)) {
      throw std::invalid_argument("formula names unknown fixed effect '" + name + "'");
    }
    std::set<std::string> levels;
    for (const auto& row : table.rows) levels.insert(row.categorical.at(name));
    FeCoding coding;
    coding.name = name;
    bool reference = true;
    for (const auto& level : levels) {
      if (reference) {
        reference = false;
        continue;
      }
      coding.column_of_level[level] = d.columns.size();
      d.columns.push_back(name + "=" + level);
    }
    codings.push_back(std::move(coding));
  }

  d.p = d.columns.size();
  d.x.assign(d.n * d.p, 0.0);
  d.y.resize(d.n);
  for (std::size_t i = 0; i < d.n; ++i) {
    const auto& row = table.rows[i];
    d.y[i] = row.outcome;
    double* xi = d.x.data() + i * d.p;
    xi[0] = 1.0;
    for (std::size_t j = 0; j < formula.predictors.size(); ++j) {
      xi[1 + j] = row.predictors.at(formula.predictors[j]);
    }
    for (const auto& coding : codings) {
      const auto it = coding.column_of_level.find(row.categorical.at(coding.name));
      if (it != coding.column_of_level.end()) xi[it->second] = 1.0;
    }
  }
  return d;
}

// Householder QR with per-column relative rank checks. Matrix `a` ends up
// holding R on and above the diagonal and the reflector tails below it; the
// leading element of each reflector lives in `vk` since R_kk displaces it.
struct QrWork {
  struct {
    std::vector<double> a;    // n x p row-major
    std::vector<double> tau;  // reflector scales 2/||v||^2
    std::size_t n = 0, p = 0;
  } f;
  std::vector<double> vk;
};

QrWork qr_build(const Design& d) {
  if (d.n < d.p) {
    throw std::invalid_argument("design matrix has more columns (" + std::to_string(d.p) +
                                ") than rows (" + std::to_string(d.n) + ")");
  }
  QrWork w;
  w.f.a = d.x;
  w.f.tau.assign(d.p, 0.0);
  w.f.n = d.n;
  w.f.p = d.p;
  w.vk.assign(d.p, 0.0);

  std::vector<double> col_norm(d.p, 0.0);
  for (std::size_t j = 0; j < d.p; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.n; ++i) s += w.f.a[i * d.p + j] * w.f.a[i * d.p + j];
    col_norm[j] = std::sqrt(s);
  }

  for (std::size_t k = 0; k < d.p; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < d.n; ++i) norm += w.f.a[i * d.p + k] * w.f.a[i * d.p + k];
    norm = std::sqrt(norm);
    if (norm <= 1e-10 * std::max(col_norm[k], 1e-30)) {
      throw std::invalid_argument("design matrix is rank deficient: column '" + d.columns[k] +
                                  "' is collinear with the preceding columns");
    }
    const double akk = w.f.a[k * d.p + k];
    const double alpha = akk >= 0.0 ? -norm : norm;
    const double vk = akk - alpha;
    double vnorm2 = vk * vk;
    for (std::size_t i = k + 1; i < d.n; ++i) {
      vnorm2 += w.f.a[i * d.p + k] * w.f.a[i * d.p + k];
    }
    w.f.tau[k] = vnorm2 > 0.0 ? 2.0 / vnorm2 : 0.0;
    w.vk[k] = vk;

    for (std::size_t j = k + 1; j < d.p; ++j) {
      double dot = vk * w.f.a[k * d.p + j];
      for (std::size_t i = k + 1; i < d.n; ++i) {
        dot += w.f.a[i * d.p + k] * w.f.a[i * d.p + j];
      }
      const double scale = w.f.tau[k] * dot;
      w.f.a[k * d.p + j] -= scale * vk;
      for (std::size_t i = k + 1; i < d.n; ++i) {
        w.f.a[i * d.p + j] -= scale * w.f.a[i * d.p + k];
      }
    }
    w.f.a[k * d.p + k] = alpha;
  }
  return w;
}

void apply_qt(const QrWork& w, std::vector<double>& v) {
  const std::size_t n = w.f.n, p = w.f.p;
  for (std::size_t k = 0; k < p; ++k) {
    double dot = w.vk[k] * v[k];
    for (std::size_t i = k + 1; i < n; ++i) dot += w.f.a[i * p + k] * v[i];
    const double scale = w.f.tau[k] * dot;
    v[k] -= scale * w.vk[k];
    for (std::size_t i = k + 1; i < n; ++i) v[i] -= scale * w.f.a[i * p + k];
  }
}

std::vector<double> solve_upper(const QrWork& w, const std::vector<double>& rhs) {
  const std::size_t p = w.f.p;
  std::vector<double> beta(p);
  for (std::size_t r = p; r-- > 0;) {
    double v = rhs[r];
    for (std::size_t c = r + 1; c < p; ++c) v -= w.f.a[r * p + c] * beta[c];
    beta[r] = v / w.f.a[r * p + r];
  }
  return beta;
}

// h_i = || R^-T x_i ||^2 via forward substitution on R^T.
double leverage_of(const QrWork& w, const double* xi) {
  const std::size_t p = w.f.p;
  std::vector<double> z(p);
  for (std::size_t r = 0; r < p; ++r) {
    double v = xi[r];
    for (std::size_t c = 0; c < r; ++c) v -= w.f.a[c * p + r] * z[c];
    z[r] = v / w.f.a[r * p + r];
  }
  double h = 0.0;
  for (double zi : z) h += zi * zi;
  return h;
}

OlsFit fit_design(const Design& d) {
  const QrWork w = qr_build(d);
  std::vector<double> qty = d.y;
  apply_qt(w, qty);
  qty.resize(d.p);

  OlsFit fit;
  fit.columns = d.columns;
  fit.coefficients = solve_upper(w, qty);
  fit.df_resid = static_cast<int>(d.n) - static_cast<int>(d.p);
  fit.fitted.resize(d.n);
  fit.leverage.resize(d.n);
  fit.rss = 0.0;
  for (std::size_t i = 0; i < d.n; ++i) {
    const double* xi = d.x.data() + i * d.p;
    double yhat = 0.0;
    for (std::size_t j = 0; j < d.p; ++j) yhat += xi[j] * fit.coefficients[j];
    fit.fitted[i] = yhat;
    const double e = d.y[i] - yhat;
    fit.rss += e * e;
    fit.leverage[i] = leverage_of(w, xi);
  }
  return fit;
}

}  // namespace

OlsFit ols_fit(const RegressionTable& table, const Formula& formula) {
  return fit_design(build_design(table, formula));
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw std::invalid_argument("incomplete_beta: a and b must be positive");
  }
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;

  // Lentz continued fraction for the convergent region, with the symmetry
  // I_x(a,b) = 1 - I_{1-x}(b,a) to cover the rest.
  const auto cf = [](double aa, double bb, double xx) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 3e-16;
    const double qab = aa + bb, qap = aa + 1.0, qam = aa - 1.0;
    double c = 1.0;
    double dd = 1.0 - qab * xx / qap;
    if (std::fabs(dd) < kTiny) dd = kTiny;
    dd = 1.0 / dd;
    double h = dd;
    for (int m = 1; m <= 300; ++m) {
      const double m2 = 2.0 * m;
      double an = m * (bb - m) * xx / ((qam + m2) * (aa + m2));
      dd = 1.0 + an * dd;
      if (std::fabs(dd) < kTiny) dd = kTiny;
      c = 1.0 + an / c;
      if (std::fabs(c) < kTiny) c = kTiny;
      dd = 1.0 / dd;
      h *= dd * c;
      an = -(aa + m) * (qab + m) * xx / ((aa + m2) * (qap + m2));
      dd = 1.0 + an * dd;
      if (std::fabs(dd) < kTiny) dd = kTiny;
      c = 1.0 + an / c;
      if (std::fabs(c) < kTiny) c = kTiny;
      dd = 1.0 / dd;
      const double delta = dd * c;
      h *= delta;
      if (std::fabs(delta - 1.0) < kEps) break;
    }
    return h;
  };

  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * cf(a, b, x) / a;
  }
  return 1.0 - front * cf(b, a, 1.0 - x) / b;
}

double f_survival(double f, int d1, int d2) {
  if (d1 < 1 || d2 < 1) throw std::invalid_argument("f_survival: degrees of freedom must be >= 1");
  if (!(f >= 0.0)) throw std::invalid_argument("f_survival: statistic must be >= 0");
  const double x = d2 / (d2 + d1 * f);
  return incomplete_beta(0.5 * d2, 0.5 * d1, x);
}

AncovaTerm ancova_term_from_ss(std::string name, double ss, int df, double ss_resid,
                               int df_resid) {
  if (df < 1 || df_resid < 1) {
    throw std::invalid_argument("ancova term '" + name + "': degrees of freedom must be >= 1");
  }
  if (ss < 0.0) {
    // RSS differences can go a hair negative through rounding; clamp tiny
    // negatives, reject real ones.
    if (ss < -1e-9) {
      throw std::invalid_argument("ancova term '" + name + "': negative sum of squares");
    }
    ss = 0.0;
  }
  AncovaTerm term;
  term.term = std::move(name);
  term.df = df;
  term.ss = ss;
  term.ms = ss / df;
  const double ms_resid = ss_resid / df_resid;
  term.f = term.ms / ms_resid;
  term.p = f_survival(term.f, df, df_resid);
  term.partial_r2 = ss / (ss + ss_resid);
  return term;
}

AncovaReport type2_ancova(const RegressionTable& table, const Formula& formula) {
  if (formula.predictors.empty() && formula.fixed_effects.empty()) {
    throw std::invalid_argument("type2_ancova: formula has no terms");
  }
  const OlsFit full = ols_fit(table, formula);
  if (full.df_resid < 1) {
    throw std::invalid_argument("type2_ancova: no residual degrees of freedom");
  }

  AncovaReport report;
  report.df_resid = full.df_resid;
  report.ss_resid = full.rss;
  report.ms_resid = full.rss / full.df_resid;

  const auto dropped = [&](const std::string& name, bool is_fe) {
    Formula reduced = formula;
    auto& list = is_fe ? reduced.fixed_effects : reduced.predictors;
    list.erase(std::remove(list.begin(), list.end(), name), list.end());
    return reduced;
  };
  const auto add_term = [&](const std::string& name, bool is_fe) {
    const OlsFit reduced = ols_fit(table, dropped(name, is_fe));
    const int df_term = reduced.df_resid - full.df_resid;
    if (df_term < 1) {
      throw std::invalid_argument("type2_ancova: term '" + name +
                                  "' contributes no columns (single-level fixed effect?)");
    }
    report.terms.push_back(ancova_term_from_ss(name, reduced.rss - full.rss, df_term,
                                               full.rss, full.df_resid));
  };
  for (const auto& name : formula.predictors) add_term(name, false);
  for (const auto& name : formula.fixed_effects) add_term(name, true);
  return report;
}

double loocv_r2_linear_naive(const RegressionTable& table, const Formula& formula) {
  table.validate();
  const std::size_t n = table.rows.size();
  if (n < 3) throw std::invalid_argument("loocv needs at least 3 rows");

  double mean = 0.0;
  for (const auto& row : table.rows) mean += row.outcome;
  mean /= static_cast<double>(n);
  double ss_tot = 0.0;
  for (const auto& row : table.rows) {
    ss_tot += (row.outcome - mean) * (row.outcome - mean);
  }

  double press = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    RegressionTable fold;
    fold.rows.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) fold.rows.push_back(table.rows[j]);
    }
    const OlsFit fit = ols_fit(fold, formula);
    // predict the held-out row against the fold's own coding; a level the
    // fold never saw simply contributes no dummy (reference-level behavior)
    double pred = fit.coefficients[0];
    for (std::size_t c = 1; c < fit.columns.size(); ++c) {
      const std::string& col = fit.columns[c];
      const auto eq = col.find('=');
      if (eq == std::string::npos) {
        pred += fit.coefficients[c] * table.rows[i].predictors.at(col);
      } else {
        const std::string fe = col.substr(0, eq);
        const std::string level = col.substr(eq + 1);
        if (table.rows[i].categorical.at(fe) == level) pred += fit.coefficients[c];
      }
    }
    const double e = table.rows[i].outcome - pred;
    press += e * e;
  }
  return 1.0 - press / ss_tot;
}

double loocv_r2_linear(const RegressionTable& table, const Formula& formula) {
  table.validate();
  if (table.rows.size() < 3) throw std::invalid_argument("loocv needs at least 3 rows");
  const OlsFit fit = ols_fit(table, formula);

  for (double h : fit.leverage) {
    if (h >= 1.0 - 1e-10) {
      // deleting such a point changes the fit's span; the shortcut formula
      // divides by zero, so fall back to explicit refits
      return loocv_r2_linear_naive(table, formula);
    }
  }

  const std::size_t n = table.rows.size();
  double mean = 0.0;
  for (const auto& row : table.rows) mean += row.outcome;
  mean /= static_cast<double>(n);
  double ss_tot = 0.0, press = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = table.rows[i].outcome;
    ss_tot += (y - mean) * (y - mean);
    const double e = (y - fit.fitted[i]) / (1.0 - fit.leverage[i]);
    press += e * e;
  }
  if (ss_tot <= 0.0) throw std::invalid_argument("loocv: zero outcome variance");
  return 1.0 - press / ss_tot;
}

namespace {

Formula merge_formulas(const Formula& focal, const Formula& controls) {
  Formula full = controls;
  for (const auto& name : focal.predictors) {
    if (std::find(full.predictors.begin(), full.predictors.end(), name) ==
        full.predictors.end()) {
      full.predictors.push_back(name);
    }
  }
  for (const auto& name : focal.fixed_effects) {
    if (std::find(full.fixed_effects.begin(), full.fixed_effects.end(), name) ==
        full.fixed_effects.end()) {
      full.fixed_effects.push_back(name);
    }
  }
  return full;
}

}  // namespace

double partial_loocv_r2(const RegressionTable& table, const Formula& focal,
                        const Formula& controls) {
  const Formula full = merge_formulas(focal, controls);
  return loocv_r2_linear(table, full) - loocv_r2_linear(table, controls);
}

RegressionTable load_regression_csv(const std::filesystem::path& path,
                                    const std::string& outcome,
                                    const std::vector<std::string>& predictors,
                                    const std::vector<std::string>& fixed_effects) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      if (comma == std::string::npos) {
        out.push_back(s.substr(start));
        break;
      }
      out.push_back(s.substr(start, comma - start));
      start = comma + 1;
    }
    return out;
  };

  const std::vector<std::string> header = split(line);
  const auto index_of = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw std::runtime_error("CSV " + path.string() + " lacks column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };

  const std::size_t outcome_idx = index_of(outcome);
  std::vector<std::pair<std::string, std::size_t>> pred_idx, fe_idx;
  for (const auto& name : predictors) pred_idx.emplace_back(name, index_of(name));
  for (const auto& name : fixed_effects) fe_idx.emplace_back(name, index_of(name));

  RegressionTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error("CSV line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields");
    }
    RegressionRow row;
    try {
      row.outcome = std::stod(fields[outcome_idx]);
      for (const auto& [name, idx] : pred_idx) row.predictors[name] = std::stod(fields[idx]);
    } catch (const std::exception&) {
      throw std::runtime_error("CSV line " + std::to_string(line_no) +
                               ": cannot parse numeric field");
    }
    for (const auto& [name, idx] : fe_idx) row.categorical[name] = fields[idx];
    table.rows.push_back(std::move(row));
  }
  table.validate();
  return table;
}

using nlohmann::json;

void save_ancova_report(const std::filesystem::path& path, const AncovaReport& report) {
  json terms = json::array();
  for (const auto& t : report.terms) {
    terms.push_back(json{{"term", t.term},
                         {"df", t.df},
                         {"ss", t.ss},
                         {"ms", t.ms},
                         {"f", t.f},
                         {"p", t.p},
                         {"partial_r2", t.partial_r2}});
  }
  json j{{"terms", std::move(terms)},
         {"df_resid", report.df_resid},
         {"ss_resid", report.ss_resid},
         {"ms_resid", report.ms_resid}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

AncovaReport load_ancova_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(in);
  AncovaReport report;
  for (const json& t : j.at("terms")) {
    AncovaTerm term;
    term.term = t.at("term").get<std::string>();
    term.df = t.at("df").get<int>();
    term.ss = t.at("ss").get<double>();
    term.ms = t.at("ms").get<double>();
    term.f = t.at("f").get<double>();
    term.p = t.at("p").get<double>();
    term.partial_r2 = t.at("partial_r2").get<double>();
    report.terms.push_back(std::move(term));
  }
  report.df_resid = j.at("df_resid").get<int>();
  report.ss_resid = j.at("ss_resid").get<double>();
  report.ms_resid = j.at("ms_resid").get<double>();
  return report;
}

std::string format_ancova_table(const AncovaReport& report) {
  std::size_t name_w = 8;  // "Residual"
  for (const auto& t : report.terms) name_w = std::max(name_w, t.term.size());

  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-*s %4s %10s %10s %8s %10s\n",
                static_cast<int>(name_w), "Term", "df", "SS", "MS", "F", "p");
  out << buf;
  for (const auto& t : report.terms) {
    std::snprintf(buf, sizeof(buf), "%-*s %4d %10.4g %10.4g %8.4g %10.3g\n",
                  static_cast<int>(name_w), t.term.c_str(), t.df, t.ss, t.ms, t.f, t.p);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-*s %4d %10.4g %10.4g %8s %10s\n",
                static_cast<int>(name_w), "Residual", report.df_resid, report.ss_resid,
                report.ms_resid, "--", "--");
  out << buf;
  out << "Partial R^2:";
  for (const auto& t : report.terms) {
    std::snprintf(buf, sizeof(buf), " %s=%.3g", t.term.c_str(), t.partial_r2);
    out << buf;
  }
  out << '\n';
  return out.str();
}

}  // namespace xmodal
