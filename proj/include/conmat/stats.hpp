#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "conmat/metrics.hpp"
#include "conmat/util.hpp"

namespace conmat {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-15;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < eps) return h;
  }
  throw NumericError("incomplete beta: continued fraction did not converge");
}

// I_x(a, b)
inline double incomplete_beta(double a, double b, double x) {
  if (a <= 0 || b <= 0) throw ValueError("incomplete beta: a, b must be positive");
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_cf(a, b, x) / a;
  return 1 - front * beta_cf(b, a, 1 - x) / b;
}

// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_p_two_sided(double t, double df) {
  if (df <= 0) throw ValueError("t distribution: df must be positive");
  if (std::isinf(t)) return 0;
  return incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0, p = 1;
  std::size_t df = 0;
  double mean_diff = 0;
  bool significant(double alpha = 0.05) const { return p < alpha; }
};

// Paired test on d = a - b.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValueError("t-test: fold counts differ (" + std::to_string(a.size()) + " vs " +
                                             std::to_string(b.size()) + ")");
  if (a.size() < 2) throw ValueError("t-test: need at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  TTestResult r;
  r.df = d.size() - 1;
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return r;
  r.mean_diff = mean_of(d);
  const double sd = sample_std(d);
  if (sd == 0) throw ValueError("t-test: differences have zero variance");
  r.t = r.mean_diff / (sd / std::sqrt(static_cast<double>(d.size())));
  r.p = student_t_p_two_sided(r.t, static_cast<double>(r.df));
  return r;
}

// ---------------------------------------------------------------------------
// Cross-validation summary

struct CvSummary {
  std::vector<std::string> metrics;                // column order
  std::vector<std::map<std::string, double>> folds;
  std::vector<std::string> checksums;

  std::vector<double> column(const std::string& m) const {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.at(m));
    return v;
  }
  double mean(const std::string& m) const { return mean_of(column(m)); }
  double std_dev(const std::string& m) const { return sample_std(column(m)); }

  void add_fold(const EvalReport& r, const std::string& checksum) {
    if (metrics.empty()) metrics = {"accuracy", "macro_precision", "macro_recall", "macro_f1"};
    folds.push_back({{"accuracy", r.accuracy},
                     {"macro_precision", r.macro_precision},
                     {"macro_recall", r.macro_recall},
                     {"macro_f1", r.macro_f1}});
    checksums.push_back(checksum);
  }
};

inline void write_cv_csv(std::ostream& os, const CvSummary& s) {
  os << "fold";
  for (const auto& m : s.metrics) os << ',' << m;
  os << ",checksum\n";
  for (std::size_t i = 0; i < s.folds.size(); ++i) {
    os << i;
    for (const auto& m : s.metrics) os << ',' << fmt_double(s.folds[i].at(m));
    os << ',' << (i < s.checksums.size() ? s.checksums[i] : "") << '\n';
  }
  os << "mean";
  for (const auto& m : s.metrics) os << ',' << fmt_double(s.mean(m));
  os << ",\nstd";
  for (const auto& m : s.metrics) os << ',' << fmt_double(s.std_dev(m));
  os << ",\n";
}

// Reads the per-fold rows of a cv CSV (mean/std rows are skipped).
inline CvSummary read_cv_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto head = split(trim(line), ',');
  if (head.empty() || head[0] != "fold") throw DataError(path + ": missing 'fold' header");
  CvSummary s;
  for (std::size_t i = 1; i < head.size(); ++i)
    if (head[i] != "checksum") s.metrics.push_back(head[i]);
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells[0] == "mean" || cells[0] == "std") continue;
    if (cells.size() != head.size()) throw DataError(path + ": ragged row '" + line + "'");
    std::map<std::string, double> row;
    for (std::size_t i = 1; i < head.size(); ++i) {
      if (head[i] == "checksum") {
        s.checksums.push_back(cells[i]);
        continue;
      }
      try {
        row[head[i]] = parse_double(head[i], cells[i]);
      } catch (const ConfigError& e) {
        throw DataError(path + ": " + e.what());
      }
    }
    s.folds.push_back(std::move(row));
  }
  if (s.folds.empty()) throw DataError(path + ": no fold rows");
  return s;
}

}  // namespace conmat
