#include "faceflow/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace faceflow {

double mean_of(const VecXd& v) { return v.size() ? v.mean() : 0.0; }

double stddev_of(const VecXd& v) {
  if (v.size() < 2) return 0.0;
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / (v.size() - 1));
}

namespace {
// Lentz continued fraction for the incomplete beta.
double betacf(double a, double b, double x) {
  const double tiny = 1e-300;
  const int max_iter = 300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 3e-14) break;
  }
  return h;
}
}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (dof <= 0) throw std::invalid_argument("student_t_cdf: dof must be > 0");
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, x);
  return t >= 0 ? 1.0 - tail : tail;
}

PairedTestResult paired_t_test(const VecXd& diffs) {
  PairedTestResult r;
  r.n = static_cast<int>(diffs.size());
  if (r.n < 2) throw std::invalid_argument("paired_t_test: need >= 2 pairs");
  r.mean_diff = diffs.mean();
  const double sd = stddev_of(diffs);
  if (sd == 0.0) {
    r.t_stat = r.mean_diff == 0.0 ? 0.0
               : (r.mean_diff > 0 ? 1e300 : -1e300);
  } else {
    r.t_stat = r.mean_diff / (sd / std::sqrt(static_cast<double>(r.n)));
  }
  const double cdf = student_t_cdf(r.t_stat, r.n - 1);
  r.p_one_sided = 1.0 - cdf;
  r.p_two_sided = 2.0 * std::min(cdf, 1.0 - cdf);
  return r;
}

}  // namespace faceflow
