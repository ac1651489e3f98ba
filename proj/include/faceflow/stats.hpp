#pragma once

#include "faceflow/dense.hpp"

namespace faceflow {

double mean_of(const VecXd& v);
double stddev_of(const VecXd& v);  // sample standard deviation

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// P(T <= t) for Student's t with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

struct PairedTestResult {
  double t_stat = 0;
  double p_one_sided = 1;  // H1: mean(diff) > 0
  double p_two_sided = 1;
  double mean_diff = 0;
  int n = 0;
};

// Paired t-test on per-item differences.
PairedTestResult paired_t_test(const VecXd& diffs);

}  // namespace faceflow
