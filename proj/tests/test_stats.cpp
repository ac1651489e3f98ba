#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "faceflow/stats.hpp"

using namespace faceflow;

TEST_CASE("incomplete beta basics") {
  CHECK(incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3));
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  // symmetry I_x(a,b) = 1 - I_(1-x)(b,a)
  CHECK(incomplete_beta(2.5, 1.5, 0.4) ==
        doctest::Approx(1.0 - incomplete_beta(1.5, 2.5, 0.6)).epsilon(1e-12));
}

TEST_CASE("student t cdf against tabulated critical values") {
  CHECK(student_t_cdf(0.0, 10) == doctest::Approx(0.5));
  CHECK(student_t_cdf(1.8125, 10) == doctest::Approx(0.95).epsilon(1e-4));
  CHECK(student_t_cdf(2.2281, 10) == doctest::Approx(0.975).epsilon(1e-4));
  CHECK(student_t_cdf(-2.2281, 10) == doctest::Approx(0.025).epsilon(1e-3));
  CHECK(student_t_cdf(1.6449, 1e6) == doctest::Approx(0.95).epsilon(1e-4));
}

TEST_CASE("paired t-test directions") {
  VecXd up(8);
  up << 1.0, 1.2, 0.9, 1.1, 1.0, 0.8, 1.3, 1.05;
  auto r = paired_t_test(up);
  CHECK(r.mean_diff > 0);
  CHECK(r.p_one_sided < 1e-4);

  VecXd centered(6);
  centered << 0.1, -0.2, 0.05, -0.1, 0.15, -0.05;
  auto c = paired_t_test(centered);
  CHECK(c.p_two_sided > 0.5);

  VecXd one(1);
  one << 1.0;
  CHECK_THROWS_AS((void)paired_t_test(one), std::invalid_argument);
}

TEST_CASE("sample statistics") {
  VecXd v(4);
  v << 1, 2, 3, 4;
  CHECK(mean_of(v) == doctest::Approx(2.5));
  CHECK(stddev_of(v) == doctest::Approx(std::sqrt(5.0 / 3.0)));
}
