#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "faceflow/flow.hpp"
#include "faceflow/gradcheck.hpp"

using namespace faceflow;

namespace {

MatXd random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
  MatXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = rng.normal() * scale;
  return m;
}

std::vector<MatXd> random_conds(const GlowStack<double>& g, int batch,
                                Rng& rng) {
  std::vector<MatXd> conds;
  for (int k = 0; k < g.num_steps(); ++k)
    conds.push_back(random_mat(g.cond_dim, batch, rng));
  return conds;
}

// Central-difference Jacobian of the full stack map at x.
MatXd fd_jacobian(const GlowStack<double>& g, const std::vector<MatXd>& conds,
                  const VecXd& x, double h = 1e-6) {
  const int d = static_cast<int>(x.size());
  MatXd jac(d, d);
  for (int j = 0; j < d; ++j) {
    VecXd hi = x, lo = x;
    hi[j] += h;
    lo[j] -= h;
    VecXd ld;
    MatXd up = stack_forward<double>(hi, conds, g, ld);
    MatXd dn = stack_forward<double>(lo, conds, g, ld);
    jac.col(j) = (up - dn) / (2.0 * h);
  }
  return jac;
}

}  // namespace

TEST_CASE("actnorm data-dependent initialization") {
  MatXd batch(2, 2);
  batch << 0, 2, 0, 2;  // two items (0,0) and (2,2)
  auto p = actnorm_initialize(batch);
  CHECK(p.initialized);
  CHECK(p.scale[0] == doctest::Approx(1.0));
  CHECK(p.scale[1] == doctest::Approx(1.0));
  CHECK(p.bias[0] == doctest::Approx(-1.0));
  CHECK(p.bias[1] == doctest::Approx(-1.0));

  // first batch maps to zero mean unit variance
  MatXd out = actnorm_forward(batch, p);
  CHECK(std::abs(out.row(0).mean()) < 1e-4);
  CHECK(out.row(0).squaredNorm() / 2.0 == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("actnorm on an already normalized batch is near identity") {
  MatXd batch(2, 2);
  batch << -1, 1, 1, -1;
  auto p = actnorm_initialize(batch);
  CHECK(p.scale[0] == doctest::Approx(1.0));
  CHECK(p.bias[0] == doctest::Approx(0.0));
}

TEST_CASE("actnorm rejects a degenerate channel") {
  MatXd batch(2, 2);
  batch << 5, 5, 5, 5;
  CHECK_THROWS_WITH_AS(actnorm_initialize(batch),
                       doctest::Contains("channel"), std::runtime_error);
}

TEST_CASE("actnorm apply examples") {
  ActnormParams<double> p;
  p.scale = VecXd::Ones(2);
  p.bias = VecXd::Zero(2);
  p.initialized = true;
  VecXd x(2);
  x << 3, -2;
  auto r = actnorm_apply(x, p, FlowDirection::Forward);
  CHECK(r.output[0] == 3);
  CHECK(r.output[1] == -2);
  CHECK(r.logdet == doctest::Approx(0.0));

  p.scale << 2, 0.5;
  VecXd ones = VecXd::Ones(2);
  auto f = actnorm_apply(ones, p, FlowDirection::Forward);
  CHECK(f.output[0] == doctest::Approx(2.0));
  CHECK(f.output[1] == doctest::Approx(0.5));
  CHECK(f.logdet == doctest::Approx(std::log(2.0) + std::log(0.5)));

  auto inv = actnorm_apply(f.output, p, FlowDirection::Inverse);
  CHECK(inv.output[0] == doctest::Approx(1.0));
  CHECK(inv.output[1] == doctest::Approx(1.0));
  CHECK(inv.logdet == doctest::Approx(-f.logdet));

  ActnormParams<double> un;
  un.scale = VecXd::Ones(2);
  un.bias = VecXd::Zero(2);
  CHECK_THROWS_AS((void)actnorm_apply(x, un, FlowDirection::Forward),
                  std::runtime_error);
}

TEST_CASE("invertible linear: identity and diagonal examples") {
  auto p = invlinear_identity<double>(2);
  VecXd x(2);
  x << 4, 7;
  auto r = invlinear_apply(x, p, FlowDirection::Forward);
  CHECK(r.output[0] == doctest::Approx(4.0));
  CHECK(r.output[1] == doctest::Approx(7.0));
  CHECK(r.logdet == doctest::Approx(0.0));

  p.log_diag << std::log(2.0), std::log(3.0);
  VecXd ones = VecXd::Ones(2);
  auto d = invlinear_apply(ones, p, FlowDirection::Forward);
  CHECK(d.output[0] == doctest::Approx(2.0));
  CHECK(d.output[1] == doctest::Approx(3.0));
  CHECK(d.logdet == doctest::Approx(std::log(6.0)));
}

TEST_CASE("invertible linear: analytic logdet matches dense determinant") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = invlinear_random_orthogonal<double>(4, rng);
    // move off the orthogonal point
    for (int i = 0; i < 4; ++i) p.log_diag[i] += 0.4 * (rng.uniform() - 0.5);
    p.lower(2, 0) += 0.3;
    p.upper(0, 3) -= 0.2;
    MatXd w = invlinear_matrix(p);
    const double dense = std::log(std::abs(w.determinant()));
    CHECK(invlinear_logdet(p) == doctest::Approx(dense).epsilon(1e-9));

    MatXd x = random_mat(4, 5, rng);
    MatXd y = invlinear_forward(x, p);
    CHECK((y - w * x).cwiseAbs().maxCoeff() < 1e-12);
    MatXd back = invlinear_inverse(y, p);
    CHECK((back - x).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("coupling: identity at zero-initialized output layer") {
  Rng rng(3);
  auto p = coupling_zero_init<double>(4, 3, 8, rng, 2.0);
  MatXd x = random_mat(4, 6, rng);
  MatXd c = random_mat(3, 6, rng);
  VecXd ld;
  MatXd y = coupling_forward(x, c, p, ld);
  CHECK((y - x).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(ld.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("coupling: forced log-scale and translation") {
  Rng rng(4);
  auto p = coupling_zero_init<double>(2, 0, 4, rng, 2.0);
  // with w2 = 0 the net output is b2: raw log-scale then translation
  p.b2[0] = std::atanh(std::log(2.0) / 2.0);
  p.b2[1] = 1.0;
  VecXd x(2);
  x << 0, 3;
  auto r = coupling_apply(x, VecXd(0), p, FlowDirection::Forward);
  CHECK(r.output[0] == doctest::Approx(0.0));
  CHECK(r.output[1] == doctest::Approx(7.0));
  CHECK(r.logdet == doctest::Approx(std::log(2.0)));

  auto inv = coupling_apply(r.output, VecXd(0), p, FlowDirection::Inverse);
  CHECK(inv.output[1] == doctest::Approx(3.0));
  CHECK(inv.logdet == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("coupling: dimension mismatch raises") {
  Rng rng(5);
  auto p = coupling_zero_init<double>(4, 3, 8, rng, 2.0);
  MatXd x = random_mat(4, 2, rng);
  MatXd bad_c = random_mat(2, 2, rng);
  VecXd ld;
  CHECK_THROWS_AS((void)coupling_forward(x, bad_c, p, ld),
                  std::invalid_argument);
}

TEST_CASE("coupling round trip, single precision") {
  Rng rng(11);
  auto p = coupling_zero_init<float>(8, 5, 16, rng, 2.0f);
  for (int j = 0; j < p.w2.cols(); ++j)
    for (int i = 0; i < p.w2.rows(); ++i)
      p.w2(i, j) = float(rng.normal() * 0.3);
  MatX<float> x(8, 1000), c(5, 1000);
  for (int j = 0; j < 1000; ++j) {
    for (int i = 0; i < 8; ++i) x(i, j) = float(rng.normal());
    for (int i = 0; i < 5; ++i) c(i, j) = float(rng.normal());
  }
  VecX<float> ld_f, ld_i;
  MatX<float> y = coupling_forward(x, c, p, ld_f);
  MatX<float> back = coupling_inverse(y, c, p, ld_i);
  CHECK((back - x).cwiseAbs().maxCoeff() < 1e-5f);
  CHECK((ld_f + ld_i).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("stack: all-identity step passes through") {
  auto g = make_identity_stack<double>(4, 1, 3, 8);
  VecXd x(4);
  x << 1, -2, 3, -4;
  std::vector<VecXd> conds{VecXd::Zero(3)};
  auto r = stack_transform(x, conds, g, FlowDirection::Forward);
  CHECK((r.output - x).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(r.logdet == doctest::Approx(0.0));
}

TEST_CASE("stack: logdet is the sum of per-step logdets") {
  auto g = make_identity_stack<double>(2, 2, 0, 4);
  // each step contributes 0.5 through its actnorm scales
  for (auto& s : g.steps)
    s.actnorm.scale = VecXd::Constant(2, std::exp(0.25));
  VecXd x = VecXd::Ones(2);
  std::vector<VecXd> conds(2, VecXd(0));
  auto r = stack_transform(x, conds, g, FlowDirection::Forward);
  CHECK(r.logdet == doctest::Approx(1.0));
}

TEST_CASE("stack: conditioning count mismatch raises") {
  auto g = make_identity_stack<double>(4, 2, 3, 8);
  std::vector<VecXd> conds{VecXd::Zero(3)};  // one short
  VecXd x = VecXd::Zero(4);
  CHECK_THROWS_AS((void)stack_transform(x, conds, g, FlowDirection::Forward),
                  std::invalid_argument);
}

TEST_CASE("stack: analytic logdet matches finite-difference Jacobian") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto g = make_glow_stack<double>(4, 3, 2, 8, rng);
    randomize_stack(g, rng);
    auto conds = random_conds(g, 1, rng);
    VecXd x = random_mat(4, 1, rng);
    VecXd ld;
    stack_forward<double>(x, conds, g, ld);
    MatXd jac = fd_jacobian(g, conds, x);
    const double numeric = std::log(std::abs(jac.determinant()));
    CHECK(std::abs(ld[0] - numeric) / std::max(1.0, std::abs(numeric)) < 1e-3);
  }
}

TEST_CASE("stack: exact invertibility in double precision") {
  Rng rng(31);
  auto g = make_glow_stack<double>(56, 16, 12, 32, rng);
  randomize_stack(g, rng, 0.05);
  const int batch = 1000;
  MatXd x = random_mat(56, batch, rng);
  auto conds = random_conds(g, batch, rng);
  VecXd ld_f, ld_i;
  MatXd z = stack_forward(x, conds, g, ld_f);
  MatXd back = stack_inverse(z, conds, g, ld_i);
  CHECK((back - x).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((ld_f + ld_i).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("stack: non-finite input reports the failing step") {
  Rng rng(41);
  auto g = make_glow_stack<double>(4, 2, 0, 8, rng);
  randomize_stack(g, rng);
  MatXd x(4, 1);
  x << 1, 2, std::numeric_limits<double>::infinity(), 3;
  std::vector<MatXd> conds(2, MatXd::Zero(0, 1));
  VecXd ld;
  CHECK_THROWS_WITH_AS((void)stack_forward(x, conds, g, ld),
                       doctest::Contains("step"), std::runtime_error);
}

TEST_CASE("frame_log_density: standard-normal values at identity flow") {
  auto g = make_identity_stack<double>(2, 1, 0, 4);
  std::vector<VecXd> conds(1, VecXd(0));
  VecXd zero = VecXd::Zero(2);
  CHECK(frame_log_density(zero, conds, g) ==
        doctest::Approx(-kLog2Pi).epsilon(1e-10));
  // one-dimensional base-density formula
  VecXd z1(1);
  z1 << 3.0;
  CHECK(gaussian_log_density<double>(z1)[0] ==
        doctest::Approx(-0.5 * (9.0 + kLog2Pi)));
}

TEST_CASE("density of a random 2-d flow integrates to one") {
  Rng rng(51);
  auto g = make_glow_stack<double>(2, 4, 0, 8, rng);
  randomize_stack(g, rng, 0.1);
  const double lo = -8.0, hi = 8.0, step = 0.05;
  const int n = static_cast<int>((hi - lo) / step);
  MatXd grid(2, n * n);
  int col = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      grid(0, col) = lo + (i + 0.5) * step;
      grid(1, col) = lo + (j + 0.5) * step;
      ++col;
    }
  std::vector<MatXd> conds(4, MatXd::Zero(0, grid.cols()));
  VecXd lp = batch_log_density(grid, conds, g);
  const double mass = lp.array().exp().sum() * step * step;
  CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("flow gradients match central finite differences") {
  Rng rng(61);
  auto g = make_glow_stack<double>(4, 2, 3, 6, rng);
  randomize_stack(g, rng);
  const int batch = 3;
  MatXd x = random_mat(4, batch, rng);
  auto conds = random_conds(g, batch, rng);

  auto grads = zeros_like(g);
  flow_nll_and_gradients(x, conds, g, grads);
  auto prefs = collect_tensors(g);
  auto grefs = collect_tensors(grads);
  auto loss = [&]() {
    return -batch_log_density(x, conds, g).mean();
  };
  auto res = fd_check<double>(prefs, grefs, loss, 1e-5);
  INFO("worst: ", res.worst_tensor, "[", res.worst_index, "] analytic ",
       res.analytic, " numeric ", res.numeric);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("flow gradients flow into the conditioning") {
  Rng rng(71);
  auto g = make_glow_stack<double>(4, 2, 3, 6, rng);
  randomize_stack(g, rng);
  MatXd x = random_mat(4, 2, rng);
  auto conds = random_conds(g, 2, rng);
  auto grads = zeros_like(g);
  std::vector<MatXd> gconds;
  flow_nll_and_gradients(x, conds, g, grads, &gconds);
  REQUIRE(gconds.size() == 2);

  // numeric check on one conditioning entry
  const double h = 1e-6;
  conds[1](2, 0) += h;
  const double up = -batch_log_density(x, conds, g).mean();
  conds[1](2, 0) -= 2 * h;
  const double dn = -batch_log_density(x, conds, g).mean();
  conds[1](2, 0) += h;
  const double numeric = (up - dn) / (2 * h);
  // batch-mean loss: conditioning grads are per-column of the mean
  CHECK(gconds[1](2, 0) == doctest::Approx(numeric).epsilon(1e-4));
}

TEST_CASE("nll at identity flow on zero batch") {
  auto g = make_identity_stack<double>(2, 1, 0, 4);
  MatXd x = MatXd::Zero(2, 4);
  std::vector<MatXd> conds(1, MatXd::Zero(0, 4));
  auto grads = zeros_like(g);
  const double nll = flow_nll_and_gradients(x, conds, g, grads);
  CHECK(nll == doctest::Approx(kLog2Pi));
}
