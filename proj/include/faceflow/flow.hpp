#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "faceflow/dense.hpp"
#include "faceflow/params.hpp"
#include "faceflow/rng.hpp"

// Invertible per-frame transformation between feature space and a
// standard-normal latent space. One step of flow is an actnorm / invertible
// linear / conditional affine coupling triple; K steps compose into the full
// map with exact log-determinant accounting. Batches are matrices whose
// columns are items.

namespace faceflow {

enum class FlowDirection { Forward, Inverse };

template <class Scalar>
struct FlowResult {
  VecX<Scalar> output;
  Scalar logdet = 0;  // of the applied direction, in nats
};

// ---------------------------------------------------------------------------
// Actnorm: per-channel affine with data-dependent initialization.

template <class Scalar>
struct ActnormParams {
  VecX<Scalar> scale;
  VecX<Scalar> bias;
  bool initialized = false;
};

template <class Scalar>
ActnormParams<Scalar> actnorm_initialize(const MatX<Scalar>& batch) {
  if (batch.cols() < 2)
    throw std::invalid_argument("actnorm_initialize: batch needs >= 2 items");
  VecX<Scalar> mean = batch.rowwise().mean();
  VecX<Scalar> var =
      (batch.colwise() - mean).array().square().rowwise().mean();
  for (Eigen::Index i = 0; i < var.size(); ++i) {
    if (!(var[i] > Scalar(0)))
      throw std::runtime_error("actnorm_initialize: zero variance in channel " +
                               std::to_string(i));
  }
  ActnormParams<Scalar> p;
  p.scale = var.array().rsqrt();
  p.bias = -mean.array() * p.scale.array();
  p.initialized = true;
  return p;
}

template <class Scalar>
Scalar actnorm_logdet(const ActnormParams<Scalar>& p) {
  return p.scale.array().abs().log().sum();
}

template <class Scalar>
MatX<Scalar> actnorm_forward(const MatX<Scalar>& x,
                             const ActnormParams<Scalar>& p) {
  if (!p.initialized)
    throw std::runtime_error("actnorm: params not initialized");
  return (x.array().colwise() * p.scale.array()).colwise() + p.bias.array();
}

template <class Scalar>
MatX<Scalar> actnorm_inverse(const MatX<Scalar>& y,
                             const ActnormParams<Scalar>& p) {
  if (!p.initialized)
    throw std::runtime_error("actnorm: params not initialized");
  return (y.array().colwise() - p.bias.array()).colwise() / p.scale.array();
}

// grads for scale/bias given upstream grads of the output and of the
// per-item logdet; returns grad of the input.
template <class Scalar>
MatX<Scalar> actnorm_backward(const MatX<Scalar>& x,
                              const ActnormParams<Scalar>& p,
                              const MatX<Scalar>& gy,
                              const VecX<Scalar>& glogdet,
                              ActnormParams<Scalar>& grads) {
  grads.scale += (gy.array() * x.array()).rowwise().sum().matrix();
  grads.scale += (glogdet.sum() * p.scale.array().inverse()).matrix();
  grads.bias += gy.rowwise().sum();
  return gy.array().colwise() * p.scale.array();
}

// ---------------------------------------------------------------------------
// Invertible linear mixing, LU-parameterized behind a fixed permutation:
//   W = P * L * (U + diag(sign .* exp(log_diag)))
// Only the strictly lower part of `lower` and the strictly upper part of
// `upper` take effect (and receive gradients); log|det W| = sum(log_diag).

template <class Scalar>
struct InvLinearParams {
  Eigen::VectorXi perm;  // output row i reads mixed row perm[i]
  MatX<Scalar> lower;
  MatX<Scalar> upper;
  VecX<Scalar> log_diag;
  VecX<Scalar> sign_diag;
};

template <class Scalar>
InvLinearParams<Scalar> invlinear_identity(int dim) {
  InvLinearParams<Scalar> p;
  p.perm = Eigen::VectorXi::LinSpaced(dim, 0, dim - 1);
  p.lower = MatX<Scalar>::Zero(dim, dim);
  p.upper = MatX<Scalar>::Zero(dim, dim);
  p.log_diag = VecX<Scalar>::Zero(dim);
  p.sign_diag = VecX<Scalar>::Ones(dim);
  return p;
}

// LU-factorize a random orthogonal matrix so the initial map is volume
// preserving, the Glow convention.
template <class Scalar>
InvLinearParams<Scalar> invlinear_random_orthogonal(int dim, Rng& rng) {
  MatXd gauss(dim, dim);
  for (Eigen::Index j = 0; j < gauss.cols(); ++j)
    for (Eigen::Index i = 0; i < gauss.rows(); ++i) gauss(i, j) = rng.normal();
  MatXd q = Eigen::HouseholderQR<MatXd>(gauss).householderQ();
  Eigen::PartialPivLU<MatXd> lu(q);  // q = Pinv * L * U
  MatXd l = MatXd::Identity(dim, dim);
  l.template triangularView<Eigen::StrictlyLower>() = lu.matrixLU();
  MatXd u = lu.matrixLU().template triangularView<Eigen::Upper>();
  MatXd pinv = lu.permutationP().inverse() * MatXd::Identity(dim, dim);

  InvLinearParams<Scalar> p;
  p.perm.resize(dim);
  for (int i = 0; i < dim; ++i) {
    int j = 0;
    pinv.row(i).maxCoeff(&j);
    p.perm[i] = j;
  }
  p.lower = l.template cast<Scalar>();
  p.upper = MatX<Scalar>::Zero(dim, dim);
  p.upper.template triangularView<Eigen::StrictlyUpper>() =
      u.template cast<Scalar>().template triangularView<Eigen::StrictlyUpper>();
  p.log_diag = u.diagonal().array().abs().log().template cast<Scalar>();
  p.sign_diag = u.diagonal().array().sign().template cast<Scalar>();
  return p;
}

template <class Scalar>
Scalar invlinear_logdet(const InvLinearParams<Scalar>& p) {
  return p.log_diag.sum();
}

// Upper factor with the parameterized diagonal filled in.
template <class Scalar>
MatX<Scalar> invlinear_upper_factor(const InvLinearParams<Scalar>& p) {
  MatX<Scalar> a = MatX<Scalar>::Zero(p.upper.rows(), p.upper.cols());
  a.template triangularView<Eigen::StrictlyUpper>() =
      p.upper.template triangularView<Eigen::StrictlyUpper>();
  a.diagonal() = p.sign_diag.array() * p.log_diag.array().exp();
  return a;
}

// Dense reconstruction of W, for tests and oracles.
template <class Scalar>
MatX<Scalar> invlinear_matrix(const InvLinearParams<Scalar>& p) {
  const Eigen::Index d = p.lower.rows();
  MatX<Scalar> m = p.lower.template triangularView<Eigen::UnitLower>() *
                   invlinear_upper_factor(p);
  MatX<Scalar> w(d, d);
  for (Eigen::Index i = 0; i < d; ++i) w.row(i) = m.row(p.perm[i]);
  return w;
}

template <class Scalar>
MatX<Scalar> invlinear_forward(const MatX<Scalar>& x,
                               const InvLinearParams<Scalar>& p,
                               MatX<Scalar>* ax_cache = nullptr) {
  MatX<Scalar> ax = invlinear_upper_factor(p) * x;
  MatX<Scalar> m = p.lower.template triangularView<Eigen::UnitLower>() * ax;
  MatX<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = m.row(p.perm[i]);
  if (ax_cache) *ax_cache = std::move(ax);
  return y;
}

template <class Scalar>
MatX<Scalar> invlinear_inverse(const MatX<Scalar>& y,
                               const InvLinearParams<Scalar>& p) {
  MatX<Scalar> m(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) m.row(p.perm[i]) = y.row(i);
  p.lower.template triangularView<Eigen::UnitLower>().solveInPlace(m);
  MatX<Scalar> a = invlinear_upper_factor(p);
  a.template triangularView<Eigen::Upper>().solveInPlace(m);
  return m;
}

template <class Scalar>
MatX<Scalar> invlinear_backward(const MatX<Scalar>& x,
                                const MatX<Scalar>& ax,
                                const InvLinearParams<Scalar>& p,
                                const MatX<Scalar>& gy,
                                const VecX<Scalar>& glogdet,
                                InvLinearParams<Scalar>& grads) {
  const Eigen::Index d = x.rows();
  MatX<Scalar> gm(d, gy.cols());
  for (Eigen::Index i = 0; i < d; ++i) gm.row(p.perm[i]) = gy.row(i);

  MatX<Scalar> gl =
      (gm * ax.transpose()).template triangularView<Eigen::StrictlyLower>();
  grads.lower += gl;

  MatX<Scalar> gax =
      p.lower.template triangularView<Eigen::UnitLower>().transpose() * gm;
  MatX<Scalar> ga = gax * x.transpose();
  MatX<Scalar> gu = ga.template triangularView<Eigen::StrictlyUpper>();
  grads.upper += gu;
  grads.log_diag += (ga.diagonal().array() * p.sign_diag.array() *
                     p.log_diag.array().exp())
                        .matrix();
  grads.log_diag.array() += glogdet.sum();

  return invlinear_upper_factor(p).transpose() * gax;
}

// ---------------------------------------------------------------------------
// Conditional affine coupling. The first half of the channels passes through
// and, concatenated with the conditioning vector, drives a two-layer net that
// emits log-scales and translations for the second half. Log-scales are
// bounded through s_max * tanh(.) so exp never blows up during training.

template <class Scalar>
struct CouplingParams {
  MatX<Scalar> w1;  // hidden x (d/2 + cond_dim)
  VecX<Scalar> b1;
  MatX<Scalar> w2;  // d x hidden
  VecX<Scalar> b2;
  Scalar log_scale_bound = Scalar(2);
};

template <class Scalar>
struct CouplingCache {
  MatX<Scalar> in;   // (d/2 + cond) x B
  MatX<Scalar> a1;   // hidden x B pre-activation
  MatX<Scalar> h1;   // hidden x B
  MatX<Scalar> th;   // tanh(raw log-scales), d/2 x B
  MatX<Scalar> es;   // exp(log-scales), d/2 x B
};

template <class Scalar>
CouplingParams<Scalar> coupling_zero_init(int dim, int cond_dim, int hidden,
                                          Rng& rng, Scalar log_scale_bound) {
  CouplingParams<Scalar> p;
  const int in_dim = dim / 2 + cond_dim;
  const double r = 1.0 / std::sqrt(static_cast<double>(std::max(1, in_dim)));
  p.w1.resize(hidden, in_dim);
  for (Eigen::Index j = 0; j < p.w1.cols(); ++j)
    for (Eigen::Index i = 0; i < p.w1.rows(); ++i)
      p.w1(i, j) = Scalar((2.0 * rng.uniform() - 1.0) * r);
  p.b1 = VecX<Scalar>::Zero(hidden);
  p.w2 = MatX<Scalar>::Zero(dim, hidden);  // identity transform at init
  p.b2 = VecX<Scalar>::Zero(dim);
  p.log_scale_bound = log_scale_bound;
  return p;
}

template <class Scalar>
MatX<Scalar> coupling_forward(const MatX<Scalar>& x, const MatX<Scalar>& cond,
                              const CouplingParams<Scalar>& p,
                              VecX<Scalar>& logdet,
                              CouplingCache<Scalar>* cache = nullptr) {
  const Eigen::Index d = x.rows();
  const Eigen::Index half = d / 2;
  if (half + cond.rows() != p.w1.cols())
    throw std::invalid_argument(
        "coupling: conditioning dimension does not match network input");
  if (cond.cols() != x.cols())
    throw std::invalid_argument("coupling: batch size mismatch");

  MatX<Scalar> in(half + cond.rows(), x.cols());
  in.topRows(half) = x.topRows(half);
  in.bottomRows(cond.rows()) = cond;
  MatX<Scalar> a1 = (p.w1 * in).colwise() + p.b1;
  MatX<Scalar> h1 = leaky_relu(a1);
  MatX<Scalar> out = (p.w2 * h1).colwise() + p.b2;

  MatX<Scalar> th = out.topRows(half).array().tanh();
  MatX<Scalar> es = (th.array() * p.log_scale_bound).exp();
  MatX<Scalar> y(d, x.cols());
  y.topRows(half) = x.topRows(half);
  y.bottomRows(half) =
      x.bottomRows(half).array() * es.array() + out.bottomRows(half).array();
  logdet = (th.colwise().sum() * p.log_scale_bound).transpose();
  if (cache) {
    cache->in = std::move(in);
    cache->a1 = std::move(a1);
    cache->h1 = std::move(h1);
    cache->th = std::move(th);
    cache->es = std::move(es);
  }
  return y;
}

template <class Scalar>
MatX<Scalar> coupling_inverse(const MatX<Scalar>& y, const MatX<Scalar>& cond,
                              const CouplingParams<Scalar>& p,
                              VecX<Scalar>& logdet) {
  const Eigen::Index d = y.rows();
  const Eigen::Index half = d / 2;
  if (half + cond.rows() != p.w1.cols())
    throw std::invalid_argument(
        "coupling: conditioning dimension does not match network input");

  MatX<Scalar> in(half + cond.rows(), y.cols());
  in.topRows(half) = y.topRows(half);
  in.bottomRows(cond.rows()) = cond;
  MatX<Scalar> h1 = leaky_relu<Scalar>((p.w1 * in).colwise() + p.b1);
  MatX<Scalar> out = (p.w2 * h1).colwise() + p.b2;

  MatX<Scalar> th = out.topRows(half).array().tanh();
  MatX<Scalar> x(d, y.cols());
  x.topRows(half) = y.topRows(half);
  x.bottomRows(half) = (y.bottomRows(half) - out.bottomRows(half)).array() *
                       (th.array() * -p.log_scale_bound).exp();
  logdet = (-(th.colwise().sum()) * p.log_scale_bound).transpose();
  return x;
}

// Returns grad of x; accumulates grads of the net and of the conditioning.
template <class Scalar>
MatX<Scalar> coupling_backward(const MatX<Scalar>& x,
                               const CouplingCache<Scalar>& c,
                               const CouplingParams<Scalar>& p,
                               const MatX<Scalar>& gy,
                               const VecX<Scalar>& glogdet,
                               CouplingParams<Scalar>& grads,
                               MatX<Scalar>& gcond) {
  const Eigen::Index d = x.rows();
  const Eigen::Index half = d / 2;

  MatX<Scalar> gy2 = gy.bottomRows(half);
  MatX<Scalar> gx2 = gy2.array() * c.es.array();
  MatX<Scalar> gls = gy2.array() * x.bottomRows(half).array() * c.es.array();
  gls.array().rowwise() += glogdet.transpose().array();
  MatX<Scalar> graw =
      gls.array() * (Scalar(1) - c.th.array().square()) * p.log_scale_bound;

  MatX<Scalar> gout(d, gy.cols());
  gout.topRows(half) = graw;
  gout.bottomRows(half) = gy2;

  grads.w2 += gout * c.h1.transpose();
  grads.b2 += gout.rowwise().sum();
  MatX<Scalar> gh1 = p.w2.transpose() * gout;
  MatX<Scalar> ga1 = gh1.array() * leaky_relu_grad(c.a1).array();
  grads.w1 += ga1 * c.in.transpose();
  grads.b1 += ga1.rowwise().sum();
  MatX<Scalar> gin = p.w1.transpose() * ga1;

  gcond += gin.bottomRows(gin.rows() - half);
  MatX<Scalar> gx(d, gy.cols());
  gx.topRows(half) = gy.topRows(half) + gin.topRows(half);
  gx.bottomRows(half) = gx2;
  return gx;
}

// ---------------------------------------------------------------------------
// Stack of K steps.

template <class Scalar>
struct GlowStep {
  ActnormParams<Scalar> actnorm;
  InvLinearParams<Scalar> linear;
  CouplingParams<Scalar> coupling;
};

template <class Scalar>
struct GlowStack {
  std::vector<GlowStep<Scalar>> steps;
  int dim = 0;
  int cond_dim = 0;

  int num_steps() const { return static_cast<int>(steps.size()); }
};

// Coupling nets zero-initialized, linear maps random orthogonal, actnorm
// pending data-dependent initialization.
template <class Scalar>
GlowStack<Scalar> make_glow_stack(int dim, int num_steps, int cond_dim,
                                  int hidden, Rng& rng,
                                  Scalar log_scale_bound = Scalar(2)) {
  if (dim <= 0 || dim % 2 != 0)
    throw std::invalid_argument("glow stack: dim must be positive and even");
  if (num_steps < 1) throw std::invalid_argument("glow stack: need K >= 1");
  GlowStack<Scalar> g;
  g.dim = dim;
  g.cond_dim = cond_dim;
  g.steps.resize(num_steps);
  for (auto& s : g.steps) {
    s.actnorm.scale = VecX<Scalar>::Ones(dim);
    s.actnorm.bias = VecX<Scalar>::Zero(dim);
    s.actnorm.initialized = false;
    s.linear = invlinear_random_orthogonal<Scalar>(dim, rng);
    s.coupling =
        coupling_zero_init<Scalar>(dim, cond_dim, hidden, rng, log_scale_bound);
  }
  return g;
}

// Exact identity map with logdet 0.
template <class Scalar>
GlowStack<Scalar> make_identity_stack(int dim, int num_steps, int cond_dim,
                                      int hidden) {
  GlowStack<Scalar> g;
  g.dim = dim;
  g.cond_dim = cond_dim;
  g.steps.resize(num_steps);
  for (auto& s : g.steps) {
    s.actnorm.scale = VecX<Scalar>::Ones(dim);
    s.actnorm.bias = VecX<Scalar>::Zero(dim);
    s.actnorm.initialized = true;
    s.linear = invlinear_identity<Scalar>(dim);
    s.coupling.w1 = MatX<Scalar>::Zero(hidden, dim / 2 + cond_dim);
    s.coupling.b1 = VecX<Scalar>::Zero(hidden);
    s.coupling.w2 = MatX<Scalar>::Zero(dim, hidden);
    s.coupling.b2 = VecX<Scalar>::Zero(dim);
  }
  return g;
}

// Moves every parameter off the init point; used by logdet/gradient oracles
// that should probe a generic point in parameter space. `magnitude` bounds
// the per-step gain: composing many steps multiplies gains, so long stacks
// want small values to stay in a numerically representative regime.
template <class Scalar>
void randomize_stack(GlowStack<Scalar>& g, Rng& rng, double magnitude = 0.3) {
  auto fill = [&](MatX<Scalar>& m, double s) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        m(i, j) = Scalar(rng.normal() * s);
  };
  for (auto& s : g.steps) {
    for (Eigen::Index i = 0; i < g.dim; ++i) {
      s.actnorm.scale[i] = Scalar(std::exp(rng.normal() * 0.5 * magnitude));
      s.actnorm.bias[i] = Scalar(rng.normal() * magnitude);
    }
    s.actnorm.initialized = true;
    fill(s.linear.lower, magnitude / std::sqrt(double(g.dim)));
    fill(s.linear.upper, magnitude / std::sqrt(double(g.dim)));
    for (Eigen::Index i = 0; i < g.dim; ++i)
      s.linear.log_diag[i] = Scalar(rng.normal() * 0.5 * magnitude);
    fill(s.coupling.w1, 1.0 / std::sqrt(double(s.coupling.w1.cols())));
    fill(s.coupling.w2, magnitude / std::sqrt(double(s.coupling.w2.cols())));
    for (Eigen::Index i = 0; i < s.coupling.b1.size(); ++i)
      s.coupling.b1[i] = Scalar(rng.normal() * 0.3 * magnitude);
    for (Eigen::Index i = 0; i < s.coupling.b2.size(); ++i)
      s.coupling.b2[i] = Scalar(rng.normal() * 0.3 * magnitude);
  }
}

template <class Scalar>
struct StepCache {
  MatX<Scalar> x0;  // actnorm input
  MatX<Scalar> x1;  // linear input
  MatX<Scalar> ax;  // upper-factor product inside the linear map
  MatX<Scalar> x2;  // coupling input
  CouplingCache<Scalar> coupling;
};

template <class Scalar>
struct StackTrace {
  std::vector<StepCache<Scalar>> steps;
};

template <class Scalar>
void check_conds(const GlowStack<Scalar>& g,
                 const std::vector<MatX<Scalar>>& conds, Eigen::Index batch) {
  if (static_cast<int>(conds.size()) != g.num_steps())
    throw std::invalid_argument("flow: need one conditioning matrix per step");
  for (const auto& c : conds)
    if (c.rows() != g.cond_dim || c.cols() != batch)
      throw std::invalid_argument("flow: conditioning shape mismatch");
}

template <class Scalar>
MatX<Scalar> stack_forward(const MatX<Scalar>& x,
                           const std::vector<MatX<Scalar>>& conds,
                           const GlowStack<Scalar>& g, VecX<Scalar>& logdet,
                           StackTrace<Scalar>* trace = nullptr) {
  check_conds(g, conds, x.cols());
  logdet = VecX<Scalar>::Zero(x.cols());
  if (trace) trace->steps.resize(g.num_steps());
  MatX<Scalar> cur = x;
  for (int k = 0; k < g.num_steps(); ++k) {
    const auto& s = g.steps[k];
    StepCache<Scalar>* c = trace ? &trace->steps[k] : nullptr;
    if (c) c->x0 = cur;
    MatX<Scalar> x1 = actnorm_forward(cur, s.actnorm);
    logdet.array() += actnorm_logdet(s.actnorm);
    if (c) c->x1 = x1;
    MatX<Scalar> ax;
    MatX<Scalar> x2 = invlinear_forward(x1, s.linear, c ? &ax : nullptr);
    logdet.array() += invlinear_logdet(s.linear);
    if (c) {
      c->ax = std::move(ax);
      c->x2 = x2;
    }
    VecX<Scalar> ld;
    cur = coupling_forward(x2, conds[k], s.coupling, ld,
                           c ? &c->coupling : nullptr);
    logdet += ld;
    if (!cur.allFinite())
      throw std::runtime_error("flow: non-finite values after step " +
                               std::to_string(k));
  }
  return cur;
}

template <class Scalar>
MatX<Scalar> stack_inverse(const MatX<Scalar>& z,
                           const std::vector<MatX<Scalar>>& conds,
                           const GlowStack<Scalar>& g, VecX<Scalar>& logdet) {
  check_conds(g, conds, z.cols());
  logdet = VecX<Scalar>::Zero(z.cols());
  MatX<Scalar> cur = z;
  for (int k = g.num_steps() - 1; k >= 0; --k) {
    const auto& s = g.steps[k];
    VecX<Scalar> ld;
    cur = coupling_inverse(cur, conds[k], s.coupling, ld);
    logdet += ld;
    cur = invlinear_inverse(cur, s.linear);
    logdet.array() -= invlinear_logdet(s.linear);
    cur = actnorm_inverse(cur, s.actnorm);
    logdet.array() -= actnorm_logdet(s.actnorm);
    if (!cur.allFinite())
      throw std::runtime_error("flow: non-finite values inverting step " +
                               std::to_string(k));
  }
  return cur;
}

// Runs the batch forward, giving every uninitialized actnorm the mean/variance
// of the activations that reach it.
template <class Scalar>
void actnorm_init_forward(GlowStack<Scalar>& g, const MatX<Scalar>& x,
                          const std::vector<MatX<Scalar>>& conds) {
  check_conds(g, conds, x.cols());
  MatX<Scalar> cur = x;
  for (int k = 0; k < g.num_steps(); ++k) {
    auto& s = g.steps[k];
    if (!s.actnorm.initialized) s.actnorm = actnorm_initialize(cur);
    cur = actnorm_forward(cur, s.actnorm);
    cur = invlinear_forward(cur, s.linear);
    VecX<Scalar> ld;
    cur = coupling_forward(cur, conds[k], s.coupling, ld);
  }
}

// Accumulates parameter grads; optionally returns input-space and
// conditioning grads.
template <class Scalar>
void stack_backward(const GlowStack<Scalar>& g, const StackTrace<Scalar>& trace,
                    const MatX<Scalar>& gz, const VecX<Scalar>& glogdet,
                    GlowStack<Scalar>& grads, MatX<Scalar>* gx = nullptr,
                    std::vector<MatX<Scalar>>* gconds = nullptr) {
  MatX<Scalar> g_cur = gz;
  if (gconds) {
    gconds->assign(g.num_steps(),
                   MatX<Scalar>::Zero(g.cond_dim, gz.cols()));
  }
  MatX<Scalar> gcond_sink = MatX<Scalar>::Zero(g.cond_dim, gz.cols());
  for (int k = g.num_steps() - 1; k >= 0; --k) {
    const auto& s = g.steps[k];
    const auto& c = trace.steps[k];
    MatX<Scalar>& gcond = gconds ? (*gconds)[k] : gcond_sink;
    if (!gconds) gcond.setZero();
    g_cur = coupling_backward(c.x2, c.coupling, s.coupling, g_cur, glogdet,
                              grads.steps[k].coupling, gcond);
    g_cur = invlinear_backward(c.x1, c.ax, s.linear, g_cur, glogdet,
                               grads.steps[k].linear);
    g_cur = actnorm_backward(c.x0, s.actnorm, g_cur, glogdet,
                             grads.steps[k].actnorm);
  }
  if (gx) *gx = std::move(g_cur);
}

// ---------------------------------------------------------------------------
// Densities under the standard-normal base distribution.

template <class Scalar>
VecX<Scalar> gaussian_log_density(const MatX<Scalar>& z) {
  return (-Scalar(0.5) *
          (z.colwise().squaredNorm().array() + z.rows() * Scalar(kLog2Pi)))
      .transpose();
}

template <class Scalar>
VecX<Scalar> batch_log_density(const MatX<Scalar>& x,
                               const std::vector<MatX<Scalar>>& conds,
                               const GlowStack<Scalar>& g,
                               StackTrace<Scalar>* trace = nullptr,
                               MatX<Scalar>* z_out = nullptr) {
  VecX<Scalar> logdet;
  MatX<Scalar> z = stack_forward(x, conds, g, logdet, trace);
  VecX<Scalar> lp = gaussian_log_density(z) + logdet;
  if (z_out) *z_out = std::move(z);
  return lp;
}

// Mean NLL of the batch plus exact parameter gradients; optionally gradients
// w.r.t. the conditioning matrices (for the encoder pathway) and the inputs.
template <class Scalar>
Scalar flow_nll_and_gradients(const MatX<Scalar>& x,
                              const std::vector<MatX<Scalar>>& conds,
                              const GlowStack<Scalar>& g,
                              GlowStack<Scalar>& grads,
                              std::vector<MatX<Scalar>>* gconds = nullptr,
                              MatX<Scalar>* gx = nullptr) {
  if (x.cols() == 0) throw std::invalid_argument("flow nll: empty batch");
  StackTrace<Scalar> trace;
  MatX<Scalar> z;
  VecX<Scalar> lp = batch_log_density(x, conds, g, &trace, &z);
  const Scalar inv_b = Scalar(1) / Scalar(x.cols());
  MatX<Scalar> gz = z * inv_b;  // d(-mean logN(z))/dz
  VecX<Scalar> gld = VecX<Scalar>::Constant(x.cols(), -inv_b);
  stack_backward(g, trace, gz, gld, grads, gx, gconds);
  return -lp.mean();
}

// ---------------------------------------------------------------------------
// Single-vector convenience API.

template <class Scalar>
FlowResult<Scalar> actnorm_apply(const VecX<Scalar>& x,
                                 const ActnormParams<Scalar>& p,
                                 FlowDirection dir) {
  FlowResult<Scalar> r;
  if (dir == FlowDirection::Forward) {
    r.output = actnorm_forward<Scalar>(x, p);
    r.logdet = actnorm_logdet(p);
  } else {
    r.output = actnorm_inverse<Scalar>(x, p);
    r.logdet = -actnorm_logdet(p);
  }
  return r;
}

template <class Scalar>
FlowResult<Scalar> invlinear_apply(const VecX<Scalar>& x,
                                   const InvLinearParams<Scalar>& p,
                                   FlowDirection dir) {
  FlowResult<Scalar> r;
  if (dir == FlowDirection::Forward) {
    r.output = invlinear_forward<Scalar>(x, p);
    r.logdet = invlinear_logdet(p);
  } else {
    r.output = invlinear_inverse<Scalar>(x, p);
    r.logdet = -invlinear_logdet(p);
  }
  return r;
}

template <class Scalar>
FlowResult<Scalar> coupling_apply(const VecX<Scalar>& x,
                                  const VecX<Scalar>& cond,
                                  const CouplingParams<Scalar>& p,
                                  FlowDirection dir) {
  FlowResult<Scalar> r;
  VecX<Scalar> ld;
  if (dir == FlowDirection::Forward)
    r.output = coupling_forward<Scalar>(x, cond, p, ld);
  else
    r.output = coupling_inverse<Scalar>(x, cond, p, ld);
  r.logdet = ld[0];
  return r;
}

template <class Scalar>
FlowResult<Scalar> stack_transform(const VecX<Scalar>& x,
                                   const std::vector<VecX<Scalar>>& conds,
                                   const GlowStack<Scalar>& g,
                                   FlowDirection dir) {
  std::vector<MatX<Scalar>> cm;
  cm.reserve(conds.size());
  for (const auto& c : conds) cm.emplace_back(c);
  VecX<Scalar> ld;
  FlowResult<Scalar> r;
  if (dir == FlowDirection::Forward)
    r.output = stack_forward<Scalar>(x, cm, g, ld);
  else
    r.output = stack_inverse<Scalar>(x, cm, g, ld);
  r.logdet = ld[0];
  return r;
}

template <class Scalar>
Scalar frame_log_density(const VecX<Scalar>& x,
                         const std::vector<VecX<Scalar>>& conds,
                         const GlowStack<Scalar>& g) {
  std::vector<MatX<Scalar>> cm;
  cm.reserve(conds.size());
  for (const auto& c : conds) cm.emplace_back(c);
  return batch_log_density<Scalar>(x, cm, g)[0];
}

// ---------------------------------------------------------------------------
// Parameter traversal (trainable tensors only; permutation and diagonal signs
// are fixed at construction).

template <class Scalar>
TensorRefs<Scalar> collect_tensors(GlowStack<Scalar>& g,
                                   const std::string& prefix = "flow") {
  TensorRefs<Scalar> refs;
  for (int k = 0; k < g.num_steps(); ++k) {
    auto& s = g.steps[k];
    const std::string base = prefix + ".step" + std::to_string(k);
    refs.push_back(tensor_ref(base + ".actnorm.scale", s.actnorm.scale));
    refs.push_back(tensor_ref(base + ".actnorm.bias", s.actnorm.bias));
    refs.push_back(tensor_ref(base + ".linear.lower", s.linear.lower));
    refs.push_back(tensor_ref(base + ".linear.upper", s.linear.upper));
    refs.push_back(tensor_ref(base + ".linear.log_diag", s.linear.log_diag));
    refs.push_back(tensor_ref(base + ".coupling.w1", s.coupling.w1));
    refs.push_back(tensor_ref(base + ".coupling.b1", s.coupling.b1));
    refs.push_back(tensor_ref(base + ".coupling.w2", s.coupling.w2));
    refs.push_back(tensor_ref(base + ".coupling.b2", s.coupling.b2));
  }
  return refs;
}

// Same shapes, zero values, shared fixed fields; the gradient container.
template <class Scalar>
GlowStack<Scalar> zeros_like(const GlowStack<Scalar>& g) {
  GlowStack<Scalar> z = g;
  for (auto& s : z.steps) {
    s.actnorm.scale.setZero();
    s.actnorm.bias.setZero();
    s.linear.lower.setZero();
    s.linear.upper.setZero();
    s.linear.log_diag.setZero();
    s.coupling.w1.setZero();
    s.coupling.b1.setZero();
    s.coupling.w2.setZero();
    s.coupling.b2.setZero();
  }
  return z;
}

}  // namespace faceflow
