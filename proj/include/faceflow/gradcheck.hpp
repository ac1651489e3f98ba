#pragma once

#include <functional>
#include <string>

#include "faceflow/model.hpp"

// Central finite-difference verification of the analytic gradients. The
// check only ever calls the forward loss, so it stays independent of the
// reverse-mode code it validates.

namespace faceflow {

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_tensor;
  Eigen::Index worst_index = -1;
  double analytic = 0;
  double numeric = 0;
  Eigen::Index entries_checked = 0;
};

// Relative error with an absolute guard so that exactly-zero gradient pairs
// (structurally unused entries) compare clean.
inline double fd_rel_err(double a, double b) {
  const double denom = std::max(1e-6, std::abs(a) + std::abs(b));
  return std::abs(a - b) / denom;
}

template <class Scalar>
GradCheckResult fd_check(TensorRefs<Scalar>& params,
                         const TensorRefs<Scalar>& analytic,
                         const std::function<double()>& loss,
                         double step = 1e-5) {
  GradCheckResult res;
  for (size_t t = 0; t < params.size(); ++t) {
    Scalar* data = params[t].data;
    const Scalar* grad = analytic[t].data;
    const Eigen::Index n = params[t].size();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar saved = data[i];
      data[i] = saved + Scalar(step);
      const double up = loss();
      data[i] = saved - Scalar(step);
      const double down = loss();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = fd_rel_err(static_cast<double>(grad[i]), numeric);
      ++res.entries_checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_tensor = params[t].name;
        res.worst_index = i;
        res.analytic = static_cast<double>(grad[i]);
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// End-to-end check of every model parameter against the teacher-forced NLL.
template <class Scalar>
GradCheckResult gradcheck_model(DyadFlowModel<Scalar>& model,
                                const std::vector<SequenceExample<Scalar>>& batch,
                                double step = 1e-5) {
  DyadFlowModel<Scalar> grads = zeros_like(model);
  nll_and_gradients(batch, model, grads);
  TensorRefs<Scalar> prefs = collect_tensors(model);
  TensorRefs<Scalar> grefs = collect_tensors(grads);
  auto loss = [&]() -> double {
    NllTrace<Scalar> tr;
    nll_forward<Scalar>(batch, model, &tr);
    return -static_cast<double>(tr.per_frame_logp.mean());
  };
  return fd_check(prefs, grefs, loss, step);
}

}  // namespace faceflow
