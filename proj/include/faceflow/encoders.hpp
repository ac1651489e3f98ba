#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "faceflow/dense.hpp"
#include "faceflow/params.hpp"
#include "faceflow/rng.hpp"

// Modality encoders: each conditioning stream is run through a GRU and
// reduced to a fixed-length vector; encodings plus the raw autoregressive
// history concatenate and project to K distinct per-step conditioning
// vectors. Batched types use columns as items; a window batch is one matrix
// per timestep.

namespace faceflow {

// ---------------------------------------------------------------------------
// GRU

template <class Scalar>
struct GruLayer {
  MatX<Scalar> w_ih;  // 3h x input, gate rows ordered [reset; update; cand]
  MatX<Scalar> w_hh;  // 3h x h
  VecX<Scalar> b_ih;
  VecX<Scalar> b_hh;

  int hidden() const { return static_cast<int>(w_hh.cols()); }
  int input_dim() const { return static_cast<int>(w_ih.cols()); }
};

template <class Scalar>
struct GruParams {
  std::vector<GruLayer<Scalar>> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int hidden() const { return layers.empty() ? 0 : layers.front().hidden(); }
  int input_dim() const {
    return layers.empty() ? 0 : layers.front().input_dim();
  }
  // Final output of the top layer plus final hidden states of every layer.
  int encoding_dim() const { return hidden() * (num_layers() + 1); }
};

template <class Scalar>
GruParams<Scalar> make_gru(int input_dim, int hidden, int num_layers,
                           Rng& rng) {
  if (input_dim < 1 || hidden < 1 || num_layers < 1)
    throw std::invalid_argument("make_gru: bad dimensions");
  GruParams<Scalar> p;
  const double r = 1.0 / std::sqrt(static_cast<double>(hidden));
  auto fill = [&](MatX<Scalar>& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        m(i, j) = Scalar((2.0 * rng.uniform() - 1.0) * r);
  };
  for (int l = 0; l < num_layers; ++l) {
    GruLayer<Scalar> layer;
    const int in = l == 0 ? input_dim : hidden;
    layer.w_ih.resize(3 * hidden, in);
    layer.w_hh.resize(3 * hidden, hidden);
    fill(layer.w_ih);
    fill(layer.w_hh);
    layer.b_ih = VecX<Scalar>::Zero(3 * hidden);
    layer.b_hh = VecX<Scalar>::Zero(3 * hidden);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

template <class Scalar>
struct GruStepCache {
  MatX<Scalar> r, z, n, ghn;
};

template <class Scalar>
struct GruTrace {
  // h[l][t] is the state entering step t of layer l; h[l][T] is the final one.
  std::vector<std::vector<MatX<Scalar>>> h;
  std::vector<std::vector<GruStepCache<Scalar>>> gates;
};

template <class Scalar>
MatX<Scalar> sigmoid(const MatX<Scalar>& a) {
  return (Scalar(1) / (Scalar(1) + (-a.array()).exp())).matrix();
}

// Runs the recurrence left to right from zero state over a window batch and
// returns [top output at final step; final hidden state of each layer].
template <class Scalar>
MatX<Scalar> gru_forward(const std::vector<MatX<Scalar>>& window,
                         const GruParams<Scalar>& p,
                         GruTrace<Scalar>* trace = nullptr) {
  if (window.empty()) throw std::invalid_argument("gru: empty window");
  const int steps = static_cast<int>(window.size());
  const Eigen::Index batch = window.front().cols();
  const int h = p.hidden();
  const int num_layers = p.num_layers();
  if (window.front().rows() != p.input_dim())
    throw std::invalid_argument("gru: input feature dim mismatch");

  if (trace) {
    trace->h.assign(num_layers, {});
    trace->gates.assign(num_layers, {});
  }
  std::vector<MatX<Scalar>> cur = window;
  MatX<Scalar> enc(p.encoding_dim(), batch);
  for (int l = 0; l < num_layers; ++l) {
    const auto& layer = p.layers[l];
    MatX<Scalar> state = MatX<Scalar>::Zero(h, batch);
    if (trace) trace->h[l].push_back(state);
    for (int t = 0; t < steps; ++t) {
      MatX<Scalar> gi = (layer.w_ih * cur[t]).colwise() + layer.b_ih;
      MatX<Scalar> gh = (layer.w_hh * state).colwise() + layer.b_hh;
      MatX<Scalar> r = sigmoid<Scalar>(gi.topRows(h) + gh.topRows(h));
      MatX<Scalar> z = sigmoid<Scalar>(gi.middleRows(h, h) + gh.middleRows(h, h));
      MatX<Scalar> ghn = gh.bottomRows(h);
      MatX<Scalar> n =
          (gi.bottomRows(h).array() + r.array() * ghn.array()).tanh();
      MatX<Scalar> next = ((Scalar(1) - z.array()) * n.array() +
                           z.array() * state.array())
                              .matrix();
      if (trace) {
        trace->gates[l].push_back({r, z, n, std::move(ghn)});
        trace->h[l].push_back(next);
      }
      cur[t] = next;  // becomes the input sequence of the layer above
      state = std::move(next);
    }
    enc.middleRows(h * (1 + l), h) = state;
    if (l == num_layers - 1) enc.topRows(h) = state;
  }
  return enc;
}

// BPTT given the gradient of the encoding; accumulates into `grads` (a
// zeroed copy of the params).
template <class Scalar>
void gru_backward(const GruParams<Scalar>& p,
                  const std::vector<MatX<Scalar>>& window,
                  const GruTrace<Scalar>& trace, const MatX<Scalar>& genc,
                  GruParams<Scalar>& grads) {
  const int steps = static_cast<int>(window.size());
  const Eigen::Index batch = window.front().cols();
  const int h = p.hidden();
  const int num_layers = p.num_layers();

  // gradient flowing into each timestep's hidden state from the layer above
  std::vector<MatX<Scalar>> from_above(steps, MatX<Scalar>::Zero(h, batch));
  for (int l = num_layers - 1; l >= 0; --l) {
    const auto& layer = p.layers[l];
    auto& glayer = grads.layers[l];
    MatX<Scalar> g_rec = genc.middleRows(h * (1 + l), h);
    if (l == num_layers - 1) g_rec += genc.topRows(h);
    std::vector<MatX<Scalar>> to_below;
    if (l > 0) to_below.assign(steps, MatX<Scalar>());
    for (int t = steps - 1; t >= 0; --t) {
      const auto& gate = trace.gates[l][t];
      const MatX<Scalar>& h_prev = trace.h[l][t];
      const MatX<Scalar>& x_t = l == 0 ? window[t] : trace.h[l - 1][t + 1];
      MatX<Scalar> gh_total = g_rec + from_above[t];

      MatX<Scalar> dz_pre = (gh_total.array() *
                             (h_prev.array() - gate.n.array()) *
                             gate.z.array() * (Scalar(1) - gate.z.array()))
                                .matrix();
      MatX<Scalar> dn_pre = (gh_total.array() * (Scalar(1) - gate.z.array()) *
                             (Scalar(1) - gate.n.array().square()))
                                .matrix();
      MatX<Scalar> dr_pre = (dn_pre.array() * gate.ghn.array() *
                             gate.r.array() * (Scalar(1) - gate.r.array()))
                                .matrix();

      MatX<Scalar> dgi(3 * h, batch);
      dgi.topRows(h) = dr_pre;
      dgi.middleRows(h, h) = dz_pre;
      dgi.bottomRows(h) = dn_pre;
      MatX<Scalar> dgh(3 * h, batch);
      dgh.topRows(h) = dr_pre;
      dgh.middleRows(h, h) = dz_pre;
      dgh.bottomRows(h) = (dn_pre.array() * gate.r.array()).matrix();

      glayer.w_ih += dgi * x_t.transpose();
      glayer.b_ih += dgi.rowwise().sum();
      glayer.w_hh += dgh * h_prev.transpose();
      glayer.b_hh += dgh.rowwise().sum();

      if (l > 0) to_below[t] = layer.w_ih.transpose() * dgi;
      g_rec = layer.w_hh.transpose() * dgh +
              (gh_total.array() * gate.z.array()).matrix();
    }
    if (l > 0) from_above = std::move(to_below);
  }
}

template <class Scalar>
GruParams<Scalar> zeros_like(const GruParams<Scalar>& p) {
  GruParams<Scalar> z = p;
  for (auto& l : z.layers) {
    l.w_ih.setZero();
    l.w_hh.setZero();
    l.b_ih.setZero();
    l.b_hh.setZero();
  }
  return z;
}

template <class Scalar>
TensorRefs<Scalar> collect_tensors(GruParams<Scalar>& p,
                                   const std::string& prefix) {
  TensorRefs<Scalar> refs;
  for (int l = 0; l < p.num_layers(); ++l) {
    const std::string base = prefix + ".layer" + std::to_string(l);
    refs.push_back(tensor_ref(base + ".w_ih", p.layers[l].w_ih));
    refs.push_back(tensor_ref(base + ".w_hh", p.layers[l].w_hh));
    refs.push_back(tensor_ref(base + ".b_ih", p.layers[l].b_ih));
    refs.push_back(tensor_ref(base + ".b_hh", p.layers[l].b_hh));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Conditioning assembly

struct AblationFlags {
  bool no_face = false;    // drop the interlocutor facial stream
  bool no_speech = false;  // drop the interlocutor speech stream
};

template <class Scalar>
struct StepProjection {
  MatX<Scalar> w;
  VecX<Scalar> b;
};

// Independent projection per step of flow.
template <class Scalar>
std::vector<StepProjection<Scalar>> make_projections(int num_steps,
                                                     int cond_dim,
                                                     int concat_dim,
                                                     Rng& rng) {
  std::vector<StepProjection<Scalar>> proj(num_steps);
  const double r = 1.0 / std::sqrt(static_cast<double>(concat_dim));
  for (auto& p : proj) {
    p.w.resize(cond_dim, concat_dim);
    for (Eigen::Index j = 0; j < p.w.cols(); ++j)
      for (Eigen::Index i = 0; i < p.w.rows(); ++i)
        p.w(i, j) = Scalar((2.0 * rng.uniform() - 1.0) * r);
    p.b = VecX<Scalar>::Zero(cond_dim);
  }
  return proj;
}

template <class Scalar>
struct ConditioningTrace {
  GruTrace<Scalar> avatar_speech, inter_speech, inter_face;
  MatX<Scalar> concat;
  std::vector<MatX<Scalar>> preact;
};

// Concatenation layout: [avatar speech enc | interlocutor speech enc |
// interlocutor face enc | flattened history], ablated slices omitted
// entirely (their encoders are not evaluated).
template <class Scalar>
std::vector<MatX<Scalar>> build_conditioning_batch(
    const std::vector<MatX<Scalar>>& avatar_speech,
    const std::vector<MatX<Scalar>>& inter_speech,
    const std::vector<MatX<Scalar>>& inter_face,
    const MatX<Scalar>& history_flat, const GruParams<Scalar>& enc_as,
    const GruParams<Scalar>& enc_is, const GruParams<Scalar>& enc_if,
    const std::vector<StepProjection<Scalar>>& projections,
    const AblationFlags& flags, ConditioningTrace<Scalar>* trace = nullptr) {
  const Eigen::Index batch = history_flat.cols();
  Eigen::Index concat_rows = enc_as.encoding_dim() + history_flat.rows();
  if (!flags.no_speech) concat_rows += enc_is.encoding_dim();
  if (!flags.no_face) concat_rows += enc_if.encoding_dim();

  MatX<Scalar> concat(concat_rows, batch);
  Eigen::Index row = 0;
  concat.middleRows(row, enc_as.encoding_dim()) = gru_forward(
      avatar_speech, enc_as, trace ? &trace->avatar_speech : nullptr);
  row += enc_as.encoding_dim();
  if (!flags.no_speech) {
    concat.middleRows(row, enc_is.encoding_dim()) = gru_forward(
        inter_speech, enc_is, trace ? &trace->inter_speech : nullptr);
    row += enc_is.encoding_dim();
  }
  if (!flags.no_face) {
    concat.middleRows(row, enc_if.encoding_dim()) =
        gru_forward(inter_face, enc_if, trace ? &trace->inter_face : nullptr);
    row += enc_if.encoding_dim();
  }
  concat.middleRows(row, history_flat.rows()) = history_flat;

  std::vector<MatX<Scalar>> conds(projections.size());
  if (trace) {
    trace->concat = concat;
    trace->preact.resize(projections.size());
  }
  for (size_t k = 0; k < projections.size(); ++k) {
    if (projections[k].w.cols() != concat_rows)
      throw std::invalid_argument(
          "conditioning: projection input does not match modality layout "
          "(ablation flags inconsistent with provided windows?)");
    MatX<Scalar> a = (projections[k].w * concat).colwise() + projections[k].b;
    conds[k] = leaky_relu(a);
    if (trace) trace->preact[k] = std::move(a);
  }
  return conds;
}

// Backward through projections and GRU encoders given per-step conditioning
// gradients. History is ground-truth input, so its slice of the concat
// gradient is dropped.
template <class Scalar>
void conditioning_backward(
    const std::vector<MatX<Scalar>>& avatar_speech,
    const std::vector<MatX<Scalar>>& inter_speech,
    const std::vector<MatX<Scalar>>& inter_face, const GruParams<Scalar>& enc_as,
    const GruParams<Scalar>& enc_is, const GruParams<Scalar>& enc_if,
    const std::vector<StepProjection<Scalar>>& projections,
    const AblationFlags& flags, const ConditioningTrace<Scalar>& trace,
    const std::vector<MatX<Scalar>>& gconds, GruParams<Scalar>& grads_as,
    GruParams<Scalar>& grads_is, GruParams<Scalar>& grads_if,
    std::vector<StepProjection<Scalar>>& grads_proj) {
  MatX<Scalar> gconcat =
      MatX<Scalar>::Zero(trace.concat.rows(), trace.concat.cols());
  for (size_t k = 0; k < projections.size(); ++k) {
    MatX<Scalar> ga =
        (gconds[k].array() * leaky_relu_grad(trace.preact[k]).array()).matrix();
    grads_proj[k].w += ga * trace.concat.transpose();
    grads_proj[k].b += ga.rowwise().sum();
    gconcat += projections[k].w.transpose() * ga;
  }
  Eigen::Index row = 0;
  MatX<Scalar> slice = gconcat.middleRows(row, enc_as.encoding_dim());
  gru_backward(enc_as, avatar_speech, trace.avatar_speech, slice, grads_as);
  row += enc_as.encoding_dim();
  if (!flags.no_speech) {
    slice = gconcat.middleRows(row, enc_is.encoding_dim());
    gru_backward(enc_is, inter_speech, trace.inter_speech, slice, grads_is);
    row += enc_is.encoding_dim();
  }
  if (!flags.no_face) {
    slice = gconcat.middleRows(row, enc_if.encoding_dim());
    gru_backward(enc_if, inter_face, trace.inter_face, slice, grads_if);
  }
}

// ---------------------------------------------------------------------------
// Single-window API

enum class ModalityTag { AvatarSpeech, InterlocutorSpeech, InterlocutorFace };

struct ModalityWindow {
  MatXd frames;  // feature dim x window length
  ModalityTag tag = ModalityTag::AvatarSpeech;

  int window_len() const { return static_cast<int>(frames.cols()); }
};

struct AutoregressiveHistory {
  MatXd frames;  // facial dim x t_history, zero columns before sequence start

  VecXd flattened() const {
    return Eigen::Map<const VecXd>(frames.data(), frames.size());
  }
};

struct ConditioningSet {
  std::vector<VecXd> per_step;
};

inline std::vector<MatXd> window_to_steps(const MatXd& frames) {
  std::vector<MatXd> steps;
  steps.reserve(frames.cols());
  for (Eigen::Index t = 0; t < frames.cols(); ++t)
    steps.emplace_back(frames.col(t));
  return steps;
}

inline VecXd gru_encode(const ModalityWindow& window,
                        const GruParams<double>& p) {
  return gru_forward(window_to_steps(window.frames), p);
}

inline ConditioningSet build_conditioning(
    const ModalityWindow& avatar_speech, const ModalityWindow& inter_speech,
    const ModalityWindow& inter_face, const AutoregressiveHistory& history,
    const GruParams<double>& enc_as, const GruParams<double>& enc_is,
    const GruParams<double>& enc_if,
    const std::vector<StepProjection<double>>& projections,
    const AblationFlags& flags) {
  MatXd hist = history.flattened();
  auto conds = build_conditioning_batch<double>(
      window_to_steps(avatar_speech.frames),
      window_to_steps(inter_speech.frames), window_to_steps(inter_face.frames),
      hist, enc_as, enc_is, enc_if, projections, flags);
  ConditioningSet set;
  set.per_step.reserve(conds.size());
  for (auto& c : conds) set.per_step.emplace_back(std::move(c));
  return set;
}

}  // namespace faceflow
