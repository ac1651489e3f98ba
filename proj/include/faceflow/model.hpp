#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "faceflow/encoders.hpp"
#include "faceflow/flow.hpp"

// Full autoregressive conditional model: modality encoders feeding a stack of
// flow steps over per-frame facial vectors. Tracks are matrices with one
// column per frame at 25 fps.

namespace faceflow {

struct ModelConfig {
  int facial_dim = 56;
  int acoustic_dim = 30;
  int flow_steps = 16;
  int cond_dim = 512;
  int coupling_hidden = 128;
  double coupling_log_scale_bound = 2.0;

  // conditioning history lengths, in frames
  int t_avatar_speech = 25;
  int t_inter_speech = 25;
  int t_inter_face = 25;
  int t_history = 24;

  int gru_hidden = 64;
  int gru_layers = 2;
  AblationFlags ablation;
  double fps = 25.0;

  int encoder_out_dim() const { return gru_hidden * (gru_layers + 1); }

  int concat_dim() const {
    int n = encoder_out_dim() + facial_dim * t_history;
    if (!ablation.no_speech) n += encoder_out_dim();
    if (!ablation.no_face) n += encoder_out_dim();
    return n;
  }

  void validate() const {
    if (facial_dim <= 0 || facial_dim % 2 != 0)
      throw std::invalid_argument("config: facial_dim must be positive even");
    if (acoustic_dim <= 0) throw std::invalid_argument("config: acoustic_dim");
    if (flow_steps < 1) throw std::invalid_argument("config: flow_steps >= 1");
    if (cond_dim < 0 || coupling_hidden < 1)
      throw std::invalid_argument("config: conditioning sizes");
    if (t_avatar_speech < 1 || t_inter_speech < 1 || t_inter_face < 1 ||
        t_history < 1)
      throw std::invalid_argument("config: history lengths must be >= 1");
    if (gru_hidden < 1 || gru_layers < 1)
      throw std::invalid_argument("config: encoder sizes");
    if (fps <= 0) throw std::invalid_argument("config: fps");
  }
};

template <class Scalar>
struct DyadFlowModel {
  ModelConfig cfg;
  GlowStack<Scalar> flow;
  GruParams<Scalar> enc_avatar_speech;
  GruParams<Scalar> enc_inter_speech;
  GruParams<Scalar> enc_inter_face;
  std::vector<StepProjection<Scalar>> projections;

  // Instrumentation: frames whose autoregressive history came from ground
  // truth vs. from model samples. Training must only ever add to the former.
  // Atomic so concurrent evaluation of a frozen model stays race-free;
  // copyable so models copy like values.
  struct Counter {
    std::atomic<std::int64_t> value{0};
    Counter() = default;
    Counter(const Counter& o) : value(o.value.load()) {}
    Counter& operator=(const Counter& o) {
      value.store(o.value.load());
      return *this;
    }
    Counter& operator+=(std::int64_t n) {
      value.fetch_add(n, std::memory_order_relaxed);
      return *this;
    }
    operator std::int64_t() const { return value.load(); }
  };
  struct Counters {
    Counter teacher_forced_frames;
    Counter sampled_frames;
  };
  mutable Counters counters;
};

template <class Scalar>
DyadFlowModel<Scalar> make_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  DyadFlowModel<Scalar> m;
  m.cfg = cfg;
  m.flow = make_glow_stack<Scalar>(cfg.facial_dim, cfg.flow_steps,
                                   cfg.cond_dim, cfg.coupling_hidden, rng,
                                   Scalar(cfg.coupling_log_scale_bound));
  m.enc_avatar_speech =
      make_gru<Scalar>(cfg.acoustic_dim, cfg.gru_hidden, cfg.gru_layers, rng);
  m.enc_inter_speech =
      make_gru<Scalar>(cfg.acoustic_dim, cfg.gru_hidden, cfg.gru_layers, rng);
  m.enc_inter_face =
      make_gru<Scalar>(cfg.facial_dim, cfg.gru_hidden, cfg.gru_layers, rng);
  m.projections = make_projections<Scalar>(cfg.flow_steps, cfg.cond_dim,
                                           cfg.concat_dim(), rng);
  return m;
}

// Generic parameter point for gradient oracles: every tensor nonzero,
// actnorms marked initialized.
template <class Scalar>
void randomize_model(DyadFlowModel<Scalar>& m, Rng& rng) {
  randomize_stack(m.flow, rng);
  auto jitter = [&](TensorRefs<Scalar> refs) {
    for (auto& r : refs) {
      auto map = r.map();
      for (Eigen::Index j = 0; j < map.cols(); ++j)
        for (Eigen::Index i = 0; i < map.rows(); ++i)
          map(i, j) += Scalar(rng.normal() * 0.05);
    }
  };
  jitter(collect_tensors(m.enc_avatar_speech, "a"));
  jitter(collect_tensors(m.enc_inter_speech, "b"));
  jitter(collect_tensors(m.enc_inter_face, "c"));
  for (auto& p : m.projections) {
    for (Eigen::Index j = 0; j < p.w.cols(); ++j)
      for (Eigen::Index i = 0; i < p.w.rows(); ++i)
        p.w(i, j) += Scalar(rng.normal() * 0.02);
    for (Eigen::Index i = 0; i < p.b.size(); ++i)
      p.b[i] += Scalar(rng.normal() * 0.02);
  }
}

template <class Scalar>
DyadFlowModel<Scalar> zeros_like(const DyadFlowModel<Scalar>& m) {
  DyadFlowModel<Scalar> z = m;
  z.flow = zeros_like(m.flow);
  z.enc_avatar_speech = zeros_like(m.enc_avatar_speech);
  z.enc_inter_speech = zeros_like(m.enc_inter_speech);
  z.enc_inter_face = zeros_like(m.enc_inter_face);
  for (auto& p : z.projections) {
    p.w.setZero();
    p.b.setZero();
  }
  z.counters = {};
  return z;
}

template <class Scalar>
TensorRefs<Scalar> collect_tensors(DyadFlowModel<Scalar>& m) {
  TensorRefs<Scalar> refs = collect_tensors(m.flow, "flow");
  auto append = [&](TensorRefs<Scalar> more) {
    refs.insert(refs.end(), more.begin(), more.end());
  };
  append(collect_tensors(m.enc_avatar_speech, "enc.avatar_speech"));
  append(collect_tensors(m.enc_inter_speech, "enc.inter_speech"));
  append(collect_tensors(m.enc_inter_face, "enc.inter_face"));
  for (size_t k = 0; k < m.projections.size(); ++k) {
    const std::string base = "proj.step" + std::to_string(k);
    refs.push_back(tensor_ref(base + ".w", m.projections[k].w));
    refs.push_back(tensor_ref(base + ".b", m.projections[k].b));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Sequence containers

// One time-aligned example with roles already assigned: the avatar's facial
// target plus the four conditioning streams' sources.
template <class Scalar>
struct SequenceExample {
  MatX<Scalar> f_a;  // avatar facial track (target), facial_dim x T
  MatX<Scalar> s_a;  // avatar acoustic track
  MatX<Scalar> s_i;  // interlocutor acoustic track
  MatX<Scalar> f_i;  // interlocutor facial track

  Eigen::Index length() const { return f_a.cols(); }
};

template <class Scalar>
void check_sequence(const SequenceExample<Scalar>& s, const ModelConfig& cfg) {
  if (s.f_a.cols() < 1) throw std::invalid_argument("sequence: empty");
  if (s.s_a.cols() != s.f_a.cols() || s.s_i.cols() != s.f_a.cols() ||
      s.f_i.cols() != s.f_a.cols())
    throw std::invalid_argument("sequence: track lengths differ");
  if (s.f_a.rows() != cfg.facial_dim || s.f_i.rows() != cfg.facial_dim ||
      s.s_a.rows() != cfg.acoustic_dim || s.s_i.rows() != cfg.acoustic_dim)
    throw std::invalid_argument("sequence: feature dims differ from config");
  if (!s.f_a.allFinite() || !s.s_a.allFinite() || !s.s_i.allFinite() ||
      !s.f_i.allFinite())
    throw std::invalid_argument("sequence: non-finite features");
}

// ---------------------------------------------------------------------------
// Window gathering. Conditioning windows for frame t cover [t-w, t-1]
// (strictly causal), zero-padded before the sequence start.

template <class Scalar>
struct GatheredBatch {
  MatX<Scalar> target;                  // facial_dim x N
  MatX<Scalar> history;                 // facial_dim*t_history x N
  std::vector<MatX<Scalar>> avatar_speech;
  std::vector<MatX<Scalar>> inter_speech;
  std::vector<MatX<Scalar>> inter_face;
  std::vector<Eigen::Index> item_offsets;  // column range per sequence
  std::vector<Eigen::Index> item_lengths;
};

template <class Scalar>
void gather_window(const MatX<Scalar>& track, Eigen::Index frame, int wlen,
                   std::vector<MatX<Scalar>>& out, Eigen::Index col) {
  for (int j = 0; j < wlen; ++j) {
    const Eigen::Index src = frame - wlen + j;
    if (src >= 0) out[j].col(col) = track.col(src);
  }
}

template <class Scalar>
GatheredBatch<Scalar> gather_batch(
    const std::vector<SequenceExample<Scalar>>& batch, const ModelConfig& cfg) {
  Eigen::Index total = 0;
  for (const auto& s : batch) {
    check_sequence(s, cfg);
    total += s.length();
  }
  GatheredBatch<Scalar> g;
  g.target.resize(cfg.facial_dim, total);
  g.history = MatX<Scalar>::Zero(cfg.facial_dim * cfg.t_history, total);
  auto zero_steps = [&](int wlen, int dim) {
    return std::vector<MatX<Scalar>>(wlen, MatX<Scalar>::Zero(dim, total));
  };
  g.avatar_speech = zero_steps(cfg.t_avatar_speech, cfg.acoustic_dim);
  g.inter_speech = zero_steps(cfg.t_inter_speech, cfg.acoustic_dim);
  g.inter_face = zero_steps(cfg.t_inter_face, cfg.facial_dim);

  Eigen::Index col = 0;
  for (const auto& s : batch) {
    g.item_offsets.push_back(col);
    g.item_lengths.push_back(s.length());
    for (Eigen::Index t = 0; t < s.length(); ++t, ++col) {
      g.target.col(col) = s.f_a.col(t);
      gather_window(s.s_a, t, cfg.t_avatar_speech, g.avatar_speech, col);
      gather_window(s.s_i, t, cfg.t_inter_speech, g.inter_speech, col);
      gather_window(s.f_i, t, cfg.t_inter_face, g.inter_face, col);
      for (int j = 0; j < cfg.t_history; ++j) {
        const Eigen::Index src = t - cfg.t_history + j;
        if (src >= 0)
          g.history.block(j * cfg.facial_dim, col, cfg.facial_dim, 1) =
              s.f_a.col(src);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Teacher-forced likelihood

template <class Scalar>
struct NllTrace {
  GatheredBatch<Scalar> gathered;
  ConditioningTrace<Scalar> cond;
  StackTrace<Scalar> flow;
  MatX<Scalar> z;
  VecX<Scalar> per_frame_logp;
};

template <class Scalar>
VecX<Scalar> nll_forward(const std::vector<SequenceExample<Scalar>>& batch,
                         const DyadFlowModel<Scalar>& m,
                         NllTrace<Scalar>* trace) {
  if (batch.empty()) throw std::invalid_argument("nll: empty batch");
  NllTrace<Scalar> local;
  NllTrace<Scalar>& tr = trace ? *trace : local;
  tr.gathered = gather_batch(batch, m.cfg);
  auto conds = build_conditioning_batch(
      tr.gathered.avatar_speech, tr.gathered.inter_speech,
      tr.gathered.inter_face, tr.gathered.history, m.enc_avatar_speech,
      m.enc_inter_speech, m.enc_inter_face, m.projections, m.cfg.ablation,
      trace ? &tr.cond : nullptr);
  VecX<Scalar> logdet;
  tr.z = stack_forward(tr.gathered.target, conds, m.flow, logdet,
                       trace ? &tr.flow : nullptr);
  tr.per_frame_logp = gaussian_log_density(tr.z) + logdet;
  m.counters.teacher_forced_frames += tr.gathered.target.cols();

  VecX<Scalar> per_item(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    per_item[i] = -tr.per_frame_logp
                       .segment(tr.gathered.item_offsets[i],
                                tr.gathered.item_lengths[i])
                       .mean();
  }
  return per_item;
}

// Mean NLL in nats/frame over every frame of the batch, with exact gradients
// for all parameters accumulated into `grads`.
template <class Scalar>
Scalar nll_and_gradients(const std::vector<SequenceExample<Scalar>>& batch,
                         const DyadFlowModel<Scalar>& m,
                         DyadFlowModel<Scalar>& grads) {
  NllTrace<Scalar> tr;
  nll_forward(batch, m, &tr);
  const Eigen::Index n = tr.z.cols();
  const Scalar inv_n = Scalar(1) / Scalar(n);
  MatX<Scalar> gz = tr.z * inv_n;
  VecX<Scalar> gld = VecX<Scalar>::Constant(n, -inv_n);
  std::vector<MatX<Scalar>> gconds;
  stack_backward(m.flow, tr.flow, gz, gld, grads.flow,
                 static_cast<MatX<Scalar>*>(nullptr), &gconds);
  std::vector<StepProjection<Scalar>> gproj(grads.projections.size());
  for (size_t k = 0; k < gproj.size(); ++k) {
    gproj[k].w.setZero(m.projections[k].w.rows(), m.projections[k].w.cols());
    gproj[k].b.setZero(m.projections[k].b.size());
  }
  conditioning_backward(tr.gathered.avatar_speech, tr.gathered.inter_speech,
                        tr.gathered.inter_face, m.enc_avatar_speech,
                        m.enc_inter_speech, m.enc_inter_face, m.projections,
                        m.cfg.ablation, tr.cond, gconds,
                        grads.enc_avatar_speech, grads.enc_inter_speech,
                        grads.enc_inter_face, gproj);
  for (size_t k = 0; k < gproj.size(); ++k) {
    grads.projections[k].w += gproj[k].w;
    grads.projections[k].b += gproj[k].b;
  }
  return -tr.per_frame_logp.mean();
}

// Mean NLL (nats/frame) of one teacher-forced sequence.
template <class Scalar>
Scalar sequence_nll(const SequenceExample<Scalar>& seq,
                    const DyadFlowModel<Scalar>& m) {
  std::vector<SequenceExample<Scalar>> batch{seq};
  return nll_forward<Scalar>(batch, m, nullptr)[0];
}

// Per-frame log densities of one sequence (for sequence-total likelihoods).
template <class Scalar>
VecX<Scalar> sequence_log_density(const SequenceExample<Scalar>& seq,
                                  const DyadFlowModel<Scalar>& m) {
  std::vector<SequenceExample<Scalar>> batch{seq};
  NllTrace<Scalar> tr;
  nll_forward(batch, m, &tr);
  return tr.per_frame_logp;
}

// Data-dependent actnorm initialization from a teacher-forced batch.
template <class Scalar>
void initialize_actnorm(DyadFlowModel<Scalar>& m,
                        const std::vector<SequenceExample<Scalar>>& batch) {
  GatheredBatch<Scalar> g = gather_batch(batch, m.cfg);
  auto conds = build_conditioning_batch(
      g.avatar_speech, g.inter_speech, g.inter_face, g.history,
      m.enc_avatar_speech, m.enc_inter_speech, m.enc_inter_face, m.projections,
      m.cfg.ablation, static_cast<ConditioningTrace<Scalar>*>(nullptr));
  actnorm_init_forward(m.flow, g.target, conds);
}

template <class Scalar>
bool actnorm_initialized(const DyadFlowModel<Scalar>& m) {
  for (const auto& s : m.flow.steps)
    if (!s.actnorm.initialized) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Autoregressive generation

struct GenerationConfig {
  double temperature = 1.0;  // std-dev multiplier on the latent noise
  std::uint64_t seed = 0;
};

// Samples a facial track frame by frame, feeding generated frames back as
// autoregressive history; missing history at the start is zeros. If
// `seed_motion` is given, its frames are copied through verbatim and used as
// history before generation takes over. `per_frame_logp`, when requested,
// holds the model log density of each generated frame (zeros over seeded
// frames).
template <class Scalar>
MatX<Scalar> generate(const MatX<Scalar>& s_a, const MatX<Scalar>& s_i,
                      const MatX<Scalar>& f_i, const DyadFlowModel<Scalar>& m,
                      const GenerationConfig& gcfg,
                      const MatX<Scalar>* seed_motion = nullptr,
                      VecX<Scalar>* per_frame_logp = nullptr) {
  if (gcfg.temperature < 0)
    throw std::invalid_argument("generate: temperature must be >= 0");
  if (s_i.cols() != s_a.cols() || f_i.cols() != s_a.cols())
    throw std::invalid_argument("generate: conditioning lengths differ");
  if (!actnorm_initialized(m))
    throw std::runtime_error("generate: model has uninitialized actnorm");
  const ModelConfig& cfg = m.cfg;
  const Eigen::Index total = s_a.cols();
  const Eigen::Index seeded =
      seed_motion ? std::min<Eigen::Index>(seed_motion->cols(), total) : 0;

  Rng rng(gcfg.seed);
  MatX<Scalar> out = MatX<Scalar>::Zero(cfg.facial_dim, total);
  if (seeded > 0) out.leftCols(seeded) = seed_motion->leftCols(seeded);
  if (per_frame_logp) *per_frame_logp = VecX<Scalar>::Zero(total);

  MatX<Scalar> hist(cfg.facial_dim * cfg.t_history, 1);
  std::vector<MatX<Scalar>> asw(cfg.t_avatar_speech,
                                MatX<Scalar>::Zero(cfg.acoustic_dim, 1));
  std::vector<MatX<Scalar>> isw(cfg.t_inter_speech,
                                MatX<Scalar>::Zero(cfg.acoustic_dim, 1));
  std::vector<MatX<Scalar>> ifw(cfg.t_inter_face,
                                MatX<Scalar>::Zero(cfg.facial_dim, 1));

  for (Eigen::Index t = seeded; t < total; ++t) {
    for (auto& w : asw) w.setZero();
    for (auto& w : isw) w.setZero();
    for (auto& w : ifw) w.setZero();
    gather_window(s_a, t, cfg.t_avatar_speech, asw, 0);
    gather_window(s_i, t, cfg.t_inter_speech, isw, 0);
    gather_window(f_i, t, cfg.t_inter_face, ifw, 0);
    hist.setZero();
    for (int j = 0; j < cfg.t_history; ++j) {
      const Eigen::Index src = t - cfg.t_history + j;
      if (src >= 0)
        hist.block(j * cfg.facial_dim, 0, cfg.facial_dim, 1) = out.col(src);
    }
    auto conds = build_conditioning_batch(
        asw, isw, ifw, hist, m.enc_avatar_speech, m.enc_inter_speech,
        m.enc_inter_face, m.projections, cfg.ablation,
        static_cast<ConditioningTrace<Scalar>*>(nullptr));
    MatX<Scalar> z(cfg.facial_dim, 1);
    for (int i = 0; i < cfg.facial_dim; ++i)
      z(i, 0) = Scalar(rng.normal() * gcfg.temperature);
    VecX<Scalar> ld_inv;
    MatX<Scalar> x = stack_inverse(z, conds, m.flow, ld_inv);
    out.col(t) = x.col(0);
    if (per_frame_logp) {
      // change of variables: logdet of the forward map is minus the
      // inverse-path logdet at the same point
      (*per_frame_logp)[t] = gaussian_log_density(z)[0] - ld_inv[0];
    }
  }
  m.counters.sampled_frames += total - seeded;
  return out;
}

}  // namespace faceflow
