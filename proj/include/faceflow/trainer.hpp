#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "faceflow/config.hpp"
#include "faceflow/data.hpp"
#include "faceflow/model.hpp"
#include "faceflow/rng.hpp"

namespace faceflow {

// Linear warmup to the configured rate, constant afterwards.
double warmup_lr(long long step, const TrainConfig& cfg);

struct AdamState {
  std::vector<MatXd> m, v;  // one pair per tensor, traversal order
  long long step = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  static AdamState init(const TensorRefs<double>& params, double beta1,
                        double beta2, double epsilon);
};

// Standard bias-corrected update; throws (naming the tensor) on non-finite
// gradients.
void adam_step(const TensorRefs<double>& params, const TensorRefs<double>& grads,
               AdamState& state, double lr);

// Uniform random derangement of 0..n-1 (rejection sampled); n >= 2.
std::vector<int> derange(int n, Rng& rng);

// Reassigns each item's interlocutor streams (f_i and s_i travel together)
// from a deranged source item; own f_a/s_a untouched.
std::vector<SequenceExample<double>> make_negative_batch(
    const std::vector<SequenceExample<double>>& batch, Rng& rng);

struct StepRecord {
  long long step = 0;
  double lr = 0;
  double nll = 0;   // observed mean NLL of the batch (nats/frame)
  double loss = 0;  // contribution after the negative-sample sign rule
  bool negative = false;
  bool skipped = false;
};

// Mutable training state; checkpointable mid-run.
struct TrainerState {
  AdamState adam;
  Rng rng{0};
  long long global_step = 0;
  int epoch = 0;
  int step_in_epoch = 0;
};

struct TrainData {
  const std::vector<SessionData>* sessions = nullptr;
  std::vector<Segment> segments;  // training split

  Eigen::Index total_frames() const {
    Eigen::Index n = 0;
    for (const auto& s : segments) n += s.len;
    return n;
  }
};

// One optimizer step on one batch; split out so the negative-sample
// mechanics stay unit-testable.
StepRecord trainer_process_batch(DyadFlowModel<double>& model,
                                 const std::vector<SequenceExample<double>>& batch,
                                 bool negative, AdamState& adam, double lr,
                                 long long step);

struct EpochMetrics {
  int steps = 0;
  int negative_batches = 0;
  int skipped_batches = 0;
  double mean_positive_nll = 0;
  double mean_negative_nll = 0;
};

// Teacher-forced maximum-likelihood training with the negative-sample scheme.
// Batch windows are drawn with random offsets from the training segments;
// all randomness flows from state.rng in a fixed order (per batch: segment,
// offset and role per item, then the negative coin, then the derangement), so
// a resumed run replays an uninterrupted one exactly — including from a
// checkpoint written mid-epoch (`max_steps` stops early, leaving
// state.step_in_epoch where the next call picks up). Metrics lines go to
// `metrics` as "step= lr= loss= negative= skipped=" records.
EpochMetrics train_epoch(DyadFlowModel<double>& model, const TrainData& data,
                         const TrainConfig& cfg, TrainerState& state,
                         std::ostream* metrics,
                         std::vector<StepRecord>* records = nullptr,
                         int max_steps = -1);

void train(DyadFlowModel<double>& model, const TrainData& data,
           const TrainConfig& cfg, TrainerState& state, std::ostream* metrics,
           std::vector<StepRecord>* records = nullptr);

int derive_steps_per_epoch(const TrainData& data, const TrainConfig& cfg);

}  // namespace faceflow
