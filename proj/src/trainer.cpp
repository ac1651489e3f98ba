#include "faceflow/trainer.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace faceflow {

double warmup_lr(long long step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("warmup_lr: negative step");
  if (cfg.warmup_steps <= 0) return cfg.initial_lr;
  const double f = static_cast<double>(step) / cfg.warmup_steps;
  return cfg.initial_lr * std::min(1.0, f);
}

AdamState AdamState::init(const TensorRefs<double>& params, double beta1,
                          double beta2, double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const auto& p : params) {
    s.m.emplace_back(MatXd::Zero(p.rows, p.cols));
    s.v.emplace_back(MatXd::Zero(p.rows, p.cols));
  }
  return s;
}

void adam_step(const TensorRefs<double>& params, const TensorRefs<double>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: tensor count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].map();
    auto g = grads[i].map();
    if (!g.allFinite())
      throw std::runtime_error("adam_step: non-finite gradient in " +
                               params[i].name);
    MatXd& m = state.m[i];
    MatXd& v = state.v[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.array().square().matrix();
    p.array() -= lr * (m.array() / bc1) /
                 ((v.array() / bc2).sqrt() + state.epsilon);
  }
}

std::vector<int> derange(int n, Rng& rng) {
  if (n < 2)
    throw std::invalid_argument("derange: no derangement exists for n < 2");
  std::vector<int> p(n);
  while (true) {
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n; i > 1; --i)
      std::swap(p[i - 1], p[rng.below(static_cast<std::uint64_t>(i))]);
    bool fixed_point = false;
    for (int i = 0; i < n; ++i)
      if (p[i] == i) {
        fixed_point = true;
        break;
      }
    if (!fixed_point) return p;
  }
}

std::vector<SequenceExample<double>> make_negative_batch(
    const std::vector<SequenceExample<double>>& batch, Rng& rng) {
  if (batch.size() < 2)
    throw std::invalid_argument("make_negative_batch: need batch size >= 2");
  std::vector<int> p = derange(static_cast<int>(batch.size()), rng);
  std::vector<SequenceExample<double>> out = batch;
  for (size_t i = 0; i < batch.size(); ++i) {
    out[i].f_i = batch[p[i]].f_i;
    out[i].s_i = batch[p[i]].s_i;
  }
  return out;
}

StepRecord trainer_process_batch(DyadFlowModel<double>& model,
                                 const std::vector<SequenceExample<double>>& batch,
                                 bool negative, AdamState& adam, double lr,
                                 long long step) {
  StepRecord rec;
  rec.step = step;
  rec.lr = lr;
  rec.negative = negative;

  DyadFlowModel<double> grads = zeros_like(model);
  rec.nll = nll_and_gradients(batch, model, grads);

  if (negative && rec.nll <= 0) {
    // pushing the mismatched likelihood further down would mean ascending a
    // loss that is already negative; such batches contribute nothing
    rec.skipped = true;
    rec.loss = 0;
    return rec;
  }

  TensorRefs<double> prefs = collect_tensors(model);
  TensorRefs<double> grefs = collect_tensors(grads);
  if (negative) {
    for (auto& g : grefs) g.map() *= -1.0;
    rec.loss = -rec.nll;
  } else {
    rec.loss = rec.nll;
  }
  adam_step(prefs, grefs, adam, lr);
  return rec;
}

int derive_steps_per_epoch(const TrainData& data, const TrainConfig& cfg) {
  if (cfg.steps_per_epoch > 0) return cfg.steps_per_epoch;
  // both parties take a turn as avatar, hence the factor 2
  const long long frames = 2ll * data.total_frames();
  const long long per_batch =
      static_cast<long long>(cfg.batch_size) * cfg.sequence_length;
  return static_cast<int>(std::max(1ll, frames / std::max(1ll, per_batch)));
}

namespace {
std::vector<SequenceExample<double>> draw_batch(const TrainData& data,
                                                const TrainConfig& cfg,
                                                Rng& rng) {
  std::vector<SequenceExample<double>> batch;
  batch.reserve(cfg.batch_size);
  for (int i = 0; i < cfg.batch_size; ++i) {
    const Segment& seg =
        data.segments[rng.below(data.segments.size())];
    const Eigen::Index span = seg.len - cfg.sequence_length;
    const Eigen::Index off =
        span > 0 ? static_cast<Eigen::Index>(rng.below(span + 1)) : 0;
    TrainWindow w{seg.session, seg.start + off, rng.below(2) == 1};
    batch.push_back(
        materialize_window(*data.sessions, w, cfg.sequence_length));
  }
  return batch;
}

void write_metrics_line(std::ostream* metrics, const StepRecord& rec) {
  if (!metrics) return;
  (*metrics) << "step=" << rec.step << " lr=" << format_double(rec.lr)
             << " loss=" << format_double(rec.loss)
             << " negative=" << (rec.negative ? 1 : 0)
             << " skipped=" << (rec.skipped ? 1 : 0) << "\n";
}
}  // namespace

EpochMetrics train_epoch(DyadFlowModel<double>& model, const TrainData& data,
                         const TrainConfig& cfg, TrainerState& state,
                         std::ostream* metrics,
                         std::vector<StepRecord>* records, int max_steps) {
  cfg.validate();
  if (!data.sessions || data.segments.empty())
    throw std::invalid_argument("train_epoch: empty dataset");
  for (const auto& seg : data.segments)
    if (seg.len < cfg.sequence_length)
      throw std::invalid_argument("train_epoch: segment shorter than window");

  if (state.adam.m.empty()) {
    TensorRefs<double> prefs = collect_tensors(model);
    state.adam = AdamState::init(prefs, cfg.beta1, cfg.beta2, cfg.epsilon);
  }

  const int steps = derive_steps_per_epoch(data, cfg);
  EpochMetrics em;
  double pos_sum = 0, neg_sum = 0;
  int pos_n = 0;
  for (; state.step_in_epoch < steps; ++state.step_in_epoch) {
    if (max_steps >= 0 && em.steps >= max_steps) break;
    auto batch = draw_batch(data, cfg, state.rng);
    if (!actnorm_initialized(model)) initialize_actnorm(model, batch);
    const bool negative =
        cfg.batch_size >= 2 && state.rng.uniform() < cfg.negative_prob;
    if (negative) batch = make_negative_batch(batch, state.rng);

    const double lr = warmup_lr(state.global_step, cfg);
    StepRecord rec = trainer_process_batch(model, batch, negative, state.adam,
                                           lr, state.global_step);
    write_metrics_line(metrics, rec);
    if (records) records->push_back(rec);

    ++em.steps;
    ++state.global_step;
    if (negative) {
      ++em.negative_batches;
      if (rec.skipped)
        ++em.skipped_batches;
      else
        neg_sum += rec.nll;
    } else {
      pos_sum += rec.nll;
      ++pos_n;
    }
  }
  if (state.step_in_epoch >= steps) {
    state.step_in_epoch = 0;
    ++state.epoch;
  }
  if (pos_n) em.mean_positive_nll = pos_sum / pos_n;
  const int applied_neg = em.negative_batches - em.skipped_batches;
  if (applied_neg) em.mean_negative_nll = neg_sum / applied_neg;
  return em;
}

void train(DyadFlowModel<double>& model, const TrainData& data,
           const TrainConfig& cfg, TrainerState& state, std::ostream* metrics,
           std::vector<StepRecord>* records) {
  if (state.adam.m.empty()) {
    // fresh run; a resumed run arrives with optimizer and rng state loaded
    TensorRefs<double> prefs = collect_tensors(model);
    state.adam = AdamState::init(prefs, cfg.beta1, cfg.beta2, cfg.epsilon);
    state.rng = Rng(cfg.seed);
  }
  while (state.epoch < cfg.epochs)
    train_epoch(model, data, cfg, state, metrics, records);
}

}  // namespace faceflow
