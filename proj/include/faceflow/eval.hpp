#pragma once

#include <string>
#include <vector>

#include "faceflow/data.hpp"
#include "faceflow/model.hpp"
#include "faceflow/stats.hpp"

namespace faceflow {

enum class EvalCondition {
  AllCorrect,
  MismatchedAvatarSpeech,
  MismatchedInterSpeech,
  MismatchedInterFace,
};

const char* eval_condition_name(EvalCondition c);
std::vector<EvalCondition> all_eval_conditions();

// A condition is inapplicable when the ablation removed the stream it would
// derange; such table cells stay absent.
bool condition_applicable(EvalCondition c, const AblationFlags& flags);

// Equal-length evaluation sequences cut from sessions (or a split's
// segments). `both_roles` also takes party b as the avatar.
std::vector<SequenceExample<double>> cut_eval_sequences(
    const std::vector<SessionData>& sessions, int seq_len,
    bool both_roles = true);
std::vector<SequenceExample<double>> cut_eval_sequences(
    const std::vector<SessionData>& sessions, const std::vector<Segment>& segments,
    int seq_len, bool both_roles = true);

// Replaces the named stream of every sequence from a deranged source
// sequence; streams stay contiguous, only their pairing changes.
std::vector<SequenceExample<double>> apply_condition(
    const std::vector<SequenceExample<double>>& seqs, EvalCondition c,
    const std::vector<int>& derangement);

struct LLCell {
  bool present = false;
  int n = 0;
  double seq_mean = 0, seq_std = 0;      // per-sequence total log-likelihood
  double frame_mean = 0, frame_std = 0;  // per-frame normalization
  VecXd per_seq_total;
  VecXd per_seq_frame_mean;
};

struct LLTable {
  std::vector<std::string> model_tags;
  std::vector<EvalCondition> conditions;
  std::vector<std::vector<LLCell>> cells;  // [model][condition]
};

struct NamedModel {
  std::string tag;
  const DyadFlowModel<double>* model = nullptr;
};

// Sequence log-likelihoods for every model x condition; one derangement per
// condition drawn from `seed` and shared across models so cells are
// comparable. Needs >= 2 sequences (a derangement requires it).
LLTable mismatch_table(const std::vector<NamedModel>& models,
                       const std::vector<SequenceExample<double>>& sequences,
                       std::uint64_t seed);

std::string render_table(const LLTable& table);
// Machine-readable form, one "model= condition= n= ..." record per cell.
void write_table_records(const LLTable& table, const std::string& path);

// Paired per-sequence comparison of matched vs deranged conditioning for one
// model. Positive mean difference means matched sequences score higher.
PairedTestResult paired_condition_gap(const DyadFlowModel<double>& model,
                                      const std::vector<SequenceExample<double>>& seqs,
                                      EvalCondition condition,
                                      std::uint64_t seed);

}  // namespace faceflow
