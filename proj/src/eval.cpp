#include "faceflow/eval.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "faceflow/config.hpp"
#include "faceflow/trainer.hpp"

namespace faceflow {

const char* eval_condition_name(EvalCondition c) {
  switch (c) {
    case EvalCondition::AllCorrect: return "all_correct";
    case EvalCondition::MismatchedAvatarSpeech: return "mismatched_S_a";
    case EvalCondition::MismatchedInterSpeech: return "mismatched_S_i";
    case EvalCondition::MismatchedInterFace: return "mismatched_F_i";
  }
  return "?";
}

std::vector<EvalCondition> all_eval_conditions() {
  return {EvalCondition::AllCorrect, EvalCondition::MismatchedAvatarSpeech,
          EvalCondition::MismatchedInterSpeech,
          EvalCondition::MismatchedInterFace};
}

bool condition_applicable(EvalCondition c, const AblationFlags& flags) {
  if (c == EvalCondition::MismatchedInterFace && flags.no_face) return false;
  if (c == EvalCondition::MismatchedInterSpeech && flags.no_speech)
    return false;
  return true;
}

std::vector<SequenceExample<double>> cut_eval_sequences(
    const std::vector<SessionData>& sessions, int seq_len, bool both_roles) {
  std::vector<Segment> whole;
  for (int s = 0; s < static_cast<int>(sessions.size()); ++s)
    whole.push_back({s, 0, sessions[s].length()});
  return cut_eval_sequences(sessions, whole, seq_len, both_roles);
}

std::vector<SequenceExample<double>> cut_eval_sequences(
    const std::vector<SessionData>& sessions, const std::vector<Segment>& segments,
    int seq_len, bool both_roles) {
  std::vector<SequenceExample<double>> out;
  for (const auto& seg : segments) {
    for (Eigen::Index off = 0; off + seq_len <= seg.len; off += seq_len) {
      TrainWindow w{seg.session, seg.start + off, false};
      out.push_back(materialize_window(sessions, w, seq_len));
      if (both_roles) {
        w.avatar_is_b = true;
        out.push_back(materialize_window(sessions, w, seq_len));
      }
    }
  }
  return out;
}

std::vector<SequenceExample<double>> apply_condition(
    const std::vector<SequenceExample<double>>& seqs, EvalCondition c,
    const std::vector<int>& derangement) {
  if (c == EvalCondition::AllCorrect) return seqs;
  if (derangement.size() != seqs.size())
    throw std::invalid_argument("apply_condition: derangement size mismatch");
  std::vector<SequenceExample<double>> out = seqs;
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& src = seqs[derangement[i]];
    switch (c) {
      case EvalCondition::MismatchedAvatarSpeech: out[i].s_a = src.s_a; break;
      case EvalCondition::MismatchedInterSpeech: out[i].s_i = src.s_i; break;
      case EvalCondition::MismatchedInterFace: out[i].f_i = src.f_i; break;
      case EvalCondition::AllCorrect: break;
    }
  }
  return out;
}

namespace {
LLCell evaluate_cell(const DyadFlowModel<double>& model,
                     const std::vector<SequenceExample<double>>& seqs) {
  LLCell cell;
  cell.present = true;
  cell.n = static_cast<int>(seqs.size());
  cell.per_seq_total.resize(cell.n);
  cell.per_seq_frame_mean.resize(cell.n);
  for (int i = 0; i < cell.n; ++i) {
    VecXd lp = sequence_log_density(seqs[i], model);
    cell.per_seq_total[i] = lp.sum();
    cell.per_seq_frame_mean[i] = lp.mean();
  }
  cell.seq_mean = mean_of(cell.per_seq_total);
  cell.seq_std = stddev_of(cell.per_seq_total);
  cell.frame_mean = mean_of(cell.per_seq_frame_mean);
  cell.frame_std = stddev_of(cell.per_seq_frame_mean);
  return cell;
}
}  // namespace

LLTable mismatch_table(const std::vector<NamedModel>& models,
                       const std::vector<SequenceExample<double>>& sequences,
                       std::uint64_t seed) {
  if (sequences.size() < 2)
    throw std::invalid_argument(
        "mismatch_table: need at least 2 sequences to build a derangement");
  LLTable table;
  table.conditions = all_eval_conditions();
  Rng rng(seed);
  std::vector<std::vector<int>> perms;
  for (size_t c = 1; c < table.conditions.size(); ++c)
    perms.push_back(derange(static_cast<int>(sequences.size()), rng));

  for (const auto& nm : models) {
    table.model_tags.push_back(nm.tag);
    std::vector<LLCell> row(table.conditions.size());
    for (size_t c = 0; c < table.conditions.size(); ++c) {
      const EvalCondition cond = table.conditions[c];
      if (!condition_applicable(cond, nm.model->cfg.ablation)) continue;
      const std::vector<int> none;
      auto conditioned = apply_condition(
          sequences, cond, cond == EvalCondition::AllCorrect ? none
                                                             : perms[c - 1]);
      row[c] = evaluate_cell(*nm.model, conditioned);
    }
    table.cells.push_back(std::move(row));
  }
  return table;
}

std::string render_table(const LLTable& table) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "system";
  for (auto c : table.conditions)
    os << std::right << std::setw(24) << eval_condition_name(c);
  os << "\n";
  for (size_t m = 0; m < table.model_tags.size(); ++m) {
    os << std::left << std::setw(14) << table.model_tags[m];
    for (size_t c = 0; c < table.conditions.size(); ++c) {
      const LLCell& cell = table.cells[m][c];
      std::ostringstream v;
      if (!cell.present) {
        v << "-";
      } else {
        v << std::fixed << std::setprecision(1) << cell.seq_mean << "+-"
          << cell.seq_std;
      }
      os << std::right << std::setw(24) << v.str();
    }
    os << "\n";
  }
  os << "(per-sequence total log-likelihood, mean+-std; '-' = stream absent "
        "under ablation)\n";
  return os.str();
}

void write_table_records(const LLTable& table, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write table records: " + path);
  for (size_t m = 0; m < table.model_tags.size(); ++m) {
    for (size_t c = 0; c < table.conditions.size(); ++c) {
      const LLCell& cell = table.cells[m][c];
      f << "model=" << table.model_tags[m]
        << " condition=" << eval_condition_name(table.conditions[c])
        << " present=" << (cell.present ? 1 : 0);
      if (cell.present) {
        f << " n=" << cell.n << " seq_mean=" << format_double(cell.seq_mean)
          << " seq_std=" << format_double(cell.seq_std)
          << " frame_mean=" << format_double(cell.frame_mean)
          << " frame_std=" << format_double(cell.frame_std);
      }
      f << "\n";
    }
  }
}

PairedTestResult paired_condition_gap(const DyadFlowModel<double>& model,
                                      const std::vector<SequenceExample<double>>& seqs,
                                      EvalCondition condition,
                                      std::uint64_t seed) {
  if (condition == EvalCondition::AllCorrect)
    throw std::invalid_argument("paired_condition_gap: pick a mismatch");
  if (seqs.size() < 2)
    throw std::invalid_argument(
        "paired_condition_gap: need at least 2 sequences");
  Rng rng(seed);
  auto perm = derange(static_cast<int>(seqs.size()), rng);
  auto mismatched = apply_condition(seqs, condition, perm);
  VecXd diffs(seqs.size());
  for (size_t i = 0; i < seqs.size(); ++i) {
    const double matched = sequence_log_density(seqs[i], model).mean();
    const double shuffled = sequence_log_density(mismatched[i], model).mean();
    diffs[i] = matched - shuffled;
  }
  return paired_t_test(diffs);
}

}  // namespace faceflow
