#pragma once

#include <string>

#include "faceflow/trainer.hpp"

namespace faceflow {

// Versioned binary checkpoint: header (magic, format version, config digest),
// canonical config text, counters, length-prefixed named tensor blocks of
// little-endian 64-bit floats, optimizer moments and the RNG state.
// save -> load -> save round-trips byte-identically.

struct Checkpoint {
  DyadFlowModel<double> model;
  TrainConfig train_cfg;
  TrainerState state;
};

void save_checkpoint(const std::string& path, DyadFlowModel<double>& model,
                     const TrainConfig& train_cfg, const TrainerState& state);

// Parses into a fresh Checkpoint; the file is fully validated before any
// state is handed back, so a corrupt file never leaves a half-built model.
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t checkpoint_digest(const std::string& path);

}  // namespace faceflow
