#pragma once

#include <cstdint>
#include <string>

#include "us3l/nn.hpp"

// Versioned JSON checkpoints: encoder architecture, parameter arrays, and the
// per-width normalization statistics. Doubles are written in shortest
// round-trip form, so save/load reproduces values exactly.

namespace us3l {

struct CheckpointMeta {
  int version = 1;
  uint64_t seed = 0;
  int64_t iteration = 0;
};

void save_checkpoint(const std::string& path, SlimmableEncoder& encoder,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  SlimmableEncoder encoder;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace us3l
