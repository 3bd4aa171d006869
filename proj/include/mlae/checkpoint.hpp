#pragma once

#include <string>

#include "mlae/config.hpp"

namespace mlae {

/// Checkpoints are a pair of files under one stem: `<stem>.json` (the
/// manifest: format version, config echo, tensor index, blob hash) and
/// `<stem>.bin` (little-endian float32 tensors, each 64-byte aligned and
/// padded). Loading verifies the FNV-1a blob hash and reproduces every
/// tensor bit-exactly at 32 bits.
struct LoadedCheckpoint {
  BackboneModel model;
  RunConfig config;
  bool merged = false;
};

void save_checkpoint(const BackboneModel& model, const RunConfig& config, bool merged,
                     const std::string& stem);

LoadedCheckpoint load_checkpoint(const std::string& stem);

/// Total bytes a matrix occupies in a blob (f32, padded to 64).
std::uint64_t aligned_tensor_bytes(const Matrix& m);

}  // namespace mlae
