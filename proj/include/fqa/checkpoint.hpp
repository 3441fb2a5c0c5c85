#pragma once

// Checkpoint file layout (little-endian):
//
//   "FQA1"  u32 version  u32 len + config text ([model] and [vocab] sections)
//   u64 optimizer step   u32 array count
//   per array: u32 len + name, u32 rank, u64 dims[rank], f64 payload
//
// Arrays are the model parameters under their registry names followed by the
// Adam moments as "adam.m/<name>" and "adam.v/<name>".

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqa/model.hpp"
#include "fqa/train.hpp"

namespace fqa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadedCheckpoint {
  Model model;
  AdamState state;
  std::vector<std::string> vocab;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& state,
                                            const std::vector<std::string>& vocab);
void save_checkpoint(const std::string& path, const Model& model, const AdamState& state,
                     const std::vector<std::string>& vocab);

/// When `expected` is given the stored model config must equal it.
LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace fqa
