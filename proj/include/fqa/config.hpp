#pragma once

// Flat "key = value" configuration with [model], [train] and [data] sections.
// '#' starts a comment. Unknown sections and keys are errors. Checkpoints
// embed the [model] section plus a [vocab] section in the same syntax.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqa/model.hpp"
#include "fqa/train.hpp"

namespace fqa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string train_manifest;
  std::string test_manifest;
  bool cmvn = true;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  /// Unset means: constant for baseline, warmup for proposed.
  std::optional<ScheduleKind> schedule;
  /// Present only in checkpoint headers.
  std::vector<std::string> vocab;

  /// Train config with the schedule resolved against the model variant.
  TrainConfig resolved_train() const;
};

/// model.vocab_size is 0 when the config leaves it to be derived from data.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

std::string format_model_section(const ModelConfig& model);
std::string format_config(const RunConfig& config);

}  // namespace fqa
