#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fqa/audio.hpp"
#include "fqa/ctc.hpp"
#include "fqa/layers.hpp"
#include "fqa/model.hpp"

namespace fqa {

enum class ScheduleKind { constant, warmup };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule(const std::string& s);
/// Constant for the baseline, warmup for the proposed model.
ScheduleKind default_schedule(Variant variant);

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double constant_lr = 1e-4;
  std::size_t warmup_steps = 5000;
  double model_dim = 256.0;
};

/// constant: constant_lr.
/// warmup:   model_dim^-0.5 * step * warmup^-1.5   for step <= warmup,
///           model_dim^-0.5 * step^-0.5            afterwards.
/// Throws for step < 1.
double lr_schedule(const LrSchedule& schedule, std::size_t step);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moments per parameter, in parameter-list order.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void reset(const ParameterList& params);
};

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Parameters without a gradient are treated as having a zero gradient.
void adam_step(ParameterList& params, AdamState& state, double lrate, const AdamConfig& config = {});

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
double clip_grad_norm(ParameterList& params, double max_norm);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  AdamConfig adam;
  LrSchedule schedule;
  double clip_norm = 5.0;
  /// 0 means no cap.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Utterance {
  std::string id;
  std::string language;
  FeatureMatrix features;
  LabelSequence labels;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lrate = 0.0;
  double loss = 0.0;
  std::size_t skipped = 0;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// Tab-separated: step, epoch, lrate, batch_loss, skipped_count.
std::string format_step(const StepRecord& record);

struct TrainResult {
  std::vector<StepRecord> log;
  std::size_t skipped_utterances = 0;  // unalignable, counted once per epoch
  std::size_t clipped_steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// True when the utterance can be aligned by CTC after time pooling.
bool alignable(const Utterance& utt);

/// Mean CTC loss of a padded batch.
Tensor batch_loss(const Model& model, std::span<const Utterance* const> batch, const ForwardContext& ctx);

/// Per epoch: seeded shuffle, consecutive batches of batch_size, each batch
/// sorted by length (longest first), zero-padded and masked. Continues the
/// optimizer state's step counter.
TrainResult fit(Model& model, AdamState& state, const std::vector<Utterance>& data, const TrainConfig& config,
                const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace fqa
