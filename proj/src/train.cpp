#include "fqa/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fqa {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::constant ? "constant" : "warmup"; }

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "warmup") return ScheduleKind::warmup;
  throw std::invalid_argument("unknown lr schedule '" + s + "' (expected constant or warmup)");
}

ScheduleKind default_schedule(Variant variant) {
  return variant == Variant::baseline ? ScheduleKind::constant : ScheduleKind::warmup;
}

double lr_schedule(const LrSchedule& schedule, std::size_t step) {
  if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
  if (schedule.kind == ScheduleKind::constant) return schedule.constant_lr;
  const double s = static_cast<double>(step);
  const double scale = 1.0 / std::sqrt(schedule.model_dim);
  if (step <= schedule.warmup_steps)
    return scale * s * std::pow(static_cast<double>(schedule.warmup_steps), -1.5);
  return scale / std::sqrt(s);
}

void AdamState::reset(const ParameterList& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
}

void adam_step(ParameterList& params, AdamState& state, double lrate, const AdamConfig& config) {
  if (state.m.empty() && state.v.empty() && state.step == 0) state.reset(params);
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                     std::to_string(params.size()) + " parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != tensor.numel() || v.size() != tensor.numel())
      throw ShapeError("adam_step: moment size mismatch for " + params[i].name);
    auto w = tensor.mutable_values();
    const bool has = tensor.has_grad();
    const auto g = has ? tensor.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lrate * mhat / (std::sqrt(vhat) + config.epsilon);
    }
  }
}

double clip_grad_norm(ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0");
}

std::string format_step(const StepRecord& r) {
  std::ostringstream out;
  out.precision(9);
  out << r.step << '\t' << r.epoch << '\t' << r.lrate << '\t' << r.loss << '\t' << r.skipped;
  return out.str();
}

bool alignable(const Utterance& utt) {
  return !utt.labels.empty() && utt.features.frames / 2 >= ctc_min_frames(utt.labels);
}

Tensor batch_loss(const Model& model, std::span<const Utterance* const> batch, const ForwardContext& ctx) {
  std::vector<const FeatureMatrix*> feats;
  std::vector<LabelSequence> targets;
  for (const auto* u : batch) {
    feats.push_back(&u->features);
    targets.push_back(u->labels);
  }
  std::vector<std::size_t> lengths;
  const Tensor x = make_feature_batch(feats, lengths);
  const auto out = model.forward(x, lengths, ctx);
  return ctc_loss_batch(out.logits, out.lengths, targets);
}

TrainResult fit(Model& model, AdamState& state, const std::vector<Utterance>& data, const TrainConfig& config,
                const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& u : data)
    if (u.features.dims != model.config().feature_dim)
      throw ShapeError("utterance " + u.id + " has " + std::to_string(u.features.dims) +
                       "-dim features; model expects " + std::to_string(model.config().feature_dim));
  for (const auto& u : data)
    for (int label : u.labels)
      if (label < 1 || static_cast<std::size_t>(label) >= model.config().vocab_size)
        throw std::invalid_argument("utterance " + u.id + " has label " + std::to_string(label) +
                                    " outside the model vocabulary");

  std::vector<std::size_t> usable;
  std::size_t unalignable = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (alignable(data[i]))
      usable.push_back(i);
    else
      ++unalignable;
  }
  if (usable.empty()) throw std::invalid_argument("all training utterances are unalignable");

  auto params = model.parameters();
  if (state.m.size() != params.size()) {
    const auto step = state.step;
    state.reset(params);
    state.step = step;
  }

  std::mt19937_64 shuffle_rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const ForwardContext ctx{Mode::train, &dropout_rng};

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    result.skipped_utterances += unalignable;
    std::vector<std::size_t> order = usable;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps != 0 && result.log.size() >= config.max_steps) return result;
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Utterance*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data[order[i]]);
      std::stable_sort(batch.begin(), batch.end(), [](const Utterance* a, const Utterance* b) {
        return a->features.frames > b->features.frames;
      });

      for (auto& p : params) p.tensor.zero_grad();
      const Tensor loss = batch_loss(model, batch, ctx);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw DivergenceError("non-finite training loss at step " + std::to_string(state.step + 1) + " (epoch " +
                              std::to_string(epoch) + ", first utterance " + batch.front()->id + ")");
      loss.backward();

      StepRecord record;
      record.step = static_cast<std::size_t>(state.step) + 1;
      record.epoch = epoch;
      record.lrate = lr_schedule(config.schedule, record.step);
      record.loss = value;
      record.skipped = unalignable;
      record.grad_norm = clip_grad_norm(params, config.clip_norm);
      record.clipped = config.clip_norm > 0.0 && record.grad_norm > config.clip_norm;
      if (!std::isfinite(record.grad_norm))
        throw DivergenceError("non-finite gradient norm at step " + std::to_string(record.step));
      if (record.clipped) ++result.clipped_steps;
      adam_step(params, state, record.lrate, config.adam);
      for (auto& p : params) p.tensor.zero_grad();
      result.log.push_back(record);
      if (on_step) on_step(record);
    }
  }
  return result;
}

}  // namespace fqa
