#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fqa/checkpoint.hpp"
#include "fqa/config.hpp"
#include "fqa/train.hpp"
#include "test_util.hpp"

namespace fqa {
namespace {

// ---------------------------------------------------------------------------
// Learning-rate schedule

LrSchedule warmup() {
  LrSchedule s;
  s.kind = ScheduleKind::warmup;
  return s;
}

double rising(double step) { return std::pow(256.0, -0.5) * step * std::pow(5000.0, -1.5); }
double decaying(double step) { return std::pow(256.0, -0.5) * std::pow(step, -0.5); }

TEST(LrSchedule, WarmupReferenceValues) {
  EXPECT_NEAR(lr_schedule(warmup(), 1), 1.767767e-7, 1e-12);
  EXPECT_NEAR(lr_schedule(warmup(), 5000), 8.838835e-4, 1e-10);
  EXPECT_NEAR(lr_schedule(warmup(), 20000), 4.419417e-4, 1e-10);
  EXPECT_NEAR(rising(1), 1.767767e-7, 1e-12);
  EXPECT_NEAR(decaying(20000), 4.419417e-4, 1e-10);
}

TEST(LrSchedule, BranchesMeetAtWarmupStep) {
  EXPECT_LT(std::abs(rising(5000) - decaying(5000)), 1e-12);
  EXPECT_LT(std::abs(lr_schedule(warmup(), 5000) - lr_schedule(warmup(), 5001)), 1e-7);
}

TEST(LrSchedule, MatchesBothBranchesEverywhere) {
  for (std::size_t step = 1; step <= 30000; step += 37) {
    const double expected = step <= 5000 ? rising(static_cast<double>(step)) : decaying(static_cast<double>(step));
    EXPECT_NEAR(lr_schedule(warmup(), step), expected, 1e-15) << step;
  }
}

TEST(LrSchedule, RisesThenFalls) {
  double prev = 0.0;
  for (std::size_t step = 1; step <= 5000; ++step) {
    const double lr = lr_schedule(warmup(), step);
    ASSERT_GT(lr, prev) << step;
    prev = lr;
  }
  for (std::size_t step = 5001; step <= 40000; ++step) {
    const double lr = lr_schedule(warmup(), step);
    ASSERT_LT(lr, prev) << step;
    prev = lr;
  }
}

TEST(LrSchedule, ConstantIsOneEMinusFour) {
  const LrSchedule s;
  for (std::size_t step : {1u, 10u, 5000u, 123456u}) EXPECT_EQ(lr_schedule(s, step), 1e-4);
}

TEST(LrSchedule, StepZeroThrows) {
  EXPECT_THROW(lr_schedule(warmup(), 0), std::invalid_argument);
  EXPECT_THROW(lr_schedule(LrSchedule{}, 0), std::invalid_argument);
}

TEST(LrSchedule, DefaultKindFollowsVariant) {
  EXPECT_EQ(default_schedule(Variant::baseline), ScheduleKind::constant);
  EXPECT_EQ(default_schedule(Variant::proposed), ScheduleKind::warmup);
}

// ---------------------------------------------------------------------------
// Adam

ParameterList single_param(std::vector<double> w) {
  const std::size_t n = w.size();
  return {{"w", Tensor::create({n}, std::move(w), true)}};
}

void set_grad(ParameterList& params, const std::vector<double>& g) {
  Tensor t = params[0].tensor;
  t.zero_grad();
  // sum(w * g) has gradient g.
  sum(mul(t, Tensor::create({g.size()}, g))).backward();
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto params = single_param({0.3, -1.0, 2.0});
  AdamState state;
  state.reset(params);
  set_grad(params, {0.0, 0.0, 0.0});
  adam_step(params, state, 1e-3);
  EXPECT_EQ(testing::to_vector(params[0].tensor.values()), (std::vector<double>{0.3, -1.0, 2.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto params = single_param({1.0, 1.0});
  AdamState state;
  state.reset(params);
  set_grad(params, {0.5, -0.5});
  adam_step(params, state, 1e-3);
  const auto w = params[0].tensor.values();
  EXPECT_NEAR((1.0 - w[0]) / 1e-3, 1.0, 1e-6);
  EXPECT_NEAR((w[1] - 1.0) / 1e-3, 1.0, 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, MatchesHandWrittenUpdateOverSeveralSteps) {
  std::mt19937_64 rng(1);
  auto params = single_param(testing::random_values(4, rng));
  std::vector<double> w = testing::to_vector(params[0].tensor.values()), m(4, 0.0), v(4, 0.0);
  AdamState state;
  state.reset(params);
  for (int step = 1; step <= 6; ++step) {
    const auto g = testing::random_values(4, rng);
    set_grad(params, g);
    adam_step(params, state, 0.01);
    for (std::size_t j = 0; j < 4; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * g[j];
      v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
      const double mh = m[j] / (1 - std::pow(0.9, step)), vh = v[j] / (1 - std::pow(0.999, step));
      w[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(params[0].tensor.values()[j], w[j], 1e-14);
  }
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  auto run = [] {
    auto params = single_param({0.1, 0.2});
    AdamState state;
    state.reset(params);
    for (int i = 0; i < 2; ++i) {
      set_grad(params, {0.7, -0.2});
      adam_step(params, state, 1e-3);
    }
    return std::make_pair(testing::to_vector(params[0].tensor.values()), state.m[0]);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, StateSizeMismatchThrows) {
  auto params = single_param({1.0});
  AdamState state;
  state.reset(single_param({1.0, 2.0}));
  set_grad(params, {1.0});
  EXPECT_THROW(adam_step(params, state, 1e-3), ShapeError);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  auto params = single_param({0.0, 0.0});
  set_grad(params, {3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(params[0].tensor.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(params[0].tensor.grad()[1], 0.8, 1e-15);
  set_grad(params, {0.3, 0.4});
  clip_grad_norm(params, 1.0);
  EXPECT_EQ(params[0].tensor.grad()[0], 0.3);
}

// ---------------------------------------------------------------------------
// fit

std::vector<Utterance> toy_data(std::size_t n, std::size_t vocab, std::mt19937_64& rng, std::size_t min_frames = 14,
                                std::size_t max_frames = 22) {
  std::uniform_int_distribution<std::size_t> len(min_frames, max_frames), n_labels(1, 3);
  std::uniform_int_distribution<int> label(2, static_cast<int>(vocab) - 1);
  std::vector<Utterance> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& u = data[i];
    u.id = "u" + std::to_string(i);
    u.features.frames = len(rng);
    u.features.values = testing::random_values(u.features.frames * kNumMelBins, rng);
    u.labels.resize(n_labels(rng));
    for (int& l : u.labels) l = label(rng);
  }
  return data;
}

ModelConfig tiny_config(Variant v) {
  ModelConfig c = ModelConfig::toy(v, 6);
  c.conv_channels = {4, v == Variant::proposed ? 8u : 4u, 4, 4};
  c.freq_attention.d_model = 8;
  c.freq_attention.n_heads = 2;
  c.freq_attention.d_ff = 16;
  c.freq_attention.n_layers = 1;
  c.bilstm_hidden = 8;
  return c;
}

TEST(Fit, TwoStepsOnFixedBatchDecreaseLoss) {
  std::mt19937_64 rng(2);
  const auto data = toy_data(4, 6, rng);
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    ModelConfig mc = tiny_config(v);
    mc.dropout = 0.0;
    mc.freq_attention.dropout = 0.0;
    Model model(mc, 1);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.schedule.constant_lr = 1e-2;
    AdamState state;
    const auto result = fit(model, state, data, tc);
    ASSERT_EQ(result.log.size(), 2u);
    EXPECT_LT(result.log[1].loss, result.log[0].loss) << to_string(v);
    EXPECT_EQ(result.log[1].step, 2u);
  }
}

TEST(Fit, SameSeedGivesIdenticalTrajectoryAndCheckpoint) {
  std::mt19937_64 rng(3);
  const auto data = toy_data(10, 6, rng);
  const std::vector<std::string> vocab{"<blank>", "<unk>", "a:p0", "a:p1", "a:p2", "a:p3"};
  auto run = [&] {
    Model model(tiny_config(Variant::proposed), 5);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 9;
    tc.schedule.kind = ScheduleKind::warmup;
    AdamState state;
    const auto result = fit(model, state, data, tc);
    std::vector<double> losses;
    for (const auto& r : result.log) losses.push_back(r.loss);
    return std::make_pair(losses, encode_checkpoint(model, state, vocab));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first.size(), 6u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Fit, UnalignableUtterancesAreSkippedAndCounted) {
  std::mt19937_64 rng(4);
  auto data = toy_data(3, 6, rng);
  data[1].labels = {2, 2, 2, 2, 2, 2, 2, 2};  // needs 15 pooled frames
  Model model(tiny_config(Variant::baseline), 0);
  TrainConfig tc;
  tc.epochs = 3;
  AdamState state;
  const auto result = fit(model, state, data, tc);
  EXPECT_EQ(result.skipped_utterances, 3u);
  for (const auto& r : result.log) EXPECT_EQ(r.skipped, 1u);
}

TEST(Fit, AllUnalignableThrows) {
  std::mt19937_64 rng(5);
  auto data = toy_data(2, 6, rng);
  for (auto& u : data) u.labels.assign(20, 3);
  Model model(tiny_config(Variant::baseline), 0);
  AdamState state;
  EXPECT_THROW(fit(model, state, data, TrainConfig{}), std::invalid_argument);
}

TEST(Fit, EmptyDataAndBadConfigThrow) {
  Model model(tiny_config(Variant::baseline), 0);
  AdamState state;
  EXPECT_THROW(fit(model, state, {}, TrainConfig{}), std::invalid_argument);
  TrainConfig tc;
  tc.batch_size = 0;
  std::mt19937_64 rng(6);
  EXPECT_THROW(fit(model, state, toy_data(2, 6, rng), tc), std::invalid_argument);
}

TEST(Fit, MaxStepsCapsTheRun) {
  std::mt19937_64 rng(7);
  const auto data = toy_data(20, 6, rng);
  Model model(tiny_config(Variant::baseline), 0);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_steps = 3;
  AdamState state;
  EXPECT_EQ(fit(model, state, data, tc).log.size(), 3u);
  EXPECT_EQ(state.step, 3u);
}

TEST(Fit, StepLogHasFiveTabSeparatedColumns) {
  StepRecord r;
  r.step = 12;
  r.epoch = 2;
  r.lrate = 1e-4;
  r.loss = 3.25;
  r.skipped = 1;
  EXPECT_EQ(format_step(r), "12\t2\t0.0001\t3.25\t1");
}

TEST(BatchLoss, PaddedBatchEqualsMeanOfSingleLosses) {
  std::mt19937_64 rng(8);
  const auto data = toy_data(8, 6, rng, 40, 60);
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    const Model model(tiny_config(v), 2);
    std::vector<const Utterance*> batch;
    for (const auto& u : data) batch.push_back(&u);
    const double together = batch_loss(model, batch, {}).item();
    double mean = 0;
    for (const auto* u : batch) {
      const std::vector<const Utterance*> one{u};
      mean += batch_loss(model, one, {}).item() / 8.0;
    }
    EXPECT_NEAR(together, mean, 1e-10) << to_string(v);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Trained {
  Model model;
  AdamState state;
  std::vector<std::string> vocab{"<blank>", "<unk>", "a:p0", "a:p1", "a:p2", "a:p3"};
};

Trained trained(Variant v) {
  std::mt19937_64 rng(10);
  Trained t{Model(tiny_config(v), 3), {}};
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 2;
  fit(t.model, t.state, toy_data(4, 6, rng), tc);
  return t;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    const Trained t = trained(v);
    testing::TempDir dir("ckpt");
    const std::string path = dir.file("model.ckpt");
    save_checkpoint(path, t.model, t.state, t.vocab);
    const LoadedCheckpoint back = load_checkpoint(path);
    EXPECT_TRUE(back.model.config() == t.model.config());
    EXPECT_EQ(back.vocab, t.vocab);
    EXPECT_EQ(back.state.step, t.state.step);
    ASSERT_EQ(back.model.parameters().size(), t.model.parameters().size());
    for (std::size_t i = 0; i < t.model.parameters().size(); ++i) {
      EXPECT_EQ(back.model.parameters()[i].name, t.model.parameters()[i].name);
      EXPECT_EQ(testing::to_vector(back.model.parameters()[i].tensor.values()),
                testing::to_vector(t.model.parameters()[i].tensor.values()));
      EXPECT_EQ(back.state.m[i], t.state.m[i]);
      EXPECT_EQ(back.state.v[i], t.state.v[i]);
    }
    EXPECT_EQ(encode_checkpoint(back.model, back.state, back.vocab), encode_checkpoint(t.model, t.state, t.vocab));
  }
}

TEST(Checkpoint, StartsWithMagicAndVersion) {
  const Trained t = trained(Variant::baseline);
  const auto bytes = encode_checkpoint(t.model, t.state, t.vocab);
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FQA1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const Trained t = trained(Variant::baseline);
  const auto bytes = encode_checkpoint(t.model, t.state, t.vocab);
  for (std::size_t keep : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), keep));
      FAIL() << "accepted " << keep << " bytes";
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find("corrupt checkpoint"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, BadMagicAndVersionAreRejected) {
  const Trained t = trained(Variant::baseline);
  auto bytes = encode_checkpoint(t.model, t.state, t.vocab);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[4] = 7;
  try {
    decode_checkpoint(bad_version);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, BaselineIntoProposedConfigIsAMismatch) {
  const Trained t = trained(Variant::baseline);
  const auto bytes = encode_checkpoint(t.model, t.state, t.vocab);
  const ModelConfig expected = tiny_config(Variant::proposed);
  try {
    decode_checkpoint(bytes, &expected);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("config mismatch"), std::string::npos) << e.what();
  }
  const ModelConfig same = tiny_config(Variant::baseline);
  EXPECT_NO_THROW(decode_checkpoint(bytes, &same));
}

TEST(Checkpoint, MissingFileThrows) { EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), std::runtime_error); }

// ---------------------------------------------------------------------------
// Config files

TEST(Config, ParsesSectionsAndComments) {
  const RunConfig c = parse_config(
      "# toy\n"
      "[model]\n"
      "variant = proposed\n"
      "conv_channels = 8, 16, 16, 16\n"
      "bilstm_hidden = 32   # per direction\n"
      "attn_layers = 2\n"
      "[train]\n"
      "epochs = 3\n"
      "batch_size = 4\n"
      "seed = 7\n"
      "[data]\n"
      "train_manifest = a.tsv\n"
      "cmvn = false\n");
  EXPECT_EQ(c.model.variant, Variant::proposed);
  EXPECT_EQ(c.model.conv_channels, (std::array<std::size_t, 4>{8, 16, 16, 16}));
  EXPECT_EQ(c.model.bilstm_hidden, 32u);
  EXPECT_EQ(c.model.freq_attention.n_layers, 2u);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.batch_size, 4u);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.data.train_manifest, "a.tsv");
  EXPECT_FALSE(c.data.cmvn);
  EXPECT_EQ(c.model.vocab_size, 0u);
  EXPECT_EQ(c.resolved_train().schedule.kind, ScheduleKind::warmup);
}

TEST(Config, DefaultsMatchTrainingRecipe) {
  const RunConfig c = parse_config("");
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.train.batch_size, 8u);
  EXPECT_EQ(c.train.adam.beta1, 0.9);
  EXPECT_EQ(c.train.adam.beta2, 0.999);
  EXPECT_EQ(c.model.dropout, 0.1);
  EXPECT_EQ(c.resolved_train().schedule.kind, ScheduleKind::constant);
  EXPECT_EQ(c.resolved_train().schedule.constant_lr, 1e-4);
}

TEST(Config, ScheduleOverride) {
  const RunConfig c = parse_config("[model]\nvariant = proposed\n[train]\nlr_schedule = constant\n");
  EXPECT_EQ(c.resolved_train().schedule.kind, ScheduleKind::constant);
}

TEST(Config, UnknownKeyAndSectionAreErrors) {
  EXPECT_THROW(parse_config("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[optim]\nepochs = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs = many\n"), ConfigError);
}

TEST(Config, FormatParsesBack) {
  RunConfig c;
  c.model = ModelConfig::toy(Variant::proposed, 12);
  c.model.freq_attention.positional_encoding = true;
  c.train.epochs = 4;
  c.train.schedule.warmup_steps = 300;
  c.schedule = ScheduleKind::warmup;
  c.data.test_manifest = "t.tsv";
  const RunConfig back = parse_config(format_config(c));
  EXPECT_TRUE(back.model == c.model);
  EXPECT_EQ(back.train.epochs, 4u);
  EXPECT_EQ(back.train.schedule.warmup_steps, 300u);
  EXPECT_EQ(back.schedule, c.schedule);
  EXPECT_EQ(back.data.test_manifest, "t.tsv");
}

TEST(Config, LoadFromFile) {
  testing::TempDir dir("cfg");
  std::ofstream(dir.file("a.conf")) << "[train]\nepochs = 2\n";
  EXPECT_EQ(load_config(dir.file("a.conf")).train.epochs, 2u);
  EXPECT_THROW(load_config(dir.file("missing.conf")), std::runtime_error);
}

}  // namespace
}  // namespace fqa
