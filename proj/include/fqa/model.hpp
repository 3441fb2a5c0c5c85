#pragma once

// Baseline and frequency-attention CTC acoustic models.
//
//   baseline: conv -> conv -> pool(time, 2) -> conv -> conv -> BiLSTM -> FC
//   proposed: conv -> conv -> pool(time, 2) -> freq transformer -> conv -> conv
//             -> BiLSTM -> FC
//
// Convolutions are 3x3, stride 1, "same" padding, ReLU after each. Frames past
// an item's true length are zeroed after every stage so a padded batch gives
// each item exactly the result it would get alone.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fqa/audio.hpp"
#include "fqa/freq_transformer.hpp"
#include "fqa/layers.hpp"

namespace fqa {

enum class Variant { baseline, proposed };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::baseline;
  std::array<std::size_t, 4> conv_channels{8, 16, 16, 16};
  std::size_t kernel_size = 3;
  std::size_t bilstm_hidden = 32;
  std::size_t vocab_size = 3;
  std::size_t feature_dim = kNumMelBins;
  double dropout = 0.1;
  FreqAttentionConfig freq_attention;

  void validate() const;
  bool operator==(const ModelConfig& other) const;

  /// CI-sized preset: channels [8,16,16,16], BiLSTM hidden 32.
  static ModelConfig toy(Variant variant, std::size_t vocab_size);
  /// Channels [32,16,32,32]; the BiLSTM width puts the baseline near 13M
  /// parameters and the proposed model near 4M.
  static ModelConfig paper_scale(Variant variant, std::size_t vocab_size = 240);
};

/// Closed-form parameter count for a configuration.
std::size_t analytic_param_count(const ModelConfig& config);

/// Zero-pads features to the longest item: (B, 1, T_max, dims).
Tensor make_feature_batch(std::span<const FeatureMatrix* const> items, std::vector<std::size_t>& lengths);

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  struct Output {
    Tensor logits;                     // (B, T/2, vocab)
    std::vector<std::size_t> lengths;  // floor(len / 2) per item
  };

  Output forward(const Tensor& features, std::span<const std::size_t> lengths, const ForwardContext& ctx,
                 AttentionMaps* maps = nullptr) const;

  /// Output of conv1 -> conv2 -> pool, i.e. what the frequency transformer
  /// sees: (B, channels[1], T/2, dims).
  Tensor front_end(const Tensor& features, std::span<const std::size_t> lengths,
                   std::vector<std::size_t>& pooled) const;

  const ModelConfig& config() const { return config_; }
  const ParameterList& parameters() const { return params_; }
  std::size_t count_params() const;
  const FreqTransformer* freq_transformer() const { return freq_ ? &*freq_ : nullptr; }

 private:
  ModelConfig config_;
  std::array<Conv2dLayer, 4> conv_;
  std::optional<FreqTransformer> freq_;
  BiLstmLayer lstm_;
  LinearLayer fc_;
  ParameterList params_;
};

}  // namespace fqa
