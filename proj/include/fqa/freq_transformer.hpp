#pragma once

// Frequency-directional feature converter.
//
// A (B, units, T', F) activation is split per batch item into (T', F, units)
// token grids. Each of the T' frames is an independent sequence of F tokens
// (one per frequency bin, `units` wide) that goes through a shared stack of
// Transformer encoder layers. Frames never attend to each other, so the time
// axis is carried through untouched. The result is folded back to
// (B, units, T', F).

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "fqa/layers.hpp"
#include "fqa/tensor.hpp"

namespace fqa {

struct FreqAttentionConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 16;
  std::size_t d_ff = 64;
  double dropout = 0.1;
  bool collect_attention = false;
  /// Sinusoidal encoding of the bin index, added before the first layer.
  bool positional_encoding = false;
  /// Replaces the encoder stack with the identity map (ablation).
  bool identity = false;

  void validate() const;
};

/// (B, units, T', F) -> B tensors of shape (T', F, units).
std::vector<Tensor> decompose(const Tensor& x, std::size_t units);
/// Inverse of decompose.
Tensor compose(const std::vector<Tensor>& items);

class FreqTransformer {
 public:
  FreqTransformer() = default;
  FreqTransformer(const FreqAttentionConfig& config, std::mt19937_64& rng);

  /// Runs all B * T' frames as one batch of sequences. Attention maps are
  /// written to `maps` (frame index b * T' + t) only in eval mode and only
  /// when `maps` is non-null.
  Tensor apply(const Tensor& x, const ForwardContext& ctx, AttentionMaps* maps = nullptr) const;

  /// Encodes only frames t < lengths[b] of each item; padded frames come out
  /// as zeros. Attention maps, if requested, are indexed by valid frame in
  /// batch order.
  Tensor apply(const Tensor& x, std::span<const std::size_t> lengths, const ForwardContext& ctx,
               AttentionMaps* maps = nullptr) const;

  /// Literal per-item loop over the batch; same result as apply().
  Tensor apply_per_item(const Tensor& x, const ForwardContext& ctx) const;

  /// Eval-mode maps for frames [first, last] of a single-item input, averaged
  /// over the frames. The result has frames == 1.
  AttentionMaps collect_attention(const Tensor& x, std::size_t first, std::size_t last) const;

  /// tokens is (N, F, d_model).
  Tensor encode(const Tensor& tokens, const ForwardContext& ctx, AttentionMaps* maps) const;

  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t param_count() const;
  const FreqAttentionConfig& config() const { return config_; }

  std::vector<TransformerEncoderLayer> layers;

 private:
  FreqAttentionConfig config_;
};

}  // namespace fqa
