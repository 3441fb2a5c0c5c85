#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fqa/tensor.hpp"

namespace fqa {

enum class Mode { train, eval };

/// Per-forward state. `rng` is only touched by dropout in train mode.
struct ForwardContext {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// ---------------------------------------------------------------------------
// Primitive kernels used by the layers below.

/// Cross-correlation of x (B, C, T, F) with kernel (O, C, kh, kw) plus bias (O).
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t pad_time,
              std::size_t pad_freq);

/// Non-overlapping max over `pool` consecutive frames of axis 2 of (B, C, T, F).
/// Output length is floor(T / pool); trailing frames are dropped.
Tensor max_pool_time(const Tensor& x, std::size_t pool = 2);

/// Zeroes frames t >= lengths[b] of a (B, ..., T, F) tensor where T is axis
/// `time_axis`.
Tensor mask_frames(const Tensor& x, std::span<const std::size_t> lengths, std::size_t time_axis);

/// Scaled dot-product attention over (N, L, d) projections split into
/// `heads` contiguous slices of width d / heads. Returns the re-merged (N, L, d)
/// result. When `weights` is non-null the (N, heads, L, L) softmax output is
/// copied there.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::vector<double>* weights = nullptr);

/// Inverted dropout. Eval mode and p == 0 return `x` itself.
Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Layers

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  /// Stride 1, "same" padding for odd kernel sizes.
  Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(0); }

  Tensor kernel;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad_time = 0;
  std::size_t pad_freq = 0;
};

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng);

  /// y = x W + b over the last axis.
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Tensor weight;  // (in, out)
  Tensor bias;    // (out)
};

class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Tensor gain;
  Tensor bias;
};

/// Gates are packed in the order input, forget, candidate, output.
struct LstmDirection {
  Tensor input_weight;   // (in, 4H)
  Tensor hidden_weight;  // (H, 4H)
  Tensor bias;           // (4H)
};

class BiLstmLayer {
 public:
  BiLstmLayer() = default;
  BiLstmLayer(std::size_t in_dim, std::size_t hidden, std::mt19937_64& rng);

  /// x is (B, T, in); frames at or beyond lengths[b] are padding. The
  /// backward direction of each item starts at its own last frame. Output is
  /// (B, T, 2H) with zeros on padded frames.
  Tensor forward(const Tensor& x, std::span<const std::size_t> lengths) const;
  /// Single unpadded sequence (T, in) -> (T, 2H).
  Tensor forward(const Tensor& sequence) const;
  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t hidden_size() const { return forward_dir.hidden_weight.dim(0); }

  static Tensor run_direction(const LstmDirection& dir, const Tensor& x, std::span<const std::size_t> lengths,
                              bool reverse);

  LstmDirection forward_dir;
  LstmDirection backward_dir;
};

/// Row-stochastic F x F attention weights. Layout is (layer, frame, head,
/// query, key).
struct AttentionMaps {
  std::size_t layers = 0;
  std::size_t frames = 0;
  std::size_t heads = 0;
  std::size_t bins = 0;
  std::vector<double> weights;

  double at(std::size_t layer, std::size_t frame, std::size_t head, std::size_t query, std::size_t key) const {
    return weights[(((layer * frames + frame) * heads + head) * bins + query) * bins + key];
  }
  std::span<const double> matrix(std::size_t layer, std::size_t frame, std::size_t head) const {
    return std::span<const double>(weights).subspan(((layer * frames + frame) * heads + head) * bins * bins,
                                                    bins * bins);
  }
};

class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t d_model, std::size_t n_heads, std::mt19937_64& rng);

  /// seq is (N, L, d_model): N independent sequences of L tokens. When
  /// `weights` is non-null the (N, heads, L, L) softmax output is copied there.
  Tensor forward(const Tensor& seq, std::vector<double>* weights = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t n_heads = 1;
  LinearLayer query;
  LinearLayer key;
  LinearLayer value;
  LinearLayer output;
};

class TransformerEncoderLayer {
 public:
  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(std::size_t d_model, std::size_t n_heads, std::size_t d_ff, double dropout_p,
                          std::mt19937_64& rng);

  /// Post-norm residual block:
  ///   y   = LN1(x + Drop(SelfAttn(x)))
  ///   out = LN2(y + Drop(W2 relu(W1 y)))
  Tensor forward(const Tensor& seq, const ForwardContext& ctx, std::vector<double>* weights = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t d_model() const { return attention.query.weight.dim(0); }

  MultiHeadSelfAttention attention;
  LayerNormLayer norm1;
  LinearLayer ff1;
  LinearLayer ff2;
  LayerNormLayer norm2;
  double dropout_p = 0.1;
};

std::size_t transformer_layer_param_count(std::size_t d_model, std::size_t d_ff);
std::size_t bilstm_param_count(std::size_t in_dim, std::size_t hidden);
std::size_t conv_param_count(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size);
std::size_t linear_param_count(std::size_t in_dim, std::size_t out_dim);

}  // namespace fqa
