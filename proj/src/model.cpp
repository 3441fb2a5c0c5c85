#include "fqa/model.hpp"

#include <random>
#include <stdexcept>

namespace fqa {

std::string to_string(Variant v) { return v == Variant::baseline ? "baseline" : "proposed"; }

Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "proposed") return Variant::proposed;
  throw std::invalid_argument("unknown model variant '" + s + "' (expected baseline or proposed)");
}

void ModelConfig::validate() const {
  for (auto c : conv_channels)
    if (c == 0) throw std::invalid_argument("conv channel counts must be positive");
  if (kernel_size % 2 == 0) throw std::invalid_argument("kernel_size must be odd");
  if (bilstm_hidden == 0) throw std::invalid_argument("bilstm_hidden must be positive");
  if (vocab_size < 3) throw std::invalid_argument("vocab_size must be >= 3 (blank, unk, one phoneme)");
  if (feature_dim == 0) throw std::invalid_argument("feature_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (variant == Variant::proposed) {
    freq_attention.validate();
    if (conv_channels[1] != freq_attention.d_model)
      throw std::invalid_argument("proposed model needs conv_channels[1] (" + std::to_string(conv_channels[1]) +
                                  ") == d_model (" + std::to_string(freq_attention.d_model) + ")");
  }
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  const auto& a = freq_attention;
  const auto& b = o.freq_attention;
  const bool attn_equal = variant == Variant::baseline ||
                          (a.n_layers == b.n_layers && a.n_heads == b.n_heads && a.d_model == b.d_model &&
                           a.d_ff == b.d_ff && a.dropout == b.dropout &&
                           a.positional_encoding == b.positional_encoding && a.identity == b.identity);
  return variant == o.variant && conv_channels == o.conv_channels && kernel_size == o.kernel_size &&
         bilstm_hidden == o.bilstm_hidden && vocab_size == o.vocab_size && feature_dim == o.feature_dim &&
         dropout == o.dropout && attn_equal;
}

ModelConfig ModelConfig::toy(Variant variant, std::size_t vocab_size) {
  ModelConfig c;
  c.variant = variant;
  c.conv_channels = {8, 16, 16, 16};
  c.bilstm_hidden = 32;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::paper_scale(Variant variant, std::size_t vocab_size) {
  ModelConfig c;
  c.variant = variant;
  c.conv_channels = {32, 16, 32, 32};
  c.bilstm_hidden = variant == Variant::baseline ? 768 : 300;
  c.vocab_size = vocab_size;
  return c;
}

std::size_t analytic_param_count(const ModelConfig& c) {
  const auto& ch = c.conv_channels;
  std::size_t n = conv_param_count(1, ch[0], c.kernel_size) + conv_param_count(ch[0], ch[1], c.kernel_size) +
                  conv_param_count(ch[1], ch[2], c.kernel_size) + conv_param_count(ch[2], ch[3], c.kernel_size);
  if (c.variant == Variant::proposed && !c.freq_attention.identity)
    n += c.freq_attention.n_layers * transformer_layer_param_count(c.freq_attention.d_model, c.freq_attention.d_ff);
  n += bilstm_param_count(ch[3] * c.feature_dim, c.bilstm_hidden);
  n += linear_param_count(2 * c.bilstm_hidden, c.vocab_size);
  return n;
}

Tensor make_feature_batch(std::span<const FeatureMatrix* const> items, std::vector<std::size_t>& lengths) {
  if (items.empty()) throw std::invalid_argument("empty batch");
  const std::size_t dims = items.front()->dims;
  std::size_t max_len = 0;
  lengths.clear();
  for (const auto* f : items) {
    if (f->dims != dims) throw ShapeError("batch items disagree on feature dimension");
    if (f->frames == 0) throw ShapeError("empty feature matrix in batch");
    lengths.push_back(f->frames);
    max_len = std::max(max_len, f->frames);
  }
  std::vector<double> values(items.size() * max_len * dims, 0.0);
  for (std::size_t b = 0; b < items.size(); ++b)
    std::copy(items[b]->values.begin(), items[b]->values.end(),
              values.begin() + static_cast<std::ptrdiff_t>(b * max_len * dims));
  return Tensor::create({items.size(), 1, max_len, dims}, std::move(values));
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& ch = config_.conv_channels;
  const std::size_t k = config_.kernel_size;
  conv_[0] = Conv2dLayer(1, ch[0], k, rng);
  conv_[1] = Conv2dLayer(ch[0], ch[1], k, rng);
  if (config_.variant == Variant::proposed) freq_.emplace(config_.freq_attention, rng);
  conv_[2] = Conv2dLayer(ch[1], ch[2], k, rng);
  conv_[3] = Conv2dLayer(ch[2], ch[3], k, rng);
  lstm_ = BiLstmLayer(ch[3] * config_.feature_dim, config_.bilstm_hidden, rng);
  fc_ = LinearLayer(2 * config_.bilstm_hidden, config_.vocab_size, rng);

  conv_[0].collect("conv1", params_);
  conv_[1].collect("conv2", params_);
  if (freq_) freq_->collect("freq", params_);
  conv_[2].collect("conv3", params_);
  conv_[3].collect("conv4", params_);
  lstm_.collect("bilstm", params_);
  fc_.collect("fc", params_);
}

std::size_t Model::count_params() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Tensor Model::front_end(const Tensor& features, std::span<const std::size_t> lengths,
                        std::vector<std::size_t>& pooled) const {
  if (features.rank() != 4 || features.dim(1) != 1 || features.dim(3) != config_.feature_dim)
    throw ShapeError("model expects (B, 1, T, " + std::to_string(config_.feature_dim) + ") features, got " +
                     shape_string(features.shape()));
  Tensor h = mask_frames(relu(conv_[0].forward(mask_frames(features, lengths, 2))), lengths, 2);
  h = mask_frames(relu(conv_[1].forward(h)), lengths, 2);
  h = max_pool_time(h, 2);
  pooled.assign(lengths.begin(), lengths.end());
  for (auto& len : pooled) len /= 2;
  return mask_frames(h, pooled, 2);
}

Model::Output Model::forward(const Tensor& features, std::span<const std::size_t> lengths, const ForwardContext& ctx,
                             AttentionMaps* maps) const {
  Output out;
  Tensor h = front_end(features, lengths, out.lengths);
  for (auto len : out.lengths)
    if (len == 0) throw std::invalid_argument("utterance too short: fewer than 2 frames");
  if (freq_) h = freq_->apply(h, out.lengths, ctx, maps);
  h = mask_frames(relu(conv_[2].forward(h)), out.lengths, 2);
  h = mask_frames(relu(conv_[3].forward(h)), out.lengths, 2);

  const std::size_t batch = h.dim(0), channels = h.dim(1), frames = h.dim(2), bins = h.dim(3);
  const Tensor flat = reshape(permute(h, {0, 2, 1, 3}), {batch, frames, channels * bins});
  const Tensor seq = dropout(lstm_.forward(flat, out.lengths), config_.dropout, ctx);
  out.logits = fc_.forward(seq);
  return out;
}

}  // namespace fqa
