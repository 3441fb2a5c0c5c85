#include "fqa/freq_transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace fqa {

void FreqAttentionConfig::validate() const {
  if (n_heads == 0 || d_model % n_heads != 0)
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " must be divisible by n_heads " +
                                std::to_string(n_heads));
  if (n_layers == 0) throw std::invalid_argument("frequency transformer needs at least one layer");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

std::vector<Tensor> decompose(const Tensor& x, std::size_t units) {
  if (x.rank() != 4) throw ShapeError("decompose expects (B, units, T', F), got " + shape_string(x.shape()));
  if (x.dim(1) != units)
    throw ShapeError("decompose: channel axis is " + std::to_string(x.dim(1)) + ", expected " + std::to_string(units));
  const Tensor grid = permute(x, {0, 2, 3, 1});  // (B, T', F, units)
  std::vector<Tensor> items;
  items.reserve(x.dim(0));
  for (std::size_t b = 0; b < x.dim(0); ++b)
    items.push_back(reshape(slice(grid, 0, b, b + 1), {x.dim(2), x.dim(3), units}));
  return items;
}

Tensor compose(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("compose of zero items");
  std::vector<Tensor> expanded;
  expanded.reserve(items.size());
  for (const auto& item : items) {
    if (item.rank() != 3 || item.shape() != items.front().shape())
      throw ShapeError("compose: items must share a (T', F, units) shape");
    expanded.push_back(reshape(item, {1, item.dim(0), item.dim(1), item.dim(2)}));
  }
  return permute(concat(expanded, 0), {0, 3, 1, 2});
}

FreqTransformer::FreqTransformer(const FreqAttentionConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  if (config_.identity) return;
  layers.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l)
    layers.emplace_back(config_.d_model, config_.n_heads, config_.d_ff, config_.dropout, rng);
}

Tensor FreqTransformer::encode(const Tensor& tokens, const ForwardContext& ctx, AttentionMaps* maps) const {
  const std::size_t n = tokens.dim(0), bins = tokens.dim(1);
  Tensor h = tokens;
  if (config_.positional_encoding) {
    const std::size_t d = config_.d_model;
    std::vector<double> pe(bins * d);
    for (std::size_t pos = 0; pos < bins; ++pos)
      for (std::size_t i = 0; i < d; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
        pe[pos * d + i] = i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
      }
    h = add(h, Tensor::create({bins, d}, std::move(pe)));
  }
  const bool collect = maps != nullptr && ctx.mode == Mode::eval;
  if (collect) {
    maps->layers = layers.size();
    maps->frames = n;
    maps->heads = config_.n_heads;
    maps->bins = bins;
    maps->weights.clear();
    maps->weights.reserve(layers.size() * n * config_.n_heads * bins * bins);
  }
  std::vector<double> layer_weights;
  for (const auto& layer : layers) {
    h = layer.forward(h, ctx, collect ? &layer_weights : nullptr);
    if (collect) maps->weights.insert(maps->weights.end(), layer_weights.begin(), layer_weights.end());
  }
  return h;
}

Tensor FreqTransformer::apply(const Tensor& x, const ForwardContext& ctx, AttentionMaps* maps) const {
  if (x.rank() != 4 || x.dim(1) != config_.d_model)
    throw ShapeError("frequency transformer expects (B, " + std::to_string(config_.d_model) + ", T', F), got " +
                     shape_string(x.shape()));
  if (config_.identity) return x;
  const std::size_t batch = x.dim(0), units = x.dim(1), frames = x.dim(2), bins = x.dim(3);
  const Tensor tokens = reshape(permute(x, {0, 2, 3, 1}), {batch * frames, bins, units});
  const Tensor encoded = encode(tokens, ctx, maps);
  return permute(reshape(encoded, {batch, frames, bins, units}), {0, 3, 1, 2});
}

namespace {

// Rows `rows` of a (N, ...) tensor, stacked in the given order.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t width = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  return Tensor::from_op(shape, std::move(out), {x},
                         [rows, width](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t r = 0; r < rows.size(); ++r)
                             for (std::size_t i = 0; i < width; ++i) gx[rows[r] * width + i] += g[r * width + i];
                         });
}

// Inverse of gather_rows: row r of x lands at row rows[r] of a zero (n, ...)
// tensor.
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows, std::size_t n) {
  const std::size_t width = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = n;
  std::vector<double> out(n * width, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(r * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(rows[r] * width));
  return Tensor::from_op(shape, std::move(out), {x},
                         [rows, width](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t r = 0; r < rows.size(); ++r)
                             for (std::size_t i = 0; i < width; ++i) gx[r * width + i] += g[rows[r] * width + i];
                         });
}

}  // namespace

Tensor FreqTransformer::apply(const Tensor& x, std::span<const std::size_t> lengths, const ForwardContext& ctx,
                              AttentionMaps* maps) const {
  if (x.rank() != 4 || x.dim(1) != config_.d_model)
    throw ShapeError("frequency transformer expects (B, " + std::to_string(config_.d_model) + ", T', F), got " +
                     shape_string(x.shape()));
  if (lengths.size() != x.dim(0)) throw ShapeError("frequency transformer needs one length per batch item");
  if (config_.identity) return x;
  const std::size_t batch = x.dim(0), units = x.dim(1), frames = x.dim(2), bins = x.dim(3);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], frames); ++t) rows.push_back(b * frames + t);
  if (rows.empty()) return Tensor::zeros(x.shape());
  const Tensor tokens = reshape(permute(x, {0, 2, 3, 1}), {batch * frames, bins, units});
  const Tensor encoded = scatter_rows(encode(gather_rows(tokens, rows), ctx, maps), rows, batch * frames);
  return permute(reshape(encoded, {batch, frames, bins, units}), {0, 3, 1, 2});
}

Tensor FreqTransformer::apply_per_item(const Tensor& x, const ForwardContext& ctx) const {
  if (config_.identity) return x;
  std::vector<Tensor> outputs;
  for (const auto& item : decompose(x, config_.d_model)) outputs.push_back(encode(item, ctx, nullptr));
  return compose(outputs);
}

AttentionMaps FreqTransformer::collect_attention(const Tensor& x, std::size_t first, std::size_t last) const {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("collect_attention expects a single-item (1, units, T', F)");
  if (config_.identity) throw std::logic_error("identity encoder has no attention");
  if (first > last || last >= x.dim(2))
    throw std::invalid_argument("empty or out-of-range frame section [" + std::to_string(first) + ", " +
                                std::to_string(last) + "] for " + std::to_string(x.dim(2)) + " frames");
  const Tensor section = slice(x.detach(), 2, first, last + 1);
  AttentionMaps per_frame;
  apply(section, ForwardContext{Mode::eval, nullptr}, &per_frame);

  AttentionMaps averaged;
  averaged.layers = per_frame.layers;
  averaged.frames = 1;
  averaged.heads = per_frame.heads;
  averaged.bins = per_frame.bins;
  const std::size_t cells = per_frame.heads * per_frame.bins * per_frame.bins;
  averaged.weights.assign(per_frame.layers * cells, 0.0);
  const double inv = 1.0 / static_cast<double>(per_frame.frames);
  for (std::size_t l = 0; l < per_frame.layers; ++l)
    for (std::size_t f = 0; f < per_frame.frames; ++f) {
      const double* src = per_frame.weights.data() + (l * per_frame.frames + f) * cells;
      double* dst = averaged.weights.data() + l * cells;
      for (std::size_t i = 0; i < cells; ++i) dst[i] += src[i] * inv;
    }
  return averaged;
}

void FreqTransformer::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
}

std::size_t FreqTransformer::param_count() const {
  return layers.size() * transformer_layer_param_count(config_.d_model, config_.d_ff);
}

}  // namespace fqa
