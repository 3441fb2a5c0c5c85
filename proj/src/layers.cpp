#include "fqa/layers.hpp"

#include "linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace fqa {

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::create(std::move(shape), std::move(values), true);
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t pad_time,
              std::size_t pad_freq) {
  if (x.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d expects (B,C,T,F) input and (O,C,kh,kw) kernel");
  const std::size_t batch = x.dim(0), channels = x.dim(1), frames = x.dim(2), bins = x.dim(3);
  const std::size_t out_ch = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != channels)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(channels) + ", kernel expects " +
                     std::to_string(kernel.dim(1)));
  if (bias.numel() != out_ch) throw ShapeError("conv2d bias must have one entry per output channel");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (frames + 2 * pad_time < kh || bins + 2 * pad_freq < kw) throw ShapeError("conv2d kernel larger than input");
  const std::size_t out_t = (frames + 2 * pad_time - kh) / stride + 1;
  const std::size_t out_f = (bins + 2 * pad_freq - kw) / stride + 1;

  const std::size_t patch = channels * kh * kw;
  const std::size_t positions = out_t * out_f;

  // cols(b) is (patch, positions): entry ((c, i, j), (to, fo)) holds the input
  // sample under kernel tap (i, j) for output position (to, fo), or 0 in the
  // padding.
  auto cols = std::make_shared<std::vector<double>>(batch * patch * positions, 0.0);
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          double* row = cols->data() + (b * patch + (c * kh + i) * kw + j) * positions;
          for (std::size_t to = 0; to < out_t; ++to) {
            const std::size_t ti = to * stride + i;
            if (ti < pad_time || ti - pad_time >= frames) continue;
            const double* in_row = xv.data() + ((b * channels + c) * frames + ti - pad_time) * bins;
            for (std::size_t fo = 0; fo < out_f; ++fo) {
              const std::size_t fi = fo * stride + j;
              if (fi >= pad_freq && fi - pad_freq < bins) row[to * out_f + fo] = in_row[fi - pad_freq];
            }
          }
        }

  auto bv = bias.values();
  std::vector<double> out(batch * out_ch * positions);
  for (std::size_t b = 0; b < batch; ++b) {
    auto y = linalg::view(out.data() + b * out_ch * positions, out_ch, positions);
    for (std::size_t o = 0; o < out_ch; ++o) y.row(static_cast<Eigen::Index>(o)).setConstant(bv[o]);
    y.noalias() += linalg::view(kernel.values().data(), out_ch, patch) *
                   linalg::view(cols->data() + b * patch * positions, patch, positions);
  }

  return Tensor::from_op(
      {batch, out_ch, out_t, out_f}, std::move(out), {x, kernel, bias},
      [=](std::span<const double> g, const GradAccess& grads) {
        auto gx = grads[0];
        auto gk = grads[1];
        auto gb = grads[2];
        const auto k = linalg::view(kernel.values().data(), out_ch, patch);
        std::vector<double> dcols(gx.empty() ? 0 : patch * positions);
        for (std::size_t b = 0; b < batch; ++b) {
          const auto gy = linalg::view(g.data() + b * out_ch * positions, out_ch, positions);
          const auto col = linalg::view(cols->data() + b * patch * positions, patch, positions);
          // Plain loop: Eigen's vectorized sum() peels by address alignment, so
          // its rounding would depend on where the buffer happens to live.
          if (!gb.empty())
            for (std::size_t o = 0; o < out_ch; ++o) {
              const double* row = g.data() + (b * out_ch + o) * positions;
              double acc = 0.0;
              for (std::size_t p = 0; p < positions; ++p) acc += row[p];
              gb[o] += acc;
            }
          if (!gk.empty()) linalg::view(gk.data(), out_ch, patch).noalias() += gy * col.transpose();
          if (gx.empty()) continue;
          linalg::view(dcols.data(), patch, positions).noalias() = k.transpose() * gy;
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const double* row = dcols.data() + ((c * kh + i) * kw + j) * positions;
                for (std::size_t to = 0; to < out_t; ++to) {
                  const std::size_t ti = to * stride + i;
                  if (ti < pad_time || ti - pad_time >= frames) continue;
                  double* gin_row = gx.data() + ((b * channels + c) * frames + ti - pad_time) * bins;
                  for (std::size_t fo = 0; fo < out_f; ++fo) {
                    const std::size_t fi = fo * stride + j;
                    if (fi >= pad_freq && fi - pad_freq < bins) gin_row[fi - pad_freq] += row[to * out_f + fo];
                  }
                }
              }
        }
      });
}

Tensor max_pool_time(const Tensor& x, std::size_t pool) {
  if (x.rank() != 4) throw ShapeError("max_pool_time expects (B,C,T,F)");
  if (pool == 0) throw ShapeError("pool size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), frames = x.dim(2), bins = x.dim(3);
  if (frames < pool)
    throw ShapeError("max_pool_time needs at least " + std::to_string(pool) + " frames, got " + std::to_string(frames));
  const std::size_t out_t = frames / pool;
  auto xv = x.values();
  std::vector<double> out(planes * out_t * bins);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t t = 0; t < out_t; ++t)
      for (std::size_t f = 0; f < bins; ++f) {
        std::size_t best = (p * frames + t * pool) * bins + f;
        for (std::size_t k = 1; k < pool; ++k) {
          const std::size_t idx = (p * frames + t * pool + k) * bins + f;
          if (xv[idx] > xv[best]) best = idx;
        }
        const std::size_t o = (p * out_t + t) * bins + f;
        out[o] = xv[best];
        argmax[o] = best;
      }
  return Tensor::from_op({x.dim(0), x.dim(1), out_t, bins}, std::move(out), {x},
                         [argmax = std::move(argmax)](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                         });
}

Tensor mask_frames(const Tensor& x, std::span<const std::size_t> lengths, std::size_t time_axis) {
  if (time_axis == 0 || time_axis >= x.rank()) throw ShapeError("mask_frames: bad time axis");
  const std::size_t batch = x.dim(0);
  if (lengths.size() != batch) throw ShapeError("mask_frames: one length per batch item required");
  const std::size_t frames = x.dim(time_axis);
  bool full = true;
  for (auto len : lengths) full = full && len >= frames;
  if (full) return x;

  std::size_t mid = 1;
  for (std::size_t a = 1; a < time_axis; ++a) mid *= x.dim(a);
  std::size_t inner = 1;
  for (std::size_t a = time_axis + 1; a < x.rank(); ++a) inner *= x.dim(a);

  std::vector<char> keep(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t t = 0; t < frames; ++t)
        std::fill_n(keep.begin() + ((b * mid + m) * frames + t) * inner, inner, t < lengths[b] ? 1 : 0);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? xv[i] : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [keep = std::move(keep)](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (keep[i]) gx[i] += g[i];
                         });
}

Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (ctx.mode == Mode::eval || p == 0.0) return x;
  if (ctx.rng == nullptr) throw std::logic_error("train-mode dropout needs an rng");
  std::bernoulli_distribution drop(p);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = drop(*ctx.rng) ? 0.0 : keep_scale;
  return mul(x, Tensor::create(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Layers

Conv2dLayer::Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size,
                         std::mt19937_64& rng)
    : pad_time(kernel_size / 2), pad_freq(kernel_size / 2) {
  if (kernel_size % 2 == 0) throw std::invalid_argument("same padding needs an odd kernel size");
  const double fan_in = static_cast<double>(in_channels * kernel_size * kernel_size);
  kernel = uniform_tensor({out_channels, in_channels, kernel_size, kernel_size}, std::sqrt(6.0 / fan_in), rng);
  bias = Tensor::zeros({out_channels}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const { return conv2d(x, kernel, bias, stride, pad_time, pad_freq); }

void Conv2dLayer::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".kernel", kernel});
  out.push_back({prefix + ".bias", bias});
}

LinearLayer::LinearLayer(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng) {
  weight = uniform_tensor({in_dim, out_dim}, std::sqrt(6.0 / static_cast<double>(in_dim + out_dim)), rng);
  bias = Tensor::zeros({out_dim}, true);
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != weight.dim(0))
    throw ShapeError("linear layer expects last axis " + std::to_string(weight.dim(0)) + ", got " +
                     shape_string(x.shape()));
  return add(matmul(x, weight), bias);
}

void LinearLayer::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNormLayer::LayerNormLayer(std::size_t dim)
    : gain(Tensor::full({dim}, 1.0, true)), bias(Tensor::zeros({dim}, true)) {}

Tensor LayerNormLayer::forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

void LayerNormLayer::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------------------
// BiLSTM

namespace {

LstmDirection make_direction(std::size_t in_dim, std::size_t hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  LstmDirection dir;
  dir.input_weight = uniform_tensor({in_dim, 4 * hidden}, bound, rng);
  dir.hidden_weight = uniform_tensor({hidden, 4 * hidden}, bound, rng);
  std::vector<double> b(4 * hidden, 0.0);
  std::fill(b.begin() + hidden, b.begin() + 2 * hidden, 1.0);  // forget gate
  dir.bias = Tensor::create({4 * hidden}, std::move(b), true);
  return dir;
}

}  // namespace

BiLstmLayer::BiLstmLayer(std::size_t in_dim, std::size_t hidden, std::mt19937_64& rng)
    : forward_dir(make_direction(in_dim, hidden, rng)), backward_dir(make_direction(in_dim, hidden, rng)) {}

Tensor BiLstmLayer::run_direction(const LstmDirection& dir, const Tensor& x, std::span<const std::size_t> lengths,
                                  bool reverse) {
  const std::size_t batch = x.dim(0), frames = x.dim(1), in = x.dim(2);
  const std::size_t hidden = dir.hidden_weight.dim(0), gates = 4 * hidden;
  const std::vector<std::size_t> lens(lengths.begin(), lengths.end());

  // Per (b, t): activated gates i, f, g, o and the cell state. Padded steps
  // keep zero state, so the reverse pass of a short item starts fresh at its
  // own last frame.
  auto act = std::make_shared<std::vector<double>>(batch * frames * gates, 0.0);
  auto cell = std::make_shared<std::vector<double>>(batch * frames * hidden, 0.0);
  std::vector<double> out(batch * frames * hidden, 0.0);

  std::vector<double> pre(batch * frames * gates);
  {
    auto p = linalg::view(pre.data(), batch * frames, gates);
    p.noalias() = linalg::view(x.values().data(), batch * frames, in) *
                  linalg::view(dir.input_weight.values().data(), in, gates);
    const auto bias = dir.bias.values();
    for (std::size_t r = 0; r < batch * frames; ++r)
      for (std::size_t k = 0; k < gates; ++k) pre[r * gates + k] += bias[k];
  }
  const auto whh = linalg::view(dir.hidden_weight.values().data(), hidden, gates);
  const auto sigm = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };

  std::vector<double> h_prev(batch * hidden, 0.0), c_prev(batch * hidden, 0.0), rec(batch * gates);
  for (std::size_t step = 0; step < frames; ++step) {
    const std::size_t t = reverse ? frames - 1 - step : step;
    linalg::view(rec.data(), batch, gates).noalias() = linalg::view(h_prev.data(), batch, hidden) * whh;
    for (std::size_t b = 0; b < batch; ++b) {
      double* hp = h_prev.data() + b * hidden;
      double* cp = c_prev.data() + b * hidden;
      if (t >= lens[b]) {
        std::fill_n(hp, hidden, 0.0);
        std::fill_n(cp, hidden, 0.0);
        continue;
      }
      const std::size_t bt = b * frames + t;
      double* a = act->data() + bt * gates;
      for (std::size_t k = 0; k < gates; ++k) {
        const double z = pre[bt * gates + k] + rec[b * gates + k];
        a[k] = (k >= 2 * hidden && k < 3 * hidden) ? std::tanh(z) : sigm(z);
      }
      for (std::size_t u = 0; u < hidden; ++u) {
        const double c = a[hidden + u] * cp[u] + a[u] * a[2 * hidden + u];
        const double h = a[3 * hidden + u] * std::tanh(c);
        (*cell)[bt * hidden + u] = c;
        out[bt * hidden + u] = h;
        cp[u] = c;
        hp[u] = h;
      }
    }
  }

  return Tensor::from_op(
      {batch, frames, hidden}, std::move(out), {x, dir.input_weight, dir.hidden_weight, dir.bias},
      [x, w_ih = dir.input_weight, w_hh = dir.hidden_weight, act, cell, lens, batch, frames, in, hidden, gates,
       reverse](std::span<const double> g, const GradAccess& grads) {
        auto gx = grads[0];
        auto gwih = grads[1];
        auto gwhh = grads[2];
        auto gbias = grads[3];
        const auto whh = linalg::view(w_hh.values().data(), hidden, gates);
        std::vector<double> dpre(batch * frames * gates, 0.0);
        std::vector<double> dh_next(batch * hidden, 0.0), dc_next(batch * hidden, 0.0);
        std::vector<double> da(batch * gates), h_before(batch * hidden);
        // Walk the processing order backwards.
        for (std::size_t step = frames; step-- > 0;) {
          const std::size_t t = reverse ? frames - 1 - step : step;
          const std::ptrdiff_t prev_t = reverse ? static_cast<std::ptrdiff_t>(t) + 1 : static_cast<std::ptrdiff_t>(t) - 1;
          for (std::size_t b = 0; b < batch; ++b) {
            double* dab = da.data() + b * gates;
            double* hb = h_before.data() + b * hidden;
            const bool has_prev = prev_t >= 0 && prev_t < static_cast<std::ptrdiff_t>(frames) &&
                                  static_cast<std::size_t>(prev_t) < lens[b];
            const std::size_t bp = has_prev ? b * frames + static_cast<std::size_t>(prev_t) : 0;
            if (t >= lens[b]) {
              std::fill_n(dab, gates, 0.0);
              std::fill_n(hb, hidden, 0.0);
              std::fill_n(dc_next.data() + b * hidden, hidden, 0.0);
              continue;
            }
            const std::size_t bt = b * frames + t;
            const double* a = act->data() + bt * gates;
            for (std::size_t u = 0; u < hidden; ++u) {
              const double c = (*cell)[bt * hidden + u];
              const double tc = std::tanh(c);
              const double c_before = has_prev ? (*cell)[bp * hidden + u] : 0.0;
              const double ig = a[u], fg = a[hidden + u], cg = a[2 * hidden + u], og = a[3 * hidden + u];
              const double dh = g[bt * hidden + u] + dh_next[b * hidden + u];
              const double dc = dc_next[b * hidden + u] + dh * og * (1.0 - tc * tc);
              dab[u] = dc * cg * ig * (1.0 - ig);
              dab[hidden + u] = dc * c_before * fg * (1.0 - fg);
              dab[2 * hidden + u] = dc * ig * (1.0 - cg * cg);
              dab[3 * hidden + u] = dh * tc * og * (1.0 - og);
              dc_next[b * hidden + u] = dc * fg;
              // h_{t-1} is the previous step's output; recover it from the
              // stored cell and output gate.
              hb[u] = has_prev ? act->data()[bp * gates + 3 * hidden + u] * std::tanh(c_before) : 0.0;
            }
            std::copy_n(dab, gates, dpre.data() + bt * gates);
          }
          const auto dA = linalg::view(da.data(), batch, gates);
          if (!gwhh.empty())
            linalg::view(gwhh.data(), hidden, gates).noalias() +=
                linalg::view(h_before.data(), batch, hidden).transpose() * dA;
          linalg::view(dh_next.data(), batch, hidden).noalias() = dA * whh.transpose();
        }
        const auto dP = linalg::view(dpre.data(), batch * frames, gates);
        if (!gx.empty())
          linalg::view(gx.data(), batch * frames, in).noalias() +=
              dP * linalg::view(w_ih.values().data(), in, gates).transpose();
        if (!gwih.empty())
          linalg::view(gwih.data(), in, gates).noalias() +=
              linalg::view(x.values().data(), batch * frames, in).transpose() * dP;
        if (!gbias.empty())
          for (std::size_t r = 0; r < batch * frames; ++r)
            for (std::size_t k = 0; k < gates; ++k) gbias[k] += dpre[r * gates + k];
      });
}

Tensor BiLstmLayer::forward(const Tensor& x, std::span<const std::size_t> lengths) const {
  if (x.rank() != 3) throw ShapeError("BiLSTM expects (B, T, D)");
  if (x.dim(2) != forward_dir.input_weight.dim(0))
    throw ShapeError("BiLSTM input dim " + std::to_string(x.dim(2)) + " != " +
                     std::to_string(forward_dir.input_weight.dim(0)));
  if (lengths.size() != x.dim(0)) throw ShapeError("BiLSTM needs one length per batch item");
  for (auto len : lengths)
    if (len == 0) throw std::invalid_argument("BiLSTM input sequence is empty");
  return concat({run_direction(forward_dir, x, lengths, false), run_direction(backward_dir, x, lengths, true)}, 2);
}

Tensor BiLstmLayer::forward(const Tensor& sequence) const {
  if (sequence.rank() != 2) throw ShapeError("BiLSTM sequence must be (T, D)");
  const std::size_t frames = sequence.dim(0);
  const std::size_t len[] = {frames};
  Tensor out = forward(reshape(sequence, {1, frames, sequence.dim(1)}), len);
  return reshape(out, {frames, 2 * hidden_size()});
}

void BiLstmLayer::collect(const std::string& prefix, ParameterList& out) const {
  for (const auto& [name, dir] : {std::pair{".fw", &forward_dir}, std::pair{".bw", &backward_dir}}) {
    out.push_back({prefix + name + ".input_weight", dir->input_weight});
    out.push_back({prefix + name + ".hidden_weight", dir->hidden_weight});
    out.push_back({prefix + name + ".bias", dir->bias});
  }
}

// ---------------------------------------------------------------------------
// Attention

MultiHeadSelfAttention::MultiHeadSelfAttention(std::size_t d_model, std::size_t heads, std::mt19937_64& rng)
    : n_heads(heads) {
  if (heads == 0 || d_model % heads != 0)
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                std::to_string(heads));
  query = LinearLayer(d_model, d_model, rng);
  key = LinearLayer(d_model, d_model, rng);
  value = LinearLayer(d_model, d_model, rng);
  output = LinearLayer(d_model, d_model, rng);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::vector<double>* weights) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention needs equal (N, L, d) query, key and value tensors");
  const std::size_t n = q.dim(0), len = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw ShapeError("model width is not divisible by the head count");
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  auto probs = std::make_shared<std::vector<double>>(n * heads * len * len);
  std::vector<double> out(n * len * d, 0.0);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = qv + (b * len + i) * d + h * dk;
        double* row = p + i * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kv + (b * len + j) * d + h * dk;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) total += (row[j] = std::exp(row[j] - mx));
        const double inv = 1.0 / total;
        double* oi = out.data() + (b * len + i) * d + h * dk;
        for (std::size_t j = 0; j < len; ++j) {
          row[j] *= inv;
          const double* vj = vv + (b * len + j) * d + h * dk;
          for (std::size_t c = 0; c < dk; ++c) oi[c] += row[j] * vj[c];
        }
      }
    }
  if (weights != nullptr) weights->assign(probs->begin(), probs->end());

  return Tensor::from_op(
      q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs, n, len, d, heads, dk, inv_sqrt](std::span<const double> g, const GradAccess& grads) {
        auto gq = grads[0];
        auto gk = grads[1];
        auto gv = grads[2];
        const double* qv = q.values().data();
        const double* kv = k.values().data();
        const double* vv = v.values().data();
        std::vector<double> dp(len);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (b * heads + h) * len * len;
            for (std::size_t i = 0; i < len; ++i) {
              const double* gi = g.data() + (b * len + i) * d + h * dk;
              const double* row = p + i * len;
              // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = vv + (b * len + j) * d + h * dk;
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                dot += s * row[j];
                if (!gv.empty()) {
                  double* gvj = gv.data() + (b * len + j) * d + h * dk;
                  for (std::size_t c = 0; c < dk; ++c) gvj[c] += row[j] * gi[c];
                }
              }
              // dS_ij = P_ij (dP_ij - sum_j' P_ij' dP_ij'), scaled by 1/sqrt(dk)
              const double* qi = qv + (b * len + i) * d + h * dk;
              double* gqi = gq.empty() ? nullptr : gq.data() + (b * len + i) * d + h * dk;
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = row[j] * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = kv + (b * len + j) * d + h * dk;
                if (gqi)
                  for (std::size_t c = 0; c < dk; ++c) gqi[c] += ds * kj[c];
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * len + j) * d + h * dk;
                  for (std::size_t c = 0; c < dk; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
      });
}

Tensor MultiHeadSelfAttention::forward(const Tensor& seq, std::vector<double>* weights) const {
  if (seq.rank() != 3) throw ShapeError("self-attention expects (N, L, d_model)");
  if (seq.dim(2) != query.weight.dim(0)) throw ShapeError("self-attention token dim mismatch");
  const Tensor mixed =
      multi_head_attention(query.forward(seq), key.forward(seq), value.forward(seq), n_heads, weights);
  return output.forward(mixed);
}

void MultiHeadSelfAttention::collect(const std::string& prefix, ParameterList& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

TransformerEncoderLayer::TransformerEncoderLayer(std::size_t d_model, std::size_t n_heads, std::size_t d_ff,
                                                 double p, std::mt19937_64& rng)
    : attention(d_model, n_heads, rng),
      norm1(d_model),
      ff1(d_model, d_ff, rng),
      ff2(d_ff, d_model, rng),
      norm2(d_model),
      dropout_p(p) {}

Tensor TransformerEncoderLayer::forward(const Tensor& seq, const ForwardContext& ctx,
                                        std::vector<double>* weights) const {
  if (seq.rank() != 3 || seq.dim(2) != d_model())
    throw ShapeError("encoder layer expects (N, L, " + std::to_string(d_model()) + "), got " +
                     shape_string(seq.shape()));
  const Tensor y = norm1.forward(add(seq, dropout(attention.forward(seq, weights), dropout_p, ctx)));
  const Tensor ff = ff2.forward(relu(ff1.forward(y)));
  return norm2.forward(add(y, dropout(ff, dropout_p, ctx)));
}

void TransformerEncoderLayer::collect(const std::string& prefix, ParameterList& out) const {
  attention.collect(prefix + ".attention", out);
  norm1.collect(prefix + ".norm1", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
  norm2.collect(prefix + ".norm2", out);
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts

std::size_t linear_param_count(std::size_t in_dim, std::size_t out_dim) { return in_dim * out_dim + out_dim; }

std::size_t transformer_layer_param_count(std::size_t d_model, std::size_t d_ff) {
  return 4 * linear_param_count(d_model, d_model) + linear_param_count(d_model, d_ff) +
         linear_param_count(d_ff, d_model) + 2 * 2 * d_model;
}

std::size_t bilstm_param_count(std::size_t in_dim, std::size_t hidden) {
  return 2 * 4 * hidden * (in_dim + hidden + 1);
}

std::size_t conv_param_count(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size) {
  return out_channels * in_channels * kernel_size * kernel_size + out_channels;
}

}  // namespace fqa
