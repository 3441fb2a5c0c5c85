#include "fqa/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fqa {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void validate_target(std::span<const int> target, std::size_t vocab) {
  for (int label : target)
    if (label <= kBlank || static_cast<std::size_t>(label) >= vocab)
      throw std::invalid_argument("CTC target label " + std::to_string(label) + " outside [1, " +
                                  std::to_string(vocab) + ")");
}

std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t frames, std::size_t vocab) {
  std::vector<double> out(frames * vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = logits.data() + t * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double total = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) total += std::exp(row[k] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t k = 0; k < vocab; ++k) out[t * vocab + k] = row[k] - lse;
  }
  return out;
}

}  // namespace

double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

LabelSequence ctc_collapse(std::span<const int> path) {
  LabelSequence out;
  int prev = -1;
  for (int label : path) {
    if (label != prev && label != kBlank) out.push_back(label);
    prev = label;
  }
  return out;
}

double ctc_neg_log_likelihood(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                              std::span<const int> target, std::vector<double>* grad) {
  if (frames == 0 || vocab < 2 || logits.size() != frames * vocab)
    throw ShapeError("CTC logits must be a non-empty (frames x vocab) matrix with vocab >= 2");
  validate_target(target, vocab);
  const std::size_t needed = ctc_min_frames(target);
  if (frames < needed)
    throw TargetTooLong("target of length " + std::to_string(target.size()) + " needs " + std::to_string(needed) +
                        " frames, only " + std::to_string(frames) + " available");

  const std::vector<double> ly = log_softmax_rows(logits, frames, vocab);
  const std::size_t states = 2 * target.size() + 1;
  auto label_of = [&](std::size_t s) { return s % 2 == 0 ? kBlank : target[s / 2]; };
  // A skip from s-2 to s is allowed onto a non-blank that differs from s-2.
  auto can_skip = [&](std::size_t s) { return s >= 2 && s % 2 == 1 && label_of(s) != label_of(s - 2); };

  std::vector<double> alpha(frames * states, kNegInf);
  alpha[0] = ly[kBlank];
  if (states > 1) alpha[1] = ly[static_cast<std::size_t>(label_of(1))];
  for (std::size_t t = 1; t < frames; ++t) {
    const double* prev = alpha.data() + (t - 1) * states;
    double* cur = alpha.data() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = log_sum_exp(acc, prev[s - 1]);
      if (can_skip(s)) acc = log_sum_exp(acc, prev[s - 2]);
      if (acc != kNegInf) cur[s] = acc + ly[t * vocab + static_cast<std::size_t>(label_of(s))];
    }
  }
  const double* last = alpha.data() + (frames - 1) * states;
  double log_p = last[states - 1];
  if (states > 1) log_p = log_sum_exp(log_p, last[states - 2]);
  if (log_p == kNegInf) throw TargetTooLong("target has zero probability under the frame budget");

  if (grad != nullptr) {
    std::vector<double> beta(frames * states, kNegInf);
    double* tail = beta.data() + (frames - 1) * states;
    tail[states - 1] = 0.0;
    if (states > 1) tail[states - 2] = 0.0;
    for (std::size_t t = frames - 1; t-- > 0;) {
      const double* next = beta.data() + (t + 1) * states;
      double* cur = beta.data() + t * states;
      const double* emit = ly.data() + (t + 1) * vocab;
      for (std::size_t s = 0; s < states; ++s) {
        double acc = next[s] + emit[label_of(s)];
        if (s + 1 < states) acc = log_sum_exp(acc, next[s + 1] + emit[label_of(s + 1)]);
        if (s + 2 < states && can_skip(s + 2)) acc = log_sum_exp(acc, next[s + 2] + emit[label_of(s + 2)]);
        cur[s] = acc;
      }
    }
    grad->assign(frames * vocab, 0.0);
    for (std::size_t t = 0; t < frames; ++t) {
      double* g = grad->data() + t * vocab;
      for (std::size_t k = 0; k < vocab; ++k) g[k] = std::exp(ly[t * vocab + k]);
      for (std::size_t s = 0; s < states; ++s) {
        const double a = alpha[t * states + s];
        const double b = beta[t * states + s];
        if (a == kNegInf || b == kNegInf) continue;
        g[label_of(s)] -= std::exp(a + b - log_p);
      }
    }
  }
  return -log_p;
}

Tensor ctc_loss(const Tensor& logits, std::span<const int> target) {
  if (logits.rank() != 2) throw ShapeError("ctc_loss expects (T, V) logits");
  const std::size_t frames = logits.dim(0), vocab = logits.dim(1);
  std::vector<double> grad;
  const double loss = ctc_neg_log_likelihood(logits.values(), frames, vocab, target, &grad);
  return Tensor::from_op({}, {loss}, {logits}, [grad = std::move(grad)](std::span<const double> g, const GradAccess& grads) {
    auto gx = grads[0];
    for (std::size_t i = 0; i < grad.size(); ++i) gx[i] += g[0] * grad[i];
  });
}

Tensor ctc_loss_batch(const Tensor& logits, std::span<const std::size_t> lengths,
                      const std::vector<LabelSequence>& targets) {
  if (logits.rank() != 3) throw ShapeError("ctc_loss_batch expects (B, T, V) logits");
  const std::size_t batch = logits.dim(0), frames = logits.dim(1), vocab = logits.dim(2);
  if (lengths.size() != batch || targets.size() != batch)
    throw ShapeError("ctc_loss_batch needs one length and one target per item");
  std::vector<double> grad(logits.numel(), 0.0);
  double total = 0.0;
  std::vector<double> item_grad;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    if (len == 0 || len > frames) throw ShapeError("ctc_loss_batch: item length out of range");
    auto item = logits.values().subspan(b * frames * vocab, len * vocab);
    total += ctc_neg_log_likelihood(item, len, vocab, targets[b], &item_grad);
    std::copy(item_grad.begin(), item_grad.end(), grad.begin() + static_cast<std::ptrdiff_t>(b * frames * vocab));
  }
  const double inv = 1.0 / static_cast<double>(batch);
  return Tensor::from_op({}, {total * inv}, {logits},
                         [grad = std::move(grad), inv](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t i = 0; i < grad.size(); ++i) gx[i] += g[0] * inv * grad[i];
                         });
}

double ctc_brute_force(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                       std::span<const int> target) {
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(vocab);
  if (paths > 1e6) throw std::invalid_argument("brute-force CTC limited to 1e6 paths");
  validate_target(target, vocab);

  // Plain probabilities; the instances are tiny.
  std::vector<double> prob(frames * vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = logits.data() + t * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double total = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) total += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < vocab; ++k) prob[t * vocab + k] = std::exp(row[k] - mx) / total;
  }
  std::vector<int> path(frames, 0);
  const LabelSequence wanted(target.begin(), target.end());
  double sum = 0.0;
  while (true) {
    if (ctc_collapse(path) == wanted) {
      double p = 1.0;
      for (std::size_t t = 0; t < frames; ++t) p *= prob[t * vocab + static_cast<std::size_t>(path[t])];
      sum += p;
    }
    std::size_t t = frames;
    while (t > 0) {
      --t;
      if (++path[t] < static_cast<int>(vocab)) break;
      path[t] = 0;
      if (t == 0) return sum > 0.0 ? -std::log(sum) : std::numeric_limits<double>::infinity();
    }
  }
}

}  // namespace fqa
