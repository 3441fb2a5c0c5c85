#pragma once

// Connectionist temporal classification loss.
//
// Label 0 is the blank. Every computation runs in log space; the forward
// variables include the emission at their own frame while the backward
// variables cover only the frames after it, so that
// sum_s alpha_t(s) * beta_t(s) = P(target | logits) for every t.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "fqa/tensor.hpp"

namespace fqa {

using LabelSequence = std::vector<int>;

inline constexpr int kBlank = 0;
inline constexpr int kUnk = 1;

/// Raised when a target cannot be aligned to the available frames.
class TargetTooLong : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// |target| plus one separating blank per adjacent repeat.
std::size_t ctc_min_frames(std::span<const int> target);

double log_sum_exp(double a, double b);

/// -ln P(target | logits) for a (frames x vocab) row-major logit matrix. When
/// `grad` is non-null it receives d loss / d logits (same layout).
double ctc_neg_log_likelihood(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                              std::span<const int> target, std::vector<double>* grad = nullptr);

/// Scalar loss for one (T, V) logit tensor.
Tensor ctc_loss(const Tensor& logits, std::span<const int> target);

/// Mean over batch items of the per-item loss on (B, T, V) logits, using only
/// frames [0, lengths[b]) of item b.
Tensor ctc_loss_batch(const Tensor& logits, std::span<const std::size_t> lengths,
                      const std::vector<LabelSequence>& targets);

/// Exact enumeration of all vocab^frames alignments. Returns +inf when no
/// alignment collapses to `target`. Throws for instances above 1e6 paths.
double ctc_brute_force(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                       std::span<const int> target);

/// Removes repeats, then blanks.
LabelSequence ctc_collapse(std::span<const int> path);

}  // namespace fqa
