#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fqa/ctc.hpp"
#include "fqa/ngram_lm.hpp"

namespace fqa {

/// Best path: per-frame argmax (ties to the lower index, <unk> excluded),
/// then collapse repeats and drop blanks.
LabelSequence greedy_decode(std::span<const double> logits, std::size_t frames, std::size_t vocab);

struct BeamSearchConfig {
  std::size_t beam_width = 20;
  const PhonemeLM* lm = nullptr;
  double lm_weight = 1.0;
  /// Adds the weighted LM prefix score while pruning, not only at the end.
  bool shallow_fusion = false;
  /// Label index -> LM symbol; required when `lm` is set.
  std::span<const std::string> symbols;
};

struct Hypothesis {
  LabelSequence labels;
  double final_score = 0.0;
  double ctc_score = 0.0;  // ln P_ctc(labels | logits), exact
  double lm_score = 0.0;   // ln P_lm(labels), 0 without an LM
};

/// CTC prefix beam search. The beam holds (prefix, ends-in-blank) states whose
/// path probabilities are merged with log-sum-exp when two extensions meet.
/// The surviving prefixes form the N-best list, rescored as
/// ctc_score + lm_weight * lm_score and sorted best first (ties by label
/// sequence, lexicographically).
std::vector<Hypothesis> beam_search_decode(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                                           const BeamSearchConfig& config);

}  // namespace fqa
