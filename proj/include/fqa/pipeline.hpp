#pragma once

// Glue between manifests, features, models and decoding.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fqa/data.hpp"
#include "fqa/decode.hpp"
#include "fqa/model.hpp"
#include "fqa/train.hpp"

namespace fqa {

/// Runs fn(0) .. fn(n-1) on up to `jobs` threads. Each index is handled
/// exactly once; callers store results by index so output order never
/// depends on scheduling. The first exception is rethrown after all workers
/// finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

/// Reads a WAV (features are extracted, optionally with CMVN) or an FBK1
/// cache (used as stored), chosen by the file's magic bytes.
FeatureMatrix load_features(const std::string& path, bool cmvn, const std::string& utterance_id = {});

std::vector<Utterance> load_utterances(const Manifest& manifest, const PhonemeVocab& vocab, bool cmvn,
                                       std::size_t jobs = 1);

/// Eval-mode logits (T/2, vocab) for one utterance, no graph recorded.
Tensor utterance_logits(const Model& model, const FeatureMatrix& features);

std::vector<std::vector<Hypothesis>> decode_utterances(const Model& model, std::span<const Utterance> utterances,
                                                       const BeamSearchConfig& config, std::size_t jobs = 1);

struct EvaluationResult {
  std::vector<PerRow> rows;
  std::vector<LabelSequence> hypotheses;  // best hypothesis per utterance
};

EvaluationResult evaluate(const Model& model, std::span<const Utterance> utterances, const BeamSearchConfig& config,
                          std::size_t jobs = 1);

/// The F x F map of one (layer, head), or the head mean when head is -1.
Matrix attention_matrix(const AttentionMaps& maps, std::size_t layer, int head);

/// Mean attention mass that queries put on keys in [band_low, band_high),
/// averaged over the rows of the given layer's head-mean map.
double band_attention_mass(const AttentionMaps& maps, std::size_t layer, std::size_t band_low,
                           std::size_t band_high);

}  // namespace fqa
