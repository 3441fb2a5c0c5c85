#include "fqa/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace fqa {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_probs(std::span<const double> logits, std::size_t frames, std::size_t vocab) {
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

std::vector<std::string> to_symbols(const LabelSequence& labels, std::span<const std::string> symbols) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(symbols[static_cast<std::size_t>(l)]);
  return out;
}

struct State {
  LabelSequence prefix;
  bool blank_end = true;
  bool operator<(const State& o) const {
    if (prefix != o.prefix) return prefix < o.prefix;
    return blank_end && !o.blank_end;
  }
};

}  // namespace

LabelSequence greedy_decode(std::span<const double> logits, std::size_t frames, std::size_t vocab) {
  if (logits.size() != frames * vocab) throw ShapeError("greedy_decode: logits size mismatch");
  std::vector<int> path(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = logits.data() + t * vocab;
    std::size_t best = kBlank;
    for (std::size_t k = 0; k < vocab; ++k) {
      if (static_cast<int>(k) == kUnk) continue;
      if (row[k] > row[best]) best = k;
    }
    path[t] = static_cast<int>(best);
  }
  return ctc_collapse(path);
}

std::vector<Hypothesis> beam_search_decode(std::span<const double> logits, std::size_t frames, std::size_t vocab,
                                           const BeamSearchConfig& config) {
  if (config.beam_width == 0) throw std::invalid_argument("beam width must be >= 1");
  if (logits.size() != frames * vocab || frames == 0) throw ShapeError("beam_search_decode: logits size mismatch");
  if (config.lm != nullptr && config.symbols.size() < vocab)
    throw std::invalid_argument("beam search with an LM needs a symbol for every output label");
  const std::vector<double> lp = log_probs(logits, frames, vocab);
  const bool fuse = config.shallow_fusion && config.lm != nullptr;

  std::map<LabelSequence, double> lm_cache;
  auto prefix_lm = [&](const LabelSequence& prefix) {
    auto it = lm_cache.find(prefix);
    if (it != lm_cache.end()) return it->second;
    const double v = config.lm->sequence_log_prob(to_symbols(prefix, config.symbols), false);
    lm_cache.emplace(prefix, v);
    return v;
  };

  std::vector<std::pair<State, double>> beam{{State{}, 0.0}};
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = lp.data() + t * vocab;
    std::map<State, double> next;
    auto merge = [&](State s, double score) {
      auto [it, inserted] = next.emplace(std::move(s), score);
      if (!inserted) it->second = log_sum_exp(it->second, score);
    };
    for (const auto& [state, score] : beam) {
      merge(State{state.prefix, true}, score + row[kBlank]);
      for (std::size_t k = 0; k < vocab; ++k) {
        const int label = static_cast<int>(k);
        if (label == kBlank || label == kUnk) continue;
        if (!state.prefix.empty() && state.prefix.back() == label && !state.blank_end) {
          merge(State{state.prefix, false}, score + row[k]);
          continue;
        }
        LabelSequence extended = state.prefix;
        extended.push_back(label);
        merge(State{std::move(extended), false}, score + row[k]);
      }
    }
    std::vector<std::tuple<double, State, double>> ranked;
    ranked.reserve(next.size());
    for (auto& [state, score] : next) {
      const double key = fuse ? score + config.lm_weight * prefix_lm(state.prefix) : score;
      ranked.emplace_back(key, state, score);
    }
    const std::size_t keep = std::min(config.beam_width, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                      [](const auto& a, const auto& b) {
                        if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
                        return std::get<1>(a) < std::get<1>(b);
                      });
    beam.clear();
    for (std::size_t i = 0; i < keep; ++i) beam.emplace_back(std::get<1>(ranked[i]), std::get<2>(ranked[i]));
  }

  std::map<LabelSequence, bool> prefixes;
  for (const auto& [state, score] : beam) prefixes[state.prefix] = true;
  std::vector<Hypothesis> nbest;
  for (const auto& [prefix, unused] : prefixes) {
    Hypothesis h;
    h.labels = prefix;
    h.ctc_score = -ctc_neg_log_likelihood(logits, frames, vocab, prefix);
    if (config.lm != nullptr) h.lm_score = config.lm->sequence_log_prob(to_symbols(prefix, config.symbols));
    h.final_score = h.ctc_score + config.lm_weight * h.lm_score;
    nbest.push_back(std::move(h));
  }
  std::stable_sort(nbest.begin(), nbest.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    return a.labels < b.labels;
  });
  return nbest;
}

}  // namespace fqa
