#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fqa/ctc.hpp"
#include "fqa/decode.hpp"
#include "fqa/ngram_lm.hpp"
#include "test_util.hpp"

namespace fqa {
namespace {

// Logits whose per-frame argmax follows `path`.
std::vector<double> peaked(const std::vector<int>& path, std::size_t vocab) {
  std::vector<double> out(path.size() * vocab, 0.0);
  for (std::size_t t = 0; t < path.size(); ++t) out[t * vocab + static_cast<std::size_t>(path[t])] = 5.0;
  return out;
}

TEST(GreedyDecode, CollapsesRepeatsAndBlanks) {
  EXPECT_EQ(greedy_decode(peaked({2, 2, 0, 3, 3, 0}, 4), 6, 4), (LabelSequence{2, 3}));
}

TEST(GreedyDecode, AllBlankIsEmpty) { EXPECT_TRUE(greedy_decode(peaked({0, 0, 0}, 4), 3, 4).empty()); }

TEST(GreedyDecode, BlankSeparatesRepeats) {
  EXPECT_EQ(greedy_decode(peaked({2, 0, 2}, 4), 3, 4), (LabelSequence{2, 2}));
}

TEST(GreedyDecode, TiesGoToLowerIndex) {
  const std::vector<double> logits{0.0, 0.0, 1.0, 1.0};
  EXPECT_EQ(greedy_decode(logits, 1, 4), (LabelSequence{2}));
}

TEST(GreedyDecode, NeverEmitsUnk) {
  std::vector<double> logits{0.0, 9.0, 1.0, 0.5};
  EXPECT_EQ(greedy_decode(logits, 1, 4), (LabelSequence{2}));
}

TEST(BeamSearch, WidthOneEqualsGreedyOnRandomInputs) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> t_dist(1, 12), v_dist(3, 7);
  BeamSearchConfig cfg;
  cfg.beam_width = 1;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = t_dist(rng), V = v_dist(rng);
    const auto logits = testing::random_values(T * V, rng, -3, 3);
    const auto nbest = beam_search_decode(logits, T, V, cfg);
    ASSERT_FALSE(nbest.empty());
    EXPECT_EQ(nbest.front().labels, greedy_decode(logits, T, V)) << "trial " << trial;
  }
}

TEST(BeamSearch, ZeroWidthThrows) {
  BeamSearchConfig cfg;
  cfg.beam_width = 0;
  const std::vector<double> logits(6, 0.0);
  EXPECT_THROW(beam_search_decode(logits, 2, 3, cfg), std::invalid_argument);
}

TEST(BeamSearch, ScoresAreExactCtcAndSortedBestFirst) {
  std::mt19937_64 rng(2);
  const std::size_t T = 6, V = 5;
  const auto logits = testing::random_values(T * V, rng, -2, 2);
  const auto nbest = beam_search_decode(logits, T, V, BeamSearchConfig{});
  ASSERT_GT(nbest.size(), 1u);
  for (std::size_t i = 0; i < nbest.size(); ++i) {
    EXPECT_NEAR(nbest[i].ctc_score, -ctc_neg_log_likelihood(logits, T, V, nbest[i].labels), 1e-12);
    EXPECT_EQ(nbest[i].lm_score, 0.0);
    EXPECT_EQ(nbest[i].final_score, nbest[i].ctc_score);
    if (i > 0) {
      EXPECT_GE(nbest[i - 1].final_score, nbest[i].final_score);
    }
    for (int l : nbest[i].labels) EXPECT_GE(l, 2);
  }
}

TEST(BeamSearch, BestScoreMonotoneInWidth) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> t_dist(2, 10), v_dist(3, 6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = t_dist(rng), V = v_dist(rng);
    const auto logits = testing::random_values(T * V, rng, -2, 2);
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t width : {1u, 2u, 5u, 20u}) {
      BeamSearchConfig cfg;
      cfg.beam_width = width;
      const double best = beam_search_decode(logits, T, V, cfg).front().final_score;
      EXPECT_GE(best, prev - 1e-12) << "trial " << trial << " width " << width;
      prev = best;
    }
  }
}

TEST(BeamSearch, ZeroLmWeightKeepsCtcRanking) {
  const PhonemeLM lm = PhonemeLM::train({{"x", "y"}, {"y", "y", "x"}});
  const std::vector<std::string> symbols{"<blank>", kUnkSymbol, "x", "y"};
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = testing::random_values(5 * 4, rng, -2, 2);
    BeamSearchConfig plain;
    BeamSearchConfig zero;
    zero.lm = &lm;
    zero.lm_weight = 0.0;
    zero.symbols = symbols;
    const auto a = beam_search_decode(logits, 5, 4, plain);
    const auto b = beam_search_decode(logits, 5, 4, zero);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].labels, b[i].labels);
      EXPECT_EQ(b[i].final_score, b[i].ctc_score);
    }
  }
}

TEST(BeamSearch, LmNeedsSymbols) {
  const PhonemeLM lm = PhonemeLM::train({{"x"}});
  BeamSearchConfig cfg;
  cfg.lm = &lm;
  const std::vector<double> logits(8, 0.0);
  EXPECT_THROW(beam_search_decode(logits, 2, 4, cfg), std::invalid_argument);
}

// Exhaustive oracle: every label sequence the decoder may emit (labels >= 2),
// scored as exact CTC log-likelihood plus weighted LM log-probability.
std::pair<LabelSequence, double> exhaustive_best(const std::vector<double>& logits, std::size_t T, std::size_t V,
                                                 const PhonemeLM* lm, double weight,
                                                 const std::vector<std::string>& symbols) {
  LabelSequence best;
  double best_score = -std::numeric_limits<double>::infinity();
  LabelSequence cur;
  std::function<void()> rec = [&] {
    if (ctc_min_frames(cur) <= T) {
      double score = -ctc_neg_log_likelihood(logits, T, V, cur);
      if (lm != nullptr) {
        std::vector<std::string> words;
        for (int l : cur) words.push_back(symbols[static_cast<std::size_t>(l)]);
        score += weight * lm->sequence_log_prob(words);
      }
      if (score > best_score || (score == best_score && cur < best)) {
        best_score = score;
        best = cur;
      }
    }
    if (cur.size() == T) return;
    for (int v = 2; v < static_cast<int>(V); ++v) {
      cur.push_back(v);
      rec();
      cur.pop_back();
    }
  };
  rec();
  return {best, best_score};
}

TEST(BeamSearch, ThreeFrameCompetingPrefixes) {
  // Frame-wise argmax spells "x" but the summed alignments of "y" win.
  const std::size_t T = 3, V = 4;
  const std::vector<double> probs{0.0, 0.0, 0.4, 0.6,  //
                                  0.0, 0.0, 0.4, 0.6,  //
                                  0.5, 0.0, 0.5, 0.0};
  std::vector<double> logits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) logits[i] = std::log(probs[i] + 1e-9);
  const auto [oracle, score] = exhaustive_best(logits, T, V, nullptr, 0.0, {});
  const auto nbest = beam_search_decode(logits, T, V, BeamSearchConfig{});
  EXPECT_EQ(nbest.front().labels, oracle);
  EXPECT_NEAR(nbest.front().final_score, score, 1e-12);
}

TEST(BeamSearch, WithLmMatchesExhaustiveScoring) {
  const std::vector<std::string> symbols{"<blank>", kUnkSymbol, "x", "y"};
  const PhonemeLM lm = PhonemeLM::train({{"x", "y"}, {"y", "x", "x"}, {"x", "y", "y"}});
  std::mt19937_64 rng(5);
  for (std::size_t T = 1; T <= 4; ++T)
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t V = 4;
      const auto logits = testing::random_values(T * V, rng, -2, 2);
      for (double weight : {0.5, 1.0, 2.0}) {
        BeamSearchConfig cfg;
        // Wide enough that pruning never drops a candidate at this size.
        cfg.beam_width = 64;
        cfg.lm = &lm;
        cfg.lm_weight = weight;
        cfg.symbols = symbols;
        const auto nbest = beam_search_decode(logits, T, V, cfg);
        const auto [oracle, score] = exhaustive_best(logits, T, V, &lm, weight, symbols);
        EXPECT_EQ(nbest.front().labels, oracle) << "T=" << T << " trial " << trial;
        EXPECT_NEAR(nbest.front().final_score, score, 1e-10);
      }
    }
}

TEST(BeamSearch, ShallowFusionUsesLmDuringSearch) {
  // With a narrow beam, fusion keeps the LM-preferred prefix alive.
  const std::vector<std::string> symbols{"<blank>", kUnkSymbol, "x", "y"};
  std::vector<std::vector<std::string>> corpus(20, {"y"});
  const PhonemeLM lm = PhonemeLM::train(corpus);
  const std::vector<double> logits{0.0, -9.0, 1.0, 0.6};
  BeamSearchConfig cfg;
  cfg.beam_width = 1;
  cfg.lm = &lm;
  cfg.symbols = symbols;
  cfg.lm_weight = 1.0;
  EXPECT_EQ(beam_search_decode(logits, 1, 4, cfg).front().labels, (LabelSequence{2}));
  cfg.shallow_fusion = true;
  EXPECT_EQ(beam_search_decode(logits, 1, 4, cfg).front().labels, (LabelSequence{3}));
}

}  // namespace
}  // namespace fqa
