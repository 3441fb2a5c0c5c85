#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fqa/pipeline.hpp"
#include "test_util.hpp"

namespace fqa {
namespace {

TEST(ParallelFor, EveryIndexOnceForAnyJobCount) {
  for (std::size_t jobs : {1u, 2u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { hits[i]++; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  parallel_for(0, 4, [](std::size_t) { FAIL(); });
}

TEST(ParallelFor, RethrowsWorkerError) {
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 6) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("pipeline");
    corpus_ = synth_corpus(default_synth_languages(2, 4), 6, 3, 1, dir_->path().string());
    vocab_ = PhonemeVocab::build(corpus_.train);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static testing::TempDir* dir_;
  static SynthCorpus corpus_;
  static PhonemeVocab vocab_;
};

testing::TempDir* PipelineTest::dir_ = nullptr;
SynthCorpus PipelineTest::corpus_;
PhonemeVocab PipelineTest::vocab_;

TEST_F(PipelineTest, WavAndCacheGiveSameFeatures) {
  const auto& row = corpus_.train.rows.front();
  const FeatureMatrix from_wav = load_features(corpus_.train.resolve(row), true, row.id);
  write_feature_cache(dir_->file("x.fbk"), from_wav);
  const FeatureMatrix from_cache = load_features(dir_->file("x.fbk"), true);
  EXPECT_EQ(from_cache.values, from_wav.values);
  EXPECT_EQ(from_cache.utterance_id, row.id);
  EXPECT_THROW(load_features(dir_->file("missing.wav"), true), std::runtime_error);
}

TEST_F(PipelineTest, LoadingIsIndependentOfJobCount) {
  const auto a = load_utterances(corpus_.train, vocab_, true, 1);
  const auto b = load_utterances(corpus_.train, vocab_, true, 3);
  ASSERT_EQ(a.size(), corpus_.train.rows.size());
  ASSERT_EQ(b.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, corpus_.train.rows[i].id);
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].features.values, b[i].features.values);
    EXPECT_EQ(a[i].labels, vocab_.encode(corpus_.train.rows[i]));
  }
}

TEST_F(PipelineTest, EvaluateReportsEveryLanguageAndMatchesDecode) {
  const auto utts = load_utterances(corpus_.test, vocab_, true);
  const Model model(ModelConfig::toy(Variant::proposed, vocab_.size()), 3);
  BeamSearchConfig cfg;
  cfg.beam_width = 3;
  const auto serial = evaluate(model, utts, cfg, 1);
  const auto threaded = evaluate(model, utts, cfg, 2);
  EXPECT_EQ(serial.hypotheses, threaded.hypotheses);
  ASSERT_GE(serial.rows.size(), 2u);
  EXPECT_EQ(serial.rows.back().language, "All");
  EXPECT_EQ(serial.rows.back().n_utts, utts.size());
  const auto nbest = decode_utterances(model, utts, cfg);
  for (std::size_t i = 0; i < utts.size(); ++i) EXPECT_EQ(nbest[i].front().labels, serial.hypotheses[i]);
}

TEST_F(PipelineTest, BeamOneLogitsDecodeGreedily) {
  const auto utts = load_utterances(corpus_.test, vocab_, true);
  const Model model(ModelConfig::toy(Variant::baseline, vocab_.size()), 4);
  BeamSearchConfig cfg;
  cfg.beam_width = 1;
  const auto nbest = decode_utterances(model, utts, cfg);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const Tensor logits = utterance_logits(model, utts[i].features);
    EXPECT_EQ(logits.dim(0), utts[i].features.frames / 2);
    EXPECT_EQ(nbest[i].front().labels, greedy_decode(logits.values(), logits.dim(0), logits.dim(1)));
  }
}

AttentionMaps two_frame_maps() {
  AttentionMaps m;
  m.layers = 2;
  m.frames = 2;
  m.heads = 2;
  m.bins = 3;
  m.weights.resize(2 * 2 * 2 * 3 * 3);
  for (std::size_t i = 0; i < m.weights.size(); ++i) m.weights[i] = static_cast<double>(i % 7);
  return m;
}

TEST(AttentionMatrix, HeadAndMeanSelection) {
  const AttentionMaps m = two_frame_maps();
  const Matrix h1 = attention_matrix(m, 1, 1);
  const Matrix mean = attention_matrix(m, 1, -1);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_DOUBLE_EQ(h1.at(q, k), (m.at(1, 0, 1, q, k) + m.at(1, 1, 1, q, k)) / 2);
      double total = 0;
      for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t h = 0; h < 2; ++h) total += m.at(1, f, h, q, k);
      EXPECT_DOUBLE_EQ(mean.at(q, k), total / 4);
    }
  EXPECT_THROW(attention_matrix(m, 2, 0), std::out_of_range);
  EXPECT_THROW(attention_matrix(m, 0, 2), std::out_of_range);
}

TEST(BandAttentionMass, UniformMapsGiveBandFraction) {
  AttentionMaps m;
  m.layers = 1;
  m.frames = 3;
  m.heads = 4;
  m.bins = 40;
  m.weights.assign(3 * 4 * 40 * 40, 1.0 / 40);
  EXPECT_NEAR(band_attention_mass(m, 0, 2, 12), 10.0 / 40, 1e-12);
  EXPECT_THROW(band_attention_mass(m, 0, 12, 12), std::invalid_argument);
  EXPECT_THROW(band_attention_mass(m, 0, 30, 41), std::invalid_argument);
}

}  // namespace
}  // namespace fqa
