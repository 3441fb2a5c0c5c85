#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fqa/ngram_lm.hpp"
#include "test_util.hpp"

namespace fqa {
namespace {

using Sentence = std::vector<std::string>;

// Interpolated Witten-Bell evaluated straight from n-gram counts:
//   P(w | h) = (c(h w) + T(h) P(w | h')) / (c(h) + T(h))   when h was seen,
//   P(w | h) = P(w | h')                                  otherwise,
// bottoming out in a uniform distribution over the predictable vocabulary.
class WittenBellOracle {
 public:
  WittenBellOracle(const std::vector<Sentence>& corpus, std::size_t order, std::set<std::string> vocab)
      : order_(order), vocab_(std::move(vocab)) {
    for (const auto& s : corpus) {
      Sentence ids{kSentenceStart};
      ids.insert(ids.end(), s.begin(), s.end());
      ids.push_back(kSentenceEnd);
      for (std::size_t i = 1; i < ids.size(); ++i)
        for (std::size_t n = 1; n <= order && n <= i + 1; ++n) {
          const Sentence gram(ids.begin() + static_cast<long>(i + 1 - n), ids.begin() + static_cast<long>(i + 1));
          const Sentence hist(gram.begin(), gram.end() - 1);
          if (counts_[gram]++ == 0) types_[hist] += 1;
          totals_[hist] += 1;
        }
    }
  }

  double prob(Sentence history, const std::string& w) const {
    if (history.size() > order_ - 1) history.erase(history.begin(), history.end() - static_cast<long>(order_ - 1));
    const double lower = history.empty() ? 1.0 / static_cast<double>(vocab_.size())
                                         : prob(Sentence(history.begin() + 1, history.end()), w);
    auto total = totals_.find(history);
    if (total == totals_.end()) return lower;
    Sentence gram = history;
    gram.push_back(w);
    auto c = counts_.find(gram);
    const double cw = c == counts_.end() ? 0.0 : c->second;
    const double t = types_.at(history);
    return (cw + t * lower) / (total->second + t);
  }

 private:
  std::size_t order_;
  std::set<std::string> vocab_;
  std::map<Sentence, double> counts_, totals_, types_;
};

const std::vector<Sentence> kCorpus{
    {"a", "b", "c"}, {"a", "b", "b", "c"}, {"c", "a"}, {"b"}, {"a", "b", "c"}, {"c", "c", "a", "b"},
};

TEST(NgramLm, RepeatedSentenceFavoursItsContinuation) {
  const PhonemeLM lm = PhonemeLM::train({{"a", "a", "a"}}, 3, {"b"});
  const double p_a = std::exp(lm.log_prob({"a", "a"}, "a"));
  const double p_b = std::exp(lm.log_prob({"a", "a"}, "b"));
  EXPECT_GT(p_a, 0.5);
  EXPECT_GT(p_a, p_b);
  // Hand-applied recursion: P1(a) = 7/12, P(a|a) = 19/30, P(a|a a) = 17/30;
  // P1(b) = 1/12, P(b|a) = 1/30, P(b|a a) = 1/60.
  EXPECT_NEAR(p_a, 17.0 / 30.0, 1e-12);
  EXPECT_NEAR(p_b, 1.0 / 60.0, 1e-12);
}

TEST(NgramLm, MatchesCountBasedOracleOnEveryContext) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus, 3, {"d"});
  const std::set<std::string> vocab{"a", "b", "c", "d", kSentenceEnd, kUnkSymbol};
  const WittenBellOracle oracle(kCorpus, 3, vocab);
  std::vector<std::string> history_syms{kSentenceStart, "a", "b", "c", "d"};
  std::vector<Sentence> histories{{}};
  for (const auto& x : history_syms) histories.push_back({x});
  for (const auto& x : history_syms)
    for (const auto& y : history_syms) {
      if (y == kSentenceStart) continue;
      histories.push_back({x, y});
    }
  for (const auto& h : histories)
    for (const auto& w : vocab) EXPECT_NEAR(lm.log_prob(h, w), std::log(oracle.prob(h, w)), 1e-12);
}

TEST(NgramLm, DistributionsNormalize) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus, 3, {"d"});
  const auto vocab = lm.vocabulary();
  std::vector<Sentence> histories{{}, {kSentenceStart}, {"a"}, {"a", "b"}, {"d", "d"}, {kSentenceStart, "c"}};
  for (const auto& h : histories) {
    double total = 0;
    for (const auto& w : vocab) total += std::exp(lm.log_prob(h, w));
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(NgramLm, UnseenContextsNeverGetZero) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus, 3, {"d"});
  for (const auto& w : lm.vocabulary()) {
    EXPECT_TRUE(std::isfinite(lm.log_prob({"d", "d"}, w)));
    EXPECT_TRUE(std::isfinite(lm.log_prob({"c", "b"}, w)));
  }
  // Unknown symbols map to <unk>.
  EXPECT_EQ(lm.log_prob({"a"}, "zzz"), lm.log_prob({"a"}, kUnkSymbol));
}

TEST(NgramLm, EmptySequenceScoresSentenceEnd) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus);
  EXPECT_DOUBLE_EQ(lm.sequence_log_prob({}), lm.log_prob({kSentenceStart}, kSentenceEnd));
}

TEST(NgramLm, SequenceLogProbIsChainOfConditionals) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus);
  const double expected = lm.log_prob({kSentenceStart}, "a") + lm.log_prob({kSentenceStart, "a"}, "b") +
                          lm.log_prob({"a", "b"}, "c") + lm.log_prob({"b", "c"}, kSentenceEnd);
  EXPECT_NEAR(lm.sequence_log_prob({"a", "b", "c"}), expected, 1e-12);
}

TEST(NgramLm, AppendingStrictlyDecreasesPrefixScore) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus, 3, {"d"});
  std::mt19937_64 rng(1);
  const std::vector<std::string> syms{"a", "b", "c", "d"};
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    Sentence s;
    double prev = lm.sequence_log_prob(s, false);
    for (int i = 0; i < 6; ++i) {
      s.push_back(syms[pick(rng)]);
      const double cur = lm.sequence_log_prob(s, false);
      EXPECT_LT(cur, prev);
      prev = cur;
    }
  }
}

TEST(NgramLm, TrainingSentenceIsMostLikelyOfItsLength) {
  const Sentence own{"b", "a", "c"};
  const PhonemeLM lm = PhonemeLM::train({own});
  const double own_score = lm.sequence_log_prob(own);
  const std::vector<std::string> syms{"a", "b", "c", kUnkSymbol};
  for (const auto& x : syms)
    for (const auto& y : syms)
      for (const auto& z : syms) {
        const Sentence s{x, y, z};
        if (s == own) continue;
        EXPECT_LT(lm.sequence_log_prob(s), own_score);
      }
}

TEST(NgramLm, EmptyCorpusThrows) { EXPECT_THROW(PhonemeLM::train({}), std::invalid_argument); }

TEST(NgramLm, ArpaRoundTrip) {
  const PhonemeLM lm = PhonemeLM::train(kCorpus, 3, {"d"});
  std::ostringstream out;
  lm.write_arpa(out);
  const std::string text = out.str();
  EXPECT_EQ(text.rfind("\\data\\", 0), 0u);
  EXPECT_NE(text.find("ngram 3="), std::string::npos);
  EXPECT_NE(text.find("\\3-grams:"), std::string::npos);
  EXPECT_NE(text.find("\\end\\"), std::string::npos);
  std::istringstream in(text);
  const PhonemeLM back = PhonemeLM::read_arpa(in);
  EXPECT_EQ(back.order(), 3u);
  for (const Sentence& s : kCorpus) EXPECT_NEAR(back.sequence_log_prob(s), lm.sequence_log_prob(s), 1e-9);
  EXPECT_NEAR(back.log_prob({"d", "a"}, "c"), lm.log_prob({"d", "a"}, "c"), 1e-9);

  testing::TempDir dir("lm");
  lm.save(dir.file("lm.arpa"));
  EXPECT_NEAR(PhonemeLM::load(dir.file("lm.arpa")).sequence_log_prob({"a", "b"}), lm.sequence_log_prob({"a", "b"}),
              1e-9);
}

TEST(NgramLm, ArpaLinesAreTabSeparated) {
  const PhonemeLM lm = PhonemeLM::train({{"a", "b"}});
  std::ostringstream out;
  lm.write_arpa(out);
  std::istringstream in(out.str());
  bool in_section = false;
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("\\", 0) == 0) {
      in_section = line.find("-grams:") != std::string::npos;
      continue;
    }
    if (!in_section || line.empty()) continue;
    EXPECT_NE(line.find('\t'), std::string::npos) << line;
    ++rows;
  }
  EXPECT_GT(rows, 0u);
}

TEST(NgramLm, CorruptArpaThrows) {
  std::istringstream in("not an arpa file\n");
  EXPECT_THROW(PhonemeLM::read_arpa(in), std::runtime_error);
}

}  // namespace
}  // namespace fqa
