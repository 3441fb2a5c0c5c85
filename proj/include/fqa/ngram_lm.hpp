#pragma once

// Phoneme n-gram language model with Witten-Bell smoothing.
//
// Smoothing is the interpolated Witten-Bell recursion
//   P(w | h) = (c(h, w) + T(h) * P(w | h')) / (c(h) + T(h))
// where T(h) counts distinct successors of h and h' drops the oldest symbol.
// It is stored in backoff form: seen n-grams carry P(w | h) and every history
// carries alpha(h) = T(h) / (c(h) + T(h)), so lookups follow ARPA semantics.
// The unigram level interpolates with a uniform distribution over the whole
// vocabulary, so no symbol ever gets probability zero.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace fqa {

inline const std::string kSentenceStart = "<s>";
inline const std::string kSentenceEnd = "</s>";
inline const std::string kUnkSymbol = "<unk>";

class PhonemeLM {
 public:
  /// `extra_vocab` adds symbols that never occur in the corpus so they still
  /// receive uniform mass. Throws on an empty corpus.
  static PhonemeLM train(const std::vector<std::vector<std::string>>& sentences, std::size_t order = 3,
                         const std::vector<std::string>& extra_vocab = {});

  static PhonemeLM read_arpa(std::istream& in);
  static PhonemeLM load(const std::string& path);
  void write_arpa(std::ostream& out) const;
  void save(const std::string& path) const;

  std::size_t order() const { return order_; }
  /// Symbols that can be predicted: everything except <s>.
  std::vector<std::string> vocabulary() const;

  /// ln P(word | history); only the last order-1 history symbols are used.
  /// Unknown symbols map to <unk>.
  double log_prob(const std::vector<std::string>& history, const std::string& word) const;

  /// Sum of ln P over the sequence, starting from <s> and, when
  /// `include_end`, closing with </s>.
  double sequence_log_prob(const std::vector<std::string>& sequence, bool include_end = true) const;

 private:
  struct Entry {
    double log10_prob = 0.0;
    double log10_backoff = 0.0;
    bool has_backoff = false;
  };
  using Key = std::vector<int>;

  int intern(const std::string& symbol);
  int lookup(const std::string& symbol) const;
  double log10_prob(const Key& history, int word) const;

  std::size_t order_ = 3;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::map<Key, Entry>> grams_;  // grams_[n-1] holds n-grams
};

}  // namespace fqa
