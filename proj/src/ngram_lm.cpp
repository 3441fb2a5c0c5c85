#include "fqa/ngram_lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fqa {

namespace {

constexpr double kNoProb = -99.0;

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

}  // namespace

int PhonemeLM::intern(const std::string& symbol) {
  auto [it, inserted] = index_.emplace(symbol, static_cast<int>(symbols_.size()));
  if (inserted) symbols_.push_back(symbol);
  return it->second;
}

int PhonemeLM::lookup(const std::string& symbol) const {
  auto it = index_.find(symbol);
  if (it != index_.end()) return it->second;
  return index_.at(kUnkSymbol);
}

PhonemeLM PhonemeLM::train(const std::vector<std::vector<std::string>>& sentences, std::size_t order,
                           const std::vector<std::string>& extra_vocab) {
  if (order < 1) throw std::invalid_argument("n-gram order must be >= 1");
  if (sentences.empty()) throw std::invalid_argument("cannot train a language model on an empty corpus");

  PhonemeLM lm;
  lm.order_ = order;
  lm.grams_.resize(order);
  // Sorted symbol ids keep the ARPA output independent of corpus order.
  std::set<std::string> vocab{kSentenceEnd, kUnkSymbol};
  for (const auto& s : sentences) vocab.insert(s.begin(), s.end());
  vocab.insert(extra_vocab.begin(), extra_vocab.end());
  vocab.erase(kSentenceStart);
  lm.intern(kSentenceStart);
  for (const auto& sym : vocab) lm.intern(sym);
  const int start = lm.index_.at(kSentenceStart);

  // counts[n-1][ngram] for every predicted position.
  std::vector<std::map<Key, double>> counts(order);
  for (const auto& sentence : sentences) {
    Key ids{start};
    for (const auto& sym : sentence) ids.push_back(lm.lookup(sym));
    ids.push_back(lm.index_.at(kSentenceEnd));
    for (std::size_t i = 1; i < ids.size(); ++i)
      for (std::size_t n = 1; n <= order && n <= i + 1; ++n)
        counts[n - 1][Key(ids.begin() + static_cast<std::ptrdiff_t>(i + 1 - n),
                          ids.begin() + static_cast<std::ptrdiff_t>(i + 1))] += 1.0;
  }

  // Per-history totals and distinct successor counts.
  struct HistoryStats {
    double total = 0.0;
    double types = 0.0;
  };
  std::vector<std::map<Key, HistoryStats>> history(order);
  for (std::size_t n = 1; n <= order; ++n)
    for (const auto& [gram, c] : counts[n - 1]) {
      auto& h = history[n - 1][Key(gram.begin(), gram.end() - 1)];
      h.total += c;
      h.types += 1.0;
    }

  // Natural-probability tables, filled lowest order first.
  const double uniform = 1.0 / static_cast<double>(vocab.size());
  std::vector<std::map<Key, double>> prob(order);
  auto lower_prob = [&](const Key& gram) {
    // P(w | h') for gram = h + w, via the backoff chain of already built levels.
    double p = 1.0;
    for (std::size_t n = gram.size() - 1; n >= 1; --n) {
      const Key shorter(gram.end() - static_cast<std::ptrdiff_t>(n), gram.end());
      auto it = prob[n - 1].find(shorter);
      if (it != prob[n - 1].end()) return p * it->second;
      const Key hist(shorter.begin(), shorter.end() - 1);
      if (n >= 2) {
        auto h = history[n - 1].find(hist);
        if (h != history[n - 1].end()) p *= h->second.types / (h->second.total + h->second.types);
      }
    }
    return p * uniform;
  };

  for (std::size_t n = 1; n <= order; ++n)
    for (const auto& [gram, c] : counts[n - 1]) {
      const auto& h = history[n - 1].at(Key(gram.begin(), gram.end() - 1));
      const double lower = n == 1 ? uniform : lower_prob(gram);
      prob[n - 1][gram] = (c + h.types * lower) / (h.total + h.types);
    }
  // Unigrams for every vocabulary symbol, seen or not.
  const auto& root = history[0].at(Key{});
  for (const auto& sym : vocab) {
    const Key gram{lm.index_.at(sym)};
    if (!prob[0].count(gram)) prob[0][gram] = root.types * uniform / (root.total + root.types);
  }

  for (std::size_t n = 1; n <= order; ++n)
    for (const auto& [gram, p] : prob[n - 1]) lm.grams_[n - 1][gram].log10_prob = std::log10(p);
  lm.grams_[0][Key{start}].log10_prob = kNoProb;
  for (std::size_t n = 2; n <= order; ++n)
    for (const auto& [hist, stats] : history[n - 1]) {
      auto& entry = lm.grams_[n - 2][hist];
      entry.log10_backoff = std::log10(stats.types / (stats.total + stats.types));
      entry.has_backoff = true;
    }
  return lm;
}

double PhonemeLM::log10_prob(const Key& history, int word) const {
  const std::size_t keep = std::min(history.size(), order_ - 1);
  Key context(history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
  double backoff = 0.0;
  while (true) {
    Key gram = context;
    gram.push_back(word);
    const auto& table = grams_[gram.size() - 1];
    auto it = table.find(gram);
    if (it != table.end()) return backoff + it->second.log10_prob;
    if (context.empty()) throw std::logic_error("language model has no unigram for " + symbols_[word]);
    auto ctx = grams_[context.size() - 1].find(context);
    if (ctx != grams_[context.size() - 1].end() && ctx->second.has_backoff) backoff += ctx->second.log10_backoff;
    context.erase(context.begin());
  }
}

double PhonemeLM::log_prob(const std::vector<std::string>& history, const std::string& word) const {
  Key h;
  h.reserve(history.size());
  for (const auto& s : history) h.push_back(s == kSentenceStart ? index_.at(kSentenceStart) : lookup(s));
  return log10_prob(h, lookup(word)) * std::numbers::ln10;
}

double PhonemeLM::sequence_log_prob(const std::vector<std::string>& sequence, bool include_end) const {
  Key h{index_.at(kSentenceStart)};
  double total = 0.0;
  for (const auto& s : sequence) {
    const int w = lookup(s);
    total += log10_prob(h, w);
    h.push_back(w);
  }
  if (include_end) total += log10_prob(h, index_.at(kSentenceEnd));
  return total * std::numbers::ln10;
}

std::vector<std::string> PhonemeLM::vocabulary() const {
  std::vector<std::string> out;
  for (const auto& s : symbols_)
    if (s != kSentenceStart) out.push_back(s);
  return out;
}

void PhonemeLM::write_arpa(std::ostream& out) const {
  auto text = [&](const Key& gram) {
    std::string s;
    for (std::size_t i = 0; i < gram.size(); ++i) s += (i ? " " : "") + symbols_[gram[i]];
    return s;
  };
  out << "\\data\\\n";
  for (std::size_t n = 1; n <= order_; ++n) out << "ngram " << n << "=" << grams_[n - 1].size() << "\n";
  out << std::setprecision(17);
  for (std::size_t n = 1; n <= order_; ++n) {
    out << "\n\\" << n << "-grams:\n";
    std::vector<std::pair<std::string, const Entry*>> rows;
    for (const auto& [gram, entry] : grams_[n - 1]) rows.emplace_back(text(gram), &entry);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [gram, entry] : rows) {
      out << entry->log10_prob << "\t" << gram;
      if (n < order_) out << "\t" << (entry->has_backoff ? entry->log10_backoff : 0.0);
      out << "\n";
    }
  }
  out << "\n\\end\\\n";
}

PhonemeLM PhonemeLM::read_arpa(std::istream& in) {
  PhonemeLM lm;
  std::string line;
  std::vector<std::size_t> declared;
  std::size_t section = 0;
  std::size_t line_no = 0;
  bool ended = false;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error("ARPA parse error at line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "\\data\\") continue;
    if (line == "\\end\\") {
      ended = true;
      break;
    }
    if (line.rfind("ngram ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("bad ngram count line");
      declared.push_back(std::stoul(line.substr(eq + 1)));
      continue;
    }
    if (line.front() == '\\') {
      section = std::stoul(line.substr(1));
      if (section == 0 || section > declared.size()) fail("undeclared section");
      if (lm.grams_.size() < declared.size()) lm.grams_.resize(declared.size());
      continue;
    }
    if (section == 0) fail("n-gram outside a section");
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      fields.push_back(line.substr(pos, tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (fields.size() < 2) fail("expected log10prob<TAB>ngram[<TAB>backoff]");
    const auto words = split_ws(fields[1]);
    if (words.size() != section) fail("n-gram length does not match section");
    Key gram;
    for (const auto& w : words) gram.push_back(lm.intern(w));
    Entry entry;
    entry.log10_prob = std::stod(fields[0]);
    if (fields.size() >= 3) {
      entry.log10_backoff = std::stod(fields[2]);
      entry.has_backoff = true;
    }
    lm.grams_[section - 1][gram] = entry;
  }
  if (!ended) throw std::runtime_error("ARPA file missing \\end\\ marker");
  if (declared.empty()) throw std::runtime_error("ARPA file has no \\data\\ counts");
  for (std::size_t n = 0; n < declared.size(); ++n)
    if (lm.grams_.size() <= n || lm.grams_[n].size() != declared[n])
      throw std::runtime_error("ARPA section " + std::to_string(n + 1) + " count mismatch");
  if (!lm.index_.count(kUnkSymbol) || !lm.index_.count(kSentenceStart) || !lm.index_.count(kSentenceEnd))
    throw std::runtime_error("ARPA model must define <s>, </s> and <unk>");
  lm.order_ = declared.size();
  return lm;
}

PhonemeLM PhonemeLM::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open language model " + path);
  return read_arpa(in);
}

void PhonemeLM::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write language model " + path);
  write_arpa(out);
  if (!out) throw std::runtime_error("failed writing language model " + path);
}

}  // namespace fqa
