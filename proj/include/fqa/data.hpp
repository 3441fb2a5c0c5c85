#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fqa/audio.hpp"
#include "fqa/ctc.hpp"
#include "fqa/ngram_lm.hpp"

namespace fqa {

// ---------------------------------------------------------------------------
// Manifests: utterance_id \t path \t language \t space-separated phonemes

struct ManifestRow {
  std::string id;
  std::string path;  // as written in the file
  std::string language;
  std::vector<std::string> phonemes;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  /// Directory that relative paths are resolved against.
  std::string base_dir;

  std::string resolve(const ManifestRow& row) const;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `source` names the input in error messages. With `check_files`, every
/// referenced path must exist.
Manifest parse_manifest(const std::string& text, const std::string& base_dir, const std::string& source = "manifest",
                        bool check_files = true);
Manifest load_manifest(const std::string& path, bool check_files = true);
std::string format_manifest(const Manifest& manifest);
void write_manifest(const std::string& path, const Manifest& manifest);

// ---------------------------------------------------------------------------
// Vocabulary

inline const std::string kBlankSymbol = "<blank>";

/// Symbols carry their language as "language:phoneme".
std::string language_symbol(const std::string& language, const std::string& phoneme);

class PhonemeVocab {
 public:
  PhonemeVocab() = default;
  /// Index 0 is <blank>, 1 is <unk>, then the language-prefixed phonemes of
  /// all manifests in lexicographic order.
  static PhonemeVocab build(std::span<const Manifest> manifests);
  static PhonemeVocab build(const Manifest& manifest) { return build(std::span<const Manifest>(&manifest, 1)); }
  /// Restores a vocabulary from its symbol list (as stored in checkpoints).
  static PhonemeVocab from_symbols(std::vector<std::string> symbols);

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(int index) const;
  /// Unknown symbols map to <unk>.
  int index(const std::string& symbol) const;

  LabelSequence encode(const ManifestRow& row) const;
  std::vector<std::string> decode(std::span<const int> labels) const;

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Synthetic multilingual corpus

struct SynthLanguageSpec {
  std::string name;
  std::size_t n_phonemes = 10;
  /// Mel bins [band_low, band_high).
  std::size_t band_low = 0;
  std::size_t band_high = 10;
  /// Per phoneme, the two mel bins (relative to band_low) that carry its tones.
  std::vector<std::pair<std::size_t, std::size_t>> tone_offsets;
  /// Phoneme duration range in 10 ms frames, inclusive.
  std::size_t min_duration = 6;
  std::size_t max_duration = 10;
  /// Phonemes per utterance, inclusive.
  std::size_t min_length = 3;
  std::size_t max_length = 6;
  /// Standard deviation of the additive white noise.
  double noise_floor = 1e-5;

  void validate() const;
};

/// Languages "lang0", "lang1", ... with disjoint bands ordered low to high and
/// phonemes "p0", "p1", .... Supports 2 to 5 languages.
std::vector<SynthLanguageSpec> default_synth_languages(std::size_t n_languages = 3, std::size_t n_phonemes = 10);

/// Renders one utterance. Phoneme k of the spec sounds two sinusoids of
/// amplitude 0.3 at the centre frequencies of its two mel bins.
AudioClip render_utterance(const SynthLanguageSpec& spec, std::span<const std::size_t> phonemes,
                           std::span<const std::size_t> durations, std::mt19937_64& rng);

struct SynthCorpus {
  Manifest train;
  Manifest test;
};

/// Writes <out_dir>/wav/<id>.wav plus train.tsv and test.tsv. Same seed, same
/// bytes.
SynthCorpus synth_corpus(std::span<const SynthLanguageSpec> specs, std::size_t n_train, std::size_t n_test,
                         std::uint64_t seed, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Scoring

/// Levenshtein distance with unit costs.
template <typename T>
std::size_t edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

/// Phoneme error rate in percent. Throws for an empty reference.
double per(std::span<const int> reference, std::span<const int> hypothesis);
double per(std::span<const std::string> reference, std::span<const std::string> hypothesis);

struct ScoredUtterance {
  std::string language;
  LabelSequence reference;
  LabelSequence hypothesis;
};

struct PerRow {
  std::string language;
  std::size_t n_utts = 0;
  std::size_t n_ref = 0;
  std::size_t edits = 0;
  double per_percent = 0.0;
};

/// One row per language (lexicographic), then "All" pooled over every
/// utterance.
std::vector<PerRow> score_corpus(std::span<const ScoredUtterance> utterances);
std::string per_report_tsv(std::span<const PerRow> rows);
std::string per_report_json(std::span<const PerRow> rows);

// ---------------------------------------------------------------------------
// Heatmaps

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

enum class HeatmapFormat { csv, pgm };

HeatmapFormat parse_heatmap_format(const std::string& s);

/// CSV: one line per row, values printed with 17 significant digits.
std::string heatmap_csv(const Matrix& m);
Matrix parse_heatmap_csv(const std::string& text);

/// Binary P5 PGM, one pixel per cell, row 0 / column 0 at the top left.
/// Values are scaled linearly so the minimum maps to 0 and the maximum to 255;
/// a constant matrix becomes uniform gray (128).
std::vector<std::uint8_t> heatmap_pgm(const Matrix& m, const std::string& comment = {});
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};
GrayImage parse_pgm(std::span<const std::uint8_t> bytes);

void export_heatmap(const Matrix& m, const std::string& path, HeatmapFormat format, const std::string& comment = {});

}  // namespace fqa
