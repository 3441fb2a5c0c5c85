#include "fqa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fqa/binary_io.hpp"

namespace fs = std::filesystem;

namespace fqa {

// ---------------------------------------------------------------------------
// Manifest

std::string Manifest::resolve(const ManifestRow& row) const {
  const fs::path p(row.path);
  if (p.is_absolute() || base_dir.empty()) return p.string();
  return (fs::path(base_dir) / p).string();
}

Manifest parse_manifest(const std::string& text, const std::string& base_dir, const std::string& source,
                        bool check_files) {
  Manifest m;
  m.base_dir = base_dir;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (fields.size() != 4)
      throw ManifestError(where + "expected 4 tab-separated fields, found " + std::to_string(fields.size()));
    ManifestRow row{fields[0], fields[1], fields[2], {}};
    if (row.id.empty() || row.path.empty() || row.language.empty())
      throw ManifestError(where + "empty id, path or language field");
    std::size_t pos = 0;
    const std::string& tr = fields[3];
    while (pos <= tr.size()) {
      const auto sp = tr.find(' ', pos);
      const std::string tok = tr.substr(pos, sp == std::string::npos ? std::string::npos : sp - pos);
      if (tok.empty()) throw ManifestError(where + "transcript must be single-space separated and non-empty");
      row.phonemes.push_back(tok);
      if (sp == std::string::npos) break;
      pos = sp + 1;
    }
    if (!seen.insert(row.id).second) throw ManifestError(where + "duplicate utterance id '" + row.id + "'");
    if (check_files && !fs::exists(m.resolve(row)))
      throw ManifestError(where + "referenced file does not exist: " + m.resolve(row));
    m.rows.push_back(std::move(row));
  }
  return m;
}

Manifest load_manifest(const std::string& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_manifest(text.str(), fs::path(path).parent_path().string(), path, check_files);
}

std::string format_manifest(const Manifest& m) {
  std::string out;
  for (const auto& r : m.rows) {
    out += r.id + '\t' + r.path + '\t' + r.language + '\t';
    for (std::size_t i = 0; i < r.phonemes.size(); ++i) out += (i ? " " : "") + r.phonemes[i];
    out += '\n';
  }
  return out;
}

void write_manifest(const std::string& path, const Manifest& m) {
  const std::string text = format_manifest(m);
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Vocabulary

std::string language_symbol(const std::string& language, const std::string& phoneme) {
  return language + ":" + phoneme;
}

PhonemeVocab PhonemeVocab::build(std::span<const Manifest> manifests) {
  if (manifests.empty()) throw std::invalid_argument("build_vocab needs at least one manifest");
  std::set<std::string> symbols;
  for (const auto& m : manifests)
    for (const auto& r : m.rows)
      for (const auto& p : r.phonemes) symbols.insert(language_symbol(r.language, p));
  if (symbols.empty()) throw std::invalid_argument("build_vocab: manifests contain no phonemes");
  std::vector<std::string> list{kBlankSymbol, kUnkSymbol};
  list.insert(list.end(), symbols.begin(), symbols.end());
  return from_symbols(std::move(list));
}

PhonemeVocab PhonemeVocab::from_symbols(std::vector<std::string> symbols) {
  if (symbols.size() < 3 || symbols[0] != kBlankSymbol || symbols[1] != kUnkSymbol)
    throw std::invalid_argument("vocabulary must start with <blank>, <unk> and hold at least one phoneme");
  PhonemeVocab v;
  for (std::size_t i = 0; i < symbols.size(); ++i)
    if (!v.index_.emplace(symbols[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary has duplicate symbol " + symbols[i]);
  v.symbols_ = std::move(symbols);
  return v;
}

const std::string& PhonemeVocab::symbol(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= symbols_.size())
    throw std::out_of_range("label " + std::to_string(index) + " outside the vocabulary");
  return symbols_[static_cast<std::size_t>(index)];
}

int PhonemeVocab::index(const std::string& symbol) const {
  const auto it = index_.find(symbol);
  return it == index_.end() ? kUnk : it->second;
}

LabelSequence PhonemeVocab::encode(const ManifestRow& row) const {
  LabelSequence out;
  for (const auto& p : row.phonemes) out.push_back(index(language_symbol(row.language, p)));
  return out;
}

std::vector<std::string> PhonemeVocab::decode(std::span<const int> labels) const {
  std::vector<std::string> out;
  for (int l : labels) out.push_back(symbol(l));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthLanguageSpec::validate() const {
  const std::string who = "synthetic language '" + name + "': ";
  if (name.empty()) throw std::invalid_argument("synthetic language needs a name");
  if (band_low >= band_high || band_high > kNumMelBins)
    throw std::invalid_argument(who + "band must satisfy low < high <= " + std::to_string(kNumMelBins));
  if (n_phonemes == 0 || tone_offsets.size() != n_phonemes)
    throw std::invalid_argument(who + "needs one tone pair per phoneme");
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (auto [a, b] : tone_offsets) {
    if (a == b || band_low + std::max(a, b) >= band_high)
      throw std::invalid_argument(who + "tone offsets must be two distinct bins inside the band");
    if (!pairs.insert({std::min(a, b), std::max(a, b)}).second)
      throw std::invalid_argument(who + "two phonemes share the same tone pair");
  }
  if (min_duration < 1 || min_duration > max_duration) throw std::invalid_argument(who + "bad duration range");
  if (min_length < 1 || min_length > max_length) throw std::invalid_argument(who + "bad utterance length range");
  if (!(noise_floor >= 0.0)) throw std::invalid_argument(who + "noise floor must be >= 0");
}

std::vector<SynthLanguageSpec> default_synth_languages(std::size_t n_languages, std::size_t n_phonemes) {
  if (n_languages < 2 || n_languages > 5) throw std::invalid_argument("synthetic corpus supports 2 to 5 languages");
  const std::size_t stride = kNumMelBins / n_languages;
  const std::size_t width = std::min<std::size_t>(10, stride - 2);
  if (n_phonemes < 1 || n_phonemes > width)
    throw std::invalid_argument("at most " + std::to_string(width) + " phonemes fit in each band");
  std::vector<SynthLanguageSpec> specs;
  for (std::size_t i = 0; i < n_languages; ++i) {
    SynthLanguageSpec s;
    s.name = "lang" + std::to_string(i);
    s.n_phonemes = n_phonemes;
    s.band_low = 2 + i * stride;
    s.band_high = s.band_low + width;
    for (std::size_t k = 0; k < n_phonemes; ++k) s.tone_offsets.emplace_back(k, (k + 3) % width);
    specs.push_back(std::move(s));
  }
  return specs;
}

namespace {

constexpr int kSynthRate = 16000;
constexpr std::size_t kHop = 160;
constexpr std::size_t kRamp = 80;
constexpr std::size_t kEdgePad = 320;

const FilterBank& synth_filterbank() {
  static const FilterBank fb = build_filterbank(kNumMelBins, 512, kSynthRate);
  return fb;
}

void check_bands(std::span<const SynthLanguageSpec> specs) {
  if (specs.size() < 2) throw std::invalid_argument("synthetic corpus needs at least two languages");
  std::set<std::string> names;
  for (const auto& s : specs) {
    s.validate();
    if (!names.insert(s.name).second) throw std::invalid_argument("duplicate synthetic language " + s.name);
  }
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      const auto& a = specs[i];
      const auto& b = specs[j];
      const std::size_t lo = std::max(a.band_low, b.band_low);
      const std::size_t hi = std::min(a.band_high, b.band_high);
      const std::size_t overlap = hi > lo ? hi - lo : 0;
      const std::size_t narrow = std::min(a.band_high - a.band_low, b.band_high - b.band_low);
      if (2 * overlap >= narrow)
        throw std::invalid_argument("bands of " + a.name + " and " + b.name + " overlap by 50% or more");
    }
}

}  // namespace

AudioClip render_utterance(const SynthLanguageSpec& spec, std::span<const std::size_t> phonemes,
                           std::span<const std::size_t> durations, std::mt19937_64& rng) {
  if (phonemes.size() != durations.size()) throw std::invalid_argument("one duration per phoneme required");
  const auto& fb = synth_filterbank();
  std::size_t total = 2 * kEdgePad;
  for (auto d : durations) total += d * kHop;
  AudioClip clip;
  clip.sample_rate = kSynthRate;
  clip.samples.assign(total, 0.0);

  std::size_t offset = kEdgePad;
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    if (phonemes[i] >= spec.n_phonemes) throw std::out_of_range("phoneme index outside the language inventory");
    const auto [a, b] = spec.tone_offsets[phonemes[i]];
    const double fa = fb.centers_hz[spec.band_low + a];
    const double fb_hz = fb.centers_hz[spec.band_low + b];
    const std::size_t len = durations[i] * kHop;
    for (std::size_t n = 0; n < len; ++n) {
      const double t = static_cast<double>(n) / kSynthRate;
      double env = 1.0;
      const std::size_t edge = std::min(n, len - 1 - n);
      if (edge < kRamp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * (static_cast<double>(edge) + 0.5) / kRamp);
      clip.samples[offset + n] +=
          0.3 * env * (std::sin(2.0 * std::numbers::pi * fa * t) + std::sin(2.0 * std::numbers::pi * fb_hz * t));
    }
    offset += len;
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& s : clip.samples) s += spec.noise_floor * noise(rng);
  return clip;
}

SynthCorpus synth_corpus(std::span<const SynthLanguageSpec> specs, std::size_t n_train, std::size_t n_test,
                         std::uint64_t seed, const std::string& out_dir) {
  check_bands(specs);
  const fs::path root(out_dir);
  fs::create_directories(root / "wav");
  std::mt19937_64 rng(seed);
  SynthCorpus corpus;
  corpus.train.base_dir = corpus.test.base_dir = root.string();

  const auto uniform = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  for (std::size_t u = 0; u < n_train + n_test; ++u) {
    const bool train = u < n_train;
    const auto& spec = specs[uniform(0, specs.size() - 1)];
    const std::size_t len = uniform(spec.min_length, spec.max_length);
    std::vector<std::size_t> phonemes, durations;
    for (std::size_t i = 0; i < len; ++i) {
      std::size_t p = uniform(0, spec.n_phonemes - 1);
      // Adjacent repeats would merge into one sustained sound.
      while (spec.n_phonemes > 1 && !phonemes.empty() && p == phonemes.back()) p = uniform(0, spec.n_phonemes - 1);
      phonemes.push_back(p);
      durations.push_back(uniform(spec.min_duration, spec.max_duration));
    }
    const AudioClip clip = render_utterance(spec, phonemes, durations, rng);

    char id[32];
    std::snprintf(id, sizeof id, "%s%04zu", train ? "tr" : "te", train ? u : u - n_train);
    ManifestRow row{id, "wav/" + std::string(id) + ".wav", spec.name, {}};
    for (auto p : phonemes) row.phonemes.push_back("p" + std::to_string(p));
    write_wav((root / row.path).string(), clip);
    (train ? corpus.train : corpus.test).rows.push_back(std::move(row));
  }
  write_manifest((root / "train.tsv").string(), corpus.train);
  write_manifest((root / "test.tsv").string(), corpus.test);
  return corpus;
}

// ---------------------------------------------------------------------------
// Scoring

double per(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw std::invalid_argument("PER is undefined for an empty reference");
  return 100.0 * static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

double per(std::span<const std::string> reference, std::span<const std::string> hypothesis) {
  if (reference.empty()) throw std::invalid_argument("PER is undefined for an empty reference");
  return 100.0 * static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

std::vector<PerRow> score_corpus(std::span<const ScoredUtterance> utterances) {
  std::map<std::string, PerRow> by_lang;
  PerRow all{"All"};
  for (const auto& u : utterances) {
    if (u.reference.empty()) throw std::invalid_argument("PER is undefined for an empty reference");
    const std::size_t e = edit_distance<int>(u.reference, u.hypothesis);
    auto& row = by_lang[u.language];
    row.language = u.language;
    for (PerRow* r : {&row, &all}) {
      r->n_utts += 1;
      r->n_ref += u.reference.size();
      r->edits += e;
    }
  }
  std::vector<PerRow> rows;
  for (auto& [_, r] : by_lang) rows.push_back(r);
  rows.push_back(all);
  for (auto& r : rows)
    r.per_percent = r.n_ref ? 100.0 * static_cast<double>(r.edits) / static_cast<double>(r.n_ref) : 0.0;
  return rows;
}

std::string per_report_tsv(std::span<const PerRow> rows) {
  std::string out = "language\tn_utts\tn_ref_phonemes\tedits\tper_percent\n";
  for (const auto& r : rows) {
    char per_buf[32];
    std::snprintf(per_buf, sizeof per_buf, "%.2f", r.per_percent);
    out += r.language + '\t' + std::to_string(r.n_utts) + '\t' + std::to_string(r.n_ref) + '\t' +
           std::to_string(r.edits) + '\t' + per_buf + '\n';
  }
  return out;
}

std::string per_report_json(std::span<const PerRow> rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"language", r.language},
                 {"n_utts", r.n_utts},
                 {"n_ref_phonemes", r.n_ref},
                 {"edits", r.edits},
                 {"per_percent", r.per_percent}});
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Heatmaps

HeatmapFormat parse_heatmap_format(const std::string& s) {
  if (s == "csv") return HeatmapFormat::csv;
  if (s == "pgm") return HeatmapFormat::pgm;
  throw std::invalid_argument("unknown heatmap format '" + s + "' (expected pgm or csv)");
}

std::string heatmap_csv(const Matrix& m) {
  std::string out;
  char buf[40];
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(r, c));
      if (c) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

Matrix parse_heatmap_csv(const std::string& text) {
  Matrix m;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::size_t cols = 0;
    std::stringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) {
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw std::invalid_argument("bad CSV cell '" + cell + "'");
      m.values.push_back(v);
      ++cols;
    }
    if (m.rows == 0)
      m.cols = cols;
    else if (cols != m.cols)
      throw std::invalid_argument("ragged CSV row " + std::to_string(m.rows + 1));
    ++m.rows;
  }
  return m;
}

std::vector<std::uint8_t> heatmap_pgm(const Matrix& m, const std::string& comment) {
  if (m.values.size() != m.rows * m.cols || m.rows == 0 || m.cols == 0)
    throw std::invalid_argument("heatmap matrix is empty or inconsistent");
  for (double v : m.values)
    if (!std::isfinite(v)) throw std::invalid_argument("heatmap matrix has non-finite values");
  const auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
  const double lo = *lo_it, hi = *hi_it;
  const bool flat = hi - lo <= 1e-9 * std::max(std::abs(hi), std::abs(lo));

  std::string header = "P5\n# row 0 and column 0 at top left; min -> 0, max -> 255 (linear)\n";
  if (!comment.empty()) header += "# " + comment + "\n";
  header += std::to_string(m.cols) + " " + std::to_string(m.rows) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : m.values) {
    const double level = flat ? 128.0 : std::round(255.0 * (v - lo) / (hi - lo));
    out.push_back(static_cast<std::uint8_t>(std::clamp(level, 0.0, 255.0)));
  }
  return out;
}

GrayImage parse_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    return t;
  };
  if (token() != "P5") throw std::invalid_argument("not a binary PGM");
  GrayImage img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw std::invalid_argument("unsupported PGM max value");
  ++pos;  // single whitespace after the header
  if (bytes.size() - pos != img.width * img.height) throw std::invalid_argument("PGM pixel data size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

void export_heatmap(const Matrix& m, const std::string& path, HeatmapFormat format, const std::string& comment) {
  if (format == HeatmapFormat::csv) {
    const std::string text = heatmap_csv(m);
    io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } else {
    io::write_file(path, heatmap_pgm(m, comment));
  }
}

}  // namespace fqa
