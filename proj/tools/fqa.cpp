// fqa: command-line front end for the frequency-attention phoneme recognizer.
//
// Exit codes: 0 success, 1 runtime failure (including partial failures),
// 2 usage errors and missing inputs.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqa/checkpoint.hpp"
#include "fqa/config.hpp"
#include "fqa/data.hpp"
#include "fqa/decode.hpp"
#include "fqa/ngram_lm.hpp"
#include "fqa/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fqa;

namespace {

// Bad invocations and inputs that do not exist.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

/// Config plus the directory its relative manifest paths refer to.
RunConfig read_run_config(const std::string& path) {
  require_file(path, "config file");
  RunConfig cfg = load_config(path);
  const fs::path base = fs::path(path).parent_path();
  for (std::string* p : {&cfg.data.train_manifest, &cfg.data.test_manifest})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return cfg;
}

Manifest read_manifest(const std::string& path) {
  require_file(path, "manifest");
  return load_manifest(path);
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string manifest;
  std::string out_dir;
  bool no_cmvn = false;
  std::size_t jobs = 1;
};

int run_extract(const ExtractArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  fs::create_directories(a.out_dir);
  std::vector<std::string> errors(m.rows.size());
  parallel_for(m.rows.size(), a.jobs, [&](std::size_t i) {
    const auto& row = m.rows[i];
    try {
      const FeatureMatrix f = extract_features(read_wav(m.resolve(row)), !a.no_cmvn, row.id);
      write_feature_cache((fs::path(a.out_dir) / (row.id + ".fbk")).string(), f);
    } catch (const std::exception& e) {
      errors[i] = one_line(e.what());
    }
  });

  Manifest out;
  out.base_dir = a.out_dir;
  std::vector<std::string> failures;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (!errors[i].empty()) {
      failures.push_back(m.rows[i].id + " (" + errors[i] + ")");
      continue;
    }
    ManifestRow row = m.rows[i];
    row.path = row.id + ".fbk";
    out.rows.push_back(std::move(row));
  }
  write_manifest((fs::path(a.out_dir) / "manifest.tsv").string(), out);
  std::cout << "extracted " << out.rows.size() << " of " << m.rows.size() << " utterances into " << a.out_dir
            << '\n';
  if (!failures.empty()) {
    std::string msg;
    for (const auto& f : failures) msg += (msg.empty() ? "" : "; ") + f;
    std::cerr << "error: " << failures.size() << " utterance(s) failed: " << msg << '\n';
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  std::size_t languages = 3;
  std::size_t phonemes = 10;
  std::size_t n_train = 120;
  std::size_t n_test = 30;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  const auto specs = default_synth_languages(a.languages, a.phonemes);
  const SynthCorpus c = synth_corpus(specs, a.n_train, a.n_test, a.seed, a.out_dir);
  for (const auto& s : specs)
    std::cout << s.name << "\tmel bins " << s.band_low << ".." << s.band_high - 1 << '\n';
  std::cout << "wrote " << c.train.rows.size() << " train and " << c.test.rows.size() << " test utterances to "
            << a.out_dir << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct LmArgs {
  std::string manifest;
  std::string out;
  std::size_t order = 3;
};

int run_lm_train(const LmArgs& a) {
  const Manifest m = read_manifest(a.manifest);
  std::vector<std::vector<std::string>> sentences;
  for (const auto& row : m.rows) {
    std::vector<std::string> s;
    for (const auto& p : row.phonemes) s.push_back(language_symbol(row.language, p));
    sentences.push_back(std::move(s));
  }
  if (sentences.empty()) throw std::invalid_argument("manifest " + a.manifest + " has no utterances");
  const PhonemeLM lm = PhonemeLM::train(sentences, a.order);
  lm.save(a.out);
  std::cout << "trained " << a.order << "-gram LM on " << sentences.size() << " sentences, "
            << lm.vocabulary().size() << " symbols -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string variant;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string log;
  std::size_t max_steps = 0;
  std::size_t jobs = 1;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = read_run_config(a.config);
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.max_steps > 0) cfg.train.max_steps = a.max_steps;
  if (cfg.data.train_manifest.empty()) throw ConfigError("[data] train_manifest is required for training");

  const Manifest train_manifest = read_manifest(cfg.data.train_manifest);
  const PhonemeVocab vocab = PhonemeVocab::build(train_manifest);
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = vocab.size();
  if (cfg.model.vocab_size != vocab.size())
    throw ConfigError("config vocab_size " + std::to_string(cfg.model.vocab_size) + " but the training data has " +
                      std::to_string(vocab.size()) + " symbols");
  const auto data = load_utterances(train_manifest, vocab, cfg.data.cmvn, a.jobs);

  const TrainConfig tc = cfg.resolved_train();
  Model model(cfg.model, tc.seed);
  AdamState state;
  const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write training log " + log_path);

  std::cout << "variant=" << to_string(cfg.model.variant) << " params=" << model.count_params()
            << " schedule=" << to_string(tc.schedule.kind) << " utterances=" << data.size()
            << " vocab=" << vocab.size() << " seed=" << tc.seed << '\n';
  const TrainResult result = fit(model, state, data, tc, [&](const StepRecord& r) { log << format_step(r) << '\n'; });
  save_checkpoint(a.out, model, state, vocab.symbols());

  if (!result.log.empty())
    std::cout << "steps=" << result.log.size() << " first_loss=" << result.log.front().loss
              << " final_loss=" << result.log.back().loss << " clipped=" << result.clipped_steps
              << " skipped=" << result.skipped_utterances << '\n';
  std::cout << "checkpoint " << a.out << ", log " << log_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct DecodeArgs {
  std::string config;
  std::string checkpoint;
  std::string manifest;
  std::size_t beam = 20;
  std::string lm;
  double lm_weight = 1.0;
  bool shallow_fusion = false;
  std::size_t nbest = 1;
  std::string out;
  bool json = false;
  std::size_t jobs = 1;
};

struct DecodeSetup {
  RunConfig config;
  LoadedCheckpoint checkpoint;
  PhonemeVocab vocab;
  std::optional<PhonemeLM> lm;
  std::vector<Utterance> utterances;
  BeamSearchConfig search;
};

DecodeSetup prepare_decode(const DecodeArgs& a) {
  RunConfig cfg = read_run_config(a.config);
  require_file(a.checkpoint, "checkpoint");
  const std::string manifest_path = a.manifest.empty() ? cfg.data.test_manifest : a.manifest;
  if (manifest_path.empty()) throw UsageError("no manifest: pass --manifest or set [data] test_manifest");
  if (!a.lm.empty()) require_file(a.lm, "language model");
  const Manifest manifest = read_manifest(manifest_path);

  DecodeSetup s{std::move(cfg), load_checkpoint(a.checkpoint), {}, {}, {}, {}};
  s.vocab = PhonemeVocab::from_symbols(s.checkpoint.vocab);
  if (s.vocab.size() != s.checkpoint.model.config().vocab_size)
    throw std::runtime_error("vocab mismatch: checkpoint vocabulary has " + std::to_string(s.vocab.size()) +
                             " symbols, model outputs " + std::to_string(s.checkpoint.model.config().vocab_size));
  if (!a.lm.empty()) s.lm = PhonemeLM::load(a.lm);
  s.utterances = load_utterances(manifest, s.vocab, s.config.data.cmvn, a.jobs);
  s.search.beam_width = a.beam;
  s.search.lm = s.lm ? &*s.lm : nullptr;
  s.search.lm_weight = a.lm_weight;
  s.search.shallow_fusion = a.shallow_fusion;
  s.search.symbols = s.vocab.symbols();
  return s;
}

void print_header(const DecodeArgs& a) {
  std::cout << "beam=" << a.beam << " lm_weight=" << std::fixed << std::setprecision(1) << a.lm_weight
            << std::defaultfloat << " lm=" << (a.lm.empty() ? "none" : a.lm) << '\n';
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : " ") + x;
  return out;
}

int run_decode(const DecodeArgs& a) {
  if (a.beam == 0) throw UsageError("--beam must be >= 1");
  DecodeSetup s = prepare_decode(a);
  print_header(a);
  const auto nbest = decode_utterances(s.checkpoint.model, s.utterances, s.search, a.jobs);

  std::ostringstream text;
  text.precision(10);
  text << "utterance_id\trank\tfinal_score\tctc_score\tlm_score\tphonemes\n";
  for (std::size_t i = 0; i < s.utterances.size(); ++i)
    for (std::size_t r = 0; r < std::min(a.nbest, nbest[i].size()); ++r) {
      const Hypothesis& h = nbest[i][r];
      text << s.utterances[i].id << '\t' << r + 1 << '\t' << h.final_score << '\t' << h.ctc_score << '\t'
           << h.lm_score << '\t' << join(s.vocab.decode(h.labels)) << '\n';
    }
  if (a.out.empty()) {
    std::cout << text.str();
  } else {
    std::ofstream out(a.out);
    if (!(out << text.str())) throw std::runtime_error("cannot write " + a.out);
    std::cout << "decoded " << s.utterances.size() << " utterances -> " << a.out << '\n';
  }
  return 0;
}

int run_evaluate(const DecodeArgs& a) {
  if (a.beam == 0) throw UsageError("--beam must be >= 1");
  DecodeSetup s = prepare_decode(a);
  print_header(a);
  const EvaluationResult r = evaluate(s.checkpoint.model, s.utterances, s.search, a.jobs);
  const std::string report = a.json ? per_report_json(r.rows) : per_report_tsv(r.rows);
  std::cout << report;
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    if (!(out << report)) throw std::runtime_error("cannot write " + a.out);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct VizArgs {
  std::string checkpoint;
  std::string utterance;
  std::string frames = "0..0";
  std::string out_dir;
  std::string fmt = "pgm";
  bool no_cmvn = false;
};

std::pair<std::size_t, std::size_t> parse_frame_range(const std::string& s) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) throw std::invalid_argument("");
    std::size_t used_a = 0, used_b = 0;
    const std::string lo = s.substr(0, dots), hi = s.substr(dots + 2);
    const unsigned long a = std::stoul(lo, &used_a), b = std::stoul(hi, &used_b);
    if (used_a != lo.size() || used_b != hi.size() || lo[0] == '-' || hi[0] == '-' || a > b)
      throw std::invalid_argument("");
    return {a, b};
  } catch (const std::exception&) {
    throw UsageError("--frames expects a..b with a <= b, got '" + s + "'");
  }
}

int run_viz(const VizArgs& a) {
  const auto [first, last] = parse_frame_range(a.frames);
  const HeatmapFormat fmt = parse_heatmap_format(a.fmt);
  require_file(a.checkpoint, "checkpoint");
  require_file(a.utterance, "utterance");
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const FreqTransformer* freq = ck.model.freq_transformer();
  if (freq == nullptr || freq->layers.empty())
    throw std::runtime_error("no attention to visualize: checkpoint is a " + to_string(ck.model.config().variant) +
                             " model without a frequency transformer");

  const FeatureMatrix features = load_features(a.utterance, !a.no_cmvn);
  std::vector<std::size_t> lengths;
  const std::vector<const FeatureMatrix*> items{&features};
  std::vector<std::size_t> pooled;
  const Tensor batch = make_feature_batch(items, lengths);
  const Tensor x = ck.model.front_end(batch, lengths, pooled);
  if (last >= pooled[0])
    throw UsageError("--frames " + a.frames + " is outside the utterance's " + std::to_string(pooled[0]) +
                     " encoder frames");
  const AttentionMaps maps = freq->collect_attention(x, first, last);

  fs::create_directories(a.out_dir);
  const std::string ext = fmt == HeatmapFormat::pgm ? ".pgm" : ".csv";
  const std::string range = "frames " + std::to_string(first) + ".." + std::to_string(last);
  std::size_t written = 0;
  for (std::size_t l = 0; l < maps.layers; ++l) {
    for (std::size_t h = 0; h < maps.heads; ++h) {
      const std::string name = "layer" + std::to_string(l + 1) + "_head" + std::to_string(h + 1);
      export_heatmap(attention_matrix(maps, l, static_cast<int>(h)), (fs::path(a.out_dir) / (name + ext)).string(),
                     fmt, name + ", " + range + "; rows: query bin 0 at top, columns: key bin 0 at left");
      ++written;
    }
    const std::string name = "layer" + std::to_string(l + 1) + "_mean";
    export_heatmap(attention_matrix(maps, l, -1), (fs::path(a.out_dir) / (name + ext)).string(), fmt,
                   name + " over heads, " + range + "; rows: query bin 0 at top, columns: key bin 0 at left");
    ++written;
  }
  std::cout << "wrote " << written << " " << a.fmt << " heatmaps (" << maps.bins << "x" << maps.bins << ") to "
            << a.out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-attention CTC phoneme recognizer", "fqa"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract-features", "Compute log-mel feature caches for a WAV manifest");
  extract->add_option("--manifest", ex.manifest, "Manifest TSV of WAV files")->required();
  extract->add_option("--out-dir", ex.out_dir, "Directory for .fbk caches and manifest.tsv")->required();
  extract->add_flag("--no-cmvn", ex.no_cmvn, "Skip per-utterance mean/variance normalization")->default_str("false");
  extract->add_option("--jobs", ex.jobs, "Worker threads")->check(CLI::PositiveNumber);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic multilingual corpus");
  synth->add_option("--out-dir", sy.out_dir, "Output directory")->required();
  synth->add_option("--languages", sy.languages, "Number of languages (2-5)");
  synth->add_option("--phonemes", sy.phonemes, "Phonemes per language");
  synth->add_option("--train", sy.n_train, "Training utterances");
  synth->add_option("--test", sy.n_test, "Test utterances");
  synth->add_option("--seed", sy.seed, "Random seed");

  LmArgs lm;
  auto* lm_train = app.add_subcommand("lm-train", "Train a Witten-Bell phoneme n-gram LM (ARPA output)");
  lm_train->add_option("--manifest", lm.manifest, "Training manifest TSV")->required();
  lm_train->add_option("--out", lm.out, "Output ARPA file")->required();
  lm_train->add_option("--order", lm.order, "N-gram order")->check(CLI::PositiveNumber);

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "Train a baseline or proposed model");
  train->add_option("--config", tr.config, "Config file ([model], [train], [data])")->required();
  train->add_option("--variant", tr.variant, "baseline or proposed (overrides the config)")
      ->check(CLI::IsMember({"baseline", "proposed"}));
  auto* seed_opt = train->add_option("--seed", train_seed, "Random seed (overrides the config's seed)")
                       ->default_str("config seed, 0 when unset");
  train->add_option("--out", tr.out, "Output checkpoint")->required();
  train->add_option("--log", tr.log, "Step log path")->default_str("<out>.log");
  train->add_option("--max-steps", tr.max_steps, "Stop after this many updates (0: no cap)");
  train->add_option("--jobs", tr.jobs, "Feature loading threads")->check(CLI::PositiveNumber);

  DecodeArgs de;
  auto add_decode_flags = [](CLI::App* cmd, DecodeArgs& d) {
    cmd->add_option("--config", d.config, "Config file ([data] cmvn, test_manifest)")->required();
    cmd->add_option("--checkpoint", d.checkpoint, "Trained checkpoint")->required();
    cmd->add_option("--manifest", d.manifest, "Manifest to decode")->default_str("[data] test_manifest");
    cmd->add_option("--beam", d.beam, "Beam width");
    cmd->add_option("--lm", d.lm, "ARPA phoneme LM for rescoring")->default_str("none");
    cmd->add_option("--lm-weight", d.lm_weight, "LM weight in the rescoring sum")->default_str("1.0");
    cmd->add_flag("--shallow-fusion", d.shallow_fusion, "Also apply the LM while searching")->default_str("false");
    cmd->add_option("--jobs", d.jobs, "Decoding threads")->check(CLI::PositiveNumber);
  };
  auto* decode = app.add_subcommand("decode", "Decode a manifest to an N-best TSV");
  add_decode_flags(decode, de);
  decode->add_option("--nbest", de.nbest, "Hypotheses per utterance")->check(CLI::PositiveNumber);
  decode->add_option("--out", de.out, "N-best TSV")->default_str("stdout");

  DecodeArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Decode and report PER per language and overall");
  add_decode_flags(evaluate_cmd, ev);
  evaluate_cmd->add_option("--out", ev.out, "Also write the report to this file")->default_str("none");
  evaluate_cmd->add_flag("--json", ev.json, "Emit JSON instead of TSV")->default_str("false");

  VizArgs vz;
  auto* viz = app.add_subcommand("viz-attention", "Export frequency-attention heatmaps for one utterance");
  viz->add_option("--checkpoint", vz.checkpoint, "Proposed-model checkpoint")->required();
  viz->add_option("--utterance", vz.utterance, "WAV or .fbk feature file")->required();
  viz->add_option("--frames", vz.frames, "Encoder frame range a..b (inclusive, after time pooling)");
  viz->add_option("--out-dir", vz.out_dir, "Output directory")->required();
  viz->add_option("--fmt", vz.fmt, "Heatmap format")->check(CLI::IsMember({"pgm", "csv"}));
  viz->add_flag("--no-cmvn", vz.no_cmvn, "Skip CMVN when the utterance is a WAV")->default_str("false");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 2;
  }
  if (seed_opt->count() > 0) tr.seed = train_seed;

  try {
    if (*extract) return run_extract(ex);
    if (*synth) return run_synth(sy);
    if (*lm_train) return run_lm_train(lm);
    if (*train) return run_train(tr);
    if (*decode) return run_decode(de);
    if (*evaluate_cmd) return run_evaluate(ev);
    if (*viz) return run_viz(vz);
  } catch (const UsageError& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 2;
}
