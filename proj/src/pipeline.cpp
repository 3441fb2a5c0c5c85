#include "fqa/pipeline.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "fqa/binary_io.hpp"

namespace fqa {

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

FeatureMatrix load_features(const std::string& path, bool cmvn, const std::string& utterance_id) {
  const auto bytes = io::read_file(path);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "FBK1")) {
    FeatureMatrix f = decode_feature_cache(bytes);
    if (!utterance_id.empty()) f.utterance_id = utterance_id;
    return f;
  }
  return extract_features(parse_wav(bytes), cmvn, utterance_id);
}

std::vector<Utterance> load_utterances(const Manifest& manifest, const PhonemeVocab& vocab, bool cmvn,
                                       std::size_t jobs) {
  std::vector<Utterance> out(manifest.rows.size());
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const auto& row = manifest.rows[i];
    try {
      out[i] = Utterance{row.id, row.language, load_features(manifest.resolve(row), cmvn, row.id), vocab.encode(row)};
    } catch (const std::exception& e) {
      throw std::runtime_error("utterance " + row.id + ": " + e.what());
    }
  });
  return out;
}

Tensor utterance_logits(const Model& model, const FeatureMatrix& features) {
  NoGradGuard no_grad;
  const FeatureMatrix* item = &features;
  std::vector<std::size_t> lengths;
  const Tensor x = make_feature_batch(std::span(&item, 1), lengths);
  const auto out = model.forward(x, lengths, ForwardContext{Mode::eval, nullptr});
  return reshape(out.logits, {out.logits.dim(1), out.logits.dim(2)});
}

std::vector<std::vector<Hypothesis>> decode_utterances(const Model& model, std::span<const Utterance> utterances,
                                                       const BeamSearchConfig& config, std::size_t jobs) {
  std::vector<std::vector<Hypothesis>> out(utterances.size());
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const Tensor logits = utterance_logits(model, utterances[i].features);
    out[i] = beam_search_decode(logits.values(), logits.dim(0), logits.dim(1), config);
  });
  return out;
}

EvaluationResult evaluate(const Model& model, std::span<const Utterance> utterances, const BeamSearchConfig& config,
                          std::size_t jobs) {
  const auto nbest = decode_utterances(model, utterances, config, jobs);
  EvaluationResult result;
  std::vector<ScoredUtterance> scored;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    LabelSequence best = nbest[i].empty() ? LabelSequence{} : nbest[i].front().labels;
    scored.push_back({utterances[i].language, utterances[i].labels, best});
    result.hypotheses.push_back(std::move(best));
  }
  result.rows = score_corpus(scored);
  return result;
}

Matrix attention_matrix(const AttentionMaps& maps, std::size_t layer, int head) {
  if (layer >= maps.layers || maps.frames == 0) throw std::out_of_range("attention layer out of range");
  if (head >= static_cast<int>(maps.heads)) throw std::out_of_range("attention head out of range");
  Matrix m{maps.bins, maps.bins, std::vector<double>(maps.bins * maps.bins, 0.0)};
  const std::size_t first = head < 0 ? 0 : static_cast<std::size_t>(head);
  const std::size_t last = head < 0 ? maps.heads : first + 1;
  const double weight = 1.0 / static_cast<double>((last - first) * maps.frames);
  for (std::size_t f = 0; f < maps.frames; ++f)
    for (std::size_t h = first; h < last; ++h) {
      const auto src = maps.matrix(layer, f, h);
      for (std::size_t i = 0; i < src.size(); ++i) m.values[i] += weight * src[i];
    }
  return m;
}

double band_attention_mass(const AttentionMaps& maps, std::size_t layer, std::size_t band_low,
                           std::size_t band_high) {
  if (band_low >= band_high || band_high > maps.bins) throw std::invalid_argument("band outside the attention map");
  const Matrix m = attention_matrix(maps, layer, -1);
  double mass = 0.0;
  for (std::size_t q = 0; q < m.rows; ++q)
    for (std::size_t k = band_low; k < band_high; ++k) mass += m.at(q, k);
  return mass / static_cast<double>(m.rows);
}

}  // namespace fqa
