#include "fqa/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "fqa/binary_io.hpp"

namespace fqa {

// ---------------------------------------------------------------------------
// WAV

AudioClip parse_wav(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes);
  auto tag = [&] {
    std::string t(4, '\0');
    in.bytes(t.data(), 4);
    return t;
  };
  try {
    if (tag() != "RIFF") throw std::runtime_error("malformed WAV header: missing RIFF tag");
    in.u32();
    if (tag() != "WAVE") throw std::runtime_error("malformed WAV header: missing WAVE tag");
    bool have_fmt = false;
    std::uint16_t channels = 0;
    std::uint16_t bits = 0;
    std::uint32_t rate = 0;
    while (in.remaining() >= 8) {
      const std::string id = tag();
      const std::uint32_t size = in.u32();
      if (id == "fmt ") {
        if (size < 16) throw std::runtime_error("malformed WAV header: short fmt chunk");
        const std::uint16_t format = in.u16();
        channels = in.u16();
        rate = in.u32();
        in.u32();  // byte rate
        in.u16();  // block align
        bits = in.u16();
        in.skip(size - 16 + (size % 2));
        if (format != 1) throw std::runtime_error("unsupported encoding: WAV format " + std::to_string(format));
        if (bits != 16) throw std::runtime_error("unsupported encoding: " + std::to_string(bits) + "-bit samples");
        if (channels != 1) throw std::runtime_error("unsupported channel count: " + std::to_string(channels));
        if (rate == 0) throw std::runtime_error("malformed WAV header: zero sample rate");
        have_fmt = true;
      } else if (id == "data") {
        if (!have_fmt) throw std::runtime_error("malformed WAV header: data before fmt");
        if (size > in.remaining() || size % 2 != 0) throw std::runtime_error("malformed WAV header: bad data size");
        AudioClip clip;
        clip.sample_rate = static_cast<int>(rate);
        clip.samples.resize(size / 2);
        for (auto& s : clip.samples) s = static_cast<std::int16_t>(in.u16()) / 32768.0;
        if (clip.samples.empty()) throw std::runtime_error("WAV file has no samples");
        return clip;
      } else {
        in.skip(size + (size % 2));
      }
    }
  } catch (const io::TruncatedInput&) {
    throw std::runtime_error("malformed WAV header: truncated file");
  }
  throw std::runtime_error("malformed WAV header: no data chunk");
}

AudioClip read_wav(const std::string& path) { return parse_wav(io::read_file(path)); }

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  io::ByteWriter out;
  out.bytes("RIFF", 4);
  out.u32(36 + 2 * n);
  out.bytes("WAVE", 4);
  out.bytes("fmt ", 4);
  out.u32(16);
  out.u16(1);
  out.u16(1);
  out.u32(static_cast<std::uint32_t>(clip.sample_rate));
  out.u32(static_cast<std::uint32_t>(clip.sample_rate) * 2);
  out.u16(2);
  out.u16(16);
  out.bytes("data", 4);
  out.u32(2 * n);
  for (double s : clip.samples) {
    const double scaled = std::round(s * 32768.0);
    const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    out.u16(static_cast<std::uint16_t>(v));
  }
  return std::move(out.buffer());
}

void write_wav(const std::string& path, const AudioClip& clip) { io::write_file(path, encode_wav(clip)); }

// ---------------------------------------------------------------------------
// STFT

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop) {
  if (window == 0 || hop == 0) throw std::invalid_argument("window and hop must be positive");
  if (num_samples < window) throw std::invalid_argument("clip shorter than one analysis window");
  return 1 + (num_samples - window) / hop;
}

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace {

// FFTW planning is not thread-safe; execution on new arrays is.
fftw_plan r2c_plan(std::size_t n_fft) {
  static std::mutex mutex;
  static std::map<std::size_t, fftw_plan> plans;
  std::lock_guard lock(mutex);
  auto it = plans.find(n_fft);
  if (it != plans.end()) return it->second;
  std::vector<double> in(n_fft);
  std::vector<fftw_complex> out(n_fft / 2 + 1);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in.data(), out.data(),
                                        FFTW_ESTIMATE | FFTW_UNALIGNED);
  plans.emplace(n_fft, plan);
  return plan;
}

}  // namespace

Spectrogram stft(const AudioClip& clip, double window_s, double hop_s) {
  if (clip.sample_rate <= 0) throw std::invalid_argument("sample rate must be positive");
  const auto window = static_cast<std::size_t>(std::lround(window_s * clip.sample_rate));
  const auto hop = static_cast<std::size_t>(std::lround(hop_s * clip.sample_rate));
  const std::size_t frames = frame_count(clip.samples.size(), window, hop);
  const std::size_t n_fft = next_power_of_two(window);
  const std::size_t bins = n_fft / 2 + 1;

  std::vector<double> hann(window);
  for (std::size_t i = 0; i < window; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(window));

  Spectrogram spec;
  spec.frames = frames;
  spec.bins = bins;
  spec.n_fft = n_fft;
  spec.sample_rate = clip.sample_rate;
  spec.power.resize(frames * bins);
  fftw_plan plan = r2c_plan(n_fft);
  std::vector<double> buffer(n_fft, 0.0);
  std::vector<fftw_complex> out(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = clip.samples.data() + t * hop;
    for (std::size_t i = 0; i < window; ++i) buffer[i] = src[i] * hann[i];
    std::fill(buffer.begin() + static_cast<std::ptrdiff_t>(window), buffer.end(), 0.0);
    fftw_execute_dft_r2c(plan, buffer.data(), out.data());
    for (std::size_t k = 0; k < bins; ++k) spec.power[t * bins + k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Mel filterbank

double mel_scale(double hz) {
  if (hz < 0) throw std::invalid_argument("negative frequency");
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

FilterBank build_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate, double f_min, double f_max) {
  if (f_max < 0) f_max = sample_rate / 2.0;
  if (n_mels == 0) throw std::invalid_argument("filterbank needs at least one filter");
  if (sample_rate <= 0 || n_fft < 2) throw std::invalid_argument("invalid sample rate or FFT size");
  if (!(f_min >= 0 && f_min < f_max && f_max <= sample_rate / 2.0))
    throw std::invalid_argument("invalid frequency range for filterbank");

  const double mel_lo = mel_scale(f_min);
  const double mel_hi = mel_scale(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));

  FilterBank fb;
  fb.n_mels = n_mels;
  fb.n_bins = n_fft / 2 + 1;
  fb.weights.assign(n_mels * fb.n_bins, 0.0);
  fb.centers_hz.resize(n_mels);
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    fb.centers_hz[m] = center;
    double* row = fb.weights.data() + m * fb.n_bins;
    double peak = 0.0;
    for (std::size_t k = 0; k < fb.n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double w = std::max(0.0, std::min((f - left) / (center - left), (right - f) / (right - center)));
      row[k] = w;
      peak = std::max(peak, w);
    }
    if (peak <= 0.0)
      throw std::invalid_argument("mel filter " + std::to_string(m) + " covers no FFT bin; increase n_fft");
    for (std::size_t k = 0; k < fb.n_bins; ++k) row[k] /= peak;
  }
  return fb;
}

FeatureMatrix log_mel(const Spectrogram& spectrogram, const FilterBank& fbank, double floor) {
  if (spectrogram.bins != fbank.n_bins)
    throw std::invalid_argument("spectrogram has " + std::to_string(spectrogram.bins) + " bins, filterbank expects " +
                                std::to_string(fbank.n_bins));
  FeatureMatrix out;
  out.frames = spectrogram.frames;
  out.dims = fbank.n_mels;
  out.values.resize(out.frames * out.dims);
  for (std::size_t t = 0; t < out.frames; ++t) {
    const double* p = spectrogram.power.data() + t * spectrogram.bins;
    for (std::size_t m = 0; m < fbank.n_mels; ++m) {
      const double* w = fbank.weights.data() + m * fbank.n_bins;
      double energy = 0.0;
      for (std::size_t k = 0; k < fbank.n_bins; ++k) energy += w[k] * p[k];
      out.values[t * out.dims + m] = std::log(std::max(energy, floor));
    }
  }
  return out;
}

FeatureMatrix cmvn(FeatureMatrix features) {
  if (features.frames < 2) throw std::invalid_argument("CMVN needs at least 2 frames");
  const std::size_t frames = features.frames, dims = features.dims;
  for (std::size_t d = 0; d < dims; ++d) {
    double mean = 0.0;
    for (std::size_t t = 0; t < frames; ++t) mean += features.values[t * dims + d];
    mean /= static_cast<double>(frames);
    double var = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const double c = features.values[t * dims + d] - mean;
      var += c * c;
    }
    var /= static_cast<double>(frames);
    const double inv_std = 1.0 / std::sqrt(std::max(var, 1e-8));
    for (std::size_t t = 0; t < frames; ++t) {
      double& v = features.values[t * dims + d];
      v = var < 1e-8 ? 0.0 : (v - mean) * inv_std;
    }
  }
  return features;
}

FeatureMatrix extract_features(const AudioClip& clip, bool apply_cmvn, const std::string& utterance_id) {
  const Spectrogram spec = stft(clip);
  const FilterBank fbank = build_filterbank(kNumMelBins, spec.n_fft, clip.sample_rate);
  FeatureMatrix feats = log_mel(spec, fbank);
  feats.frame_shift_s = 0.010;
  feats.utterance_id = utterance_id;
  if (apply_cmvn) feats = cmvn(std::move(feats));
  return feats;
}

// ---------------------------------------------------------------------------
// Feature cache

std::vector<std::uint8_t> encode_feature_cache(const FeatureMatrix& features) {
  io::ByteWriter out;
  out.bytes("FBK1", 4);
  out.str(features.utterance_id);
  out.u32(static_cast<std::uint32_t>(features.frames));
  out.u32(static_cast<std::uint32_t>(features.dims));
  out.f64(features.frame_shift_s);
  out.f64s(features.values);
  return std::move(out.buffer());
}

FeatureMatrix decode_feature_cache(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes);
  try {
    char magic[4];
    in.bytes(magic, 4);
    if (std::string(magic, 4) != "FBK1") throw std::runtime_error("not a feature cache (bad magic)");
    FeatureMatrix f;
    f.utterance_id = in.str();
    f.frames = in.u32();
    f.dims = in.u32();
    f.frame_shift_s = in.f64();
    f.values = in.f64s(f.frames * f.dims);
    if (in.remaining() != 0) throw std::runtime_error("feature cache has trailing bytes");
    return f;
  } catch (const io::TruncatedInput&) {
    throw std::runtime_error("truncated feature cache");
  }
}

void write_feature_cache(const std::string& path, const FeatureMatrix& features) {
  io::write_file(path, encode_feature_cache(features));
}

FeatureMatrix read_feature_cache(const std::string& path) { return decode_feature_cache(io::read_file(path)); }

}  // namespace fqa
