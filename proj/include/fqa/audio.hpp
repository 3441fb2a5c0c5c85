#pragma once

// PCM audio to log mel filterbank features.
//
// Front end defaults: 25 ms Hann window, 10 ms hop, FFT size rounded up to a
// power of two, HTK mel scale, 40 triangular filters, natural-log energies
// floored at 1e-10, optional per-utterance mean/variance normalization.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fqa {

inline constexpr std::size_t kNumMelBins = 40;
inline constexpr double kLogFloor = 1e-10;

struct AudioClip {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;
};

/// Parses a RIFF/WAVE PCM 16-bit mono file. Samples are scaled by 1/32768.
AudioClip parse_wav(std::span<const std::uint8_t> bytes);
AudioClip read_wav(const std::string& path);
/// Writes 16-bit PCM mono, clipping to the representable range.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);
void write_wav(const std::string& path, const AudioClip& clip);

struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;  // n_fft / 2 + 1
  std::size_t n_fft = 0;
  int sample_rate = 0;
  std::vector<double> power;  // frames x bins
};

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop);
std::size_t next_power_of_two(std::size_t n);

/// Hann-windowed power spectrogram |DFT|^2.
Spectrogram stft(const AudioClip& clip, double window_s = 0.025, double hop_s = 0.010);

/// HTK mel scale 2595 * log10(1 + f / 700).
double mel_scale(double hz);
double mel_to_hz(double mel);

struct FilterBank {
  std::size_t n_mels = 0;
  std::size_t n_bins = 0;
  std::vector<double> weights;     // n_mels x n_bins
  std::vector<double> centers_hz;  // n_mels
};

/// n_mels triangular filters on n_mels + 2 mel-equispaced edges between
/// f_min and f_max (default sample_rate / 2). Each sampled row is scaled so its
/// largest weight is exactly 1.
FilterBank build_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate, double f_min = 20.0,
                            double f_max = -1.0);

struct FeatureMatrix {
  std::string utterance_id;
  std::size_t frames = 0;
  std::size_t dims = kNumMelBins;
  double frame_shift_s = 0.010;
  std::vector<double> values;  // frames x dims

  double at(std::size_t t, std::size_t d) const { return values[t * dims + d]; }
};

FeatureMatrix log_mel(const Spectrogram& spectrogram, const FilterBank& fbank, double floor = kLogFloor);

/// Per-dimension zero mean / unit variance over the utterance. Variance is
/// floored at 1e-8, so constant columns become zeros. Needs >= 2 frames.
FeatureMatrix cmvn(FeatureMatrix features);

/// Full pipeline with the default analysis settings.
FeatureMatrix extract_features(const AudioClip& clip, bool apply_cmvn, const std::string& utterance_id = {});

/// Feature cache: "FBK1", u32 id length, id bytes, u32 frames, u32 dims,
/// f64 frame shift, then frames*dims f64 values. All little-endian.
std::vector<std::uint8_t> encode_feature_cache(const FeatureMatrix& features);
FeatureMatrix decode_feature_cache(std::span<const std::uint8_t> bytes);
void write_feature_cache(const std::string& path, const FeatureMatrix& features);
FeatureMatrix read_feature_cache(const std::string& path);

}  // namespace fqa
