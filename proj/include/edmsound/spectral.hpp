#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "edmsound/binary_io.hpp"
#include "edmsound/error.hpp"
#include "edmsound/fft.hpp"
#include "edmsound/stats.hpp"

namespace edmsound {

/// Mono waveform. Samples are nominally in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 22050;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (samples.empty()) throw InvalidInput("audio clip is empty");
    if (sample_rate <= 0) throw InvalidInput("sample rate must be positive");
    if (!stats::all_finite(samples)) throw InvalidInput("audio clip contains non-finite samples");
  }
};

enum class WindowKind : std::uint32_t { kHann = 0 };

struct StftConfig {
  std::size_t window_size = 510;
  std::size_t hop_size = 256;
  std::size_t fft_size = 510;
  WindowKind window = WindowKind::kHann;

  std::size_t bins() const { return fft_size / 2 + 1; }
  /// Reflect padding applied to both ends before framing.
  std::size_t pad() const { return window_size / 2; }

  void validate() const {
    if (hop_size == 0 || hop_size > window_size || window_size > fft_size) {
      throw InvalidInput("STFT config needs 0 < hop_size <= window_size <= fft_size");
    }
    if (fft_size % 2 != 0) throw InvalidInput("fft_size must be even");
    if (window != WindowKind::kHann) throw InvalidInput("unknown window kind");
  }

  /// Number of frames produced for a clip of `length` samples.
  std::size_t frames_for(std::size_t length) const {
    const std::size_t padded = length + 2 * pad();
    return 1 + (padded - window_size) / hop_size;
  }

  /// Clip length whose spectrogram has exactly `frames` frames and no
  /// trailing samples left out of the last frame.
  std::size_t length_for(std::size_t frames) const { return (frames - 1) * hop_size + window_size - 2 * pad(); }

  bool operator==(const StftConfig&) const = default;
};

/// Periodic Hann window, w[n] = 0.5 - 0.5 cos(2 pi n / N).
inline std::vector<double> analysis_window(const StftConfig& config) {
  std::vector<double> w(config.window_size);
  const double n = static_cast<double>(config.window_size);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
  }
  return w;
}

/// Frames x bins complex values, row-major (frame-major).
struct ComplexSpectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> values;
  StftConfig config;
  int sample_rate = 22050;

  std::complex<double>& at(std::size_t f, std::size_t b) { return values[f * bins + b]; }
  const std::complex<double>& at(std::size_t f, std::size_t b) const { return values[f * bins + b]; }
};

/// Magnitude compression c -> beta |c|^alpha exp(i arg c).
struct CompressionParams {
  double alpha = 0.5;
  double beta = 1.0;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidInput("compression alpha must be in (0, 1]");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidInput("compression beta must be positive");
  }
  bool operator==(const CompressionParams&) const = default;
};

inline std::vector<double> reflect_pad(std::span<const double> x, std::size_t pad) {
  if (pad >= x.size()) throw InvalidInput("clip too short for reflect padding");
  std::vector<double> out(x.size() + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) out[pad - 1 - i] = x[i + 1];
  for (std::size_t i = 0; i < x.size(); ++i) out[pad + i] = x[i];
  for (std::size_t i = 0; i < pad; ++i) out[pad + x.size() + i] = x[x.size() - 2 - i];
  return out;
}

inline ComplexSpectrogram stft(const AudioClip& clip, const StftConfig& config) {
  config.validate();
  clip.validate();
  if (clip.size() < config.window_size) {
    throw InvalidInput("clip of " + std::to_string(clip.size()) + " samples is shorter than one window (" +
                       std::to_string(config.window_size) + ")");
  }
  const std::vector<double> padded = reflect_pad(clip.samples, config.pad());
  const std::vector<double> window = analysis_window(config);

  ComplexSpectrogram spec;
  spec.config = config;
  spec.sample_rate = clip.sample_rate;
  spec.frames = config.frames_for(clip.size());
  spec.bins = config.bins();
  spec.values.resize(spec.frames * spec.bins);

  RealFft fft(config.fft_size);
  std::vector<double> buffer(config.fft_size, 0.0);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const std::size_t start = f * config.hop_size;
    for (std::size_t i = 0; i < config.window_size; ++i) buffer[i] = padded[start + i] * window[i];
    fft.forward(buffer, std::span(spec.values).subspan(f * spec.bins, spec.bins));
  }
  return spec;
}

/// Least-squares overlap-add of the inverse-transformed frames, returning the
/// full reflect-padded signal of (frames-1)*hop + window samples.
inline std::vector<double> istft_padded(const ComplexSpectrogram& spec, const StftConfig& config) {
  config.validate();
  if (spec.config != config || spec.bins != config.bins()) throw InvalidInput("spectrogram was produced with a different STFT config");
  if (spec.frames == 0 || spec.values.size() != spec.frames * spec.bins) throw InvalidInput("malformed spectrogram");

  const std::vector<double> window = analysis_window(config);
  const std::size_t length = (spec.frames - 1) * config.hop_size + config.window_size;
  std::vector<double> numer(length, 0.0);
  std::vector<double> denom(length, 0.0);

  RealFft fft(config.fft_size);
  std::vector<double> frame(config.fft_size);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    fft.inverse(std::span(spec.values).subspan(f * spec.bins, spec.bins), frame);
    const std::size_t start = f * config.hop_size;
    for (std::size_t i = 0; i < config.window_size; ++i) {
      numer[start + i] += window[i] * frame[i];
      denom[start + i] += window[i] * window[i];
    }
  }
  for (std::size_t t = 0; t < length; ++t) {
    numer[t] = denom[t] > 1e-10 ? numer[t] / denom[t] : 0.0;
  }
  return numer;
}

/// Inverse STFT with the reflect padding removed. Without `length` the clip
/// has length_for(frames) samples; with it the output is truncated or
/// zero-extended to exactly that many samples.
inline AudioClip istft(const ComplexSpectrogram& spec, const StftConfig& config,
                       std::optional<std::size_t> length = std::nullopt) {
  const std::vector<double> padded = istft_padded(spec, config);
  const std::size_t pad = config.pad();
  const std::size_t natural = padded.size() - 2 * pad;
  const std::size_t n = length.value_or(natural);
  AudioClip clip;
  clip.sample_rate = spec.sample_rate;
  clip.samples.assign(n, 0.0);
  for (std::size_t i = 0; i < std::min(n, padded.size() - pad); ++i) clip.samples[i] = padded[pad + i];
  return clip;
}

inline ComplexSpectrogram compress(const ComplexSpectrogram& spec, const CompressionParams& params) {
  params.validate();
  ComplexSpectrogram out = spec;
  for (auto& c : out.values) {
    const double mag = std::abs(c);
    if (mag > 0.0) c *= params.beta * std::pow(mag, params.alpha) / mag;
  }
  return out;
}

inline ComplexSpectrogram decompress(const ComplexSpectrogram& spec, const CompressionParams& params) {
  params.validate();
  ComplexSpectrogram out = spec;
  for (auto& c : out.values) {
    const double mag = std::abs(c);
    if (mag > 0.0) c *= std::pow(mag / params.beta, 1.0 / params.alpha) / mag;
  }
  return out;
}

/// beta = 1 / Q where Q is the inverse-CDF quantile of the given |c|^alpha values.
inline double beta_from_compressed_magnitudes(std::vector<double> magnitudes, double target_quantile) {
  if (!(target_quantile > 0.0 && target_quantile <= 1.0)) throw InvalidInput("target quantile must be in (0, 1]");
  if (magnitudes.empty()) throw CalibrationError("no spectrogram cells to calibrate on");
  const double q = stats::quantile_inverse_cdf(std::move(magnitudes), target_quantile);
  if (!(q > 0.0)) throw CalibrationError("dataset is silent at the requested quantile; cannot calibrate beta");
  return 1.0 / q;
}

/// Picks beta so that the target quantile of beta |c|^alpha over every cell
/// of every clip equals 1.
inline double calibrate_beta(std::span<const AudioClip> clips, const StftConfig& config, double alpha,
                             double target_quantile) {
  if (clips.empty()) throw InvalidInput("calibrate_beta needs at least one clip");
  CompressionParams{alpha, 1.0}.validate();
  std::vector<double> values;
  for (const AudioClip& clip : clips) {
    const ComplexSpectrogram spec = stft(clip, config);
    for (const auto& c : spec.values) values.push_back(std::pow(std::abs(c), alpha));
  }
  return beta_from_compressed_magnitudes(std::move(values), target_quantile);
}

/// Real tensor of shape channels x frames x bins; channel 0 real, channel 1 imaginary.
struct ChannelTensor {
  std::size_t channels = 2;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> data;

  double& at(std::size_t c, std::size_t f, std::size_t b) { return data[(c * frames + f) * bins + b]; }
  double at(std::size_t c, std::size_t f, std::size_t b) const { return data[(c * frames + f) * bins + b]; }
};

struct SpectrogramMeta {
  StftConfig config;
  int sample_rate = 22050;
};

inline ChannelTensor to_channels(const ComplexSpectrogram& spec) {
  ChannelTensor t{2, spec.frames, spec.bins, std::vector<double>(2 * spec.frames * spec.bins)};
  for (std::size_t f = 0; f < spec.frames; ++f) {
    for (std::size_t b = 0; b < spec.bins; ++b) {
      t.at(0, f, b) = spec.at(f, b).real();
      t.at(1, f, b) = spec.at(f, b).imag();
    }
  }
  return t;
}

inline ComplexSpectrogram from_channels(const ChannelTensor& t, const SpectrogramMeta& meta) {
  if (t.channels != 2) throw InvalidInput("expected 2 channels (real, imaginary), got " + std::to_string(t.channels));
  if (t.data.size() != t.channels * t.frames * t.bins) throw InvalidInput("channel tensor size does not match its shape");
  ComplexSpectrogram spec;
  spec.frames = t.frames;
  spec.bins = t.bins;
  spec.config = meta.config;
  spec.sample_rate = meta.sample_rate;
  spec.values.resize(t.frames * t.bins);
  for (std::size_t f = 0; f < t.frames; ++f) {
    for (std::size_t b = 0; b < t.bins; ++b) spec.at(f, b) = {t.at(0, f, b), t.at(1, f, b)};
  }
  return spec;
}

// Spectrogram snapshot file, little-endian:
//   "EDMS" | u32 version | u32 frames | u32 bins | u32 window_size | u32 hop_size
//   | u32 fft_size | u32 window_kind | u32 sample_rate
//   | f32[frames*bins] real channel | f32[frames*bins] imaginary channel
inline constexpr std::uint32_t kSnapshotVersion = 1;

inline void write_snapshot(std::ostream& os, const ComplexSpectrogram& spec) {
  binary::write_magic(os, "EDMS");
  binary::write_u32(os, kSnapshotVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(spec.frames));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.bins));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.config.window_size));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.config.hop_size));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.config.fft_size));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.config.window));
  binary::write_u32(os, static_cast<std::uint32_t>(spec.sample_rate));
  for (const auto& c : spec.values) binary::write_f32(os, static_cast<float>(c.real()));
  for (const auto& c : spec.values) binary::write_f32(os, static_cast<float>(c.imag()));
}

inline ComplexSpectrogram read_snapshot(std::istream& is) {
  binary::expect_magic(is, "EDMS");
  const std::uint32_t version = binary::read_u32(is);
  if (version != kSnapshotVersion) throw IoError("unsupported snapshot version " + std::to_string(version));
  ComplexSpectrogram spec;
  spec.frames = binary::read_u32(is);
  spec.bins = binary::read_u32(is);
  spec.config.window_size = binary::read_u32(is);
  spec.config.hop_size = binary::read_u32(is);
  spec.config.fft_size = binary::read_u32(is);
  spec.config.window = static_cast<WindowKind>(binary::read_u32(is));
  spec.sample_rate = static_cast<int>(binary::read_u32(is));
  if (spec.frames == 0 || spec.bins == 0 || spec.frames * spec.bins > (std::size_t{1} << 30)) throw IoError("snapshot dimensions out of range");
  spec.values.resize(spec.frames * spec.bins);
  for (auto& c : spec.values) c.real(binary::read_f32(is));
  for (auto& c : spec.values) c.imag(binary::read_f32(is));
  return spec;
}

inline void write_snapshot(const std::filesystem::path& path, const ComplexSpectrogram& spec) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot create " + path.string());
  write_snapshot(os, spec);
  if (!os) throw IoError("write failed: " + path.string());
}

inline ComplexSpectrogram read_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_snapshot(is);
}

}  // namespace edmsound
