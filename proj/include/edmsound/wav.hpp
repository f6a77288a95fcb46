#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "edmsound/binary_io.hpp"
#include "edmsound/error.hpp"
#include "edmsound/spectral.hpp"

namespace edmsound::wav {

enum class SampleFormat { kPcm16, kFloat32 };

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
/// Multi-channel data is mixed down to mono by averaging channels.
inline AudioClip read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  binary::expect_magic(is, "RIFF");
  binary::read_u32(is);
  binary::expect_magic(is, "WAVE");

  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  bool have_fmt = false;
  while (true) {
    char id[4];
    is.read(id, 4);
    if (!is) throw IoError(path.string() + ": no data chunk");
    const std::uint32_t size = binary::read_u32(is);
    const std::string chunk(id, 4);
    if (chunk == "fmt ") {
      format = binary::read_u16(is);
      channels = binary::read_u16(is);
      rate = binary::read_u32(is);
      binary::read_u32(is);  // byte rate
      binary::read_u16(is);  // block align
      bits = binary::read_u16(is);
      if (size > 16) is.ignore(size - 16);
      if (format == 0xFFFE && size >= 40) format = (bits == 32) ? 3 : 1;  // WAVE_FORMAT_EXTENSIBLE, assume PCM/float by width
      have_fmt = true;
    } else if (chunk == "data") {
      if (!have_fmt) throw IoError(path.string() + ": data chunk before fmt chunk");
      if (channels == 0 || rate == 0) throw IoError(path.string() + ": invalid fmt chunk");
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32) throw IoError(path.string() + ": unsupported sample format (need 16-bit PCM or 32-bit float)");
      const std::size_t bytes_per = bits / 8;
      const std::size_t frames = size / (bytes_per * channels);
      if (frames == 0) throw IoError(path.string() + ": empty data chunk");
      std::vector<double> samples(frames, 0.0);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          if (pcm16) {
            acc += static_cast<std::int16_t>(binary::read_u16(is)) / 32768.0;
          } else {
            acc += static_cast<double>(binary::read_f32(is));
          }
        }
        samples[f] = acc / channels;
      }
      AudioClip clip{std::move(samples), static_cast<int>(rate)};
      clip.validate();
      return clip;
    } else {
      is.ignore(size + (size & 1u));
    }
  }
}

inline void write(const std::filesystem::path& path, const AudioClip& clip, SampleFormat fmt = SampleFormat::kFloat32) {
  clip.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot create " + path.string());
  const std::uint16_t bits = fmt == SampleFormat::kPcm16 ? 16 : 32;
  const std::uint16_t block = bits / 8;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * block);
  binary::write_magic(os, "RIFF");
  binary::write_u32(os, 36 + data_bytes);
  binary::write_magic(os, "WAVE");
  binary::write_magic(os, "fmt ");
  binary::write_u32(os, 16);
  binary::write_u16(os, fmt == SampleFormat::kPcm16 ? 1 : 3);
  binary::write_u16(os, 1);
  binary::write_u32(os, static_cast<std::uint32_t>(clip.sample_rate));
  binary::write_u32(os, static_cast<std::uint32_t>(clip.sample_rate) * block);
  binary::write_u16(os, block);
  binary::write_u16(os, bits);
  binary::write_magic(os, "data");
  binary::write_u32(os, data_bytes);
  for (double s : clip.samples) {
    if (fmt == SampleFormat::kPcm16) {
      const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
      binary::write_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clamped * 32768.0))));
    } else {
      binary::write_f32(os, static_cast<float>(s));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace edmsound::wav
