#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "edmsound/denoiser_interface.hpp"
#include "edmsound/error.hpp"
#include "edmsound/spectral.hpp"
#include "edmsound/wav.hpp"

namespace edmsound {

/// splitmix64 finalizer; derives independent per-task seeds from a root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(root) ^ a) ^ (b * 0xD6E8FEB86659FD93ull));
}

struct LabeledClip {
  std::string id;
  std::size_t label = 0;
  AudioClip clip;
};

/// Synthesis parameters of one toy sound class: bursts of decaying harmonic
/// tones, optionally mixed with enveloped noise.
struct ToyClassSpec {
  std::string name;
  double freq_lo = 200.0;
  double freq_hi = 400.0;
  double decay_lo = 0.05;  // seconds
  double decay_hi = 0.1;
  int bursts_lo = 1;
  int bursts_hi = 2;
  int harmonics = 1;
  double noise_mix = 0.0;
};

/// Seven classes named after the DCASE 2023 foley categories.
inline std::vector<ToyClassSpec> default_toy_classes() {
  return {
      {"dog_bark", 300.0, 600.0, 0.08, 0.15, 1, 3, 3, 0.1},
      {"footstep", 80.0, 200.0, 0.02, 0.05, 2, 4, 1, 0.3},
      {"gunshot", 150.0, 400.0, 0.10, 0.25, 1, 1, 2, 0.6},
      {"keyboard", 800.0, 1200.0, 0.01, 0.03, 3, 6, 1, 0.1},
      {"moving_motor_vehicle", 100.0, 180.0, 0.50, 1.00, 1, 1, 4, 0.2},
      {"rain", 500.0, 1300.0, 0.005, 0.02, 8, 15, 1, 0.8},
      {"sneeze_cough", 200.0, 500.0, 0.05, 0.12, 1, 2, 2, 0.5},
  };
}

struct ToyDatasetSpec {
  std::vector<ToyClassSpec> classes = default_toy_classes();
  std::size_t clips_per_class = 50;
  /// 7936 samples = exactly 32 STFT frames at window 510 / hop 256.
  std::size_t clip_length = 7936;
  int sample_rate = 22050;

  void validate() const {
    if (classes.empty()) throw InvalidInput("toy dataset needs at least one class");
    if (clips_per_class == 0 || clip_length == 0 || sample_rate <= 0) throw InvalidInput("toy dataset sizes must be positive");
    for (const auto& c : classes) {
      if (!(c.freq_lo > 0.0 && c.freq_lo <= c.freq_hi) || !(c.decay_lo > 0.0 && c.decay_lo <= c.decay_hi) ||
          c.bursts_lo < 1 || c.bursts_lo > c.bursts_hi || c.harmonics < 1) {
        throw InvalidInput("invalid synthesis ranges for class " + c.name);
      }
    }
  }
};

inline AudioClip synthesize_toy_clip(const ToyClassSpec& spec, std::size_t length, int sample_rate, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> normal(0.0, 1.0);

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(length, 0.0);
  const int bursts = std::uniform_int_distribution<int>(spec.bursts_lo, spec.bursts_hi)(rng);
  const double sr = static_cast<double>(sample_rate);
  for (int b = 0; b < bursts; ++b) {
    const auto onset = static_cast<std::size_t>(between(0.0, 0.8) * static_cast<double>(length));
    const double f0 = between(spec.freq_lo, spec.freq_hi);
    const double decay = between(spec.decay_lo, spec.decay_hi);
    const double amp = between(0.3, 0.9);
    const double phase = between(0.0, 2.0 * std::numbers::pi);
    for (std::size_t t = onset; t < length; ++t) {
      const double time = static_cast<double>(t - onset) / sr;
      const double env = amp * std::exp(-time / decay);
      if (env < 1e-6) break;
      double tone = 0.0;
      for (int h = 1; h <= spec.harmonics; ++h) {
        tone += std::sin(2.0 * std::numbers::pi * f0 * h * time + phase * h) / h;
      }
      const double noise = normal(rng);
      clip.samples[t] += env * ((1.0 - spec.noise_mix) * tone + spec.noise_mix * noise * 0.5);
    }
  }
  double peak = 0.0;
  for (double s : clip.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.0) {
    for (double& s : clip.samples) s *= 0.8 / peak;
  }
  return clip;
}

/// Clips are ordered class-major. Clip i of class c draws from its own
/// generator seeded by derive_seed(seed, c, i), so any subset can be
/// regenerated independently.
inline std::vector<LabeledClip> make_toy_dataset(const ToyDatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<LabeledClip> out;
  out.reserve(spec.classes.size() * spec.clips_per_class);
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    for (std::size_t i = 0; i < spec.clips_per_class; ++i) {
      Rng rng(derive_seed(seed, c, i));
      std::ostringstream id;
      id << spec.classes[c].name << '_' << std::setw(4) << std::setfill('0') << i;
      out.push_back({id.str(), c, synthesize_toy_clip(spec.classes[c], spec.clip_length, spec.sample_rate, rng)});
    }
  }
  return out;
}

// On-disk dataset: one WAV (32-bit float) per clip plus manifest.tsv with
// rows "id<TAB>label<TAB>class_name<TAB>file".

inline void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledClip>& clips,
                          const std::vector<std::string>& class_names) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError("cannot create manifest in " + dir.string());
  for (const LabeledClip& c : clips) {
    const std::string file = c.id + ".wav";
    wav::write(dir / file, c.clip);
    const std::string name = c.label < class_names.size() ? class_names[c.label] : std::to_string(c.label);
    manifest << c.id << '\t' << c.label << '\t' << name << '\t' << file << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest in " + dir.string());
}

struct LoadedDataset {
  std::vector<LabeledClip> clips;
  std::vector<std::string> class_names;  // indexed by label
};

/// Reads a dataset directory. With a manifest, labels come from it; without
/// one every *.wav file is loaded (sorted by name) with label 0 and its stem
/// as id.
inline LoadedDataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  LoadedDataset ds;
  const auto manifest_path = dir / "manifest.tsv";
  if (std::filesystem::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string id, label, name, file;
      if (!std::getline(row, id, '\t') || !std::getline(row, label, '\t') || !std::getline(row, name, '\t') ||
          !std::getline(row, file, '\t')) {
        throw IoError(manifest_path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
      }
      std::size_t lab = 0;
      try {
        lab = std::stoul(label);
      } catch (const std::exception&) {
        throw IoError(manifest_path.string() + ":" + std::to_string(line_no) + ": bad label \"" + label + "\"");
      }
      if (ds.class_names.size() <= lab) ds.class_names.resize(lab + 1);
      ds.class_names[lab] = name;
      ds.clips.push_back({id, lab, wav::read(dir / file)});
    }
  } else {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) ds.clips.push_back({f.stem().string(), 0, wav::read(f)});
    if (!files.empty()) ds.class_names = {"unlabeled"};
  }
  return ds;
}

}  // namespace edmsound
