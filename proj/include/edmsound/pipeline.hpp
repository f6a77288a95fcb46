#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "edmsound/binary_io.hpp"
#include "edmsound/config.hpp"
#include "edmsound/denoiser.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/error.hpp"
#include "edmsound/nn.hpp"
#include "edmsound/sampler.hpp"
#include "edmsound/spectral.hpp"
#include "edmsound/toy_data.hpp"

namespace edmsound {

/// Waveform <-> flattened model state: STFT, crop to the lowest `bins` bins
/// and first `frames` frames (zero-padding short clips), amplitude
/// compression, then real/imaginary channels. Decoding zero-fills the
/// discarded bins before the inverse transform.
struct FrontEnd {
  StftConfig stft;
  CompressionParams compression;
  std::size_t frames = 32;
  std::size_t bins = 32;
  int sample_rate = 22050;

  std::size_t state_dim() const { return 2 * frames * bins; }

  void validate() const {
    stft.validate();
    compression.validate();
    if (frames == 0 || bins == 0 || bins > stft.bins()) throw InvalidInput("front end crop does not fit the STFT");
  }

  State encode(const AudioClip& clip) const {
    const ComplexSpectrogram full = edmsound::stft(clip, stft);
    ComplexSpectrogram crop;
    crop.frames = frames;
    crop.bins = bins;
    crop.config = stft;
    crop.sample_rate = clip.sample_rate;
    crop.values.assign(frames * bins, {0.0, 0.0});
    for (std::size_t f = 0; f < std::min(frames, full.frames); ++f) {
      for (std::size_t b = 0; b < bins; ++b) crop.at(f, b) = full.at(f, b);
    }
    return to_channels(compress(crop, compression)).data;
  }

  ComplexSpectrogram to_spectrogram(std::span<const double> state) const {
    if (state.size() != state_dim()) throw InvalidInput("state size does not match the front end");
    ChannelTensor t{2, frames, bins, State(state.begin(), state.end())};
    const ComplexSpectrogram small = decompress(from_channels(t, {stft, sample_rate}), compression);
    ComplexSpectrogram full;
    full.frames = frames;
    full.bins = stft.bins();
    full.config = stft;
    full.sample_rate = sample_rate;
    full.values.assign(full.frames * full.bins, {0.0, 0.0});
    for (std::size_t f = 0; f < frames; ++f) {
      for (std::size_t b = 0; b < bins; ++b) full.at(f, b) = small.at(f, b);
    }
    return full;
  }

  AudioClip decode(std::span<const double> state, std::size_t length) const {
    return istft(to_spectrogram(state), stft, length);
  }
};

/// Full-precision optimizer state kept alongside the float parameters so a
/// resumed run continues exactly where it stopped.
struct TrainingState {
  std::uint64_t completed_steps = 0;
  nn::AdamConfig adam;
  std::vector<double> params;
  std::vector<double> m;
  std::vector<double> v;
  long adam_steps = 0;
};

struct Checkpoint {
  DenoiserArch arch;
  Preconditioner preconditioner;
  CompressionParams compression;
  StftConfig stft;
  int sample_rate = 22050;
  std::size_t frames = 32;
  std::size_t bins = 32;
  std::size_t clip_length = 7936;
  std::vector<std::string> class_names;
  std::vector<double> params;
  std::optional<TrainingState> training;

  FrontEnd front_end() const { return {stft, compression, frames, bins, sample_rate}; }

  void validate() const {
    arch.validate();
    preconditioner.validate();
    front_end().validate();
    if (arch.input_dim != 2 * frames * bins) throw InvalidInput("checkpoint: network input does not match the state size");
    if (arch.num_classes != class_names.size()) throw InvalidInput("checkpoint: class count mismatch");
    if (clip_length < stft.window_size) throw InvalidInput("checkpoint: clip length shorter than the STFT window");
  }
};

// Checkpoint file, little-endian:
//   "EDMC" | u32 version
//   | u32 input_dim, hidden, layers, num_classes, noise_frequencies
//   | f64 sigma_data | f64 alpha | f64 beta
//   | u32 window_size, hop_size, fft_size, window_kind | u32 sample_rate
//   | u32 frames, bins, clip_length
//   | u32 class count, then per class: u32 byte length + UTF-8 name
//   | u64 parameter count | f32[count] parameters in declaration order
//   | u8 has_training_state, then if set:
//       u64 completed steps | f64 lr, beta1, beta2, eps | u64 adam steps
//       | f64[count] parameters | f64[count] first moment | f64[count] second moment
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  using namespace binary;
  auto u32 = [&os](std::size_t v) { write_u32(os, static_cast<std::uint32_t>(v)); };
  write_magic(os, "EDMC");
  write_u32(os, kCheckpointVersion);
  u32(ck.arch.input_dim);
  u32(ck.arch.hidden);
  u32(ck.arch.layers);
  u32(ck.arch.num_classes);
  u32(ck.arch.noise_frequencies);
  write_f64(os, ck.preconditioner.sigma_data);
  write_f64(os, ck.compression.alpha);
  write_f64(os, ck.compression.beta);
  u32(ck.stft.window_size);
  u32(ck.stft.hop_size);
  u32(ck.stft.fft_size);
  u32(static_cast<std::size_t>(ck.stft.window));
  u32(static_cast<std::size_t>(ck.sample_rate));
  u32(ck.frames);
  u32(ck.bins);
  u32(ck.clip_length);
  u32(ck.class_names.size());
  for (const auto& name : ck.class_names) {
    u32(name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  write_u64(os, ck.params.size());
  for (double p : ck.params) write_f32(os, static_cast<float>(p));
  os.put(ck.training ? 1 : 0);
  if (ck.training) {
    const TrainingState& t = *ck.training;
    write_u64(os, t.completed_steps);
    write_f64(os, t.adam.learning_rate);
    write_f64(os, t.adam.beta1);
    write_f64(os, t.adam.beta2);
    write_f64(os, t.adam.epsilon);
    write_u64(os, static_cast<std::uint64_t>(t.adam_steps));
    for (double p : t.params) write_f64(os, p);
    for (double p : t.m) write_f64(os, p);
    for (double p : t.v) write_f64(os, p);
  }
  if (!os) throw IoError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  using namespace binary;
  expect_magic(is, "EDMC");
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.arch.input_dim = read_u32(is);
  ck.arch.hidden = read_u32(is);
  ck.arch.layers = read_u32(is);
  ck.arch.num_classes = read_u32(is);
  ck.arch.noise_frequencies = read_u32(is);
  ck.preconditioner.sigma_data = read_f64(is);
  ck.compression.alpha = read_f64(is);
  ck.compression.beta = read_f64(is);
  ck.stft.window_size = read_u32(is);
  ck.stft.hop_size = read_u32(is);
  ck.stft.fft_size = read_u32(is);
  const std::uint32_t kind = read_u32(is);
  if (kind != static_cast<std::uint32_t>(WindowKind::kHann)) throw IoError("checkpoint: unknown window kind");
  ck.stft.window = static_cast<WindowKind>(kind);
  ck.sample_rate = static_cast<int>(read_u32(is));
  ck.frames = read_u32(is);
  ck.bins = read_u32(is);
  ck.clip_length = read_u32(is);
  const std::uint32_t classes = read_u32(is);
  if (classes > 4096) throw IoError("checkpoint: implausible class count");
  for (std::uint32_t i = 0; i < classes; ++i) {
    const std::uint32_t len = read_u32(is);
    if (len > 4096) throw IoError("checkpoint: implausible class name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("checkpoint truncated in class names");
    ck.class_names.push_back(std::move(name));
  }
  if (ck.arch.hidden > 65536 || ck.arch.layers > 1024 || ck.arch.noise_frequencies > 4096 || ck.frames > 65536 ||
      ck.bins > 65536 || ck.arch.input_dim * ck.arch.hidden > (std::size_t{1} << 28)) {
    throw IoError("checkpoint: implausible architecture");
  }
  try {
    ck.validate();
  } catch (const InvalidInput& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::uint64_t count = read_u64(is);
  const std::size_t expected = TrainableDenoiser(ck.arch, 0).parameters().size();
  if (count != expected) {
    throw IoError("checkpoint holds " + std::to_string(count) + " parameters, architecture needs " + std::to_string(expected));
  }
  ck.params.resize(count);
  for (double& p : ck.params) p = read_f32(is);
  const int flag = is.get();
  if (flag == 1) {
    TrainingState t;
    t.completed_steps = read_u64(is);
    t.adam.learning_rate = read_f64(is);
    t.adam.beta1 = read_f64(is);
    t.adam.beta2 = read_f64(is);
    t.adam.epsilon = read_f64(is);
    t.adam_steps = static_cast<long>(read_u64(is));
    for (auto* vec : {&t.params, &t.m, &t.v}) {
      vec->resize(count);
      for (double& p : *vec) p = read_f64(is);
    }
    ck.training = std::move(t);
  } else if (flag != 0) {
    throw IoError("checkpoint truncated or corrupt after parameters");
  }
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot create " + path.string());
  write_checkpoint(os, ck);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_checkpoint(is);
}

/// Network rebuilt from a checkpoint, preferring the exact training copy.
inline TrainableDenoiser load_network(const Checkpoint& ck) {
  return TrainableDenoiser::from_parameters(ck.arch, ck.training ? ck.training->params : ck.params);
}

struct EncodedDataset {
  std::vector<State> states;
  std::vector<Condition> labels;
};

inline EncodedDataset encode_dataset(const FrontEnd& fe, std::span<const LabeledClip> clips) {
  EncodedDataset out;
  for (const auto& c : clips) {
    out.states.push_back(fe.encode(c.clip));
    out.labels.push_back(c.label);
  }
  return out;
}

/// Exponential moving average over a window of 100 losses; the first 100
/// values are averaged uniformly.
class LossEma {
 public:
  explicit LossEma(std::size_t window = 100) : window_(window) {}
  double push(double loss) {
    ++count_;
    value_ += (loss - value_) / static_cast<double>(std::min(count_, window_));
    return value_;
  }
  double value() const { return value_; }

 private:
  std::size_t window_;
  std::size_t count_ = 0;
  double value_ = 0.0;
};

struct TrainProgress {
  std::size_t step = 0;  // 1-based index of the finished step
  LossReport report;
  double ema = 0.0;
};

/// Runs steps [first_step, last_step) of a training schedule. Step k draws
/// its minibatch and noise from its own generator derived from (seed, k), so
/// a run split across resumes matches an uninterrupted one.
inline void train_steps(TrainableDenoiser& model, nn::Adam& optimizer, const EncodedDataset& data,
                        const TrainOptions& options, std::size_t batch_size, std::uint64_t seed,
                        std::size_t first_step, std::size_t last_step,
                        const std::function<void(const TrainProgress&)>& on_step = {}, LossEma* ema = nullptr) {
  if (data.states.empty()) throw InvalidInput("training set is empty");
  if (batch_size == 0) throw InvalidInput("batch size must be positive");
  LossEma local;
  LossEma& tracker = ema ? *ema : local;
  std::vector<State> batch(batch_size);
  std::vector<Condition> labels(batch_size);
  for (std::size_t step = first_step; step < last_step; ++step) {
    Rng rng(derive_seed(seed, 0x747261696eull, step));
    std::uniform_int_distribution<std::size_t> pick(0, data.states.size() - 1);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t k = pick(rng);
      batch[i] = data.states[k];
      labels[i] = data.labels.empty() ? Condition{} : data.labels[k];
    }
    TrainProgress p;
    p.step = step + 1;
    p.report = train_step(model, batch, labels, optimizer, options, rng);
    p.ema = tracker.push(p.report.total);
    if (on_step) on_step(p);
  }
}

/// Fresh checkpoint (initialization) for the given data and config.
inline Checkpoint initial_checkpoint(const RunConfig& config, std::span<const LabeledClip> clips,
                                     std::vector<std::string> class_names) {
  config.validate();
  if (clips.empty()) throw InvalidInput("training set is empty");
  std::vector<AudioClip> audio;
  for (const auto& c : clips) audio.push_back(c.clip);
  Checkpoint ck;
  ck.stft = config.stft;
  ck.compression = {config.compression_alpha,
                    calibrate_beta(audio, config.stft, config.compression_alpha, config.compression_quantile)};
  ck.preconditioner = config.edm;
  ck.sample_rate = clips.front().clip.sample_rate;
  ck.frames = config.model.frames;
  ck.bins = config.model.bins;
  ck.clip_length = clips.front().clip.size();
  ck.class_names = std::move(class_names);
  ck.arch = {2 * ck.frames * ck.bins, config.model.hidden, config.model.layers, ck.class_names.size(),
             config.model.noise_frequencies};
  const TrainableDenoiser model(ck.arch, derive_seed(config.seed, 0x696e6974ull));
  ck.params.assign(model.parameters().begin(), model.parameters().end());
  return ck;
}

/// Copies the model (and optionally optimizer) state into the checkpoint.
inline void store_training_state(Checkpoint& ck, const TrainableDenoiser& model, const nn::Adam& adam,
                                 std::size_t completed_steps, bool keep_exact_state) {
  ck.params.assign(model.parameters().begin(), model.parameters().end());
  if (!keep_exact_state) {
    ck.training.reset();
    return;
  }
  TrainingState t;
  t.completed_steps = completed_steps;
  t.adam = adam.config();
  t.adam_steps = adam.steps();
  t.params = ck.params;
  t.m.assign(adam.first_moment().begin(), adam.first_moment().end());
  t.v.assign(adam.second_moment().begin(), adam.second_moment().end());
  ck.training = std::move(t);
}

struct GenerationResult {
  AudioClip clip;
  State state;
  std::size_t nfe = 0;
};

/// Samples one clip from a checkpoint. Sampler settings come from `config`.
inline GenerationResult generate(const Checkpoint& ck, const SamplerConfig& config, const ScheduleSettings& schedule,
                                 Condition cond, Rng& rng) {
  ck.validate();
  config.validate();
  if (cond && *cond >= ck.class_names.size()) throw InvalidInput("class label out of range for this checkpoint");
  const TrainableDenoiser net = load_network(ck);
  const PreconditionedDenoiser model(net, ck.preconditioner);
  const SigmaSchedule sched = karras_schedule(config.steps, schedule.sigma_min, schedule.sigma_max, schedule.rho);
  TrajectoryRecord record;
  GenerationResult out;
  out.state = sample(model, ck.arch.input_dim, sched, config, cond, rng, &record);
  out.nfe = record.nfe;
  if (!stats::all_finite(out.state)) throw NumericError("sampling produced non-finite values");
  out.clip = ck.front_end().decode(out.state, ck.clip_length);
  return out;
}

}  // namespace edmsound
