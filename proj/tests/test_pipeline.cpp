#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "edmsound/config.hpp"
#include "edmsound/pipeline.hpp"

using namespace edmsound;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.seed = 5;
  c.model.hidden = 16;
  c.model.layers = 1;
  c.model.noise_frequencies = 4;
  c.model.frames = 4;
  c.model.bins = 8;
  c.train.batch_size = 4;
  c.sampler.steps = 6;
  return c;
}

std::vector<LabeledClip> small_data() {
  ToyDatasetSpec spec;
  spec.clips_per_class = 2;
  return make_toy_dataset(spec, 3);
}

std::vector<std::string> class_names() {
  std::vector<std::string> names;
  for (const auto& c : default_toy_classes()) names.push_back(c.name);
  return names;
}

std::string serialize(const Checkpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

Checkpoint parse(const std::string& bytes) {
  std::istringstream is(bytes);
  return read_checkpoint(is);
}

struct Trained {
  Checkpoint ck;
  TrainableDenoiser model;
  nn::Adam adam;
};

// Trains steps [from, to) starting either fresh or from `resume`.
Trained train_range(const RunConfig& cfg, std::size_t to, const Checkpoint* resume) {
  const auto data = small_data();
  Trained t{initial_checkpoint(cfg, data, class_names()), {}, {}};
  t.model = load_network(resume ? *resume : t.ck);
  t.adam = nn::Adam(t.model.parameters().size(), {cfg.train.learning_rate});
  std::size_t from = 0;
  if (resume) {
    const TrainingState& s = *resume->training;
    t.adam = nn::Adam::restore(s.adam, s.m, s.v, s.adam_steps);
    from = s.completed_steps;
  }
  TrainOptions options;
  options.drop_prob = cfg.train.drop_prob;
  options.noise = cfg.noise;
  train_steps(t.model, t.adam, encode_dataset(t.ck.front_end(), data), options, cfg.train.batch_size, cfg.seed, from,
              to);
  store_training_state(t.ck, t.model, t.adam, to, true);
  return t;
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesEverything) {
  const Trained t = train_range(small_config(), 3, nullptr);
  const std::string bytes = serialize(t.ck);
  const Checkpoint back = parse(bytes);
  EXPECT_EQ(back.arch, t.ck.arch);
  EXPECT_EQ(back.stft, t.ck.stft);
  EXPECT_EQ(back.compression, t.ck.compression);
  EXPECT_EQ(back.class_names, t.ck.class_names);
  EXPECT_EQ(back.clip_length, t.ck.clip_length);
  ASSERT_TRUE(back.training.has_value());
  EXPECT_EQ(back.training->params, t.ck.training->params);
  EXPECT_EQ(back.training->m, t.ck.training->m);
  EXPECT_EQ(back.training->adam_steps, 3);
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    EXPECT_EQ(back.params[i], static_cast<double>(static_cast<float>(t.ck.params[i])));
  }
  EXPECT_EQ(serialize(back), bytes);
}

TEST(Checkpoint, WithoutTrainingStateUsesFloatParameters) {
  Checkpoint ck = train_range(small_config(), 2, nullptr).ck;
  ck.training.reset();
  const Checkpoint back = parse(serialize(ck));
  EXPECT_FALSE(back.training.has_value());
  const TrainableDenoiser net = load_network(back);
  EXPECT_EQ(std::vector<double>(net.parameters().begin(), net.parameters().end()), back.params);
}

TEST(Checkpoint, CorruptAndTruncatedFilesAreIoErrors) {
  const std::string bytes = serialize(train_range(small_config(), 1, nullptr).ck);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(parse(bytes.substr(0, cut)), IoError) << cut;
  }
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse(bad), IoError);
  std::string version = bytes;
  version[4] = 99;
  EXPECT_THROW(parse(version), IoError);
  EXPECT_THROW(read_checkpoint(fs::path("/nonexistent/model.ckpt")), IoError);
}

TEST(Training, ZeroStepsEqualsInitialization) {
  const RunConfig cfg = small_config();
  const Trained t = train_range(cfg, 0, nullptr);
  const Checkpoint init = initial_checkpoint(cfg, small_data(), class_names());
  EXPECT_EQ(t.ck.training->params, init.params);
  EXPECT_EQ(t.ck.training->adam_steps, 0);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  RunConfig cfg = small_config();
  const Trained straight = train_range(cfg, 10, nullptr);
  const Trained first = train_range(cfg, 4, nullptr);
  const Checkpoint saved = parse(serialize(first.ck));
  const Trained resumed = train_range(cfg, 10, &saved);
  EXPECT_EQ(resumed.ck.training->params, straight.ck.training->params);
  EXPECT_EQ(resumed.ck.training->v, straight.ck.training->v);
  EXPECT_EQ(serialize(resumed.ck), serialize(straight.ck));
}

TEST(Training, LossEmaAveragesUniformlyThenExponentially) {
  LossEma ema(4);
  EXPECT_DOUBLE_EQ(ema.push(4.0), 4.0);
  EXPECT_DOUBLE_EQ(ema.push(2.0), 3.0);
  EXPECT_DOUBLE_EQ(ema.push(0.0), 2.0);
  EXPECT_DOUBLE_EQ(ema.push(6.0), 3.0);
  EXPECT_DOUBLE_EQ(ema.push(7.0), 4.0);  // 3 + (7 - 3) / 4
}

TEST(FrontEnd, EncodeShapeAndDecodeLength) {
  const RunConfig cfg = small_config();
  const Checkpoint ck = initial_checkpoint(cfg, small_data(), class_names());
  const FrontEnd fe = ck.front_end();
  const State s = fe.encode(small_data()[0].clip);
  EXPECT_EQ(s.size(), 2u * 4 * 8);
  EXPECT_EQ(fe.decode(s, 1234).size(), 1234u);
  EXPECT_THROW(fe.decode(State(3, 0.0), 100), InvalidInput);
}

TEST(FrontEnd, FullCropRoundTripsAudio) {
  FrontEnd fe;
  fe.compression = {0.5, 0.7};
  fe.frames = 32;
  fe.bins = fe.stft.bins();
  const AudioClip clip = small_data()[5].clip;
  const AudioClip back = fe.decode(fe.encode(clip), clip.size());
  double err = 0.0, ref = 0.0;
  for (std::size_t i = 1000; i + 1000 < clip.size(); ++i) {
    err += (back.samples[i] - clip.samples[i]) * (back.samples[i] - clip.samples[i]);
    ref += clip.samples[i] * clip.samples[i];
  }
  // The Nyquist bin is not modelled, so the round trip is close but not exact.
  EXPECT_LT(err / ref, 1e-2);
}

TEST(Generate, DeterministicWithCorrectLengthAndNfe) {
  const RunConfig cfg = small_config();
  const Checkpoint ck = train_range(cfg, 3, nullptr).ck;
  Rng a(11), b(11);
  const GenerationResult x = generate(ck, cfg.sampler, cfg.schedule, Condition{2}, a);
  const GenerationResult y = generate(ck, cfg.sampler, cfg.schedule, Condition{2}, b);
  EXPECT_EQ(x.clip.size(), ck.clip_length);
  EXPECT_EQ(x.clip.samples, y.clip.samples);
  EXPECT_EQ(x.nfe, expected_nfe(cfg.sampler.solver, cfg.sampler.steps, cfg.sampler.cfg_scale != 1.0));
  Rng c(11);
  EXPECT_THROW(generate(ck, cfg.sampler, cfg.schedule, Condition{99}, c), InvalidInput);
}

TEST(ToyData, ShapeAndDeterminism) {
  const auto a = make_toy_dataset({}, 17);
  const auto b = make_toy_dataset({}, 17);
  ASSERT_EQ(a.size(), 350u);
  EXPECT_EQ(a.front().id, "dog_bark_0000");
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].clip.samples, b[i].clip.samples);
    EXPECT_EQ(a[i].clip.size(), 7936u);
  }
  EXPECT_NE(make_toy_dataset({}, 18)[0].clip.samples, a[0].clip.samples);
}

TEST(ToyData, DirectoryRoundTripIsByteIdentical) {
  const fs::path root = fs::temp_directory_path() / "edmsound_test_toy";
  fs::remove_all(root);
  const auto data = small_data();
  write_dataset(root / "a", data, class_names());
  write_dataset(root / "b", data, class_names());
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    std::ifstream x(entry.path(), std::ios::binary), y(root / "b" / entry.path().filename(), std::ios::binary);
    std::stringstream sx, sy;
    sx << x.rdbuf();
    sy << y.rdbuf();
    EXPECT_EQ(sx.str(), sy.str()) << entry.path();
  }
  const LoadedDataset back = read_dataset(root / "a");
  ASSERT_EQ(back.clips.size(), data.size());
  EXPECT_EQ(back.class_names, class_names());
  EXPECT_EQ(back.clips[3].label, data[3].label);
  EXPECT_NEAR(back.clips[3].clip.samples[100], data[3].clip.samples[100], 1.0 / 32767.0);
  fs::remove_all(root);
  EXPECT_THROW(read_dataset(root / "a"), IoError);
}
