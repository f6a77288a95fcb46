#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/error.hpp"
#include "edmsound/replication.hpp"
#include "edmsound/sampler.hpp"
#include "edmsound/spectral.hpp"

// Run configuration as flat "section.key = value" text. Lines starting with
// '#' and blank lines are ignored; unknown keys and duplicate keys are errors.
namespace edmsound {

class ConfigError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& text) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const char* first = text.data();
  if (!text.empty() && text[0] == '+') ++first;
  const auto res = std::from_chars(first, text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || std::isnan(v)) {
    throw ConfigError(key + ": expected a number, got \"" + text + "\"");
  }
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + text + "\"");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(key + ": expected true or false, got \"" + text + "\"");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace config_detail

struct TrainSettings {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double drop_prob = 0.1;
  std::size_t log_every = 100;
  bool save_optimizer_state = true;
};

struct ModelSettings {
  std::size_t hidden = 256;
  std::size_t layers = 4;
  std::size_t noise_frequencies = 16;
  std::size_t frames = 32;
  std::size_t bins = 32;
};

struct ScheduleSettings {
  double sigma_min = 1e-4;
  double sigma_max = 3.0;
  double rho = 7.0;
};

struct GenerateSettings {
  std::size_t count = 4;
  std::string class_name;  // empty = unconditional
};

struct BenchSettings {
  std::string oracle = "mixture";
  std::vector<Solver> solvers{kAllSolvers.begin(), kAllSolvers.end()};
  std::vector<std::size_t> steps{8, 16, 32, 64};
  std::size_t starts = 32;
  std::size_t reference_steps = 10000;
};

struct ReplicationSettings {
  std::size_t bands = 64;
  std::size_t head_hidden = 128;
  std::size_t head_dim = 64;
  std::size_t epochs = 5;
  std::size_t steps_per_epoch = 100;
  std::size_t batch_size = 16;
  double margin = 0.2;
  double learning_rate = 1e-3;
  bool finetune = true;
  std::size_t histogram_bins = 40;
};

struct DataSettings {
  std::string train_dir;
  std::string generated_dir;
  std::string embeddings;  // external embedding table; empty = built-in spectral embedder
};

struct ToySettings {
  std::size_t clips_per_class = 50;
  std::size_t clip_length = 7936;
  int sample_rate = 22050;
};

struct RunConfig {
  std::uint64_t seed = 0;
  StftConfig stft;
  double compression_alpha = 0.5;
  double compression_quantile = 0.99;
  Preconditioner edm;
  NoiseLevelDistribution noise;
  ModelSettings model;
  TrainSettings train;
  SamplerConfig sampler;
  ScheduleSettings schedule;
  GenerateSettings generate;
  BenchSettings bench;
  AugmentationConfig augment;
  ReplicationSettings replication;
  DataSettings data;
  ToySettings toy;

  void validate() const;
  FinetuneConfig finetune_config() const {
    return {replication.epochs, replication.steps_per_epoch, replication.batch_size, replication.margin,
            replication.learning_rate, augment};
  }
};

namespace config_detail {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::vector<Field> fields() {
  std::vector<Field> f;
  auto add_double = [&f](std::string key, auto accessor) {
    f.push_back({key, [accessor](const RunConfig& c) { return format_double(accessor(const_cast<RunConfig&>(c))); },
                 [accessor, key](RunConfig& c, const std::string& v) { accessor(c) = parse_double(key, v); }});
  };
  auto add_uint = [&f](std::string key, auto accessor) {
    f.push_back({key, [accessor](const RunConfig& c) { return std::to_string(accessor(const_cast<RunConfig&>(c))); },
                 [accessor, key](RunConfig& c, const std::string& v) {
                   using T = std::remove_reference_t<decltype(accessor(c))>;
                   const std::uint64_t u = parse_uint(key, v);
                   if (u > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) throw ConfigError(key + ": value too large");
                   accessor(c) = static_cast<T>(u);
                 }});
  };
  auto add_bool = [&f](std::string key, auto accessor) {
    f.push_back({key, [accessor](const RunConfig& c) { return std::string(accessor(const_cast<RunConfig&>(c)) ? "true" : "false"); },
                 [accessor, key](RunConfig& c, const std::string& v) { accessor(c) = parse_bool(key, v); }});
  };
  auto add_string = [&f](std::string key, auto accessor) {
    f.push_back({key, [accessor](const RunConfig& c) { return accessor(const_cast<RunConfig&>(c)); },
                 [accessor](RunConfig& c, const std::string& v) { accessor(c) = v; }});
  };

  add_uint("run.seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });

  add_uint("stft.window_size", [](RunConfig& c) -> std::size_t& { return c.stft.window_size; });
  add_uint("stft.hop_size", [](RunConfig& c) -> std::size_t& { return c.stft.hop_size; });
  add_uint("stft.fft_size", [](RunConfig& c) -> std::size_t& { return c.stft.fft_size; });

  add_double("compression.alpha", [](RunConfig& c) -> double& { return c.compression_alpha; });
  add_double("compression.quantile", [](RunConfig& c) -> double& { return c.compression_quantile; });

  add_double("edm.sigma_data", [](RunConfig& c) -> double& { return c.edm.sigma_data; });
  add_double("edm.log_sigma_mean", [](RunConfig& c) -> double& { return c.noise.log_mean; });
  add_double("edm.log_sigma_std", [](RunConfig& c) -> double& { return c.noise.log_std; });

  add_uint("model.hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden; });
  add_uint("model.layers", [](RunConfig& c) -> std::size_t& { return c.model.layers; });
  add_uint("model.noise_frequencies", [](RunConfig& c) -> std::size_t& { return c.model.noise_frequencies; });
  add_uint("model.frames", [](RunConfig& c) -> std::size_t& { return c.model.frames; });
  add_uint("model.bins", [](RunConfig& c) -> std::size_t& { return c.model.bins; });

  add_uint("train.steps", [](RunConfig& c) -> std::size_t& { return c.train.steps; });
  add_uint("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
  add_double("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
  add_double("train.drop_prob", [](RunConfig& c) -> double& { return c.train.drop_prob; });
  add_uint("train.log_every", [](RunConfig& c) -> std::size_t& { return c.train.log_every; });
  add_bool("train.save_optimizer_state", [](RunConfig& c) -> bool& { return c.train.save_optimizer_state; });

  f.push_back({"sampler.solver", [](const RunConfig& c) { return std::string(solver_name(c.sampler.solver)); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.sampler.solver = parse_solver(v);
                 } catch (const InvalidInput& e) {
                   throw ConfigError(std::string("sampler.solver: ") + e.what());
                 }
               }});
  add_uint("sampler.steps", [](RunConfig& c) -> std::size_t& { return c.sampler.steps; });
  add_double("sampler.cfg_scale", [](RunConfig& c) -> double& { return c.sampler.cfg_scale; });
  f.push_back({"sampler.threshold_quantile",
               [](const RunConfig& c) {
                 return c.sampler.threshold_quantile ? format_double(*c.sampler.threshold_quantile) : std::string("none");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "none") {
                   c.sampler.threshold_quantile.reset();
                 } else {
                   c.sampler.threshold_quantile = parse_double("sampler.threshold_quantile", v);
                 }
               }});
  add_double("schedule.sigma_min", [](RunConfig& c) -> double& { return c.schedule.sigma_min; });
  add_double("schedule.sigma_max", [](RunConfig& c) -> double& { return c.schedule.sigma_max; });
  add_double("schedule.rho", [](RunConfig& c) -> double& { return c.schedule.rho; });

  add_uint("generate.count", [](RunConfig& c) -> std::size_t& { return c.generate.count; });
  add_string("generate.class", [](RunConfig& c) -> std::string& { return c.generate.class_name; });

  add_string("bench.oracle", [](RunConfig& c) -> std::string& { return c.bench.oracle; });
  f.push_back({"bench.solvers",
               [](const RunConfig& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.bench.solvers.size(); ++i) {
                   if (i) s += ',';
                   s += solver_name(c.bench.solvers[i]);
                 }
                 return s;
               },
               [](RunConfig& c, const std::string& v) {
                 c.bench.solvers.clear();
                 for (const auto& item : split_list(v)) {
                   try {
                     c.bench.solvers.push_back(parse_solver(item));
                   } catch (const InvalidInput& e) {
                     throw ConfigError(std::string("bench.solvers: ") + e.what());
                   }
                 }
               }});
  f.push_back({"bench.steps",
               [](const RunConfig& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.bench.steps.size(); ++i) {
                   if (i) s += ',';
                   s += std::to_string(c.bench.steps[i]);
                 }
                 return s;
               },
               [](RunConfig& c, const std::string& v) {
                 c.bench.steps.clear();
                 for (const auto& item : split_list(v)) c.bench.steps.push_back(parse_uint("bench.steps", item));
               }});
  add_uint("bench.starts", [](RunConfig& c) -> std::size_t& { return c.bench.starts; });
  add_uint("bench.reference_steps", [](RunConfig& c) -> std::size_t& { return c.bench.reference_steps; });

  add_double("augment.shift_lo", [](RunConfig& c) -> double& { return c.augment.shift_lo; });
  add_double("augment.shift_hi", [](RunConfig& c) -> double& { return c.augment.shift_hi; });
  add_double("augment.gain_lo", [](RunConfig& c) -> double& { return c.augment.gain_lo; });
  add_double("augment.gain_hi", [](RunConfig& c) -> double& { return c.augment.gain_hi; });
  add_double("augment.snr_lo_db", [](RunConfig& c) -> double& { return c.augment.snr_lo_db; });
  add_double("augment.snr_hi_db", [](RunConfig& c) -> double& { return c.augment.snr_hi_db; });

  add_uint("replication.bands", [](RunConfig& c) -> std::size_t& { return c.replication.bands; });
  add_uint("replication.head_hidden", [](RunConfig& c) -> std::size_t& { return c.replication.head_hidden; });
  add_uint("replication.head_dim", [](RunConfig& c) -> std::size_t& { return c.replication.head_dim; });
  add_uint("replication.epochs", [](RunConfig& c) -> std::size_t& { return c.replication.epochs; });
  add_uint("replication.steps_per_epoch", [](RunConfig& c) -> std::size_t& { return c.replication.steps_per_epoch; });
  add_uint("replication.batch_size", [](RunConfig& c) -> std::size_t& { return c.replication.batch_size; });
  add_double("replication.margin", [](RunConfig& c) -> double& { return c.replication.margin; });
  add_double("replication.learning_rate", [](RunConfig& c) -> double& { return c.replication.learning_rate; });
  add_bool("replication.finetune", [](RunConfig& c) -> bool& { return c.replication.finetune; });
  add_uint("replication.histogram_bins", [](RunConfig& c) -> std::size_t& { return c.replication.histogram_bins; });

  add_string("data.train_dir", [](RunConfig& c) -> std::string& { return c.data.train_dir; });
  add_string("data.generated_dir", [](RunConfig& c) -> std::string& { return c.data.generated_dir; });
  add_string("data.embeddings", [](RunConfig& c) -> std::string& { return c.data.embeddings; });

  add_uint("toy.clips_per_class", [](RunConfig& c) -> std::size_t& { return c.toy.clips_per_class; });
  add_uint("toy.clip_length", [](RunConfig& c) -> std::size_t& { return c.toy.clip_length; });
  f.push_back({"toy.sample_rate", [](const RunConfig& c) { return std::to_string(c.toy.sample_rate); },
               [](RunConfig& c, const std::string& v) {
                 const std::uint64_t u = parse_uint("toy.sample_rate", v);
                 if (u == 0 || u > 384000) throw ConfigError("toy.sample_rate: out of range");
                 c.toy.sample_rate = static_cast<int>(u);
               }});
  return f;
}

inline const std::vector<Field>& field_table() {
  static const std::vector<Field> table = fields();
  return table;
}

}  // namespace config_detail

inline void RunConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string(section) + ": " + e.what());
    }
  };
  wrap("stft", [&] { stft.validate(); });
  wrap("compression", [&] { CompressionParams{compression_alpha, 1.0}.validate(); });
  if (!(compression_quantile > 0.0 && compression_quantile <= 1.0)) throw ConfigError("compression.quantile must be in (0, 1]");
  wrap("edm", [&] { edm.validate(); });
  wrap("edm", [&] { noise.validate(); });
  if (model.hidden == 0 || model.layers == 0 || model.noise_frequencies == 0) throw ConfigError("model sizes must be positive");
  if (model.frames == 0 || model.bins == 0 || model.bins > stft.bins()) {
    throw ConfigError("model.bins must be in [1, " + std::to_string(stft.bins()) + "] and model.frames positive");
  }
  if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(train.learning_rate > 0.0) || !std::isfinite(train.learning_rate)) throw ConfigError("train.learning_rate must be positive");
  if (!(train.drop_prob >= 0.0 && train.drop_prob <= 1.0)) throw ConfigError("train.drop_prob must be in [0, 1]");
  wrap("sampler", [&] { sampler.validate(); });
  if (!(schedule.sigma_min > 0.0 && schedule.sigma_min < schedule.sigma_max && std::isfinite(schedule.sigma_max))) {
    throw ConfigError("schedule needs 0 < sigma_min < sigma_max");
  }
  if (!(schedule.rho > 0.0)) throw ConfigError("schedule.rho must be positive");
  if (bench.oracle != "gaussian" && bench.oracle != "mixture") throw ConfigError("bench.oracle must be gaussian or mixture");
  if (bench.solvers.empty() || bench.steps.empty()) throw ConfigError("bench.solvers and bench.steps must be nonempty");
  for (std::size_t s : bench.steps) {
    if (s == 0) throw ConfigError("bench.steps entries must be positive");
  }
  if (bench.starts == 0 || bench.reference_steps == 0) throw ConfigError("bench.starts and bench.reference_steps must be positive");
  wrap("augment", [&] { augment.validate(); });
  if (replication.bands == 0 || replication.bands + 1 > stft.bins()) throw ConfigError("replication.bands out of range");
  if (replication.head_hidden == 0 || replication.head_dim == 0 || replication.batch_size == 0 || replication.histogram_bins == 0) {
    throw ConfigError("replication sizes must be positive");
  }
  if (!(replication.margin >= 0.0) || !(replication.learning_rate > 0.0)) throw ConfigError("replication.margin/learning_rate invalid");
  if (toy.clips_per_class == 0 || toy.clip_length < stft.window_size) throw ConfigError("toy dataset sizes too small for the STFT window");
}

/// Parses config text on top of the defaults. Validation is separate so that
/// command-line overrides can be applied first.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  const auto& table = config_detail::field_table();
  std::map<std::string, std::size_t> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = config_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected \"section.key = value\"");
    const std::string key = config_detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(t).substr(eq + 1));
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key \"" + key + "\"");
    if (seen.count(key)) throw ConfigError(where + "duplicate key \"" + key + "\" (first on line " + std::to_string(seen[key]) + ")");
    seen[key] = line_no;
    try {
      it->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key in a fixed order, one per line.
inline std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : config_detail::field_table()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

/// Sets one key from a "key=value" override.
inline void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override must look like section.key=value");
  config = parse_config(std::string(assignment.substr(0, eq)) + " = " + std::string(assignment.substr(eq + 1)), config);
}

/// FNV-1a 64 over the serialized form, as 16 hex digits.
inline std::string config_digest(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : serialize_config(config)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

}  // namespace edmsound
