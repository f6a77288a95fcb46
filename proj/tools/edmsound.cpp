// edmsound command-line driver: toy data, training, generation, sampler
// benchmark, copy audit and gradient checks.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "edmsound.hpp"

namespace fs = std::filesystem;
using namespace edmsound;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o, const std::string& out_help) {
  cmd->add_option("--config", o.config_path, "Config file (section.key = value lines)");
  cmd->add_option("--seed", o.seed, "Root seed (overrides run.seed)");
  cmd->add_option("--out", o.out, out_help)->required();
  cmd->add_option("--set", o.overrides, "Override one config key, e.g. --set train.steps=100");
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& ov : o.overrides) apply_override(cfg, ov);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot create " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_make_toy_data(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  ToyDatasetSpec spec;
  spec.clips_per_class = cfg.toy.clips_per_class;
  spec.clip_length = cfg.toy.clip_length;
  spec.sample_rate = cfg.toy.sample_rate;
  const auto clips = make_toy_dataset(spec, cfg.seed);
  std::vector<std::string> names;
  for (const auto& c : spec.classes) names.push_back(c.name);
  write_dataset(o.out, clips, names);
  log::info("wrote " + std::to_string(clips.size()) + " clips to " + o.out);
  return kOk;
}

int cmd_train(const CommonOptions& o, std::string data_dir, const std::string& resume) {
  const RunConfig cfg = resolve_config(o);
  if (data_dir.empty()) data_dir = cfg.data.train_dir;
  if (data_dir.empty()) throw ConfigError("no training data: pass --data or set data.train_dir");
  const LoadedDataset ds = read_dataset(data_dir);
  if (ds.clips.empty()) throw ConfigError("training directory " + data_dir + " holds no clips");

  Checkpoint ck = initial_checkpoint(cfg, ds.clips, ds.class_names);
  TrainableDenoiser model = load_network(ck);
  nn::Adam adam(model.parameters().size(), nn::AdamConfig{cfg.train.learning_rate});
  std::size_t start = 0;
  if (!resume.empty()) {
    const Checkpoint prev = read_checkpoint(resume);
    if (!prev.training) throw ConfigError("checkpoint " + resume + " has no optimizer state to resume from");
    if (!(prev.arch == ck.arch) || prev.stft != ck.stft || prev.class_names != ck.class_names ||
        prev.preconditioner.sigma_data != ck.preconditioner.sigma_data) {
      throw ConfigError("checkpoint " + resume + " does not match this config and dataset");
    }
    ck.compression = prev.compression;
    model = load_network(prev);
    adam = nn::Adam::restore(prev.training->adam, prev.training->m, prev.training->v, prev.training->adam_steps);
    start = prev.training->completed_steps;
    if (start > cfg.train.steps) throw ConfigError("checkpoint is already past train.steps");
    log::info("resuming at step " + std::to_string(start));
  }

  const EncodedDataset data = encode_dataset(ck.front_end(), ds.clips);
  TrainOptions options;
  options.drop_prob = cfg.train.drop_prob;
  options.preconditioner = cfg.edm;
  options.noise = cfg.noise;

  const fs::path out(o.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  const fs::path log_path = out.string() + ".loss.csv";
  std::ofstream loss_log(log_path, start == 0 ? std::ios::trunc : std::ios::app);
  if (!loss_log) throw IoError("cannot create " + log_path.string());
  if (start == 0) loss_log << "step,loss,ema,sigma_min,sigma_max\n";
  LossEma ema;
  auto on_step = [&](const TrainProgress& p) {
    double smin = p.report.sigma_draws.front();
    double smax = smin;
    for (double s : p.report.sigma_draws) {
      smin = std::min(smin, s);
      smax = std::max(smax, s);
    }
    loss_log << p.step << ',' << format_number(p.report.total) << ',' << format_number(p.ema) << ','
             << format_number(smin) << ',' << format_number(smax) << '\n';
    if (cfg.train.log_every > 0 && p.step % cfg.train.log_every == 0) {
      log::info("step " + std::to_string(p.step) + " loss " + format_number(p.report.total) + " ema " +
                format_number(p.ema));
    } else {
      log::debug("step " + std::to_string(p.step) + " loss " + format_number(p.report.total));
    }
  };
  train_steps(model, adam, data, options, cfg.train.batch_size, cfg.seed, start, cfg.train.steps, on_step, &ema);
  store_training_state(ck, model, adam, cfg.train.steps, cfg.train.save_optimizer_state);
  write_checkpoint(out, ck);
  log::info("wrote checkpoint " + out.string());
  return kOk;
}

int cmd_generate(CommonOptions o, const std::string& checkpoint_path, const std::optional<std::string>& class_name,
                 const std::optional<std::string>& solver, const std::optional<std::size_t>& steps,
                 const std::optional<double>& cfg_scale, const std::optional<std::size_t>& count) {
  if (class_name) o.overrides.push_back("generate.class=" + *class_name);
  if (solver) o.overrides.push_back("sampler.solver=" + *solver);
  if (steps) o.overrides.push_back("sampler.steps=" + std::to_string(*steps));
  if (cfg_scale) o.overrides.push_back("sampler.cfg_scale=" + format_number(*cfg_scale));
  if (count) o.overrides.push_back("generate.count=" + std::to_string(*count));
  const RunConfig cfg = resolve_config(o);
  const Checkpoint ck = read_checkpoint(checkpoint_path);

  Condition cond;
  if (!cfg.generate.class_name.empty()) {
    const auto it = std::find(ck.class_names.begin(), ck.class_names.end(), cfg.generate.class_name);
    if (it == ck.class_names.end()) throw ConfigError("unknown class \"" + cfg.generate.class_name + "\"");
    cond = static_cast<std::size_t>(it - ck.class_names.begin());
  }

  const fs::path out(o.out);
  ensure_dir(out);
  const std::string digest = config_digest(cfg);
  write_text(out / "config.txt", serialize_config(cfg));
  std::ostringstream manifest;
  manifest << "# seed\t" << cfg.seed << '\n';
  manifest << "# config_digest\t" << digest << '\n';
  manifest << "# checkpoint\t" << fs::path(checkpoint_path).filename().string() << '\n';
  manifest << "# solver\t" << solver_name(cfg.sampler.solver) << '\n';
  manifest << "# steps\t" << cfg.sampler.steps << '\n';
  manifest << "# cfg_scale\t" << format_number(cfg.sampler.cfg_scale) << '\n';
  manifest << "# class\t" << (cond ? cfg.generate.class_name : std::string("<none>")) << '\n';
  manifest << "file\tindex\tclip_seed\tnfe\n";
  for (std::size_t i = 0; i < cfg.generate.count; ++i) {
    const std::uint64_t clip_seed = derive_seed(cfg.seed, 0x67656eull, i);
    Rng rng(clip_seed);
    const GenerationResult r = generate(ck, cfg.sampler, cfg.schedule, cond, rng);
    char name[32];
    std::snprintf(name, sizeof name, "gen_%04zu.wav", i);
    wav::write(out / name, r.clip);
    manifest << name << '\t' << i << '\t' << clip_seed << '\t' << r.nfe << '\n';
  }
  write_text(out / "generation.tsv", manifest.str());
  log::info("wrote " + std::to_string(cfg.generate.count) + " clips to " + out.string() + " (config " + digest + ")");
  return kOk;
}

int cmd_bench(CommonOptions o, const std::optional<std::string>& oracle, const std::optional<std::string>& solvers,
              const std::optional<std::string>& steps) {
  if (oracle) o.overrides.push_back("bench.oracle=" + *oracle);
  if (solvers) o.overrides.push_back("bench.solvers=" + *solvers);
  if (steps) o.overrides.push_back("bench.steps=" + *steps);
  const RunConfig cfg = resolve_config(o);
  BenchOptions opt;
  opt.oracle = cfg.bench.oracle;
  opt.solvers = cfg.bench.solvers;
  opt.steps = cfg.bench.steps;
  opt.starts = cfg.bench.starts;
  opt.reference_steps = cfg.bench.reference_steps;
  opt.sigma_min = cfg.schedule.sigma_min;
  opt.sigma_max = cfg.schedule.sigma_max;
  opt.rho = cfg.schedule.rho;
  opt.seed = cfg.seed;
  const SolverBench bench(opt);
  const auto rows = bench.run_all();
  std::ostringstream csv;
  write_bench_csv(csv, rows);
  const fs::path out(o.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_text(out, csv.str());
  write_bench_table(std::cout, rows);
  if (opt.steps.size() >= 2) {
    for (Solver s : opt.solvers) {
      std::cout << "order " << solver_name(s) << ' ' << format_number(convergence_order(rows, s)) << '\n';
    }
  }
  return kOk;
}

std::vector<EmbeddedItem> lookup_external(const ExternalEmbeddingTable& table, const std::vector<LabeledClip>& clips) {
  std::vector<EmbeddedItem> out;
  for (const auto& c : clips) out.push_back({c.id, table.at(c.id)});
  return out;
}

void write_report_pair(const fs::path& dir, const std::string& prefix, const SimilarityReport& r, std::size_t bins) {
  std::ostringstream report;
  write_report(report, r, prefix);
  write_text(dir / (prefix + "_report.txt"), report.str());
  std::ostringstream hist;
  write_histogram_csv(hist, r, bins);
  write_text(dir / (prefix + "_histogram.csv"), hist.str());
  log::info(prefix + ": generated_p95 " + format_number(r.generated_p95) + " training_p95 " +
            format_number(r.training_p95) + " relative " + format_number(r.relative));
}

int cmd_copy_check(CommonOptions o, const std::optional<std::string>& generated, const std::optional<std::string>& training,
                   const std::optional<std::string>& embeddings, const std::optional<bool>& finetune_flag) {
  if (generated) o.overrides.push_back("data.generated_dir=" + *generated);
  if (training) o.overrides.push_back("data.train_dir=" + *training);
  if (embeddings) o.overrides.push_back("data.embeddings=" + *embeddings);
  if (finetune_flag) o.overrides.push_back(std::string("replication.finetune=") + (*finetune_flag ? "true" : "false"));
  const RunConfig cfg = resolve_config(o);
  if (cfg.data.generated_dir.empty() || cfg.data.train_dir.empty()) {
    throw ConfigError("copy-check needs --generated and --training directories");
  }
  const LoadedDataset gen = read_dataset(cfg.data.generated_dir);
  const LoadedDataset train = read_dataset(cfg.data.train_dir);
  if (gen.clips.empty()) throw ConfigError("generated directory " + cfg.data.generated_dir + " holds no clips");
  if (train.clips.size() < 2) throw ConfigError("training directory " + cfg.data.train_dir + " needs at least 2 clips");

  const fs::path out(o.out);
  ensure_dir(out);
  write_text(out / "config.txt", serialize_config(cfg));

  if (!cfg.data.embeddings.empty()) {
    if (cfg.replication.finetune) throw ConfigError("fine-tuning needs audio; disable replication.finetune with external embeddings");
    const auto table = ExternalEmbeddingTable::read(fs::path(cfg.data.embeddings));
    const auto r = relative_similarity(lookup_external(table, gen.clips), lookup_external(table, train.clips));
    write_report_pair(out, "external", r, cfg.replication.histogram_bins);
    return kOk;
  }

  BaselineSpectralEmbedding base(cfg.replication.bands, cfg.stft);
  std::vector<AudioClip> train_audio;
  for (const auto& c : train.clips) train_audio.push_back(c.clip);
  base.fit(train_audio);
  const auto gen_items = embed_all(base, gen.clips);
  const auto train_items = embed_all(base, train.clips);
  write_report_pair(out, "zero_shot", relative_similarity(gen_items, train_items), cfg.replication.histogram_bins);

  if (cfg.replication.finetune) {
    ProjectionHead head(base.dimension(), cfg.replication.head_hidden, cfg.replication.head_dim,
                        derive_seed(cfg.seed, 0x68656164ull));
    Rng rng(derive_seed(cfg.seed, 0x74756e65ull));
    const FinetuneReport fr = finetune(head, base, train.clips, cfg.finetune_config(), rng);
    for (std::size_t label : fr.skipped_classes) {
      log::warn("class " + std::to_string(label) + " has a single clip and was left out of fine-tuning");
    }
    if (!fr.losses.empty()) log::info("fine-tune final loss " + format_number(fr.losses.back()));
    write_report_pair(out, "finetuned", relative_similarity(project_all(head, gen_items), project_all(head, train_items)),
                      cfg.replication.histogram_bins);
  }
  return kOk;
}

int cmd_gradcheck(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  GradcheckOptions opt;
  opt.seed = cfg.seed;
  const auto results = run_all_gradchecks(opt);
  std::ostringstream report;
  report << "suite\tchecked\tmax_relative_error\tworst_parameter\n";
  bool ok = true;
  for (const auto& r : results) {
    report << r.suite << '\t' << r.checked << '\t' << format_number(r.max_relative_error) << '\t' << r.worst_parameter
           << '\n';
    if (!(r.max_relative_error < 1e-4)) {
      ok = false;
      std::cerr << "gradcheck failed: " << r.suite << " parameter " << r.worst_parameter << " relative error "
                << r.max_relative_error << '\n';
    }
  }
  const fs::path out(o.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_text(out, report.str());
  std::cout << report.str();
  return ok ? kOk : kNumeric;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectrogram diffusion toolkit: EDM training, ODE sampling and copy audits"};
  app.require_subcommand(1);

  CommonOptions toy_opts, train_opts, gen_opts, bench_opts, copy_opts, grad_opts;

  auto* toy = app.add_subcommand("make-toy-data", "Synthesize the labeled toy foley dataset");
  add_common(toy, toy_opts, "Output directory");

  auto* train = app.add_subcommand("train", "Train a class-conditional denoiser");
  add_common(train, train_opts, "Output checkpoint path");
  std::string data_dir, resume;
  train->add_option("--data", data_dir, "Training dataset directory (default data.train_dir)");
  train->add_option("--resume", resume, "Continue from a checkpoint with optimizer state");

  auto* gen = app.add_subcommand("generate", "Sample clips from a checkpoint");
  add_common(gen, gen_opts, "Output directory");
  std::string checkpoint;
  std::optional<std::string> gen_class, gen_solver;
  std::optional<std::size_t> gen_steps, gen_count;
  std::optional<double> gen_cfg;
  gen->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  gen->add_option("--class", gen_class, "Class name (omit for unconditional)");
  gen->add_option("--solver", gen_solver, "euler, heun, dpm-2s, dpm-3s, dpm-2m or dpm-3m");
  gen->add_option("--steps", gen_steps, "Schedule length");
  gen->add_option("--cfg-scale", gen_cfg, "Guidance scale w");
  gen->add_option("--count", gen_count, "Number of clips");

  auto* bench = app.add_subcommand("bench-samplers", "Endpoint error vs steps on analytic oracles");
  add_common(bench, bench_opts, "Output CSV path");
  std::optional<std::string> bench_oracle, bench_solvers, bench_steps;
  bench->add_option("--oracle", bench_oracle, "gaussian or mixture");
  bench->add_option("--solvers", bench_solvers, "Comma-separated solver names");
  bench->add_option("--steps", bench_steps, "Comma-separated step counts");

  auto* copy = app.add_subcommand("copy-check", "Audit generated clips for copies of training clips");
  add_common(copy, copy_opts, "Output report directory");
  std::optional<std::string> copy_gen, copy_train, copy_emb;
  std::optional<bool> copy_finetune;
  copy->add_option("--generated", copy_gen, "Directory of generated WAVs");
  copy->add_option("--training", copy_train, "Training dataset directory");
  copy->add_option("--embeddings", copy_emb, "External embedding table (id<TAB>v1,v2,...)");
  copy->add_flag("--finetune,!--no-finetune", copy_finetune, "Also report with a fine-tuned projection head");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of all gradients");
  add_common(grad, grad_opts, "Output report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (toy->parsed()) return guarded([&] { return cmd_make_toy_data(toy_opts); });
  if (train->parsed()) return guarded([&] { return cmd_train(train_opts, data_dir, resume); });
  if (gen->parsed()) {
    return guarded([&] { return cmd_generate(gen_opts, checkpoint, gen_class, gen_solver, gen_steps, gen_cfg, gen_count); });
  }
  if (bench->parsed()) return guarded([&] { return cmd_bench(bench_opts, bench_oracle, bench_solvers, bench_steps); });
  if (copy->parsed()) return guarded([&] { return cmd_copy_check(copy_opts, copy_gen, copy_train, copy_emb, copy_finetune); });
  if (grad->parsed()) return guarded([&] { return cmd_gradcheck(grad_opts); });
  return kUsage;
}
