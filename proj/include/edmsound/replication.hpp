#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "edmsound/denoiser_interface.hpp"
#include "edmsound/error.hpp"
#include "edmsound/nn.hpp"
#include "edmsound/spectral.hpp"
#include "edmsound/stats.hpp"
#include "edmsound/toy_data.hpp"

namespace edmsound {

using Embedding = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline Embedding normalized(Embedding v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("cannot normalize a zero or non-finite embedding");
  for (double& x : v) x /= n;
  return v;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("cosine: dimension mismatch");
  return std::clamp(dot(a, b), -1.0, 1.0);
}

/// Maps a clip to a unit-norm vector.
class EmbeddingModel {
 public:
  virtual ~EmbeddingModel() = default;
  virtual Embedding embed(const AudioClip& clip) const = 0;
  virtual std::size_t dimension() const = 0;
};

/// Log band energies of the power spectrogram on geometrically spaced bands,
/// pooled over time into per-band mean, standard deviation and maximum of the
/// log energy plus the log of the mean energy. Energies are floored at
/// `dynamic_range_db` below the clip's loudest band so that near-silent
/// regions do not dominate. Features are standardized with statistics fitted
/// on a training set and unit-normalized.
class BaselineSpectralEmbedding final : public EmbeddingModel {
 public:
  static constexpr std::size_t kStatistics = 4;

  explicit BaselineSpectralEmbedding(std::size_t bands = 64, StftConfig stft = {}, double dynamic_range_db = 40.0)
      : bands_(bands), stft_(stft), dynamic_range_db_(dynamic_range_db) {
    stft_.validate();
    if (bands_ == 0 || bands_ + 1 > stft_.bins()) throw InvalidInput("band count must be in [1, bins - 1]");
    if (!(dynamic_range_db_ > 0.0)) throw InvalidInput("dynamic range must be positive");
    // Geometric edges over bins 1 .. bins-1, each band at least one bin wide.
    const double hi = static_cast<double>(stft_.bins());
    edges_.push_back(1);
    for (std::size_t k = 1; k <= bands_; ++k) {
      const double e = std::pow(hi, static_cast<double>(k) / static_cast<double>(bands_));
      const std::size_t remaining = bands_ - k;
      std::size_t edge = std::max(edges_.back() + 1, static_cast<std::size_t>(std::lround(e)));
      edge = std::min(edge, stft_.bins() - remaining);
      edges_.push_back(edge);
    }
    center_.assign(dimension(), 0.0);
    scale_.assign(dimension(), 1.0);
  }

  std::size_t dimension() const override { return kStatistics * bands_; }
  std::size_t bands() const { return bands_; }

  /// Unstandardized pooled features: [mean log | std log | max log | log mean] per band.
  std::vector<double> features(const AudioClip& clip) const {
    const ComplexSpectrogram spec = stft(clip, stft_);
    const std::size_t frames = spec.frames;
    std::vector<double> energy(frames * bands_, 0.0);
    double peak = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      for (std::size_t b = 0; b < bands_; ++b) {
        double e = 0.0;
        for (std::size_t k = edges_[b]; k < edges_[b + 1]; ++k) e += std::norm(spec.at(f, k));
        energy[f * bands_ + b] = e;
        peak = std::max(peak, e);
      }
    }
    const double floor = std::max(peak * std::pow(10.0, -dynamic_range_db_ / 10.0), 1e-30);
    std::vector<double> out(dimension());
    const double n = static_cast<double>(frames);
    for (std::size_t b = 0; b < bands_; ++b) {
      double sum = 0.0, sq = 0.0, mx = -std::numeric_limits<double>::infinity(), lin = 0.0;
      for (std::size_t f = 0; f < frames; ++f) {
        const double e = energy[f * bands_ + b];
        const double le = std::log(e + floor);
        sum += le;
        sq += le * le;
        mx = std::max(mx, le);
        lin += e;
      }
      const double m = sum / n;
      out[b] = m;
      out[bands_ + b] = std::sqrt(std::max(sq / n - m * m, 0.0));
      out[2 * bands_ + b] = mx;
      out[3 * bands_ + b] = std::log(lin / n + floor);
    }
    return out;
  }

  void fit(std::span<const AudioClip> clips) {
    if (clips.empty()) throw InvalidInput("cannot fit embedding statistics on an empty set");
    std::vector<std::vector<double>> feats;
    feats.reserve(clips.size());
    for (const auto& c : clips) feats.push_back(features(c));
    for (std::size_t d = 0; d < dimension(); ++d) {
      std::vector<double> col(feats.size());
      for (std::size_t i = 0; i < feats.size(); ++i) col[i] = feats[i][d];
      center_[d] = stats::mean(col);
      const double sd = feats.size() > 1 ? stats::stddev(col) : 0.0;
      scale_[d] = sd > 1e-9 ? sd : 1.0;
    }
  }

  Embedding embed(const AudioClip& clip) const override {
    std::vector<double> f = features(clip);
    for (std::size_t d = 0; d < f.size(); ++d) f[d] = (f[d] - center_[d]) / scale_[d];
    return normalized(std::move(f));
  }

 private:
  std::size_t bands_;
  StftConfig stft_;
  double dynamic_range_db_;
  std::vector<std::size_t> edges_;
  std::vector<double> center_;
  std::vector<double> scale_;
};

struct EmbeddedItem {
  std::string id;
  Embedding vector;
};

/// Vectors computed elsewhere (e.g. by a pretrained encoder), one per line:
/// "id<TAB>v1,v2,...,vd". Vectors are unit-normalized on load.
class ExternalEmbeddingTable {
 public:
  static ExternalEmbeddingTable read(std::istream& in, const std::string& source = "<stream>") {
    ExternalEmbeddingTable t;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto where = [&] { return source + ":" + std::to_string(line_no) + ": "; };
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) throw IoError(where() + "expected \"id<TAB>v1,v2,...\"");
      std::string id = line.substr(0, tab);
      Embedding v;
      std::istringstream fields(line.substr(tab + 1));
      std::string tok;
      while (std::getline(fields, tok, ',')) {
        try {
          std::size_t used = 0;
          v.push_back(std::stod(tok, &used));
          if (tok.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw IoError(where() + "bad number \"" + tok + "\"");
        }
      }
      if (v.empty()) throw IoError(where() + "empty vector");
      if (t.dim_ == 0) t.dim_ = v.size();
      if (v.size() != t.dim_) throw IoError(where() + "dimension " + std::to_string(v.size()) + " differs from " + std::to_string(t.dim_));
      if (!stats::all_finite(v)) throw IoError(where() + "non-finite value");
      if (t.vectors_.count(id)) throw IoError(where() + "duplicate id " + id);
      try {
        t.vectors_[id] = normalized(std::move(v));
      } catch (const NumericError&) {
        throw IoError(where() + "zero vector");
      }
      t.order_.push_back(id);
    }
    if (t.vectors_.empty()) throw IoError(source + ": no embeddings");
    return t;
  }

  static ExternalEmbeddingTable read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read(in, path.string());
  }

  std::size_t dimension() const { return dim_; }
  bool contains(const std::string& id) const { return vectors_.count(id) > 0; }
  const Embedding& at(const std::string& id) const {
    auto it = vectors_.find(id);
    if (it == vectors_.end()) throw InvalidInput("no external embedding for id " + id);
    return it->second;
  }
  /// Items in file order.
  std::vector<EmbeddedItem> items() const {
    std::vector<EmbeddedItem> out;
    for (const auto& id : order_) out.push_back({id, vectors_.at(id)});
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::map<std::string, Embedding> vectors_;
  std::vector<std::string> order_;
};

struct AugmentationConfig {
  double shift_lo = -0.2;  // fraction of clip length, circular
  double shift_hi = 0.2;
  double gain_lo = 0.5;
  double gain_hi = 2.0;
  double snr_lo_db = 10.0;  // +inf disables noise
  double snr_hi_db = 40.0;

  void validate() const {
    if (!(shift_lo <= shift_hi) || !(gain_lo <= gain_hi) || !(snr_lo_db <= snr_hi_db)) {
      throw InvalidInput("augmentation ranges must be ordered (lo <= hi)");
    }
    if (!(gain_lo > 0.0)) throw InvalidInput("augmentation gain must be positive");
  }

  static AugmentationConfig identity() {
    const double inf = std::numeric_limits<double>::infinity();
    return {0.0, 0.0, 1.0, 1.0, inf, inf};
  }
};

/// Circular shift, then gain, then white Gaussian noise at the drawn SNR
/// (relative to the shifted, scaled signal).
inline AudioClip augment(const AudioClip& clip, const AugmentationConfig& config, Rng& rng) {
  config.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo == hi ? lo : lo + (hi - lo) * unit(rng); };
  const double shift_frac = draw(config.shift_lo, config.shift_hi);
  const double gain = draw(config.gain_lo, config.gain_hi);
  const double snr_db = draw(config.snr_lo_db, config.snr_hi_db);

  AudioClip out = clip;
  const auto n = static_cast<long long>(clip.size());
  long long shift = std::llround(shift_frac * static_cast<double>(n)) % n;
  if (shift < 0) shift += n;
  if (shift != 0) {
    for (long long i = 0; i < n; ++i) out.samples[static_cast<std::size_t>((i + shift) % n)] = clip.samples[static_cast<std::size_t>(i)];
  }
  if (gain != 1.0) {
    for (double& s : out.samples) s *= gain;
  }
  if (std::isfinite(snr_db)) {
    double power = 0.0;
    for (double s : out.samples) power += s * s;
    power /= static_cast<double>(n);
    const double noise_std = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
    std::normal_distribution<double> normal(0.0, noise_std);
    for (double& s : out.samples) s += normal(rng);
  }
  return out;
}

struct Triplet {
  std::size_t anchor = 0;    // dataset indices
  std::size_t positive = 0;  // always == anchor
  std::size_t negative = 0;
  AudioClip anchor_clip;
  AudioClip positive_clip;
  AudioClip negative_clip;
};

/// Anchor drawn uniformly among clips whose class has at least two members;
/// positive is the augmented anchor, negative an augmented different clip of
/// the same class.
class TripletSampler {
 public:
  TripletSampler(std::span<const LabeledClip> dataset, AugmentationConfig augmentation)
      : dataset_(dataset), augmentation_(augmentation) {
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset[i].label].push_back(i);
    for (auto& [label, members] : by_class) {
      if (members.size() < 2) {
        skipped_classes_.push_back(label);
        continue;
      }
      for (std::size_t i : members) anchors_.push_back(i);
      class_members_[label] = std::move(members);
    }
    if (anchors_.empty()) throw InvalidInput("no class has two or more clips; cannot form triplets");
  }

  /// Classes left out because they hold a single clip.
  const std::vector<std::size_t>& skipped_classes() const { return skipped_classes_; }

  Triplet draw(Rng& rng) const {
    Triplet t;
    t.anchor = anchors_[std::uniform_int_distribution<std::size_t>(0, anchors_.size() - 1)(rng)];
    t.positive = t.anchor;
    const auto& members = class_members_.at(dataset_[t.anchor].label);
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, members.size() - 2)(rng);
    const std::size_t anchor_pos =
        static_cast<std::size_t>(std::find(members.begin(), members.end(), t.anchor) - members.begin());
    if (pick >= anchor_pos) ++pick;
    t.negative = members[pick];
    t.anchor_clip = dataset_[t.anchor].clip;
    t.positive_clip = augment(dataset_[t.anchor].clip, augmentation_, rng);
    t.negative_clip = augment(dataset_[t.negative].clip, augmentation_, rng);
    return t;
  }

 private:
  std::span<const LabeledClip> dataset_;
  AugmentationConfig augmentation_;
  std::vector<std::size_t> anchors_;
  std::map<std::size_t, std::vector<std::size_t>> class_members_;
  std::vector<std::size_t> skipped_classes_;
};

inline Triplet make_triplet(std::span<const LabeledClip> dataset, Rng& rng, const AugmentationConfig& augmentation = {}) {
  return TripletSampler(dataset, augmentation).draw(rng);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

/// max(0, |a-p|^2 - |a-n|^2 + margin).
inline double triplet_margin_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                                  double margin) {
  if (a.size() != p.size() || a.size() != n.size()) throw InvalidInput("triplet loss: dimension mismatch");
  return std::max(0.0, squared_distance(a, p) - squared_distance(a, n) + margin);
}

/// Two-layer perceptron d -> hidden -> p with GELU, followed by unit normalization.
class ProjectionHead {
 public:
  struct Cache {
    std::vector<double> input;
    std::vector<double> pre;
    std::vector<double> hidden;
    std::vector<double> raw;
    double norm = 1.0;
  };

  ProjectionHead() = default;
  ProjectionHead(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim, std::uint64_t seed) {
    if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) throw InvalidInput("projection head sizes must be positive");
    nn::Layout layout;
    first_ = layout.add_dense(input_dim, hidden_dim);
    second_ = layout.add_dense(hidden_dim, output_dim);
    params_.assign(layout.total(), 0.0);
    grads_.assign(layout.total(), 0.0);
    Rng rng(seed);
    nn::init_dense(first_, params_, rng, std::sqrt(2.0));
    nn::init_dense(second_, params_, rng);
  }

  std::size_t input_dim() const { return first_.in; }
  std::size_t output_dim() const { return second_.out; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::span<const double> gradients() const { return grads_; }
  std::span<double> gradients() { return grads_; }
  void zero_gradients() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  Embedding forward(std::span<const double> x, Cache* cache = nullptr) const {
    if (x.size() != first_.in) throw InvalidInput("projection head input dimension mismatch");
    std::vector<double> pre(first_.out);
    nn::forward(first_, params_, x, pre);
    std::vector<double> hid(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) hid[i] = nn::gelu(pre[i]);
    std::vector<double> raw(second_.out);
    nn::forward(second_, params_, hid, raw);
    const double norm = std::sqrt(dot(raw, raw));
    if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("projection head output has zero or non-finite norm");
    Embedding y(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) y[i] = raw[i] / norm;
    if (cache) {
      cache->input.assign(x.begin(), x.end());
      cache->pre = std::move(pre);
      cache->hidden = std::move(hid);
      cache->raw = std::move(raw);
      cache->norm = norm;
    }
    return y;
  }

  /// Accumulates parameter gradients given dL/d(normalized output).
  void backward(const Cache& cache, std::span<const double> out_grad) {
    if (out_grad.size() != second_.out) throw InvalidInput("projection head gradient dimension mismatch");
    std::vector<double> y(cache.raw.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = cache.raw[i] / cache.norm;
    const double proj = dot(y, out_grad);
    std::vector<double> draw_(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) draw_[i] = (out_grad[i] - y[i] * proj) / cache.norm;
    std::vector<double> dhid(first_.out, 0.0);
    nn::backward(second_, params_, grads_, cache.hidden, draw_, dhid);
    for (std::size_t i = 0; i < dhid.size(); ++i) dhid[i] *= nn::gelu_grad(cache.pre[i]);
    nn::backward(first_, params_, grads_, cache.input, dhid, {});
  }

 private:
  nn::Dense first_;
  nn::Dense second_;
  std::vector<double> params_;
  std::vector<double> grads_;
};

/// Triplet loss over a batch of (anchor, positive, negative) frozen embeddings
/// pushed through the head; accumulates the exact batch-mean gradient.
inline double triplet_batch_loss_and_gradient(ProjectionHead& head, std::span<const Embedding> anchors,
                                              std::span<const Embedding> positives,
                                              std::span<const Embedding> negatives, double margin) {
  if (anchors.empty() || anchors.size() != positives.size() || anchors.size() != negatives.size()) {
    throw InvalidInput("triplet batch: mismatched or empty inputs");
  }
  const double inv = 1.0 / static_cast<double>(anchors.size());
  double total = 0.0;
  ProjectionHead::Cache ca, cp, cn;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Embedding a = head.forward(anchors[i], &ca);
    const Embedding p = head.forward(positives[i], &cp);
    const Embedding n = head.forward(negatives[i], &cn);
    const double loss = triplet_margin_loss(a, p, n, margin);
    total += loss * inv;
    if (loss <= 0.0) continue;
    std::vector<double> ga(a.size()), gp(a.size()), gn(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      ga[k] = inv * 2.0 * (n[k] - p[k]);
      gp[k] = inv * -2.0 * (a[k] - p[k]);
      gn[k] = inv * 2.0 * (a[k] - n[k]);
    }
    head.backward(ca, ga);
    head.backward(cp, gp);
    head.backward(cn, gn);
  }
  return total;
}

struct FinetuneConfig {
  std::size_t epochs = 5;
  std::size_t steps_per_epoch = 100;
  std::size_t batch_size = 16;
  double margin = 0.2;
  double learning_rate = 1e-3;
  AugmentationConfig augmentation;
};

struct FinetuneReport {
  std::vector<double> losses;  // one per step
  std::vector<std::size_t> skipped_classes;
};

/// Fine-tunes `head` on triplets built from `dataset`; the embedder stays frozen.
inline FinetuneReport finetune(ProjectionHead& head, const EmbeddingModel& embedder,
                               std::span<const LabeledClip> dataset, const FinetuneConfig& config, Rng& rng) {
  FinetuneReport report;
  if (config.epochs == 0) return report;
  if (config.batch_size == 0) throw InvalidInput("finetune batch size must be positive");
  if (head.input_dim() != embedder.dimension()) throw InvalidInput("projection head input does not match embedder dimension");
  TripletSampler sampler(dataset, config.augmentation);
  report.skipped_classes = sampler.skipped_classes();

  std::vector<Embedding> anchor_cache(dataset.size());
  nn::Adam adam(head.parameters().size(), nn::AdamConfig{config.learning_rate});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<Embedding> a, p, n;
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const Triplet t = sampler.draw(rng);
        if (anchor_cache[t.anchor].empty()) anchor_cache[t.anchor] = embedder.embed(t.anchor_clip);
        a.push_back(anchor_cache[t.anchor]);
        p.push_back(embedder.embed(t.positive_clip));
        n.push_back(embedder.embed(t.negative_clip));
      }
      head.zero_gradients();
      const double loss = triplet_batch_loss_and_gradient(head, a, p, n, config.margin);
      if (!std::isfinite(loss) || !stats::all_finite(head.gradients())) {
        throw NumericError("fine-tuning diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      adam.step(head.parameters(), head.gradients());
      report.losses.push_back(loss);
    }
  }
  return report;
}

/// Frozen embedder followed by a projection head.
class ProjectedEmbedding final : public EmbeddingModel {
 public:
  ProjectedEmbedding(const EmbeddingModel& base, const ProjectionHead& head) : base_(&base), head_(&head) {}
  Embedding embed(const AudioClip& clip) const override { return head_->forward(base_->embed(clip)); }
  std::size_t dimension() const override { return head_->output_dim(); }

 private:
  const EmbeddingModel* base_;
  const ProjectionHead* head_;
};

inline std::vector<EmbeddedItem> embed_all(const EmbeddingModel& model, std::span<const LabeledClip> clips) {
  std::vector<EmbeddedItem> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back({c.id, model.embed(c.clip)});
  return out;
}

/// Applies a head to already-embedded items.
inline std::vector<EmbeddedItem> project_all(const ProjectionHead& head, std::span<const EmbeddedItem> items) {
  std::vector<EmbeddedItem> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back({it.id, head.forward(it.vector)});
  return out;
}

struct Match {
  std::string generated_id;
  std::string training_id;
  double score = 0.0;
};

/// For each generated item, the training item with the highest cosine
/// similarity; ties go to the lexicographically smallest training id.
inline std::vector<Match> top1_match(std::span<const EmbeddedItem> generated, std::span<const EmbeddedItem> training) {
  if (generated.empty() || training.empty()) throw InvalidInput("top1_match needs nonempty generated and training sets");
  std::vector<Match> out;
  out.reserve(generated.size());
  for (const auto& g : generated) {
    const EmbeddedItem* best = nullptr;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const auto& t : training) {
      const double s = cosine(g.vector, t.vector);
      if (s > best_score || (s == best_score && t.id < best->id)) {
        best = &t;
        best_score = s;
      }
    }
    out.push_back({g.id, best->id, best_score});
  }
  return out;
}

/// Leave-one-out top-1 cosine similarity of each training item against the rest.
inline std::vector<double> training_self_similarities(std::span<const EmbeddedItem> training) {
  if (training.size() < 2) throw InvalidInput("training self-similarity needs at least 2 clips");
  std::vector<double> out(training.size(), -1.0);
  for (std::size_t i = 0; i < training.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < training.size(); ++j) {
      if (j != i) best = std::max(best, cosine(training[i].vector, training[j].vector));
    }
    out[i] = best;
  }
  return out;
}

inline double percentile95(std::vector<double> scores) { return stats::quantile_linear(std::move(scores), 0.95); }

inline double training_self_similarity_p95(std::span<const EmbeddedItem> training) {
  return percentile95(training_self_similarities(training));
}

struct SimilarityReport {
  std::vector<Match> matches;
  std::vector<double> training_scores;
  double generated_p95 = 0.0;
  double training_p95 = 0.0;
  /// generated_p95 - training_p95; > 0 means more similar than the training set is to itself.
  double relative = 0.0;
};

inline SimilarityReport relative_similarity(std::span<const EmbeddedItem> generated,
                                            std::span<const EmbeddedItem> training) {
  SimilarityReport r;
  r.matches = top1_match(generated, training);
  std::vector<double> scores;
  for (const auto& m : r.matches) scores.push_back(m.score);
  r.training_scores = training_self_similarities(training);
  r.generated_p95 = percentile95(std::move(scores));
  r.training_p95 = percentile95(r.training_scores);
  r.relative = r.generated_p95 - r.training_p95;
  return r;
}

inline void write_report(std::ostream& os, const SimilarityReport& r, const std::string& title = "similarity") {
  os << std::setprecision(9);
  os << "# " << title << " report\n";
  os << "[summary]\n";
  os << "generated_count = " << r.matches.size() << '\n';
  os << "training_count = " << r.training_scores.size() << '\n';
  os << "generated_p95 = " << r.generated_p95 << '\n';
  os << "training_p95 = " << r.training_p95 << '\n';
  os << "relative = " << r.relative << '\n';
  os << "[matches]\n";
  os << "generated_id\ttraining_id\tscore\n";
  for (const auto& m : r.matches) os << m.generated_id << '\t' << m.training_id << '\t' << m.score << '\n';
}

/// Histogram CSV over [-1, 1]: bin_lo,bin_hi,generated,training.
inline void write_histogram_csv(std::ostream& os, const SimilarityReport& r, std::size_t bins = 40) {
  std::vector<std::size_t> gen(bins, 0), train(bins, 0);
  auto bin_of = [bins](double s) {
    const auto b = static_cast<std::size_t>(std::floor((s + 1.0) / 2.0 * static_cast<double>(bins)));
    return std::min(b, bins - 1);
  };
  for (const auto& m : r.matches) ++gen[bin_of(m.score)];
  for (double s : r.training_scores) ++train[bin_of(s)];
  os << "bin_lo,bin_hi,generated,training\n";
  os << std::setprecision(6);
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(bins);
    os << lo << ',' << hi << ',' << gen[b] << ',' << train[b] << '\n';
  }
}

/// Rebuilds a clip from 4 equal segments of `clip` in a permuted order.
inline AudioClip stitch_segments(const AudioClip& clip, std::span<const std::size_t> order) {
  const std::size_t parts = order.size();
  if (parts == 0) throw InvalidInput("stitch: empty segment order");
  const std::size_t seg = clip.size() / parts;
  AudioClip out = clip;
  for (std::size_t k = 0; k < parts; ++k) {
    for (std::size_t i = 0; i < seg; ++i) out.samples[k * seg + i] = clip.samples[order[k] * seg + i];
  }
  return out;
}

}  // namespace edmsound
