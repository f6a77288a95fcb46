#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edmsound/denoiser_interface.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/error.hpp"
#include "edmsound/nn.hpp"
#include "edmsound/stats.hpp"

namespace edmsound {

/// Posterior mean for data ~ Normal(mean, scale^2 I):
/// D(x; sigma) = (s^2 x + sigma^2 mu) / (s^2 + sigma^2).
/// A one-element mean is broadcast over the state.
class GaussianOracleDenoiser final : public Denoiser {
 public:
  GaussianOracleDenoiser(State mean, double scale) : mean_(std::move(mean)), scale_(scale) {
    if (!(scale_ > 0.0)) throw InvalidInput("Gaussian oracle scale must be positive");
    if (mean_.empty()) throw InvalidInput("Gaussian oracle mean is empty");
  }

  State evaluate(std::span<const double> x, double sigma, Condition) const override {
    if (sigma < 0.0) throw DomainError("oracle requires sigma >= 0");
    if (mean_.size() != 1 && mean_.size() != x.size()) throw InvalidInput("Gaussian oracle: state size mismatch");
    const double s2 = scale_ * scale_;
    const double v2 = sigma * sigma;
    State out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double mu = mean_.size() == 1 ? mean_[0] : mean_[i];
      out[i] = (s2 * x[i] + v2 * mu) / (s2 + v2);
    }
    return out;
  }

  const State& mean() const { return mean_; }
  double scale() const { return scale_; }

  /// Exact probability-flow trajectory from (x_start, sigma_start) to sigma_end:
  /// x(sigma) - mu = (x_start - mu) sqrt((s^2 + sigma^2) / (s^2 + sigma_start^2)).
  State trajectory(std::span<const double> x_start, double sigma_start, double sigma_end) const {
    const double s2 = scale_ * scale_;
    const double ratio = std::sqrt((s2 + sigma_end * sigma_end) / (s2 + sigma_start * sigma_start));
    State out(x_start.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double mu = mean_.size() == 1 ? mean_[0] : mean_[i];
      out[i] = mu + (x_start[i] - mu) * ratio;
    }
    return out;
  }

 private:
  State mean_;
  double scale_;
};

struct MixtureComponent {
  double weight = 1.0;
  State mean;
  double scale = 1.0;
  /// Class this component belongs to; used only by conditional evaluation.
  Condition label;
};

/// Posterior mean for an isotropic Gaussian mixture. Responsibilities are
/// proportional to w_k N(x; mu_k, (s_k^2 + sigma^2) I), computed in log space.
/// With a class condition only that class's components participate; the null
/// class uses every component.
class MixtureOracleDenoiser final : public Denoiser {
 public:
  explicit MixtureOracleDenoiser(std::vector<MixtureComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw InvalidInput("mixture needs at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      if (!(c.weight > 0.0)) throw InvalidInput("mixture weights must be positive");
      if (!(c.scale > 0.0)) throw InvalidInput("mixture scales must be positive");
      if (c.mean.size() != components_.front().mean.size()) throw InvalidInput("mixture means differ in size");
      total += c.weight;
    }
    for (auto& c : components_) c.weight /= total;
  }

  State evaluate(std::span<const double> x, double sigma, Condition cond) const override {
    if (sigma < 0.0) throw DomainError("oracle requires sigma >= 0");
    const std::size_t dim = x.size();
    if (dim != components_.front().mean.size()) throw InvalidInput("mixture oracle: state size mismatch");
    const double v2 = sigma * sigma;

    std::vector<double> log_r(components_.size(), -std::numeric_limits<double>::infinity());
    double max_log = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const auto& c = components_[k];
      if (cond && c.label != cond) continue;
      const double var = c.scale * c.scale + v2;
      double sq = 0.0;
      for (std::size_t i = 0; i < dim; ++i) sq += (x[i] - c.mean[i]) * (x[i] - c.mean[i]);
      log_r[k] = std::log(c.weight) - 0.5 * sq / var - 0.5 * static_cast<double>(dim) * std::log(var);
      max_log = std::max(max_log, log_r[k]);
    }
    if (!std::isfinite(max_log)) throw InvalidInput("mixture oracle: no component carries the requested class");

    double norm = 0.0;
    for (double& l : log_r) {
      l = std::exp(l - max_log);
      norm += l;
    }
    State out(dim, 0.0);
    for (std::size_t k = 0; k < components_.size(); ++k) {
      if (log_r[k] == 0.0) continue;
      const auto& c = components_[k];
      const double s2 = c.scale * c.scale;
      const double r = log_r[k] / norm;
      for (std::size_t i = 0; i < dim; ++i) out[i] += r * (s2 * x[i] + v2 * c.mean[i]) / (s2 + v2);
    }
    return out;
  }

  const std::vector<MixtureComponent>& components() const { return components_; }

 private:
  std::vector<MixtureComponent> components_;
};

struct DenoiserArch {
  std::size_t input_dim = 2048;
  std::size_t hidden = 256;
  /// Hidden layers: one input projection followed by (layers - 1) residual blocks.
  std::size_t layers = 4;
  std::size_t num_classes = 0;
  std::size_t noise_frequencies = 16;

  void validate() const {
    if (input_dim == 0 || hidden == 0 || layers == 0 || noise_frequencies == 0) {
      throw InvalidInput("denoiser architecture dimensions must be positive");
    }
  }
  bool operator==(const DenoiserArch&) const = default;
};

/// Fully-connected residual network F(x_in; c_noise, class).
///
///   h0  = W_in x_in + b_in + W_noise phi(c_noise) + E[class]
///   a0  = gelu(h0)
///   a_l = a_{l-1} + gelu(W_l a_{l-1} + b_l)          l = 1 .. layers-1
///   out = W_out a_{L-1} + b_out
///
/// phi expands c_noise into sin/cos features at geometrically spaced
/// frequencies; E is a (num_classes + 1)-column linear map of the one-hot
/// label whose last column is the null class. W_out and b_out start at zero so
/// the preconditioned model initially returns c_skip x.
class TrainableDenoiser {
 public:
  struct Cache {
    State input;
    std::vector<double> features;
    std::vector<double> pre0;
    std::vector<std::vector<double>> pre;   // residual pre-activations, index l-1
    std::vector<std::vector<double>> act;   // a_0 .. a_{L-1}
    std::size_t class_index = 0;
  };

  TrainableDenoiser() = default;

  TrainableDenoiser(const DenoiserArch& arch, std::uint64_t seed) : arch_(arch) {
    build_layout();
    params_.assign(layout_total_, 0.0);
    grads_.assign(layout_total_, 0.0);
    Rng rng(seed);
    nn::init_dense(in_, params_, rng);
    nn::init_dense(noise_, params_, rng);
    nn::init_dense(class_, params_, rng, 0.5);
    for (const auto& block : blocks_) nn::init_dense(block, params_, rng);
    nn::zero_dense(out_, params_);
  }

  /// Rebuilds a model from stored parameters (e.g. a checkpoint).
  static TrainableDenoiser from_parameters(const DenoiserArch& arch, std::vector<double> params) {
    TrainableDenoiser m;
    m.arch_ = arch;
    m.build_layout();
    if (params.size() != m.layout_total_) {
      throw InvalidInput("parameter count " + std::to_string(params.size()) + " does not match architecture (" +
                         std::to_string(m.layout_total_) + ")");
    }
    m.params_ = std::move(params);
    m.grads_.assign(m.layout_total_, 0.0);
    return m;
  }

  const DenoiserArch& arch() const { return arch_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::span<const double> gradients() const { return grads_; }
  std::span<double> gradients() { return grads_; }
  void zero_gradients() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  std::size_t class_index(Condition cond) const {
    if (!cond) return arch_.num_classes;
    if (*cond >= arch_.num_classes) {
      throw InvalidInput("class index " + std::to_string(*cond) + " out of range (" +
                         std::to_string(arch_.num_classes) + " classes)");
    }
    return *cond;
  }

  std::vector<double> noise_features(double c_noise) const {
    const std::size_t n = arch_.noise_frequencies;
    std::vector<double> phi(2 * n);
    for (std::size_t j = 0; j < n; ++j) {
      const double t = n == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(n - 1);
      const double omega = 0.5 * std::pow(32.0, t);
      phi[2 * j] = std::sin(omega * c_noise);
      phi[2 * j + 1] = std::cos(omega * c_noise);
    }
    return phi;
  }

  State forward(std::span<const double> input, double c_noise, Condition cond, Cache* cache = nullptr) const {
    if (input.size() != arch_.input_dim) {
      throw InvalidInput("denoiser input has " + std::to_string(input.size()) + " elements, expected " +
                         std::to_string(arch_.input_dim));
    }
    const std::size_t h = arch_.hidden;
    const std::size_t cls = class_index(cond);
    const std::vector<double> phi = noise_features(c_noise);

    std::vector<double> pre0(h);
    std::vector<double> tmp(h);
    nn::forward(in_, params_, input, pre0);
    nn::forward(noise_, params_, phi, tmp);
    for (std::size_t i = 0; i < h; ++i) pre0[i] += tmp[i] + params_[class_.weight_offset + i * class_.in + cls];

    std::vector<double> a(h);
    for (std::size_t i = 0; i < h; ++i) a[i] = nn::gelu(pre0[i]);
    if (cache) {
      cache->input.assign(input.begin(), input.end());
      cache->features = phi;
      cache->pre0 = pre0;
      cache->class_index = cls;
      cache->pre.clear();
      cache->act.clear();
      cache->act.push_back(a);
    }
    std::vector<double> z(h);
    for (const auto& block : blocks_) {
      nn::forward(block, params_, a, z);
      for (std::size_t i = 0; i < h; ++i) a[i] += nn::gelu(z[i]);
      if (cache) {
        cache->pre.push_back(z);
        cache->act.push_back(a);
      }
    }
    State out(arch_.input_dim);
    nn::forward(out_, params_, a, out);
    return out;
  }

  /// Reverse-mode pass: accumulates dL/dtheta into gradients() given dL/dout.
  /// Returns dL/dinput.
  std::vector<double> backward(const Cache& cache, std::span<const double> out_grad) {
    if (out_grad.size() != arch_.input_dim || cache.act.size() != blocks_.size() + 1 ||
        cache.input.size() != arch_.input_dim) {
      throw InvalidInput("backward: cache or output gradient shape mismatch");
    }
    const std::size_t h = arch_.hidden;
    std::vector<double> da(h, 0.0);
    nn::backward(out_, params_, grads_, cache.act.back(), out_grad, da);
    std::vector<double> dz(h);
    for (std::size_t l = blocks_.size(); l-- > 0;) {
      const auto& z = cache.pre[l];
      for (std::size_t i = 0; i < h; ++i) dz[i] = da[i] * nn::gelu_grad(z[i]);
      // a_l = a_{l-1} + gelu(z_l): the skip path passes da through unchanged.
      nn::backward(blocks_[l], params_, grads_, cache.act[l], dz, da);
    }
    std::vector<double> dh(h);
    for (std::size_t i = 0; i < h; ++i) dh[i] = da[i] * nn::gelu_grad(cache.pre0[i]);
    std::vector<double> dinput(arch_.input_dim, 0.0);
    nn::backward(in_, params_, grads_, cache.input, dh, dinput);
    nn::backward(noise_, params_, grads_, cache.features, dh, {});
    for (std::size_t i = 0; i < h; ++i) grads_[class_.weight_offset + i * class_.in + cache.class_index] += dh[i];
    return dinput;
  }

  /// Parameter name for diagnostics, e.g. "blocks.1.weight[37]".
  std::string parameter_name(std::size_t index) const {
    auto in_dense = [&](const nn::Dense& d, const std::string& name, std::string& out) {
      if (index >= d.weight_offset && index < d.weight_offset + d.in * d.out) {
        out = name + ".weight[" + std::to_string(index - d.weight_offset) + "]";
        return true;
      }
      if (d.has_bias && index >= d.bias_offset && index < d.bias_offset + d.out) {
        out = name + ".bias[" + std::to_string(index - d.bias_offset) + "]";
        return true;
      }
      return false;
    };
    std::string out;
    if (in_dense(in_, "input", out) || in_dense(noise_, "noise_embedding", out) ||
        in_dense(class_, "class_embedding", out) || in_dense(out_, "output", out)) {
      return out;
    }
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      if (in_dense(blocks_[l], "blocks." + std::to_string(l), out)) return out;
    }
    return "param[" + std::to_string(index) + "]";
  }

 private:
  void build_layout() {
    arch_.validate();
    nn::Layout layout;
    in_ = layout.add_dense(arch_.input_dim, arch_.hidden);
    noise_ = layout.add_dense(2 * arch_.noise_frequencies, arch_.hidden, false);
    class_ = layout.add_dense(arch_.num_classes + 1, arch_.hidden, false);
    blocks_.clear();
    for (std::size_t l = 1; l < arch_.layers; ++l) blocks_.push_back(layout.add_dense(arch_.hidden, arch_.hidden));
    out_ = layout.add_dense(arch_.hidden, arch_.input_dim);
    layout_total_ = layout.total();
  }

  DenoiserArch arch_;
  nn::Dense in_;
  nn::Dense noise_;
  nn::Dense class_;
  std::vector<nn::Dense> blocks_;
  nn::Dense out_;
  std::size_t layout_total_ = 0;
  std::vector<double> params_;
  std::vector<double> grads_;
};

/// (output, cache) of one forward pass.
inline std::pair<State, TrainableDenoiser::Cache> net_forward(const TrainableDenoiser& model,
                                                               std::span<const double> x, double sigma,
                                                               Condition cond, const Preconditioner& pre = {}) {
  TrainableDenoiser::Cache cache;
  State out = model.forward(x, pre.c_noise(sigma), cond, &cache);
  return {std::move(out), std::move(cache)};
}

/// Parameter gradients of <out_grad, F> for the forward pass captured in `cache`.
/// The model's own gradient store is left untouched.
inline std::vector<double> net_backward(const TrainableDenoiser& model, const TrainableDenoiser::Cache& cache,
                                        std::span<const double> out_grad) {
  TrainableDenoiser scratch = model;
  scratch.zero_gradients();
  scratch.backward(cache, out_grad);
  return {scratch.gradients().begin(), scratch.gradients().end()};
}

/// Exposes a trainable network as D(x; sigma) through the EDM preconditioning.
class PreconditionedDenoiser final : public Denoiser {
 public:
  PreconditionedDenoiser(const TrainableDenoiser& net, Preconditioner pre) : net_(&net), pre_(pre) {}

  State evaluate(std::span<const double> x, double sigma, Condition cond) const override {
    return precondition_denoise(
        pre_, [this](std::span<const double> in, double c_noise, Condition c) { return net_->forward(in, c_noise, c); },
        x, sigma, cond);
  }

 private:
  const TrainableDenoiser* net_;
  Preconditioner pre_;
};

/// One corrupted training item with its noise level and (possibly dropped) label.
struct DenoisingExample {
  State clean;
  State noisy;
  double sigma = 1.0;
  Condition cond;
};

/// Weighted denoising loss over `examples` (mean over items of
/// lambda(sigma) * mean-squared error) and its exact parameter gradient,
/// accumulated into model.gradients().
inline LossReport denoising_loss_and_gradient(TrainableDenoiser& model, const Preconditioner& pre,
                                              std::span<const DenoisingExample> examples) {
  if (examples.empty()) throw InvalidInput("empty batch");
  LossReport report;
  const double inv_batch = 1.0 / static_cast<double>(examples.size());
  TrainableDenoiser::Cache cache;
  for (const DenoisingExample& ex : examples) {
    const double sigma = ex.sigma;
    const double c_in = pre.c_in(sigma);
    const double c_skip = pre.c_skip(sigma);
    const double c_out = pre.c_out(sigma);
    const double weight = pre.loss_weight(sigma);
    State scaled(ex.noisy);
    for (double& v : scaled) v *= c_in;
    const State f = model.forward(scaled, pre.c_noise(sigma), ex.cond, &cache);
    const double n = static_cast<double>(f.size());
    double sq = 0.0;
    std::vector<double> grad(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) {
      const double r = c_skip * ex.noisy[j] + c_out * f[j] - ex.clean[j];
      sq += r * r;
      grad[j] = inv_batch * weight * 2.0 * r / n * c_out;
    }
    const double loss = weight * sq / n;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at sigma=" + std::to_string(sigma));
    report.per_item.push_back(loss);
    report.sigma_draws.push_back(sigma);
    model.backward(cache, grad);
  }
  report.total = stats::mean(report.per_item);
  return report;
}

struct TrainOptions {
  double drop_prob = 0.1;
  Preconditioner preconditioner;
  NoiseLevelDistribution noise;
};

/// Replaces each label by the null class with probability drop_prob. One
/// uniform draw per item is consumed even when `labels` is empty.
inline std::vector<Condition> apply_label_dropout(std::span<const Condition> labels, std::size_t count, double drop_prob,
                                                  Rng& rng) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw InvalidInput("drop_prob must be in [0, 1]");
  if (!labels.empty() && labels.size() != count) throw InvalidInput("labels not aligned with batch");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Condition> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const bool drop = uniform(rng) < drop_prob;
    out[i] = (labels.empty() || drop) ? Condition{} : labels[i];
  }
  return out;
}

/// One Adam update on the weighted denoising objective. Random draws happen in
/// a fixed order: label drops for the whole batch, then noise levels, then
/// per-item noise.
inline LossReport train_step(TrainableDenoiser& model, std::span<const State> batch, std::span<const Condition> labels,
                             nn::Adam& optimizer, const TrainOptions& options, Rng& rng) {
  if (batch.empty()) throw InvalidInput("train_step: empty batch");
  if (!labels.empty() && labels.size() != batch.size()) throw InvalidInput("train_step: labels not aligned with batch");
  if (!(options.drop_prob >= 0.0 && options.drop_prob <= 1.0)) throw InvalidInput("drop_prob must be in [0, 1]");

  const std::vector<Condition> conds = apply_label_dropout(labels, batch.size(), options.drop_prob, rng);
  std::vector<DenoisingExample> examples(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) examples[i].cond = conds[i];
  const std::vector<double> sigmas = sample_sigma(rng, batch.size(), options.noise);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    examples[i].clean = batch[i];
    examples[i].sigma = sigmas[i];
    examples[i].noisy = corrupt(batch[i], sigmas[i], rng);
  }

  model.zero_gradients();
  LossReport report = denoising_loss_and_gradient(model, options.preconditioner, examples);
  const auto grads = model.gradients();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("non-finite gradient for " + model.parameter_name(i) + " (batch loss " +
                         std::to_string(report.total) + ")");
    }
  }
  optimizer.step(model.parameters(), model.gradients());
  return report;
}

}  // namespace edmsound
