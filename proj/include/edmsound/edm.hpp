#pragma once

#include <cmath>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "edmsound/denoiser_interface.hpp"
#include "edmsound/error.hpp"
#include "edmsound/stats.hpp"

namespace edmsound {

/// EDM network preconditioning around a raw network F:
///   D(x; sigma) = c_skip x + c_out F(c_in x; c_noise).
struct Preconditioner {
  double sigma_data = 0.2;

  void validate() const {
    if (!(sigma_data > 0.0)) throw InvalidInput("sigma_data must be positive");
  }

  double c_skip(double sigma) const {
    const double sd2 = sigma_data * sigma_data;
    return sd2 / (sd2 + sigma * sigma);
  }
  double c_out(double sigma) const { return sigma * sigma_data / std::sqrt(sigma_data * sigma_data + sigma * sigma); }
  double c_in(double sigma) const { return 1.0 / std::sqrt(sigma_data * sigma_data + sigma * sigma); }
  double c_noise(double sigma) const {
    if (!(sigma > 0.0)) throw DomainError("c_noise requires sigma > 0, got " + std::to_string(sigma));
    return std::log(sigma) / 4.0;
  }
  /// lambda(sigma) = 1 / c_out(sigma)^2.
  double loss_weight(double sigma) const {
    const double sd2 = sigma_data * sigma_data;
    return (sd2 + sigma * sigma) / (sigma * sigma * sd2);
  }
};

/// Assembles D from a raw network. `net` is called as
/// net(std::span<const double> scaled_input, double c_noise, Condition) -> State.
template <typename RawNet>
State precondition_denoise(const Preconditioner& pre, RawNet&& net, std::span<const double> x, double sigma,
                           Condition cond) {
  if (!(sigma > 0.0)) throw DomainError("precondition_denoise requires sigma > 0");
  const double c_in = pre.c_in(sigma);
  State scaled(x.begin(), x.end());
  for (double& v : scaled) v *= c_in;
  const State f = net(std::span<const double>(scaled), pre.c_noise(sigma), cond);
  if (f.size() != x.size()) throw InvalidInput("network output shape differs from input shape");
  if (!stats::all_finite(f)) {
    std::ostringstream msg;
    msg << "network produced non-finite output at sigma=" << sigma;
    throw NumericError(msg.str());
  }
  const double c_skip = pre.c_skip(sigma);
  const double c_out = pre.c_out(sigma);
  State out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = c_skip * x[i] + c_out * f[i];
  return out;
}

/// grad_x log p(x; sigma) = (D(x; sigma) - x) / sigma^2.
inline State score_from_denoiser(std::span<const double> x, double sigma, std::span<const double> denoised) {
  if (!(sigma > 0.0)) throw DomainError("score requires sigma > 0");
  if (x.size() != denoised.size()) throw InvalidInput("score: shape mismatch");
  State s(x.size());
  const double inv = 1.0 / (sigma * sigma);
  for (std::size_t i = 0; i < x.size(); ++i) s[i] = (denoised[i] - x[i]) * inv;
  return s;
}

/// Training noise levels: ln(sigma) ~ Normal(log_mean, log_std^2).
struct NoiseLevelDistribution {
  double log_mean = -3.0;
  double log_std = 1.0;

  void validate() const {
    if (!(log_std > 0.0)) throw InvalidInput("log_std must be positive");
  }
  double draw(Rng& rng) const { return std::exp(std::normal_distribution<double>(log_mean, log_std)(rng)); }
};

inline std::vector<double> sample_sigma(Rng& rng, std::size_t count, const NoiseLevelDistribution& dist = {}) {
  dist.validate();
  if (count == 0) throw InvalidInput("sample_sigma: count must be >= 1");
  std::normal_distribution<double> normal(dist.log_mean, dist.log_std);
  std::vector<double> out(count);
  for (double& s : out) s = std::exp(normal(rng));
  return out;
}

struct LossReport {
  double total = 0.0;
  std::vector<double> per_item;
  std::vector<double> sigma_draws;
};

/// x + sigma * eps with eps drawn i.i.d. standard normal per element.
inline State corrupt(std::span<const double> x, double sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  State y(x.begin(), x.end());
  for (double& v : y) v += sigma * normal(rng);
  return y;
}

/// Denoising score-matching loss at the given per-item noise levels:
/// lambda(sigma_i) * mean((D(x_i + sigma_i eps_i; sigma_i) - x_i)^2).
/// `labels`, when non-empty, conditions each item.
inline LossReport dsm_loss_at(const Denoiser& model, std::span<const State> batch, std::span<const double> sigmas,
                              Rng& rng, const Preconditioner& pre = {}, std::span<const Condition> labels = {}) {
  if (batch.empty()) throw InvalidInput("dsm_loss: empty batch");
  if (sigmas.size() != batch.size()) throw InvalidInput("dsm_loss: one sigma per item required");
  if (!labels.empty() && labels.size() != batch.size()) throw InvalidInput("dsm_loss: labels not aligned with batch");
  LossReport report;
  report.sigma_draws.assign(sigmas.begin(), sigmas.end());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const State& x = batch[i];
    const double sigma = sigmas[i];
    const State y = corrupt(x, sigma, rng);
    const State d = model.evaluate(y, sigma, labels.empty() ? Condition{} : labels[i]);
    double sq = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) sq += (d[j] - x[j]) * (d[j] - x[j]);
    const double loss = pre.loss_weight(sigma) * sq / static_cast<double>(x.size());
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at sigma=" + std::to_string(sigma));
    report.per_item.push_back(loss);
  }
  report.total = stats::mean(report.per_item);
  return report;
}

/// Monte-Carlo estimate of the weighted denoising objective: draws all noise
/// levels for the batch first, then the per-item noise.
inline LossReport dsm_loss(const Denoiser& model, std::span<const State> batch, Rng& rng,
                           const Preconditioner& pre = {}, const NoiseLevelDistribution& dist = {},
                           std::span<const Condition> labels = {}) {
  if (batch.empty()) throw InvalidInput("dsm_loss: empty batch");
  const std::vector<double> sigmas = sample_sigma(rng, batch.size(), dist);
  return dsm_loss_at(model, batch, sigmas, rng, pre, labels);
}

}  // namespace edmsound
