#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <cmath>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/pipeline.hpp"

namespace edmsound::test_support {

/// 1-D Gaussian toy task: data ~ N(mean, scale^2), a small residual network
/// trained with the production training loop.
struct Gaussian1dRun {
  double mean = 0.5;
  double scale = 0.3;
  std::size_t steps = 2000;
  std::size_t batch = 256;
  std::size_t dataset_size = 8192;
  // Wide enough that sigma in [0.01, 3] lies within 2.5 standard deviations of ln sigma.
  NoiseLevelDistribution noise{-1.0, 1.5};
  double learning_rate = 3e-3;
  DenoiserArch arch{1, 64, 3, 0, 8};
  std::uint64_t seed = 1;
};

struct Gaussian1dResult {
  TrainableDenoiser model;
  std::vector<double> ema;  // EMA after each step, index k = step k+1
  double relative_rms = 0.0;
  double worst_sigma_relative_rms = 0.0;
};

/// Relative RMS of D against the analytic posterior mean over 40 log-spaced
/// sigma in [0.01, 3] times 41 x positions spanning +-3 marginal standard deviations.
inline void score_against_oracle(const Denoiser& d, double mean, double scale, double& pooled, double& worst) {
  const GaussianOracleDenoiser oracle({mean}, scale);
  double num = 0.0, den = 0.0;
  worst = 0.0;
  for (int i = 0; i < 40; ++i) {
    const double sigma = std::exp(std::log(0.01) + (std::log(3.0) - std::log(0.01)) * i / 39.0);
    double n = 0.0, m = 0.0;
    for (int j = 0; j <= 40; ++j) {
      const double x = mean + (-3.0 + 6.0 * j / 40.0) * std::sqrt(scale * scale + sigma * sigma);
      const double a = d.evaluate(State{x}, sigma, {})[0];
      const double b = oracle.evaluate(State{x}, sigma, {})[0];
      n += (a - b) * (a - b);
      m += b * b;
    }
    num += n;
    den += m;
    worst = std::max(worst, std::sqrt(n / m));
  }
  pooled = std::sqrt(num / den);
}

inline Gaussian1dResult train_gaussian_1d(const Gaussian1dRun& run) {
  EncodedDataset data;
  Rng rng(derive_seed(run.seed, 0x64617461));
  std::normal_distribution<double> normal(run.mean, run.scale);
  for (std::size_t i = 0; i < run.dataset_size; ++i) {
    data.states.push_back({normal(rng)});
    data.labels.push_back(Condition{});
  }
  Gaussian1dResult result;
  result.model = TrainableDenoiser(run.arch, derive_seed(run.seed, 0x696e6974));
  nn::Adam adam(result.model.parameters().size(), {run.learning_rate});
  TrainOptions options;
  options.drop_prob = 0.0;
  options.noise = run.noise;
  train_steps(result.model, adam, data, options, run.batch, run.seed, 0, run.steps,
              [&](const TrainProgress& p) { result.ema.push_back(p.ema); });
  const PreconditionedDenoiser d(result.model, options.preconditioner);
  score_against_oracle(d, run.mean, run.scale, result.relative_rms, result.worst_sigma_relative_rms);
  return result;
}

/// Largest ratio ema[t + span] / ema[t] over all t at or after `from`.
inline double worst_ema_ratio(const std::vector<double>& ema, std::size_t span, std::size_t from) {
  double worst = 0.0;
  for (std::size_t t = from; t + span < ema.size(); ++t) worst = std::max(worst, ema[t + span] / ema[t]);
  return worst;
}

}  // namespace edmsound::test_support
