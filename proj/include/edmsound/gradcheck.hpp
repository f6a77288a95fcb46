#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/replication.hpp"
#include "edmsound/toy_data.hpp"

// Central finite-difference checks of every hand-written backward pass.
namespace edmsound {

struct GradcheckResult {
  std::string suite;
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

struct GradcheckOptions {
  std::size_t samples = 200;  // parameters probed per suite
  double step = 1e-5;
  double floor = 1e-6;  // relative error is |a - n| / max(|a|, |n|, floor)
  std::uint64_t seed = 7;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace gradcheck_detail {

/// Probes `count` parameters (all of them if fewer) of `params` against `analytic`.
inline GradcheckResult probe(std::string suite, std::span<double> params, std::span<const double> analytic,
                             const std::function<double()>& objective,
                             const std::function<std::string(std::size_t)>& name, const GradcheckOptions& opt) {
  GradcheckResult r;
  r.suite = std::move(suite);
  std::vector<std::size_t> idx(params.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (idx.size() > opt.samples) {
    Rng rng(opt.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.samples);
    std::sort(idx.begin(), idx.end());
  }
  for (std::size_t i : idx) {
    const double saved = params[i];
    params[i] = saved + opt.step;
    const double up = objective();
    params[i] = saved - opt.step;
    const double down = objective();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double err = relative_error(analytic[i], numeric, opt.floor);
    if (r.checked == 0 || err > r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_parameter = name(i);
    }
    ++r.checked;
  }
  return r;
}

inline State random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  State v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace gradcheck_detail

inline DenoiserArch gradcheck_arch() { return {6, 8, 3, 2, 4}; }

/// d<g, F(x)>/dtheta for the raw network, plus the input gradient.
inline std::vector<GradcheckResult> check_network_gradients(const DenoiserArch& arch = gradcheck_arch(),
                                                            const GradcheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  Rng rng(derive_seed(opt.seed, 1));
  TrainableDenoiser model(arch, derive_seed(opt.seed, 2));
  // Give the zero-initialized output layer nonzero weights so every path carries gradient.
  {
    std::normal_distribution<double> normal(0.0, 0.3);
    for (double& p : model.parameters()) {
      if (p == 0.0) p = normal(rng);
    }
  }
  State x = random_vector(arch.input_dim, rng);
  const State g = random_vector(arch.input_dim, rng);
  const double c_noise = 0.3;
  const Condition cond = arch.num_classes > 0 ? Condition{arch.num_classes - 1} : Condition{};
  auto objective = [&] {
    const State f = model.forward(x, c_noise, cond);
    return dot(f, g);
  };
  TrainableDenoiser::Cache cache;
  model.forward(x, c_noise, cond, &cache);
  model.zero_gradients();
  const std::vector<double> dx = model.backward(cache, g);
  const std::vector<double> analytic(model.gradients().begin(), model.gradients().end());

  std::vector<GradcheckResult> out;
  out.push_back(probe("network.parameters", model.parameters(), analytic, objective,
                      [&](std::size_t i) { return model.parameter_name(i); }, opt));
  out.push_back(probe("network.input", x, dx, objective, [](std::size_t i) { return "input[" + std::to_string(i) + "]"; },
                      opt));
  return out;
}

/// Gradient of the weighted, preconditioned denoising loss over a small batch.
inline GradcheckResult check_loss_gradients(const DenoiserArch& arch = gradcheck_arch(), const GradcheckOptions& opt = {},
                                            const Preconditioner& pre = {}) {
  using namespace gradcheck_detail;
  Rng rng(derive_seed(opt.seed, 3));
  TrainableDenoiser model(arch, derive_seed(opt.seed, 4));
  {
    std::normal_distribution<double> normal(0.0, 0.3);
    for (double& p : model.parameters()) {
      if (p == 0.0) p = normal(rng);
    }
  }
  std::vector<DenoisingExample> batch;
  for (double sigma : {0.01, 0.2, 1.5}) {
    DenoisingExample ex;
    ex.clean = random_vector(arch.input_dim, rng, 0.2);
    ex.sigma = sigma;
    ex.noisy = ex.clean;
    const State n = random_vector(arch.input_dim, rng, sigma);
    for (std::size_t i = 0; i < n.size(); ++i) ex.noisy[i] += n[i];
    ex.cond = batch.size() % 2 == 0 && arch.num_classes > 0 ? Condition{0} : Condition{};
    batch.push_back(std::move(ex));
  }
  model.zero_gradients();
  denoising_loss_and_gradient(model, pre, batch);
  const std::vector<double> analytic(model.gradients().begin(), model.gradients().end());
  auto objective = [&] {
    TrainableDenoiser probe_model = TrainableDenoiser::from_parameters(
        arch, std::vector<double>(model.parameters().begin(), model.parameters().end()));
    return denoising_loss_and_gradient(probe_model, pre, batch).total;
  };
  return probe("loss.parameters", model.parameters(), analytic, objective,
               [&](std::size_t i) { return model.parameter_name(i); }, opt);
}

/// Gradient of the batch triplet loss through the projection head and its
/// output normalization.
inline GradcheckResult check_projection_head_gradients(const GradcheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  Rng rng(derive_seed(opt.seed, 5));
  const std::size_t d = 10;
  ProjectionHead head(d, 12, 6, derive_seed(opt.seed, 6));
  std::vector<Embedding> a, p, n;
  for (int i = 0; i < 4; ++i) {
    a.push_back(normalized(random_vector(d, rng)));
    p.push_back(normalized(random_vector(d, rng)));
    n.push_back(normalized(random_vector(d, rng)));
  }
  const double margin = 4.5;  // squared distances of unit vectors lie in [0, 4], so every hinge stays active
  head.zero_gradients();
  triplet_batch_loss_and_gradient(head, a, p, n, margin);
  const std::vector<double> analytic(head.gradients().begin(), head.gradients().end());
  auto objective = [&] {
    ProjectionHead copy = head;
    return triplet_batch_loss_and_gradient(copy, a, p, n, margin);
  };
  return probe("projection_head.parameters", head.parameters(), analytic, objective,
               [](std::size_t i) { return "head.param[" + std::to_string(i) + "]"; }, opt);
}

inline std::vector<GradcheckResult> run_all_gradchecks(const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> out = check_network_gradients(gradcheck_arch(), opt);
  out.push_back(check_loss_gradients(gradcheck_arch(), opt));
  out.push_back(check_projection_head_gradients(opt));
  return out;
}

}  // namespace edmsound
