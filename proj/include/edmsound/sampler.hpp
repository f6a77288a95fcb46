#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "edmsound/denoiser_interface.hpp"
#include "edmsound/error.hpp"
#include "edmsound/stats.hpp"

namespace edmsound {

// Deterministic probability-flow sampling with sigma(t) = t, where the ODE
// reduces to dx/dsigma = (x - D(x; sigma)) / sigma.

struct SigmaSchedule {
  std::size_t steps = 0;
  double sigma_min = 1e-4;
  double sigma_max = 3.0;
  double rho = 7.0;
  /// steps + 1 values: sigma_max, ..., sigma_min, 0.
  std::vector<double> values;
};

/// sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho with a
/// trailing zero. N = 1 yields [sigma_max, 0].
inline SigmaSchedule karras_schedule(std::size_t steps, double sigma_min = 1e-4, double sigma_max = 3.0,
                                     double rho = 7.0) {
  if (steps == 0) throw InvalidInput("schedule needs at least one step");
  if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) throw InvalidInput("schedule needs 0 < sigma_min < sigma_max");
  if (!(rho > 0.0)) throw InvalidInput("schedule rho must be positive");
  SigmaSchedule s{steps, sigma_min, sigma_max, rho, {}};
  s.values.reserve(steps + 1);
  if (steps == 1) {
    s.values = {sigma_max, 0.0};
    return s;
  }
  const double hi = std::pow(sigma_max, 1.0 / rho);
  const double lo = std::pow(sigma_min, 1.0 / rho);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
    s.values.push_back(std::pow(hi + t * (lo - hi), rho));
  }
  s.values.front() = sigma_max;
  s.values[steps - 1] = sigma_min;
  s.values.push_back(0.0);
  return s;
}

enum class Solver { kEuler, kHeun, kDpm2S, kDpm3S, kDpm2M, kDpm3M };

inline constexpr std::array<Solver, 6> kAllSolvers = {Solver::kEuler, Solver::kHeun,  Solver::kDpm2S,
                                                      Solver::kDpm3S, Solver::kDpm2M, Solver::kDpm3M};

inline std::string_view solver_name(Solver s) {
  switch (s) {
    case Solver::kEuler: return "euler";
    case Solver::kHeun: return "heun";
    case Solver::kDpm2S: return "dpm-2s";
    case Solver::kDpm3S: return "dpm-3s";
    case Solver::kDpm2M: return "dpm-2m";
    case Solver::kDpm3M: return "dpm-3m";
  }
  return "?";
}

inline Solver parse_solver(std::string_view name) {
  for (Solver s : kAllSolvers) {
    if (solver_name(s) == name) return s;
  }
  throw InvalidInput("unknown solver \"" + std::string(name) + "\" (expected euler, heun, dpm-2s, dpm-3s, dpm-2m, dpm-3m)");
}

struct SamplerConfig {
  Solver solver = Solver::kHeun;
  std::size_t steps = 50;
  double cfg_scale = 2.0;
  /// Dynamic-threshold quantile applied to every (guided) denoiser output;
  /// disabled when empty.
  std::optional<double> threshold_quantile = 0.99;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps == 0) throw InvalidInput("sampler needs at least one step");
    if (!(cfg_scale >= 0.0)) throw InvalidInput("cfg scale must be >= 0");
    if (threshold_quantile && !(*threshold_quantile > 0.0 && *threshold_quantile <= 1.0)) {
      throw InvalidInput("threshold quantile must be in (0, 1]");
    }
  }
};

/// Model evaluations for a full run: Euler and the multistep solvers spend 1
/// per step, Heun and dpm-2s 2, dpm-3s 3, except the final step to sigma = 0
/// which is always a single Euler evaluation. Guidance doubles every count.
inline std::size_t expected_nfe(Solver solver, std::size_t steps, bool guided) {
  std::size_t per_step = 1;
  switch (solver) {
    case Solver::kEuler:
    case Solver::kDpm2M:
    case Solver::kDpm3M: per_step = 1; break;
    case Solver::kHeun:
    case Solver::kDpm2S: per_step = 2; break;
    case Solver::kDpm3S: per_step = 3; break;
  }
  const std::size_t n = per_step * (steps - 1) + 1;
  return guided ? 2 * n : n;
}

/// d_uncond + w (d_cond - d_uncond).
inline State apply_cfg(std::span<const double> d_cond, std::span<const double> d_uncond, double w) {
  if (d_cond.size() != d_uncond.size()) throw InvalidInput("apply_cfg: shape mismatch");
  if (!(w >= 0.0)) throw InvalidInput("apply_cfg: w must be >= 0");
  State out(d_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d_uncond[i] + w * (d_cond[i] - d_uncond[i]);
  return out;
}

/// s = max(quantile_q(|x|), 1); returns clamp(x, -s, s) / s. One shared s
/// over all elements (both spectrogram channels).
inline State dynamic_threshold(std::span<const double> x, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw InvalidInput("dynamic_threshold: q must be in (0, 1]");
  if (x.empty()) return {};
  std::vector<double> mags(x.size());
  std::transform(x.begin(), x.end(), mags.begin(), [](double v) { return std::abs(v); });
  const double s = std::max(stats::quantile_linear(std::move(mags), q), 1.0);
  State out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], -s, s) / s;
  return out;
}

/// Wraps a model with guidance, thresholding and an evaluation counter. This
/// is the D the solvers integrate.
class GuidedDenoiser {
 public:
  GuidedDenoiser(const Denoiser& model, Condition cond, double cfg_scale = 1.0,
                 std::optional<double> threshold = std::nullopt)
      : model_(&model), cond_(cond), cfg_scale_(cfg_scale), threshold_(threshold) {}

  /// Guidance only costs an extra call when a class is given and w != 1.
  bool guided() const { return cond_.has_value() && cfg_scale_ != 1.0; }

  State operator()(std::span<const double> x, double sigma) {
    State d;
    if (guided()) {
      const State dc = model_->evaluate(x, sigma, cond_);
      const State du = model_->evaluate(x, sigma, std::nullopt);
      nfe_ += 2;
      d = apply_cfg(dc, du, cfg_scale_);
    } else {
      d = model_->evaluate(x, sigma, cond_);
      nfe_ += 1;
    }
    if (threshold_) d = dynamic_threshold(d, *threshold_);
    return d;
  }

  std::size_t nfe() const { return nfe_; }

 private:
  const Denoiser* model_;
  Condition cond_;
  double cfg_scale_;
  std::optional<double> threshold_;
  std::size_t nfe_ = 0;
};

/// Adapts a Denoiser with a fixed condition to the denoise(x, sigma) calling
/// convention of the step functions.
inline auto bind_denoiser(const Denoiser& model, Condition cond) {
  return [&model, cond](std::span<const double> x, double sigma) { return model.evaluate(x, sigma, cond); };
}

/// dx/dsigma = (x - D(x; sigma)) / sigma.
inline State ode_rhs(std::span<const double> x, double sigma, const Denoiser& model, Condition cond) {
  if (!(sigma > 0.0)) throw DomainError("ode_rhs requires sigma > 0");
  const State d = model.evaluate(x, sigma, cond);
  State v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - d[i]) / sigma;
  return v;
}

namespace detail {

// Exponential-integrator weights in lambda = -ln(sigma) for a step of size h:
// c_k(h) = e^{-h} int_0^h e^tau tau^k / k! dtau.
inline double ei_c0(double h) { return -std::expm1(-h); }

inline double ei_c1(double h) {
  if (h < 1e-2) return h * h * (0.5 - h * (1.0 / 6.0 - h * (1.0 / 24.0 - h / 120.0)));
  return h + std::expm1(-h);
}

inline double ei_c2(double h) {
  if (h < 1e-2) return h * h * h * (1.0 / 6.0 - h * (1.0 / 24.0 - h * (1.0 / 120.0 - h / 720.0)));
  return 0.5 * h * h - h - std::expm1(-h);
}

/// e^{-h} x + c0 d0 + c1 d1 + c2 d2 (d1, d2 may be empty).
inline State ei_update(std::span<const double> x, double h, std::span<const double> d0, std::span<const double> d1,
                       std::span<const double> d2) {
  const double decay = std::exp(-h);
  const double a0 = ei_c0(h);
  const double a1 = d1.empty() ? 0.0 : ei_c1(h);
  const double a2 = d2.empty() ? 0.0 : ei_c2(h);
  State out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = decay * x[i] + a0 * d0[i];
    if (!d1.empty()) v += a1 * d1[i];
    if (!d2.empty()) v += a2 * d2[i];
    out[i] = v;
  }
  return out;
}

inline State difference(std::span<const double> a, std::span<const double> b, double scale) {
  State out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - b[i]) * scale;
  return out;
}

}  // namespace detail

/// x + (sigma_next - sigma_cur) (x - D) / sigma_cur. Takes D(x; sigma_cur) precomputed.
inline State euler_update(std::span<const double> x, double sigma_cur, double sigma_next, std::span<const double> d) {
  State out(x.size());
  const double dt = sigma_next - sigma_cur;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + dt * (x[i] - d[i]) / sigma_cur;
  return out;
}

template <typename DenoiseFn>
State euler_step(std::span<const double> x, double sigma_cur, double sigma_next, DenoiseFn&& denoise) {
  const State d = denoise(x, sigma_cur);
  return euler_update(x, sigma_cur, sigma_next, d);
}

/// Trapezoidal predictor-corrector; plain Euler when sigma_next == 0.
template <typename DenoiseFn>
State heun_step(std::span<const double> x, double sigma_cur, double sigma_next, DenoiseFn&& denoise) {
  const State d = denoise(x, sigma_cur);
  const State x_euler = euler_update(x, sigma_cur, sigma_next, d);
  if (sigma_next == 0.0) return x_euler;
  const State d2 = denoise(std::span<const double>(x_euler), sigma_next);
  const double dt = sigma_next - sigma_cur;
  State out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v1 = (x[i] - d[i]) / sigma_cur;
    const double v2 = (x_euler[i] - d2[i]) / sigma_next;
    out[i] = x[i] + dt * 0.5 * (v1 + v2);
  }
  return out;
}

/// Singlestep exponential integrator of order 2 or 3 in the data-prediction
/// form. Intermediate evaluations sit at equal lambda spacing (h/2 for order
/// 2; h/3 and 2h/3 for order 3). Falls back to Euler when sigma_next == 0.
template <typename DenoiseFn>
State dpm_singlestep(std::span<const double> x, double sigma_cur, double sigma_next, int order, DenoiseFn&& denoise) {
  if (order != 2 && order != 3) throw InvalidInput("dpm_singlestep order must be 2 or 3");
  if (sigma_next == 0.0) return euler_step(x, sigma_cur, sigma_next, denoise);
  if (!(sigma_cur > sigma_next)) throw InvalidInput("dpm_singlestep needs sigma_cur > sigma_next");
  const double h = std::log(sigma_cur / sigma_next);
  const State d0 = denoise(x, sigma_cur);
  if (order == 2) {
    // Midpoint form: the full step uses the half-step data prediction alone.
    const double r = 0.5;
    const State x1 = detail::ei_update(x, r * h, d0, {}, {});
    const State d1 = denoise(std::span<const double>(x1), sigma_cur * std::exp(-r * h));
    return detail::ei_update(x, h, d1, {}, {});
  }
  const double r1 = 1.0 / 3.0;
  const double r2 = 2.0 / 3.0;
  const State x1 = detail::ei_update(x, r1 * h, d0, {}, {});
  const State d1 = denoise(std::span<const double>(x1), sigma_cur * std::exp(-r1 * h));
  const State x2 = detail::ei_update(x, r2 * h, d0, detail::difference(d1, d0, 1.0 / (r1 * h)), {});
  const State d2 = denoise(std::span<const double>(x2), sigma_cur * std::exp(-r2 * h));
  return detail::ei_update(x, h, d0, detail::difference(d2, d0, 1.0 / (r2 * h)), {});
}

/// Previous denoiser outputs for the multistep solvers, newest first.
struct DenoiserHistory {
  struct Entry {
    double lambda;
    State denoised;
  };
  std::deque<Entry> entries;
  std::size_t capacity = 3;

  void push(double sigma, State d) {
    entries.push_front({-std::log(sigma), std::move(d)});
    while (entries.size() > capacity) entries.pop_back();
  }
};

/// Multistep exponential integrator. `history` must already hold D(x; sigma_cur)
/// as its newest entry; older entries supply backward differences in lambda.
/// The effective order is min(order, history size), so the first step is
/// first order and the second at most second order.
inline State dpm_multistep(const DenoiserHistory& history, std::span<const double> x, double sigma_next, int order) {
  if (order != 2 && order != 3) throw InvalidInput("dpm_multistep order must be 2 or 3");
  if (history.entries.empty()) throw InvalidInput("dpm_multistep: empty history");
  const auto& e0 = history.entries[0];
  const double sigma_cur = std::exp(-e0.lambda);
  if (sigma_next == 0.0) return euler_update(x, sigma_cur, sigma_next, e0.denoised);
  const double h = -std::log(sigma_next) - e0.lambda;
  const int effective = std::min<int>(order, static_cast<int>(history.entries.size()));
  if (effective == 1) return detail::ei_update(x, h, e0.denoised, {}, {});
  const auto& e1 = history.entries[1];
  const State dd01 = detail::difference(e0.denoised, e1.denoised, 1.0 / (e0.lambda - e1.lambda));
  if (effective == 2) {
    // D0 + (h/2) D' integrated against the zeroth-order weight.
    State d = e0.denoised;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 0.5 * h * dd01[i];
    return detail::ei_update(x, h, d, {}, {});
  }

  // Quadratic Newton interpolant through the last three (lambda, D) pairs.
  const auto& e2 = history.entries[2];
  const State dd12 = detail::difference(e1.denoised, e2.denoised, 1.0 / (e1.lambda - e2.lambda));
  const State dd012 = detail::difference(dd01, dd12, 1.0 / (e0.lambda - e2.lambda));
  State first(x.size());
  State second(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    first[i] = dd01[i] + dd012[i] * (e0.lambda - e1.lambda);
    second[i] = 2.0 * dd012[i];
  }
  return detail::ei_update(x, h, e0.denoised, first, second);
}

struct TrajectoryRecord {
  std::vector<double> sigmas;
  std::vector<State> snapshots;
  std::size_t nfe = 0;
  bool keep_snapshots = false;
};

/// Integrates the probability-flow ODE from x (at schedule.values[0]) down to
/// sigma = 0 with the chosen solver. `denoise` is called as denoise(x, sigma).
template <typename DenoiseFn>
State integrate_with(DenoiseFn&& denoise, const SigmaSchedule& schedule, Solver solver, State x,
                     TrajectoryRecord* record = nullptr) {
  if (schedule.values.size() < 2) throw InvalidInput("schedule has no steps");
  DenoiserHistory history;
  auto note = [&](double sigma) {
    if (!record) return;
    record->sigmas.push_back(sigma);
    if (record->keep_snapshots) record->snapshots.push_back(x);
  };
  note(schedule.values.front());
  for (std::size_t i = 0; i + 1 < schedule.values.size(); ++i) {
    const double s_cur = schedule.values[i];
    const double s_next = schedule.values[i + 1];
    switch (solver) {
      case Solver::kEuler: x = euler_step(x, s_cur, s_next, denoise); break;
      case Solver::kHeun: x = heun_step(x, s_cur, s_next, denoise); break;
      case Solver::kDpm2S: x = dpm_singlestep(x, s_cur, s_next, 2, denoise); break;
      case Solver::kDpm3S: x = dpm_singlestep(x, s_cur, s_next, 3, denoise); break;
      case Solver::kDpm2M:
      case Solver::kDpm3M: {
        history.push(s_cur, denoise(std::span<const double>(x), s_cur));
        x = dpm_multistep(history, x, s_next, solver == Solver::kDpm2M ? 2 : 3);
        break;
      }
    }
    note(s_next);
  }
  return x;
}

/// Runs a full trajectory with guidance and thresholding applied to every
/// model evaluation; fills `record->nfe` with the number of model calls.
inline State integrate(const Denoiser& model, const SigmaSchedule& schedule, const SamplerConfig& config, State x,
                       Condition cond, TrajectoryRecord* record = nullptr) {
  config.validate();
  GuidedDenoiser guided(model, cond, config.cfg_scale, config.threshold_quantile);
  auto fn = [&guided](std::span<const double> v, double sigma) { return guided(v, sigma); };
  State out = integrate_with(fn, schedule, config.solver, std::move(x), record);
  if (record) record->nfe = guided.nfe();
  return out;
}

/// Draws x ~ Normal(0, sigma_max^2 I) of dimension `dim` and integrates it.
inline State sample(const Denoiser& model, std::size_t dim, const SigmaSchedule& schedule, const SamplerConfig& config,
                    Condition cond, Rng& rng, TrajectoryRecord* record = nullptr) {
  std::normal_distribution<double> normal(0.0, schedule.values.front());
  State x(dim);
  for (double& v : x) v = normal(rng);
  return integrate(model, schedule, config, std::move(x), cond, record);
}

}  // namespace edmsound
