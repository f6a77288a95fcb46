#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "edmsound/error.hpp"

// Minimal dense-layer machinery over a flat parameter vector. Layers are views
// (offsets) into that vector so optimizers and checkpoints see one contiguous
// store in declaration order.
namespace edmsound::nn {

/// tanh approximation of GELU.
inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

/// Weight matrix (row-major, out x in) optionally followed by a bias vector.
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
  bool has_bias = true;

  std::size_t size() const { return in * out + (has_bias ? out : 0); }
};

class Layout {
 public:
  Dense add_dense(std::size_t in, std::size_t out, bool bias = true) {
    Dense d{in, out, total_, total_ + in * out, bias};
    total_ += d.size();
    return d;
  }
  std::size_t total() const { return total_; }

 private:
  std::size_t total_ = 0;
};

/// y = W x (+ b).
inline void forward(const Dense& d, std::span<const double> params, std::span<const double> x, std::span<double> y) {
  const double* w = params.data() + d.weight_offset;
  for (std::size_t o = 0; o < d.out; ++o) {
    const double* row = w + o * d.in;
    double acc = d.has_bias ? params[d.bias_offset + o] : 0.0;
    for (std::size_t i = 0; i < d.in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

/// Accumulates dL/dW and dL/db into `grads`; adds W^T dy into `dx` when it is non-empty.
inline void backward(const Dense& d, std::span<const double> params, std::span<double> grads,
                     std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
  const double* w = params.data() + d.weight_offset;
  double* gw = grads.data() + d.weight_offset;
  for (std::size_t o = 0; o < d.out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    double* grow = gw + o * d.in;
    for (std::size_t i = 0; i < d.in; ++i) grow[i] += g * x[i];
    if (d.has_bias) grads[d.bias_offset + o] += g;
    if (!dx.empty()) {
      const double* row = w + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) dx[i] += row[i] * g;
    }
  }
}

/// Gaussian weights with standard deviation gain / sqrt(fan_in); zero bias.
inline void init_dense(const Dense& d, std::span<double> params, std::mt19937_64& rng, double gain = 1.0) {
  std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(d.in)));
  for (std::size_t i = 0; i < d.in * d.out; ++i) params[d.weight_offset + i] = normal(rng);
  if (d.has_bias) {
    for (std::size_t o = 0; o < d.out; ++o) params[d.bias_offset + o] = 0.0;
  }
}

inline void zero_dense(const Dense& d, std::span<double> params) {
  for (std::size_t i = 0; i < d.size(); ++i) params[d.weight_offset + i] = 0.0;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction and no weight decay.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t parameter_count, AdamConfig config = {})
      : config_(config), m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw InvalidInput("Adam: parameter count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
      const double m_hat = m_[i] / c1;
      const double v_hat = v_[i] / c2;
      params[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }

  /// Rebuilds an optimizer mid-run from saved moments and step count.
  static Adam restore(AdamConfig config, std::vector<double> m, std::vector<double> v, long steps) {
    if (m.size() != v.size() || steps < 0) throw InvalidInput("Adam: inconsistent saved state");
    Adam a;
    a.config_ = config;
    a.m_ = std::move(m);
    a.v_ = std::move(v);
    a.t_ = steps;
    return a;
  }

  long steps() const { return t_; }
  std::span<const double> first_moment() const { return m_; }
  std::span<const double> second_moment() const { return v_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace edmsound::nn
