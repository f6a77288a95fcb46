#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/edm.hpp"
#include "edmsound/stats.hpp"

using namespace edmsound;

namespace {

std::vector<double> sigma_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 60; ++i) g.push_back(std::pow(10.0, -5.0 + 8.0 * i / 60.0));
  return g;
}

class ZeroDenoiser final : public Denoiser {
 public:
  State evaluate(std::span<const double> x, double, Condition) const override { return State(x.size(), 0.0); }
};

class IdentityDenoiser final : public Denoiser {
 public:
  State evaluate(std::span<const double> x, double, Condition) const override { return State(x.begin(), x.end()); }
};

// Knows the clean batch and returns it: the ideal denoiser for that batch.
class CleanDenoiser final : public Denoiser {
 public:
  explicit CleanDenoiser(State clean) : clean_(std::move(clean)) {}
  State evaluate(std::span<const double>, double, Condition) const override { return clean_; }

 private:
  State clean_;
};

}  // namespace

TEST(Preconditioner, ScalarExamples) {
  const Preconditioner pre;
  EXPECT_EQ(pre.c_noise(1.0), 0.0);
  EXPECT_DOUBLE_EQ(pre.c_skip(0.2), 0.5);
  // c_out(sigma_d) = sigma_d^2 / (sigma_d sqrt 2) = sigma_d / sqrt 2.
  EXPECT_NEAR(pre.c_out(0.2), 0.2 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(pre.c_out(0.2), 0.141421, 1e-6);
  EXPECT_NEAR(pre.c_noise(std::exp(4.0)), 1.0, 1e-15);
}

TEST(Preconditioner, IdentitiesHoldOverSigmaGrid) {
  for (double sd : {0.2, 0.5, 1.0}) {
    const Preconditioner pre{sd};
    for (double s : sigma_grid()) {
      const double c_out = pre.c_out(s);
      const double c_in = pre.c_in(s);
      EXPECT_NEAR(pre.loss_weight(s) * c_out * c_out, 1.0, 1e-12) << s;
      EXPECT_NEAR(c_in * c_in * (sd * sd + s * s), 1.0, 1e-12) << s;
    }
  }
}

TEST(Preconditioner, CSkipDecreasesFromOneToZero) {
  const Preconditioner pre;
  EXPECT_EQ(pre.c_skip(0.0), 1.0);
  EXPECT_LT(pre.c_skip(1e8), 1e-15);
  const auto g = sigma_grid();
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(pre.c_skip(g[i]), pre.c_skip(g[i - 1]));
}

TEST(Preconditioner, NoiseInputRejectsNonPositiveSigma) {
  const Preconditioner pre;
  EXPECT_THROW(pre.c_noise(0.0), DomainError);
  EXPECT_THROW(pre.c_noise(-1.0), DomainError);
}

TEST(Preconditioner, UnitInputVarianceMonteCarlo) {
  const Preconditioner pre;
  Rng rng(5);
  std::normal_distribution<double> normal;
  for (double s : {0.01, 0.2, 1.0, 3.0}) {
    const double c_in = pre.c_in(s);
    double sum = 0.0, sq = 0.0;
    const int n = 400000;
    for (int i = 0; i < n; ++i) {
      const double v = c_in * (pre.sigma_data * normal(rng) + s * normal(rng));
      sum += v;
      sq += v * v;
    }
    const double var = sq / n - (sum / n) * (sum / n);
    EXPECT_NEAR(var, 1.0, 0.02) << s;
  }
}

TEST(PreconditionDenoise, ZeroNetworkGivesSkipTerm) {
  const Preconditioner pre;
  const State x{0.3, -1.2, 2.0};
  auto zero = [](std::span<const double> in, double, Condition) { return State(in.size(), 0.0); };
  for (double s : {0.01, 0.2, 5.0}) {
    const State d = precondition_denoise(pre, zero, x, s, {});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(d[i], pre.c_skip(s) * x[i]);
  }
}

TEST(PreconditionDenoise, LargeSigmaLimit) {
  const Preconditioner pre;
  const State x{0.3, -1.2};
  auto net = [](std::span<const double> in, double, Condition) {
    State out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(1e5 * in[i]) + 0.5;
    return out;
  };
  const double s = 1e6;
  const State d = precondition_denoise(pre, net, x, s, {});
  State scaled(x);
  for (double& v : scaled) v *= pre.c_in(s);
  const State f = net(scaled, 0.0, {});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(d[i], pre.c_out(s) * f[i], 1e-6);
}

TEST(PreconditionDenoise, LinearInNetworkOutput) {
  const Preconditioner pre;
  const State x{0.7, -0.1};
  const State f1{1.0, 2.0}, f2{-0.5, 3.0};
  auto make = [](State f) { return [f](std::span<const double>, double, Condition) { return f; }; };
  const double s = 0.4;
  const State d1 = precondition_denoise(pre, make(f1), x, s, {});
  const State d2 = precondition_denoise(pre, make(f2), x, s, {});
  const State d12 = precondition_denoise(pre, make({f1[0] + f2[0], f1[1] + f2[1]}), x, s, {});
  const State d0 = precondition_denoise(pre, make({0.0, 0.0}), x, s, {});
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(d12[i] - d0[i], (d1[i] - d0[i]) + (d2[i] - d0[i]), 1e-14);
}

TEST(PreconditionDenoise, NonFiniteOutputReportsSigma) {
  const Preconditioner pre;
  auto bad = [](std::span<const double> in, double, Condition) { return State(in.size(), std::nan("")); };
  try {
    precondition_denoise(pre, bad, State{1.0}, 0.25, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("sigma=0.25"), std::string::npos) << e.what();
  }
}

TEST(Score, Examples) {
  const State x{2.0, 5.0};
  const State s0 = score_from_denoiser(x, 0.7, x);
  for (double v : s0) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(score_from_denoiser(State{2.0}, 1.0, State{1.0})[0], -1.0);
  EXPECT_THROW(score_from_denoiser(x, 0.0, x), DomainError);
}

TEST(Score, OracleScoreMatchesAnalyticGaussianScore) {
  // Tweedie: (D - x) / sigma^2 = -(x - mu) / (s^2 + sigma^2).
  const double mu = 0.4, sc = 0.7;
  const GaussianOracleDenoiser oracle({mu}, sc);
  for (double s : {0.01, 0.3, 2.0}) {
    for (double x : {-2.0, 0.1, 3.5}) {
      const State d = oracle.evaluate(State{x}, s, {});
      const double got = score_from_denoiser(State{x}, s, d)[0];
      const double want = -(x - mu) / (sc * sc + s * s);
      EXPECT_NEAR(got, want, 1e-9 * std::abs(want)) << s << " " << x;
    }
  }
}

TEST(SampleSigma, LogNormalMomentsOverMillionDraws) {
  Rng rng(1234);
  std::vector<double> s = sample_sigma(rng, 1000000);
  std::vector<double> logs(s.size());
  std::transform(s.begin(), s.end(), logs.begin(), [](double v) { return std::log(v); });
  EXPECT_NEAR(stats::mean(logs), -3.0, 0.01);
  EXPECT_NEAR(stats::stddev(logs), 1.0, 0.01);
  const double median = stats::quantile_linear(std::move(s), 0.5);
  EXPECT_NEAR(median / std::exp(-3.0), 1.0, 0.02);
}

TEST(SampleSigma, FixedSeedIsBitReproducible) {
  Rng a(99), b(99);
  EXPECT_EQ(sample_sigma(a, 1000), sample_sigma(b, 1000));
  Rng c(98);
  EXPECT_NE(sample_sigma(a, 10), sample_sigma(c, 10));
}

TEST(SampleSigma, InvalidArguments) {
  Rng rng(1);
  EXPECT_THROW(sample_sigma(rng, 0), InvalidInput);
  EXPECT_THROW(sample_sigma(rng, 5, NoiseLevelDistribution{-3.0, 0.0}), InvalidInput);
}

TEST(DsmLoss, IdealDenoiserHasZeroLoss) {
  const State x{0.1, -0.3, 0.25};
  const std::vector<State> batch{x};
  Rng rng(3);
  const LossReport r = dsm_loss(CleanDenoiser(x), batch, rng);
  EXPECT_EQ(r.total, 0.0);
  ASSERT_EQ(r.per_item.size(), 1u);
  ASSERT_EQ(r.sigma_draws.size(), 1u);
}

TEST(DsmLoss, ZeroDenoiserAtFixedSigma) {
  const Preconditioner pre;
  const State x{0.1, -0.3, 0.25, 0.5};
  const std::vector<State> batch{x};
  const std::vector<double> sigmas{0.37};
  Rng rng(3);
  const LossReport r = dsm_loss_at(ZeroDenoiser(), batch, sigmas, rng, pre);
  double msq = 0.0;
  for (double v : x) msq += v * v / x.size();
  EXPECT_NEAR(r.total, pre.loss_weight(0.37) * msq, 1e-14);
}

TEST(DsmLoss, IdentityDenoiserExpectedLoss) {
  const Preconditioner pre;
  for (double s : {0.05, 0.2, 1.0}) {
    const std::vector<State> batch(50, State(200, 0.1));
    const std::vector<double> sigmas(batch.size(), s);
    Rng rng(17);
    const LossReport r = dsm_loss_at(IdentityDenoiser(), batch, sigmas, rng, pre);
    const double expected = (pre.sigma_data * pre.sigma_data + s * s) / (pre.sigma_data * pre.sigma_data);
    EXPECT_NEAR(r.total / expected, 1.0, 0.02) << s;
  }
}

TEST(DsmLoss, ReportIsMeanOfNonNegativeItems) {
  const std::vector<State> batch{State{0.1, 0.2}, State{-0.3, 0.0}, State{0.5, 0.5}};
  Rng rng(8);
  const LossReport r = dsm_loss(IdentityDenoiser(), batch, rng);
  EXPECT_EQ(r.per_item.size(), 3u);
  EXPECT_EQ(r.sigma_draws.size(), 3u);
  EXPECT_NEAR(r.total, stats::mean(r.per_item), 1e-15);
  for (double v : r.per_item) EXPECT_GE(v, 0.0);
}

TEST(DsmLoss, NonFiniteLossNamesSigma) {
  class NanDenoiser final : public Denoiser {
   public:
    State evaluate(std::span<const double> x, double, Condition) const override {
      return State(x.size(), std::numeric_limits<double>::infinity());
    }
  };
  const std::vector<State> batch{State{0.1}};
  const std::vector<double> sigmas{0.5};
  Rng rng(1);
  EXPECT_THROW(dsm_loss_at(NanDenoiser(), batch, sigmas, rng), NumericError);
  EXPECT_THROW(dsm_loss(NanDenoiser(), std::vector<State>{}, rng), InvalidInput);
}
