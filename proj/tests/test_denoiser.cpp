#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/gradcheck.hpp"
#include "support.hpp"

using namespace edmsound;

namespace {

// Self-normalized importance estimate of E[x0 | x0 + sigma eps = y], with
// x0 drawn from the prior and weighted by the Gaussian likelihood.
template <typename Prior>
double monte_carlo_posterior_mean(Prior&& draw, double y, double sigma, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = draw(rng);
    const double w = std::exp(-0.5 * (y - x0) * (y - x0) / (sigma * sigma));
    num += w * x0;
    den += w;
  }
  return num / den;
}

DenoiserArch small_arch(std::size_t classes = 3) { return {6, 8, 3, classes, 4}; }

TrainableDenoiser randomized(const DenoiserArch& arch, std::uint64_t seed) {
  TrainableDenoiser m(arch, seed);
  Rng rng(seed + 100);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (double& p : m.parameters()) {
    if (p == 0.0) p = normal(rng);
  }
  return m;
}

}  // namespace

TEST(GaussianOracle, LimitsAndMonteCarloPosterior) {
  const GaussianOracleDenoiser o({0.0}, 1.0);
  EXPECT_EQ(o.evaluate(State{2.0, -0.5}, 0.0, {}), (State{2.0, -0.5}));
  EXPECT_DOUBLE_EQ(o.evaluate(State{2.0}, 1.0, {})[0], 1.0);
  const double mc = monte_carlo_posterior_mean(
      [](Rng& r) { return std::normal_distribution<double>(0.0, 1.0)(r); }, 2.0, 1.0, 1000000, 42);
  EXPECT_NEAR(mc, 1.0, 5e-3);

  const GaussianOracleDenoiser shifted({0.7}, 0.4);
  EXPECT_NEAR(shifted.evaluate(State{5.0}, 1e6, {})[0], 0.7, 1e-9);
}

TEST(GaussianOracle, PerElementMeanAndErrors) {
  const GaussianOracleDenoiser o({1.0, -1.0}, 0.5);
  const State d = o.evaluate(State{0.0, 0.0}, 0.5, {});
  EXPECT_DOUBLE_EQ(d[0], 0.5);
  EXPECT_DOUBLE_EQ(d[1], -0.5);
  EXPECT_THROW(o.evaluate(State{0.0, 0.0, 0.0}, 0.5, {}), InvalidInput);
  EXPECT_THROW(GaussianOracleDenoiser({0.0}, 0.0), InvalidInput);
}

TEST(GaussianOracle, TrajectoryFollowsClosedForm) {
  const GaussianOracleDenoiser o({0.0}, 1.0);
  const State x{3.0, -6.0};
  const State end = o.trajectory(x, 3.0, 0.0);
  EXPECT_NEAR(end[0], 3.0 / std::sqrt(10.0), 1e-15);
  EXPECT_NEAR(end[1], -6.0 / std::sqrt(10.0), 1e-15);
}

TEST(MixtureOracle, SingleComponentEqualsGaussian) {
  const MixtureOracleDenoiser mix({{1.0, {0.3, -0.2}, 0.6, {}}});
  const GaussianOracleDenoiser g({0.3, -0.2}, 0.6);
  for (double s : {0.0, 0.01, 0.5, 4.0}) {
    const State x{1.1, -2.3};
    const State a = mix.evaluate(x, s, {});
    const State b = g.evaluate(x, s, {});
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(MixtureOracle, SymmetricComponentsGiveZeroAtOrigin) {
  const MixtureOracleDenoiser mix({{0.5, {-1.0}, 0.1, {}}, {0.5, {1.0}, 0.1, {}}});
  for (double s : {0.1, 0.5, 2.0}) EXPECT_NEAR(mix.evaluate(State{0.0}, s, {})[0], 0.0, 1e-15);
}

TEST(MixtureOracle, MatchesMonteCarloPosterior) {
  const MixtureOracleDenoiser mix({{0.5, {-1.0}, 0.1, {}}, {0.5, {1.0}, 0.1, {}}});
  auto prior = [](Rng& r) {
    const double mu = std::bernoulli_distribution(0.5)(r) ? 1.0 : -1.0;
    return mu + 0.1 * std::normal_distribution<double>()(r);
  };
  const double mc = monte_carlo_posterior_mean(prior, 0.8, 0.5, 2000000, 7);
  EXPECT_NEAR(mix.evaluate(State{0.8}, 0.5, {})[0], mc, 1e-3);
}

TEST(MixtureOracle, FarFromComponentsStaysFinite) {
  const MixtureOracleDenoiser mix({{0.5, {-1.0}, 0.01, {}}, {0.5, {1.0}, 0.01, {}}});
  const double d = mix.evaluate(State{1e4}, 1e-3, {})[0];
  EXPECT_TRUE(std::isfinite(d));
  // Responsibility is all on the +1 component, so D is its Gaussian posterior mean.
  const double expected = GaussianOracleDenoiser({1.0}, 0.01).evaluate(State{1e4}, 1e-3, {})[0];
  EXPECT_NEAR(d, expected, 1e-9 * expected);
}

TEST(MixtureOracle, ClassConditionSelectsComponents) {
  const MixtureOracleDenoiser mix({{0.5, {-1.0}, 0.1, Condition{0}}, {0.5, {1.0}, 0.1, Condition{1}}});
  EXPECT_LT(mix.evaluate(State{0.0}, 1.0, Condition{0})[0], -0.0);
  EXPECT_GT(mix.evaluate(State{0.0}, 1.0, Condition{1})[0], 0.0);
  EXPECT_THROW(mix.evaluate(State{0.0}, 1.0, Condition{2}), InvalidInput);
}

TEST(MixtureOracle, WeightsAreNormalized) {
  const MixtureOracleDenoiser mix({{2.0, {0.0}, 1.0, {}}, {6.0, {1.0}, 1.0, {}}});
  EXPECT_DOUBLE_EQ(mix.components()[0].weight, 0.25);
  EXPECT_DOUBLE_EQ(mix.components()[1].weight, 0.75);
  EXPECT_THROW(MixtureOracleDenoiser({}), InvalidInput);
  EXPECT_THROW(MixtureOracleDenoiser({{0.0, {0.0}, 1.0, {}}}), InvalidInput);
}

TEST(Network, ForwardIsDeterministicAndPure) {
  const TrainableDenoiser m = randomized(small_arch(), 3);
  const State x{0.1, -0.2, 0.3, 0.0, 1.0, -1.0};
  const State a = m.forward(x, 0.25, Condition{1});
  const State b = m.forward(x, 0.25, Condition{1});
  EXPECT_EQ(a, b);
  const PreconditionedDenoiser d(m, {});
  EXPECT_EQ(d.evaluate(x, 0.3, {}), d.evaluate(x, 0.3, {}));
}

TEST(Network, NullAndClassConditioningDiffer) {
  const TrainableDenoiser m = randomized(small_arch(), 4);
  const State x(6, 0.2);
  EXPECT_NE(m.forward(x, 0.0, Condition{}), m.forward(x, 0.0, Condition{0}));
  EXPECT_NE(m.forward(x, 0.0, Condition{0}), m.forward(x, 0.0, Condition{2}));
}

TEST(Network, FreshModelOutputsZero) {
  const TrainableDenoiser m(small_arch(), 5);
  Rng rng(1);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int trial = 0; trial < 5; ++trial) {
    State x(6);
    for (double& v : x) v = normal(rng);
    for (double v : m.forward(x, normal(rng), Condition{1})) EXPECT_EQ(v, 0.0);
  }
  const PreconditionedDenoiser d(m, {});
  const State x{1, 2, 3, 4, 5, 6};
  const State out = d.evaluate(x, 0.2, {});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * x[i]);
}

TEST(Network, BadInputsRejected) {
  const TrainableDenoiser m(small_arch(), 6);
  EXPECT_THROW(m.forward(State(5, 0.0), 0.0, {}), InvalidInput);
  EXPECT_THROW(m.forward(State(6, 0.0), 0.0, Condition{3}), InvalidInput);
  TrainableDenoiser copy = m;
  TrainableDenoiser::Cache cache;
  copy.forward(State(6, 0.0), 0.0, {}, &cache);
  EXPECT_THROW(copy.backward(cache, State(5, 0.0)), InvalidInput);
  EXPECT_THROW(TrainableDenoiser::from_parameters(small_arch(), std::vector<double>(3)), InvalidInput);
}

TEST(Network, FiniteDifferenceGradients) {
  GradcheckOptions opt;
  opt.samples = 100;
  for (const auto& r : check_network_gradients(small_arch(), opt)) {
    EXPECT_LT(r.max_relative_error, 1e-4) << r.suite << " worst " << r.worst_parameter;
    EXPECT_GT(r.checked, 0u);
  }
  const GradcheckResult loss = check_loss_gradients(small_arch(), opt);
  EXPECT_LT(loss.max_relative_error, 1e-4) << loss.worst_parameter;
}

TEST(Network, ZeroOutputGradientGivesZeroGradients) {
  const TrainableDenoiser m = randomized(small_arch(), 8);
  const auto [out, cache] = net_forward(m, State(6, 0.3), 0.7, Condition{0});
  for (double g : net_backward(m, cache, State(6, 0.0))) EXPECT_EQ(g, 0.0);
}

TEST(Network, LinearLayerGradientIsOuterProduct) {
  nn::Layout layout;
  const nn::Dense d = layout.add_dense(3, 2, false);
  std::vector<double> params{0.5, -1.0, 2.0, 0.1, 0.2, 0.3};
  std::vector<double> grads(params.size(), 0.0);
  const std::vector<double> x{1.0, 2.0, -3.0};
  const std::vector<double> g{0.7, -0.4};
  std::vector<double> dx(3, 0.0);
  nn::backward(d, params, grads, x, g, dx);
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(grads[o * 3 + i], g[o] * x[i]);
  }
  // The output layer of the network is such a layer over the last activation.
  const TrainableDenoiser m = randomized(small_arch(), 9);
  const auto [out, cache] = net_forward(m, State(6, 0.1), 0.5, {});
  State og{0.1, -0.2, 0.3, 0.4, -0.5, 0.6};
  const std::vector<double> pg = net_backward(m, cache, og);
  const auto& last = cache.act.back();
  std::size_t checked = 0;
  for (std::size_t i = 0; i < pg.size(); ++i) {
    const std::string name = m.parameter_name(i);
    if (name.rfind("output.weight[", 0) != 0) continue;
    const std::size_t k = std::stoul(name.substr(14));
    EXPECT_NEAR(pg[i], og[k / last.size()] * last[k % last.size()], 1e-15);
    ++checked;
  }
  EXPECT_EQ(checked, 6 * last.size());
}

TEST(Network, ParameterNamesCoverLayout) {
  const TrainableDenoiser m(small_arch(), 1);
  EXPECT_EQ(m.parameter_name(0), "input.weight[0]");
  EXPECT_EQ(m.parameter_name(m.parameters().size() - 1), "output.bias[5]");
}

TEST(LabelDropout, ZeroKeepsAndOneDropsEveryLabel) {
  std::vector<Condition> labels;
  for (std::size_t i = 0; i < 1000; ++i) labels.push_back(Condition{i % 3});
  Rng rng(12);
  EXPECT_EQ(apply_label_dropout(labels, labels.size(), 0.0, rng), labels);
  for (const Condition& c : apply_label_dropout(labels, labels.size(), 1.0, rng)) EXPECT_FALSE(c.has_value());
  const auto some = apply_label_dropout(labels, labels.size(), 0.3, rng);
  const auto dropped = std::count_if(some.begin(), some.end(), [](const Condition& c) { return !c; });
  EXPECT_GT(dropped, 230);
  EXPECT_LT(dropped, 370);
  EXPECT_THROW(apply_label_dropout(labels, labels.size(), 1.5, rng), InvalidInput);
}

TEST(TrainStep, DecreasesLossOnFixedBatchAndIsReproducible) {
  const DenoiserArch arch = small_arch();
  std::vector<State> batch;
  std::vector<Condition> labels;
  Rng data(3);
  std::normal_distribution<double> normal(0.0, 0.2);
  for (int i = 0; i < 16; ++i) {
    State x(6);
    for (double& v : x) v = normal(data) + (i % 3) * 0.1;
    batch.push_back(x);
    labels.push_back(Condition{std::size_t(i % 3)});
  }
  auto run = [&] {
    TrainableDenoiser m(arch, 11);
    nn::Adam adam(m.parameters().size(), {1e-2});
    TrainOptions opt;
    opt.noise = {-1.0, 0.5};
    std::vector<double> losses;
    for (int k = 0; k < 200; ++k) {
      Rng rng(derive_seed(5, k));
      losses.push_back(train_step(m, batch, labels, adam, opt, rng).total);
    }
    return std::make_pair(std::vector<double>(m.parameters().begin(), m.parameters().end()), losses);
  };
  const auto [p1, l1] = run();
  const auto [p2, l2] = run();
  EXPECT_EQ(p1, p2);
  auto window_mean = [](const std::vector<double>& v, std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t i = a; i < b; ++i) s += v[i];
    return s / double(b - a);
  };
  EXPECT_LT(window_mean(l1, 150, 200), window_mean(l1, 0, 50));
}

TEST(TrainStep, RejectsMisalignedLabels) {
  TrainableDenoiser m(small_arch(), 1);
  nn::Adam adam(m.parameters().size());
  const std::vector<State> batch(2, State(6, 0.0));
  const std::vector<Condition> labels(3);
  Rng rng(1);
  EXPECT_THROW(train_step(m, batch, labels, adam, {}, rng), InvalidInput);
  EXPECT_THROW(train_step(m, std::vector<State>{}, {}, adam, {}, rng), InvalidInput);
}

TEST(TrainStep, GaussianTaskMatchesPosteriorMean) {
  const test_support::Gaussian1dResult r = test_support::train_gaussian_1d({});
  EXPECT_LT(r.relative_rms, 0.05);
  // Training progress: EMA(100) never rises more than 5% over a 500-step span.
  EXPECT_LE(test_support::worst_ema_ratio(r.ema, 500, 0), 1.05);
  EXPECT_LT(r.ema.back(), r.ema[9]);
}
