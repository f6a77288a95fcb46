#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "edmsound/denoiser.hpp"
#include "edmsound/error.hpp"
#include "edmsound/sampler.hpp"
#include "edmsound/stats.hpp"
#include "edmsound/toy_data.hpp"

// Solver benchmark on analytic denoisers: endpoint error against a closed
// form (Gaussian) or a fine Heun reference (mixture) as a function of steps.
namespace edmsound {

/// Three-component 2-D mixture used as the default benchmark oracle.
inline std::vector<MixtureComponent> benchmark_mixture() {
  return {
      {0.3, {-0.8, 0.4}, 0.6, {}},
      {0.5, {0.8, -0.4}, 0.5, {}},
      {0.2, {0.2, 1.0}, 0.7, {}},
  };
}

struct BenchOptions {
  std::string oracle = "mixture";  // "gaussian" or "mixture"
  std::vector<Solver> solvers{kAllSolvers.begin(), kAllSolvers.end()};
  std::vector<std::size_t> steps{8, 16, 32, 64};
  std::size_t starts = 32;
  std::size_t reference_steps = 10000;
  double sigma_min = 1e-4;
  double sigma_max = 3.0;
  double rho = 7.0;
  std::uint64_t seed = 1;
};

struct BenchRow {
  Solver solver = Solver::kEuler;
  std::size_t steps = 0;
  std::size_t nfe = 0;
  /// sqrt(sum |x - x_ref|^2 / sum |x_ref|^2) over all starting points.
  double endpoint_error = 0.0;
  double wall_time_ms = 0.0;
};

class SolverBench {
 public:
  explicit SolverBench(BenchOptions options) : options_(std::move(options)) {
    if (options_.oracle == "gaussian") {
      gaussian_ = std::make_unique<GaussianOracleDenoiser>(State{0.0, 0.0}, 1.0);
    } else if (options_.oracle == "mixture") {
      mixture_ = std::make_unique<MixtureOracleDenoiser>(benchmark_mixture());
    } else {
      throw InvalidInput("unknown oracle \"" + options_.oracle + "\" (expected gaussian or mixture)");
    }
    if (options_.starts == 0) throw InvalidInput("benchmark needs at least one starting point");
    Rng rng(derive_seed(options_.seed, 0x62656e6368ull));
    std::normal_distribution<double> normal(0.0, options_.sigma_max);
    for (std::size_t k = 0; k < options_.starts; ++k) {
      State x(2);
      for (double& v : x) v = normal(rng);
      starts_.push_back(std::move(x));
    }
    const SigmaSchedule ref_schedule =
        karras_schedule(options_.reference_steps, options_.sigma_min, options_.sigma_max, options_.rho);
    for (const State& x : starts_) {
      if (gaussian_) {
        references_.push_back(gaussian_->trajectory(x, options_.sigma_max, 0.0));
      } else {
        references_.push_back(integrate_with(bind_denoiser(model(), {}), ref_schedule, Solver::kHeun, x));
      }
    }
  }

  const Denoiser& model() const {
    if (gaussian_) return *gaussian_;
    return *mixture_;
  }
  const std::vector<State>& starts() const { return starts_; }
  const std::vector<State>& references() const { return references_; }

  BenchRow run(Solver solver, std::size_t steps) const {
    const SigmaSchedule schedule = karras_schedule(steps, options_.sigma_min, options_.sigma_max, options_.rho);
    std::size_t nfe = 0;
    auto fn = [&](std::span<const double> x, double sigma) {
      ++nfe;
      return model().evaluate(x, sigma, {});
    };
    double err = 0.0;
    double norm = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t k = 0; k < starts_.size(); ++k) {
      const State y = integrate_with(fn, schedule, solver, starts_[k]);
      for (std::size_t i = 0; i < y.size(); ++i) {
        err += (y[i] - references_[k][i]) * (y[i] - references_[k][i]);
        norm += references_[k][i] * references_[k][i];
      }
    }
    const auto t1 = std::chrono::steady_clock::now();
    BenchRow row;
    row.solver = solver;
    row.steps = steps;
    row.nfe = nfe / starts_.size();
    row.endpoint_error = std::sqrt(err / norm);
    row.wall_time_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return row;
  }

  std::vector<BenchRow> run_all() const {
    std::vector<BenchRow> rows;
    for (Solver s : options_.solvers) {
      for (std::size_t n : options_.steps) rows.push_back(run(s, n));
    }
    return rows;
  }

 private:
  BenchOptions options_;
  std::unique_ptr<GaussianOracleDenoiser> gaussian_;
  std::unique_ptr<MixtureOracleDenoiser> mixture_;
  std::vector<State> starts_;
  std::vector<State> references_;
};

/// Negated least-squares slope of log(error) against log(steps) for one solver.
inline double convergence_order(const std::vector<BenchRow>& rows, Solver solver) {
  std::vector<double> lx, ly;
  for (const auto& r : rows) {
    if (r.solver != solver) continue;
    lx.push_back(std::log(static_cast<double>(r.steps)));
    ly.push_back(std::log(r.endpoint_error));
  }
  if (lx.size() < 2) throw InvalidInput("need at least two step counts to fit an order");
  return -stats::fit_slope(lx, ly);
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "solver,steps,nfe,endpoint_error,wall_time_ms\n";
  for (const auto& r : rows) {
    os << solver_name(r.solver) << ',' << r.steps << ',' << r.nfe << ',' << std::setprecision(9) << r.endpoint_error
       << ',' << std::fixed << std::setprecision(3) << r.wall_time_ms << std::defaultfloat << '\n';
  }
}

inline void write_bench_table(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << std::left << std::setw(8) << "solver" << std::right << std::setw(7) << "steps" << std::setw(7) << "nfe"
     << std::setw(14) << "error" << std::setw(12) << "time_ms" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(8) << solver_name(r.solver) << std::right << std::setw(7) << r.steps << std::setw(7)
       << r.nfe << std::setw(14) << std::scientific << std::setprecision(3) << r.endpoint_error << std::setw(12)
       << std::fixed << std::setprecision(2) << r.wall_time_ms << std::defaultfloat << '\n';
  }
}

}  // namespace edmsound
