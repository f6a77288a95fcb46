#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <span>

#include "edmsound/error.hpp"

namespace edmsound {

namespace detail {
// FFTW's planner is not re-entrant; executing a finished plan is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Real-input DFT of a fixed length n (any n >= 1), unnormalized:
/// X[k] = sum_t x[t] exp(-2 pi i k t / n), k = 0 .. n/2.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    if (n == 0) throw InvalidInput("FFT length must be positive");
    real_.reset(fftw_alloc_real(n));
    spec_.reset(fftw_alloc_complex(n / 2 + 1));
    std::lock_guard lock(detail::fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_.get(), spec_.get(), FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec_.get(), real_.get(), FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// in.size() == size(), out.size() == bins().
  void forward(std::span<const double> in, std::span<std::complex<double>> out) {
    for (std::size_t i = 0; i < n_; ++i) real_.get()[i] = in[i];
    fftw_execute(forward_);
    for (std::size_t k = 0; k < bins(); ++k) out[k] = {spec_.get()[k][0], spec_.get()[k][1]};
  }

  /// Inverse of forward(), including the 1/n normalization. The imaginary
  /// parts of the DC and (for even n) Nyquist bins are ignored.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) {
    for (std::size_t k = 0; k < bins(); ++k) {
      spec_.get()[k][0] = in[k].real();
      spec_.get()[k][1] = in[k].imag();
    }
    fftw_execute(inverse_);
    const double scale = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = real_.get()[i] * scale;
  }

 private:
  struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
  };
  std::size_t n_;
  std::unique_ptr<double, FftwFree> real_;
  std::unique_ptr<fftw_complex, FftwFree> spec_;
  fftw_plan forward_{};
  fftw_plan inverse_{};
};

}  // namespace edmsound
