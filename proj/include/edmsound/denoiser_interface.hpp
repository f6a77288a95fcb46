#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace edmsound {

/// Flattened diffusion state (for spectrograms: the 2 x frames x bins channel tensor).
using State = std::vector<double>;

/// Class conditioning. std::nullopt is the reserved null (unconditional) class.
using Condition = std::optional<std::size_t>;

using Rng = std::mt19937_64;

/// D(x; sigma, cond): expected clean state given a state corrupted at noise
/// level sigma. Implementations must be pure.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual State evaluate(std::span<const double> x, double sigma, Condition cond) const = 0;
};

}  // namespace edmsound
