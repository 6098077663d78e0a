#include "genlora/rng.hpp"

#include <cmath>

namespace genlora {

Vector RngStream::uniform(double lo, double hi, Index n) {
  if (!(lo < hi)) {
    throw ParameterError("rng uniform: lo must be < hi");
  }
  if (n < 0) {
    throw ParameterError("rng uniform: negative count");
  }
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    out[i] = lo + (hi - lo) * next_unit();
  }
  return out;
}

Vector RngStream::normal(double mean, double std, Index n) {
  if (std < 0.0) {
    throw ParameterError("rng normal: negative std");
  }
  if (n < 0) {
    throw ParameterError("rng normal: negative count");
  }
  Vector out(n);
  if (std == 0.0) {
    out.setConstant(mean);
    // still advance the stream so sequences line up with std > 0 callers
    for (Index i = 0; i < n; i += 2) {
      next_u64();
      next_u64();
    }
    return out;
  }
  // Box-Muller, consuming two words per pair; the sine partner of the
  // final odd draw is discarded so the stream advance is shape-determined.
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (Index i = 0; i < n; i += 2) {
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    out[i] = mean + std * radius * std::cos(kTwoPi * u2);
    if (i + 1 < n) {
      out[i + 1] = mean + std * radius * std::sin(kTwoPi * u2);
    }
  }
  return out;
}

}  // namespace genlora
