#pragma once

#include <array>
#include <vector>

#include "polypseg/image.hpp"
#include "polypseg/random.hpp"

namespace polypseg::testing {

/// Set-based definitions evaluated pixel by pixel: A is the prediction, B the
/// ground truth. Both empty scores 1; any other empty denominator scores 0.
inline std::array<double, 6> oracle_metrics(const Mask& a, const Mask& b) {
  double inter = 0, uni = 0, size_a = 0, size_b = 0, agree = 0;
  for (Index y = 0; y < a.rows(); ++y)
    for (Index x = 0; x < a.cols(); ++x) {
      const bool pa = a(y, x) != 0, pb = b(y, x) != 0;
      inter += pa && pb;
      uni += pa || pb;
      size_a += pa;
      size_b += pb;
      agree += pa == pb;
    }
  const bool both_empty = uni == 0;
  auto div = [&](double n, double d) { return d > 0 ? n / d : (both_empty ? 1.0 : 0.0); };
  const double jaccard = div(inter, uni);
  const double dice = div(2 * inter, size_a + size_b);
  const double recall = div(inter, size_b);
  const double precision = div(inter, size_a);
  const double accuracy = agree / static_cast<double>(a.size());
  double f2;
  if (both_empty) f2 = 1.0;
  else if (precision == 0 || recall == 0) f2 = 0.0;
  else f2 = 5 * precision * recall / (4 * precision + recall);
  return {jaccard, dice, recall, precision, accuracy, f2};
}

/// Random binary mask; the density itself is drawn per case, and a few
/// cases come out all-zero or all-one.
inline Mask random_mask(Rng& rng, Index h, Index w) {
  const double u = rng.uniform();
  const double density = u < 0.05 ? 0.0 : (u > 0.97 ? 1.0 : rng.uniform());
  Mask m(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) m(y, x) = rng.uniform() < density ? 1 : 0;
  return m;
}

}  // namespace polypseg::testing
