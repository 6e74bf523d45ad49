#ifndef MDM_ORACLE_HPP
#define MDM_ORACLE_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/tape.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// Analytic scorer with exactly additive region contributions: the score of
// a mask m is (1/k) * sum_r w_r * mean_r(m)^q over a disjoint rectangle
// partition. Disjoint regions contribute independently (exact additivity),
// and d/dm of a region's contribution is strictly ordered by its weight for
// q >= 1 and m > 0, the two properties the trained-mask ordering argument
// needs, which real CNNs only approximate.
struct AdditiveOracle {
  std::size_t height = 0, width = 0;
  std::vector<Rect> regions;
  std::vector<double> weights;  // nonnegative, sum <= 1
  double gain = 1.0;            // k > 0; information I(Z) = k * score(Z)
  double exponent = 1.0;        // q >= 1, response shape
};

inline AdditiveOracle make_additive_oracle(std::size_t height,
                                           std::size_t width,
                                           std::vector<Rect> regions,
                                           std::vector<double> weights,
                                           double gain = 1.0,
                                           double exponent = 1.0) {
  check_value(gain > 0.0, "additive oracle: gain k must be > 0");
  check_value(exponent >= 1.0, "additive oracle: exponent q must be >= 1");
  check_value(regions.size() == weights.size(),
              "additive oracle: one weight per region required");
  detail::validate_partition(regions, height, width);
  double total = 0.0;
  for (double w : weights) {
    check_value(w >= 0.0, "additive oracle: weights must be nonnegative");
    total += w;
  }
  check_value(total <= 1.0 + 1e-12, "additive oracle: weights must sum <= 1");
  AdditiveOracle o;
  o.height = height;
  o.width = width;
  o.regions = std::move(regions);
  o.weights = std::move(weights);
  o.gain = gain;
  o.exponent = exponent;
  return o;
}

inline std::vector<Rect> quadrant_partition(std::size_t h, std::size_t w) {
  const std::size_t hh = h / 2, hw = w / 2;
  return {{0, 0, hh, hw},
          {0, hw, hh, w - hw},
          {hh, 0, h - hh, hw},
          {hh, hw, h - hh, w - hw}};
}

inline void validate_oracle_mask(const AdditiveOracle& o, const Tensor& mask) {
  check_shape(mask.shape() == Shape{o.height, o.width},
              "oracle mask shape " + shape_str(mask.shape()) +
                  " != oracle grid " + std::to_string(o.height) + "x" +
                  std::to_string(o.width));
  for (double v : mask.data()) {
    check_value(v >= -1e-9 && v <= 1.0 + 1e-9,
                "oracle mask value outside [0,1]");
  }
}

// differentiable score: (1/k) * sum_r w_r * mean_r(mask)^q
inline Var oracle_forward(Tape& t, const AdditiveOracle& o, Var mask) {
  validate_oracle_mask(o, t.value(mask));
  Var means = t.region_means(mask, o.regions);
  if (o.exponent != 1.0) means = t.pow_const(means, o.exponent);
  Var weighted =
      t.mul(means, t.constant(Tensor({o.weights.size()}, o.weights)));
  return t.scale(t.sum(weighted), 1.0 / o.gain);
}

inline double oracle_forward_value(const AdditiveOracle& o,
                                   const Tensor& mask) {
  validate_oracle_mask(o, mask);
  double acc = 0.0;
  for (std::size_t r = 0; r < o.regions.size(); ++r) {
    const Rect& rc = o.regions[r];
    double m = 0.0;
    for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
      for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) m += mask.at(y, x);
    }
    m /= static_cast<double>(rc.cells());
    acc += o.weights[r] * std::pow(m, o.exponent);
  }
  return acc / o.gain;
}

// score of the fully unmasked grid, the reference activation A^t
inline double oracle_reference(const AdditiveOracle& o) {
  double acc = 0.0;
  for (double w : o.weights) acc += w;
  return acc / o.gain;
}

}  // namespace mdm

#endif  // MDM_ORACLE_HPP
