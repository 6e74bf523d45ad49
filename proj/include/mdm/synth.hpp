#ifndef MDM_SYNTH_HPP
#define MDM_SYNTH_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/rng.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// one desk-scale labelled image: dim noisy background plus a bright
// Gaussian blob whose quadrant decides the class (K = 4)
struct SynthSample {
  Tensor image;    // [1,H,W], values in [0,1]
  int label = 0;   // 0 TL, 1 TR, 2 BL, 3 BR
  Tensor gt_mask;  // [H,W] binary, blob support at half peak (FWHM)
};

inline std::vector<SynthSample> synth_dataset(std::uint64_t seed,
                                              std::size_t n,
                                              std::size_t size) {
  check_value(n >= 1, "synth_dataset: n must be >= 1");
  check_value(size >= 16, "synth_dataset: size must be >= 16");
  Rng rng(seed);
  std::vector<SynthSample> out;
  out.reserve(n);
  const std::size_t half = size / 2;
  for (std::size_t s = 0; s < n; ++s) {
    SynthSample sample;
    sample.image = Tensor({1, size, size});
    sample.gt_mask = Tensor({size, size});
    for (double& v : sample.image.data()) v = rng.uniform(0.0, 0.2);

    sample.label = rng.uniform_int(0, 3);
    const std::size_t qr = static_cast<std::size_t>(sample.label) / 2;
    const std::size_t qc = static_cast<std::size_t>(sample.label) % 2;
    double sigma = rng.uniform(static_cast<double>(size) / 12.0,
                               static_cast<double>(size) / 7.0);
    if (sigma < 1.2) sigma = 1.2;
    const double margin = std::ceil(sigma);
    const double lo_y = static_cast<double>(qr * half) + margin;
    const double hi_y = static_cast<double>(qr * half + half) - margin;
    const double lo_x = static_cast<double>(qc * half) + margin;
    const double hi_x = static_cast<double>(qc * half + half) - margin;
    const double cy = rng.uniform(lo_y, hi_y);
    const double cx = rng.uniform(lo_x, hi_x);
    const double peak = rng.uniform(0.8, 1.0);

    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double blob = peak * std::exp(-(dy * dy + dx * dx) * inv2s2);
        double& px = sample.image.at(0, y, x);
        px = std::min(1.0, px + blob);
        sample.gt_mask.at(y, x) = blob >= 0.5 * peak ? 1.0 : 0.0;
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace mdm

#endif  // MDM_SYNTH_HPP
