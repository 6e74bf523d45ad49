#ifndef MDM_ORDERING_CHECK_HPP
#define MDM_ORDERING_CHECK_HPP

// Trained-mask ordering experiment on the additive oracle: regions with
// larger information weights must end up with larger trained mask values.
// An exhaustive grid search over coarse per-region mask levels provides an
// independent check that the loss minimizer orders the regions the same way.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mdm/masks.hpp"
#include "mdm/oracle.hpp"
#include "mdm/rng.hpp"

namespace mdm {

// nonnegative weights with pairwise margin and bounded sum, by rejection
inline std::vector<double> draw_margin_weights(Rng& rng, int count,
                                               double margin,
                                               double max_sum) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    std::vector<double> w(count);
    for (double& v : w) v = rng.uniform(0.01, 0.55);
    std::vector<double> sorted = w;
    std::sort(sorted.begin(), sorted.end());
    bool ok = std::accumulate(w.begin(), w.end(), 0.0) <= max_sum;
    for (std::size_t i = 1; ok && i < sorted.size(); ++i) {
      ok = sorted[i] - sorted[i - 1] >= margin;
    }
    if (ok) return w;
  }
  throw ValueError("weight rejection sampling failed");
}

inline double spearman_rho(const std::vector<double>& a,
                           const std::vector<double>& b) {
  check_value(a.size() == b.size() && a.size() >= 2,
              "spearman: need two equal-length vectors");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&v](std::size_t x, std::size_t y) {
                       return v[x] < v[y];
                     });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      r[idx[i]] = static_cast<double>(i);
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  double d2 = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  }
  const double n = static_cast<double>(a.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

// exhaustive minimizer of (A - sum_r w_r m_r)^2 + lambda * mean(m) over
// m_r in {0, 0.1, ..., 1.0}; first minimum in lexicographic order wins
inline std::vector<double> grid_search_minimizer(
    const std::vector<double>& weights, double lambda, int levels = 11) {
  const int r = static_cast<int>(weights.size());
  const double a = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> idx(r, 0);
  std::vector<double> best;
  double best_loss = 0.0;
  bool first = true;
  while (true) {
    double f = 0.0, mean = 0.0;
    for (int i = 0; i < r; ++i) {
      const double m = static_cast<double>(idx[i]) / (levels - 1);
      f += weights[i] * m;
      mean += m;
    }
    mean /= r;
    const double loss = (a - f) * (a - f) + lambda * mean;
    if (first || loss < best_loss - 1e-15) {
      first = false;
      best_loss = loss;
      best.assign(r, 0.0);
      for (int i = 0; i < r; ++i) {
        best[i] = static_cast<double>(idx[i]) / (levels - 1);
      }
    }
    int carry = r - 1;
    while (carry >= 0 && ++idx[carry] == levels) idx[carry--] = 0;
    if (carry < 0) break;
  }
  return best;
}

struct OrderingTrialConfig {
  std::size_t grid = 8;       // mask grid == oracle grid, regions exact
  int iterations = 200;       // mid-transit stop, before clamp saturation
  double learning_rate = 3e-3;
  double lambda_auto_scale = 0.1;
  double margin = 0.1;
  int grid_levels = 11;
};

struct OrderingTrial {
  std::vector<double> weights;
  std::vector<double> trained_means;  // region means of the trained mask
  std::vector<double> grid_minimizer;
  double lambda = 0.0;
  double rho = 0.0;          // Spearman, trained means vs weights
  bool rank_exact = false;   // rho >= 0.9 (exact order for 4 regions)
  bool grid_monotone = false;  // minimizer has no inversion vs weights
};

inline OrderingTrial run_ordering_trial(std::uint64_t seed,
                                  const OrderingTrialConfig& cfg = {}) {
  Rng rng(seed);
  OrderingTrial trial;
  trial.weights = draw_margin_weights(rng, 4, cfg.margin, 1.0);

  const std::size_t g = cfg.grid;
  AdditiveOracle oracle = make_additive_oracle(
      g, g, quadrant_partition(g, g), trial.weights);
  const ScorerFn scorer = oracle_scorer(oracle);
  const Tensor image = Tensor::full({1, g, g}, 1.0);
  const Tensor reference = reference_activation(scorer, image);

  // the same auto-scaling rule the mask trainer uses
  const double a = oracle_reference(oracle);
  const double f_half = oracle_forward_value(oracle, Tensor::full({g, g}, 0.5));
  const double lc0 = (a - f_half) * (a - f_half);
  trial.lambda = cfg.lambda_auto_scale * lc0 / 0.5;

  MaskVector mask;
  mask.rows = mask.cols = g;
  mask.d = Tensor::full({g, g}, 0.5);
  mask.lambda = trial.lambda;
  train_mask(scorer, image, reference, mask, cfg.iterations,
             cfg.learning_rate);

  const Tensor up = upsample_mask(mask, g, g);
  trial.trained_means.resize(4);
  for (std::size_t r = 0; r < 4; ++r) {
    const Rect& rc = oracle.regions[r];
    double acc = 0.0;
    for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
      for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) acc += up.at(y, x);
    }
    trial.trained_means[r] = acc / static_cast<double>(rc.cells());
  }

  trial.rho = spearman_rho(trial.trained_means, trial.weights);
  trial.rank_exact = trial.rho >= 0.9;

  trial.grid_minimizer =
      grid_search_minimizer(trial.weights, trial.lambda, cfg.grid_levels);
  trial.grid_monotone = true;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (trial.weights[i] < trial.weights[j] &&
          trial.grid_minimizer[i] > trial.grid_minimizer[j] + 1e-12) {
        trial.grid_monotone = false;
      }
    }
  }
  return trial;
}

}  // namespace mdm

#endif  // MDM_ORDERING_CHECK_HPP
