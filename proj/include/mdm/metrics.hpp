#ifndef MDM_METRICS_HPP
#define MDM_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdm/error.hpp"
#include "mdm/matrix_io.hpp"
#include "mdm/rng.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// plain class-score function of an image; metrics are model-agnostic
using ScoreFn = std::function<double(const Tensor&)>;

struct SaliencyMap {
  enum class Source { Mdm, Random, External };
  Tensor values;  // [H,W], nonnegative, higher = more important
  Source source = Source::External;
};

inline void validate_saliency(const SaliencyMap& s) {
  check_shape(s.values.rank() == 2, "saliency map must be 2-d");
  s.values.ensure_finite("saliency map");
  for (double v : s.values.data()) {
    check_value(v >= 0.0, "saliency values must be nonnegative");
  }
}

namespace detail {

// pixels kept when dropping the bottom q percent: ceil((1-q/100)*n)
inline std::size_t keep_count(std::size_t n, double q) {
  const double frac = 1.0 - q / 100.0;
  const auto k = static_cast<std::size_t>(
      std::ceil(frac * static_cast<double>(n) - 1e-12));
  return std::max<std::size_t>(1, std::min(n, k));
}

// value of the keep_count-th largest element; ties at this value are all
// retained by the >= comparisons below
inline double percentile_threshold(const Tensor& s, double q) {
  std::vector<double> sorted(s.data());
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  return sorted[keep_count(s.size(), q) - 1];
}

// spatial pixel order by descending saliency, ties broken by index so the
// ordering is deterministic
inline std::vector<std::size_t> saliency_order(const Tensor& s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&s](std::size_t a, std::size_t b) {
    return s[a] > s[b];
  });
  return idx;
}

}  // namespace detail

// keeps only the pixels whose saliency reaches the q-th percentile value,
// zeroing the rest across all channels
inline Tensor explained_map(const Tensor& image, const SaliencyMap& s,
                            double keep_percentile) {
  validate_saliency(s);
  check_value(keep_percentile >= 0.0 && keep_percentile < 100.0,
              "explained_map: percentile must be in [0,100)");
  check_shape(image.rank() == 3 && image.shape()[1] == s.values.shape()[0] &&
                  image.shape()[2] == s.values.shape()[1],
              "explained_map: image/saliency shape mismatch");
  const double thr = detail::percentile_threshold(s.values, keep_percentile);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.shape()[0]; ++c) {
    for (std::size_t y = 0; y < image.shape()[1]; ++y) {
      for (std::size_t x = 0; x < image.shape()[2]; ++x) {
        out.at(c, y, x) =
            s.values.at(y, x) >= thr ? image.at(c, y, x) : 0.0;
      }
    }
  }
  return out;
}

// binary mask of pixels at or above the q-th percentile saliency value
inline Tensor binary_from_percentile(const SaliencyMap& s, double q) {
  validate_saliency(s);
  check_value(q > 0.0 && q < 100.0,
              "binary_from_percentile: percentile must be in (0,100)");
  const double thr = detail::percentile_threshold(s.values, q);
  Tensor out(s.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = s.values[i] >= thr ? 1.0 : 0.0;
  }
  return out;
}

// mean of max(0, Y - O)/Y over samples, as a percentage
inline double average_drop(const ScoreFn& score,
                           const std::vector<Tensor>& images,
                           const std::vector<SaliencyMap>& saliencies,
                           double keep_percentile) {
  check_value(!images.empty() && images.size() == saliencies.size(),
              "average_drop: images and saliencies must pair up");
  double acc = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double y = score(images[i]);
    check_value(y > 0.0, "average_drop: base score must be positive");
    const double o =
        score(explained_map(images[i], saliencies[i], keep_percentile));
    acc += std::max(0.0, y - o) / y;
  }
  return acc / static_cast<double>(images.size()) * 100.0;
}

// fraction of samples whose masked-image score strictly rises
inline double average_increase(const ScoreFn& score,
                               const std::vector<Tensor>& images,
                               const std::vector<SaliencyMap>& saliencies,
                               double keep_percentile) {
  check_value(!images.empty() && images.size() == saliencies.size(),
              "average_increase: images and saliencies must pair up");
  std::size_t rises = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double y = score(images[i]);
    check_value(y > 0.0, "average_increase: base score must be positive");
    const double o =
        score(explained_map(images[i], saliencies[i], keep_percentile));
    if (o > y) ++rises;
  }
  return static_cast<double>(rises) / static_cast<double>(images.size());
}

struct Curve {
  std::vector<double> fractions;  // strictly increasing, 0 .. 1
  std::vector<double> scores;
  double auc = 0.0;
};

namespace detail {

inline double trapezoid_auc(const std::vector<double>& x,
                            const std::vector<double>& y) {
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    a += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) * 0.5;
  }
  return a;
}

// shared walk for deletion/insertion: flip pixels between the start image
// and the end image in descending saliency order, scoring each fraction
inline Curve perturbation_curve(const ScoreFn& score, const Tensor& start,
                                const Tensor& end, const SaliencyMap& s,
                                int steps) {
  check_value(steps >= 2, "curve: steps must be >= 2");
  const std::size_t n = s.values.size();
  const std::vector<std::size_t> order = saliency_order(s.values);
  Tensor cur = start;
  Curve c;
  c.fractions.reserve(steps + 1);
  c.scores.reserve(steps + 1);
  std::size_t done = 0;
  for (int i = 0; i <= steps; ++i) {
    const std::size_t target =
        (static_cast<std::size_t>(i) * n) / static_cast<std::size_t>(steps);
    for (; done < target; ++done) {
      const std::size_t px = order[done];
      const std::size_t y = px / s.values.shape()[1];
      const std::size_t x = px % s.values.shape()[1];
      for (std::size_t ch = 0; ch < cur.shape()[0]; ++ch) {
        cur.at(ch, y, x) = end.at(ch, y, x);
      }
    }
    c.fractions.push_back(static_cast<double>(i) /
                          static_cast<double>(steps));
    c.scores.push_back(score(cur));
  }
  c.auc = trapezoid_auc(c.fractions, c.scores);
  return c;
}

}  // namespace detail

// separable Gaussian blur over the spatial axes of a [C,H,W] tensor,
// clamp-padded; the RISE-style alternative curve baseline
inline Tensor gaussian_blur(const Tensor& image, double sigma) {
  check_shape(image.rank() == 3, "gaussian_blur: image must be [C,H,W]");
  check_value(sigma > 0.0, "gaussian_blur: sigma must be positive");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    norm += kernel[k + radius];
  }
  for (double& v : kernel) v /= norm;

  const long c = static_cast<long>(image.shape()[0]);
  const long h = static_cast<long>(image.shape()[1]);
  const long w = static_cast<long>(image.shape()[2]);
  Tensor tmp(image.shape()), out(image.shape());
  for (long ci = 0; ci < c; ++ci) {
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const long xx = std::clamp(x + k, 0L, w - 1);
          acc += kernel[k + radius] * image.at(ci, y, xx);
        }
        tmp.at(ci, y, x) = acc;
      }
    }
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const long yy = std::clamp(y + k, 0L, h - 1);
          acc += kernel[k + radius] * tmp.at(ci, yy, x);
        }
        out.at(ci, y, x) = acc;
      }
    }
  }
  return out;
}

// zero out pixels from the original image in descending saliency order;
// a custom baseline (e.g. gaussian_blur(image, sigma)) replaces the
// default all-zero end state
inline Curve deletion_curve(const ScoreFn& score, const Tensor& image,
                            const SaliencyMap& s, int steps = 50,
                            const Tensor* baseline = nullptr) {
  validate_saliency(s);
  check_shape(image.rank() == 3 && image.shape()[1] == s.values.shape()[0] &&
                  image.shape()[2] == s.values.shape()[1],
              "deletion_curve: image/saliency shape mismatch");
  if (baseline) {
    check_shape(baseline->same_shape(image),
                "deletion_curve: baseline shape mismatch");
  }
  return detail::perturbation_curve(
      score, image, baseline ? *baseline : Tensor::zeros(image.shape()), s,
      steps);
}

// restore pixels into the baseline (all-zero by default) in descending
// saliency order
inline Curve insertion_curve(const ScoreFn& score, const Tensor& image,
                             const SaliencyMap& s, int steps = 50,
                             const Tensor* baseline = nullptr) {
  validate_saliency(s);
  check_shape(image.rank() == 3 && image.shape()[1] == s.values.shape()[0] &&
                  image.shape()[2] == s.values.shape()[1],
              "insertion_curve: image/saliency shape mismatch");
  if (baseline) {
    check_shape(baseline->same_shape(image),
                "insertion_curve: baseline shape mismatch");
  }
  return detail::perturbation_curve(
      score, baseline ? *baseline : Tensor::zeros(image.shape()), image, s,
      steps);
}

struct OverlapScores {
  double dice = 0.0, iou = 0.0, ppv = 0.0, sensitivity = 0.0;
};

inline OverlapScores overlap_scores(const Tensor& pred, const Tensor& gt) {
  check_shape(pred.same_shape(gt), "overlap_scores: shape mismatch");
  std::size_t np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5;
    const bool g = gt[i] > 0.5;
    np += p;
    ng += g;
    ni += p && g;
  }
  check_value(ng > 0, "overlap_scores: ground truth is empty");
  OverlapScores s;
  s.dice = 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
  s.iou = static_cast<double>(ni) / static_cast<double>(np + ng - ni);
  s.ppv = np ? static_cast<double>(ni) / static_cast<double>(np) : 0.0;
  s.sensitivity = static_cast<double>(ni) / static_cast<double>(ng);
  return s;
}

inline SaliencyMap random_saliency(std::uint64_t seed, std::size_t h,
                                   std::size_t w) {
  Rng rng(seed);
  SaliencyMap s;
  s.values = Tensor({h, w});
  for (double& v : s.values.data()) v = rng.uniform();
  s.source = SaliencyMap::Source::Random;
  return s;
}

// per-image breakdown and the aggregate eight-metric report
struct ImageMetrics {
  std::string name;
  double drop_percent = 0.0;
  bool increased = false;
  double deletion_auc = 0.0;
  double insertion_auc = 0.0;
  double dice = 0.0, iou = 0.0, ppv = 0.0, sensitivity = 0.0;
};

struct MetricReport {
  double average_drop = 0.0;      // percent, [0,100]
  double average_increase = 0.0;  // fraction, [0,1]
  double deletion_auc = 0.0;
  double insertion_auc = 0.0;
  double dice = 0.0, iou = 0.0, ppv = 0.0, sensitivity = 0.0;
  std::vector<ImageMetrics> per_image;
};

inline MetricReport aggregate_metrics(std::vector<ImageMetrics> rows) {
  check_value(!rows.empty(), "aggregate_metrics: no rows");
  MetricReport r;
  for (const ImageMetrics& m : rows) {
    r.average_drop += m.drop_percent;
    r.average_increase += m.increased ? 1.0 : 0.0;
    r.deletion_auc += m.deletion_auc;
    r.insertion_auc += m.insertion_auc;
    r.dice += m.dice;
    r.iou += m.iou;
    r.ppv += m.ppv;
    r.sensitivity += m.sensitivity;
  }
  const double n = static_cast<double>(rows.size());
  r.average_drop /= n;
  r.average_increase /= n;
  r.deletion_auc /= n;
  r.insertion_auc /= n;
  r.dice /= n;
  r.iou /= n;
  r.ppv /= n;
  r.sensitivity /= n;
  r.per_image = std::move(rows);
  return r;
}

inline void write_curve_csv(const std::string& path, const Curve& c) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os << "fraction,score\n";
  for (std::size_t i = 0; i < c.fractions.size(); ++i) {
    os << detail::fmt_double(c.fractions[i]) << ','
       << detail::fmt_double(c.scores[i]) << '\n';
  }
  if (!os) throw FormatError("write failed: " + path);
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["average_drop"] = r.average_drop;
  j["average_increase"] = r.average_increase;
  j["deletion_auc"] = r.deletion_auc;
  j["insertion_auc"] = r.insertion_auc;
  j["dice"] = r.dice;
  j["iou"] = r.iou;
  j["ppv"] = r.ppv;
  j["sensitivity"] = r.sensitivity;
  j["per_image"] = nlohmann::json::array();
  for (const ImageMetrics& m : r.per_image) {
    nlohmann::json row;
    row["name"] = m.name;
    row["drop_percent"] = m.drop_percent;
    row["increased"] = m.increased;
    row["deletion_auc"] = m.deletion_auc;
    row["insertion_auc"] = m.insertion_auc;
    row["dice"] = m.dice;
    row["iou"] = m.iou;
    row["ppv"] = m.ppv;
    row["sensitivity"] = m.sensitivity;
    j["per_image"].push_back(std::move(row));
  }
  return j;
}

}  // namespace mdm

#endif  // MDM_METRICS_HPP
