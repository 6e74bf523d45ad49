#ifndef MDM_MASKS_HPP
#define MDM_MASKS_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <string>
#include <utility>
#include <vector>

#include "mdm/adam.hpp"
#include "mdm/error.hpp"
#include "mdm/model.hpp"
#include "mdm/oracle.hpp"
#include "mdm/tape.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// one trainable mask grid d_i with its regularization weight
struct MaskVector {
  Tensor d;  // [rows, cols], kept in [0,1] after every optimizer step
  std::size_t rows = 0, cols = 0;
  double lambda = 0.0;
};

struct MdmConfig {
  int scale_count = 8;   // N
  int scale_base = 2;    // a_i = b_i = scale_base + i, i = 1..N
  int iterations = 300;  // C, optimizer steps per mask
  double learning_rate = 3e-3;
  double threshold_ratio = 5.0 / 27.0;  // rho; gamma = rho * N
  double blend_alpha = 0.5;
  double blend_beta = 0.3;
  // lambda resolution order: per-scale schedule, fixed value, auto-scale.
  // At desk scale (C=300 steps) an auto-scale of 2.0 is needed to polarize
  // the masks; weaker values leave the binary mask covering the whole image.
  std::vector<double> lambda_schedule;
  double lambda_fixed = -1.0;      // >= 0 enables
  double lambda_auto_scale = 2.0;  // lambda = scale * Lc0 / L1_0
  std::uint64_t seed = 0;
  bool parallel = false;

  double gamma() const { return threshold_ratio * scale_count; }

  void validate() const {
    check_value(scale_count >= 1, "config: scale_count must be >= 1");
    check_value(scale_base + 1 >= 1, "config: smallest scale below 1");
    check_value(iterations >= 1, "config: iterations must be >= 1");
    check_value(learning_rate > 0.0, "config: learning rate must be > 0");
    check_value(threshold_ratio > 0.0 && threshold_ratio < 1.0,
                "config: threshold ratio must be in (0,1)");
    check_value(blend_alpha >= 0.0 && blend_beta >= 0.0,
                "config: blend weights must be >= 0");
    check_value(lambda_schedule.empty() ||
                    lambda_schedule.size() ==
                        static_cast<std::size_t>(scale_count),
                "config: lambda schedule length != scale count");
    for (double l : lambda_schedule) {
      check_value(l >= 0.0, "config: lambda must be >= 0");
    }
  }

  // the published large-scale settings: N=27 scales of 6..32, 2000 steps,
  // fixed lambda 1e2, gamma 5
  static MdmConfig published_defaults() {
    MdmConfig c;
    c.scale_count = 27;
    c.scale_base = 5;
    c.iterations = 2000;
    c.lambda_fixed = 1e2;
    c.threshold_ratio = 5.0 / 27.0;
    return c;
  }
};

struct TrainIterRecord {
  double consistency = 0.0, l1 = 0.0, total = 0.0;
  double d_min = 0.0, d_max = 0.0;  // mask grid range after the step
  double m_min = 0.0, m_max = 0.0;  // upsampled mask range this iteration
};

struct TrainTrace {
  std::vector<TrainIterRecord> iters;
};

// scorer = the frozen model probed at t, as a function of the masked image
using ScorerFn = std::function<Var(Tape&, Var masked_image)>;

inline ScorerFn model_scorer(const ModelSpec& model,
                             const ActivationSelector& sel) {
  return [&model, sel](Tape& t, Var masked) {
    return forward_activation(t, model, masked, sel);
  };
}

// the oracle scores the [H,W] mask itself; masked images arrive as [1,H,W]
inline ScorerFn oracle_scorer(const AdditiveOracle& oracle) {
  return [&oracle](Tape& t, Var masked) {
    const Tensor& v = t.value(masked);
    Var grid = v.rank() == 3 ? t.reshape(masked, {v.shape()[1], v.shape()[2]})
                             : masked;
    return oracle_forward(t, oracle, grid);
  };
}

// reference activation A^t = f_t(X), computed once per image (no gradients)
inline Tensor reference_activation(const ScorerFn& scorer,
                                   const Tensor& image) {
  Tape t;
  return t.value(scorer(t, t.constant(image)));
}

inline std::vector<MaskVector> init_masks(const MdmConfig& cfg,
                                          std::size_t image_h,
                                          std::size_t image_w) {
  cfg.validate();
  const std::size_t largest =
      static_cast<std::size_t>(cfg.scale_base + cfg.scale_count);
  check_value(largest <= image_h && largest <= image_w,
              "config: largest mask grid " + std::to_string(largest) +
                  " exceeds image " + std::to_string(image_h) + "x" +
                  std::to_string(image_w));
  std::vector<MaskVector> masks;
  masks.reserve(cfg.scale_count);
  for (int i = 1; i <= cfg.scale_count; ++i) {
    MaskVector m;
    m.rows = m.cols = static_cast<std::size_t>(cfg.scale_base + i);
    m.d = Tensor::full({m.rows, m.cols}, 0.5);
    masks.push_back(std::move(m));
  }
  return masks;
}

// g(d): bilinear upsample to image size, then clamp to [0,1]
inline Var upsample_mask_var(Tape& t, Var d, std::size_t h, std::size_t w) {
  return t.clamp01(t.bilinear_upsample(d, h, w));
}

inline Tensor upsample_mask(const MaskVector& m, std::size_t h,
                            std::size_t w) {
  Tape t;
  return t.value(upsample_mask_var(t, t.constant(m.d), h, w));
}

// Trains one mask vector in place for `iterations` Adam steps:
// upsample, mask the image, penalize activation drift plus the mean
// absolute mask value, step on d only, clamp d back to [0,1].
inline TrainTrace train_mask(const ScorerFn& scorer, const Tensor& image,
                             const Tensor& reference, MaskVector& mask,
                             int iterations, double learning_rate) {
  check_value(iterations >= 1, "train_mask: iterations must be >= 1");
  const std::size_t h = image.shape()[1], w = image.shape()[2];
  TrainTrace trace;
  trace.iters.reserve(iterations);
  AdamState adam(learning_rate);
  adam.register_param(mask.d.shape());
  for (int it = 0; it < iterations; ++it) {
    Tape t;
    Var d = t.leaf(mask.d, true);
    Var m = upsample_mask_var(t, d, h, w);
    Var masked = t.apply_mask(t.constant(image), m);
    Var act = scorer(t, masked);
    Var consistency = t.sq_l2(t.constant(reference), act);
    Var l1 = t.l1_mean(d);
    Var loss = t.add(consistency, t.scale(l1, mask.lambda));

    TrainIterRecord rec;
    rec.consistency = t.value(consistency).item();
    rec.l1 = t.value(l1).item();
    rec.total = t.value(loss).item();
    if (!std::isfinite(rec.total)) {
      throw TrainingError("mask training diverged: non-finite loss at "
                          "iteration " +
                          std::to_string(it));
    }
    const Tensor& mval = t.value(m);
    rec.m_min = mval.min_value();
    rec.m_max = mval.max_value();

    t.backward(loss);
    adam.step(mask.d, t.grad(d));
    for (double& v : mask.d.data()) {
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    rec.d_min = mask.d.min_value();
    rec.d_max = mask.d.max_value();
    trace.iters.push_back(rec);
  }
  return trace;
}

struct FuseResult {
  Tensor fused;   // M_F = sum of per-scale masks, range [0, N]
  Tensor binary;  // M_b = {M_F >= gamma}
  Tensor heat;    // M_h = divide-by-max of M_b * M_F over retained cells
  bool degenerate = false;  // nothing cleared the threshold
};

// sum in index order, threshold at gamma (ties
// retained), normalize the retained part so its peak is exactly 1
inline FuseResult fuse_masks(const std::vector<Tensor>& masks, double gamma) {
  check_value(!masks.empty(), "fuse_masks: empty mask list");
  const double n = static_cast<double>(masks.size());
  check_value(gamma > 0.0 && gamma < n,
              "fuse_masks: gamma must lie in (0, N)");
  const Shape shape = masks.front().shape();
  FuseResult r;
  r.fused = Tensor::zeros(shape);
  for (const Tensor& m : masks) {
    check_shape(m.shape() == shape, "fuse_masks: mask shape mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) r.fused[i] += m[i];
  }
  r.binary = Tensor::zeros(shape);
  double retained_max = 0.0;
  for (std::size_t i = 0; i < r.fused.size(); ++i) {
    if (r.fused[i] >= gamma) {
      r.binary[i] = 1.0;
      retained_max = std::max(retained_max, r.fused[i]);
    }
  }
  r.heat = Tensor::zeros(shape);
  if (retained_max > 0.0) {
    for (std::size_t i = 0; i < r.fused.size(); ++i) {
      if (r.binary[i] == 1.0) r.heat[i] = r.fused[i] / retained_max;
    }
  } else {
    r.degenerate = true;
  }
  return r;
}

// activation heatmap image: alpha*X + beta*M_h, M_h broadcast over
// channels; may exceed [0,1], clipping happens at render time only
inline Tensor heatmap_image(const Tensor& image, const Tensor& heat,
                            double alpha, double beta) {
  check_shape(image.rank() == 3 && heat.rank() == 2 &&
                  image.shape()[1] == heat.shape()[0] &&
                  image.shape()[2] == heat.shape()[1],
              "heatmap_image: image " + shape_str(image.shape()) +
                  " vs heat " + shape_str(heat.shape()));
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.shape()[0]; ++c) {
    for (std::size_t y = 0; y < heat.shape()[0]; ++y) {
      for (std::size_t x = 0; x < heat.shape()[1]; ++x) {
        out.at(c, y, x) = alpha * image.at(c, y, x) + beta * heat.at(y, x);
      }
    }
  }
  return out;
}

// binary mask image: M_b * X, zero outside the decision region
inline Tensor binary_mask_image(const Tensor& image, const Tensor& binary) {
  check_shape(image.rank() == 3 && binary.rank() == 2 &&
                  image.shape()[1] == binary.shape()[0] &&
                  image.shape()[2] == binary.shape()[1],
              "binary_mask_image: image " + shape_str(image.shape()) +
                  " vs mask " + shape_str(binary.shape()));
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.shape()[0]; ++c) {
    for (std::size_t y = 0; y < binary.shape()[0]; ++y) {
      for (std::size_t x = 0; x < binary.shape()[1]; ++x) {
        out.at(c, y, x) = image.at(c, y, x) * binary.at(y, x);
      }
    }
  }
  return out;
}

struct FusedExplanation {
  Tensor fused;               // M_F
  Tensor binary;              // M_b
  Tensor heat;                // M_h
  Tensor heatmap_image;       // alpha*X + beta*M_h
  Tensor binary_mask_image;   // M_b * X
  std::vector<Tensor> per_scale;  // upsampled trained masks M_i
  std::vector<MaskVector> masks;  // trained grids d_i
  std::vector<TrainTrace> traces;
  double gamma = 0.0;
  bool degenerate = false;
};

namespace detail {

inline std::vector<double> resolve_lambdas(const MdmConfig& cfg,
                                           const ScorerFn& scorer,
                                           const Tensor& image,
                                           const Tensor& reference) {
  if (!cfg.lambda_schedule.empty()) return cfg.lambda_schedule;
  if (cfg.lambda_fixed >= 0.0) {
    return std::vector<double>(cfg.scale_count, cfg.lambda_fixed);
  }
  // auto-scale: all masks start at the constant 0.5 field, so the initial
  // consistency loss is scale-independent and one probe fixes lambda
  Tape t;
  Var half = t.constant(Tensor::full(
      {image.shape()[1], image.shape()[2]}, 0.5));
  Var act = scorer(t, t.apply_mask(t.constant(image), half));
  const double lc0 = t.value(t.sq_l2(t.constant(reference), act)).item();
  const double l10 = 0.5;  // l1_mean of the 0.5-initialized grid
  return std::vector<double>(cfg.scale_count,
                             cfg.lambda_auto_scale * lc0 / l10);
}

}  // namespace detail

// Full pipeline against an arbitrary scorer: train all N scales from the
// shared reference activation, fuse in index order, compose the output
// images. Deterministic for a fixed config; per-scale problems are
// independent, so cfg.parallel only changes wall time.
inline FusedExplanation run_mdm_scorer(const ScorerFn& scorer,
                                       const Tensor& image,
                                       const MdmConfig& cfg) {
  cfg.validate();
  check_shape(image.rank() == 3, "run_mdm: image must be [C,H,W]");
  const std::size_t h = image.shape()[1], w = image.shape()[2];

  const Tensor reference = reference_activation(scorer, image);
  std::vector<MaskVector> masks = init_masks(cfg, h, w);
  const std::vector<double> lambdas =
      detail::resolve_lambdas(cfg, scorer, image, reference);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    masks[i].lambda = lambdas[i];
  }

  std::vector<TrainTrace> traces(masks.size());
  auto train_one = [&](std::size_t i) {
    return train_mask(scorer, image, reference, masks[i], cfg.iterations,
                      cfg.learning_rate);
  };
  if (cfg.parallel) {
    std::vector<std::future<TrainTrace>> futs;
    futs.reserve(masks.size());
    for (std::size_t i = 0; i < masks.size(); ++i) {
      futs.push_back(std::async(std::launch::async, train_one, i));
    }
    for (std::size_t i = 0; i < masks.size(); ++i) {
      traces[i] = futs[i].get();  // joined in index order
    }
  } else {
    for (std::size_t i = 0; i < masks.size(); ++i) traces[i] = train_one(i);
  }

  FusedExplanation ex;
  ex.per_scale.reserve(masks.size());
  for (const MaskVector& m : masks) {
    ex.per_scale.push_back(upsample_mask(m, h, w));
  }
  FuseResult fr = fuse_masks(ex.per_scale, cfg.gamma());
  ex.fused = std::move(fr.fused);
  ex.binary = std::move(fr.binary);
  ex.heat = std::move(fr.heat);
  ex.degenerate = fr.degenerate;
  ex.gamma = cfg.gamma();
  ex.heatmap_image =
      heatmap_image(image, ex.heat, cfg.blend_alpha, cfg.blend_beta);
  ex.binary_mask_image = binary_mask_image(image, ex.binary);
  ex.masks = std::move(masks);
  ex.traces = std::move(traces);
  return ex;
}

inline FusedExplanation run_mdm(const ModelSpec& model, const Tensor& image,
                                const ActivationSelector& sel,
                                const MdmConfig& cfg) {
  return run_mdm_scorer(model_scorer(model, sel), image, cfg);
}

}  // namespace mdm

#endif  // MDM_MASKS_HPP
