#ifndef MDM_MODEL_HPP
#define MDM_MODEL_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mdm/adam.hpp"
#include "mdm/error.hpp"
#include "mdm/rng.hpp"
#include "mdm/synth.hpp"
#include "mdm/tape.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

enum class LayerKind { Conv2d, Relu, AvgPool, GlobalAvgPool, Linear };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int out_channels = 0, kernel = 0, stride = 1, padding = 0;  // conv
  int window = 0, pool_stride = 0;                            // avg pool
  int out_features = 0;                                       // linear

  static LayerSpec conv(int out_channels, int kernel, int stride = 1,
                        int padding = 0) {
    LayerSpec l;
    l.kind = LayerKind::Conv2d;
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec avg_pool(int window, int stride = 0) {
    LayerSpec l;
    l.kind = LayerKind::AvgPool;
    l.window = window;
    l.pool_stride = stride == 0 ? window : stride;
    return l;
  }
  static LayerSpec global_avg_pool() {
    LayerSpec l;
    l.kind = LayerKind::GlobalAvgPool;
    return l;
  }
  static LayerSpec linear(int out_features) {
    LayerSpec l;
    l.kind = LayerKind::Linear;
    l.out_features = out_features;
    return l;
  }
};

// Frozen differentiable scorer: an ordered layer stack plus its parameter
// tensors (conv: kernels; linear: weight then bias). Immutable after
// training; parameters are recorded as constants during explanation so no
// gradient can accumulate into them.
struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;
  std::array<std::size_t, 3> input_shape{};  // C,H,W
  std::size_t output_size = 0;

  std::size_t param_index_of_layer(std::size_t layer) const {
    std::size_t p = 0;
    for (std::size_t i = 0; i < layer; ++i) {
      if (layers[i].kind == LayerKind::Conv2d) p += 1;
      if (layers[i].kind == LayerKind::Linear) p += 2;
    }
    return p;
  }
};

namespace detail {

// walks the layer stack symbolically and yields each layer's output shape
inline std::vector<Shape> layer_output_shapes(
    const std::vector<LayerSpec>& layers,
    const std::array<std::size_t, 3>& input_shape) {
  std::vector<Shape> shapes;
  Shape cur = {input_shape[0], input_shape[1], input_shape[2]};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d: {
        check_shape(cur.size() == 3, "layer " + std::to_string(i) +
                                         ": conv2d needs a [C,H,W] input");
        const std::size_t k = static_cast<std::size_t>(l.kernel);
        check_shape(k <= cur[1] + 2 * l.padding && k <= cur[2] + 2 * l.padding,
                    "layer " + std::to_string(i) + ": kernel too large");
        cur = {static_cast<std::size_t>(l.out_channels),
               (cur[1] + 2 * l.padding - k) / l.stride + 1,
               (cur[2] + 2 * l.padding - k) / l.stride + 1};
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::AvgPool: {
        check_shape(cur.size() == 3, "layer " + std::to_string(i) +
                                         ": avg_pool needs a [C,H,W] input");
        const std::size_t w = static_cast<std::size_t>(l.window);
        check_shape(w <= cur[1] && w <= cur[2],
                    "layer " + std::to_string(i) + ": window exceeds input");
        cur = {cur[0], (cur[1] - w) / l.pool_stride + 1,
               (cur[2] - w) / l.pool_stride + 1};
        break;
      }
      case LayerKind::GlobalAvgPool:
        check_shape(cur.size() == 3,
                    "layer " + std::to_string(i) +
                        ": global_avg_pool needs a [C,H,W] input");
        cur = {cur[0]};
        break;
      case LayerKind::Linear:
        cur = {static_cast<std::size_t>(l.out_features)};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

}  // namespace detail

// builds a validated ModelSpec; consecutive layer shapes must compose and
// every parameter tensor must match its layer
inline ModelSpec make_model(std::array<std::size_t, 3> input_shape,
                            std::vector<LayerSpec> layers,
                            std::vector<Tensor> params) {
  ModelSpec m;
  m.layers = std::move(layers);
  m.params = std::move(params);
  m.input_shape = input_shape;

  const std::vector<Shape> shapes =
      detail::layer_output_shapes(m.layers, input_shape);
  Shape cur = {input_shape[0], input_shape[1], input_shape[2]};
  std::size_t p = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.kind == LayerKind::Conv2d) {
      check_shape(p < m.params.size(), "missing conv kernel tensor");
      const Shape want = {static_cast<std::size_t>(l.out_channels), cur[0],
                          static_cast<std::size_t>(l.kernel),
                          static_cast<std::size_t>(l.kernel)};
      check_shape(m.params[p].shape() == want,
                  "conv kernel shape " + shape_str(m.params[p].shape()) +
                      " != expected " + shape_str(want));
      ++p;
    } else if (l.kind == LayerKind::Linear) {
      check_shape(p + 1 < m.params.size(), "missing linear weight/bias");
      const std::size_t in_features = shape_size(cur);
      const Shape want_w = {static_cast<std::size_t>(l.out_features),
                            in_features};
      check_shape(m.params[p].shape() == want_w,
                  "linear weight shape " + shape_str(m.params[p].shape()) +
                      " != expected " + shape_str(want_w));
      check_shape(
          m.params[p + 1].shape() ==
              Shape{static_cast<std::size_t>(l.out_features)},
          "linear bias shape mismatch");
      p += 2;
    }
    cur = shapes[i];
  }
  check_shape(p == m.params.size(),
              "extra parameter tensors beyond the layer stack");
  m.output_size = shape_size(cur);
  return m;
}

// Picks the activation position t probed by MDM: a class logit, the whole
// logit vector, or one spatial cell of an intermediate feature map (the
// prototype-network style of probe).
struct ActivationSelector {
  enum class Mode { Logit, LogitVector, Spatial };
  Mode mode = Mode::Logit;
  std::size_t class_index = 0;
  std::size_t channel = 0, row = 0, col = 0;
  int probe_layer = -1;  // -1 = final output, else index into layers

  static ActivationSelector logit(std::size_t c) {
    ActivationSelector s;
    s.mode = Mode::Logit;
    s.class_index = c;
    return s;
  }
  static ActivationSelector logit_vector() {
    ActivationSelector s;
    s.mode = Mode::LogitVector;
    return s;
  }
  static ActivationSelector spatial(std::size_t channel, std::size_t row,
                                    std::size_t col, int probe_layer = -1) {
    ActivationSelector s;
    s.mode = Mode::Spatial;
    s.channel = channel;
    s.row = row;
    s.col = col;
    s.probe_layer = probe_layer;
    return s;
  }
};

struct ForwardResult {
  Var output;
  std::vector<Var> layer_outputs;
  std::vector<Var> param_vars;  // empty unless trainable_params
};

// records the full network onto the tape; with trainable_params the
// parameters become gradient leaves (training mode), otherwise constants
// (frozen explanation mode)
inline ForwardResult run_model(Tape& t, const ModelSpec& m, Var image,
                               bool trainable_params = false) {
  const Tensor& img = t.value(image);
  check_shape(img.shape() == Shape{m.input_shape[0], m.input_shape[1],
                                   m.input_shape[2]},
              "model input shape " + shape_str(img.shape()) +
                  " != expected [" + std::to_string(m.input_shape[0]) + "x" +
                  std::to_string(m.input_shape[1]) + "x" +
                  std::to_string(m.input_shape[2]) + "]");
  ForwardResult r;
  Var cur = image;
  std::size_t p = 0;
  for (const LayerSpec& l : m.layers) {
    switch (l.kind) {
      case LayerKind::Conv2d: {
        Var k = t.leaf(m.params[p++], trainable_params);
        if (trainable_params) r.param_vars.push_back(k);
        cur = t.conv2d(cur, k, l.stride, l.padding);
        break;
      }
      case LayerKind::Relu:
        cur = t.relu(cur);
        break;
      case LayerKind::AvgPool:
        cur = t.avg_pool2d(cur, l.window, l.pool_stride);
        break;
      case LayerKind::GlobalAvgPool:
        cur = t.global_avg_pool(cur);
        break;
      case LayerKind::Linear: {
        Var w = t.leaf(m.params[p], trainable_params);
        Var b = t.leaf(m.params[p + 1], trainable_params);
        p += 2;
        if (trainable_params) {
          r.param_vars.push_back(w);
          r.param_vars.push_back(b);
        }
        cur = t.add(t.matvec(w, cur), b);
        break;
      }
    }
    r.layer_outputs.push_back(cur);
  }
  r.output = cur;
  return r;
}

// P_t = f_t(image): the selected activation, differentiable w.r.t. image
inline Var forward_activation(Tape& t, const ModelSpec& m, Var image,
                              const ActivationSelector& sel) {
  ForwardResult r = run_model(t, m, image, false);
  Var probe = r.output;
  if (sel.probe_layer >= 0) {
    check_value(static_cast<std::size_t>(sel.probe_layer) <
                    r.layer_outputs.size(),
                "selector probe layer out of range");
    probe = r.layer_outputs[static_cast<std::size_t>(sel.probe_layer)];
  }
  const Tensor& pv = t.value(probe);
  switch (sel.mode) {
    case ActivationSelector::Mode::Logit:
      check_value(sel.class_index < pv.size(),
                  "selector class index out of bounds");
      return t.select_index(probe, sel.class_index);
    case ActivationSelector::Mode::LogitVector:
      return probe;
    case ActivationSelector::Mode::Spatial: {
      check_shape(pv.rank() == 3,
                  "spatial selector needs a [C,H,W] activation, got " +
                      shape_str(pv.shape()));
      check_value(sel.channel < pv.shape()[0] && sel.row < pv.shape()[1] &&
                      sel.col < pv.shape()[2],
                  "spatial selector out of bounds");
      const std::size_t flat =
          (sel.channel * pv.shape()[1] + sel.row) * pv.shape()[2] + sel.col;
      return t.select_index(probe, flat);
    }
  }
  throw ValueError("unreachable selector mode");
}

// gradient-free forward pass over plain tensors; same kernels as the tape
inline Tensor model_forward(const ModelSpec& m, const Tensor& image) {
  check_shape(image.shape() == Shape{m.input_shape[0], m.input_shape[1],
                                     m.input_shape[2]},
              "model input shape mismatch");
  Tensor cur = image;
  std::size_t p = 0;
  for (const LayerSpec& l : m.layers) {
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const Tensor& k = m.params[p++];
        detail::conv2d_shape_check(cur, k, l.stride, l.padding);
        Tensor out(detail::conv2d_out_shape(cur, k, l.stride, l.padding));
        detail::conv2d_forward(cur, k, l.stride, l.padding, out);
        cur = std::move(out);
        break;
      }
      case LayerKind::Relu:
        for (double& v : cur.data()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::AvgPool: {
        const std::size_t c = cur.shape()[0], h = cur.shape()[1],
                          w = cur.shape()[2];
        const std::size_t win = static_cast<std::size_t>(l.window);
        const std::size_t st = static_cast<std::size_t>(l.pool_stride);
        Tensor out({c, (h - win) / st + 1, (w - win) / st + 1});
        const double inv = 1.0 / static_cast<double>(win * win);
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t oy = 0; oy < out.shape()[1]; ++oy) {
            for (std::size_t ox = 0; ox < out.shape()[2]; ++ox) {
              double acc = 0.0;
              for (std::size_t ky = 0; ky < win; ++ky) {
                for (std::size_t kx = 0; kx < win; ++kx) {
                  acc += cur.at(ci, oy * st + ky, ox * st + kx);
                }
              }
              out.at(ci, oy, ox) = acc * inv;
            }
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const std::size_t c = cur.shape()[0];
        const double inv =
            1.0 / static_cast<double>(cur.shape()[1] * cur.shape()[2]);
        Tensor out({c});
        for (std::size_t ci = 0; ci < c; ++ci) {
          double acc = 0.0;
          for (std::size_t y = 0; y < cur.shape()[1]; ++y) {
            for (std::size_t x = 0; x < cur.shape()[2]; ++x) {
              acc += cur.at(ci, y, x);
            }
          }
          out[ci] = acc * inv;
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::Linear: {
        const Tensor& w = m.params[p];
        const Tensor& b = m.params[p + 1];
        p += 2;
        Tensor out({w.shape()[0]});
        for (std::size_t i = 0; i < w.shape()[0]; ++i) {
          double acc = b[i];
          for (std::size_t j = 0; j < w.shape()[1]; ++j) {
            acc += w.at(i, j) * cur[j];
          }
          out[i] = acc;
        }
        cur = std::move(out);
        break;
      }
    }
  }
  return cur;
}

// softmax probability of one class, as a plain score function for metrics
inline std::function<double(const Tensor&)> class_probability_fn(
    const ModelSpec& m, std::size_t class_index) {
  check_value(class_index < m.output_size, "class index out of bounds");
  return [&m, class_index](const Tensor& image) {
    return softmax(model_forward(m, image))[class_index];
  };
}

// ---- the built-in desk-scale CNN ----

// conv(8,3x3)-relu-pool(2)-conv(16,3x3)-relu-global_avg_pool-linear(K),
// He fan-in init, deterministic per seed
inline ModelSpec build_tiny_cnn(std::uint64_t seed,
                                std::size_t image_size = 24,
                                std::size_t channels = 1,
                                std::size_t classes = 4) {
  Rng rng(seed);
  auto he_tensor = [&rng](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
  };

  std::vector<LayerSpec> layers = {
      LayerSpec::conv(8, 3),  LayerSpec::relu(), LayerSpec::avg_pool(2),
      LayerSpec::conv(16, 3), LayerSpec::relu(), LayerSpec::global_avg_pool(),
      LayerSpec::linear(static_cast<int>(classes))};

  std::vector<Tensor> params;
  params.push_back(he_tensor({8, channels, 3, 3}, channels * 9));
  params.push_back(he_tensor({16, 8, 3, 3}, 8 * 9));
  params.push_back(he_tensor({classes, 16}, 16));
  params.push_back(Tensor::zeros({classes}));

  return make_model({channels, image_size, image_size}, std::move(layers),
                    std::move(params));
}

struct TrainReport {
  double final_accuracy = 0.0;
  std::vector<double> epoch_mean_loss;
};

inline double model_accuracy(const ModelSpec& m,
                             const std::vector<SynthSample>& samples) {
  std::size_t hits = 0;
  for (const SynthSample& s : samples) {
    if (argmax(model_forward(m, s.image)) ==
        static_cast<std::size_t>(s.label)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// per-sample Adam on shuffled epochs; deterministic given seed
inline TrainReport train_tiny_cnn(ModelSpec& model,
                                  const std::vector<SynthSample>& dataset,
                                  int epochs, double lr, std::uint64_t seed) {
  check_value(!dataset.empty(), "train_tiny_cnn: dataset is empty");
  TrainReport report;
  Rng rng(seed);
  AdamState adam(lr);
  for (const Tensor& p : model.params) adam.register_param(p.shape());

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (int ep = 0; ep < epochs; ++ep) {
    rng.shuffle(order);
    double loss_acc = 0.0;
    for (std::size_t idx : order) {
      const SynthSample& s = dataset[idx];
      Tape t;
      Var img = t.leaf(s.image);
      ForwardResult fr = run_model(t, model, img, true);
      Var loss = t.softmax_cross_entropy(
          fr.output, static_cast<std::size_t>(s.label));
      const double lv = t.value(loss).item();
      if (!std::isfinite(lv)) {
        throw TrainingError("tiny cnn training diverged: non-finite loss at "
                            "epoch " +
                            std::to_string(ep) + ", sample " +
                            std::to_string(idx));
      }
      loss_acc += lv;
      t.backward(loss);
      std::vector<Tensor*> ps;
      std::vector<const Tensor*> gs;
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        ps.push_back(&model.params[p]);
        gs.push_back(&t.grad(fr.param_vars[p]));
      }
      adam.step(ps, gs);
    }
    report.epoch_mean_loss.push_back(loss_acc /
                                     static_cast<double>(dataset.size()));
  }
  report.final_accuracy = model_accuracy(model, dataset);
  return report;
}

}  // namespace mdm

#endif  // MDM_MODEL_HPP
