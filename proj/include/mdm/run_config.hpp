#ifndef MDM_RUN_CONFIG_HPP
#define MDM_RUN_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdm/error.hpp"
#include "mdm/masks.hpp"
#include "mdm/model.hpp"

namespace mdm {

inline constexpr int kConfigSchemaVersion = 1;

// Experiment configuration: a single JSON document with a fixed schema.
// Unknown keys are rejected so typos cannot silently fall back to defaults.
struct RunConfig {
  std::uint64_t seed = 0;

  // mdm
  MdmConfig mdm;
  std::string selector = "logit_vector";  // logit_vector | logit | spatial
  int class_index = -1;                   // logit mode; -1 = model argmax
  int spatial_channel = 0, spatial_row = 0, spatial_col = 0;
  int spatial_layer = -1;

  // model / training
  int image_size = 24;
  int channels = 1;
  int classes = 4;
  int dataset_size = 240;
  int epochs = 30;
  double train_learning_rate = 3e-3;

  // evaluation
  int curve_steps = 50;
  double keep_percentile = 50.0;     // for AD / AI explained maps
  double overlap_percentile = 90.0;  // headline dice/iou/ppv/sens
  int baseline_seeds = 5;

  void validate() const {
    mdm.validate();
    check_value(selector == "logit_vector" || selector == "logit" ||
                    selector == "spatial",
                "config: unknown selector '" + selector + "'");
    check_value(image_size >= 16, "config: image_size must be >= 16");
    check_value(channels == 1 || channels == 3,
                "config: channels must be 1 or 3");
    check_value(classes >= 2, "config: classes must be >= 2");
    check_value(dataset_size >= 1, "config: dataset_size must be >= 1");
    check_value(epochs >= 0, "config: epochs must be >= 0");
    check_value(train_learning_rate > 0.0,
                "config: train learning rate must be > 0");
    check_value(curve_steps >= 2, "config: curve_steps must be >= 2");
    check_value(keep_percentile >= 0.0 && keep_percentile < 100.0,
                "config: keep_percentile must be in [0,100)");
    check_value(overlap_percentile > 0.0 && overlap_percentile < 100.0,
                "config: overlap_percentile must be in (0,100)");
    check_value(baseline_seeds >= 1, "config: baseline_seeds must be >= 1");
  }

  ActivationSelector make_selector(std::size_t argmax_class) const {
    if (selector == "logit_vector") return ActivationSelector::logit_vector();
    if (selector == "logit") {
      return ActivationSelector::logit(
          class_index < 0 ? argmax_class
                          : static_cast<std::size_t>(class_index));
    }
    return ActivationSelector::spatial(
        static_cast<std::size_t>(spatial_channel),
        static_cast<std::size_t>(spatial_row),
        static_cast<std::size_t>(spatial_col), spatial_layer);
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const std::string& k : known) ok = ok || it.key() == k;
    if (!ok) {
      throw FormatError("config: unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = c.seed;
  nlohmann::json m;
  m["scales"] = c.mdm.scale_count;
  m["scale_base"] = c.mdm.scale_base;
  m["iterations"] = c.mdm.iterations;
  m["learning_rate"] = c.mdm.learning_rate;
  m["threshold_ratio"] = c.mdm.threshold_ratio;
  m["alpha"] = c.mdm.blend_alpha;
  m["beta"] = c.mdm.blend_beta;
  m["lambda"] = c.mdm.lambda_fixed;
  m["lambda_auto_scale"] = c.mdm.lambda_auto_scale;
  m["lambda_schedule"] = c.mdm.lambda_schedule;
  m["parallel"] = c.mdm.parallel;
  m["selector"] = c.selector;
  m["class_index"] = c.class_index;
  m["spatial_channel"] = c.spatial_channel;
  m["spatial_row"] = c.spatial_row;
  m["spatial_col"] = c.spatial_col;
  m["spatial_layer"] = c.spatial_layer;
  j["mdm"] = std::move(m);
  nlohmann::json t;
  t["image_size"] = c.image_size;
  t["channels"] = c.channels;
  t["classes"] = c.classes;
  t["dataset_size"] = c.dataset_size;
  t["epochs"] = c.epochs;
  t["learning_rate"] = c.train_learning_rate;
  j["train"] = std::move(t);
  nlohmann::json e;
  e["curve_steps"] = c.curve_steps;
  e["keep_percentile"] = c.keep_percentile;
  e["overlap_percentile"] = c.overlap_percentile;
  e["baseline_seeds"] = c.baseline_seeds;
  j["eval"] = std::move(e);
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown_keys(j, {"schema_version", "seed", "mdm", "train",
                                  "eval"},
                              "top level");
  if (j.contains("schema_version") &&
      j.at("schema_version").get<int>() != kConfigSchemaVersion) {
    throw FormatError("config: unsupported schema_version");
  }
  detail::maybe(j, "seed", c.seed);
  if (j.contains("mdm")) {
    const nlohmann::json& m = j.at("mdm");
    detail::reject_unknown_keys(
        m,
        {"scales", "scale_base", "iterations", "learning_rate",
         "threshold_ratio", "alpha", "beta", "lambda", "lambda_auto_scale",
         "lambda_schedule", "parallel", "selector", "class_index",
         "spatial_channel", "spatial_row", "spatial_col", "spatial_layer"},
        "mdm");
    detail::maybe(m, "scales", c.mdm.scale_count);
    detail::maybe(m, "scale_base", c.mdm.scale_base);
    detail::maybe(m, "iterations", c.mdm.iterations);
    detail::maybe(m, "learning_rate", c.mdm.learning_rate);
    detail::maybe(m, "threshold_ratio", c.mdm.threshold_ratio);
    detail::maybe(m, "alpha", c.mdm.blend_alpha);
    detail::maybe(m, "beta", c.mdm.blend_beta);
    detail::maybe(m, "lambda", c.mdm.lambda_fixed);
    detail::maybe(m, "lambda_auto_scale", c.mdm.lambda_auto_scale);
    detail::maybe(m, "lambda_schedule", c.mdm.lambda_schedule);
    detail::maybe(m, "parallel", c.mdm.parallel);
    detail::maybe(m, "selector", c.selector);
    detail::maybe(m, "class_index", c.class_index);
    detail::maybe(m, "spatial_channel", c.spatial_channel);
    detail::maybe(m, "spatial_row", c.spatial_row);
    detail::maybe(m, "spatial_col", c.spatial_col);
    detail::maybe(m, "spatial_layer", c.spatial_layer);
  }
  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    detail::reject_unknown_keys(t,
                                {"image_size", "channels", "classes",
                                 "dataset_size", "epochs", "learning_rate"},
                                "train");
    detail::maybe(t, "image_size", c.image_size);
    detail::maybe(t, "channels", c.channels);
    detail::maybe(t, "classes", c.classes);
    detail::maybe(t, "dataset_size", c.dataset_size);
    detail::maybe(t, "epochs", c.epochs);
    detail::maybe(t, "learning_rate", c.train_learning_rate);
  }
  if (j.contains("eval")) {
    const nlohmann::json& e = j.at("eval");
    detail::reject_unknown_keys(e,
                                {"curve_steps", "keep_percentile",
                                 "overlap_percentile", "baseline_seeds"},
                                "eval");
    detail::maybe(e, "curve_steps", c.curve_steps);
    detail::maybe(e, "keep_percentile", c.keep_percentile);
    detail::maybe(e, "overlap_percentile", c.overlap_percentile);
    detail::maybe(e, "baseline_seeds", c.baseline_seeds);
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace mdm

#endif  // MDM_RUN_CONFIG_HPP
