#include <catch2/catch_amalgamated.hpp>

#include "mdm/run_config.hpp"

using namespace mdm;

namespace {

RunConfig nondefault_config() {
  RunConfig c;
  c.seed = 99;
  c.mdm.scale_count = 5;
  c.mdm.scale_base = 3;
  c.mdm.iterations = 77;
  c.mdm.learning_rate = 1e-2;
  c.mdm.threshold_ratio = 0.25;
  c.mdm.blend_alpha = 0.4;
  c.mdm.blend_beta = 0.6;
  c.mdm.lambda_fixed = 12.5;
  c.mdm.lambda_auto_scale = 1.5;
  c.mdm.lambda_schedule = {1, 2, 3, 4, 5};
  c.mdm.parallel = true;
  c.selector = "logit";
  c.class_index = 2;
  c.image_size = 32;
  c.channels = 3;
  c.classes = 6;
  c.dataset_size = 64;
  c.epochs = 4;
  c.train_learning_rate = 2e-3;
  c.curve_steps = 25;
  c.keep_percentile = 60.0;
  c.overlap_percentile = 85.0;
  c.baseline_seeds = 3;
  return c;
}

}  // namespace

TEST_CASE("config json round trip is the identity on schema fields") {
  const RunConfig c = nondefault_config();
  const nlohmann::json j1 = config_to_json(c);
  const RunConfig back = config_from_json(j1);
  const nlohmann::json j2 = config_to_json(back);
  REQUIRE(j1 == j2);  // parse -> serialize -> parse fixed point

  REQUIRE(back.seed == c.seed);
  REQUIRE(back.mdm.scale_count == c.mdm.scale_count);
  REQUIRE(back.mdm.lambda_schedule == c.mdm.lambda_schedule);
  REQUIRE(back.mdm.parallel == c.mdm.parallel);
  REQUIRE(back.selector == c.selector);
  REQUIRE(back.class_index == c.class_index);
  REQUIRE(back.curve_steps == c.curve_steps);
  REQUIRE(back.overlap_percentile == c.overlap_percentile);
}

TEST_CASE("unknown config keys are rejected at every level") {
  nlohmann::json j = config_to_json(RunConfig{});
  SECTION("top level") {
    j["surprise"] = 1;
    REQUIRE_THROWS_AS(config_from_json(j), FormatError);
  }
  SECTION("mdm section") {
    j["mdm"]["typo_scales"] = 8;
    REQUIRE_THROWS_AS(config_from_json(j), FormatError);
  }
  SECTION("train section") {
    j["train"]["epoch"] = 3;
    REQUIRE_THROWS_AS(config_from_json(j), FormatError);
  }
  SECTION("eval section") {
    j["eval"]["step"] = 10;
    REQUIRE_THROWS_AS(config_from_json(j), FormatError);
  }
}

TEST_CASE("config validation failures") {
  nlohmann::json j = config_to_json(RunConfig{});
  SECTION("wrong schema version") {
    j["schema_version"] = 2;
    REQUIRE_THROWS_AS(config_from_json(j), FormatError);
  }
  SECTION("bad selector") {
    j["mdm"]["selector"] = "gradcam";
    REQUIRE_THROWS_AS(config_from_json(j), ValueError);
  }
  SECTION("bad channels") {
    j["train"]["channels"] = 2;
    REQUIRE_THROWS_AS(config_from_json(j), ValueError);
  }
  SECTION("bad threshold ratio") {
    j["mdm"]["threshold_ratio"] = 1.5;
    REQUIRE_THROWS_AS(config_from_json(j), ValueError);
  }
  SECTION("bad curve steps") {
    j["eval"]["curve_steps"] = 1;
    REQUIRE_THROWS_AS(config_from_json(j), ValueError);
  }
}

TEST_CASE("selector construction from config") {
  RunConfig c;
  c.selector = "logit_vector";
  REQUIRE(c.make_selector(3).mode == ActivationSelector::Mode::LogitVector);

  c.selector = "logit";
  c.class_index = -1;
  REQUIRE(c.make_selector(3).class_index == 3);  // argmax fallback
  c.class_index = 1;
  REQUIRE(c.make_selector(3).class_index == 1);

  c.selector = "spatial";
  c.spatial_channel = 2;
  c.spatial_row = 4;
  c.spatial_col = 5;
  c.spatial_layer = 0;
  const ActivationSelector s = c.make_selector(0);
  REQUIRE(s.mode == ActivationSelector::Mode::Spatial);
  REQUIRE(s.channel == 2);
  REQUIRE(s.row == 4);
  REQUIRE(s.col == 5);
  REQUIRE(s.probe_layer == 0);
}
