#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "grad_check.hpp"
#include "mdm/model.hpp"
#include "mdm/model_io.hpp"
#include "mdm/oracle.hpp"
#include "mdm/synth.hpp"

using namespace mdm;

namespace {

ModelSpec identity_model(std::size_t h, std::size_t w) {
  // single 1x1 conv with weight 1: output equals input
  return make_model({1, h, w}, {LayerSpec::conv(1, 1)},
                    {Tensor({1, 1, 1, 1}, {1.0})});
}

std::uint64_t hash_params(const ModelSpec& m) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor& p : m.params) {
    for (double v : p.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

}  // namespace

TEST_CASE("identity model with spatial selector returns the pixel") {
  ModelSpec m = identity_model(4, 4);
  Tensor img({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img[i] = 0.1 * static_cast<double>(i);
  Tape t;
  Var act = forward_activation(t, m, t.constant(img),
                               ActivationSelector::spatial(0, 2, 3));
  REQUIRE_THAT(t.value(act).item(),
               Catch::Matchers::WithinAbs(img.at(0, 2, 3), 1e-15));
}

TEST_CASE("all-ones mask leaves the activation unchanged") {
  ModelSpec m = build_tiny_cnn(3);
  const auto ds = synth_dataset(9, 1, 24);
  const ActivationSelector sel = ActivationSelector::logit(2);
  Tape t;
  Var img = t.constant(ds[0].image);
  Var masked = t.apply_mask(img, t.constant(Tensor::full({24, 24}, 1.0)));
  Var a = forward_activation(t, m, img, sel);
  Var b = forward_activation(t, m, masked, sel);
  REQUIRE(t.value(a).item() == t.value(b).item());
}

TEST_CASE("model construction checks layer composition") {
  SECTION("kernel larger than input") {
    REQUIRE_THROWS_AS(
        make_model({1, 4, 4}, {LayerSpec::conv(1, 7)},
                   {Tensor::zeros({1, 1, 7, 7})}),
        ShapeError);
  }
  SECTION("wrong kernel tensor shape") {
    REQUIRE_THROWS_AS(
        make_model({1, 8, 8}, {LayerSpec::conv(2, 3)},
                   {Tensor::zeros({2, 3, 3, 3})}),
        ShapeError);
  }
  SECTION("wrong linear weight shape") {
    REQUIRE_THROWS_AS(
        make_model({1, 4, 4},
                   {LayerSpec::global_avg_pool(), LayerSpec::linear(2)},
                   {Tensor::zeros({2, 4}), Tensor::zeros({2})}),
        ShapeError);
  }
  SECTION("extra parameters rejected") {
    REQUIRE_THROWS_AS(
        make_model({1, 4, 4}, {LayerSpec::relu()},
                   {Tensor::zeros({1})}),
        ShapeError);
  }
}

TEST_CASE("selector bounds are validated") {
  ModelSpec m = build_tiny_cnn(1);
  Tape t;
  Var img = t.constant(synth_dataset(1, 1, 24)[0].image);
  REQUIRE_THROWS_AS(
      forward_activation(t, m, img, ActivationSelector::logit(4)),
      ValueError);
  REQUIRE_THROWS_AS(
      forward_activation(t, m, img, ActivationSelector::spatial(0, 0, 0)),
      ShapeError);  // final output is a vector, not spatial
  // spatial probe into the first conv output works
  Var a = forward_activation(t, m, img,
                             ActivationSelector::spatial(3, 5, 5, 0));
  REQUIRE(t.value(a).is_scalar());
}

TEST_CASE("plain forward matches taped forward") {
  ModelSpec m = build_tiny_cnn(17);
  const auto ds = synth_dataset(4, 3, 24);
  for (const SynthSample& s : ds) {
    Tape t;
    const Tensor logits_tape =
        t.value(run_model(t, m, t.constant(s.image)).output);
    const Tensor logits_plain = model_forward(m, s.image);
    REQUIRE(logits_tape == logits_plain);
  }
}

TEST_CASE("frozen parameters: explanation forward accumulates no grads") {
  ModelSpec m = build_tiny_cnn(5);
  const auto ds = synth_dataset(6, 1, 24);
  const std::uint64_t before = hash_params(m);
  Tape t;
  Var img = t.leaf(ds[0].image);
  Var d = t.leaf(Tensor::full({24, 24}, 0.5), true);
  Var act = forward_activation(t, m, t.apply_mask(img, d),
                               ActivationSelector::logit(0));
  t.backward(t.sq_l2(act, t.constant(Tensor::scalar(0.0))));
  REQUIRE(hash_params(m) == before);
}

TEST_CASE("additive oracle examples") {
  const auto regions = quadrant_partition(8, 8);
  SECTION("two-region style evaluation") {
    AdditiveOracle o = make_additive_oracle(
        8, 8, regions, {0.3, 0.7, 0.0, 0.0}, 1.0, 1.0);
    Tensor mask = Tensor::zeros({8, 8});
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) mask.at(y, x) = 1.0;  // region 0
    }
    REQUIRE_THAT(oracle_forward_value(o, mask),
                 Catch::Matchers::WithinAbs(0.3, 1e-15));
  }
  SECTION("full mask gives the weight sum over gain") {
    AdditiveOracle o = make_additive_oracle(
        8, 8, regions, {0.1, 0.2, 0.3, 0.25}, 2.0, 1.0);
    REQUIRE_THAT(oracle_forward_value(o, Tensor::full({8, 8}, 1.0)),
                 Catch::Matchers::WithinAbs(0.85 / 2.0, 1e-15));
    REQUIRE_THAT(oracle_reference(o),
                 Catch::Matchers::WithinAbs(0.85 / 2.0, 1e-15));
  }
  SECTION("zero mask at q=1 gives zero") {
    AdditiveOracle o = make_additive_oracle(
        8, 8, regions, {0.1, 0.2, 0.3, 0.25});
    REQUIRE(oracle_forward_value(o, Tensor::zeros({8, 8})) == 0.0);
  }
  SECTION("mask outside [0,1] is rejected") {
    AdditiveOracle o = make_additive_oracle(
        8, 8, regions, {0.1, 0.2, 0.3, 0.25});
    Tensor bad = Tensor::full({8, 8}, 0.5);
    bad[3] = 1.1;
    REQUIRE_THROWS_AS(oracle_forward_value(o, bad), ValueError);
  }
  SECTION("invalid construction") {
    REQUIRE_THROWS_AS(
        make_additive_oracle(8, 8, regions, {0.5, 0.6, 0.2, 0.1}),
        ValueError);  // sum > 1
    REQUIRE_THROWS_AS(
        make_additive_oracle(8, 8, regions, {0.5, -0.1, 0.2, 0.1}),
        ValueError);
    auto overlapping = regions;
    overlapping[1] = overlapping[0];
    REQUIRE_THROWS_AS(
        make_additive_oracle(8, 8, overlapping, {0.1, 0.1, 0.1, 0.1}),
        ValueError);
  }
}

TEST_CASE("additive oracle satisfies exact additivity on disjoint masks") {
  Rng rng(31);
  for (double q : {1.0, 2.0}) {
    AdditiveOracle o = make_additive_oracle(
        8, 8, quadrant_partition(8, 8), {0.15, 0.3, 0.05, 0.45}, 1.0, q);
    for (int trial = 0; trial < 50; ++trial) {
      // random disjoint region sets A and B, indicator masks
      std::vector<int> side(4);
      for (int& s : side) s = rng.uniform_int(0, 2);  // 0: A, 1: B, 2: none
      Tensor ma = Tensor::zeros({8, 8});
      Tensor mb = Tensor::zeros({8, 8});
      Tensor msum = Tensor::zeros({8, 8});
      for (std::size_t r = 0; r < 4; ++r) {
        if (side[r] == 2) continue;
        Tensor& dst = side[r] == 0 ? ma : mb;
        const Rect& rc = o.regions[r];
        for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
          for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) {
            dst.at(y, x) = 1.0;
            msum.at(y, x) = 1.0;
          }
        }
      }
      const double fa = oracle_forward_value(o, ma);
      const double fb = oracle_forward_value(o, mb);
      const double fs = oracle_forward_value(o, msum);
      REQUIRE_THAT(fs, Catch::Matchers::WithinAbs(fa + fb, 1e-15));
    }
  }
}

TEST_CASE("oracle derivative ordering follows the weights") {
  // d/dm of region r's contribution is q*w_r*m^(q-1)/k: strictly ordered by
  // w_r for every m in (0,1], checked analytically and by differences
  const auto regions = quadrant_partition(8, 8);
  const std::vector<double> w = {0.1, 0.45, 0.25, 0.2};
  for (double q : {1.0, 2.0}) {
    AdditiveOracle o = make_additive_oracle(8, 8, regions, w, 1.0, q);
    for (double m : {0.2, 0.5, 1.0}) {
      std::vector<double> analytic(4), numeric(4);
      const double h = 1e-6;
      for (std::size_t r = 0; r < 4; ++r) {
        analytic[r] = q * w[r] * std::pow(m, q - 1.0);
        auto at_level = [&](double level) {
          Tensor mask = Tensor::zeros({8, 8});
          const Rect& rc = regions[r];
          for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
            for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) {
              mask.at(y, x) = level;
            }
          }
          // information = gain * score at this mask level
          return o.gain * oracle_forward_value(o, mask);
        };
        if (m + h <= 1.0) {
          numeric[r] = (at_level(m + h) - at_level(m - h)) / (2.0 * h);
        } else {
          // second-order backward difference keeps the probe inside [0,1]
          numeric[r] = (3.0 * at_level(m) - 4.0 * at_level(m - h) +
                        at_level(m - 2.0 * h)) /
                       (2.0 * h);
        }
        REQUIRE_THAT(numeric[r],
                     Catch::Matchers::WithinAbs(analytic[r], 1e-6));
      }
      for (std::size_t a = 0; a < 4; ++a) {
        for (std::size_t b = 0; b < 4; ++b) {
          if (w[a] < w[b]) {
            REQUIRE(analytic[a] < analytic[b]);
            REQUIRE(numeric[a] < numeric[b] + 1e-9);
          }
        }
      }
    }
  }
}

TEST_CASE("oracle forward is differentiable and matches finite differences") {
  AdditiveOracle o = make_additive_oracle(
      8, 8, quadrant_partition(8, 8), {0.15, 0.3, 0.05, 0.45});
  Rng rng(77);
  for (int i = 0; i < 10; ++i) {
    Tensor mask = mdm::testing::random_tensor(rng, {8, 8});
    const double err = mdm::testing::max_grad_rel_err(
        [&o](Tape& t, const std::vector<Var>& v) {
          return oracle_forward(t, o, v[0]);
        },
        {mask});
    REQUIRE(err < 1e-4);
  }
}

TEST_CASE("synthetic dataset properties") {
  SECTION("deterministic per seed") {
    const auto a = synth_dataset(42, 3, 24);
    const auto b = synth_dataset(42, 3, 24);
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].image == b[i].image);
      REQUIRE(a[i].label == b[i].label);
      REQUIRE(a[i].gt_mask == b[i].gt_mask);
    }
    const auto c = synth_dataset(43, 3, 24);
    REQUIRE_FALSE(a[0].image == c[0].image);
  }
  SECTION("blob quadrant matches the label") {
    const auto ds = synth_dataset(7, 50, 24);
    for (const SynthSample& s : ds) {
      const std::size_t peak = argmax(s.image);
      const std::size_t y = peak / 24, x = peak % 24;
      const int quadrant = (y >= 12 ? 2 : 0) + (x >= 12 ? 1 : 0);
      REQUIRE(quadrant == s.label);
      // the gt mask is nonempty and contains the brightest pixel
      REQUIRE(s.gt_mask.sum() > 0.0);
      REQUIRE(s.gt_mask.at(y, x) == 1.0);
    }
  }
  SECTION("labels are roughly uniform") {
    const auto ds = synth_dataset(11, 200, 24);
    std::map<int, int> hist;
    for (const SynthSample& s : ds) hist[s.label]++;
    for (int k = 0; k < 4; ++k) {
      REQUIRE(hist[k] >= 40);  // 50 +/- 20%
      REQUIRE(hist[k] <= 60);
    }
  }
  SECTION("pixel range and argument validation") {
    const auto ds = synth_dataset(3, 5, 16);
    for (const SynthSample& s : ds) {
      REQUIRE(s.image.min_value() >= 0.0);
      REQUIRE(s.image.max_value() <= 1.0);
      REQUIRE(s.image.max_value() >= 0.8);  // blob peak
    }
    REQUIRE_THROWS_AS(synth_dataset(1, 0, 24), ValueError);
    REQUIRE_THROWS_AS(synth_dataset(1, 5, 8), ValueError);
  }
}

TEST_CASE("tiny cnn is deterministic and trainable") {
  SECTION("same seed, same parameters") {
    ModelSpec a = build_tiny_cnn(9);
    ModelSpec b = build_tiny_cnn(9);
    REQUIRE(hash_params(a) == hash_params(b));
    ModelSpec c = build_tiny_cnn(10);
    REQUIRE(hash_params(a) != hash_params(c));
  }
  SECTION("zero epochs keeps the initialization") {
    ModelSpec m = build_tiny_cnn(4);
    const std::uint64_t before = hash_params(m);
    const auto ds = synth_dataset(2, 8, 24);
    TrainReport r = train_tiny_cnn(m, ds, 0, 3e-3, 1);
    REQUIRE(hash_params(m) == before);
    REQUIRE(r.epoch_mean_loss.empty());
  }
  SECTION("a few epochs reduce the loss") {
    ModelSpec m = build_tiny_cnn(4);
    const auto ds = synth_dataset(2, 40, 24);
    TrainReport r = train_tiny_cnn(m, ds, 3, 3e-3, 1);
    REQUIRE(r.epoch_mean_loss.size() == 3);
    REQUIRE(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
  }
  SECTION("empty dataset rejected") {
    ModelSpec m = build_tiny_cnn(4);
    REQUIRE_THROWS_AS(train_tiny_cnn(m, {}, 1, 3e-3, 1), ValueError);
  }
}

TEST_CASE("trained tiny cnn ranks the true logit first on held-out data") {
  ModelSpec m = build_tiny_cnn(1);
  const auto train_set = synth_dataset(100, 240, 24);
  const TrainReport rep = train_tiny_cnn(m, train_set, 30, 3e-3, 7);
  REQUIRE(rep.final_accuracy >= 0.95);

  const auto held_out = synth_dataset(2024, 100, 24);
  REQUIRE(model_accuracy(m, held_out) >= 0.90);

  // a second seed gives different parameters but comparable quality
  ModelSpec m2 = build_tiny_cnn(2);
  const TrainReport rep2 = train_tiny_cnn(m2, train_set, 30, 3e-3, 8);
  REQUIRE(hash_params(m) != hash_params(m2));
  REQUIRE(rep2.final_accuracy >= 0.90);
}

TEST_CASE("weight file round trip") {
  ModelSpec m = build_tiny_cnn(21);
  const std::string path = "test_weights.mdmw";
  save_model(m, path);

  SECTION("tensors bit-identical and forward equivalent") {
    ModelSpec loaded = load_model(path);
    REQUIRE(loaded.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      REQUIRE(loaded.params[i] == m.params[i]);
    }
    REQUIRE(loaded.input_shape == m.input_shape);
    const auto ds = synth_dataset(5, 1, 24);
    REQUIRE(model_forward(loaded, ds[0].image) ==
            model_forward(m, ds[0].image));
  }
  SECTION("corrupted magic is a format error") {
    std::fstream f(path,
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    REQUIRE_THROWS_AS(load_model(path), FormatError);
  }
  SECTION("payload corruption fails the CRC") {
    save_model(m, path);
    std::fstream f(path,
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(-40, std::ios::end);
    const char junk = 0x5A;
    f.write(&junk, 1);
    f.close();
    REQUIRE_THROWS_AS(load_model(path), FormatError);
  }
  SECTION("truncated file is a format error") {
    save_model(m, path);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(),
              static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    REQUIRE_THROWS_AS(load_model(path), FormatError);
  }
  std::remove(path.c_str());
}
