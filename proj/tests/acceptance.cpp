// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Independent oracles (finite differences, closed-form
// partial sums, exhaustive grid search) live in this binary and never call
// the code paths they check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "mdm/mdm.hpp"

using namespace mdm;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

class Criterion {
 public:
  explicit Criterion(std::string name)
      : name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!first_failure_.empty()) first_failure_ += "; ";
      first_failure_ += what;
    }
  }

  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

  void finish(const std::string& detail = "") {
    const double secs = seconds();
    std::printf("[%s] %-28s %6.1fs  %s%s\n", pass_ ? "PASS" : "FAIL",
                name_.c_str(), secs, detail.c_str(),
                pass_ ? "" : ("  <- " + first_failure_).c_str());
    std::fflush(stdout);
    if (!pass_) ++g_failures;
  }

 private:
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  bool pass_ = true;
  std::string first_failure_;
};

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

// the shared desk-scale model: seeds pinned, deterministic
ModelSpec trained_tiny_cnn(double* accuracy_out = nullptr) {
  ModelSpec model = build_tiny_cnn(1, 24);
  const auto train_set = synth_dataset(100, 240, 24);
  const TrainReport rep = train_tiny_cnn(model, train_set, 30, 3e-3, 7);
  if (accuracy_out) *accuracy_out = rep.final_accuracy;
  return model;
}

// ---- criterion 1: gradient correctness --------------------------------

void check_gradients() {
  Criterion crit("gradient-correctness");
  Rng rng(4242);
  double worst = 0.0;
  int checks = 0;

  auto sweep = [&](const mdm::testing::GraphFn& fn,
                   std::function<std::vector<Tensor>()> gen) {
    for (int i = 0; i < 10; ++i) {
      const double err = mdm::testing::max_grad_rel_err(fn, gen());
      worst = std::max(worst, err);
      ++checks;
      crit.require(err < 1e-4, "gradient mismatch " + fmt3(err));
    }
  };
  auto rt = [&rng](Shape s) { return mdm::testing::random_tensor(rng, s); };
  auto rs = [&rng](Shape s) {
    return mdm::testing::random_signed_tensor(rng, s);
  };

  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
        },
        [&] { return std::vector<Tensor>{rs({3, 3}), rs({3, 3})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.mul(v[0], v[1]));
        },
        [&] { return std::vector<Tensor>{rs({4, 2}), rs({1})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.relu(v[0]));
        },
        [&] { return std::vector<Tensor>{rs({4, 4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.clamp01(v[0]));
        },
        [&] { return std::vector<Tensor>{rt({4, 4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.pow_const(v[0], 2.0));
        },
        [&] { return std::vector<Tensor>{rt({3, 3})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sq_l2(v[0], v[1]);
        },
        [&] { return std::vector<Tensor>{rs({3, 4}), rs({3, 4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) { return t.l1_mean(v[0]); },
        [&] { return std::vector<Tensor>{rs({4, 4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.softmax_cross_entropy(v[0], 2);
        },
        [&] { return std::vector<Tensor>{rs({5})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.matvec(v[0], v[1]));
        },
        [&] { return std::vector<Tensor>{rs({3, 4}), rs({4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.conv2d(v[0], v[1], 1, 1));
        },
        [&] {
          return std::vector<Tensor>{rt({2, 5, 5}), rs({3, 2, 3, 3})};
        });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.conv2d(v[0], v[1], 2, 0));
        },
        [&] {
          return std::vector<Tensor>{rt({1, 6, 6}), rs({2, 1, 2, 2})};
        });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.avg_pool2d(v[0], 2));
        },
        [&] { return std::vector<Tensor>{rt({2, 4, 4})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.global_avg_pool(v[0]), v[1]));
        },
        [&] { return std::vector<Tensor>{rt({3, 4, 4}), rs({3})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.bilinear_upsample(v[0], 7, 9), v[1]));
        },
        [&] { return std::vector<Tensor>{rt({3, 4}), rs({7, 9})}; });
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.sum(t.apply_mask(v[0], v[1]));
        },
        [&] { return std::vector<Tensor>{rt({2, 4, 4}), rt({4, 4})}; });
  {
    const std::vector<Rect> quads = quadrant_partition(4, 4);
    sweep([quads](Tape& t, const std::vector<Var>& v) {
            return t.sum(t.mul(t.region_means(v[0], quads), v[1]));
          },
          [&] { return std::vector<Tensor>{rt({4, 4}), rs({4})}; });
  }
  sweep([](Tape& t, const std::vector<Var>& v) {
          return t.select_index(t.reshape(v[0], {6}), 4);
        },
        [&] { return std::vector<Tensor>{rs({2, 3})}; });

  // the composed mask-training loss graph on the tiny CNN
  {
    const ModelSpec model = build_tiny_cnn(77, 16);
    const ActivationSelector sel = ActivationSelector::logit(1);
    Tensor image = rt({1, 16, 16});
    Tape t0;
    const Tensor ref =
        t0.value(forward_activation(t0, model, t0.constant(image), sel));
    const double lambda = 0.37;
    sweep(
        [&](Tape& t, const std::vector<Var>& v) {
          Var m = t.clamp01(t.bilinear_upsample(v[0], 16, 16));
          Var act = forward_activation(
              t, model, t.apply_mask(t.constant(image), m), sel);
          return t.add(t.sq_l2(t.constant(ref), act),
                       t.scale(t.l1_mean(v[0]), lambda));
        },
        [&] { return std::vector<Tensor>{rt({4, 4})}; });
  }

  crit.require(crit.seconds() < 30.0, "runtime over 30 s");
  crit.finish(std::to_string(checks) + " seeded instances, worst rel err " +
              fmt3(worst));
}

// ---- criterion 2: trained-mask ordering on the additive oracle --------

void check_mask_ordering() {
  Criterion crit("oracle-mask-ordering");
  int exact = 0, grid_ok = 0;
  double min_rho = 1.0;
  for (int i = 0; i < 20; ++i) {
    const OrderingTrial t = run_ordering_trial(100 + static_cast<std::uint64_t>(i));
    exact += t.rank_exact;
    grid_ok += t.grid_monotone;
    min_rho = std::min(min_rho, t.rho);
  }
  crit.require(exact >= 18, "only " + std::to_string(exact) +
                                "/20 exact rankings (need 18)");
  crit.require(grid_ok == 20, "grid minimizer contradicted the weight "
                              "ranking in " +
                                  std::to_string(20 - grid_ok) + " trials");
  crit.require(crit.seconds() < 120.0, "runtime over 2 min");
  crit.finish(std::to_string(exact) + "/20 exact, grid agreement " +
              std::to_string(grid_ok) + "/20, min rho " + fmt3(min_rho));
}

// ---- criterion 3: Algorithm 1 conformance ------------------------------

void check_algorithm1(const ModelSpec& model) {
  Criterion crit("algorithm-1-conformance");
  const auto images = synth_dataset(400, 1, 24);
  const Tensor& image = images[0].image;
  const std::size_t cls = argmax(model_forward(model, image));

  bool range_ok = true;
  auto check_ranges = [&range_ok](const FusedExplanation& ex) {
    for (const TrainTrace& tr : ex.traces) {
      for (const TrainIterRecord& it : tr.iters) {
        range_ok = range_ok && it.d_min >= 0.0 && it.d_max <= 1.0 &&
                   it.m_min >= 0.0 && it.m_max <= 1.0;
      }
    }
  };

  // pure descent: lambda = 0
  MdmConfig zero;
  zero.lambda_fixed = 0.0;
  const FusedExplanation ex0 =
      run_mdm(model, image, ActivationSelector::logit(cls), zero);
  double worst_ratio = 0.0;
  for (const TrainTrace& tr : ex0.traces) {
    const double c0 = tr.iters.front().consistency;
    const double c1 = tr.iters.back().consistency;
    worst_ratio = std::max(worst_ratio, c0 > 0.0 ? c1 / c0 : 0.0);
  }
  crit.require(worst_ratio <= 0.10,
               "lambda=0 consistency ratio " + fmt3(worst_ratio));
  check_ranges(ex0);

  // L1 domination: lambda 100x above the auto-scale
  MdmConfig heavy;
  heavy.lambda_auto_scale = 0.1 * 100.0;
  const FusedExplanation exh =
      run_mdm(model, image, ActivationSelector::logit(cls), heavy);
  double worst_l1 = 0.0;
  for (const TrainTrace& tr : exh.traces) {
    worst_l1 = std::max(worst_l1, tr.iters.back().l1);
  }
  crit.require(worst_l1 < 0.05, "100x-lambda final l1 " + fmt3(worst_l1));
  check_ranges(exh);

  crit.require(range_ok, "mask left [0,1] during training");
  crit.finish("descent ratio " + fmt3(worst_ratio) + ", heavy-l1 " +
              fmt3(worst_l1) + ", ranges checked every iteration");
}

// ---- criterion 4: fusion invariants ------------------------------------

void check_fusion() {
  Criterion crit("fusion-invariants");
  Rng rng(31337);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.next_below(9));
    const std::size_t h = 2 + rng.next_below(11);
    const std::size_t w = 2 + rng.next_below(11);
    std::vector<Tensor> masks;
    for (int i = 0; i < n; ++i) {
      Tensor m({h, w});
      for (double& v : m.data()) v = rng.uniform();
      masks.push_back(std::move(m));
    }
    const double gamma = rng.uniform(0.05, 0.95) * n;
    const FuseResult r = fuse_masks(masks, gamma);
    double retained_max = 0.0;
    for (std::size_t i = 0; i < r.fused.size(); ++i) {
      if (r.heat[i] > 0.0) {
        crit.require(r.binary[i] == 1.0, "M_h>0 without M_b=1");
      }
      if (r.binary[i] == 1.0) {
        crit.require(r.fused[i] >= gamma, "M_b=1 below gamma");
        retained_max = std::max(retained_max, r.heat[i]);
      } else {
        crit.require(r.heat[i] == 0.0, "M_h nonzero outside M_b");
      }
      crit.require(r.fused[i] >= 0.0 && r.fused[i] <= n, "M_F out of range");
    }
    if (!r.degenerate) {
      crit.require(std::fabs(retained_max - 1.0) < 1e-12,
                   "max retained M_h != 1");
    }
  }

  // the hand-computed 2x2 example reproduces exactly
  const std::vector<Tensor> hand = {Tensor({2, 2}, {1, 1, 1, 0}),
                                    Tensor({2, 2}, {1, 1, 0, 0}),
                                    Tensor({2, 2}, {1, 0, 0, 0})};
  const FuseResult r = fuse_masks(hand, 2.0);
  crit.require(r.fused.data() == std::vector<double>{3, 2, 1, 0} &&
                   r.binary.data() == std::vector<double>{1, 1, 0, 0} &&
                   r.heat[0] == 1.0 && r.heat[1] == 2.0 / 3.0 &&
                   r.heat[2] == 0.0 && r.heat[3] == 0.0,
               "hand 2x2 fusion example mismatch");
  crit.finish("100 random stacks + exact hand example");
}

// ---- criterion 5: metric identities -------------------------------------

void check_metric_identities(const ModelSpec& model) {
  Criterion crit("metric-identities");
  Rng rng(555);

  int pairs = 0;
  double worst_gap = 0.0;
  while (pairs < 1000) {
    const std::size_t h = 3 + rng.next_below(8);
    const std::size_t w = 3 + rng.next_below(8);
    Tensor p({h, w}), g({h, w});
    for (double& v : p.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    for (double& v : g.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    if (g.sum() == 0.0 || p.sum() == 0.0) continue;
    ++pairs;
    const OverlapScores a = overlap_scores(p, g);
    const OverlapScores b = overlap_scores(g, p);
    const double gap = std::fabs(a.dice - 2.0 * a.iou / (1.0 + a.iou));
    worst_gap = std::max(worst_gap, gap);
    crit.require(gap <= 1e-12, "dice != 2iou/(1+iou)");
    crit.require(a.ppv == b.sensitivity && a.sensitivity == b.ppv,
                 "ppv(P,G) != sensitivity(G,P)");
  }

  // endpoint equalities, exact
  {
    const auto ds = synth_dataset(808, 1, 24);
    const ScoreFn prob = class_probability_fn(
        model, argmax(model_forward(model, ds[0].image)));
    const SaliencyMap s = random_saliency(17, 24, 24);
    const Curve del = deletion_curve(prob, ds[0].image, s, 40);
    const Curve ins = insertion_curve(prob, ds[0].image, s, 40);
    crit.require(del.scores.front() == ins.scores.back() &&
                     del.scores.front() == prob(ds[0].image),
                 "unmasked endpoint mismatch");
    crit.require(del.scores.back() == ins.scores.front(),
                 "baseline endpoint mismatch");
  }

  // linear-scorer deletion AUC against the closed-form partial-sum oracle
  {
    Tensor x({1, 10, 10});
    for (double& v : x.data()) v = rng.uniform(0.01, 1.0);
    Tensor sv({10, 10});
    for (std::size_t i = 0; i < 100; ++i) sv[i] = x[i];
    SaliencyMap s;
    s.values = sv;
    const ScoreFn linear = [](const Tensor& im) { return im.sum(); };

    std::vector<double> desc(x.data());
    std::sort(desc.begin(), desc.end(), std::greater<double>());
    std::vector<double> prefix(101, 0.0);
    for (std::size_t j = 0; j < 100; ++j) prefix[j + 1] = prefix[j] + desc[j];
    const int steps = 50;
    double oracle_auc = 0.0;
    double prev_f = 0.0, prev_s = x.sum();
    for (int i = 1; i <= steps; ++i) {
      const double f = static_cast<double>(i) / steps;
      const double sc = x.sum() - prefix[(i * 100) / steps];
      oracle_auc += (f - prev_f) * (sc + prev_s) / 2.0;
      prev_f = f;
      prev_s = sc;
    }
    const Curve del = deletion_curve(linear, x, s, steps);
    crit.require(std::fabs(del.auc - oracle_auc) <= 1e-12,
                 "linear deletion AUC off by " +
                     fmt3(std::fabs(del.auc - oracle_auc)));
  }

  crit.finish("1000 mask pairs, worst dice-iou gap " +
              std::to_string(worst_gap));
}

// ---- criterion 6: desk-scale effectiveness ------------------------------

void check_effectiveness(const ModelSpec& model, double train_accuracy) {
  Criterion crit("desk-scale-effectiveness");
  crit.require(train_accuracy >= 0.95,
               "train accuracy gate " + fmt3(train_accuracy));

  const auto test_set = synth_dataset(900, 20, 24);
  const MdmConfig cfg;  // desk defaults: N=8 grids 3..10, C=300, auto lambda
  double mdm_del = 0.0, mdm_ins = 0.0, mdm_dice = 0.0;
  double rnd_del = 0.0, rnd_ins = 0.0, rnd_dice = 0.0;
  const int baseline_seeds = 5;

  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const SynthSample& s = test_set[i];
    const std::size_t cls = argmax(model_forward(model, s.image));
    const ScoreFn prob = class_probability_fn(model, cls);
    const FusedExplanation ex =
        run_mdm(model, s.image, ActivationSelector::logit_vector(), cfg);
    SaliencyMap sal;
    sal.values = ex.fused;
    sal.source = SaliencyMap::Source::Mdm;
    mdm_del += deletion_curve(prob, s.image, sal).auc / 20.0;
    mdm_ins += insertion_curve(prob, s.image, sal).auc / 20.0;
    mdm_dice +=
        overlap_scores(binary_from_percentile(sal, 90.0), s.gt_mask).dice /
        20.0;
    for (int b = 0; b < baseline_seeds; ++b) {
      const SaliencyMap rs = random_saliency(
          4000 + 97 * static_cast<std::uint64_t>(b) + i, 24, 24);
      rnd_del += deletion_curve(prob, s.image, rs).auc / (20.0 * 5.0);
      rnd_ins += insertion_curve(prob, s.image, rs).auc / (20.0 * 5.0);
      rnd_dice +=
          overlap_scores(binary_from_percentile(rs, 90.0), s.gt_mask).dice /
          (20.0 * 5.0);
    }
  }

  crit.require(mdm_del < rnd_del, "deletion AUC not below random");
  crit.require(mdm_ins > rnd_ins, "insertion AUC not above random");
  crit.require(mdm_dice >= 2.0 * rnd_dice, "dice@90 below 2x random");
  crit.require(crit.seconds() < 600.0, "runtime over 10 min");
  crit.finish("del " + fmt3(mdm_del) + "<" + fmt3(rnd_del) + ", ins " +
              fmt3(mdm_ins) + ">" + fmt3(rnd_ins) + ", dice " +
              fmt3(mdm_dice) + ">=2x" + fmt3(rnd_dice) + ", acc " +
              fmt3(train_accuracy));
}

// ---- criterion 7: CLI determinism ---------------------------------------

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(is)),
                           std::istreambuf_iterator<char>());
}

void check_cli_determinism() {
  Criterion crit("explain-determinism");
#ifndef MDM_CLI_PATH
  crit.require(false, "MDM_CLI_PATH not compiled in");
  crit.finish();
  return;
#else
  const std::string cli = MDM_CLI_PATH;
  const fs::path work = fs::temp_directory_path() / "mdm_acceptance_cli";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string model = (work / "m.mdmw").string();
  const std::string pack = (work / "pack").string();

  auto run = [&](const std::string& args) {
    const std::string cmd =
        cli + " " + args + " > " + (work / "out.log").string() + " 2>&1";
    return std::system(cmd.c_str());
  };

  int rc = run("train-model --out " + model + " --emit-eval-dir " + pack +
               " --eval-count 1 --epochs 2 --seed 5");
  crit.require(rc == 0, "train-model exited nonzero");
  const std::string image = pack + "/images/sample_000.pgm";
  rc = run("explain --model " + model + " --image " + image + " --out-dir " +
           (work / "e1").string() + " --iterations 60 --scales 3 --seed 5");
  crit.require(rc == 0, "first explain exited nonzero");
  rc = run("explain --model " + model + " --image " + image + " --out-dir " +
           (work / "e2").string() + " --iterations 60 --scales 3 --seed 5");
  crit.require(rc == 0, "second explain exited nonzero");

  for (const char* f :
       {"heatmap.ppm", "binary_mask.ppm", "fused.mdmm", "trace.csv"}) {
    const auto a = slurp(work / "e1" / f);
    const auto b = slurp(work / "e2" / f);
    crit.require(!a.empty() && a == b,
                 std::string(f) + " differs between runs");
  }
  fs::remove_all(work);
  crit.finish("byte-identical heatmap.ppm, binary_mask.ppm, fused.mdmm");
#endif
}

}  // namespace

int main() {
  std::printf("acceptance suite\n----------------\n");
  check_gradients();
  check_mask_ordering();

  double accuracy = 0.0;
  const ModelSpec model = trained_tiny_cnn(&accuracy);

  check_algorithm1(model);
  check_fusion();
  check_metric_identities(model);
  check_effectiveness(model, accuracy);
  check_cli_determinism();

  std::printf("----------------\n%s (%d failure%s)\n",
              g_failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES PRESENT",
              g_failures, g_failures == 1 ? "" : "s");
  return g_failures == 0 ? 0 : 1;
}
