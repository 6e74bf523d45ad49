// Command-line front end: dataset/model preparation, explanation runs,
// metric evaluation, and the oracle ordering check.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdm/mdm.hpp"

namespace fs = std::filesystem;
using namespace mdm;

namespace {

// tracks files written by a subcommand so a failure can remove partial
// outputs before exiting nonzero
class ArtifactSink {
 public:
  void note(const std::string& path) { written_.push_back(path); }
  void discard_all() {
    for (const std::string& p : written_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  std::vector<std::string> written_;
};

std::string fmt(double v) { return detail::fmt_double(v); }

Tensor to_model_input(const Image& im, const ModelSpec& model) {
  Image adj = im;
  const int want_h = static_cast<int>(model.input_shape[1]);
  const int want_w = static_cast<int>(model.input_shape[2]);
  if (adj.width != want_w || adj.height != want_h) {
    adj = resize_bilinear(adj, want_w, want_h);
  }
  const int want_c = static_cast<int>(model.input_shape[0]);
  if (adj.channels != want_c) {
    Image conv = Image::blank(adj.width, adj.height, want_c);
    for (int y = 0; y < adj.height; ++y) {
      for (int x = 0; x < adj.width; ++x) {
        if (want_c == 1) {
          double acc = 0.0;
          for (int c = 0; c < adj.channels; ++c) acc += adj.at(y, x, c);
          conv.at(y, x, 0) = acc / adj.channels;
        } else {
          for (int c = 0; c < want_c; ++c) conv.at(y, x, c) = adj.at(y, x, 0);
        }
      }
    }
    adj = std::move(conv);
  }
  return image_to_tensor(adj);
}

Image tensor_to_rgb_image(const Tensor& t) {
  Image im = tensor_to_image(t);
  if (im.channels == 3) return im;
  Image rgb = Image::blank(im.width, im.height, 3);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = im.at(y, x, 0);
    }
  }
  return rgb;
}

void write_trace_csv(const std::string& path,
                     const FusedExplanation& ex, ArtifactSink& sink) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  sink.note(path);
  os << "scale,grid,iteration,consistency,l1,total\n";
  for (std::size_t s = 0; s < ex.traces.size(); ++s) {
    const TrainTrace& tr = ex.traces[s];
    for (std::size_t i = 0; i < tr.iters.size(); ++i) {
      os << s + 1 << ',' << ex.masks[s].rows << ',' << i << ','
         << fmt(tr.iters[i].consistency) << ',' << fmt(tr.iters[i].l1) << ','
         << fmt(tr.iters[i].total) << '\n';
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

int cmd_train_model(const RunConfig& cfg, const std::string& out_path,
                    const std::string& emit_dir, int eval_count,
                    ArtifactSink& sink) {
  const auto dataset = synth_dataset(cfg.seed, cfg.dataset_size,
                                     static_cast<std::size_t>(cfg.image_size));
  ModelSpec model = build_tiny_cnn(cfg.seed,
                                   static_cast<std::size_t>(cfg.image_size),
                                   static_cast<std::size_t>(cfg.channels),
                                   static_cast<std::size_t>(cfg.classes));
  const TrainReport report = train_tiny_cnn(model, dataset, cfg.epochs,
                                            cfg.train_learning_rate, cfg.seed);
  save_model(model, out_path);
  sink.note(out_path);
  std::cout << "model " << out_path << '\n';
  std::cout << "train-samples " << dataset.size() << '\n';
  std::cout << "epochs " << cfg.epochs << '\n';
  std::cout << "final-train-accuracy " << fmt(report.final_accuracy) << '\n';
  if (!report.epoch_mean_loss.empty()) {
    std::cout << "final-epoch-loss " << fmt(report.epoch_mean_loss.back())
              << '\n';
  }

  if (!emit_dir.empty()) {
    // held-out evaluation pack: images plus ground-truth blob masks,
    // paired by filename stem
    fs::create_directories(fs::path(emit_dir) / "images");
    fs::create_directories(fs::path(emit_dir) / "masks");
    const auto eval_set =
        synth_dataset(cfg.seed + 1000003, static_cast<std::size_t>(eval_count),
                      static_cast<std::size_t>(cfg.image_size));
    std::ofstream labels((fs::path(emit_dir) / "labels.csv").string());
    labels << "name,label\n";
    sink.note((fs::path(emit_dir) / "labels.csv").string());
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%03zu", i);
      const std::string img_path =
          (fs::path(emit_dir) / "images" / (std::string(name) + ".pgm"))
              .string();
      const std::string mask_path =
          (fs::path(emit_dir) / "masks" / (std::string(name) + ".pgm"))
              .string();
      save_pnm(img_path, tensor_to_image(eval_set[i].image));
      sink.note(img_path);
      Image m = Image::blank(static_cast<int>(cfg.image_size),
                             static_cast<int>(cfg.image_size), 1);
      for (std::size_t p = 0; p < eval_set[i].gt_mask.size(); ++p) {
        m.pixels[p] = eval_set[i].gt_mask[p];
      }
      save_pnm(mask_path, m);
      sink.note(mask_path);
      labels << name << ',' << eval_set[i].label << '\n';
    }
    std::cout << "eval-pack " << emit_dir << " (" << eval_set.size()
              << " samples)\n";
  }
  return 0;
}

int cmd_explain(const RunConfig& cfg, const std::string& model_path,
                const std::string& image_path, const std::string& out_dir,
                ArtifactSink& sink) {
  const ModelSpec model = load_model(model_path);
  const Tensor x = to_model_input(load_pnm(image_path), model);
  const std::size_t cls = argmax(model_forward(model, x));
  const ActivationSelector sel = cfg.make_selector(cls);

  const FusedExplanation ex = run_mdm(model, x, sel, cfg.mdm);
  fs::create_directories(out_dir);

  const std::string heat_path = (fs::path(out_dir) / "heatmap.ppm").string();
  save_pnm(heat_path, render_heatmap(ex.heat, x, cfg.mdm.blend_alpha,
                                     cfg.mdm.blend_beta));
  sink.note(heat_path);

  const std::string bin_path =
      (fs::path(out_dir) / "binary_mask.ppm").string();
  save_pnm(bin_path, tensor_to_rgb_image(ex.binary_mask_image));
  sink.note(bin_path);

  const std::string fused_path = (fs::path(out_dir) / "fused.mdmm").string();
  write_mdmm(fused_path,
             {{"MF", ex.fused}, {"MB", ex.binary}, {"MH", ex.heat}});
  sink.note(fused_path);

  write_trace_csv((fs::path(out_dir) / "trace.csv").string(), ex, sink);

  std::cout << "class " << cls << '\n';
  std::cout << "gamma " << fmt(ex.gamma) << '\n';
  std::cout << "retained-pixels " << static_cast<long>(ex.binary.sum())
            << '\n';
  if (ex.degenerate) {
    std::cout << "warning: degenerate output (no pixel reached the "
                 "threshold)\n";
  }
  return 0;
}

struct EvalPair {
  std::string stem;
  std::string image_path;
  std::string mask_path;
};

std::vector<EvalPair> pair_by_stem(const std::string& images_dir,
                                   const std::string& masks_dir) {
  auto list_dir = [](const std::string& dir) {
    std::map<std::string, std::string> by_stem;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const std::string ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
        by_stem[e.path().stem().string()] = e.path().string();
      }
    }
    return by_stem;
  };
  const auto images = list_dir(images_dir);
  const auto masks = list_dir(masks_dir);
  std::vector<EvalPair> pairs;
  for (const auto& [stem, path] : images) {
    const auto it = masks.find(stem);
    if (it == masks.end()) {
      std::cerr << "warning: no ground-truth mask for " << stem
                << ", skipped\n";
      continue;
    }
    pairs.push_back({stem, path, it->second});
  }
  for (const auto& [stem, path] : masks) {
    if (!images.count(stem)) {
      std::cerr << "warning: no image for mask " << stem << ", skipped\n";
    }
  }
  check_value(!pairs.empty(), "evaluate: no paired image/mask files");
  return pairs;  // std::map iteration keeps deterministic filename order
}

int cmd_evaluate(const RunConfig& cfg, const std::string& model_path,
                 const std::string& images_dir, const std::string& masks_dir,
                 const std::string& out_dir, bool with_random,
                 ArtifactSink& sink) {
  const ModelSpec model = load_model(model_path);
  const auto pairs = pair_by_stem(images_dir, masks_dir);
  fs::create_directories(fs::path(out_dir) / "curves");

  std::vector<ImageMetrics> mdm_rows, random_rows;
  // percentile sweep accumulators, 70..99
  std::vector<double> sweep_percentiles;
  for (int q = 70; q <= 99; ++q) sweep_percentiles.push_back(q);
  std::vector<OverlapScores> sweep_mdm(sweep_percentiles.size());
  std::vector<OverlapScores> sweep_rnd(sweep_percentiles.size());

  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    const EvalPair& pair = pairs[pi];
    const Tensor x = to_model_input(load_pnm(pair.image_path), model);
    Image gt_img = load_pnm(pair.mask_path);
    check_shape(gt_img.channels == 1 &&
                    gt_img.width == static_cast<int>(x.shape()[2]) &&
                    gt_img.height == static_cast<int>(x.shape()[1]),
                "ground-truth mask shape mismatch for " + pair.stem);
    Tensor gt({x.shape()[1], x.shape()[2]});
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = gt_img.pixels[i] > 0.5 ? 1.0 : 0.0;
    }

    const std::size_t cls = argmax(model_forward(model, x));
    const ScoreFn prob = class_probability_fn(model, cls);
    const FusedExplanation ex =
        run_mdm(model, x, cfg.make_selector(cls), cfg.mdm);
    SaliencyMap sal;
    sal.values = ex.fused;
    sal.source = SaliencyMap::Source::Mdm;

    ImageMetrics row;
    row.name = pair.stem;
    {
      const double y = prob(x);
      const double o =
          prob(explained_map(x, sal, cfg.keep_percentile));
      row.drop_percent = std::max(0.0, y - o) / y * 100.0;
      row.increased = o > y;
    }
    const Curve dc = deletion_curve(prob, x, sal, cfg.curve_steps);
    const Curve ic = insertion_curve(prob, x, sal, cfg.curve_steps);
    row.deletion_auc = dc.auc;
    row.insertion_auc = ic.auc;
    const OverlapScores os = overlap_scores(
        binary_from_percentile(sal, cfg.overlap_percentile), gt);
    row.dice = os.dice;
    row.iou = os.iou;
    row.ppv = os.ppv;
    row.sensitivity = os.sensitivity;
    mdm_rows.push_back(row);

    const std::string del_path =
        (fs::path(out_dir) / "curves" / (pair.stem + "_deletion.csv"))
            .string();
    const std::string ins_path =
        (fs::path(out_dir) / "curves" / (pair.stem + "_insertion.csv"))
            .string();
    write_curve_csv(del_path, dc);
    sink.note(del_path);
    write_curve_csv(ins_path, ic);
    sink.note(ins_path);

    for (std::size_t qi = 0; qi < sweep_percentiles.size(); ++qi) {
      const OverlapScores qs = overlap_scores(
          binary_from_percentile(sal, sweep_percentiles[qi]), gt);
      sweep_mdm[qi].dice += qs.dice / pairs.size();
      sweep_mdm[qi].iou += qs.iou / pairs.size();
      sweep_mdm[qi].ppv += qs.ppv / pairs.size();
      sweep_mdm[qi].sensitivity += qs.sensitivity / pairs.size();
    }

    if (with_random) {
      ImageMetrics rrow;
      rrow.name = pair.stem;
      double rises = 0.0;
      for (int s = 0; s < cfg.baseline_seeds; ++s) {
        const SaliencyMap rs = random_saliency(
            cfg.seed + 7919 * static_cast<std::uint64_t>(s) + pi,
            x.shape()[1], x.shape()[2]);
        const double y = prob(x);
        const double o = prob(explained_map(x, rs, cfg.keep_percentile));
        rrow.drop_percent +=
            std::max(0.0, y - o) / y * 100.0 / cfg.baseline_seeds;
        rises += (o > y ? 1.0 : 0.0) / cfg.baseline_seeds;
        rrow.deletion_auc +=
            deletion_curve(prob, x, rs, cfg.curve_steps).auc /
            cfg.baseline_seeds;
        rrow.insertion_auc +=
            insertion_curve(prob, x, rs, cfg.curve_steps).auc /
            cfg.baseline_seeds;
        const OverlapScores ro = overlap_scores(
            binary_from_percentile(rs, cfg.overlap_percentile), gt);
        rrow.dice += ro.dice / cfg.baseline_seeds;
        rrow.iou += ro.iou / cfg.baseline_seeds;
        rrow.ppv += ro.ppv / cfg.baseline_seeds;
        rrow.sensitivity += ro.sensitivity / cfg.baseline_seeds;
        for (std::size_t qi = 0; qi < sweep_percentiles.size(); ++qi) {
          const OverlapScores qs = overlap_scores(
              binary_from_percentile(rs, sweep_percentiles[qi]), gt);
          const double denom =
              static_cast<double>(pairs.size()) * cfg.baseline_seeds;
          sweep_rnd[qi].dice += qs.dice / denom;
          sweep_rnd[qi].iou += qs.iou / denom;
          sweep_rnd[qi].ppv += qs.ppv / denom;
          sweep_rnd[qi].sensitivity += qs.sensitivity / denom;
        }
      }
      rrow.increased = rises > 0.5;
      random_rows.push_back(rrow);
    }
  }

  nlohmann::json report;
  report["schema_version"] = kConfigSchemaVersion;
  report["images"] = pairs.size();
  report["mdm"] = report_to_json(aggregate_metrics(mdm_rows));
  if (with_random) {
    report["random"] = report_to_json(aggregate_metrics(random_rows));
  }
  const std::string report_path =
      (fs::path(out_dir) / "report.json").string();
  {
    std::ofstream os(report_path);
    if (!os) throw FormatError("cannot open for writing: " + report_path);
    os << report.dump(2) << '\n';
  }
  sink.note(report_path);

  const std::string sweep_path =
      (fs::path(out_dir) / "overlap_sweep.csv").string();
  {
    std::ofstream os(sweep_path);
    if (!os) throw FormatError("cannot open for writing: " + sweep_path);
    os << "source,percentile,dice,iou,ppv,sensitivity\n";
    for (std::size_t qi = 0; qi < sweep_percentiles.size(); ++qi) {
      os << "mdm," << sweep_percentiles[qi] << ',' << fmt(sweep_mdm[qi].dice)
         << ',' << fmt(sweep_mdm[qi].iou) << ',' << fmt(sweep_mdm[qi].ppv)
         << ',' << fmt(sweep_mdm[qi].sensitivity) << '\n';
    }
    if (with_random) {
      for (std::size_t qi = 0; qi < sweep_percentiles.size(); ++qi) {
        os << "random," << sweep_percentiles[qi] << ','
           << fmt(sweep_rnd[qi].dice) << ',' << fmt(sweep_rnd[qi].iou) << ','
           << fmt(sweep_rnd[qi].ppv) << ','
           << fmt(sweep_rnd[qi].sensitivity) << '\n';
      }
    }
  }
  sink.note(sweep_path);

  std::cout << "images " << pairs.size() << '\n';
  std::cout << "mdm deletion-auc "
            << fmt(report["mdm"]["deletion_auc"].get<double>())
            << " insertion-auc "
            << fmt(report["mdm"]["insertion_auc"].get<double>()) << " dice@"
            << cfg.overlap_percentile << ' '
            << fmt(report["mdm"]["dice"].get<double>()) << '\n';
  if (with_random) {
    std::cout << "random deletion-auc "
              << fmt(report["random"]["deletion_auc"].get<double>())
              << " insertion-auc "
              << fmt(report["random"]["insertion_auc"].get<double>())
              << " dice@" << cfg.overlap_percentile << ' '
              << fmt(report["random"]["dice"].get<double>()) << '\n';
  }
  std::cout << "report " << report_path << '\n';
  return 0;
}

int cmd_oracle_test(std::uint64_t seed, int trials) {
  int exact = 0, grid_ok = 0;
  for (int i = 0; i < trials; ++i) {
    const OrderingTrial t = run_ordering_trial(seed + static_cast<std::uint64_t>(i));
    exact += t.rank_exact;
    grid_ok += t.grid_monotone;
    std::printf("trial %02d rho=%+.3f grid=%s lambda=%.4f weights=", i,
                t.rho, t.grid_monotone ? "monotone" : "INVERTED", t.lambda);
    for (double w : t.weights) std::printf("%.3f ", w);
    std::printf("\n");
  }
  const int need = trials - 2;
  const bool pass = exact >= need && grid_ok == trials;
  std::printf("oracle-test: %d/%d exact rankings (need >= %d), "
              "grid agreement %d/%d -> %s\n",
              exact, trials, need, grid_ok, trials, pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multiple-dynamic-masks explanation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  // flag overrides (flags win over config and MDM_SEED)
  long long seed_flag = -1;
  int steps_flag = -1, scales_flag = -1, iters_flag = -1;
  double lambda_flag = -2.0, percentile_flag = -1.0;
  app.add_option("--seed", seed_flag, "seed override");
  app.add_option("--steps", steps_flag, "curve steps override");
  app.add_option("--percentile", percentile_flag,
                 "overlap percentile override");
  app.add_option("--lambda", lambda_flag, "fixed lambda override");
  app.add_option("--scales", scales_flag, "mask scale count override");
  app.add_option("--iterations", iters_flag, "mask iterations override");

  auto* train = app.add_subcommand("train-model",
                                   "train the built-in cnn on synthetic data");
  std::string out_path = "model.mdmw", emit_dir;
  int eval_count = 20, epochs_flag = -1;
  train->add_option("--out", out_path, "output weight file");
  train->add_option("--emit-eval-dir", emit_dir,
                    "also write a held-out image/mask evaluation pack");
  train->add_option("--eval-count", eval_count, "evaluation pack size");
  train->add_option("--epochs", epochs_flag, "training epochs override");

  auto* explain = app.add_subcommand("explain", "explain one image");
  std::string model_path, image_path, out_dir = "explain_out";
  long long class_flag = -1;
  explain->add_option("--model", model_path, "weight file")->required();
  explain->add_option("--image", image_path, "PGM/PPM image")->required();
  explain->add_option("--out-dir", out_dir, "output directory");
  explain->add_option("--class", class_flag,
                      "explain this class logit (default: preserve the "
                      "whole logit vector)");

  auto* evaluate = app.add_subcommand("evaluate", "run the metric suite");
  std::string eval_model, images_dir, masks_dir, eval_out = "eval_out";
  bool with_random = false;
  evaluate->add_option("--model", eval_model, "weight file")->required();
  evaluate->add_option("--images", images_dir, "image directory")->required();
  evaluate->add_option("--gt-masks", masks_dir, "ground-truth mask directory")
      ->required();
  evaluate->add_option("--out-dir", eval_out, "output directory");
  evaluate->add_flag("--with-random-baseline", with_random,
                     "also evaluate seeded random saliency");

  auto* oracle = app.add_subcommand(
      "oracle-test", "trained-mask ordering check on the additive oracle");
  int trials = 20;
  oracle->add_option("--trials", trials, "number of seeded trials");

  CLI11_PARSE(app, argc, argv);

  ArtifactSink sink;
  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (const char* env = std::getenv("MDM_SEED")) {
      cfg.seed = std::strtoull(env, nullptr, 10);
    }
    if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
    if (steps_flag >= 0) cfg.curve_steps = steps_flag;
    if (percentile_flag >= 0.0) cfg.overlap_percentile = percentile_flag;
    if (lambda_flag >= -1.0) cfg.mdm.lambda_fixed = lambda_flag;
    if (scales_flag >= 0) cfg.mdm.scale_count = scales_flag;
    if (iters_flag >= 0) cfg.mdm.iterations = iters_flag;
    if (epochs_flag >= 0) cfg.epochs = epochs_flag;
    if (class_flag >= 0) {
      cfg.selector = "logit";
      cfg.class_index = static_cast<int>(class_flag);
    }
    cfg.validate();

    if (train->parsed()) {
      return cmd_train_model(cfg, out_path, emit_dir, eval_count, sink);
    }
    if (explain->parsed()) {
      return cmd_explain(cfg, model_path, image_path, out_dir, sink);
    }
    if (evaluate->parsed()) {
      return cmd_evaluate(cfg, eval_model, images_dir, masks_dir, eval_out,
                          with_random, sink);
    }
    if (oracle->parsed()) {
      return cmd_oracle_test(cfg.seed, trials);
    }
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    sink.discard_all();
    return 1;
  }
}
