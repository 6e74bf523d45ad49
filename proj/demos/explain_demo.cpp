// End-to-end walkthrough on synthetic data: train the tiny CNN, explain one
// held-out image, and print where the decision mask landed.

#include <cstdio>

#include "mdm/mdm.hpp"

using namespace mdm;

int main() {
  const std::size_t size = 24;
  std::printf("training the tiny cnn on quadrant blobs...\n");
  ModelSpec model = build_tiny_cnn(1, size);
  const auto train_set = synth_dataset(100, 240, size);
  const TrainReport report = train_tiny_cnn(model, train_set, 30, 3e-3, 7);
  std::printf("train accuracy: %.3f\n", report.final_accuracy);

  const auto held_out = synth_dataset(424242, 1, size);
  const SynthSample& sample = held_out[0];
  std::printf("held-out sample label: %d (quadrant %s-%s)\n", sample.label,
              sample.label / 2 ? "bottom" : "top",
              sample.label % 2 ? "right" : "left");

  MdmConfig cfg;
  cfg.lambda_auto_scale = 2.0;
  const FusedExplanation ex =
      run_mdm(model, sample.image, ActivationSelector::logit_vector(), cfg);

  std::printf("gamma: %.3f, retained pixels: %ld of %zu\n", ex.gamma,
              static_cast<long>(ex.binary.sum()), ex.binary.size());

  SaliencyMap sal;
  sal.values = ex.fused;
  sal.source = SaliencyMap::Source::Mdm;
  const OverlapScores os =
      overlap_scores(binary_from_percentile(sal, 90.0), sample.gt_mask);
  std::printf("overlap with the blob at percentile 90: dice=%.3f iou=%.3f\n",
              os.dice, os.iou);

  const ScoreFn prob =
      class_probability_fn(model, argmax(model_forward(model, sample.image)));
  std::printf("deletion auc: %.3f, insertion auc: %.3f\n",
              deletion_curve(prob, sample.image, sal).auc,
              insertion_curve(prob, sample.image, sal).auc);

  save_pnm("demo_heatmap.ppm", render_heatmap(ex.heat, sample.image, 0.5, 0.3));
  save_pnm("demo_binary.ppm",
           tensor_to_image(Tensor(
               {1, size, size}, binary_mask_image(sample.image, ex.binary)
                                    .data())));
  std::printf("wrote demo_heatmap.ppm and demo_binary.ppm\n");
  return 0;
}
