#pragma once

// Whole-volume prediction, probability ensembling and Dice evaluation.

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "banet/network.hpp"
#include "banet/volume.hpp"

namespace banet::infer {

struct Prediction {
  int num_classes = 0;
  Int3 dims{0, 0, 0};
  Real3 spacing{1.0, 1.0, 1.0};
  std::vector<float> probs;  // (K, D, H, W)
  io::LabelVolume labels;

  float prob(int k, std::size_t voxel) const { return probs[k * io::voxel_count(dims) + voxel]; }
};

/// Per-voxel argmax of (K, D, H, W) probabilities; ties go to the lower class.
io::LabelVolume argmax_labels(std::span<const float> probs, int num_classes, const Int3& dims,
                              const Real3& spacing);

/// Window origins along one axis: evenly spaced, first at 0 and last at
/// padded - patch, with at most floor(patch * (1 - overlap)) between them.
std::vector<int> window_origins(int padded, int patch, double overlap);

/// Tiles a preprocessed volume with patch-sized windows and averages the
/// softmax outputs of every window covering a voxel. The volume is
/// zero-padded at the far end of each axis up to at least the patch size;
/// padding is cropped from the result.
Prediction sliding_window_predict(const arch::BaNet<float>& net, const io::Volume& v,
                                  const Int3& patch_dims, double overlap,
                                  const arch::ForwardOptions& opts = {});

/// Arithmetic mean of member probabilities, relabelled by argmax.
Prediction ensemble(std::span<const Prediction> preds);

/// Trilinear per-channel resampling onto `out_dims`, renormalized per voxel.
Prediction resample_prediction(const Prediction& p, const Int3& out_dims, const Real3& out_spacing);

struct DiceReport {
  std::vector<double> per_class;  // classes 1..K-1
  double mean = 0.0;
};

/// Both masks empty counts as 1, exactly one empty as 0.
DiceReport dice_score(const io::LabelVolume& pred, const io::LabelVolume& gt, int num_classes);

/// CSV with header `class,dice`, one row per foreground class and a `mean` row.
void write_dice_csv(const DiceReport& report, const std::filesystem::path& path);

/// Writes the label volume and, if requested, the probabilities as one f32
/// volume of dims (K*D, H, W) whose header also carries "stacked_channels".
void save_prediction(const Prediction& p, const std::filesystem::path& labels_path,
                     const std::optional<std::filesystem::path>& probs_path = std::nullopt);

/// Binary PGM of the middle z slice, gray level proportional to class index.
void write_midslice_pgm(const io::LabelVolume& labels, const std::filesystem::path& path);

}  // namespace banet::infer
