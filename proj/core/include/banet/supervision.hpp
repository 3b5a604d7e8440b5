#pragma once

// Deep-supervision targets and the joint Dice + cross-entropy objective.

#include <span>
#include <vector>

#include "banet/tensor.hpp"
#include "banet/volume.hpp"

namespace banet::sup {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kProbClamp = 1e-7;

/// Level s is `y` subsampled by 2^s at even indices; level 0 is `y` itself.
std::vector<io::LabelVolume> label_pyramid(const io::LabelVolume& y, int scales);

/// Binary surface mask: 1 where the label is nonzero and some face
/// neighbor carries a different label (outside the volume counts as
/// background).
io::LabelVolume extract_boundary(const io::LabelVolume& y);

/// (N, K, D, H, W) indicator tensor for a batch of equally shaped volumes.
template <typename T>
Tensor<T> one_hot(std::span<const io::LabelVolume> batch, int num_classes);
template <typename T>
Tensor<T> one_hot(const io::LabelVolume& y, int num_classes);

/// Scale weights 2^-s normalized to sum to one, s = 0 (finest) first.
std::vector<double> deep_supervision_weights(int scales);

template <typename T>
struct SupervisionTargets {
  std::vector<Tensor<T>> seg_onehot;       // fine -> coarse, K channels
  std::vector<Tensor<T>> boundary_onehot;  // fine -> coarse, 2 channels
  std::vector<double> omega;
};

/// Builds per-scale targets for a batch of label patches. Boundaries are
/// extracted after downsampling, at each level.
template <typename T>
SupervisionTargets<T> make_targets(std::span<const io::LabelVolume> batch, int num_classes,
                                   int scales);

/// Dice loss averaged over foreground channels (c >= 1) plus the mean
/// per-channel binary cross-entropy. Sums run over every voxel of the batch.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& probs, const Tensor<T>& target_onehot);

/// sum_s omega_s * (L_seg(s) + boundary_weight * L_bnd(s)). An empty
/// boundary list means a network without a boundary branch.
template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> seg_probs, std::span<const Tensor<T>> boundary_probs,
                     const SupervisionTargets<T>& targets, double boundary_weight = 1.0);

}  // namespace banet::sup
