#pragma once

// Boundary-aware encoder/decoder network: one shared encoder feeding a
// boundary decoder and a segmentation decoder. At every decoder scale the
// boundary decoder's boundary probability gates the upsampled segmentation
// features as (1 + p) * U(f) before the skip concatenation.
//
// Scales are indexed from the finest: s = 0 is full patch resolution,
// s = levels - 2 the coarsest supervised output.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "banet/nn.hpp"

namespace banet::arch {

struct NetworkConfig {
  int levels = 3;  // resolution levels, >= 2
  int base_channels = 32;
  int channel_cap = 320;
  int num_classes = 4;  // including background
  int boundary_channels = 2;
  Int3 patch_dims{32, 32, 32};
  int in_channels = 1;
  // false builds the plain dual-path ablation: no boundary decoder and no
  // feature gating.
  bool boundary_branch = true;

  void validate() const;
  int channels_at(int level) const;
  std::vector<int> encoder_widths() const;
  int supervised_scales() const { return levels - 1; }
  Int3 dims_at_scale(int scale) const;
};

template <typename T>
struct ConvNormAct {
  nn::ConvParams<T> conv;
  nn::InstanceNormParams<T> norm;
};

template <typename T>
struct EncoderBlock {
  ConvNormAct<T> first;  // strided for every level but the first
  ConvNormAct<T> second;
};

template <typename T>
struct DecoderBlock {
  nn::ConvParams<T> up;  // transposed conv, kernel 2, stride 2
  ConvNormAct<T> first;  // consumes [upsampled | skip]
  ConvNormAct<T> second;
  nn::ConvParams<T> head;  // 1x1x1 conv to class logits
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

struct ForwardOptions {
  // Replaces the boundary probability used for feature gating by a constant.
  std::optional<double> injected_boundary_prob;
  // false skips the gating step (identity instead of (1 + p) * U(f)).
  bool attention = true;
};

template <typename T>
struct ForwardOutputs {
  std::vector<Tensor<T>> seg_probs;       // fine -> coarse, K channels
  std::vector<Tensor<T>> boundary_probs;  // fine -> coarse, 2 channels
  std::vector<Tensor<T>> upsampled;       // U(f) entering each seg block
  std::vector<Tensor<T>> enhanced;        // gated features before concat
};

/// (1 + boundary_prob) * upsampled, boundary_prob broadcast over channels.
template <typename T>
Tensor<T> enhance(const Tensor<T>& upsampled, const Tensor<T>& boundary_prob);

template <typename T>
class BaNet {
 public:
  static BaNet build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }

  ForwardOutputs<T> forward_train(const Tensor<T>& x, const ForwardOptions& opts = {}) const;
  /// Full-resolution segmentation probabilities only; coarse heads skipped.
  Tensor<T> forward_infer(const Tensor<T>& x, const ForwardOptions& opts = {}) const;

  /// All trainable tensors in a fixed order (the checkpoint manifest order).
  std::vector<NamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;

  std::vector<EncoderBlock<T>>& encoder() { return encoder_; }
  std::vector<DecoderBlock<T>>& boundary_decoder() { return boundary_decoder_; }
  std::vector<DecoderBlock<T>>& seg_decoder() { return seg_decoder_; }

 private:
  ForwardOutputs<T> run(const Tensor<T>& x, const ForwardOptions& opts, bool all_heads) const;
  void check_input(const Tensor<T>& x) const;

  NetworkConfig config_;
  std::vector<EncoderBlock<T>> encoder_;
  std::vector<DecoderBlock<T>> boundary_decoder_;  // index = scale
  std::vector<DecoderBlock<T>> seg_decoder_;       // index = scale
};

/// Stable per-parameter seed derived from the network seed and the name.
std::uint64_t parameter_seed(std::uint64_t seed, const std::string& name);

}  // namespace banet::arch
