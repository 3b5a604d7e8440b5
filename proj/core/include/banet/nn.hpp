#pragma once

// Differentiable layers for the 3-D encoder/decoder backbone.

#include <cstdint>

#include "banet/tensor.hpp"

namespace banet::nn {

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kInstanceNormEps = 1e-5;

/// Convolution parameters.
///
/// Regular convolutions store weight as (C_out, C_in, kd, kh, kw).
/// Transposed convolutions store weight as (C_in, C_out, kd, kh, kw), so a
/// transposed convolution is the exact adjoint of the regular convolution
/// with the same weight tensor. Bias is (1, C_out, 1, 1, 1) in both cases.
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
  Int3 stride{1, 1, 1};
  Int3 padding{0, 0, 0};

  Int3 kernel() const { return {weight.shape().d, weight.shape().h, weight.shape().w}; }
};

template <typename T>
struct InstanceNormParams {
  Tensor<T> gamma;  // (1, C, 1, 1, 1)
  Tensor<T> beta;   // (1, C, 1, 1, 1)
  double epsilon = kInstanceNormEps;

  int channels() const { return gamma.shape().c; }
};

/// Output spatial size of a convolution along one axis.
int conv_output_size(int in, int kernel, int stride, int padding);
/// Output spatial size of a transposed convolution along one axis.
int transposed_output_size(int in, int kernel, int stride, int padding);

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvParams<T>& p);

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const ConvParams<T>& p);

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const InstanceNormParams<T>& p);

/// y = x for x >= 0, slope * x otherwise. The derivative at 0 is 1.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(kLeakySlope));

/// Softmax over the channel axis at every voxel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

/// He-normal weights (std = sqrt(2 / fan_in)) and zero bias, where fan_in
/// is C_in * kd * kh * kw. Deterministic for a given seed.
template <typename T>
ConvParams<T> init_conv(int c_out, int c_in, Int3 kernel, Int3 stride, Int3 padding,
                        std::uint64_t seed);

/// Transposed-convolution counterpart of init_conv. fan_in counts the input
/// contributions per output voxel: C_in * prod(kernel / stride).
template <typename T>
ConvParams<T> init_transposed_conv(int c_in, int c_out, Int3 kernel, Int3 stride,
                                   std::uint64_t seed);

/// gamma = 1, beta = 0.
template <typename T>
InstanceNormParams<T> init_instance_norm(int channels, double epsilon = kInstanceNormEps);

}  // namespace banet::nn
