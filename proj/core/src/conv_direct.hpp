#pragma once

// Direct stride-1 convolution kernels. The input is copied once into a
// zero-padded buffer whose rows are a whole number of x-tiles wide; each
// output row tile then accumulates a (channel block x tile) register block
// over all input channels and kernel taps.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#include "banet/common.hpp"

namespace banet::nn::direct {

template <typename T>
inline constexpr int kTile = 64 / static_cast<int>(sizeof(T));
inline constexpr int kBlock = 8;

template <typename T>
struct Vec;
template <>
struct Vec<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct Vec<double> {
  typedef double type __attribute__((vector_size(64)));
};

template <typename T>
inline typename Vec<T>::type load(const T* p) {
  typename Vec<T>::type v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

// Padded buffer layout: (c, Dp, Hp, Wp) with Dp = out_d + kd - 1 and
// Wp = tiles * tile + kw - 1.
template <typename T>
struct Padded {
  int channels = 0;
  int dp = 0, hp = 0, wp = 0;
  std::vector<T> data;

  const T* row(int c, int z, int y) const {
    return data.data() + ((static_cast<std::size_t>(c) * dp + z) * hp + y) * wp;
  }
};

template <typename T>
int tiles_for(int w) {
  return (w + kTile<T> - 1) / kTile<T>;
}

// Copies src (channels, in dims) into a padded buffer sized for an output
// grid `out` under kernel `k` and padding `pad`.
template <typename T>
void pad_input(const T* src, int channels, const Int3& in, const Int3& out, const Int3& k,
               const Int3& pad, Padded<T>& p) {
  p.channels = channels;
  p.dp = out[0] + k[0] - 1;
  p.hp = out[1] + k[1] - 1;
  p.wp = tiles_for<T>(out[2]) * kTile<T> + k[2] - 1;
  p.data.assign(static_cast<std::size_t>(channels) * p.dp * p.hp * p.wp, T(0));
  const std::size_t in_plane = static_cast<std::size_t>(in[1]) * in[2];
  for (int c = 0; c < channels; ++c)
    for (int z = 0; z < in[0]; ++z) {
      const int zp = z + pad[0];
      if (zp < 0 || zp >= p.dp) continue;
      for (int y = 0; y < in[1]; ++y) {
        const int yp = y + pad[1];
        if (yp < 0 || yp >= p.hp) continue;
        const T* s = src + (static_cast<std::size_t>(c) * in[0] + z) * in_plane +
                     static_cast<std::size_t>(y) * in[2];
        T* d = p.data.data() + ((static_cast<std::size_t>(c) * p.dp + zp) * p.hp + yp) * p.wp;
        for (int x = 0; x < in[2]; ++x) {
          const int xp = x + pad[2];
          if (xp >= 0 && xp < p.wp) d[xp] = s[x];
        }
      }
    }
}

// Packs weights (C_out, C_in, kd, kh, kw) into blocks of kBlock output
// channels laid out as [block][ci][tap][kBlock]; missing channels are zero.
// With `flip_transpose` the packed kernel is that of the adjoint convolution:
// in and out channels swap and taps are mirrored.
template <typename T>
std::vector<T> pack_weights(const T* w, int c_out, int c_in, const Int3& k, bool flip_transpose) {
  const int taps = k[0] * k[1] * k[2];
  const int oc = flip_transpose ? c_in : c_out;
  const int ic = flip_transpose ? c_out : c_in;
  const int blocks = (oc + kBlock - 1) / kBlock;
  std::vector<T> packed(static_cast<std::size_t>(blocks) * ic * taps * kBlock, T(0));
  for (int o = 0; o < oc; ++o)
    for (int i = 0; i < ic; ++i)
      for (int t = 0; t < taps; ++t) {
        T v;
        if (!flip_transpose) {
          v = w[(static_cast<std::size_t>(o) * c_in + i) * taps + t];
        } else {
          v = w[(static_cast<std::size_t>(i) * c_in + o) * taps + (taps - 1 - t)];
        }
        packed[((static_cast<std::size_t>(o / kBlock) * ic + i) * taps + t) * kBlock + o % kBlock] = v;
      }
  return packed;
}

// Accumulates NT consecutive x-tiles of one output row for a block of
// kBlock output channels.
template <typename T, int NT>
inline void forward_tiles(const Padded<T>& in, const T* wb, const Int3& k, int z, int y, int t0,
                          typename Vec<T>::type (&acc)[NT][kBlock]) {
  using V = typename Vec<T>::type;
  constexpr int XT = kTile<T>;
  constexpr int CB = kBlock;
  for (int j = 0; j < NT; ++j)
    for (int co = 0; co < CB; ++co) acc[j][co] = V{};
  const T* wv = wb;
  for (int ci = 0; ci < in.channels; ++ci)
    for (int a = 0; a < k[0]; ++a)
      for (int b = 0; b < k[1]; ++b) {
        const T* row = in.row(ci, z + a, y + b) + t0 * XT;
        for (int e = 0; e < k[2]; ++e, wv += CB) {
          V src[NT];
          for (int j = 0; j < NT; ++j) src[j] = load(row + e + j * XT);
#pragma GCC unroll 8
          for (int co = 0; co < CB; ++co) {
            const T w = wv[co];
            for (int j = 0; j < NT; ++j) acc[j][co] += w * src[j];
          }
        }
      }
}

// out[co] (+)= sum_ci sum_tap w * in over one sample. `out` rows are out[2]
// wide; `out_spatial` is the per-channel stride.
template <typename T>
void forward(const Padded<T>& in, const std::vector<T>& packed, int c_out, const Int3& out,
             const Int3& k, T* dst, std::size_t out_spatial, bool accumulate) {
  using V = typename Vec<T>::type;
  constexpr int XT = kTile<T>;
  constexpr int CB = kBlock;
  const int taps = k[0] * k[1] * k[2];
  const int c_in = in.channels;
  const int tiles = tiles_for<T>(out[2]);
  const int blocks = (c_out + CB - 1) / CB;

  auto store = [&](const V* acc, int blk, int co_n, int z, int y, int t) {
    const int x0 = t * XT;
    const int xn = std::min(XT, out[2] - x0);
    const std::size_t base = (static_cast<std::size_t>(z) * out[1] + y) * out[2] + x0;
    for (int co = 0; co < co_n; ++co) {
      T* d = dst + static_cast<std::size_t>(blk * CB + co) * out_spatial + base;
      if (accumulate) {
        for (int x = 0; x < xn; ++x) d[x] += acc[co][x];
      } else {
        for (int x = 0; x < xn; ++x) d[x] = acc[co][x];
      }
    }
  };

  for (int blk = 0; blk < blocks; ++blk) {
    const T* wb = packed.data() + static_cast<std::size_t>(blk) * c_in * taps * CB;
    const int co_n = std::min(CB, c_out - blk * CB);
    for (int z = 0; z < out[0]; ++z)
      for (int y = 0; y < out[1]; ++y) {
        int t = 0;
        for (; t + 2 <= tiles; t += 2) {
          V acc[2][CB];
          forward_tiles<T, 2>(in, wb, k, z, y, t, acc);
          store(acc[0], blk, co_n, z, y, t);
          store(acc[1], blk, co_n, z, y, t + 1);
        }
        if (t < tiles) {
          V acc[1][CB];
          forward_tiles<T, 1>(in, wb, k, z, y, t, acc);
          store(acc[0], blk, co_n, z, y, t);
        }
      }
  }
}

// Register block for weight_grad: KW horizontal taps x kBlock channels.
template <typename T, int KW>
inline void weight_grad_rows(const Padded<T>& in, const T* const (&g_plane)[kBlock], int ci, int z,
                             int a, int b, int e0, const Int3& out, int tiles,
                             typename Vec<T>::type (&acc)[KW][kBlock]) {
  using V = typename Vec<T>::type;
  constexpr int XT = kTile<T>;
  constexpr int CB = kBlock;
  for (int e = 0; e < KW; ++e)
    for (int co = 0; co < CB; ++co) acc[e][co] = V{};
  const std::size_t g_row = static_cast<std::size_t>(tiles) * XT;
  for (int y = 0; y < out[1]; ++y) {
    const T* src_row = in.row(ci, z + a, y + b) + e0;
    for (int t = 0; t < tiles; ++t) {
      V src[KW];
      for (int e = 0; e < KW; ++e) src[e] = load(src_row + t * XT + e);
#pragma GCC unroll 8
      for (int co = 0; co < CB; ++co) {
        const V g = load(g_plane[co] + y * g_row + t * XT);
        for (int e = 0; e < KW; ++e) acc[e][co] += g * src[e];
      }
    }
  }
}

// dW[co][ci][tap] += sum over positions of dout[co] * in[ci] shifted by tap.
// `dout` is a padded (c_out, out_d, out_h, tiles * tile) copy whose tail
// columns are zero. Work is blocked by output plane so that the plane of
// dout stays in L1; lane partial sums are reduced at the end.
template <typename T>
void weight_grad(const Padded<T>& in, const Padded<T>& dout, int c_out, const Int3& out,
                 const Int3& k, T* dw) {
  using V = typename Vec<T>::type;
  constexpr int XT = kTile<T>;
  constexpr int CB = kBlock;
  const int taps = k[0] * k[1] * k[2];
  const int c_in = in.channels;
  const int tiles = tiles_for<T>(out[2]);
  const int blocks = (c_out + CB - 1) / CB;
  const std::vector<T> zeros(static_cast<std::size_t>(out[1]) * dout.wp, T(0));
  std::vector<V> partial(static_cast<std::size_t>(c_in) * taps * CB);

  auto flush = [&](const V* acc, int ci, int a, int b, int e) {
    V* dst = partial.data() +
             (static_cast<std::size_t>(ci) * taps + (a * k[1] + b) * k[2] + e) * CB;
    for (int co = 0; co < CB; ++co) dst[co] += acc[co];
  };

  for (int blk = 0; blk < blocks; ++blk) {
    const int co_n = std::min(CB, c_out - blk * CB);
    std::fill(partial.begin(), partial.end(), V{});
    for (int z = 0; z < out[0]; ++z) {
      const T* g_plane[CB];
      for (int co = 0; co < CB; ++co)
        g_plane[co] = co < co_n ? dout.row(blk * CB + co, z, 0) : zeros.data();
      for (int ci = 0; ci < c_in; ++ci)
        for (int a = 0; a < k[0]; ++a)
          for (int b = 0; b < k[1]; ++b) {
            if (k[2] == 3) {
              V acc[3][CB];
              weight_grad_rows<T, 3>(in, g_plane, ci, z, a, b, 0, out, tiles, acc);
              for (int e = 0; e < 3; ++e) flush(acc[e], ci, a, b, e);
            } else {
              for (int e = 0; e < k[2]; ++e) {
                V acc[1][CB];
                weight_grad_rows<T, 1>(in, g_plane, ci, z, a, b, e, out, tiles, acc);
                flush(acc[0], ci, a, b, e);
              }
            }
          }
    }
    for (int ci = 0; ci < c_in; ++ci)
      for (int tap = 0; tap < taps; ++tap)
        for (int co = 0; co < co_n; ++co) {
          const V& v = partial[(static_cast<std::size_t>(ci) * taps + tap) * CB + co];
          T s = T(0);
          for (int x = 0; x < XT; ++x) s += v[x];
          dw[(static_cast<std::size_t>(blk * CB + co) * c_in + ci) * taps + tap] += s;
        }
  }
}

}  // namespace banet::nn::direct
