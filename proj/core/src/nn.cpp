#include "banet/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "conv_direct.hpp"

namespace banet::nn {

int conv_output_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

int transposed_output_size(int in, int kernel, int stride, int padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

// Geometry of one convolution: an "image" grid of `channels` x img dims and
// the output grid it is sampled onto.
struct ConvGeometry {
  int channels;
  Int3 img;
  Int3 grid;
  Int3 kernel;
  Int3 stride;
  Int3 pad;

  std::size_t grid_plane() const { return static_cast<std::size_t>(grid[1]) * grid[2]; }
  std::size_t taps() const {
    return static_cast<std::size_t>(channels) * kernel[0] * kernel[1] * kernel[2];
  }
};

// Valid output range [lo, hi) along one axis for kernel offset `k`.
inline void valid_range(int out_n, int in_n, int k, int s, int p, int& lo, int& hi) {
  // in = out * s + k - p must lie in [0, in_n)
  const int a = p - k;
  lo = a <= 0 ? 0 : (a + s - 1) / s;
  const int b = in_n - 1 + p - k;
  hi = b < 0 ? 0 : std::min(out_n, b / s + 1);
  if (hi < lo) hi = lo;
}

// Gathers the receptive fields of grid plane `z` into `col`, a column-major
// (grid_plane x taps) matrix.
template <typename T>
void im2col_plane(const T* img, const ConvGeometry& g, int z, T* col) {
  const int H = g.img[1], W = g.img[2];
  const int Ho = g.grid[1], Wo = g.grid[2];
  const std::size_t P = g.grid_plane();
  const std::size_t img_plane = static_cast<std::size_t>(H) * W;
  const std::size_t img_chan = img_plane * g.img[0];
  std::size_t k = 0;
  for (int c = 0; c < g.channels; ++c) {
    for (int a = 0; a < g.kernel[0]; ++a) {
      const int zi = z * g.stride[0] + a - g.pad[0];
      for (int b = 0; b < g.kernel[1]; ++b) {
        int ylo, yhi;
        valid_range(Ho, H, b, g.stride[1], g.pad[1], ylo, yhi);
        for (int e = 0; e < g.kernel[2]; ++e, ++k) {
          T* dst = col + k * P;
          if (zi < 0 || zi >= g.img[0]) {
            std::fill_n(dst, P, T(0));
            continue;
          }
          int xlo, xhi;
          valid_range(Wo, W, e, g.stride[2], g.pad[2], xlo, xhi);
          std::fill_n(dst, static_cast<std::size_t>(ylo) * Wo, T(0));
          for (int yo = ylo; yo < yhi; ++yo) {
            const int yi = yo * g.stride[1] + b - g.pad[1];
            const T* src = img + c * img_chan + zi * img_plane + static_cast<std::size_t>(yi) * W;
            T* row = dst + static_cast<std::size_t>(yo) * Wo;
            std::fill_n(row, xlo, T(0));
            if (g.stride[2] == 1) {
              std::copy_n(src + xlo + e - g.pad[2], xhi - xlo, row + xlo);
            } else {
              for (int xo = xlo; xo < xhi; ++xo) row[xo] = src[xo * g.stride[2] + e - g.pad[2]];
            }
            std::fill(row + xhi, row + Wo, T(0));
          }
          std::fill(dst + static_cast<std::size_t>(yhi) * Wo, dst + P, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col_plane: scatters `col` back onto the image, accumulating.
template <typename T>
void col2im_plane(const T* col, const ConvGeometry& g, int z, T* img) {
  const int H = g.img[1], W = g.img[2];
  const int Ho = g.grid[1], Wo = g.grid[2];
  const std::size_t P = g.grid_plane();
  const std::size_t img_plane = static_cast<std::size_t>(H) * W;
  const std::size_t img_chan = img_plane * g.img[0];
  std::size_t k = 0;
  for (int c = 0; c < g.channels; ++c) {
    for (int a = 0; a < g.kernel[0]; ++a) {
      const int zi = z * g.stride[0] + a - g.pad[0];
      for (int b = 0; b < g.kernel[1]; ++b) {
        int ylo, yhi;
        valid_range(Ho, H, b, g.stride[1], g.pad[1], ylo, yhi);
        for (int e = 0; e < g.kernel[2]; ++e, ++k) {
          if (zi < 0 || zi >= g.img[0]) continue;
          const T* src = col + k * P;
          int xlo, xhi;
          valid_range(Wo, W, e, g.stride[2], g.pad[2], xlo, xhi);
          for (int yo = ylo; yo < yhi; ++yo) {
            const int yi = yo * g.stride[1] + b - g.pad[1];
            T* dst = img + c * img_chan + zi * img_plane + static_cast<std::size_t>(yi) * W;
            const T* row = src + static_cast<std::size_t>(yo) * Wo;
            for (int xo = xlo; xo < xhi; ++xo) dst[xo * g.stride[2] + e - g.pad[2]] += row[xo];
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias(T* out, int n, int channels, std::size_t spatial, const T* bias) {
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < channels; ++c) {
      T* p = out + (static_cast<std::size_t>(i) * channels + c) * spatial;
      const T b = bias[c];
      for (std::size_t v = 0; v < spatial; ++v) p[v] += b;
    }
}

template <typename T>
void accumulate_bias_grad(const std::vector<T>& gout, int n, int channels, std::size_t spatial,
                          std::vector<T>& gbias) {
  for (int c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = gout.data() + (static_cast<std::size_t>(i) * channels + c) * spatial;
      for (std::size_t v = 0; v < spatial; ++v) acc += p[v];
    }
    gbias[c] += static_cast<T>(acc);
  }
}

void check_conv_params(const Shape& w, const Shape& b, int c_out, const char* op) {
  if (b.numel() != static_cast<std::size_t>(c_out) || b.c != c_out)
    throw ShapeError(std::string(op) + ": bias shape " + b.str() + " does not match weight " +
                     w.str());
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Stride-1 convolution through the direct kernels. The input gradient is the
// stride-1 convolution of the output gradient with mirrored, transposed
// weights and padding k - 1 - p.
template <typename T>
Tensor<T> conv3d_direct(const Tensor<T>& x, const ConvParams<T>& p, const Int3& out_dims) {
  const Shape& xs = x.shape();
  const int c_out = p.weight.shape().n;
  const int c_in = p.weight.shape().c;
  const Int3 k = p.kernel();
  const Int3 in_dims = xs.spatial_dims();
  const std::size_t in_spatial = xs.spatial();
  const std::size_t out_spatial = static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2];

  Tensor<T> out(Shape{xs.n, c_out, out_dims[0], out_dims[1], out_dims[2]});
  {
    const auto packed = direct::pack_weights(p.weight.data(), c_out, c_in, k, false);
    thread_local direct::Padded<T> buf;
    for (int n = 0; n < xs.n; ++n) {
      direct::pad_input(x.data() + n * c_in * in_spatial, c_in, in_dims, out_dims, k, p.padding, buf);
      direct::forward(buf, packed, c_out, out_dims, k, out.data() + n * c_out * out_spatial,
                      out_spatial, false);
    }
  }
  add_bias(out.data(), xs.n, c_out, out_spatial, p.bias.data());

  if (auto* tape = recording_tape<T>({&x, &p.weight, &p.bias})) {
    const Int3 pad = p.padding;
    tape->push("conv3d", {&x, &p.weight, &p.bias}, out,
               [xs_ = x.storage(), ws_ = p.weight.storage(), bs_ = p.bias.storage(),
                os_ = out.storage(), k, pad, in_dims, out_dims, in_spatial, out_spatial] {
                 auto* gx = grad_sink(xs_);
                 auto* gw = grad_sink(ws_);
                 auto* gb = grad_sink(bs_);
                 const int n_batch = xs_->shape.n;
                 const int c_out = ws_->shape.n;
                 const int c_in = ws_->shape.c;
                 const auto& go = os_->grad;
                 if (gb) accumulate_bias_grad(go, n_batch, c_out, out_spatial, *gb);
                 const Int3 one{1, 1, 1};
                 const Int3 zero{0, 0, 0};
                 Int3 full_pad{};
                 for (int a = 0; a < 3; ++a) full_pad[a] = k[a] - 1 - pad[a];
                 std::vector<T> flipped;
                 if (gx) flipped = direct::pack_weights(ws_->values.data(), c_out, c_in, k, true);
                 thread_local direct::Padded<T> gbuf, xbuf, gtile;
                 for (int n = 0; n < n_batch; ++n) {
                   const T* gon = go.data() + n * c_out * out_spatial;
                   if (gx) {
                     direct::pad_input(gon, c_out, out_dims, in_dims, k, full_pad, gbuf);
                     direct::forward(gbuf, flipped, c_in, in_dims, k,
                                     gx->data() + n * c_in * in_spatial, in_spatial, true);
                   }
                   if (gw) {
                     direct::pad_input(xs_->values.data() + n * c_in * in_spatial, c_in, in_dims,
                                       out_dims, k, pad, xbuf);
                     direct::pad_input(gon, c_out, out_dims, out_dims, one, zero, gtile);
                     direct::weight_grad(xbuf, gtile, c_out, out_dims, k, gw->data());
                   }
                 }
               });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvParams<T>& p) {
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  const int c_out = ws.n;
  const int c_in = ws.c;
  if (xs.c != c_in)
    throw ShapeError("conv3d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                     std::to_string(c_in));
  check_conv_params(ws, p.bias.shape(), c_out, "conv3d");
  const Int3 k = p.kernel();
  Int3 out_dims{};
  const Int3 in_dims = xs.spatial_dims();
  for (int a = 0; a < 3; ++a) {
    if (p.stride[a] < 1) throw ShapeError("conv3d: stride must be >= 1");
    const int span = in_dims[a] + 2 * p.padding[a] - k[a];
    if (span < 0) throw ShapeError("conv3d: kernel larger than padded input");
    if (p.stride[a] > 1 && in_dims[a] % p.stride[a] != 0)
      throw ShapeError("conv3d: input dims " + to_string(in_dims) + " not divisible under stride " +
                       to_string(p.stride));
    out_dims[a] = span / p.stride[a] + 1;
  }

  bool direct_ok = true;
  for (int a = 0; a < 3; ++a)
    direct_ok = direct_ok && p.stride[a] == 1 && p.padding[a] >= 0 && p.padding[a] <= k[a] - 1;
  if (direct_ok) return conv3d_direct(x, p, out_dims);

  const ConvGeometry g{c_in, in_dims, out_dims, k, p.stride, p.padding};
  const std::size_t P = g.grid_plane();
  const std::size_t K = g.taps();
  const std::size_t in_sample = static_cast<std::size_t>(c_in) * xs.spatial();
  const std::size_t out_spatial = static_cast<std::size_t>(out_dims[0]) * P;
  const std::size_t out_sample = static_cast<std::size_t>(c_out) * out_spatial;

  Tensor<T> out(Shape{xs.n, c_out, out_dims[0], out_dims[1], out_dims[2]});
  std::vector<T> col(P * K);
  ConstMatMap<T> wt(p.weight.data(), static_cast<Eigen::Index>(K), c_out);
  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data() + n * in_sample;
    T* on = out.data() + n * out_sample;
    for (int z = 0; z < out_dims[0]; ++z) {
      im2col_plane(xn, g, z, col.data());
      ConstMatMap<T> a(col.data(), static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(K));
      StridedMap<T> o(on + z * P, static_cast<Eigen::Index>(P), c_out,
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(out_spatial)));
      o.noalias() = a * wt;
    }
  }
  add_bias(out.data(), xs.n, c_out, out_spatial, p.bias.data());

  if (auto* tape = recording_tape<T>({&x, &p.weight, &p.bias})) {
    tape->push("conv3d", {&x, &p.weight, &p.bias}, out,
               [xs_ = x.storage(), ws_ = p.weight.storage(), bs_ = p.bias.storage(),
                os_ = out.storage(), g, in_sample, out_sample, out_spatial] {
                 auto* gx = grad_sink(xs_);
                 auto* gw = grad_sink(ws_);
                 auto* gb = grad_sink(bs_);
                 const Shape& s = xs_->shape;
                 const int c_out = ws_->shape.n;
                 const std::size_t P = g.grid_plane();
                 const std::size_t K = g.taps();
                 const auto& go = os_->grad;
                 if (gb) accumulate_bias_grad(go, s.n, c_out, out_spatial, *gb);
                 if (!gx && !gw) return;
                 std::vector<T> col(P * K);
                 ConstMatMap<T> wt(ws_->values.data(), static_cast<Eigen::Index>(K), c_out);
                 for (int n = 0; n < s.n; ++n) {
                   const T* xn = xs_->values.data() + n * in_sample;
                   const T* gon = go.data() + n * out_sample;
                   for (int z = 0; z < g.grid[0]; ++z) {
                     ConstStridedMap<T> dout(gon + z * P, static_cast<Eigen::Index>(P), c_out,
                                             Eigen::OuterStride<>(
                                                 static_cast<Eigen::Index>(out_spatial)));
                     if (gw) {
                       im2col_plane(xn, g, z, col.data());
                       ConstMatMap<T> a(col.data(), static_cast<Eigen::Index>(P),
                                        static_cast<Eigen::Index>(K));
                       MatMap<T> dw(gw->data(), static_cast<Eigen::Index>(K), c_out);
                       dw.noalias() += a.transpose() * dout;
                     }
                     if (gx) {
                       MatMap<T> dcol(col.data(), static_cast<Eigen::Index>(P),
                                      static_cast<Eigen::Index>(K));
                       dcol.noalias() = dout * wt.transpose();
                       col2im_plane(col.data(), g, z, gx->data() + n * in_sample);
                     }
                   }
                 }
               });
  }
  return out;
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const ConvParams<T>& p) {
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  const int c_in = ws.n;
  const int c_out = ws.c;
  if (xs.c != c_in)
    throw ShapeError("transposed_conv3d: input has " + std::to_string(xs.c) +
                     " channels, kernel expects " + std::to_string(c_in));
  check_conv_params(ws, p.bias.shape(), c_out, "transposed_conv3d");
  const Int3 k = p.kernel();
  const Int3 in_dims = xs.spatial_dims();
  Int3 out_dims{};
  for (int a = 0; a < 3; ++a) {
    if (p.stride[a] < 1) throw ShapeError("transposed_conv3d: stride must be >= 1");
    out_dims[a] = transposed_output_size(in_dims[a], k[a], p.stride[a], p.padding[a]);
    if (out_dims[a] < 1) throw ShapeError("transposed_conv3d: empty output");
  }

  // The output is the "image" and the input is the sampling grid.
  const ConvGeometry g{c_out, out_dims, in_dims, k, p.stride, p.padding};
  const std::size_t P = g.grid_plane();
  const std::size_t K = g.taps();
  const std::size_t in_spatial = xs.spatial();
  const std::size_t in_sample = static_cast<std::size_t>(c_in) * in_spatial;
  const std::size_t out_spatial =
      static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2];
  const std::size_t out_sample = static_cast<std::size_t>(c_out) * out_spatial;

  Tensor<T> out(Shape{xs.n, c_out, out_dims[0], out_dims[1], out_dims[2]});
  std::vector<T> col(P * K);
  ConstMatMap<T> wm(p.weight.data(), static_cast<Eigen::Index>(K), c_in);
  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data() + n * in_sample;
    T* on = out.data() + n * out_sample;
    for (int z = 0; z < in_dims[0]; ++z) {
      ConstStridedMap<T> xp(xn + z * P, static_cast<Eigen::Index>(P), c_in,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(in_spatial)));
      MatMap<T> c(col.data(), static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(K));
      c.noalias() = xp * wm.transpose();
      col2im_plane(col.data(), g, z, on);
    }
  }
  add_bias(out.data(), xs.n, c_out, out_spatial, p.bias.data());

  if (auto* tape = recording_tape<T>({&x, &p.weight, &p.bias})) {
    tape->push("transposed_conv3d", {&x, &p.weight, &p.bias}, out,
               [xs_ = x.storage(), ws_ = p.weight.storage(), bs_ = p.bias.storage(),
                os_ = out.storage(), g, in_sample, in_spatial, out_sample, out_spatial] {
                 auto* gx = grad_sink(xs_);
                 auto* gw = grad_sink(ws_);
                 auto* gb = grad_sink(bs_);
                 const Shape& s = xs_->shape;
                 const int c_in = ws_->shape.n;
                 const int c_out = ws_->shape.c;
                 const std::size_t P = g.grid_plane();
                 const std::size_t K = g.taps();
                 const auto& go = os_->grad;
                 if (gb) accumulate_bias_grad(go, s.n, c_out, out_spatial, *gb);
                 if (!gx && !gw) return;
                 std::vector<T> col(P * K);
                 ConstMatMap<T> wm(ws_->values.data(), static_cast<Eigen::Index>(K), c_in);
                 for (int n = 0; n < s.n; ++n) {
                   const T* xn = xs_->values.data() + n * in_sample;
                   const T* gon = go.data() + n * out_sample;
                   for (int z = 0; z < g.grid[0]; ++z) {
                     im2col_plane(gon, g, z, col.data());
                     ConstMatMap<T> dcol(col.data(), static_cast<Eigen::Index>(P),
                                         static_cast<Eigen::Index>(K));
                     if (gx) {
                       StridedMap<T> dx(gx->data() + n * in_sample + z * P,
                                        static_cast<Eigen::Index>(P), c_in,
                                        Eigen::OuterStride<>(static_cast<Eigen::Index>(in_spatial)));
                       dx.noalias() += dcol * wm;
                     }
                     if (gw) {
                       ConstStridedMap<T> xp(xn + z * P, static_cast<Eigen::Index>(P), c_in,
                                             Eigen::OuterStride<>(
                                                 static_cast<Eigen::Index>(in_spatial)));
                       MatMap<T> dw(gw->data(), static_cast<Eigen::Index>(K), c_in);
                       dw.noalias() += dcol.transpose() * xp;
                     }
                   }
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const InstanceNormParams<T>& p) {
  const Shape& s = x.shape();
  if (p.gamma.shape().c != s.c || p.beta.shape().c != s.c ||
      p.gamma.numel() != static_cast<std::size_t>(s.c) ||
      p.beta.numel() != static_cast<std::size_t>(s.c))
    throw ShapeError("instance_norm: affine parameters do not match " + s.str());
  if (!(p.epsilon > 0.0)) throw ShapeError("instance_norm: epsilon must be positive");
  const std::size_t M = s.spatial();
  const int slices = s.n * s.c;

  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(s.numel());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(slices));
  for (int i = 0; i < slices; ++i) {
    const int c = i % s.c;
    const T* src = x.data() + i * M;
    double mean = 0.0;
    for (std::size_t v = 0; v < M; ++v) mean += src[v];
    mean /= static_cast<double>(M);
    double var = 0.0;
    for (std::size_t v = 0; v < M; ++v) var += (src[v] - mean) * (src[v] - mean);
    var /= static_cast<double>(M);
    const double is = 1.0 / std::sqrt(var + p.epsilon);
    (*inv_std)[i] = is;
    const double g = p.gamma.data()[c];
    const double b = p.beta.data()[c];
    T* xh = xhat->data() + i * M;
    T* dst = out.data() + i * M;
    for (std::size_t v = 0; v < M; ++v) {
      const double h = (src[v] - mean) * is;
      xh[v] = static_cast<T>(h);
      dst[v] = static_cast<T>(g * h + b);
    }
  }

  if (auto* tape = recording_tape<T>({&x, &p.gamma, &p.beta})) {
    tape->push("instance_norm", {&x, &p.gamma, &p.beta}, out,
               [xs = x.storage(), gs = p.gamma.storage(), bs = p.beta.storage(),
                os = out.storage(), xhat, inv_std] {
                 auto* gx = grad_sink(xs);
                 auto* gg = grad_sink(gs);
                 auto* gb = grad_sink(bs);
                 const Shape& s = xs->shape;
                 const std::size_t M = s.spatial();
                 const auto& go = os->grad;
                 for (int i = 0; i < s.n * s.c; ++i) {
                   const int c = i % s.c;
                   const T* dy = go.data() + i * M;
                   const T* xh = xhat->data() + i * M;
                   double sum_dy = 0.0;
                   double sum_dy_xh = 0.0;
                   for (std::size_t v = 0; v < M; ++v) {
                     sum_dy += dy[v];
                     sum_dy_xh += static_cast<double>(dy[v]) * xh[v];
                   }
                   if (gg) (*gg)[c] += static_cast<T>(sum_dy_xh);
                   if (gb) (*gb)[c] += static_cast<T>(sum_dy);
                   if (gx) {
                     const double scale = gs->values[c] * (*inv_std)[i] / static_cast<double>(M);
                     T* dx = gx->data() + i * M;
                     const double md = static_cast<double>(M);
                     for (std::size_t v = 0; v < M; ++v)
                       dx[v] += static_cast<T>(scale * (md * dy[v] - sum_dy - xh[v] * sum_dy_xh));
                   }
                 }
               });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] >= T(0) ? xv[i] : slope * xv[i];
  if (auto* tape = recording_tape<T>({&x})) {
    tape->push("leaky_relu", {&x}, out, [xs = x.storage(), os = out.storage(), slope] {
      auto* gx = grad_sink(xs);
      const auto& xv = xs->values;
      const auto& go = os->grad;
      for (std::size_t i = 0; i < xv.size(); ++i)
        (*gx)[i] += xv[i] >= T(0) ? go[i] : slope * go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.c < 1) throw ShapeError("softmax_channels: needs at least one channel");
  const std::size_t M = s.spatial();
  Tensor<T> out(s);
  std::vector<double> e(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    const T* src = x.data() + static_cast<std::size_t>(n) * s.c * M;
    T* dst = out.data() + static_cast<std::size_t>(n) * s.c * M;
    for (std::size_t v = 0; v < M; ++v) {
      double mx = src[v];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, static_cast<double>(src[c * M + v]));
      double total = 0.0;
      for (int c = 0; c < s.c; ++c) {
        e[c] = std::exp(static_cast<double>(src[c * M + v]) - mx);
        total += e[c];
      }
      for (int c = 0; c < s.c; ++c) dst[c * M + v] = static_cast<T>(e[c] / total);
    }
  }
  if (auto* tape = recording_tape<T>({&x})) {
    tape->push("softmax_channels", {&x}, out, [xs = x.storage(), os = out.storage()] {
      auto* gx = grad_sink(xs);
      const Shape& s = xs->shape;
      const std::size_t M = s.spatial();
      const auto& y = os->values;
      const auto& go = os->grad;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * M;
        for (std::size_t v = 0; v < M; ++v) {
          double dot = 0.0;
          for (int c = 0; c < s.c; ++c)
            dot += static_cast<double>(go[base + c * M + v]) * y[base + c * M + v];
          for (int c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * M + v;
            (*gx)[i] += static_cast<T>(y[i] * (go[i] - dot));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

template <typename T>
Tensor<T> he_normal(const Shape& shape, double fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  std::vector<T> values(shape.numel());
  for (auto& v : values) v = static_cast<T>(dist(rng));
  Tensor<T> t(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
ConvParams<T> init_conv(int c_out, int c_in, Int3 kernel, Int3 stride, Int3 padding,
                        std::uint64_t seed) {
  if (c_out < 1 || c_in < 1) throw ShapeError("init_conv: channel counts must be >= 1");
  const double fan_in = static_cast<double>(c_in) * kernel[0] * kernel[1] * kernel[2];
  ConvParams<T> p;
  p.weight = he_normal<T>(Shape{c_out, c_in, kernel[0], kernel[1], kernel[2]}, fan_in, seed);
  p.bias = Tensor<T>(Shape{1, c_out, 1, 1, 1});
  p.bias.set_requires_grad(true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
ConvParams<T> init_transposed_conv(int c_in, int c_out, Int3 kernel, Int3 stride,
                                   std::uint64_t seed) {
  if (c_out < 1 || c_in < 1) throw ShapeError("init_transposed_conv: channel counts must be >= 1");
  double fan_in = c_in;
  for (int a = 0; a < 3; ++a) fan_in *= std::max(1.0, static_cast<double>(kernel[a]) / stride[a]);
  ConvParams<T> p;
  p.weight = he_normal<T>(Shape{c_in, c_out, kernel[0], kernel[1], kernel[2]}, fan_in, seed);
  p.bias = Tensor<T>(Shape{1, c_out, 1, 1, 1});
  p.bias.set_requires_grad(true);
  p.stride = stride;
  p.padding = {0, 0, 0};
  return p;
}

template <typename T>
InstanceNormParams<T> init_instance_norm(int channels, double epsilon) {
  InstanceNormParams<T> p;
  p.gamma = Tensor<T>(Shape{1, channels, 1, 1, 1}, T(1));
  p.beta = Tensor<T>(Shape{1, channels, 1, 1, 1}, T(0));
  p.gamma.set_requires_grad(true);
  p.beta.set_requires_grad(true);
  p.epsilon = epsilon;
  return p;
}

#define BANET_INSTANTIATE_NN(T)                                                         \
  template Tensor<T> conv3d(const Tensor<T>&, const ConvParams<T>&);                    \
  template Tensor<T> transposed_conv3d(const Tensor<T>&, const ConvParams<T>&);         \
  template Tensor<T> instance_norm(const Tensor<T>&, const InstanceNormParams<T>&);     \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                   \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                \
  template ConvParams<T> init_conv<T>(int, int, Int3, Int3, Int3, std::uint64_t);       \
  template ConvParams<T> init_transposed_conv<T>(int, int, Int3, Int3, std::uint64_t);  \
  template InstanceNormParams<T> init_instance_norm<T>(int, double);

BANET_INSTANTIATE_NN(float)
BANET_INSTANTIATE_NN(double)

}  // namespace banet::nn
