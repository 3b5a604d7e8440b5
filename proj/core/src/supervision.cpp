#include "banet/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace banet::sup {

std::vector<io::LabelVolume> label_pyramid(const io::LabelVolume& y, int scales) {
  if (scales < 1) throw DataError("label_pyramid needs at least one scale");
  const int factor = 1 << (scales - 1);
  for (int a = 0; a < 3; ++a)
    if (y.dims[a] % factor != 0)
      throw DataError("label dims " + to_string(y.dims) + " not divisible by " +
                      std::to_string(factor));
  std::vector<io::LabelVolume> out;
  out.push_back(y);
  for (int s = 1; s < scales; ++s) {
    const io::LabelVolume& prev = out.back();
    const Int3 d{prev.dims[0] / 2, prev.dims[1] / 2, prev.dims[2] / 2};
    const Real3 sp{prev.spacing[0] * 2, prev.spacing[1] * 2, prev.spacing[2] * 2};
    io::LabelVolume next(d, sp, prev.num_classes);
    for (int z = 0; z < d[0]; ++z)
      for (int yy = 0; yy < d[1]; ++yy)
        for (int x = 0; x < d[2]; ++x) next.at(z, yy, x) = prev.at(2 * z, 2 * yy, 2 * x);
    out.push_back(std::move(next));
  }
  return out;
}

io::LabelVolume extract_boundary(const io::LabelVolume& y) {
  io::LabelVolume out(y.dims, y.spacing, 2);
  const auto [D, H, W] = y.dims;
  auto label_or_bg = [&](int z, int yy, int x) -> int {
    if (z < 0 || yy < 0 || x < 0 || z >= D || yy >= H || x >= W) return 0;
    return y.at(z, yy, x);
  };
  for (int z = 0; z < D; ++z)
    for (int yy = 0; yy < H; ++yy)
      for (int x = 0; x < W; ++x) {
        const int l = y.at(z, yy, x);
        if (l == 0) continue;
        const bool edge = label_or_bg(z - 1, yy, x) != l || label_or_bg(z + 1, yy, x) != l ||
                          label_or_bg(z, yy - 1, x) != l || label_or_bg(z, yy + 1, x) != l ||
                          label_or_bg(z, yy, x - 1) != l || label_or_bg(z, yy, x + 1) != l;
        out.at(z, yy, x) = edge ? 1 : 0;
      }
  return out;
}

template <typename T>
Tensor<T> one_hot(std::span<const io::LabelVolume> batch, int num_classes) {
  if (batch.empty()) throw DataError("one_hot of an empty batch");
  const Int3 dims = batch.front().dims;
  Tensor<T> out(Shape{static_cast<int>(batch.size()), num_classes, dims[0], dims[1], dims[2]});
  const std::size_t M = io::voxel_count(dims);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& y = batch[n];
    if (y.dims != dims) throw DataError("one_hot: batch volumes differ in shape");
    T* base = out.data() + n * num_classes * M;
    for (std::size_t v = 0; v < M; ++v) {
      const int l = y.labels[v];
      if (l >= num_classes)
        throw DataError("one_hot: label " + std::to_string(l) + " >= num_classes " +
                        std::to_string(num_classes));
      base[l * M + v] = T(1);
    }
  }
  return out;
}

template <typename T>
Tensor<T> one_hot(const io::LabelVolume& y, int num_classes) {
  return one_hot<T>(std::span<const io::LabelVolume>(&y, 1), num_classes);
}

std::vector<double> deep_supervision_weights(int scales) {
  if (scales < 1) throw DataError("deep supervision needs at least one scale");
  std::vector<double> w(static_cast<std::size_t>(scales));
  double total = 0.0;
  for (int s = 0; s < scales; ++s) total += w[s] = std::ldexp(1.0, -s);
  for (double& v : w) v /= total;
  return w;
}

template <typename T>
SupervisionTargets<T> make_targets(std::span<const io::LabelVolume> batch, int num_classes,
                                   int scales) {
  SupervisionTargets<T> t;
  t.omega = deep_supervision_weights(scales);
  std::vector<std::vector<io::LabelVolume>> seg(static_cast<std::size_t>(scales));
  std::vector<std::vector<io::LabelVolume>> bnd(static_cast<std::size_t>(scales));
  for (const auto& y : batch) {
    auto pyramid = label_pyramid(y, scales);
    for (int s = 0; s < scales; ++s) {
      bnd[s].push_back(extract_boundary(pyramid[s]));
      seg[s].push_back(std::move(pyramid[s]));
    }
  }
  for (int s = 0; s < scales; ++s) {
    t.seg_onehot.push_back(one_hot<T>(seg[s], num_classes));
    t.boundary_onehot.push_back(one_hot<T>(bnd[s], 2));
  }
  return t;
}

template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& probs, const Tensor<T>& target) {
  const Shape& s = probs.shape();
  if (!(s == target.shape()))
    throw ShapeError("dice_ce_loss: prediction " + s.str() + " vs target " +
                     target.shape().str());
  if (s.c < 2) throw ShapeError("dice_ce_loss needs at least one foreground channel");
  const int K = s.c;
  const std::size_t M = s.spatial();
  const double total = static_cast<double>(s.numel());
  const T* p = probs.data();
  const T* y = target.data();

  // Per-channel intersection and mass, summed over the whole batch.
  auto inter = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K), 0.0);
  auto mass = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K), 0.0);
  double ce = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < K; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * K + c) * M;
      double i_acc = 0.0, m_acc = 0.0, ce_acc = 0.0;
      for (std::size_t v = 0; v < M; ++v) {
        const double pv = p[base + v];
        const double yv = y[base + v];
        i_acc += pv * yv;
        m_acc += pv + yv;
        const double q = std::clamp(pv, kProbClamp, 1.0 - kProbClamp);
        ce_acc += yv * std::log(q) + (1.0 - yv) * std::log(1.0 - q);
      }
      (*inter)[c] += i_acc;
      (*mass)[c] += m_acc;
      ce += ce_acc;
    }
  double dice = 0.0;
  for (int c = 1; c < K; ++c) dice += 1.0 - 2.0 * (*inter)[c] / ((*mass)[c] + kDiceSmooth);
  dice /= (K - 1);
  ce = -ce / total;

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(dice + ce));
  if (auto* tape = recording_tape<T>({&probs})) {
    tape->push("dice_ce_loss", {&probs, &target}, out,
               [ps = probs.storage(), ys = target.storage(), os = out.storage(), inter, mass] {
                 auto* gp = grad_sink(ps);
                 const Shape& s = ps->shape;
                 const int K = s.c;
                 const std::size_t M = s.spatial();
                 const double g = os->grad[0];
                 const double ce_scale = -g / static_cast<double>(s.numel());
                 const double dice_scale = g / (K - 1);
                 const auto& p = ps->values;
                 const auto& y = ys->values;
                 for (int n = 0; n < s.n; ++n)
                   for (int c = 0; c < K; ++c) {
                     const std::size_t base = (static_cast<std::size_t>(n) * K + c) * M;
                     const double denom = (*mass)[c] + kDiceSmooth;
                     const double a = c >= 1 ? -2.0 * dice_scale / denom : 0.0;
                     const double b =
                         c >= 1 ? 2.0 * dice_scale * (*inter)[c] / (denom * denom) : 0.0;
                     for (std::size_t v = 0; v < M; ++v) {
                       const double pv = p[base + v];
                       const double yv = y[base + v];
                       double d = a * yv + b;
                       if (pv > kProbClamp && pv < 1.0 - kProbClamp)
                         d += ce_scale * (yv / pv - (1.0 - yv) / (1.0 - pv));
                       (*gp)[base + v] += static_cast<T>(d);
                     }
                   }
               });
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> seg_probs, std::span<const Tensor<T>> boundary_probs,
                     const SupervisionTargets<T>& targets, double boundary_weight) {
  const std::size_t scales = seg_probs.size();
  if (scales == 0 || targets.seg_onehot.size() != scales || targets.omega.size() != scales)
    throw ShapeError("total_loss: seg outputs, targets and weights differ in length");
  if (!boundary_probs.empty() &&
      (boundary_probs.size() != scales || targets.boundary_onehot.size() != scales))
    throw ShapeError("total_loss: boundary outputs and targets differ in length");
  Tensor<T> loss;
  for (std::size_t s = 0; s < scales; ++s) {
    Tensor<T> term = dice_ce_loss(seg_probs[s], targets.seg_onehot[s]);
    if (!boundary_probs.empty()) {
      Tensor<T> b = dice_ce_loss(boundary_probs[s], targets.boundary_onehot[s]);
      term = add(term, boundary_weight == 1.0 ? b : scalar_mul(b, static_cast<T>(boundary_weight)));
    }
    term = scalar_mul(term, static_cast<T>(targets.omega[s]));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

#define BANET_INSTANTIATE_SUP(T)                                                           \
  template Tensor<T> one_hot<T>(std::span<const io::LabelVolume>, int);                    \
  template Tensor<T> one_hot<T>(const io::LabelVolume&, int);                              \
  template SupervisionTargets<T> make_targets<T>(std::span<const io::LabelVolume>, int, int); \
  template Tensor<T> dice_ce_loss(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> total_loss(std::span<const Tensor<T>>, std::span<const Tensor<T>>,    \
                                const SupervisionTargets<T>&, double);

BANET_INSTANTIATE_SUP(float)
BANET_INSTANTIATE_SUP(double)

}  // namespace banet::sup
