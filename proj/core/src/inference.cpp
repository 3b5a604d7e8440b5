#include "banet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace banet::infer {

namespace fs = std::filesystem;

io::LabelVolume argmax_labels(std::span<const float> probs, int num_classes, const Int3& dims,
                              const Real3& spacing) {
  const std::size_t n = io::voxel_count(dims);
  if (probs.size() != n * static_cast<std::size_t>(num_classes))
    throw ShapeError("argmax_labels: probability buffer does not match K x dims");
  io::LabelVolume out(dims, spacing, num_classes);
  for (std::size_t v = 0; v < n; ++v) {
    int best = 0;
    float best_p = probs[v];
    for (int k = 1; k < num_classes; ++k) {
      const float p = probs[k * n + v];
      if (p > best_p) {
        best_p = p;
        best = k;
      }
    }
    out.labels[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

namespace {

void renormalize(std::vector<float>& probs, int num_classes, std::size_t n) {
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (int k = 0; k < num_classes; ++k) s += probs[k * n + v];
    if (s <= 0.0) {
      for (int k = 0; k < num_classes; ++k) probs[k * n + v] = 1.0f / num_classes;
      continue;
    }
    for (int k = 0; k < num_classes; ++k)
      probs[k * n + v] = static_cast<float>(probs[k * n + v] / s);
  }
}

}  // namespace

std::vector<int> window_origins(int padded, int patch, double overlap) {
  if (patch < 1 || padded < patch) throw ShapeError("window_origins: patch exceeds padded extent");
  const int stride = std::max(1, static_cast<int>(std::floor(patch * (1.0 - overlap))));
  const int span = padded - patch;
  const int count = (span + stride - 1) / stride + 1;
  std::vector<int> origins(count, 0);
  for (int i = 1; i < count; ++i)
    origins[i] = static_cast<int>(std::lround(static_cast<double>(i) * span / (count - 1)));
  return origins;
}

Prediction sliding_window_predict(const arch::BaNet<float>& net, const io::Volume& v,
                                  const Int3& patch_dims, double overlap,
                                  const arch::ForwardOptions& opts) {
  if (!(overlap >= 0.0 && overlap <= 0.9))
    throw std::invalid_argument("sliding_window_predict: overlap must be in [0, 0.9]");
  const int K = net.config().num_classes;
  Int3 padded{};
  std::array<std::vector<int>, 3> origins;
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(v.dims[a], patch_dims[a]);
    origins[a] = window_origins(padded[a], patch_dims[a], overlap);
  }

  const std::size_t n = io::voxel_count(padded);
  std::vector<double> acc(static_cast<std::size_t>(K) * n, 0.0);
  std::vector<int> hits(n, 0);
  const Int3& p = patch_dims;
  Tensor<float> window(Shape{1, 1, p[0], p[1], p[2]});
  for (int oz : origins[0])
    for (int oy : origins[1])
      for (int ox : origins[2]) {
        std::size_t i = 0;
        for (int z = 0; z < p[0]; ++z)
          for (int y = 0; y < p[1]; ++y)
            for (int x = 0; x < p[2]; ++x, ++i) {
              const int gz = oz + z, gy = oy + y, gx = ox + x;
              const bool inside = gz < v.dims[0] && gy < v.dims[1] && gx < v.dims[2];
              window.data()[i] = inside ? v.at(gz, gy, gx) : 0.0f;
            }
        const Tensor<float> probs = net.forward_infer(window, opts);
        const std::size_t pn = io::voxel_count(p);
        i = 0;
        for (int z = 0; z < p[0]; ++z)
          for (int y = 0; y < p[1]; ++y)
            for (int x = 0; x < p[2]; ++x, ++i) {
              const std::size_t g = io::voxel_index(padded, oz + z, oy + y, ox + x);
              ++hits[g];
              for (int k = 0; k < K; ++k) acc[k * n + g] += probs.data()[k * pn + i];
            }
      }

  Prediction out;
  out.num_classes = K;
  out.dims = v.dims;
  out.spacing = v.spacing;
  const std::size_t m = io::voxel_count(v.dims);
  out.probs.resize(static_cast<std::size_t>(K) * m);
  std::size_t j = 0;
  for (int z = 0; z < v.dims[0]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[2]; ++x, ++j) {
        const std::size_t g = io::voxel_index(padded, z, y, x);
        for (int k = 0; k < K; ++k)
          out.probs[k * m + j] = static_cast<float>(acc[k * n + g] / hits[g]);
      }
  renormalize(out.probs, K, m);
  out.labels = argmax_labels(out.probs, K, out.dims, out.spacing);
  return out;
}

Prediction ensemble(std::span<const Prediction> preds) {
  if (preds.empty()) throw std::invalid_argument("ensemble: no predictions");
  const Prediction& first = preds.front();
  for (const auto& p : preds)
    if (p.dims != first.dims || p.num_classes != first.num_classes || p.spacing != first.spacing ||
        p.probs.size() != first.probs.size())
      throw ShapeError("ensemble: members differ in shape, classes or spacing");
  Prediction out;
  out.num_classes = first.num_classes;
  out.dims = first.dims;
  out.spacing = first.spacing;
  out.probs.resize(first.probs.size());
  const double count = static_cast<double>(preds.size());
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    double s = 0.0;
    for (const auto& p : preds) s += p.probs[i];
    out.probs[i] = static_cast<float>(s / count);
  }
  out.labels = argmax_labels(out.probs, out.num_classes, out.dims, out.spacing);
  return out;
}

Prediction resample_prediction(const Prediction& p, const Int3& out_dims, const Real3& out_spacing) {
  Prediction out;
  out.num_classes = p.num_classes;
  out.dims = out_dims;
  out.spacing = out_spacing;
  const std::size_t n = io::voxel_count(p.dims);
  const std::size_t m = io::voxel_count(out_dims);
  out.probs.resize(static_cast<std::size_t>(p.num_classes) * m);
  for (int k = 0; k < p.num_classes; ++k) {
    const auto channel = io::resample_trilinear(
        std::span<const float>(p.probs.data() + k * n, n), p.dims, out_dims);
    std::copy(channel.begin(), channel.end(), out.probs.begin() + static_cast<std::ptrdiff_t>(k * m));
  }
  renormalize(out.probs, out.num_classes, m);
  out.labels = argmax_labels(out.probs, out.num_classes, out.dims, out.spacing);
  return out;
}

DiceReport dice_score(const io::LabelVolume& pred, const io::LabelVolume& gt, int num_classes) {
  if (pred.dims != gt.dims || pred.labels.size() != gt.labels.size())
    throw ShapeError("dice_score: prediction " + to_string(pred.dims) + " vs ground truth " +
                     to_string(gt.dims));
  if (num_classes < 1) throw std::invalid_argument("dice_score: num_classes must be >= 1");
  std::vector<std::size_t> p_count(num_classes, 0), g_count(num_classes, 0), both(num_classes, 0);
  for (std::size_t v = 0; v < pred.labels.size(); ++v) {
    const int a = pred.labels[v];
    const int b = gt.labels[v];
    if (a < num_classes) ++p_count[a];
    if (b < num_classes) ++g_count[b];
    if (a == b && a < num_classes) ++both[a];
  }
  DiceReport r;
  for (int c = 1; c < num_classes; ++c) {
    const std::size_t denom = p_count[c] + g_count[c];
    r.per_class.push_back(denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / denom);
  }
  if (!r.per_class.empty()) {
    double s = 0.0;
    for (double d : r.per_class) s += d;
    r.mean = s / static_cast<double>(r.per_class.size());
  }
  return r;
}

void write_dice_csv(const DiceReport& report, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  out << "class,dice\n";
  for (std::size_t c = 0; c < report.per_class.size(); ++c)
    out << c + 1 << "," << report.per_class[c] << "\n";
  out << "mean," << report.mean << "\n";
}

void save_prediction(const Prediction& p, const fs::path& labels_path,
                     const std::optional<fs::path>& probs_path) {
  io::write_volume(p.labels, labels_path);
  if (!probs_path) return;
  io::Volume stacked(Int3{p.num_classes * p.dims[0], p.dims[1], p.dims[2]}, p.spacing,
                     io::Modality::SYNTH, p.probs);
  io::write_volume(stacked, *probs_path);
  const fs::path header = io::header_path(*probs_path);
  nlohmann::json j;
  {
    std::ifstream in(header);
    j = nlohmann::json::parse(in);
  }
  j["stacked_channels"] = p.num_classes;
  std::ofstream out(header, std::ios::trunc);
  out << j.dump(2) << "\n";
}

void write_midslice_pgm(const io::LabelVolume& labels, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  const int h = labels.dims[1];
  const int w = labels.dims[2];
  const int z = labels.dims[0] / 2;
  const int top = std::max(1, labels.num_classes - 1);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int level = std::min(255, labels.at(z, y, x) * 255 / top);
      out.put(static_cast<char>(static_cast<unsigned char>(level)));
    }
}

}  // namespace banet::infer
