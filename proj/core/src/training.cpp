#include "banet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "banet/supervision.hpp"

namespace banet::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw DataError("lr0 must be finite and >= 0");
  if (max_epochs < 1) throw DataError("max_epochs must be >= 1");
  if (steps_per_epoch < 1) throw DataError("steps_per_epoch must be >= 1");
  if (batch_size < 1) throw DataError("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DataError("momentum must be in [0, 1)");
  if (!(fg_oversample_prob >= 0.0 && fg_oversample_prob <= 1.0))
    throw DataError("fg_oversample_prob must be in [0, 1]");
  for (int a = 0; a < 3; ++a)
    if (patch_dims[a] < 1) throw DataError("patch_dims must be >= 1");
}

double poly_lr(int t, const TrainConfig& cfg) {
  if (t < 0 || t > cfg.max_epochs)
    throw DataError("poly_lr: epoch " + std::to_string(t) + " outside [0, " +
                    std::to_string(cfg.max_epochs) + "]");
  const double frac = 1.0 - static_cast<double>(t) / cfg.max_epochs;
  return cfg.lr0 * std::pow(frac, 0.9);
}

// ---------------------------------------------------------------------------
// Data

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " not found");
  const std::string suffix = "_image.json";
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix))
      names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no *_image.json volumes in " + dir.string());
  Dataset data;
  for (const auto& name : names) {
    Case c;
    c.name = name;
    c.image = io::read_image(dir / (name + "_image.json"));
    c.labels = io::read_labels(dir / (name + "_label.json"));
    if (c.image.dims != c.labels.dims)
      throw DataError("image and label dims differ for case " + name);
    data.push_back(std::move(c));
  }
  return data;
}

Dataset preprocess_dataset(Dataset data) {
  for (auto& c : data) c.image = io::preprocess(c.image);
  return data;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
SgdOptimizer<T>::SgdOptimizer(std::vector<arch::NamedParameter<T>> params, double momentum,
                              bool nesterov)
    : params_(std::move(params)), momentum_(momentum), nesterov_(nesterov) {
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), T(0));
}

template <typename T>
void SgdOptimizer<T>::step(double lr) {
  for (const auto& p : params_)
    if (!p.tensor.has_grad()) throw NumericalError("sgd step: parameter " + p.name + " has no gradient");
  const T mu = static_cast<T>(momentum_);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> t = params_[i].tensor;
    auto values = t.values();
    auto grad = t.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      v[j] = mu * v[j] + grad[j];
      const T update = nesterov_ ? grad[j] + mu * v[j] : v[j];
      values[j] -= rate * update;
    }
  }
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
  for (auto& p : params_) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
}

template <typename T>
void SgdOptimizer<T>::set_momentum_buffers(std::vector<std::vector<T>> buffers) {
  if (buffers.size() != params_.size()) throw DataError("momentum buffer count mismatch");
  for (std::size_t i = 0; i < buffers.size(); ++i)
    if (buffers[i].size() != params_[i].tensor.numel())
      throw DataError("momentum buffer size mismatch for " + params_[i].name);
  velocity_ = std::move(buffers);
}

template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

// ---------------------------------------------------------------------------
// Patch sampling

namespace {

bool crop_has_foreground(const io::LabelVolume& y, const Int3& o, const Int3& p) {
  for (int z = o[0]; z < o[0] + p[0]; ++z)
    for (int yy = o[1]; yy < o[1] + p[1]; ++yy) {
      const std::uint8_t* row = &y.labels[io::voxel_index(y.dims, z, yy, o[2])];
      for (int x = 0; x < p[2]; ++x)
        if (row[x] != 0) return true;
    }
  return false;
}

}  // namespace

Patch sample_patch(const io::Volume& image, const io::LabelVolume& labels, const TrainConfig& cfg,
                   std::mt19937_64& rng) {
  const Int3& dims = image.dims;
  const Int3& p = cfg.patch_dims;
  if (labels.dims != dims) throw DataError("sample_patch: image and labels differ in shape");
  for (int a = 0; a < 3; ++a)
    if (dims[a] < p[a])
      throw DataError("sample_patch: volume " + to_string(dims) + " smaller than patch " +
                      to_string(p));

  auto uniform_origin = [&] {
    Int3 o{};
    for (int a = 0; a < 3; ++a) o[a] = std::uniform_int_distribution<int>(0, dims[a] - p[a])(rng);
    return o;
  };

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool force_fg = unit(rng) < cfg.fg_oversample_prob;
  Int3 origin = uniform_origin();
  if (force_fg && !crop_has_foreground(labels, origin, p)) {
    constexpr int kRejectionTries = 10;
    bool found = false;
    for (int i = 0; i < kRejectionTries && !found; ++i) {
      origin = uniform_origin();
      found = crop_has_foreground(labels, origin, p);
    }
    if (!found) {
      std::vector<std::size_t> fg;
      for (std::size_t v = 0; v < labels.labels.size(); ++v)
        if (labels.labels[v] != 0) fg.push_back(v);
      if (!fg.empty()) {
        const std::size_t v =
            fg[std::uniform_int_distribution<std::size_t>(0, fg.size() - 1)(rng)];
        const int plane = dims[1] * dims[2];
        const Int3 c{static_cast<int>(v / plane), static_cast<int>((v % plane) / dims[2]),
                     static_cast<int>(v % dims[2])};
        for (int a = 0; a < 3; ++a) origin[a] = std::clamp(c[a] - p[a] / 2, 0, dims[a] - p[a]);
      }
    }
  }

  Patch out;
  out.origin = origin;
  out.image = Tensor<float>(Shape{1, 1, p[0], p[1], p[2]});
  out.labels = io::LabelVolume(p, labels.spacing, labels.num_classes);
  std::size_t i = 0;
  for (int z = 0; z < p[0]; ++z)
    for (int yy = 0; yy < p[1]; ++yy)
      for (int x = 0; x < p[2]; ++x, ++i) {
        const std::size_t src = io::voxel_index(dims, origin[0] + z, origin[1] + yy, origin[2] + x);
        out.image.data()[i] = image.data[src];
        out.labels.labels[i] = labels.labels[src];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(arch::BaNet<float>& net, const Dataset& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  const auto& ncfg = net.config();
  const int scales = ncfg.supervised_scales();
  for (const auto& c : data)
    if (c.labels.num_classes > ncfg.num_classes)
      throw DataError("case " + c.name + " has more classes than the network predicts");

  std::mt19937_64 rng(cfg.seed);
  SgdOptimizer<float> optimizer(net.parameters(), cfg.momentum, cfg.nesterov);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const std::size_t patch_voxels = io::voxel_count(cfg.patch_dims);

  TrainResult result;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = poly_lr(epoch, cfg);
    double loss_sum = 0.0;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      Tensor<float> x(Shape{cfg.batch_size, 1, cfg.patch_dims[0], cfg.patch_dims[1],
                            cfg.patch_dims[2]});
      std::vector<io::LabelVolume> labels;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const Case& c = data[pick(rng)];
        Patch patch = sample_patch(c.image, c.labels, cfg, rng);
        std::copy_n(patch.image.data(), patch_voxels, x.data() + b * patch_voxels);
        labels.push_back(std::move(patch.labels));
      }
      const auto targets = sup::make_targets<float>(labels, ncfg.num_classes, scales);

      Tape<float> tape;
      Tensor<float> loss;
      {
        auto recording = tape.record();
        const auto out = net.forward_train(x);
        loss = sup::total_loss<float>(out.seg_probs, out.boundary_probs, targets,
                                      hooks.boundary_loss_weight);
      }
      const float value = loss.item();
      if (!std::isfinite(value)) {
        const auto op = tape.first_non_finite_op();
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + "; first non-finite op: " +
                             op.value_or("<none>"));
      }
      tape.backward(loss);
      optimizer.step(lr);
      optimizer.zero_grad();
      loss_sum += value;
    }
    EpochRecord rec{epoch, loss_sum / cfg.steps_per_epoch, lr};
    result.trace.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }

  std::ostringstream rng_state;
  rng_state << rng;
  result.checkpoint = make_checkpoint(net, &optimizer, cfg.max_epochs, cfg, rng_state.str());
  return result;
}

void write_loss_trace(const std::vector<EpochRecord>& trace, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write loss trace " + path.string());
  out << "epoch,mean_loss,lr\n";
  out << std::setprecision(17);
  for (const auto& r : trace) out << r.epoch << "," << r.mean_loss << "," << r.lr << "\n";
}

}  // namespace banet::train
