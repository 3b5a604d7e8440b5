#pragma once

// SGD training with polynomial learning-rate decay, patch sampling and
// checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "banet/network.hpp"
#include "banet/volume.hpp"

namespace banet::train {

struct TrainConfig {
  double lr0 = 0.01;
  int max_epochs = 200;
  int steps_per_epoch = 10;
  int batch_size = 2;
  double momentum = 0.99;
  bool nesterov = true;
  std::uint64_t seed = 0;
  Int3 patch_dims{32, 32, 32};
  double fg_oversample_prob = 1.0 / 3.0;

  void validate() const;
};

/// lr0 * (1 - t / T)^0.9 with t the epoch index.
double poly_lr(int t, const TrainConfig& cfg);

struct Case {
  std::string name;
  io::Volume image;
  io::LabelVolume labels;
};
using Dataset = std::vector<Case>;

/// Loads every `<case>_image.json` / `<case>_label.json` pair in `dir`,
/// sorted by case name.
Dataset load_dataset(const std::filesystem::path& dir);
/// Applies modality preprocessing to every image.
Dataset preprocess_dataset(Dataset data);

/// Classic momentum SGD: v <- mu v + g, then theta -= lr * v, or
/// theta -= lr * (g + mu v) with Nesterov lookahead.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<arch::NamedParameter<T>> params, double momentum, bool nesterov);

  /// Throws NumericalError if some parameter has no gradient.
  void step(double lr);
  void zero_grad();

  const std::vector<arch::NamedParameter<T>>& parameters() const { return params_; }
  const std::vector<std::vector<T>>& momentum_buffers() const { return velocity_; }
  void set_momentum_buffers(std::vector<std::vector<T>> buffers);

 private:
  std::vector<arch::NamedParameter<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  bool nesterov_;
};

struct Patch {
  Tensor<float> image;  // (1, 1, d, h, w)
  io::LabelVolume labels;
  Int3 origin{0, 0, 0};
};

/// Random co-registered crop. With probability fg_oversample_prob the crop
/// must contain foreground: uniform crops are retried a few times, then the
/// crop is centered on a random foreground voxel.
Patch sample_patch(const io::Volume& image, const io::LabelVolume& labels, const TrainConfig& cfg,
                   std::mt19937_64& rng);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct ParameterEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct Checkpoint {
  std::vector<ParameterEntry> manifest;
  std::vector<float> payload;
  std::vector<float> momentum;  // same layout as payload, may be empty
  int epoch = 0;
  arch::NetworkConfig network;
  TrainConfig train;
  std::string rng_state;
};

Checkpoint make_checkpoint(const arch::BaNet<float>& net, const SgdOptimizer<float>* optimizer,
                           int epoch, const TrainConfig& train_cfg, const std::string& rng_state);
/// Copies checkpoint values into a network built with the same config.
void load_parameters(arch::BaNet<float>& net, const Checkpoint& ckpt);
arch::BaNet<float> network_from_checkpoint(const Checkpoint& ckpt);

/// Writes `<stem>.ckpt.json` and `<stem>.ckpt.raw`. `path` may be the stem
/// or either file name.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> trace;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  double boundary_loss_weight = 1.0;
};

/// Runs max_epochs x steps_per_epoch SGD steps on preprocessed data.
/// Throws NumericalError naming the first op that produced NaN/Inf if the
/// loss stops being finite.
TrainResult train(arch::BaNet<float>& net, const Dataset& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

void write_loss_trace(const std::vector<EpochRecord>& trace, const std::filesystem::path& path);

}  // namespace banet::train
