#include "banet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace banet::phantom {

void PhantomConfig::validate() const {
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 1) throw DataError("phantom dims must be >= 1");
  if (num_organs < 0 || num_organs > 255) throw DataError("num_organs must be in [0, 255]");
  if (static_cast<int>(radius_ranges.size()) < num_organs)
    throw DataError("radius_ranges has fewer entries than num_organs");
  if (!(noise_sigma >= 0.0)) throw DataError("noise_sigma must be >= 0");
  if (!(contrast_gap >= 0.0)) throw DataError("contrast_gap must be >= 0");
  if (max_retries < 1) throw DataError("max_retries must be >= 1");
  for (int i = 0; i < num_organs; ++i) {
    const auto [lo, hi] = radius_ranges[i];
    if (!(lo > 0.0) || hi < lo) throw DataError("invalid radius range for organ " + std::to_string(i + 1));
    for (int a = 0; a < 3; ++a)
      if (2.0 * hi + 1.0 > dims[a])
        throw DataError("organ " + std::to_string(i + 1) + " radius does not fit in dims " +
                        to_string(dims));
  }
}

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int K = cfg.num_organs + 1;
  const Real3 spacing{1.0, 1.0, 1.0};
  io::LabelVolume labels(cfg.dims, spacing, K);

  bool ok = cfg.num_organs == 0;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
    std::fill(labels.labels.begin(), labels.labels.end(), 0);
    for (int organ = 1; organ <= cfg.num_organs; ++organ) {
      const auto [lo, hi] = cfg.radius_ranges[organ - 1];
      std::uniform_real_distribution<double> radius(lo, hi);
      Real3 r{};
      Real3 c{};
      for (int a = 0; a < 3; ++a) r[a] = radius(rng);
      for (int a = 0; a < 3; ++a) {
        std::uniform_real_distribution<double> center(r[a], cfg.dims[a] - 1 - r[a]);
        c[a] = center(rng);
      }
      for (int z = 0; z < cfg.dims[0]; ++z)
        for (int y = 0; y < cfg.dims[1]; ++y)
          for (int x = 0; x < cfg.dims[2]; ++x) {
            const double dz = (z - c[0]) / r[0];
            const double dy = (y - c[1]) / r[1];
            const double dx = (x - c[2]) / r[2];
            if (dz * dz + dy * dy + dx * dx <= 1.0)
              labels.at(z, y, x) = static_cast<std::uint8_t>(organ);
          }
    }
    std::vector<std::size_t> counts(static_cast<std::size_t>(K), 0);
    for (auto l : labels.labels) ++counts[l];
    ok = true;
    for (int organ = 1; organ <= cfg.num_organs; ++organ) ok = ok && counts[organ] > 0;
  }
  if (!ok)
    throw DataError("phantom generation failed: an organ stayed empty after " +
                    std::to_string(cfg.max_retries) + " attempts");

  io::Volume image(cfg.dims, spacing, io::Modality::SYNTH);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t v = 0; v < image.data.size(); ++v) {
    double value = cfg.background_mean + labels.labels[v] * cfg.contrast_gap;
    if (cfg.noise_sigma > 0.0) value += cfg.noise_sigma * noise(rng);
    image.data[v] = static_cast<float>(value);
  }
  return {std::move(image), std::move(labels)};
}

}  // namespace banet::phantom
