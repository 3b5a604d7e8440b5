#pragma once

// Synthetic multi-organ phantoms: axis-aligned ellipsoids of very different
// sizes with low intensity contrast against each other and the background.

#include <cstdint>
#include <utility>
#include <vector>

#include "banet/volume.hpp"

namespace banet::phantom {

struct PhantomConfig {
  Int3 dims{32, 32, 32};
  int num_organs = 3;
  // Semi-axis ranges in voxels, one interval per organ, largest first.
  std::vector<std::pair<double, double>> radius_ranges{{9.0, 12.0}, {4.0, 6.0}, {2.5, 3.5}};
  double contrast_gap = 0.15;
  double noise_sigma = 0.1;
  double background_mean = 0.0;
  std::uint64_t seed = 0;
  int max_retries = 100;

  void validate() const;
};

struct Phantom {
  io::Volume image;
  io::LabelVolume labels;
};

/// Organ i (1-based) is drawn after organ i-1 and overwrites it where they
/// overlap. Intensity inside organ i is background_mean + i * contrast_gap,
/// plus Gaussian noise everywhere. Throws DataError when some organ keeps
/// ending up empty after max_retries redraws.
Phantom generate_phantom(const PhantomConfig& cfg);

}  // namespace banet::phantom
