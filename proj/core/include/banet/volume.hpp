#pragma once

// Volume grids, the on-disk volume format and intensity preprocessing.
//
// A volume on disk is a pair of files: `<name>.json` holds the header
//   {"dims": [d,h,w], "spacing_mm": [z,y,x], "dtype": "f32"|"u8",
//    "modality": "CT"|"MR"|"SYNTH", "num_classes": K}
// (num_classes only for u8 label volumes) and `<name>.raw` holds exactly
// d*h*w little-endian elements, z-major then y then x.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "banet/common.hpp"

namespace banet::io {

enum class Modality { CT, MR, SYNTH };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

inline std::size_t voxel_count(const Int3& dims) {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
         static_cast<std::size_t>(dims[2]);
}

inline std::size_t voxel_index(const Int3& dims, int z, int y, int x) {
  return (static_cast<std::size_t>(z) * static_cast<std::size_t>(dims[1]) +
          static_cast<std::size_t>(y)) *
             static_cast<std::size_t>(dims[2]) +
         static_cast<std::size_t>(x);
}

/// Scalar intensity grid with voxel spacing in millimeters along (z, y, x).
struct Volume {
  Int3 dims{1, 1, 1};
  Real3 spacing{1.0, 1.0, 1.0};
  Modality modality = Modality::SYNTH;
  std::vector<float> data;

  Volume() = default;
  Volume(Int3 dims, Real3 spacing, Modality modality, float fill = 0.0f);
  Volume(Int3 dims, Real3 spacing, Modality modality, std::vector<float> data);

  std::size_t size() const { return data.size(); }
  float& at(int z, int y, int x) { return data[voxel_index(dims, z, y, x)]; }
  float at(int z, int y, int x) const { return data[voxel_index(dims, z, y, x)]; }

  /// Throws DataError if any invariant (dims, spacing, finiteness) is broken.
  void validate() const;
};

/// Integer class-index grid; background is class 0.
struct LabelVolume {
  Int3 dims{1, 1, 1};
  Real3 spacing{1.0, 1.0, 1.0};
  int num_classes = 1;
  std::vector<std::uint8_t> labels;

  LabelVolume() = default;
  LabelVolume(Int3 dims, Real3 spacing, int num_classes, std::uint8_t fill = 0);
  LabelVolume(Int3 dims, Real3 spacing, int num_classes, std::vector<std::uint8_t> labels);

  std::size_t size() const { return labels.size(); }
  std::uint8_t& at(int z, int y, int x) { return labels[voxel_index(dims, z, y, x)]; }
  std::uint8_t at(int z, int y, int x) const { return labels[voxel_index(dims, z, y, x)]; }

  void validate() const;
};

using AnyVolume = std::variant<Volume, LabelVolume>;

/// Resolves `<name>`, `<name>.json` or `<name>.raw` to the header path.
std::filesystem::path header_path(const std::filesystem::path& path);
std::filesystem::path payload_path(const std::filesystem::path& path);

AnyVolume read_volume(const std::filesystem::path& path);
/// Reads and requires an f32 volume / a u8 label volume respectively.
Volume read_image(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

void write_volume(const Volume& v, const std::filesystem::path& path);
void write_volume(const LabelVolume& v, const std::filesystem::path& path);

Volume clip_and_normalize_ct(const Volume& v, float lo, float hi);
Volume normalize_zscore(const Volume& v);

inline constexpr float kCtClipLow = -991.0f;
inline constexpr float kCtClipHigh = 373.0f;

/// Modality-dependent preprocessing: CT is clipped to [-991, 373] and
/// z-scored, everything else is z-scored.
Volume preprocess(const Volume& v);

Int3 resampled_dims(const Int3& dims, const Real3& spacing, const Real3& target);

/// Trilinear resampling onto a grid with the given spacing.
Volume resample(const Volume& v, const Real3& target_spacing);
/// Nearest-neighbor resampling; never creates new label values.
LabelVolume resample(const LabelVolume& v, const Real3& target_spacing);

/// Trilinear interpolation of a single (d,h,w) float grid onto new dims.
/// Voxel centers are aligned: output index i maps to input coordinate
/// (i + 0.5) * scale - 0.5, clamped to the valid range. `scale` is the
/// output/input spacing ratio per axis.
std::vector<float> resample_trilinear(std::span<const float> data, const Int3& dims,
                                      const Int3& out_dims, const Real3& scale);
/// As above with scale = in_dims / out_dims.
std::vector<float> resample_trilinear(std::span<const float> data, const Int3& dims,
                                      const Int3& out_dims);

}  // namespace banet::io
