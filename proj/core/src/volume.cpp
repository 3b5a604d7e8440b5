#include "banet/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace banet::io {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Modality m) {
  switch (m) {
    case Modality::CT:
      return "CT";
    case Modality::MR:
      return "MR";
    case Modality::SYNTH:
      return "SYNTH";
  }
  return "SYNTH";
}

Modality modality_from_string(const std::string& s) {
  if (s == "CT") return Modality::CT;
  if (s == "MR") return Modality::MR;
  if (s == "SYNTH") return Modality::SYNTH;
  throw DataError("unknown modality '" + s + "'");
}

namespace {

void check_geometry(const Int3& dims, const Real3& spacing) {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw DataError("volume dims must be >= 1, got " + banet::to_string(dims));
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw DataError("volume spacing must be positive and finite");
  }
}

}  // namespace

Volume::Volume(Int3 dims_, Real3 spacing_, Modality modality_, float fill)
    : dims(dims_), spacing(spacing_), modality(modality_), data(voxel_count(dims_), fill) {
  check_geometry(dims, spacing);
}

Volume::Volume(Int3 dims_, Real3 spacing_, Modality modality_, std::vector<float> data_)
    : dims(dims_), spacing(spacing_), modality(modality_), data(std::move(data_)) {
  check_geometry(dims, spacing);
  if (data.size() != voxel_count(dims)) throw DataError("volume data size does not match dims");
}

void Volume::validate() const {
  check_geometry(dims, spacing);
  if (data.size() != voxel_count(dims)) throw DataError("volume data size does not match dims");
  for (float v : data)
    if (!std::isfinite(v)) throw DataError("volume contains non-finite values");
}

LabelVolume::LabelVolume(Int3 dims_, Real3 spacing_, int num_classes_, std::uint8_t fill)
    : dims(dims_), spacing(spacing_), num_classes(num_classes_), labels(voxel_count(dims_), fill) {
  validate();
}

LabelVolume::LabelVolume(Int3 dims_, Real3 spacing_, int num_classes_,
                         std::vector<std::uint8_t> labels_)
    : dims(dims_), spacing(spacing_), num_classes(num_classes_), labels(std::move(labels_)) {
  validate();
}

void LabelVolume::validate() const {
  check_geometry(dims, spacing);
  if (num_classes < 1 || num_classes > 256) throw DataError("num_classes must be in [1, 256]");
  if (labels.size() != voxel_count(dims)) throw DataError("label data size does not match dims");
  for (auto l : labels)
    if (l >= num_classes)
      throw DataError("label value " + std::to_string(l) + " >= num_classes " +
                      std::to_string(num_classes));
}

// ---------------------------------------------------------------------------
// File format

fs::path header_path(const fs::path& path) {
  fs::path p = path;
  if (p.extension() == ".json") return p;
  if (p.extension() == ".raw") return p.replace_extension(".json");
  return fs::path(p.string() + ".json");
}

fs::path payload_path(const fs::path& path) {
  fs::path h = header_path(path);
  return h.replace_extension(".raw");
}

namespace {

template <typename T>
std::vector<T> read_payload(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open payload " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != count * sizeof(T))
    throw DataError("payload size mismatch in " + path.string() + ": expected " +
                    std::to_string(count * sizeof(T)) + " bytes, found " +
                    std::to_string(bytes.size()));
  std::vector<T> out(count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  if constexpr (sizeof(T) > 1 && std::endian::native == std::endian::big) {
    for (auto& v : out) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      v = std::bit_cast<T>(raw);
    }
  }
  return out;
}

template <typename T>
void write_payload(const fs::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write payload " + path.string());
  if constexpr (sizeof(T) > 1 && std::endian::native == std::endian::big) {
    for (T v : data) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      out.write(reinterpret_cast<const char*>(raw.data()), sizeof(T));
    }
  } else {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(T)));
  }
  if (!out) throw DataError("failed writing payload " + path.string());
}

void write_header(const fs::path& path, const json& header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write header " + path.string());
  out << header.dump(2) << "\n";
}

json base_header(const Int3& dims, const Real3& spacing) {
  return json{{"dims", {dims[0], dims[1], dims[2]}},
              {"spacing_mm", {spacing[0], spacing[1], spacing[2]}}};
}

}  // namespace

AnyVolume read_volume(const fs::path& path) {
  const fs::path hp = header_path(path);
  std::ifstream in(hp);
  if (!in) throw DataError("missing volume header " + hp.string());
  json h;
  try {
    h = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed volume header " + hp.string() + ": " + e.what());
  }

  Int3 dims{};
  Real3 spacing{};
  std::string dtype;
  try {
    const auto& d = h.at("dims");
    const auto& s = h.at("spacing_mm");
    if (d.size() != 3 || s.size() != 3) throw DataError("dims and spacing_mm need 3 entries");
    for (int a = 0; a < 3; ++a) {
      dims[a] = d.at(a).get<int>();
      spacing[a] = s.at(a).get<double>();
    }
    dtype = h.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("invalid volume header " + hp.string() + ": " + e.what());
  }
  check_geometry(dims, spacing);

  const fs::path pp = payload_path(hp);
  const std::size_t n = voxel_count(dims);
  if (dtype == "f32") {
    Modality modality = modality_from_string(h.value("modality", std::string("SYNTH")));
    Volume v(dims, spacing, modality, read_payload<float>(pp, n));
    v.validate();
    return v;
  }
  if (dtype == "u8") {
    if (!h.contains("num_classes")) throw DataError("label header lacks num_classes");
    int k = h["num_classes"].get<int>();
    return LabelVolume(dims, spacing, k, read_payload<std::uint8_t>(pp, n));
  }
  throw DataError("unsupported dtype '" + dtype + "'");
}

Volume read_image(const fs::path& path) {
  auto v = read_volume(path);
  if (auto* img = std::get_if<Volume>(&v)) return std::move(*img);
  throw DataError(header_path(path).string() + " is a label volume, expected f32");
}

LabelVolume read_labels(const fs::path& path) {
  auto v = read_volume(path);
  if (auto* lab = std::get_if<LabelVolume>(&v)) return std::move(*lab);
  throw DataError(header_path(path).string() + " is an f32 volume, expected u8 labels");
}

void write_volume(const Volume& v, const fs::path& path) {
  v.validate();
  json h = base_header(v.dims, v.spacing);
  h["dtype"] = "f32";
  h["modality"] = to_string(v.modality);
  write_header(header_path(path), h);
  write_payload(payload_path(path), v.data);
}

void write_volume(const LabelVolume& v, const fs::path& path) {
  v.validate();
  json h = base_header(v.dims, v.spacing);
  h["dtype"] = "u8";
  h["modality"] = "SYNTH";
  h["num_classes"] = v.num_classes;
  write_header(header_path(path), h);
  write_payload(payload_path(path), v.labels);
}

// ---------------------------------------------------------------------------
// Intensity normalization

namespace {

Volume standardize(Volume v) {
  double sum = 0.0;
  for (float x : v.data) sum += x;
  const double mean = sum / static_cast<double>(v.data.size());
  double sq = 0.0;
  for (float x : v.data) sq += (x - mean) * (x - mean);
  const double stddev = std::sqrt(sq / static_cast<double>(v.data.size()));
  if (stddev == 0.0) {
    std::fill(v.data.begin(), v.data.end(), 0.0f);
    return v;
  }
  for (float& x : v.data) x = static_cast<float>((x - mean) / stddev);
  return v;
}

}  // namespace

Volume clip_and_normalize_ct(const Volume& v, float lo, float hi) {
  if (!(lo < hi)) throw DataError("clip range requires lo < hi");
  if (v.modality != Modality::CT) throw DataError("clip_and_normalize_ct expects a CT volume");
  Volume out = v;
  for (float& x : out.data) x = std::clamp(x, lo, hi);
  return standardize(std::move(out));
}

Volume normalize_zscore(const Volume& v) { return standardize(v); }

Volume preprocess(const Volume& v) {
  if (v.modality == Modality::CT) return clip_and_normalize_ct(v, kCtClipLow, kCtClipHigh);
  return normalize_zscore(v);
}

// ---------------------------------------------------------------------------
// Resampling

Int3 resampled_dims(const Int3& dims, const Real3& spacing, const Real3& target) {
  Int3 out{};
  for (int a = 0; a < 3; ++a) {
    if (!(target[a] > 0.0) || !std::isfinite(target[a]))
      throw DataError("target spacing must be positive and finite");
    const double extent = dims[a] * spacing[a] / target[a];
    out[a] = std::max(1, static_cast<int>(std::floor(extent + 0.5)));
  }
  return out;
}

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

// Per-axis interpolation taps for center-aligned sampling.
std::vector<Tap> linear_taps(int in_n, int out_n, double scale) {
  std::vector<Tap> taps(static_cast<std::size_t>(out_n));
  for (int i = 0; i < out_n; ++i) {
    double c = (i + 0.5) * scale - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(in_n - 1));
    int lo = static_cast<int>(std::floor(c));
    int hi = std::min(lo + 1, in_n - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, c - lo};
  }
  return taps;
}

std::vector<int> nearest_taps(int in_n, int out_n, double scale) {
  std::vector<int> idx(static_cast<std::size_t>(out_n));
  for (int i = 0; i < out_n; ++i) {
    double c = (i + 0.5) * scale - 0.5;
    int n = static_cast<int>(std::floor(c + 0.5));
    idx[static_cast<std::size_t>(i)] = std::clamp(n, 0, in_n - 1);
  }
  return idx;
}

}  // namespace

std::vector<float> resample_trilinear(std::span<const float> data, const Int3& dims,
                                      const Int3& out_dims, const Real3& scale) {
  const auto tz = linear_taps(dims[0], out_dims[0], scale[0]);
  const auto ty = linear_taps(dims[1], out_dims[1], scale[1]);
  const auto tx = linear_taps(dims[2], out_dims[2], scale[2]);
  std::vector<float> out(voxel_count(out_dims));
  std::size_t o = 0;
  for (const Tap& z : tz) {
    for (const Tap& y : ty) {
      for (const Tap& x : tx) {
        auto v = [&](int zz, int yy, int xx) {
          return static_cast<double>(data[voxel_index(dims, zz, yy, xx)]);
        };
        const double c00 = v(z.lo, y.lo, x.lo) * (1 - x.frac) + v(z.lo, y.lo, x.hi) * x.frac;
        const double c01 = v(z.lo, y.hi, x.lo) * (1 - x.frac) + v(z.lo, y.hi, x.hi) * x.frac;
        const double c10 = v(z.hi, y.lo, x.lo) * (1 - x.frac) + v(z.hi, y.lo, x.hi) * x.frac;
        const double c11 = v(z.hi, y.hi, x.lo) * (1 - x.frac) + v(z.hi, y.hi, x.hi) * x.frac;
        const double c0 = c00 * (1 - y.frac) + c01 * y.frac;
        const double c1 = c10 * (1 - y.frac) + c11 * y.frac;
        out[o++] = static_cast<float>(c0 * (1 - z.frac) + c1 * z.frac);
      }
    }
  }
  return out;
}

std::vector<float> resample_trilinear(std::span<const float> data, const Int3& dims,
                                      const Int3& out_dims) {
  Real3 scale{};
  for (int a = 0; a < 3; ++a) scale[a] = static_cast<double>(dims[a]) / out_dims[a];
  return resample_trilinear(data, dims, out_dims, scale);
}

Volume resample(const Volume& v, const Real3& target_spacing) {
  const Int3 out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
  Real3 scale{};
  for (int a = 0; a < 3; ++a) scale[a] = target_spacing[a] / v.spacing[a];
  return Volume(out_dims, target_spacing, v.modality,
                resample_trilinear(v.data, v.dims, out_dims, scale));
}

LabelVolume resample(const LabelVolume& v, const Real3& target_spacing) {
  const Int3 out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
  const auto iz = nearest_taps(v.dims[0], out_dims[0], target_spacing[0] / v.spacing[0]);
  const auto iy = nearest_taps(v.dims[1], out_dims[1], target_spacing[1] / v.spacing[1]);
  const auto ix = nearest_taps(v.dims[2], out_dims[2], target_spacing[2] / v.spacing[2]);
  LabelVolume out(out_dims, target_spacing, v.num_classes);
  std::size_t o = 0;
  for (int z : iz)
    for (int y : iy)
      for (int x : ix) out.labels[o++] = v.at(z, y, x);
  return out;
}

}  // namespace banet::io
