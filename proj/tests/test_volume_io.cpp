#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "banet/volume.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace banet;
using namespace banet::io;

namespace {

void write_raw_header(const std::filesystem::path& stem, const std::string& json, std::size_t bytes) {
  std::ofstream(stem.string() + ".json") << json;
  std::ofstream raw(stem.string() + ".raw", std::ios::binary);
  std::vector<char> zeros(bytes, 0);
  raw.write(zeros.data(), static_cast<std::streamsize>(bytes));
}

}  // namespace

TEST_CASE("smallest well-formed volume file") {
  test::TempDir dir;
  write_raw_header(dir.path / "v", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32"})", 32);
  const Volume v = read_image(dir.path / "v");
  CHECK(v.dims == Int3{2, 2, 2});
  CHECK(v.size() == 8);
  CHECK(v.modality == Modality::SYNTH);
}

TEST_CASE("short payload is rejected") {
  test::TempDir dir;
  write_raw_header(dir.path / "v", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32"})", 31);
  CHECK_THROWS_WITH_AS(read_volume(dir.path / "v"), doctest::Contains("payload size mismatch"),
                       DataError);
}

TEST_CASE("header problems are data errors") {
  test::TempDir dir;
  CHECK_THROWS_AS(read_volume(dir.path / "missing"), DataError);
  write_raw_header(dir.path / "a", R"({"dims":[2,2],"spacing_mm":[1,1,1],"dtype":"f32"})", 32);
  CHECK_THROWS_AS(read_volume(dir.path / "a"), DataError);
  write_raw_header(dir.path / "b", R"({"dims":[2,2,2],"spacing_mm":[1,0,1],"dtype":"f32"})", 32);
  CHECK_THROWS_AS(read_volume(dir.path / "b"), DataError);
  write_raw_header(dir.path / "c", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"i16"})", 16);
  CHECK_THROWS_AS(read_volume(dir.path / "c"), DataError);
  write_raw_header(dir.path / "d", R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"u8"})", 8);
  CHECK_THROWS_AS(read_volume(dir.path / "d"), DataError);
  std::ofstream(dir.path / "e.json") << "{not json";
  CHECK_THROWS_AS(read_volume(dir.path / "e"), DataError);
}

TEST_CASE("labels at or above num_classes are rejected") {
  test::TempDir dir;
  const std::string stem = (dir.path / "l").string();
  std::ofstream(stem + ".json") << R"({"dims":[1,1,2],"spacing_mm":[1,1,1],"dtype":"u8","num_classes":2})";
  std::ofstream raw(stem + ".raw", std::ios::binary);
  raw.put(1);
  raw.put(2);
  raw.close();
  CHECK_THROWS_AS(read_labels(stem), DataError);
}

TEST_CASE("non-finite intensities are rejected") {
  Volume v(Int3{1, 1, 2}, Real3{1, 1, 1}, Modality::CT);
  v.data[1] = std::nanf("");
  CHECK_THROWS_AS(v.validate(), DataError);
}

TEST_CASE("write then read is bit-identical") {
  test::TempDir dir;
  std::mt19937_64 rng(7);
  std::normal_distribution<float> g(0.0f, 100.0f);
  Volume v(Int3{3, 5, 4}, Real3{2.0, 1.2, 1.2}, Modality::MR);
  for (auto& x : v.data) x = g(rng);
  write_volume(v, dir.path / "img");
  const Volume r = read_image(dir.path / "img.json");
  CHECK(r.dims == v.dims);
  CHECK(r.spacing == v.spacing);
  CHECK(r.modality == Modality::MR);
  CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(float)) == 0);

  LabelVolume y(Int3{3, 5, 4}, Real3{2.0, 1.2, 1.2}, 4);
  std::uniform_int_distribution<int> cls(0, 3);
  for (auto& l : y.labels) l = static_cast<std::uint8_t>(cls(rng));
  write_volume(y, dir.path / "lab");
  const LabelVolume ry = read_labels(dir.path / "lab.raw");
  CHECK(ry.num_classes == 4);
  CHECK(ry.labels == y.labels);
  CHECK_THROWS_AS(read_image(dir.path / "lab"), DataError);
  CHECK_THROWS_AS(read_labels(dir.path / "img"), DataError);
}

TEST_CASE("CT clipping and normalization") {
  Volume v(Int3{1, 1, 3}, Real3{1, 1, 1}, Modality::CT, std::vector<float>{-2000.0f, -991.0f, 373.0f});
  const Volume out = clip_and_normalize_ct(v, kCtClipLow, kCtClipHigh);
  // -2000 clamps to -991, so the first two voxels coincide.
  CHECK(out.data[0] == out.data[1]);

  Volume two(Int3{1, 1, 2}, Real3{1, 1, 1}, Modality::CT, std::vector<float>{-991.0f, 373.0f});
  const Volume z = clip_and_normalize_ct(two, kCtClipLow, kCtClipHigh);
  CHECK(z.data[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(z.data[1] == doctest::Approx(1.0).epsilon(1e-6));

  Volume flat(Int3{2, 2, 2}, Real3{1, 1, 1}, Modality::CT, 100.0f);
  for (float x : clip_and_normalize_ct(flat, kCtClipLow, kCtClipHigh).data) CHECK(x == 0.0f);

  CHECK_THROWS_AS(clip_and_normalize_ct(v, 1.0f, 1.0f), DataError);
  Volume mr(Int3{1, 1, 1}, Real3{1, 1, 1}, Modality::MR);
  CHECK_THROWS_AS(clip_and_normalize_ct(mr, kCtClipLow, kCtClipHigh), DataError);
}

TEST_CASE("z-score normalization") {
  Volume v(Int3{1, 1, 2}, Real3{1, 1, 1}, Modality::MR, std::vector<float>{0.0f, 2.0f});
  const Volume z = normalize_zscore(v);
  CHECK(z.data[0] == -1.0f);
  CHECK(z.data[1] == 1.0f);

  Volume flat(Int3{2, 3, 2}, Real3{1, 1, 1}, Modality::MR, -4.0f);
  for (float x : normalize_zscore(flat).data) CHECK(x == 0.0f);

  std::mt19937_64 rng(11);
  std::normal_distribution<float> g(37.0f, 12.0f);
  Volume r(Int3{9, 8, 7}, Real3{1, 1, 1}, Modality::SYNTH);
  for (auto& x : r.data) x = g(rng);
  const Volume n = normalize_zscore(r);
  double mean = 0.0;
  for (float x : n.data) mean += x;
  mean /= static_cast<double>(n.size());
  double var = 0.0;
  for (float x : n.data) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(n.size()));
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(sd - 1.0) < 1e-4);
}

TEST_CASE("preprocess dispatches on modality") {
  Volume ct(Int3{1, 1, 2}, Real3{1, 1, 1}, Modality::CT, std::vector<float>{-5000.0f, 373.0f});
  const Volume a = preprocess(ct);
  CHECK(a.data[0] == doctest::Approx(-1.0));
  Volume mr(Int3{1, 1, 2}, Real3{1, 1, 1}, Modality::MR, std::vector<float>{-5000.0f, 373.0f});
  const Volume b = preprocess(mr);
  CHECK(b.data[0] == doctest::Approx(-1.0));
  CHECK(b.data[1] == doctest::Approx(1.0));
}

TEST_CASE("resampling") {
  SUBCASE("same spacing is the identity") {
    std::mt19937_64 rng(3);
    Volume v(Int3{4, 5, 6}, Real3{2.0, 1.2, 1.2}, Modality::SYNTH);
    for (auto& x : v.data) x = std::uniform_real_distribution<float>(-1, 1)(rng);
    const Volume r = resample(v, v.spacing);
    CHECK(r.dims == v.dims);
    CHECK(r.data == v.data);
    LabelVolume y(Int3{4, 5, 6}, Real3{2.0, 1.2, 1.2}, 3);
    for (auto& l : y.labels) l = static_cast<std::uint8_t>(rng() % 3);
    CHECK(resample(y, y.spacing).labels == y.labels);
  }
  SUBCASE("constants stay constant") {
    Volume v(Int3{5, 7, 3}, Real3{1.0, 1.0, 1.0}, Modality::SYNTH, 2.5f);
    const Volume r = resample(v, Real3{0.7, 1.9, 0.45});
    CHECK(r.dims == resampled_dims(v.dims, v.spacing, Real3{0.7, 1.9, 0.45}));
    CHECK(r.spacing == Real3{0.7, 1.9, 0.45});
    for (float x : r.data) CHECK(x == doctest::Approx(2.5f));
  }
  SUBCASE("output dims round the physical extent") {
    CHECK(resampled_dims(Int3{10, 10, 10}, Real3{1, 1, 1}, Real3{2, 3, 4}) == Int3{5, 3, 3});
    CHECK(resampled_dims(Int3{1, 1, 1}, Real3{1, 1, 1}, Real3{10, 10, 10}) == Int3{1, 1, 1});
    CHECK_THROWS_AS(resampled_dims(Int3{1, 1, 1}, Real3{1, 1, 1}, Real3{0, 1, 1}), DataError);
  }
  SUBCASE("ramp downsampled twofold matches the oracle") {
    Volume v(Int3{1, 1, 4}, Real3{1, 1, 1}, Modality::SYNTH, std::vector<float>{0, 1, 2, 3});
    const Volume r = resample(v, Real3{1, 1, 2});
    REQUIRE(r.dims == Int3{1, 1, 2});
    const auto ref = oracle::trilinear({0, 1, 2, 3}, v.dims, r.dims);
    CHECK(std::abs(r.data[0] - ref[0]) < 1e-6);
    CHECK(std::abs(r.data[1] - ref[1]) < 1e-6);
    CHECK(r.data[0] == doctest::Approx(0.5));
    CHECK(r.data[1] == doctest::Approx(2.5));
  }
  SUBCASE("random grid matches the oracle") {
    std::mt19937_64 rng(5);
    const Int3 dims{5, 6, 7};
    std::vector<float> data(voxel_count(dims));
    std::vector<double> ref_in;
    for (auto& x : data) {
      x = std::uniform_real_distribution<float>(-3, 3)(rng);
      ref_in.push_back(x);
    }
    for (const Int3 out : {Int3{9, 4, 7}, Int3{2, 11, 3}, Int3{1, 1, 1}}) {
      const auto got = resample_trilinear(data, dims, out);
      const auto ref = oracle::trilinear(ref_in, dims, out);
      REQUIRE(got.size() == ref.size());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-5);
    }
  }
  SUBCASE("nearest-neighbor labels introduce no new values") {
    LabelVolume y(Int3{6, 6, 6}, Real3{1, 1, 1}, 5);
    for (std::size_t i = 0; i < y.labels.size(); ++i) y.labels[i] = (i % 7 == 0) ? 4 : (i % 3 == 0 ? 2 : 0);
    const LabelVolume r = resample(y, Real3{0.6, 1.7, 1.3});
    for (auto l : r.labels) CHECK((l == 0 || l == 2 || l == 4));
  }
}
