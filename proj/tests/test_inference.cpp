#include <cmath>
#include <fstream>
#include <random>

#include "banet/inference.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace banet;
using namespace banet::infer;

namespace {

arch::NetworkConfig small_net(Int3 patch) {
  arch::NetworkConfig c;
  c.levels = 2;
  c.base_channels = 4;
  c.num_classes = 3;
  c.patch_dims = patch;
  return c;
}

io::Volume random_volume(Int3 dims, std::mt19937_64& rng) {
  io::Volume v(dims, Real3{1.5, 1, 1}, io::Modality::SYNTH);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (auto& x : v.data) x = g(rng);
  return v;
}

Prediction two_voxel(float a0, float a1) {
  Prediction p;
  p.num_classes = 2;
  p.dims = {1, 1, 1};
  p.probs = {a0, a1};
  p.labels = argmax_labels(p.probs, 2, p.dims, p.spacing);
  return p;
}

io::LabelVolume random_mask(Int3 dims, int k, std::mt19937_64& rng) {
  io::LabelVolume y(dims, Real3{1, 1, 1}, k);
  std::uniform_int_distribution<int> cls(0, k - 1);
  for (auto& l : y.labels) l = static_cast<std::uint8_t>(cls(rng));
  return y;
}

}  // namespace

TEST_CASE("window origins") {
  CHECK(window_origins(32, 32, 0.5) == std::vector<int>{0});
  CHECK(window_origins(48, 32, 0.5) == std::vector<int>{0, 16});
  CHECK(window_origins(40, 16, 0.0) == std::vector<int>{0, 12, 24});
  CHECK(window_origins(50, 16, 0.5) == std::vector<int>{0, 7, 14, 20, 27, 34});
  for (const double overlap : {0.0, 0.25, 0.5, 0.9}) {
    const auto o = window_origins(77, 20, overlap);
    CHECK(o.front() == 0);
    CHECK(o.back() == 57);
    for (std::size_t i = 1; i < o.size(); ++i) {
      CHECK(o[i] > o[i - 1]);
      CHECK(o[i] - o[i - 1] <= std::max(1, static_cast<int>(std::floor(20 * (1.0 - overlap)))));
    }
  }
  CHECK_THROWS_AS(window_origins(10, 16, 0.5), ShapeError);
}

TEST_CASE("single window equals forward_infer") {
  std::mt19937_64 rng(1);
  const Int3 patch{8, 12, 8};
  const auto net = arch::BaNet<float>::build(small_net(patch), 1);
  const auto v = random_volume(patch, rng);
  const Prediction p = sliding_window_predict(net, v, patch, 0.0);
  const auto direct = net.forward_infer(Tensor<float>(Shape{1, 1, 8, 12, 8}, std::vector<float>(v.data)));
  REQUIRE(p.probs.size() == direct.numel());
  for (std::size_t i = 0; i < p.probs.size(); ++i) CHECK(std::abs(p.probs[i] - direct.values()[i]) <= 1e-6);
  CHECK(p.spacing == v.spacing);
  CHECK(p.labels.labels == argmax_labels(direct.values(), 3, patch, v.spacing).labels);
}

TEST_CASE("volume smaller than the window is padded then cropped") {
  std::mt19937_64 rng(2);
  const Int3 patch{8, 8, 8};
  const auto net = arch::BaNet<float>::build(small_net(patch), 2);
  const auto v = random_volume(Int3{5, 8, 7}, rng);
  Tensor<float> padded(Shape{1, 1, 8, 8, 8});
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 7; ++x) padded.at(0, 0, z, y, x) = v.at(z, y, x);
  const auto direct = net.forward_infer(padded);
  const Prediction p = sliding_window_predict(net, v, patch, 0.5);
  CHECK(p.dims == v.dims);
  const std::size_t m = io::voxel_count(v.dims);
  for (int k = 0; k < 3; ++k)
    for (int z = 0; z < 5; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 7; ++x)
          CHECK(std::abs(p.probs[k * m + io::voxel_index(v.dims, z, y, x)] - direct.at(0, k, z, y, x)) <= 1e-6);
}

TEST_CASE("constant input: every window sees the same data") {
  // Zero padding inside the network makes the output vary near window
  // borders, but all windows produce the same tile, so the sliding result is
  // the average of that tile at each covering offset.
  const Int3 patch{8, 8, 8};
  const auto net = arch::BaNet<float>::build(small_net(patch), 3);
  const io::Volume v(Int3{12, 8, 8}, Real3{1, 1, 1}, io::Modality::SYNTH, 0.7f);
  const Prediction p = sliding_window_predict(net, v, patch, 0.5);
  const auto tile = net.forward_infer(Tensor<float>(Shape{1, 1, 8, 8, 8}, 0.7f));
  const std::size_t m = io::voxel_count(v.dims);
  for (int k = 0; k < 3; ++k)
    for (int z = 0; z < 12; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double sum = 0.0;
          int hits = 0;
          for (const int oz : {0, 4})
            if (z >= oz && z < oz + 8) {
              sum += tile.at(0, k, z - oz, y, x);
              ++hits;
            }
          CHECK(std::abs(p.probs[k * m + io::voxel_index(v.dims, z, y, x)] - sum / hits) <= 1e-6);
        }
}

TEST_CASE("overlapping windows are averaged") {
  std::mt19937_64 rng(4);
  const Int3 patch{8, 8, 8};
  const auto net = arch::BaNet<float>::build(small_net(patch), 4);
  const auto v = random_volume(Int3{12, 8, 8}, rng);
  const Prediction p = sliding_window_predict(net, v, patch, 0.5);

  // Windows start at z = 0 and z = 4; average their outputs by hand.
  std::vector<double> sum(3 * 12 * 64, 0.0);
  std::vector<int> hits(12 * 64, 0);
  for (const int oz : {0, 4}) {
    Tensor<float> w(Shape{1, 1, 8, 8, 8});
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) w.at(0, 0, z, y, x) = v.at(oz + z, y, x);
    const auto out = net.forward_infer(w);
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const std::size_t g = ((oz + z) * 8 + y) * 8 + x;
          ++hits[g];
          for (int k = 0; k < 3; ++k) sum[k * 768 + g] += out.at(0, k, z, y, x);
        }
  }
  for (std::size_t g = 0; g < 768; ++g) {
    const int z = static_cast<int>(g / 64);
    CHECK(hits[g] == ((z >= 4 && z < 8) ? 2 : 1));
    for (int k = 0; k < 3; ++k) CHECK(std::abs(p.probs[k * 768 + g] - sum[k * 768 + g] / hits[g]) <= 1e-6);
  }
  CHECK_THROWS_AS(sliding_window_predict(net, v, patch, 0.95), std::invalid_argument);
}

TEST_CASE("ensemble") {
  SUBCASE("worked example") {
    const std::vector<Prediction> members{two_voxel(0.6f, 0.4f), two_voxel(0.2f, 0.8f)};
    const Prediction e = ensemble(members);
    CHECK(e.probs[0] == doctest::Approx(0.4f));
    CHECK(e.probs[1] == doctest::Approx(0.6f));
    CHECK(e.labels.labels[0] == 1);
  }
  SUBCASE("singleton and identical members") {
    std::mt19937_64 rng(5);
    const Int3 patch{8, 8, 8};
    const auto net = arch::BaNet<float>::build(small_net(patch), 5);
    const Prediction p = sliding_window_predict(net, random_volume(Int3{8, 8, 8}, rng), patch, 0.0);
    const std::vector<Prediction> one{p};
    const std::vector<Prediction> two{p, p};
    CHECK(ensemble(one).probs == p.probs);
    CHECK(ensemble(two).probs == p.probs);
    CHECK(ensemble(two).labels.labels == p.labels.labels);
  }
  SUBCASE("member order does not matter") {
    const std::vector<Prediction> ab{two_voxel(0.1f, 0.9f), two_voxel(0.7f, 0.3f), two_voxel(0.35f, 0.65f)};
    const std::vector<Prediction> ba{ab[2], ab[0], ab[1]};
    const Prediction x = ensemble(ab), y = ensemble(ba);
    CHECK(std::abs(x.probs[0] - y.probs[0]) <= 1e-7);
    CHECK(std::abs(x.probs[0] + x.probs[1] - 1.0f) <= 1e-6);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(ensemble(std::vector<Prediction>{}), std::invalid_argument);
    Prediction other = two_voxel(0.5f, 0.5f);
    other.spacing = {2, 1, 1};
    const std::vector<Prediction> mixed{two_voxel(0.5f, 0.5f), other};
    CHECK_THROWS_AS(ensemble(mixed), ShapeError);
  }
}

TEST_CASE("argmax ties go to the lower class") {
  const auto l = argmax_labels(std::vector<float>{0.5f, 0.5f}, 2, Int3{1, 1, 1}, Real3{1, 1, 1});
  CHECK(l.labels[0] == 0);
  CHECK_THROWS_AS(argmax_labels(std::vector<float>{0.5f}, 2, Int3{1, 1, 1}, Real3{1, 1, 1}), ShapeError);
}

TEST_CASE("dice score") {
  SUBCASE("identical masks") {
    std::mt19937_64 rng(6);
    const auto y = random_mask(Int3{5, 5, 5}, 4, rng);
    const auto r = dice_score(y, y, 4);
    REQUIRE(r.per_class.size() == 3);
    for (double d : r.per_class) CHECK(d == 1.0);
    CHECK(r.mean == 1.0);
  }
  SUBCASE("half overlap") {
    io::LabelVolume p(Int3{1, 1, 4}, Real3{1, 1, 1}, 2), g(Int3{1, 1, 4}, Real3{1, 1, 1}, 2);
    p.labels = {1, 1, 0, 0};
    g.labels = {0, 1, 1, 0};
    CHECK(dice_score(p, g, 2).per_class[0] == 0.5);
  }
  SUBCASE("empty conventions") {
    io::LabelVolume p(Int3{1, 1, 2}, Real3{1, 1, 1}, 3), g(Int3{1, 1, 2}, Real3{1, 1, 1}, 3);
    p.labels = {1, 0};
    g.labels = {0, 0};
    const auto r = dice_score(p, g, 3);
    CHECK(r.per_class[0] == 0.0);
    CHECK(r.per_class[1] == 1.0);
    CHECK(r.mean == 0.5);
  }
  SUBCASE("random masks match the counting oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 25; ++trial) {
      const auto p = random_mask(Int3{6, 7, 5}, 5, rng);
      const auto g = random_mask(Int3{6, 7, 5}, 5, rng);
      const auto r = dice_score(p, g, 5);
      const auto ref = oracle::dice(p, g, 5);
      REQUIRE(r.per_class.size() == ref.size());
      double mean = 0.0;
      for (std::size_t c = 0; c < ref.size(); ++c) {
        CHECK(r.per_class[c] == ref[c]);
        mean += ref[c];
      }
      CHECK(r.mean == doctest::Approx(mean / 4.0).epsilon(1e-15));
      CHECK(dice_score(g, p, 5).per_class == r.per_class);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(dice_score(io::LabelVolume(Int3{2, 2, 2}, Real3{1, 1, 1}, 2),
                               io::LabelVolume(Int3{2, 2, 1}, Real3{1, 1, 1}, 2), 2),
                    ShapeError);
  }
}

TEST_CASE("dice csv") {
  test::TempDir dir;
  DiceReport r;
  r.per_class = {0.5, 1.0};
  r.mean = 0.75;
  write_dice_csv(r, dir.path / "d.csv");
  std::ifstream in(dir.path / "d.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  CHECK(lines == std::vector<std::string>{"class,dice", "1,0.5", "2,1", "mean,0.75"});
}

TEST_CASE("prediction files") {
  test::TempDir dir;
  Prediction p;
  p.num_classes = 2;
  p.dims = {2, 1, 2};
  p.spacing = {2, 1, 1};
  p.probs = {0.9f, 0.2f, 0.3f, 0.6f, 0.1f, 0.8f, 0.7f, 0.4f};
  p.labels = argmax_labels(p.probs, 2, p.dims, p.spacing);
  CHECK(p.labels.labels == std::vector<std::uint8_t>{0, 1, 1, 0});
  save_prediction(p, dir.path / "pred", dir.path / "probs");
  const auto labels = io::read_labels(dir.path / "pred");
  CHECK(labels.labels == p.labels.labels);
  CHECK(labels.spacing == p.spacing);
  const auto probs = io::read_image(dir.path / "probs");
  CHECK(probs.dims == Int3{4, 1, 2});
  CHECK(probs.data == p.probs);

  write_midslice_pgm(labels, dir.path / "mid.pgm");
  std::ifstream pgm(dir.path / "mid.pgm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  pgm >> magic >> w >> h >> maxval;
  pgm.get();
  CHECK(magic == "P5");
  CHECK(w == 2);
  CHECK(h == 1);
  CHECK(maxval == 255);
  CHECK(static_cast<unsigned char>(pgm.get()) == 255);
  CHECK(static_cast<unsigned char>(pgm.get()) == 0);
}

TEST_CASE("prediction resampling keeps distributions") {
  Prediction p;
  p.num_classes = 2;
  p.dims = {1, 1, 2};
  p.probs = {1.0f, 0.0f, 0.0f, 1.0f};
  p.labels = argmax_labels(p.probs, 2, p.dims, p.spacing);
  const Prediction up = resample_prediction(p, Int3{1, 1, 4}, Real3{1, 1, 0.5});
  const auto ref = oracle::trilinear({1.0, 0.0}, p.dims, up.dims);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(up.probs[i] - ref[i]) <= 1e-6);
    CHECK(std::abs(up.probs[i] + up.probs[4 + i] - 1.0f) <= 1e-6);
  }
  CHECK(up.labels.labels == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK(up.spacing == Real3{1, 1, 0.5});
}
