#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "banet/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace banet;
using namespace banet::train;

namespace {

arch::NetworkConfig tiny_net() {
  arch::NetworkConfig c;
  c.levels = 2;
  c.base_channels = 2;
  c.num_classes = 3;
  c.patch_dims = {8, 8, 8};
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.max_epochs = 3;
  t.steps_per_epoch = 2;
  t.batch_size = 2;
  t.patch_dims = {8, 8, 8};
  t.seed = 4;
  return t;
}

Case blob_case(const std::string& name, Int3 dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  Case c;
  c.name = name;
  c.image = io::Volume(dims, Real3{1, 1, 1}, io::Modality::SYNTH);
  c.labels = io::LabelVolume(dims, Real3{1, 1, 1}, 3);
  for (int z = 0; z < dims[0]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[2]; ++x) {
        const std::size_t v = io::voxel_index(dims, z, y, x);
        std::uint8_t l = 0;
        if (z >= 2 && z < 7 && y >= 2 && y < 7 && x >= 2 && x < 7) l = 1;
        if (z >= 3 && z < 5 && y >= 3 && y < 5 && x >= 3 && x < 5) l = 2;
        c.labels.labels[v] = l;
        c.image.data[v] = 0.5f * l + noise(rng);
      }
  return c;
}

Dataset tiny_data() { return {blob_case("a", {8, 8, 8}, 1), blob_case("b", {10, 9, 8}, 2)}; }

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("polynomial learning rate") {
  TrainConfig c;
  c.lr0 = 0.01;
  c.max_epochs = 1000;
  CHECK(std::abs(poly_lr(0, c) - 0.01) <= 1e-12);
  CHECK(poly_lr(1000, c) == 0.0);
  CHECK(std::abs(poly_lr(500, c) - 0.01 * std::pow(0.5, 0.9)) <= 1e-12);
  double prev = poly_lr(0, c);
  for (int t = 1; t <= 1000; t += 37) {
    const double lr = poly_lr(t, c);
    CHECK(lr < prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(-1, c), DataError);
  CHECK_THROWS_AS(poly_lr(1001, c), DataError);
}

TEST_CASE("train config validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lr0 = -0.1; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.max_epochs = 0; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.momentum = 1.0; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.fg_oversample_prob = 1.5; }).validate(), DataError);
}

TEST_CASE("sgd update rules") {
  SUBCASE("zero learning rate is a no-op") {
    Tensor<double> w(Shape{1, 1, 1, 1, 3}, std::vector<double>{1, 2, 3});
    SgdOptimizer<double> opt({{"w", w}}, 0.99, true);
    w.grad_buffer().assign({5, -5, 7});
    opt.step(0.0);
    CHECK(std::vector<double>(w.values().begin(), w.values().end()) == std::vector<double>{1, 2, 3});
  }
  SUBCASE("plain step without momentum") {
    Tensor<double> w(Shape{1, 1, 1, 1, 1}, 1.0);
    SgdOptimizer<double> opt({{"w", w}}, 0.0, false);
    w.grad_buffer().assign({2.0});
    opt.step(0.1);
    CHECK(w.item() == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("two momentum steps match a hand unroll") {
    for (const bool nesterov : {false, true}) {
      const double mu = 0.9, lr = 0.05, g1 = 0.3, g2 = -1.1;
      Tensor<double> w(Shape{1, 1, 1, 1, 1}, 2.0);
      SgdOptimizer<double> opt({{"w", w}}, mu, nesterov);
      w.grad_buffer().assign({g1});
      opt.step(lr);
      opt.zero_grad();
      w.grad_buffer().assign({g2});
      opt.step(lr);

      const double v1 = g1;
      const double v2 = mu * v1 + g2;
      const double u1 = nesterov ? g1 + mu * v1 : v1;
      const double u2 = nesterov ? g2 + mu * v2 : v2;
      CHECK(w.item() == doctest::Approx(2.0 - lr * u1 - lr * u2).epsilon(1e-14));
      CHECK(opt.momentum_buffers()[0][0] == doctest::Approx(v2).epsilon(1e-14));
    }
  }
  SUBCASE("missing gradient") {
    Tensor<double> w(Shape{1, 1, 1, 1, 1}, 1.0);
    SgdOptimizer<double> opt({{"w", w}}, 0.9, true);
    CHECK_THROWS_AS(opt.step(0.1), NumericalError);
  }
  SUBCASE("momentum buffers must match") {
    Tensor<float> w(Shape{1, 1, 1, 1, 2});
    SgdOptimizer<float> opt({{"w", w}}, 0.9, true);
    CHECK_THROWS_AS(opt.set_momentum_buffers({{1.0f}}), DataError);
    CHECK_NOTHROW(opt.set_momentum_buffers({{1.0f, 2.0f}}));
  }
}

TEST_CASE("patch sampling") {
  const Case c = blob_case("a", {10, 9, 8}, 3);
  std::mt19937_64 rng(1);

  SUBCASE("patch equal to the volume is the volume") {
    TrainConfig cfg;
    cfg.patch_dims = {10, 9, 8};
    const Patch p = sample_patch(c.image, c.labels, cfg, rng);
    CHECK(p.origin == Int3{0, 0, 0});
    CHECK(p.labels.labels == c.labels.labels);
    CHECK(std::vector<float>(p.image.values().begin(), p.image.values().end()) == c.image.data);
  }
  SUBCASE("crops are co-registered") {
    TrainConfig cfg;
    cfg.patch_dims = {4, 3, 5};
    for (int i = 0; i < 50; ++i) {
      const Patch p = sample_patch(c.image, c.labels, cfg, rng);
      for (int a = 0; a < 3; ++a) {
        CHECK(p.origin[a] >= 0);
        CHECK(p.origin[a] + cfg.patch_dims[a] <= c.image.dims[a]);
      }
      for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 3; ++y)
          for (int x = 0; x < 5; ++x) {
            const std::size_t src = io::voxel_index(c.image.dims, p.origin[0] + z, p.origin[1] + y, p.origin[2] + x);
            REQUIRE(p.image.at(0, 0, z, y, x) == c.image.data[src]);
            REQUIRE(p.labels.at(z, y, x) == c.labels.labels[src]);
          }
    }
  }
  SUBCASE("forced foreground finds a single voxel") {
    io::Volume img(Int3{24, 24, 24}, Real3{1, 1, 1}, io::Modality::SYNTH);
    io::LabelVolume lab(Int3{24, 24, 24}, Real3{1, 1, 1}, 2);
    lab.at(20, 3, 17) = 1;
    TrainConfig cfg;
    cfg.patch_dims = {4, 4, 4};
    cfg.fg_oversample_prob = 1.0;
    for (int i = 0; i < 30; ++i) {
      const Patch p = sample_patch(img, lab, cfg, rng);
      int fg = 0;
      for (auto l : p.labels.labels) fg += l;
      CHECK(fg == 1);
    }
  }
  SUBCASE("oversampling rate") {
    io::Volume img(Int3{40, 40, 40}, Real3{1, 1, 1}, io::Modality::SYNTH);
    io::LabelVolume lab(Int3{40, 40, 40}, Real3{1, 1, 1}, 2);
    lab.at(1, 1, 1) = 1;
    TrainConfig cfg;
    cfg.patch_dims = {4, 4, 4};
    cfg.fg_oversample_prob = 0.33;
    const int trials = 3000;
    int with_fg = 0;
    for (int i = 0; i < trials; ++i) {
      const Patch p = sample_patch(img, lab, cfg, rng);
      for (auto l : p.labels.labels)
        if (l != 0) {
          ++with_fg;
          break;
        }
    }
    // Uniform crops alone hit the voxel with probability (2/37)^3; the forced
    // share dominates. Three standard deviations below 0.33.
    const double rate = static_cast<double>(with_fg) / trials;
    CHECK(rate >= 0.33 - 3.0 * std::sqrt(0.33 * 0.67 / trials));
  }
  SUBCASE("volume smaller than the patch") {
    TrainConfig cfg;
    cfg.patch_dims = {16, 4, 4};
    CHECK_THROWS_AS(sample_patch(c.image, c.labels, cfg, rng), DataError);
  }
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto net = arch::BaNet<float>::build(tiny_net(), 1);
  const auto before = make_checkpoint(net, nullptr, 0, tiny_train(), "");
  TrainConfig cfg = tiny_train();
  cfg.lr0 = 0.0;
  cfg.max_epochs = 1;
  cfg.steps_per_epoch = 1;
  const auto result = train::train(net, tiny_data(), cfg);
  const auto after = make_checkpoint(net, nullptr, 0, cfg, "");
  CHECK(same_bits(before.payload, after.payload));
  REQUIRE(result.trace.size() == 1);
  CHECK(std::isfinite(result.trace[0].mean_loss));
  CHECK(result.trace[0].lr == 0.0);
}

TEST_CASE("training reduces the loss and is deterministic") {
  const Dataset data = tiny_data();
  TrainConfig cfg = tiny_train();
  cfg.max_epochs = 6;
  auto a = arch::BaNet<float>::build(tiny_net(), 2);
  auto b = arch::BaNet<float>::build(tiny_net(), 2);
  int epochs_seen = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == epochs_seen++); };
  const auto ra = train::train(a, data, cfg, hooks);
  const auto rb = train::train(b, data, cfg);
  CHECK(epochs_seen == 6);
  REQUIRE(ra.trace.size() == rb.trace.size());
  for (std::size_t i = 0; i < ra.trace.size(); ++i) {
    CHECK(ra.trace[i].mean_loss == rb.trace[i].mean_loss);
    CHECK(ra.trace[i].lr == poly_lr(static_cast<int>(i), cfg));
  }
  CHECK(same_bits(ra.checkpoint.payload, rb.checkpoint.payload));
  CHECK(same_bits(ra.checkpoint.momentum, rb.checkpoint.momentum));
  CHECK(ra.checkpoint.rng_state == rb.checkpoint.rng_state);
  CHECK(ra.checkpoint.epoch == 6);
  CHECK(ra.trace.back().mean_loss < ra.trace.front().mean_loss);

  cfg.seed = 99;
  auto c = arch::BaNet<float>::build(tiny_net(), 2);
  const auto rc = train::train(c, data, cfg);
  CHECK_FALSE(same_bits(ra.checkpoint.payload, rc.checkpoint.payload));
}

TEST_CASE("training rejects bad inputs") {
  auto net = arch::BaNet<float>::build(tiny_net(), 0);
  CHECK_THROWS_AS(train::train(net, {}, tiny_train()), DataError);
  Dataset data = tiny_data();
  data[0].labels.num_classes = 5;
  CHECK_THROWS_AS(train::train(net, data, tiny_train()), DataError);
  TrainConfig cfg = tiny_train();
  cfg.steps_per_epoch = 0;
  CHECK_THROWS_AS(train::train(net, tiny_data(), cfg), DataError);
}

TEST_CASE("checkpoint round trip") {
  test::TempDir dir;
  auto net = arch::BaNet<float>::build(tiny_net(), 3);
  TrainConfig cfg = tiny_train();
  const auto result = train::train(net, tiny_data(), cfg);
  save_checkpoint(result.checkpoint, dir.path / "run");
  CHECK(std::filesystem::exists(dir.path / "run.ckpt.json"));
  CHECK(std::filesystem::file_size(dir.path / "run.ckpt.raw") ==
        (result.checkpoint.payload.size() + result.checkpoint.momentum.size()) * sizeof(float));

  const auto loaded = load_checkpoint(dir.path / "run.ckpt.raw");
  CHECK(same_bits(loaded.payload, result.checkpoint.payload));
  CHECK(same_bits(loaded.momentum, result.checkpoint.momentum));
  CHECK(loaded.epoch == cfg.max_epochs);
  CHECK(loaded.rng_state == result.checkpoint.rng_state);
  CHECK(loaded.network.levels == 2);
  CHECK(loaded.network.num_classes == 3);
  CHECK(loaded.train.seed == cfg.seed);
  CHECK(loaded.train.max_epochs == cfg.max_epochs);

  std::size_t offset = 0;
  for (const auto& e : loaded.manifest) {
    CHECK(e.offset == offset);
    CHECK(e.count == e.shape.numel());
    offset += e.count;
  }
  CHECK(offset == loaded.payload.size());
  CHECK(offset == net.parameter_count());

  const auto restored = network_from_checkpoint(loaded);
  const auto again = make_checkpoint(restored, nullptr, 0, cfg, "");
  CHECK(same_bits(again.payload, result.checkpoint.payload));

  save_checkpoint(loaded, dir.path / "copy.ckpt.json");
  CHECK(file_bytes(dir.path / "copy.ckpt.raw") == file_bytes(dir.path / "run.ckpt.raw"));
}

TEST_CASE("checkpoint errors") {
  test::TempDir dir;
  CHECK_THROWS_AS(load_checkpoint(dir.path / "none"), DataError);

  auto net = arch::BaNet<float>::build(tiny_net(), 3);
  const auto ckpt = make_checkpoint(net, nullptr, 0, tiny_train(), "");
  save_checkpoint(ckpt, dir.path / "c");
  std::filesystem::resize_file(dir.path / "c.ckpt.raw", ckpt.payload.size() * sizeof(float) - 4);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "c"), DataError);

  auto other_cfg = tiny_net();
  other_cfg.base_channels = 3;
  auto other = arch::BaNet<float>::build(other_cfg, 0);
  CHECK_THROWS_AS(load_parameters(other, ckpt), DataError);

  CHECK(checkpoint_stem("x/run.ckpt.json") == std::filesystem::path("x/run"));
  CHECK(checkpoint_stem("x/run.ckpt.raw") == std::filesystem::path("x/run"));
  CHECK(checkpoint_stem("x/run") == std::filesystem::path("x/run"));
}

TEST_CASE("dataset loading") {
  test::TempDir dir;
  CHECK_THROWS_AS(load_dataset(dir.path / "absent"), DataError);
  CHECK_THROWS_AS(load_dataset(dir.path), DataError);
  const Case b = blob_case("b", {8, 8, 8}, 5);
  const Case a = blob_case("a", {8, 8, 8}, 6);
  io::write_volume(b.image, dir.path / "case_b_image");
  io::write_volume(b.labels, dir.path / "case_b_label");
  io::write_volume(a.image, dir.path / "case_a_image");
  io::write_volume(a.labels, dir.path / "case_a_label");
  const Dataset d = load_dataset(dir.path);
  REQUIRE(d.size() == 2);
  CHECK(d[0].name == "case_a");
  CHECK(d[1].name == "case_b");
  CHECK(d[0].labels.labels == a.labels.labels);
  CHECK(d[1].image.data == b.image.data);

  const Dataset p = preprocess_dataset(d);
  double mean = 0.0;
  for (float x : p[0].image.data) mean += x;
  CHECK(std::abs(mean / 512.0) < 1e-5);
}

TEST_CASE("loss trace file") {
  test::TempDir dir;
  write_loss_trace({{0, 1.5, 0.01}, {1, 0.25, 0.005}}, dir.path / "t.csv");
  std::ifstream in(dir.path / "t.csv");
  std::string header, first, second;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  CHECK(header == "epoch,mean_loss,lr");
  CHECK(first.rfind("0,1.5,", 0) == 0);
  CHECK(second.rfind("1,0.25,", 0) == 0);
}
