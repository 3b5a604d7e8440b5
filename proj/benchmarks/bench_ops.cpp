#include <benchmark/benchmark.h>

#include <random>

#include "banet/network.hpp"
#include "banet/nn.hpp"
#include "banet/phantom.hpp"
#include "banet/supervision.hpp"
#include "banet/training.hpp"

using namespace banet;

namespace {

Tensor<float> random_input(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor<float> t(s);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// Args: channels in, channels out, spatial edge, stride.
void BM_Conv3dForward(benchmark::State& state) {
  const int ci = state.range(0), co = state.range(1), d = state.range(2), s = state.range(3);
  auto x = random_input(Shape{2, ci, d, d, d}, 1);
  auto p = nn::init_conv<float>(co, ci, {3, 3, 3}, {s, s, s}, {1, 1, 1}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv3d(x, p).data());
  state.counters["GMAC/s"] = benchmark::Counter(
      2.0 * co * ci * 27.0 * d * d * d / (s * s * s), benchmark::Counter::kIsIterationInvariantRate,
      benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Conv3dForward)
    ->Args({1, 8, 32, 1})
    ->Args({8, 8, 32, 1})
    ->Args({16, 8, 32, 1})
    ->Args({8, 16, 32, 2})
    ->Args({16, 16, 16, 1})
    ->Args({32, 32, 8, 1})
    ->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const int ci = state.range(0), co = state.range(1), d = state.range(2);
  auto x = random_input(Shape{2, ci, d, d, d}, 1);
  auto p = nn::init_conv<float>(co, ci, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 2);
  x.set_requires_grad();
  p.weight.set_requires_grad();
  p.bias.set_requires_grad();
  for (auto _ : state) {
    Tape<float> tape;
    Tensor<float> loss;
    {
      auto rec = tape.record();
      loss = sum(nn::conv3d(x, p));
    }
    tape.backward(loss);
    benchmark::DoNotOptimize(x.grad().data());
    x.zero_grad();
    p.weight.zero_grad();
    p.bias.zero_grad();
  }
}
BENCHMARK(BM_Conv3dBackward)->Args({8, 8, 32})->Args({16, 8, 32})->Unit(benchmark::kMillisecond);

void BM_InstanceNormLeaky(benchmark::State& state) {
  const int c = state.range(0), d = state.range(1);
  auto x = random_input(Shape{2, c, d, d, d}, 3);
  auto p = nn::init_instance_norm<float>(c);
  for (auto _ : state) benchmark::DoNotOptimize(nn::leaky_relu(nn::instance_norm(x, p)).data());
}
BENCHMARK(BM_InstanceNormLeaky)->Args({8, 32})->Unit(benchmark::kMillisecond);

arch::NetworkConfig desk_config() {
  arch::NetworkConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 8;
  cfg.num_classes = 4;
  return cfg;
}

void BM_ForwardInfer(benchmark::State& state) {
  const auto net = arch::BaNet<float>::build(desk_config(), 0);
  auto x = random_input(Shape{1, 1, 32, 32, 32}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward_infer(x).data());
}
BENCHMARK(BM_ForwardInfer)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const int batch = state.range(0);
  auto cfg = desk_config();
  auto net = arch::BaNet<float>::build(cfg, 0);
  std::vector<io::LabelVolume> labels;
  for (int b = 0; b < batch; ++b) {
    phantom::PhantomConfig pc;
    pc.seed = b;
    labels.push_back(phantom::generate_phantom(pc).labels);
  }
  const auto targets = sup::make_targets<float>(labels, cfg.num_classes, cfg.supervised_scales());
  auto x = random_input(Shape{batch, 1, 32, 32, 32}, 5);
  train::SgdOptimizer<float> opt(net.parameters(), 0.99, true);
  for (auto _ : state) {
    Tape<float> tape;
    Tensor<float> loss;
    {
      auto rec = tape.record();
      const auto out = net.forward_train(x);
      loss = sup::total_loss<float>(out.seg_probs, out.boundary_probs, targets);
    }
    tape.backward(loss);
    opt.step(1e-3);
    opt.zero_grad();
  }
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
