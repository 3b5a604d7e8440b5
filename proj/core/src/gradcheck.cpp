#include "banet/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>

#include "banet/network.hpp"
#include "banet/nn.hpp"
#include "banet/supervision.hpp"

namespace banet::gradcheck {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

// Which side of every non-differentiable point each recorded input lies on.
std::vector<std::uint8_t> regimes(const Tape<double>& tape) {
  std::vector<std::uint8_t> out;
  for (const auto& node : tape.nodes()) {
    if (node.op == "leaky_relu") {
      for (double v : node.inputs[0]->values) out.push_back(v >= 0.0);
    } else if (node.op == "dice_ce_loss") {
      for (double v : node.inputs[0]->values)
        out.push_back(static_cast<std::uint8_t>((v < sup::kProbClamp) + 2 * (v > 1.0 - sup::kProbClamp)));
    }
  }
  return out;
}

double evaluate(const std::function<Tensor<double>()>& loss, std::vector<std::uint8_t>& regime) {
  Tape<double> tape;
  double value;
  {
    auto rec = tape.record();
    value = loss().item();
  }
  regime = regimes(tape);
  return value;
}

}  // namespace

Result check(const std::string& name, const std::function<Tensor<double>()>& loss,
             std::vector<Tensor<double>> inputs, std::mt19937_64& rng, const Options& opts) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> l;
    {
      auto rec = tape.record();
      l = loss();
    }
    tape.backward(l);
  }

  Result r;
  r.name = name;
  for (auto& t : inputs) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> probe(t.numel());
    std::iota(probe.begin(), probe.end(), 0);
    std::size_t wanted = probe.size();
    if (opts.samples_per_input > 0 && probe.size() > opts.samples_per_input) {
      std::shuffle(probe.begin(), probe.end(), rng);
      wanted = opts.samples_per_input;
    }
    auto values = t.values();
    std::array<std::vector<std::uint8_t>, 4> regime;
    std::size_t done = 0;
    for (std::size_t j = 0; j < probe.size() && done < wanted; ++j) {
      const std::size_t i = probe[j];
      const double saved = values[i];
      std::optional<double> numeric;
      // Shrink the step when the stencil straddles a kink.
      for (double h = opts.step; h >= opts.step * 1e-2 && !numeric; h *= 0.1) {
        std::array<double, 4> f{};
        constexpr std::array<double, 4> offsets{-2.0, -1.0, 1.0, 2.0};
        for (int k = 0; k < 4; ++k) {
          values[i] = saved + offsets[k] * h;
          f[k] = evaluate(loss, regime[k]);
        }
        if (regime[0] == regime[1] && regime[1] == regime[2] && regime[2] == regime[3])
          numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h);
      }
      values[i] = saved;
      if (!numeric) {
        ++r.skipped;
        continue;
      }
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], *numeric));
      ++r.checked;
      ++done;
    }
  }
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error <= opts.tolerance;
  return r;
}

namespace {

Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Reduces a tensor output to a scalar with fixed random weights so every
// output entry contributes a distinct gradient.
Tensor<double> project(const Tensor<double>& out, const Tensor<double>& weights) {
  return sum(mul(out, weights));
}

nn::ConvParams<double> random_conv(int c_out, int c_in, Int3 k, Int3 s, Int3 p,
                                   std::mt19937_64& rng) {
  auto conv = nn::init_conv<double>(c_out, c_in, k, s, p, rng());
  for (auto& v : conv.bias.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  return conv;
}

}  // namespace

std::vector<Result> run_suite(std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(seed);
  Options all;
  all.tolerance = tolerance;
  std::vector<Result> results;

  {
    auto x = random_tensor(Shape{2, 2, 5, 4, 6}, rng);
    auto conv = random_conv(3, 2, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    Shape os{2, 3, 5, 4, 6};
    auto w = random_tensor(os, rng);
    results.push_back(check(
        "conv3d", [&] { return project(nn::conv3d(x, conv), w); },
        {x, conv.weight, conv.bias}, rng, all));
  }
  {
    auto x = random_tensor(Shape{1, 2, 6, 4, 8}, rng);
    auto conv = random_conv(3, 2, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, rng);
    auto w = random_tensor(Shape{1, 3, 3, 2, 4}, rng);
    results.push_back(check(
        "conv3d_strided", [&] { return project(nn::conv3d(x, conv), w); },
        {x, conv.weight, conv.bias}, rng, all));
  }
  {
    auto x = random_tensor(Shape{2, 3, 3, 2, 4}, rng);
    auto up = nn::init_transposed_conv<double>(3, 2, {2, 2, 2}, {2, 2, 2}, rng());
    for (auto& v : up.bias.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    auto w = random_tensor(Shape{2, 2, 6, 4, 8}, rng);
    results.push_back(check(
        "transposed_conv3d", [&] { return project(nn::transposed_conv3d(x, up), w); },
        {x, up.weight, up.bias}, rng, all));
  }
  {
    auto x = random_tensor(Shape{2, 3, 4, 3, 5}, rng, -2.0, 3.0);
    auto norm = nn::init_instance_norm<double>(3);
    for (auto& v : norm.gamma.values()) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
    for (auto& v : norm.beta.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    auto w = random_tensor(x.shape(), rng);
    results.push_back(check(
        "instance_norm", [&] { return project(nn::instance_norm(x, norm), w); },
        {x, norm.gamma, norm.beta}, rng, all));
  }
  {
    // Keep entries away from the kink at zero.
    auto x = random_tensor(Shape{2, 3, 4, 4, 4}, rng);
    for (auto& v : x.values())
      if (std::abs(v) < 1e-3) v = v < 0 ? -0.5 : 0.5;
    auto w = random_tensor(x.shape(), rng);
    results.push_back(check(
        "leaky_relu", [&] { return project(nn::leaky_relu(x), w); }, {x}, rng, all));
  }
  {
    auto x = random_tensor(Shape{2, 4, 3, 3, 3}, rng, -3.0, 3.0);
    auto w = random_tensor(x.shape(), rng);
    results.push_back(check(
        "softmax_channels", [&] { return project(nn::softmax_channels(x), w); }, {x}, rng, all));
  }
  {
    const Shape s{2, 4, 4, 4, 4};
    auto probs = random_tensor(s, rng, 0.05, 0.95);
    Tensor<double> target(s);
    std::uniform_int_distribution<int> cls(0, s.c - 1);
    for (int n = 0; n < s.n; ++n)
      for (std::size_t v = 0; v < s.spatial(); ++v)
        target.data()[(static_cast<std::size_t>(n) * s.c + cls(rng)) * s.spatial() + v] = 1.0;
    results.push_back(check(
        "dice_ce_loss", [&] { return sup::dice_ce_loss(probs, target); }, {probs}, rng, all));
  }
  {
    auto u = random_tensor(Shape{2, 3, 4, 4, 4}, rng);
    auto p = random_tensor(Shape{2, 1, 4, 4, 4}, rng, 0.0, 1.0);
    auto w = random_tensor(u.shape(), rng);
    results.push_back(check(
        "enhance", [&] { return project(arch::enhance(u, p), w); }, {u, p}, rng, all));
  }
  {
    const int K = 3;
    const int scales = 2;
    std::vector<io::LabelVolume> labels;
    std::uniform_int_distribution<int> cls(0, K - 1);
    for (int b = 0; b < 2; ++b) {
      io::LabelVolume y(Int3{4, 4, 4}, Real3{1, 1, 1}, K);
      for (auto& v : y.labels) v = static_cast<std::uint8_t>(cls(rng));
      labels.push_back(std::move(y));
    }
    const auto targets = sup::make_targets<double>(labels, K, scales);
    std::vector<Tensor<double>> seg_logits, bnd_logits;
    for (int s = 0; s < scales; ++s) {
      const int d = 4 >> s;
      seg_logits.push_back(random_tensor(Shape{2, K, d, d, d}, rng, -2.0, 2.0));
      bnd_logits.push_back(random_tensor(Shape{2, 2, d, d, d}, rng, -2.0, 2.0));
    }
    std::vector<Tensor<double>> inputs = seg_logits;
    inputs.insert(inputs.end(), bnd_logits.begin(), bnd_logits.end());
    results.push_back(check(
        "total_loss",
        [&] {
          std::vector<Tensor<double>> seg, bnd;
          for (const auto& t : seg_logits) seg.push_back(nn::softmax_channels(t));
          for (const auto& t : bnd_logits) bnd.push_back(nn::softmax_channels(t));
          return sup::total_loss<double>(seg, bnd, targets, 1.0);
        },
        inputs, rng, all));
  }
  {
    arch::NetworkConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 4;
    cfg.num_classes = 3;
    cfg.patch_dims = {8, 8, 8};
    auto net = arch::BaNet<double>::build(cfg, rng());
    std::vector<Tensor<double>> params;
    for (auto& p : net.parameters()) {
      // Break the symmetry of the default gamma = 1, beta = 0, bias = 0.
      if (p.name.ends_with("bias") || p.name.ends_with("beta"))
        for (auto& v : p.tensor.values()) v = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
      if (p.name.ends_with("gamma"))
        for (auto& v : p.tensor.values()) v = std::uniform_real_distribution<double>(0.8, 1.2)(rng);
      params.push_back(p.tensor);
    }
    auto x = random_tensor(Shape{1, 1, 8, 8, 8}, rng, -2.0, 2.0);
    std::vector<io::LabelVolume> labels;
    io::LabelVolume y(Int3{8, 8, 8}, Real3{1, 1, 1}, cfg.num_classes);
    for (int z = 0; z < 8; ++z)
      for (int yy = 0; yy < 8; ++yy)
        for (int xx = 0; xx < 8; ++xx)
          y.at(z, yy, xx) = (z >= 2 && z < 7 && yy >= 1 && yy < 6) ? (xx < 4 ? 1 : 2) : 0;
    labels.push_back(y);
    const auto targets = sup::make_targets<double>(labels, cfg.num_classes, cfg.supervised_scales());
    Options sampled = all;
    sampled.samples_per_input = 3;
    results.push_back(check(
        "network",
        [&] {
          const auto out = net.forward_train(x);
          return sup::total_loss<double>(out.seg_probs, out.boundary_probs, targets, 1.0);
        },
        params, rng, sampled));
  }
  return results;
}

}  // namespace banet::gradcheck
