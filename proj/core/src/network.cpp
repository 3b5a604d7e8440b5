#include "banet/network.hpp"

#include <algorithm>

namespace banet::arch {

void NetworkConfig::validate() const {
  if (levels < 2) throw DataError("levels must be >= 2");
  if (base_channels < 1 || channel_cap < 1) throw DataError("channel counts must be >= 1");
  if (num_classes < 2) throw DataError("num_classes must be >= 2");
  if (boundary_channels != 2) throw DataError("boundary_channels is fixed at 2");
  if (in_channels < 1) throw DataError("in_channels must be >= 1");
  const int factor = 1 << (levels - 1);
  for (int a = 0; a < 3; ++a)
    if (patch_dims[a] < factor || patch_dims[a] % factor != 0)
      throw DataError("patch_dims " + to_string(patch_dims) + " must be divisible by " +
                      std::to_string(factor));
}

int NetworkConfig::channels_at(int level) const {
  long long c = static_cast<long long>(base_channels) << level;
  return static_cast<int>(std::min<long long>(c, channel_cap));
}

std::vector<int> NetworkConfig::encoder_widths() const {
  std::vector<int> w;
  for (int l = 0; l < levels; ++l) w.push_back(channels_at(l));
  return w;
}

Int3 NetworkConfig::dims_at_scale(int scale) const {
  return {patch_dims[0] >> scale, patch_dims[1] >> scale, patch_dims[2] >> scale};
}

std::uint64_t parameter_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer over the combination
  std::uint64_t z = h ^ (seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> enhance(const Tensor<T>& upsampled, const Tensor<T>& boundary_prob) {
  const Shape& u = upsampled.shape();
  const Shape& p = boundary_prob.shape();
  if (p.c != 1 || p.n != u.n || p.d != u.d || p.h != u.h || p.w != u.w)
    throw ShapeError("enhance: boundary probability " + p.str() +
                     " must be a single channel matching " + u.str());
  return mul(upsampled, scalar_add(boundary_prob, T(1)));
}

namespace {

constexpr Int3 kOnes{1, 1, 1};
constexpr Int3 kTwos{2, 2, 2};
constexpr Int3 kThrees{3, 3, 3};
constexpr Int3 kZeros{0, 0, 0};

template <typename T>
ConvNormAct<T> make_unit(int c_out, int c_in, Int3 stride, std::uint64_t seed,
                         const std::string& name) {
  return {nn::init_conv<T>(c_out, c_in, kThrees, stride, kOnes,
                           parameter_seed(seed, name + ".conv.weight")),
          nn::init_instance_norm<T>(c_out)};
}

template <typename T>
DecoderBlock<T> make_decoder_block(int c_coarse, int c_fine, int head_out, std::uint64_t seed,
                                   const std::string& name) {
  DecoderBlock<T> b;
  b.up = nn::init_transposed_conv<T>(c_coarse, c_fine, kTwos, kTwos,
                                     parameter_seed(seed, name + ".up.weight"));
  b.first = make_unit<T>(c_fine, 2 * c_fine, kOnes, seed, name + ".first");
  b.second = make_unit<T>(c_fine, c_fine, kOnes, seed, name + ".second");
  b.head = nn::init_conv<T>(head_out, c_fine, kOnes, kOnes, kZeros,
                            parameter_seed(seed, name + ".head.weight"));
  return b;
}

template <typename T>
Tensor<T> apply_unit(const ConvNormAct<T>& u, const Tensor<T>& x) {
  return nn::leaky_relu(nn::instance_norm(nn::conv3d(x, u.conv), u.norm), T(nn::kLeakySlope));
}

template <typename T>
void append_unit(std::vector<NamedParameter<T>>& out, const std::string& name,
                 const ConvNormAct<T>& u) {
  out.push_back({name + ".conv.weight", u.conv.weight});
  out.push_back({name + ".conv.bias", u.conv.bias});
  out.push_back({name + ".norm.gamma", u.norm.gamma});
  out.push_back({name + ".norm.beta", u.norm.beta});
}

template <typename T>
void append_decoder(std::vector<NamedParameter<T>>& out, const std::string& name,
                    const DecoderBlock<T>& b) {
  out.push_back({name + ".up.weight", b.up.weight});
  out.push_back({name + ".up.bias", b.up.bias});
  append_unit(out, name + ".first", b.first);
  append_unit(out, name + ".second", b.second);
  out.push_back({name + ".head.weight", b.head.weight});
  out.push_back({name + ".head.bias", b.head.bias});
}

}  // namespace

template <typename T>
BaNet<T> BaNet<T>::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  BaNet net;
  net.config_ = config;
  const auto widths = config.encoder_widths();
  int in = config.in_channels;
  for (int l = 0; l < config.levels; ++l) {
    const std::string name = "encoder." + std::to_string(l);
    EncoderBlock<T> b;
    b.first = make_unit<T>(widths[l], in, l == 0 ? kOnes : kTwos, seed, name + ".first");
    b.second = make_unit<T>(widths[l], widths[l], kOnes, seed, name + ".second");
    net.encoder_.push_back(std::move(b));
    in = widths[l];
  }
  for (int s = 0; s < config.levels - 1; ++s) {
    net.seg_decoder_.push_back(make_decoder_block<T>(
        widths[s + 1], widths[s], config.num_classes, seed, "seg_decoder." + std::to_string(s)));
  }
  if (config.boundary_branch) {
    for (int s = 0; s < config.levels - 1; ++s) {
      net.boundary_decoder_.push_back(
          make_decoder_block<T>(widths[s + 1], widths[s], config.boundary_channels, seed,
                                "boundary_decoder." + std::to_string(s)));
    }
  }
  return net;
}

template <typename T>
std::vector<NamedParameter<T>> BaNet<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const std::string name = "encoder." + std::to_string(l);
    append_unit(out, name + ".first", encoder_[l].first);
    append_unit(out, name + ".second", encoder_[l].second);
  }
  for (std::size_t s = 0; s < seg_decoder_.size(); ++s)
    append_decoder(out, "seg_decoder." + std::to_string(s), seg_decoder_[s]);
  for (std::size_t s = 0; s < boundary_decoder_.size(); ++s)
    append_decoder(out, "boundary_decoder." + std::to_string(s), boundary_decoder_[s]);
  return out;
}

template <typename T>
std::size_t BaNet<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.numel();
  return total;
}

template <typename T>
void BaNet<T>::check_input(const Tensor<T>& x) const {
  const Shape& s = x.shape();
  if (s.c != config_.in_channels)
    throw ShapeError("network input has " + std::to_string(s.c) + " channels, expected " +
                     std::to_string(config_.in_channels));
  const int factor = 1 << (config_.levels - 1);
  if (s.d % factor != 0 || s.h % factor != 0 || s.w % factor != 0)
    throw ShapeError("network input " + s.str() + " spatial dims must be divisible by " +
                     std::to_string(factor));
}

template <typename T>
ForwardOutputs<T> BaNet<T>::run(const Tensor<T>& x, const ForwardOptions& opts,
                                bool all_heads) const {
  check_input(x);
  const int L = config_.levels;
  const int scales = L - 1;

  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (const auto& block : encoder_) {
    h = apply_unit(block.second, apply_unit(block.first, h));
    skips.push_back(h);
  }

  ForwardOutputs<T> out;
  out.seg_probs.resize(all_heads ? scales : 1);
  out.upsampled.resize(scales);
  out.enhanced.resize(scales);

  if (!boundary_decoder_.empty()) {
    out.boundary_probs.resize(scales);
    Tensor<T> prev = skips.back();
    for (int s = scales - 1; s >= 0; --s) {
      const auto& b = boundary_decoder_[s];
      Tensor<T> up = nn::transposed_conv3d(prev, b.up);
      Tensor<T> f = apply_unit(b.second, apply_unit(b.first, concat_channels(up, skips[s])));
      out.boundary_probs[s] = nn::softmax_channels(nn::conv3d(f, b.head));
      prev = f;
    }
  }

  const bool gate = config_.boundary_branch && opts.attention;
  Tensor<T> prev = skips.back();
  for (int s = scales - 1; s >= 0; --s) {
    const auto& b = seg_decoder_[s];
    Tensor<T> up = nn::transposed_conv3d(prev, b.up);
    out.upsampled[s] = up;
    Tensor<T> gated = up;
    if (gate) {
      Tensor<T> p;
      if (opts.injected_boundary_prob) {
        Shape ps = up.shape();
        ps.c = 1;
        p = Tensor<T>(ps, static_cast<T>(*opts.injected_boundary_prob));
      } else {
        p = slice_channels(out.boundary_probs[s], 1, 1);
      }
      gated = enhance(up, p);
    }
    out.enhanced[s] = gated;
    Tensor<T> f = apply_unit(b.second, apply_unit(b.first, concat_channels(gated, skips[s])));
    if (all_heads || s == 0)
      out.seg_probs[all_heads ? s : 0] = nn::softmax_channels(nn::conv3d(f, b.head));
    prev = f;
  }
  return out;
}

template <typename T>
ForwardOutputs<T> BaNet<T>::forward_train(const Tensor<T>& x, const ForwardOptions& opts) const {
  return run(x, opts, true);
}

template <typename T>
Tensor<T> BaNet<T>::forward_infer(const Tensor<T>& x, const ForwardOptions& opts) const {
  return run(x, opts, false).seg_probs.front();
}

template class BaNet<float>;
template class BaNet<double>;
template Tensor<float> enhance(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> enhance(const Tensor<double>&, const Tensor<double>&);

}  // namespace banet::arch
