#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "banet/config_json.hpp"
#include "banet/training.hpp"
#include "json.hpp"

namespace banet::train {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order and assume little-endian");

Checkpoint make_checkpoint(const arch::BaNet<float>& net, const SgdOptimizer<float>* optimizer,
                           int epoch, const TrainConfig& train_cfg, const std::string& rng_state) {
  Checkpoint ckpt;
  ckpt.network = net.config();
  ckpt.train = train_cfg;
  ckpt.epoch = epoch;
  ckpt.rng_state = rng_state;
  const auto params = net.parameters();
  std::size_t offset = 0;
  for (const auto& p : params) {
    ckpt.manifest.push_back({p.name, p.tensor.shape(), offset, p.tensor.numel()});
    ckpt.payload.insert(ckpt.payload.end(), p.tensor.values().begin(), p.tensor.values().end());
    offset += p.tensor.numel();
  }
  if (optimizer) {
    for (const auto& v : optimizer->momentum_buffers())
      ckpt.momentum.insert(ckpt.momentum.end(), v.begin(), v.end());
  }
  return ckpt;
}

void load_parameters(arch::BaNet<float>& net, const Checkpoint& ckpt) {
  auto params = net.parameters();
  if (params.size() != ckpt.manifest.size())
    throw DataError("checkpoint holds " + std::to_string(ckpt.manifest.size()) +
                    " tensors, network has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = ckpt.manifest[i];
    auto& p = params[i];
    if (entry.name != p.name || !(entry.shape == p.tensor.shape()))
      throw DataError("checkpoint entry " + entry.name + " " + entry.shape.str() +
                      " does not match network tensor " + p.name + " " + p.tensor.shape().str());
    if (entry.offset + entry.count > ckpt.payload.size())
      throw DataError("checkpoint entry " + entry.name + " exceeds payload");
    std::copy_n(ckpt.payload.begin() + static_cast<std::ptrdiff_t>(entry.offset), entry.count,
                p.tensor.values().begin());
  }
}

arch::BaNet<float> network_from_checkpoint(const Checkpoint& ckpt) {
  auto net = arch::BaNet<float>::build(ckpt.network, 0);
  load_parameters(net, ckpt);
  return net;
}

fs::path checkpoint_stem(const fs::path& path) {
  std::string s = path.string();
  for (const char* suffix : {".ckpt.json", ".ckpt.raw"})
    if (s.ends_with(suffix)) return s.substr(0, s.size() - std::strlen(suffix));
  return path;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const std::string stem = checkpoint_stem(path).string();
  json manifest = json::array();
  for (const auto& e : ckpt.manifest)
    manifest.push_back({{"name", e.name},
                        {"shape", {e.shape.n, e.shape.c, e.shape.d, e.shape.h, e.shape.w}},
                        {"offset", e.offset},
                        {"count", e.count}});
  json header{{"format", "banet-checkpoint-1"},
              {"epoch", ckpt.epoch},
              {"network", json::parse(config::to_json(ckpt.network))},
              {"train", json::parse(config::to_json(ckpt.train))},
              {"rng_state", ckpt.rng_state},
              {"parameter_count", ckpt.payload.size()},
              {"momentum_count", ckpt.momentum.size()},
              {"manifest", manifest}};
  {
    std::ofstream out(stem + ".ckpt.json", std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint header " + stem + ".ckpt.json");
    out << header.dump(2) << "\n";
  }
  std::ofstream raw(stem + ".ckpt.raw", std::ios::binary | std::ios::trunc);
  if (!raw) throw DataError("cannot write checkpoint payload " + stem + ".ckpt.raw");
  raw.write(reinterpret_cast<const char*>(ckpt.payload.data()),
            static_cast<std::streamsize>(ckpt.payload.size() * sizeof(float)));
  raw.write(reinterpret_cast<const char*>(ckpt.momentum.data()),
            static_cast<std::streamsize>(ckpt.momentum.size() * sizeof(float)));
  if (!raw) throw DataError("failed writing checkpoint payload " + stem + ".ckpt.raw");
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string stem = checkpoint_stem(path).string();
  std::ifstream in(stem + ".ckpt.json");
  if (!in) throw DataError("missing checkpoint header " + stem + ".ckpt.json");
  Checkpoint ckpt;
  std::size_t params = 0;
  std::size_t momentum = 0;
  try {
    const json h = json::parse(in);
    ckpt.epoch = h.at("epoch").get<int>();
    ckpt.network = config::network_config_from_json(h.at("network").dump());
    ckpt.train = config::train_config_from_json(h.at("train").dump());
    ckpt.rng_state = h.value("rng_state", std::string());
    params = h.at("parameter_count").get<std::size_t>();
    momentum = h.value("momentum_count", std::size_t{0});
    std::size_t expected_offset = 0;
    for (const auto& e : h.at("manifest")) {
      ParameterEntry entry;
      entry.name = e.at("name").get<std::string>();
      const auto& s = e.at("shape");
      entry.shape = Shape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>(),
                          s.at(3).get<int>(), s.at(4).get<int>()};
      entry.offset = e.at("offset").get<std::size_t>();
      entry.count = e.at("count").get<std::size_t>();
      if (entry.offset != expected_offset || entry.count != entry.shape.numel())
        throw DataError("checkpoint manifest does not tile the payload at " + entry.name);
      expected_offset += entry.count;
      ckpt.manifest.push_back(std::move(entry));
    }
    if (expected_offset != params) throw DataError("checkpoint manifest does not cover the payload");
  } catch (const json::exception& e) {
    throw DataError("invalid checkpoint header " + stem + ".ckpt.json: " + e.what());
  }

  std::ifstream raw(stem + ".ckpt.raw", std::ios::binary);
  if (!raw) throw DataError("missing checkpoint payload " + stem + ".ckpt.raw");
  std::vector<char> bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  if (bytes.size() != (params + momentum) * sizeof(float))
    throw DataError("checkpoint payload size mismatch in " + stem + ".ckpt.raw");
  ckpt.payload.resize(params);
  ckpt.momentum.resize(momentum);
  std::memcpy(ckpt.payload.data(), bytes.data(), params * sizeof(float));
  std::memcpy(ckpt.momentum.data(), bytes.data() + params * sizeof(float), momentum * sizeof(float));
  return ckpt;
}

}  // namespace banet::train
