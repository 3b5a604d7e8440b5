#include "banet/config_json.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace banet::config {

using nlohmann::json;

namespace {

json int3(const Int3& v) { return json::array({v[0], v[1], v[2]}); }

Int3 get_int3(const json& j, const char* key, const Int3& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw DataError(std::string(key) + " must have 3 entries");
  return {a[0].get<int>(), a[1].get<int>(), a[2].get<int>()};
}

json parse(const std::string& text, const char* what) {
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw DataError(std::string(what) + " must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid ") + what + ": " + e.what());
  }
}

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid ") + what + ": " + e.what());
  }
}

}  // namespace

std::string to_json(const arch::NetworkConfig& c) {
  json j{{"levels", c.levels},
         {"base_channels", c.base_channels},
         {"channel_cap", c.channel_cap},
         {"num_classes", c.num_classes},
         {"boundary_channels", c.boundary_channels},
         {"patch_dims", int3(c.patch_dims)},
         {"in_channels", c.in_channels},
         {"boundary_branch", c.boundary_branch}};
  return j.dump(2);
}

std::string to_json(const train::TrainConfig& c) {
  json j{{"lr0", c.lr0},
         {"max_epochs", c.max_epochs},
         {"steps_per_epoch", c.steps_per_epoch},
         {"batch_size", c.batch_size},
         {"momentum", c.momentum},
         {"nesterov", c.nesterov},
         {"seed", c.seed},
         {"patch_dims", int3(c.patch_dims)},
         {"fg_oversample_prob", c.fg_oversample_prob}};
  return j.dump(2);
}

std::string to_json(const phantom::PhantomConfig& c) {
  json ranges = json::array();
  for (const auto& [lo, hi] : c.radius_ranges) ranges.push_back({lo, hi});
  json j{{"dims", int3(c.dims)},
         {"num_organs", c.num_organs},
         {"radius_ranges", ranges},
         {"contrast_gap", c.contrast_gap},
         {"noise_sigma", c.noise_sigma},
         {"background_mean", c.background_mean},
         {"seed", c.seed},
         {"max_retries", c.max_retries}};
  return j.dump(2);
}

arch::NetworkConfig network_config_from_json(const std::string& text) {
  const json j = parse(text, "network config");
  return guarded("network config", [&] {
    arch::NetworkConfig c;
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.channel_cap = j.value("channel_cap", c.channel_cap);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.boundary_channels = j.value("boundary_channels", c.boundary_channels);
    c.patch_dims = get_int3(j, "patch_dims", c.patch_dims);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.boundary_branch = j.value("boundary_branch", c.boundary_branch);
    c.validate();
    return c;
  });
}

train::TrainConfig train_config_from_json(const std::string& text) {
  const json j = parse(text, "train config");
  return guarded("train config", [&] {
    train::TrainConfig c;
    c.lr0 = j.value("lr0", c.lr0);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.momentum = j.value("momentum", c.momentum);
    c.nesterov = j.value("nesterov", c.nesterov);
    c.seed = j.value("seed", c.seed);
    c.patch_dims = get_int3(j, "patch_dims", c.patch_dims);
    c.fg_oversample_prob = j.value("fg_oversample_prob", c.fg_oversample_prob);
    c.validate();
    return c;
  });
}

phantom::PhantomConfig phantom_config_from_json(const std::string& text) {
  const json j = parse(text, "phantom config");
  return guarded("phantom config", [&] {
    phantom::PhantomConfig c;
    c.dims = get_int3(j, "dims", c.dims);
    c.num_organs = j.value("num_organs", c.num_organs);
    if (j.contains("radius_ranges")) {
      c.radius_ranges.clear();
      for (const auto& r : j.at("radius_ranges")) {
        if (!r.is_array() || r.size() != 2) throw DataError("radius_ranges entries are [lo, hi]");
        c.radius_ranges.emplace_back(r[0].get<double>(), r[1].get<double>());
      }
    }
    c.contrast_gap = j.value("contrast_gap", c.contrast_gap);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.background_mean = j.value("background_mean", c.background_mean);
    c.seed = j.value("seed", c.seed);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.validate();
    return c;
  });
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace banet::config
