#pragma once

// JSON encodings of the configuration structs. Field names mirror the C++
// member names; absent fields keep their defaults.

#include <filesystem>
#include <string>

#include "banet/network.hpp"
#include "banet/phantom.hpp"
#include "banet/training.hpp"

namespace banet::config {

std::string to_json(const arch::NetworkConfig& cfg);
std::string to_json(const train::TrainConfig& cfg);
std::string to_json(const phantom::PhantomConfig& cfg);

arch::NetworkConfig network_config_from_json(const std::string& text);
train::TrainConfig train_config_from_json(const std::string& text);
phantom::PhantomConfig phantom_config_from_json(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace banet::config
