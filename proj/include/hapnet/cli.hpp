#pragma once

// Command-line entry points. Each command maps library errors to exit codes:
// 0 success, 2 configuration error, 3 data error, 4 numeric failure.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "hapnet/model.hpp"
#include "hapnet/train.hpp"

namespace hapnet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string scene;  // scene bundle directory
  std::string out = "out";
  std::uint64_t seed = 1;  // model initialization
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Rejects unknown keys at every level.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

/// args excludes the program name, e.g. {"flops", "--config", "run.json"}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hapnet
