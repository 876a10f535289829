#pragma once

// Run configuration as JSON. Every section is optional and missing keys keep
// their defaults; unknown keys are rejected with their full path, e.g.
// "model.grid.cells: unknown key".

#include "egopat/model.hpp"
#include "egopat/registration.hpp"
#include "egopat/simulator.hpp"
#include "egopat/training.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace egopat {

inline constexpr const char* kToolVersion = "0.3.0";

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    /// Global seed. The simulator and the trainer derive their streams from
    /// it; see resolve().
    std::uint64_t seed = 0;
    DatasetConfig simulator;
    ModelConfig model;
    TrainConfig train;
    IcpParams registration;
    double fitness_floor = kDefaultFitnessFloor;

    /// Copies the global seed into the sections and validates everything.
    void resolve();
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

std::string dump_run_config(const RunConfig& config);
/// Reads and resolves a config file. Throws ConfigError naming the file.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from(const nlohmann::json& j, const std::string& path = "model");

}  // namespace egopat
