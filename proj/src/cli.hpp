#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bem/em.hpp"
#include "bem/init.hpp"
#include "bem/observability.hpp"
#include "bem/sim.hpp"

namespace bem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { ok = 0, validation_failure = 2, numerical_failure = 3 };

struct ObservabilitySettings {
    std::optional<int> k_max;
    std::string z0 = "ones";  // ones | random
    std::optional<VectorXd> z0_values;
    int trials = 10;
    OrcFormulation formulation = OrcFormulation::bilinear;
};

struct RunConfig {
    fs::path path;
    fs::path model_path;
    json model_json;
    StructuralModel model;
    SensorConfig sensors;
    VectorXd theta0;
    Scenario scenario;
    std::uint64_t seed = 42;
    std::optional<fs::path> data;
    DefaultHyperOptions hyper;
    BemOptions em;
    InitializerOptions init;
    ObservabilitySettings obs;
};

/// Command-line values that override the run config.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<double> tol;
    std::optional<int> itrmax;
    bool quiet = false;
};

StructuralModel parse_model(const json& j, const std::string& where);
SensorConfig parse_sensors(const json& j, const std::string& where);
RunConfig load_run_config(const fs::path& path, const Overrides& ov = {});

json read_json(const fs::path& path);
void write_text_atomic(const fs::path& path, const std::string& text);
void write_json_atomic(const fs::path& path, const json& j);

struct Table {
    std::vector<std::string> header;
    MatrixXd values;
};

std::string format_csv(const Table& t);
Table read_csv(const fs::path& path);

/// Measurement matrix in sensor order, and the time step of the record.
MatrixXd select_measurements(const Table& t, const SensorConfig& cfg, double dt, const std::string& where);

std::vector<VirtualChannel> parse_channels(const std::string& spec);
std::string channel_label(const VirtualChannel& ch);

json matrix_to_json(const MatrixXd& m);
json vector_to_json(const VectorXd& v);
MatrixXd matrix_from_json(const json& j, const std::string& where);
VectorXd vector_from_json(const json& j, const std::string& where);

json hyper_to_json(const HyperParams& phi, const SensorConfig& cfg);
HyperParams hyper_from_json(const json& j, const HyperParams& like, const std::string& where);

struct SimulateArgs {
    fs::path out;
};
struct ObservabilityArgs {
    fs::path out;
    std::optional<int> k_max;
    std::optional<std::string> z0;
    std::optional<int> trials;
};
struct InitNoiseArgs {
    fs::path out;
    std::optional<fs::path> data;
};
struct IdentifyArgs {
    fs::path out;
    std::optional<fs::path> data;
    std::optional<fs::path> noise_init;
    std::optional<std::size_t> max_steps;
};
struct VirtualArgs {
    fs::path out;
    std::optional<fs::path> data;
    fs::path posterior;
    std::string channels;
    std::optional<std::size_t> max_steps;
};

int cmd_simulate(const RunConfig& rc, const SimulateArgs& a, const Overrides& ov);
int cmd_observability(const RunConfig& rc, const ObservabilityArgs& a, const Overrides& ov);
int cmd_init_noise(const RunConfig& rc, const InitNoiseArgs& a, const Overrides& ov);
int cmd_identify(const RunConfig& rc, const IdentifyArgs& a, const Overrides& ov);
int cmd_virtual_sense(const RunConfig& rc, const VirtualArgs& a, const Overrides& ov);

/// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace bem::cli
