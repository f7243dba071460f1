#pragma once

#include <cstdint>
#include <string>

#include "brnn/adaptation.hpp"
#include "brnn/data.hpp"
#include "brnn/training.hpp"

namespace brnn {

struct EvalConfig {
    int samples = 100;       // Monte Carlo samples per likelihood estimate
    int histogram_bins = 50;
    int horizon_split = 15;  // first/second segment boundary
};

// One experiment, fully determined by this struct plus the seed: scenario,
// data size, window, training, adaptation and evaluation settings. Loaded
// from JSON; command-line flags override individual fields.
struct ExperimentConfig {
    std::string scenario = "toy";  // "toy" | "car_following" | "csv"
    std::string csv_path;          // input trajectories when scenario=="csv"
    int n_trajectories = 5000;
    ToyParams toy;
    CarScenarioParams car;
    WindowSpec window{0, 15};
    TrainConfig train;
    AdaptConfig adapt;
    EvalConfig eval;
    std::string output_dir = "out";
    std::uint64_t seed = 0;
    int threads = 1;
};

// Scenario-appropriate defaults (window shape, batch/M/α per the reference
// protocols).
ExperimentConfig default_experiment_config(const std::string& scenario);

// Parses the JSON config file; unknown keys are rejected so typos surface as
// errors rather than silently keeping defaults.
ExperimentConfig load_experiment_config(const std::string& path);

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::string& path);

}  // namespace brnn
