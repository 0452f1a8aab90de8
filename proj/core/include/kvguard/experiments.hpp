#pragma once

#include "kvguard/fault_lab.hpp"
#include "kvguard/stats.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvguard {

// Invalid experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// A property the experiment itself guarantees failed to hold, e.g. a
// noise-floor divergence (CLI exit code 3).
class AssertionError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string experiment;
    uint64_t seed = 1;
    std::vector<uint64_t> model_seeds{1, 2};  // two seeds stand in for the two models
    ToyModelConfig model;
    int n_blocks = 1024;
    int block_size = 16;
    WorkloadConfig workload;
    std::vector<int> bits;
    std::vector<int> concurrency;
    int group_size = 2;  // per-group batch size in the selective experiment
    int trials = 30;
    int runs = 30;
    int n_requests = 100;
    std::vector<int> checkpoints{25, 50, 75, 100};
    IntegrityConfig integrity;
    int threads = 0;  // 0 = hardware concurrency
    bool plots = false;
    bool sabotage = false;  // noise-floor only: force one real injection (exit-path test hook)
    std::string out_dir = "out";

    KvGeometry geometry() const;
    TrialEnv trial_env(uint64_t model_seed) const;
    void validate() const;  // throws ConfigError
};

// Fills per-experiment defaults, overlays the JSON config (unknown keys are
// rejected), validates. `experiment` must be one of the six commands.
ExperimentConfig make_config(const std::string& experiment, const nlohmann::json& overrides);

// Deterministic per-trial seed, published in summary.json for replication.
uint64_t derive_seed(uint64_t top_seed, uint64_t model_seed, uint64_t condition,
                     uint64_t index);

// Runs tasks on `threads` workers; results land at their task's index, so
// output order is independent of scheduling.
void parallel_run(const std::vector<std::function<void()>>& tasks, int threads);

// Each command writes its CSV/JSON artifacts into cfg.out_dir and returns
// the summary it wrote. Assertion-style guarantees throw AssertionError.
nlohmann::json cmd_scan_bits(const ExperimentConfig& cfg);
nlohmann::json cmd_selective(const ExperimentConfig& cfg);
nlohmann::json cmd_persistence(const ExperimentConfig& cfg);
nlohmann::json cmd_detect(const ExperimentConfig& cfg);
nlohmann::json cmd_overhead(const ExperimentConfig& cfg);
nlohmann::json cmd_noise_floor(const ExperimentConfig& cfg);

// Engine-level descriptor runner: builds one engine, executes the requests
// cycle by cycle, writes JSON-lines outputs (and optional state dumps).
// Descriptor schema is documented in the README.
nlohmann::json run_descriptor(const nlohmann::json& descriptor, const std::string& out_dir,
                              const std::string& dump_kv_dir, const std::string& dump_pool_path);

}  // namespace kvguard
