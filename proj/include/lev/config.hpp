#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "lev/toy_backend.hpp"

namespace lev {

struct WeaverTrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    /// Stop once the epoch loss improves by less than this for `patience` epochs in a row.
    double min_delta = 1e-6;
    std::size_t patience = 5;
};

/// Every tunable of a run. The first seven fields hold the reference
/// hyperparameters; k_retrieval and everything below it are engine choices.
struct EvolveConfig {
    std::size_t l_prime = 15;
    double tau = 0.5;
    std::size_t period_T = 200;
    double eta = 0.3;
    std::size_t K = 10;
    std::size_t M_samples = 8;
    std::size_t k_retrieval = 4;

    std::optional<std::size_t> buffer_capacity;
    std::size_t weaver_hidden = 64;
    WeaverTrainConfig weaver_train;
    /// Nighttime steps are deferred until the buffer holds at least this many triplets.
    std::size_t min_consolidation_triplets = 8;
    /// Train only on triplets admitted during the cycle that just ended.
    bool consolidate_newest_cycle_only = false;

    std::uint64_t run_seed = 0;
    /// "toy" or "bridge:ADDR" where ADDR is HOST:PORT or exec:COMMAND.
    std::string backend = "toy";
    /// "rule" or "judge".
    std::string scorer = "rule";

    double rollout_temperature = 1.0;
    /// Subtract the batch mean reward inside the policy-gradient estimator.
    bool reward_baseline = false;
    /// Record exact J for z_base, z'_base, z_0 and z* (enumerable backends only).
    bool track_exact_objective = false;
    bool record_wall_clock = false;

    ToyConfig toy;

    std::uint64_t bridge_timeout_ms = 30000;
    /// "decimal" or "base64".
    std::string tensor_encoding = "decimal";

    /// Throws ConfigError naming the first offending field.
    void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys, duplicate
/// keys and malformed values are ConfigErrors carrying the line number.
EvolveConfig parse_config(std::string_view text);
EvolveConfig load_config(const std::filesystem::path& path);

/// Canonical text form; parse_config(format_config(c)) reproduces c.
std::string format_config(const EvolveConfig& cfg);

}  // namespace lev
