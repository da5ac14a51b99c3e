#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lev/backend.hpp"
#include "lev/config.hpp"
#include "lev/daytime.hpp"
#include "lev/episodic_buffer.hpp"
#include "lev/reward.hpp"
#include "lev/weaver.hpp"

namespace lev {

struct RunTotals {
    std::uint64_t queries_ok = 0;
    std::uint64_t query_errors = 0;
    std::uint64_t archived = 0;
    std::uint64_t consolidations = 0;
    std::uint64_t consolidation_failures = 0;
    std::uint64_t deferred_consolidations = 0;
    double confidence_sum = 0.0;

    friend bool operator==(const RunTotals&, const RunTotals&) = default;
};

/// Everything carried from one query to the next: the archive, the
/// published weaver and the stream position.
struct RunState {
    EpisodicBuffer buffer;
    std::shared_ptr<const WeaverModel> weaver;
    std::uint64_t queries_processed = 0;
    std::uint64_t cycles_completed = 0;
    /// created_at of the first triplet admitted in the current cycle.
    std::uint64_t cycle_start_sequence = 0;
    RunTotals totals;

    static RunState fresh(const EvolveConfig& cfg, const BackendDescriptor& backend);
};

/// Exact objective values tracked per query on enumerable backends.
struct ExactTrack {
    double base = 0.0;
    double weaved = 0.0;
    double init = 0.0;
    double star = 0.0;
};

struct QueryOutcome {
    std::uint64_t query_index = 0;
    std::uint64_t cycle = 0;
    std::optional<DaytimeResult> result;  // empty when the query failed
    std::optional<ExactTrack> exact;
    std::string error;
};

struct ConsolidationOutcome {
    std::uint64_t query_index = 0;
    std::uint64_t cycle = 0;
    ConsolidationReport report;
    bool performed = false;  // false when deferred
};

/// Runs the alternating day/night loop. Queries are processed strictly in
/// order; after every period_T-th query the weaver is retrained on a copy
/// and the copy is published, unless the buffer holds fewer than
/// min_consolidation_triplets, in which case the night step is deferred to
/// the next boundary.
///
/// Each query and each performed consolidation appends one JSON line to the
/// metrics sink (keys sorted, no wall-clock fields unless record_wall_clock).
class Orchestrator {
public:
    Orchestrator(EvolveConfig cfg, const Backend& backend, const Scorer& scorer, RunState state,
                 std::ostream* metrics = nullptr);

    /// Processes the next query. Backend or scorer failures are recorded and
    /// the query is skipped, but it still counts towards the period.
    QueryOutcome step(const QueryContext& ctx);

    /// Consolidation triggered by the last step(), if any.
    const std::optional<ConsolidationOutcome>& last_consolidation() const noexcept { return last_consolidation_; }

    /// Night step on the current buffer regardless of the period.
    ConsolidationOutcome consolidate_now();

    const RunState& state() const noexcept { return state_; }
    const EvolveConfig& config() const noexcept { return cfg_; }

private:
    ConsolidationOutcome night(bool forced);
    void emit(const std::string& line);

    EvolveConfig cfg_;
    const Backend& backend_;
    const Scorer& scorer_;
    RunState state_;
    std::ostream* metrics_;
    std::optional<ConsolidationOutcome> last_consolidation_;
};

struct StreamResult {
    RunState state;
    std::vector<QueryOutcome> queries;
    std::vector<ConsolidationOutcome> consolidations;
};

/// Processes every query of the stream starting from `state` (a fresh state
/// when absent).
StreamResult run_stream(const EvolveConfig& cfg, const Backend& backend, const Scorer& scorer,
                        std::span<const QueryContext> queries, std::ostream* metrics = nullptr,
                        std::optional<RunState> state = std::nullopt);

/// Seed of query i; independent of every other query.
std::uint64_t query_seed(std::uint64_t run_seed, std::uint64_t query_index);

/// Writes state.txt, buffer.bin, weaver.bin and config.txt into dir. The
/// contents depend only on the state and config, so repeated checkpoints of
/// the same state are byte-identical.
void checkpoint(const RunState& state, const EvolveConfig& cfg, const std::filesystem::path& dir);

struct ResumedRun {
    RunState state;
    EvolveConfig config;
};

/// Reads a checkpoint directory. Missing or damaged files raise LoadError
/// naming the file.
ResumedRun resume(const std::filesystem::path& dir);

/// One query stream record: {"task_id", "text", "rule_target"?, "format_grammar"?}.
QueryContext parse_query_record(const std::string& line);
std::string format_query_record(const QueryContext& q);
std::vector<QueryContext> load_queries(const std::filesystem::path& path);

}  // namespace lev
