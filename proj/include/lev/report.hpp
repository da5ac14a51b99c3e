#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <vector>

namespace lev {

struct CycleSummary {
    std::uint64_t cycle = 0;
    std::size_t queries = 0;  // successful query records
    std::size_t errors = 0;
    std::size_t archived = 0;
    double mean_confidence = 0.0;
    double archive_rate = 0.0;
    double mean_iterations = 0.0;
    /// Present only when every successful query of the cycle carried exact J.
    std::optional<double> mean_exact_base, mean_exact_weaved, mean_exact_init, mean_exact_star;
    /// Mean reward at refinement iteration k over the queries that reached k.
    std::vector<double> reward_trajectory;
    std::optional<double> consolidation_initial_loss, consolidation_final_loss;
    std::string consolidation_status;
};

struct ReportSummary {
    std::vector<CycleSummary> cycles;
    std::size_t records = 0;
    std::size_t malformed_lines = 0;
};

/// Groups metrics records by their cycle field. Lines that are not valid
/// records are counted and skipped.
ReportSummary summarize_metrics(std::istream& log);
ReportSummary summarize_metrics_file(const std::filesystem::path& path);

/// Aligned plain-text table, one row per cycle.
std::string format_report_table(const ReportSummary& summary);

/// Writes cycles.csv (one row per cycle) and trajectory.csv (cycle,
/// iteration, mean reward) into dir.
void write_report_files(const ReportSummary& summary, const std::filesystem::path& dir);

}  // namespace lev
