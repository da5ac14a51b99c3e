#include "lev/report.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "lev/errors.hpp"

namespace lev {

namespace {

using Json = nlohmann::json;

struct Accumulator {
    CycleSummary row;
    double confidence_sum = 0.0;
    double iteration_sum = 0.0;
    std::size_t exact_count = 0;
    double exact_sums[4] = {0, 0, 0, 0};
    std::vector<double> traj_sum;
    std::vector<std::size_t> traj_count;
};

bool is_uint(const Json& j, const char* key) { return j.contains(key) && j[key].is_number_unsigned(); }
bool is_num(const Json& j, const char* key) { return j.contains(key) && j[key].is_number(); }

// Returns false when the record does not have the shape of a metrics line.
bool absorb(const Json& j, std::map<std::uint64_t, Accumulator>& cycles) {
    if (!j.is_object() || !j.contains("event") || !j["event"].is_string() || !is_uint(j, "cycle")) {
        return false;
    }
    const std::string event = j["event"];
    const auto cycle = j["cycle"].get<std::uint64_t>();
    if (event == "query") {
        if (!is_num(j, "confidence") || !j.contains("archived") || !j["archived"].is_boolean() ||
            !j.contains("iteration_rewards") || !j["iteration_rewards"].is_array()) {
            return false;
        }
        for (const auto& r : j["iteration_rewards"]) {
            if (!r.is_number()) {
                return false;
            }
        }
        const char* keys[4] = {"base", "weaved", "init", "star"};
        const bool has_exact = j.contains("exact_j");
        if (has_exact) {
            for (const char* k : keys) {
                if (!j["exact_j"].is_object() || !is_num(j["exact_j"], k)) {
                    return false;
                }
            }
        }
        auto& acc = cycles[cycle];
        ++acc.row.queries;
        acc.confidence_sum += j["confidence"].get<double>();
        if (j["archived"].get<bool>()) {
            ++acc.row.archived;
        }
        const auto& rewards = j["iteration_rewards"];
        acc.iteration_sum += static_cast<double>(rewards.size());
        if (acc.traj_sum.size() < rewards.size()) {
            acc.traj_sum.resize(rewards.size(), 0.0);
            acc.traj_count.resize(rewards.size(), 0);
        }
        for (std::size_t k = 0; k < rewards.size(); ++k) {
            acc.traj_sum[k] += rewards[k].get<double>();
            ++acc.traj_count[k];
        }
        if (has_exact) {
            ++acc.exact_count;
            for (int i = 0; i < 4; ++i) {
                acc.exact_sums[i] += j["exact_j"][keys[i]].get<double>();
            }
        }
        return true;
    }
    if (event == "query_error") {
        ++cycles[cycle].row.errors;
        return true;
    }
    if (event == "consolidation") {
        if (!is_num(j, "initial_loss") || !is_num(j, "final_loss") || !j.contains("status") ||
            !j["status"].is_string()) {
            return false;
        }
        auto& row = cycles[cycle].row;
        row.consolidation_initial_loss = j["initial_loss"].get<double>();
        row.consolidation_final_loss = j["final_loss"].get<double>();
        row.consolidation_status = j["status"].get<std::string>();
        return true;
    }
    return false;
}

std::string opt(const std::optional<double>& v, int precision) {
    return v ? fmt::format("{:.{}f}", *v, precision) : std::string("-");
}

std::string csv_opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

}  // namespace

ReportSummary summarize_metrics(std::istream& log) {
    ReportSummary out;
    std::map<std::uint64_t, Accumulator> cycles;
    std::string line;
    while (std::getline(log, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !absorb(j, cycles)) {
            ++out.malformed_lines;
            continue;
        }
        ++out.records;
    }
    for (auto& [cycle, acc] : cycles) {
        CycleSummary row = acc.row;
        row.cycle = cycle;
        if (row.queries > 0) {
            const auto n = static_cast<double>(row.queries);
            row.mean_confidence = acc.confidence_sum / n;
            row.archive_rate = static_cast<double>(row.archived) / n;
            row.mean_iterations = acc.iteration_sum / n;
            if (acc.exact_count == row.queries) {
                row.mean_exact_base = acc.exact_sums[0] / n;
                row.mean_exact_weaved = acc.exact_sums[1] / n;
                row.mean_exact_init = acc.exact_sums[2] / n;
                row.mean_exact_star = acc.exact_sums[3] / n;
            }
        }
        for (std::size_t k = 0; k < acc.traj_sum.size(); ++k) {
            row.reward_trajectory.push_back(acc.traj_sum[k] / static_cast<double>(acc.traj_count[k]));
        }
        out.cycles.push_back(std::move(row));
    }
    return out;
}

ReportSummary summarize_metrics_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError(LoadError::Kind::NotFound, path.string() + ": cannot open metrics log");
    }
    return summarize_metrics(in);
}

std::string format_report_table(const ReportSummary& s) {
    std::string out = fmt::format("{:>5} {:>7} {:>6} {:>8} {:>9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
                                  "cycle", "queries", "errors", "mean_cf", "archive%", "iters", "J_base", "J_weave",
                                  "J_init", "J_star", "loss_init", "loss_final");
    for (const auto& c : s.cycles) {
        out += fmt::format("{:>5} {:>7} {:>6} {:>8.4f} {:>9.1f} {:>7.2f} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
                           c.cycle, c.queries, c.errors, c.mean_confidence, 100.0 * c.archive_rate, c.mean_iterations,
                           opt(c.mean_exact_base, 4), opt(c.mean_exact_weaved, 4), opt(c.mean_exact_init, 4),
                           opt(c.mean_exact_star, 4), opt(c.consolidation_initial_loss, 5),
                           opt(c.consolidation_final_loss, 5));
    }
    out += fmt::format("records: {}  malformed lines skipped: {}\n", s.records, s.malformed_lines);
    return out;
}

void write_report_files(const ReportSummary& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream cycles(dir / "cycles.csv");
    cycles << "cycle,queries,errors,archived,mean_confidence,archive_rate,mean_iterations,"
              "exact_j_base,exact_j_weaved,exact_j_init,exact_j_star,consolidation_initial_loss,"
              "consolidation_final_loss,consolidation_status\n";
    for (const auto& c : s.cycles) {
        cycles << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", c.cycle, c.queries, c.errors, c.archived,
                              c.mean_confidence, c.archive_rate, c.mean_iterations, csv_opt(c.mean_exact_base),
                              csv_opt(c.mean_exact_weaved), csv_opt(c.mean_exact_init), csv_opt(c.mean_exact_star),
                              csv_opt(c.consolidation_initial_loss), csv_opt(c.consolidation_final_loss),
                              c.consolidation_status);
    }
    std::ofstream traj(dir / "trajectory.csv");
    traj << "cycle,iteration,mean_reward\n";
    for (const auto& c : s.cycles) {
        for (std::size_t k = 0; k < c.reward_trajectory.size(); ++k) {
            traj << fmt::format("{},{},{}\n", c.cycle, k, c.reward_trajectory[k]);
        }
    }
    if (!cycles || !traj) {
        throw Error("failed writing report files under " + dir.string());
    }
}

}  // namespace lev
