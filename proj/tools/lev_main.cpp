// lev: command-line front end for the engine.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "acceptance.hpp"
#include "lev/bridge.hpp"
#include "lev/config.hpp"
#include "lev/episodic_buffer.hpp"
#include "lev/errors.hpp"
#include "lev/orchestrator.hpp"
#include "lev/report.hpp"
#include "lev/reward.hpp"
#include "lev/toy_backend.hpp"

namespace fs = std::filesystem;

namespace {

using namespace lev;

// Exit codes: 0 ok, 1 runtime failure, 2 bad input (config, files, flags).
constexpr int kRuntimeFailure = 1;
constexpr int kBadInput = 2;

struct Engine {
    std::unique_ptr<Backend> backend;
    std::unique_ptr<Scorer> scorer;
};

std::unique_ptr<Backend> make_backend(const EvolveConfig& cfg) {
    if (cfg.backend == "toy") {
        return std::make_unique<ToyBackend>(cfg.toy);
    }
    return bridge::BridgeBackend::open(cfg.backend.substr(std::string_view("bridge:").size()),
                                       std::chrono::milliseconds(cfg.bridge_timeout_ms),
                                       bridge::parse_encoding(cfg.tensor_encoding));
}

Engine make_engine(const EvolveConfig& cfg) {
    Engine e;
    e.backend = make_backend(cfg);
    if (cfg.scorer == "judge") {
        e.scorer = std::make_unique<JudgeScorer>(*e.backend);
    } else {
        e.scorer = std::make_unique<RuleScorer>();
    }
    return e;
}

EvolveConfig config_or_default(const std::string& path) { return path.empty() ? EvolveConfig{} : load_config(path); }

void print_totals(const RunState& s) {
    const auto& t = s.totals;
    fmt::print("queries {} (errors {}), archived {}, buffer {}, consolidations {} (failed {}, deferred {}), "
               "weaver v{}, mean confidence {:.4f}\n",
               s.queries_processed, t.query_errors, t.archived, s.buffer.size(), t.consolidations,
               t.consolidation_failures, t.deferred_consolidations, s.weaver->version(),
               t.queries_ok ? t.confidence_sum / static_cast<double>(t.queries_ok) : 0.0);
}

struct RunArgs {
    std::string config, queries, out, backend, resume;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> limit;
};

int cmd_run(const RunArgs& a) {
    EvolveConfig cfg;
    std::optional<RunState> state;
    if (!a.resume.empty()) {
        if (!a.config.empty() || a.seed) {
            throw ConfigError("--resume takes the config and seed from the checkpoint; drop --config/--seed");
        }
        auto r = resume(a.resume);
        cfg = std::move(r.config);
        state = std::move(r.state);
    } else {
        cfg = config_or_default(a.config);
        if (a.seed) {
            cfg.run_seed = *a.seed;
        }
    }
    if (!a.backend.empty()) {
        cfg.backend = a.backend;
        cfg.validate();
    }

    auto queries = load_queries(a.queries);
    const std::size_t skip = state ? state->queries_processed : 0;
    if (skip > queries.size()) {
        throw ConfigError(fmt::format("checkpoint is at query {} but {} holds only {} records", skip, a.queries,
                                      queries.size()));
    }
    queries.erase(queries.begin(), queries.begin() + static_cast<std::ptrdiff_t>(skip));
    if (a.limit && *a.limit < queries.size()) {
        queries.resize(*a.limit);
    }
    if (queries.empty()) {
        throw ConfigError("no queries left to process");
    }

    fs::create_directories(a.out);
    std::ofstream metrics(fs::path(a.out) / "metrics.jsonl", state ? std::ios::app : std::ios::trunc);
    if (!metrics) {
        throw Error("cannot open " + (fs::path(a.out) / "metrics.jsonl").string());
    }
    auto engine = make_engine(cfg);
    const auto result = run_stream(cfg, *engine.backend, *engine.scorer, queries, &metrics, std::move(state));
    checkpoint(result.state, cfg, fs::path(a.out) / "checkpoint");
    print_totals(result.state);
    return 0;
}

int cmd_consolidate(const std::string& dir, const std::string& out, const std::string& log, const std::string& backend) {
    auto r = resume(dir);
    if (!backend.empty()) {
        r.config.backend = backend;
    }
    auto engine = make_engine(r.config);
    std::ofstream metrics;
    if (!log.empty()) {
        metrics.open(log, std::ios::app);
    }
    Orchestrator orch(r.config, *engine.backend, *engine.scorer, std::move(r.state), log.empty() ? nullptr : &metrics);
    const auto c = orch.consolidate_now();
    fmt::print("consolidation on {} triplets: loss {:.6g} -> {:.6g} after {} epochs, {}\n", c.report.triplets_used,
               c.report.initial_loss, c.report.final_loss, c.report.epochs_run,
               c.report.succeeded ? "published" : "failed: " + c.report.message);
    checkpoint(orch.state(), r.config, out.empty() ? dir : out);
    return c.report.succeeded ? 0 : kRuntimeFailure;
}

int cmd_inspect(const std::string& checkpoint_dir, const std::string& buffer_file, const std::string& config_path,
                const std::string& probe, std::size_t k, std::size_t limit) {
    std::optional<EvolveConfig> cfg;
    std::optional<EpisodicBuffer> buffer;
    if (!checkpoint_dir.empty()) {
        auto r = resume(checkpoint_dir);
        cfg = std::move(r.config);
        buffer.emplace(std::move(r.state.buffer));
    } else {
        buffer.emplace(EpisodicBuffer::load(buffer_file));
        if (!config_path.empty()) {
            cfg = load_config(config_path);
        }
    }
    const auto& b = *buffer;
    const auto& dm = b.dims();
    fmt::print("dims d_e={} L'={} d={}  entries {}  admitted {}  rejected {}  next_seq {}  capacity {}\n",
               dm.embedding_width, dm.latent_rows, dm.latent_cols, b.size(), b.admitted_count(), b.rejected_count(),
               b.next_sequence(), b.capacity() ? std::to_string(*b.capacity()) : std::string("unbounded"));
    const auto entries = b.snapshot();
    fmt::print("{:>8} {:>10} {:>12} {:>12}\n", "seq", "confidence", "|e|", "|z*-z_base|");
    for (std::size_t i = 0; i < entries.size() && i < limit; ++i) {
        const auto& t = *entries[i];
        const auto delta = momentum_delta(t);
        double sq = 0.0;
        for (float v : delta.values()) {
            sq += static_cast<double>(v) * v;
        }
        fmt::print("{:>8} {:>10.4f} {:>12.4f} {:>12.4f}\n", t.created_at, t.confidence, t.embedding.norm(),
                   std::sqrt(sq));
    }
    if (entries.size() > limit) {
        fmt::print("... {} more\n", entries.size() - limit);
    }
    if (!probe.empty()) {
        if (!cfg) {
            throw ConfigError("--probe needs a backend: pass --checkpoint or --config");
        }
        const auto backend = make_backend(*cfg);
        const auto hood = b.retrieve_topk(backend->embed_context(QueryContext(probe, "probe")), k);
        const auto alpha = momentum_weights(hood.similarities());
        fmt::print("top-{} for probe '{}':\n{:>8} {:>12} {:>10}\n", k, probe, "seq", "similarity", "weight");
        for (std::size_t i = 0; i < hood.size(); ++i) {
            fmt::print("{:>8} {:>12.6f} {:>10.6f}\n", hood.entries()[i].triplet->created_at,
                       hood.entries()[i].similarity, alpha[i]);
        }
    }
    return 0;
}

int cmd_report(const std::string& log, const std::string& out) {
    const auto summary = summarize_metrics_file(log);
    std::cout << format_report_table(summary);
    if (!out.empty()) {
        write_report_files(summary, out);
        fmt::print("wrote {}/cycles.csv and {}/trajectory.csv\n", out, out);
    }
    return 0;
}

int cmd_selfcheck(const std::vector<std::string>& only) {
    const auto results = acceptance::run_all(std::cout, only);
    std::size_t failed = 0;
    for (const auto& r : results) {
        failed += r.passed ? 0 : 1;
    }
    fmt::print("{}/{} criteria passed\n", results.size() - failed, results.size());
    return failed == 0 ? 0 : kRuntimeFailure;
}

int cmd_serve(const std::string& config_path) {
    const auto cfg = config_or_default(config_path);
    const ToyBackend backend(cfg.toy);
    bridge::FdConnection stdio(0, 1, false);
    bridge::serve(backend, stdio);
    return 0;
}

int cmd_conformance(std::string address, std::uint64_t timeout_ms) {
    if (address.starts_with("bridge:")) {
        address = address.substr(7);
    }
    const auto checks = bridge::run_conformance(bridge::open_connection(address), std::chrono::milliseconds(timeout_ms));
    std::size_t failed = 0;
    for (const auto& c : checks) {
        fmt::print("{} {}: {}\n", c.passed ? "PASS" : "FAIL", c.name, c.detail);
        failed += c.passed ? 0 : 1;
    }
    return failed == 0 ? 0 : kRuntimeFailure;
}

int cmd_tasks(std::size_t count, std::uint64_t seed, const std::string& out) {
    std::ofstream file;
    std::ostream* sink = &std::cout;
    if (!out.empty()) {
        file.open(out);
        if (!file) {
            throw Error("cannot write " + out);
        }
        sink = &file;
    }
    for (const auto& q : synthetic_modular_tasks(count, seed)) {
        *sink << format_query_record(q) << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lev: latent test-time refinement with episodic memory and periodic consolidation"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "process a query stream");
    run->add_option("--config", run_args.config, "key = value config file (defaults when omitted)");
    run->add_option("--queries", run_args.queries, "query stream, one JSON record per line")->required();
    run->add_option("--out", run_args.out, "output directory for metrics.jsonl and checkpoint/")->required();
    run->add_option("--seed", run_args.seed, "run seed (overrides run_seed)");
    run->add_option("--backend", run_args.backend, "toy or bridge:ADDR (ADDR is HOST:PORT or exec:COMMAND)");
    run->add_option("--resume", run_args.resume, "continue from a checkpoint directory; already processed records "
                                                 "of --queries are skipped");
    run->add_option("--limit", run_args.limit, "process at most N queries");

    std::string cons_dir, cons_out, cons_log, cons_backend;
    auto* cons = app.add_subcommand("consolidate", "force a nighttime step on a checkpoint");
    cons->add_option("--checkpoint", cons_dir, "checkpoint directory")->required();
    cons->add_option("--out", cons_out, "write the updated checkpoint here (default: in place)");
    cons->add_option("--log", cons_log, "append the consolidation record to this metrics log");
    cons->add_option("--backend", cons_backend, "override the checkpoint's backend address");

    std::string ins_ckpt, ins_buffer, ins_config, ins_probe;
    std::size_t ins_k = 4, ins_limit = 20;
    auto* ins = app.add_subcommand("inspect-buffer", "print buffer entries and similarities to a probe");
    auto* ins_src = ins->add_option("--checkpoint", ins_ckpt, "checkpoint directory");
    ins->add_option("--buffer", ins_buffer, "buffer.bin file")->excludes(ins_src);
    ins->add_option("--config", ins_config, "config naming the backend (with --buffer)");
    ins->add_option("--probe", ins_probe, "prompt text to retrieve neighbours for");
    ins->add_option("--k", ins_k, "neighbours to show")->check(CLI::PositiveNumber);
    ins->add_option("--limit", ins_limit, "entries to list");

    std::string rep_log, rep_out;
    auto* rep = app.add_subcommand("report", "summarise a metrics log per cycle");
    rep->add_option("--log", rep_log, "metrics.jsonl")->required();
    rep->add_option("--out", rep_out, "directory for cycles.csv and trajectory.csv");

    std::vector<std::string> self_only;
    auto* self = app.add_subcommand("selfcheck", "run the acceptance oracle suites (A1-A11)");
    self->add_option("criteria", self_only, "subset to run, e.g. A1 A4");

    std::string serve_config;
    auto* srv = app.add_subcommand("serve", "answer LEV/1 requests on stdin/stdout with the toy backend");
    srv->add_option("--config", serve_config, "config whose toy_* keys define the model");

    std::string conf_addr;
    std::uint64_t conf_timeout = 30000;
    auto* conf = app.add_subcommand("conformance", "run the LEV/1 conformance checks against a server");
    conf->add_option("--backend", conf_addr, "HOST:PORT or exec:COMMAND")->required();
    conf->add_option("--timeout-ms", conf_timeout, "per-request timeout");

    std::size_t task_count = 100;
    std::uint64_t task_seed = 0;
    std::string task_out;
    auto* tasks = app.add_subcommand("tasks", "write a synthetic modular-arithmetic query stream");
    tasks->add_option("--count", task_count, "number of records");
    tasks->add_option("--seed", task_seed, "generator seed");
    tasks->add_option("--out", task_out, "output file (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);
    if (ins->parsed() && ins_ckpt.empty() && ins_buffer.empty()) {
        std::cerr << "inspect-buffer: pass --checkpoint or --buffer\n";
        return kBadInput;
    }

    try {
        if (run->parsed()) {
            return cmd_run(run_args);
        }
        if (cons->parsed()) {
            return cmd_consolidate(cons_dir, cons_out, cons_log, cons_backend);
        }
        if (ins->parsed()) {
            return cmd_inspect(ins_ckpt, ins_buffer, ins_config, ins_probe, ins_k, ins_limit);
        }
        if (rep->parsed()) {
            return cmd_report(rep_log, rep_out);
        }
        if (self->parsed()) {
            return cmd_selfcheck(self_only);
        }
        if (srv->parsed()) {
            return cmd_serve(serve_config);
        }
        if (conf->parsed()) {
            return cmd_conformance(conf_addr, conf_timeout);
        }
        if (tasks->parsed()) {
            return cmd_tasks(task_count, task_seed, task_out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadInput;
    } catch (const LoadError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeFailure;
    }
    return kBadInput;
}
