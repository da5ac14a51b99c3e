#include "lev/orchestrator.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "lev/binary_io.hpp"
#include "lev/errors.hpp"
#include "lev/objective.hpp"
#include "lev/rng.hpp"

namespace lev {

namespace {

constexpr std::uint64_t kWeaverInitStream = 0x5745'4156'4552ULL;
constexpr std::uint64_t kNightStream = 0x4E49'4748'5400ULL;
constexpr std::uint64_t kQueryStream = 0x5155'4552'5900ULL;
constexpr int kStateFormat = 1;

using Json = nlohmann::json;

std::string format_real(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    const std::string text(bytes.begin(), bytes.end());
    std::map<std::string, std::string> out;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) {
            throw LoadError(LoadError::Kind::Malformed, path.string() + ": malformed line '" + line + "'");
        }
        out[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

template <typename T>
T state_field(const std::map<std::string, std::string>& kv, const std::string& key, const std::filesystem::path& path) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
        throw LoadError(LoadError::Kind::Malformed, path.string() + ": missing field '" + key + "'");
    }
    T value{};
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw LoadError(LoadError::Kind::Malformed, path.string() + ": bad value for '" + key + "'");
    }
    return value;
}

}  // namespace

std::uint64_t query_seed(std::uint64_t run_seed, std::uint64_t query_index) {
    return derive_seed(derive_seed(run_seed, kQueryStream), query_index);
}

RunState RunState::fresh(const EvolveConfig& cfg, const BackendDescriptor& backend) {
    cfg.validate();
    const BufferDims bdims{backend.d_e, static_cast<std::uint32_t>(cfg.l_prime), backend.d};
    const WeaverDims wdims{backend.d_e, backend.d, static_cast<std::uint32_t>(cfg.l_prime),
                           static_cast<std::uint32_t>(cfg.weaver_hidden)};
    return RunState{EpisodicBuffer(bdims, cfg.buffer_capacity),
                    std::make_shared<const WeaverModel>(wdims, derive_seed(cfg.run_seed, kWeaverInitStream)),
                    0,
                    0,
                    0,
                    {}};
}

Orchestrator::Orchestrator(EvolveConfig cfg, const Backend& backend, const Scorer& scorer, RunState state,
                           std::ostream* metrics)
    : cfg_(std::move(cfg)), backend_(backend), scorer_(scorer), state_(std::move(state)), metrics_(metrics) {
    cfg_.validate();
    const auto& desc = backend_.descriptor();
    const auto& dims = state_.buffer.dims();
    if (dims.embedding_width != desc.d_e || dims.latent_cols != desc.d || dims.latent_rows != cfg_.l_prime) {
        throw ConfigError("run state dimensions do not match the backend and l_prime");
    }
    if (!state_.weaver || state_.weaver->dims() != WeaverDims{desc.d_e, desc.d, static_cast<std::uint32_t>(cfg_.l_prime),
                                                              static_cast<std::uint32_t>(cfg_.weaver_hidden)}) {
        throw ConfigError("weaver dimensions do not match the backend and config");
    }
    if (cfg_.track_exact_objective && !desc.supports_exact_enumeration) {
        throw ConfigError("track_exact_objective needs a backend with exact enumeration");
    }
}

void Orchestrator::emit(const std::string& line) {
    if (metrics_ != nullptr) {
        *metrics_ << line << '\n';
        metrics_->flush();
    }
}

QueryOutcome Orchestrator::step(const QueryContext& ctx) {
    last_consolidation_.reset();
    QueryOutcome outcome;
    outcome.query_index = state_.queries_processed;
    outcome.cycle = state_.queries_processed / cfg_.period_T;
    const auto started = std::chrono::steady_clock::now();

    std::shared_ptr<const WeaverModel> weaver = state_.weaver;
    try {
        DaytimeResult r = process_query(backend_, weaver.get(), state_.buffer, ctx, cfg_, scorer_,
                                        query_seed(cfg_.run_seed, outcome.query_index));
        if (cfg_.track_exact_objective) {
            ExactTrack t;
            t.base = exact_objective(backend_, ctx, r.z_base, scorer_);
            t.weaved = r.z_weaved == r.z_base ? t.base : exact_objective(backend_, ctx, r.z_weaved, scorer_);
            t.init = r.z_init == r.z_weaved ? t.weaved : exact_objective(backend_, ctx, r.z_init, scorer_);
            t.star = r.z_star == r.z_init ? t.init : exact_objective(backend_, ctx, r.z_star, scorer_);
            outcome.exact = t;
        }
        outcome.result = std::move(r);
    } catch (const std::exception& e) {
        outcome.error = e.what();
    }
    const auto elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

    Json rec;
    rec["query_index"] = outcome.query_index;
    rec["task_id"] = ctx.task_id;
    rec["cycle"] = outcome.cycle;
    if (outcome.result) {
        const auto& r = *outcome.result;
        ++state_.totals.queries_ok;
        state_.totals.confidence_sum += r.confidence;
        if (r.archived) {
            ++state_.totals.archived;
        }
        rec["event"] = "query";
        Json rewards = Json::array();
        for (const auto& it : r.trace.iterations) {
            rewards.push_back(it.mean_reward);
        }
        rec["iteration_rewards"] = rewards;
        rec["stop_reason"] = std::string(stop_reason_name(r.trace.stop_reason));
        rec["confidence"] = r.confidence;
        rec["archived"] = r.archived;
        rec["short_decode"] = r.short_decode;
        rec["neighbors"] = r.neighbors;
        rec["weaver_version"] = r.weaver_version;
        rec["final_text"] = r.final_output.text;
        rec["buffer_size"] = state_.buffer.size();
        if (outcome.exact) {
            rec["exact_j"] = {{"base", outcome.exact->base},
                              {"weaved", outcome.exact->weaved},
                              {"init", outcome.exact->init},
                              {"star", outcome.exact->star}};
        }
    } else {
        ++state_.totals.query_errors;
        rec["event"] = "query_error";
        rec["error"] = outcome.error;
    }
    if (cfg_.record_wall_clock) {
        rec["wall_ms"] = elapsed;
    }
    emit(rec.dump());

    ++state_.queries_processed;
    state_.cycles_completed = state_.queries_processed / cfg_.period_T;
    if (state_.queries_processed % cfg_.period_T == 0) {
        last_consolidation_ = night(false);
    }
    return outcome;
}

ConsolidationOutcome Orchestrator::consolidate_now() { return night(true); }

ConsolidationOutcome Orchestrator::night(bool forced) {
    ConsolidationOutcome out;
    out.query_index = state_.queries_processed;
    out.cycle = state_.queries_processed == 0 ? 0 : (state_.queries_processed - 1) / cfg_.period_T;

    auto triplets = state_.buffer.snapshot();
    if (cfg_.consolidate_newest_cycle_only) {
        std::erase_if(triplets, [&](const TripletRef& t) { return t->created_at < state_.cycle_start_sequence; });
    }
    const std::size_t needed = forced ? 1 : cfg_.min_consolidation_triplets;
    if (triplets.size() < needed) {
        if (forced) {
            throw PreconditionError("consolidation needs at least one triplet; the buffer has none eligible");
        }
        ++state_.totals.deferred_consolidations;
        return out;
    }

    const auto started = std::chrono::steady_clock::now();
    auto candidate = std::make_shared<WeaverModel>(*state_.weaver);
    out.report = consolidate(*candidate, triplets, cfg_.weaver_train,
                             derive_seed(derive_seed(cfg_.run_seed, kNightStream), state_.queries_processed));
    out.performed = true;
    const auto elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

    ++state_.totals.consolidations;
    if (out.report.succeeded) {
        state_.weaver = std::move(candidate);
        state_.cycle_start_sequence = state_.buffer.next_sequence();
    } else {
        ++state_.totals.consolidation_failures;
    }

    Json rec;
    rec["event"] = "consolidation";
    rec["query_index"] = out.query_index;
    rec["cycle"] = out.cycle;
    rec["initial_loss"] = out.report.initial_loss;
    rec["final_loss"] = out.report.final_loss;
    rec["epochs"] = out.report.epochs_run;
    rec["triplets"] = out.report.triplets_used;
    rec["status"] = out.report.succeeded ? "ok" : "failed";
    rec["weaver_version"] = state_.weaver->version();
    if (!out.report.message.empty()) {
        rec["message"] = out.report.message;
    }
    if (forced) {
        rec["forced"] = true;
    }
    if (cfg_.record_wall_clock) {
        rec["wall_ms"] = elapsed;
    }
    emit(rec.dump());
    return out;
}

StreamResult run_stream(const EvolveConfig& cfg, const Backend& backend, const Scorer& scorer,
                        std::span<const QueryContext> queries, std::ostream* metrics, std::optional<RunState> state) {
    if (queries.empty()) {
        throw PreconditionError("run_stream needs a non-empty query stream");
    }
    Orchestrator orch(cfg, backend, scorer, state ? std::move(*state) : RunState::fresh(cfg, backend.descriptor()),
                      metrics);
    StreamResult result{RunState::fresh(cfg, backend.descriptor()), {}, {}};
    result.queries.reserve(queries.size());
    for (const auto& q : queries) {
        result.queries.push_back(orch.step(q));
        if (const auto& c = orch.last_consolidation(); c && c->performed) {
            result.consolidations.push_back(*c);
        }
    }
    result.state = orch.state();
    return result;
}

void checkpoint(const RunState& state, const EvolveConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string text;
    auto put = [&text](const std::string& key, const std::string& value) { text += key + " = " + value + "\n"; };
    put("format", std::to_string(kStateFormat));
    put("queries_processed", std::to_string(state.queries_processed));
    put("cycles_completed", std::to_string(state.cycles_completed));
    put("cycle_start_sequence", std::to_string(state.cycle_start_sequence));
    put("queries_ok", std::to_string(state.totals.queries_ok));
    put("query_errors", std::to_string(state.totals.query_errors));
    put("archived", std::to_string(state.totals.archived));
    put("consolidations", std::to_string(state.totals.consolidations));
    put("consolidation_failures", std::to_string(state.totals.consolidation_failures));
    put("deferred_consolidations", std::to_string(state.totals.deferred_consolidations));
    put("confidence_sum", format_real(state.totals.confidence_sum));

    const std::string config_text = format_config(cfg);
    io::write_file_atomic(dir / "config.txt",
                          std::span(reinterpret_cast<const std::uint8_t*>(config_text.data()), config_text.size()));
    state.buffer.save(dir / "buffer.bin");
    state.weaver->save(dir / "weaver.bin");
    // state.txt last: its presence marks a complete checkpoint.
    io::write_file_atomic(dir / "state.txt",
                          std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ResumedRun resume(const std::filesystem::path& dir) {
    const auto state_path = dir / "state.txt";
    const auto config_path = dir / "config.txt";
    const auto kv = read_key_values(state_path);
    if (state_field<int>(kv, "format", state_path) != kStateFormat) {
        throw LoadError(LoadError::Kind::VersionMismatch, state_path.string() + ": unsupported state format");
    }

    EvolveConfig cfg;
    {
        const auto bytes = io::read_file(config_path);
        try {
            cfg = parse_config(std::string(bytes.begin(), bytes.end()));
        } catch (const ConfigError& e) {
            throw LoadError(LoadError::Kind::Malformed, config_path.string() + ": " + e.what());
        }
    }

    EpisodicBuffer buffer = EpisodicBuffer::load(dir / "buffer.bin");
    auto weaver = std::make_shared<const WeaverModel>(WeaverModel::load(dir / "weaver.bin"));
    if (buffer.dims().latent_rows != cfg.l_prime) {
        throw LoadError(LoadError::Kind::DimensionMismatch,
                        (dir / "buffer.bin").string() + ": latent length does not match l_prime in config.txt");
    }
    const WeaverDims expected{buffer.dims().embedding_width, buffer.dims().latent_cols, buffer.dims().latent_rows,
                              static_cast<std::uint32_t>(cfg.weaver_hidden)};
    if (weaver->dims() != expected) {
        throw LoadError(LoadError::Kind::DimensionMismatch,
                        (dir / "weaver.bin").string() + ": dimensions do not match the buffer and config");
    }

    RunState state{std::move(buffer), std::move(weaver), 0, 0, 0, {}};
    state.queries_processed = state_field<std::uint64_t>(kv, "queries_processed", state_path);
    state.cycles_completed = state_field<std::uint64_t>(kv, "cycles_completed", state_path);
    state.cycle_start_sequence = state_field<std::uint64_t>(kv, "cycle_start_sequence", state_path);
    state.totals.queries_ok = state_field<std::uint64_t>(kv, "queries_ok", state_path);
    state.totals.query_errors = state_field<std::uint64_t>(kv, "query_errors", state_path);
    state.totals.archived = state_field<std::uint64_t>(kv, "archived", state_path);
    state.totals.consolidations = state_field<std::uint64_t>(kv, "consolidations", state_path);
    state.totals.consolidation_failures = state_field<std::uint64_t>(kv, "consolidation_failures", state_path);
    state.totals.deferred_consolidations = state_field<std::uint64_t>(kv, "deferred_consolidations", state_path);
    state.totals.confidence_sum = state_field<double>(kv, "confidence_sum", state_path);
    if (state.cycles_completed != state.queries_processed / cfg.period_T) {
        throw LoadError(LoadError::Kind::Malformed, state_path.string() + ": cycle count inconsistent with period_T");
    }
    return {std::move(state), std::move(cfg)};
}

QueryContext parse_query_record(const std::string& line) {
    Json j;
    try {
        j = Json::parse(line);
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("query record is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("task_id") || !j.contains("text") || !j["task_id"].is_string() ||
        !j["text"].is_string()) {
        throw ConfigError("query record needs string fields task_id and text");
    }
    QueryContext q(j["text"].get<std::string>(), j["task_id"].get<std::string>());
    if (q.text.empty()) {
        throw ConfigError("query '" + q.task_id + "' has empty text");
    }
    for (const char* key : {"rule_target", "format_grammar"}) {
        if (j.contains(key)) {
            if (!j[key].is_string()) {
                throw ConfigError(std::string("query field ") + key + " must be a string");
            }
            (std::string_view(key) == "rule_target" ? q.rule_target : q.format_grammar) = j[key].get<std::string>();
        }
    }
    return q;
}

std::string format_query_record(const QueryContext& q) {
    Json j;
    j["task_id"] = q.task_id;
    j["text"] = q.text;
    if (q.rule_target) {
        j["rule_target"] = *q.rule_target;
    }
    if (q.format_grammar) {
        j["format_grammar"] = *q.format_grammar;
    }
    return j.dump();
}

std::vector<QueryContext> load_queries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError(LoadError::Kind::NotFound, path.string() + ": cannot open query stream");
    }
    std::vector<QueryContext> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(parse_query_record(line));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace lev
