#include "lev/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "lev/errors.hpp"

namespace lev {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

template <typename T>
T parse_number(std::string_view v, std::string_view key) {
    T out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(v) + "'");
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(out)) {
            throw ConfigError("config key '" + std::string(key) + "': value must be finite");
        }
    }
    return out;
}

bool parse_bool(std::string_view v, std::string_view key) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

using Setter = std::function<void(EvolveConfig&, std::string_view value, std::string_view key)>;
using Getter = std::function<std::string(const EvolveConfig&)>;

struct Field {
    Setter set;
    Getter get;
};

template <typename T>
Field count_field(T EvolveConfig::*member) {
    return {[member](EvolveConfig& c, std::string_view v, std::string_view k) { c.*member = parse_number<T>(v, k); },
            [member](const EvolveConfig& c) { return std::to_string(c.*member); }};
}

Field real_field(double EvolveConfig::*member) {
    return {[member](EvolveConfig& c, std::string_view v, std::string_view k) { c.*member = parse_number<double>(v, k); },
            [member](const EvolveConfig& c) { return format_double(c.*member); }};
}

Field bool_field(bool EvolveConfig::*member) {
    return {[member](EvolveConfig& c, std::string_view v, std::string_view k) { c.*member = parse_bool(v, k); },
            [member](const EvolveConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string EvolveConfig::*member) {
    return {[member](EvolveConfig& c, std::string_view v, std::string_view) { c.*member = std::string(v); },
            [member](const EvolveConfig& c) { return c.*member; }};
}

template <typename Sub, typename T>
Field nested_count(Sub EvolveConfig::*outer, T Sub::*inner) {
    return {[=](EvolveConfig& c, std::string_view v, std::string_view k) { (c.*outer).*inner = parse_number<T>(v, k); },
            [=](const EvolveConfig& c) { return std::to_string((c.*outer).*inner); }};
}

template <typename Sub>
Field nested_real(Sub EvolveConfig::*outer, double Sub::*inner) {
    return {[=](EvolveConfig& c, std::string_view v, std::string_view k) {
                (c.*outer).*inner = parse_number<double>(v, k);
            },
            [=](const EvolveConfig& c) { return format_double((c.*outer).*inner); }};
}

const std::map<std::string, Field, std::less<>>& fields() {
    static const std::map<std::string, Field, std::less<>> table = {
        {"l_prime", count_field(&EvolveConfig::l_prime)},
        {"tau", real_field(&EvolveConfig::tau)},
        {"period_T", count_field(&EvolveConfig::period_T)},
        {"eta", real_field(&EvolveConfig::eta)},
        {"K", count_field(&EvolveConfig::K)},
        {"M_samples", count_field(&EvolveConfig::M_samples)},
        {"k_retrieval", count_field(&EvolveConfig::k_retrieval)},
        {"buffer_capacity",
         {[](EvolveConfig& c, std::string_view v, std::string_view k) {
              if (v == "none" || v == "unbounded") {
                  c.buffer_capacity.reset();
              } else {
                  c.buffer_capacity = parse_number<std::size_t>(v, k);
              }
          },
          [](const EvolveConfig& c) {
              return c.buffer_capacity ? std::to_string(*c.buffer_capacity) : std::string("none");
          }}},
        {"weaver_hidden", count_field(&EvolveConfig::weaver_hidden)},
        {"weaver_epochs", nested_count(&EvolveConfig::weaver_train, &WeaverTrainConfig::epochs)},
        {"weaver_batch_size", nested_count(&EvolveConfig::weaver_train, &WeaverTrainConfig::batch_size)},
        {"weaver_learning_rate", nested_real(&EvolveConfig::weaver_train, &WeaverTrainConfig::learning_rate)},
        {"weaver_min_delta", nested_real(&EvolveConfig::weaver_train, &WeaverTrainConfig::min_delta)},
        {"weaver_patience", nested_count(&EvolveConfig::weaver_train, &WeaverTrainConfig::patience)},
        {"min_consolidation_triplets", count_field(&EvolveConfig::min_consolidation_triplets)},
        {"consolidate_newest_cycle_only", bool_field(&EvolveConfig::consolidate_newest_cycle_only)},
        {"run_seed", count_field(&EvolveConfig::run_seed)},
        {"backend", string_field(&EvolveConfig::backend)},
        {"scorer", string_field(&EvolveConfig::scorer)},
        {"rollout_temperature", real_field(&EvolveConfig::rollout_temperature)},
        {"reward_baseline", bool_field(&EvolveConfig::reward_baseline)},
        {"track_exact_objective", bool_field(&EvolveConfig::track_exact_objective)},
        {"record_wall_clock", bool_field(&EvolveConfig::record_wall_clock)},
        {"toy_vocab", nested_count(&EvolveConfig::toy, &ToyConfig::vocab_size)},
        {"toy_d", nested_count(&EvolveConfig::toy, &ToyConfig::d)},
        {"toy_layers", nested_count(&EvolveConfig::toy, &ToyConfig::layers)},
        {"toy_heads", nested_count(&EvolveConfig::toy, &ToyConfig::heads)},
        {"toy_ffn", nested_count(&EvolveConfig::toy, &ToyConfig::ffn)},
        {"toy_max_len", nested_count(&EvolveConfig::toy, &ToyConfig::max_output_length)},
        {"toy_seed", nested_count(&EvolveConfig::toy, &ToyConfig::seed)},
        {"toy_logit_scale", nested_real(&EvolveConfig::toy, &ToyConfig::logit_scale)},
        {"enumeration_bound", nested_count(&EvolveConfig::toy, &ToyConfig::enumeration_bound)},
        {"bridge_timeout_ms", count_field(&EvolveConfig::bridge_timeout_ms)},
        {"tensor_encoding", string_field(&EvolveConfig::tensor_encoding)},
    };
    return table;
}

}  // namespace

void EvolveConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v < 1) {
            throw ConfigError(std::string(name) + " must be at least 1");
        }
    };
    positive(l_prime, "l_prime");
    positive(period_T, "period_T");
    positive(K, "K");
    positive(M_samples, "M_samples");
    positive(k_retrieval, "k_retrieval");
    positive(weaver_hidden, "weaver_hidden");
    positive(weaver_train.epochs, "weaver_epochs");
    positive(weaver_train.batch_size, "weaver_batch_size");
    positive(weaver_train.patience, "weaver_patience");
    positive(min_consolidation_triplets, "min_consolidation_triplets");
    if (buffer_capacity) {
        positive(*buffer_capacity, "buffer_capacity");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ConfigError("tau must lie in [0, 1]");
    }
    if (!(eta > 0.0)) {
        throw ConfigError("eta must be positive");
    }
    if (!(rollout_temperature > 0.0)) {
        throw ConfigError("rollout_temperature must be positive");
    }
    if (!(weaver_train.learning_rate > 0.0) || !(weaver_train.min_delta >= 0.0)) {
        throw ConfigError("weaver learning rate must be positive and min_delta non-negative");
    }
    if (backend != "toy" && !backend.starts_with("bridge:")) {
        throw ConfigError("backend must be 'toy' or 'bridge:ADDR', got '" + backend + "'");
    }
    if (scorer != "rule" && scorer != "judge") {
        throw ConfigError("scorer must be 'rule' or 'judge', got '" + scorer + "'");
    }
    if (tensor_encoding != "decimal" && tensor_encoding != "base64") {
        throw ConfigError("tensor_encoding must be 'decimal' or 'base64'");
    }
}

EvolveConfig parse_config(std::string_view text) {
    EvolveConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        ++line_no;
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        if (auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const auto it = fields().find(key);
        if (it == fields().end()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
        }
        if (!seen.emplace(key).second) {
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
        }
        try {
            it->second.set(cfg, value, key);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

EvolveConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(path.string() + ": cannot open config file");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string format_config(const EvolveConfig& cfg) {
    std::string out;
    for (const auto& [key, field] : fields()) {
        out += key + " = " + field.get(cfg) + "\n";
    }
    return out;
}

}  // namespace lev
