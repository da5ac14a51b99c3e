#include "lev/reward.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <shared_mutex>

#include "lev/errors.hpp"
#include "lev/rng.hpp"

namespace lev {

// Defined in the generated judge_prompts.cpp.
namespace assets {
extern const std::string_view kJudgePromptAnswer;
extern const std::string_view kJudgePromptComprehension;
extern const std::string_view kJudgePromptCalculation;
extern const std::string_view kJudgePromptFormat;
extern const std::string_view kJudgePromptClarity;
}  // namespace assets

namespace {

void require_unit(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw DomainError(std::string("reward component ") + name + " outside [0, 1]");
    }
}

std::shared_ptr<const std::regex> compiled(const std::string& grammar) {
    static std::shared_mutex mutex;
    static std::unordered_map<std::string, std::shared_ptr<const std::regex>> cache;
    {
        std::shared_lock lock(mutex);
        if (auto it = cache.find(grammar); it != cache.end()) {
            return it->second;
        }
    }
    std::shared_ptr<const std::regex> re;
    try {
        re = std::make_shared<const std::regex>(grammar, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
        throw ConfigError("format grammar '" + grammar + "' does not compile: " + e.what());
    }
    std::unique_lock lock(mutex);
    return cache.emplace(grammar, std::move(re)).first->second;
}

std::vector<std::string> digit_runs(const std::string& text) {
    std::vector<std::string> runs;
    std::string current;
    for (char c : text) {
        if (c >= '0' && c <= '9') {
            current.push_back(c);
        } else if (!current.empty()) {
            runs.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        runs.push_back(std::move(current));
    }
    return runs;
}

std::optional<long long> as_integer(const std::string& s) {
    long long v = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || s.empty()) {
        return std::nullopt;
    }
    return v;
}

}  // namespace

double aggregate(const RewardBreakdown& b) {
    require_unit(b.s_ans, "s_ans");
    require_unit(b.s_comp, "s_comp");
    require_unit(b.s_calc, "s_calc");
    require_unit(b.s_form, "s_form");
    require_unit(b.s_clar, "s_clar");
    return (b.s_ans + b.s_comp + b.s_calc + 2.0 * b.s_form + 2.0 * b.s_clar) / 7.0;
}

TaskSpec TaskSpec::from_context(const QueryContext& ctx) {
    if (!ctx.rule_target || !ctx.format_grammar) {
        throw ConfigError("query '" + ctx.task_id + "' lacks rule_target/format_grammar for the rule scorer");
    }
    TaskSpec spec{*ctx.rule_target, *ctx.format_grammar};
    compiled(spec.format_grammar);
    return spec;
}

RewardBreakdown rule_score(const TaskSpec& task, const OutputSequence& y) {
    if (!(task.calc_scale > 0.0)) {
        throw ConfigError("task calc_scale must be positive");
    }
    const auto re = compiled(task.format_grammar);
    std::smatch m;
    const bool formatted = std::regex_match(y.text, m, *re);
    const auto runs = digit_runs(y.text);

    std::string answer;
    if (formatted && m.size() > 1 && m[1].matched) {
        answer = m[1].str();
    } else if (!runs.empty()) {
        answer = runs.back();
    }

    RewardBreakdown b;
    b.s_ans = (!answer.empty() && answer == task.target) ? 1.0 : 0.0;
    b.s_form = formatted ? 1.0 : 0.0;
    b.s_comp = answer.empty() ? 0.0 : 1.0;
    const auto a = as_integer(answer);
    const auto t = as_integer(task.target);
    if (a && t) {
        const double dist = std::abs(static_cast<double>(*a - *t));
        b.s_calc = std::clamp(1.0 - dist / task.calc_scale, 0.0, 1.0);
    } else {
        b.s_calc = b.s_ans;
    }
    b.s_clar = runs.size() == 1 ? 1.0 : 0.0;
    return b;
}

RewardBreakdown RuleScorer::breakdown(const QueryContext& ctx, const OutputSequence& y) const {
    return rule_score(TaskSpec::from_context(ctx), y);
}

double RuleScorer::quality(const QueryContext& ctx, const OutputSequence& y) const { return aggregate(breakdown(ctx, y)); }

std::string_view criterion_name(Criterion c) {
    switch (c) {
        case Criterion::Answer: return "s_ans";
        case Criterion::Comprehension: return "s_comp";
        case Criterion::Calculation: return "s_calc";
        case Criterion::Format: return "s_form";
        case Criterion::Clarity: return "s_clar";
    }
    return "?";
}

std::string_view judge_prompt_template(Criterion c) {
    switch (c) {
        case Criterion::Answer: return assets::kJudgePromptAnswer;
        case Criterion::Comprehension: return assets::kJudgePromptComprehension;
        case Criterion::Calculation: return assets::kJudgePromptCalculation;
        case Criterion::Format: return assets::kJudgePromptFormat;
        case Criterion::Clarity: return assets::kJudgePromptClarity;
    }
    return {};
}

std::string render_judge_prompt(Criterion c, std::string_view task_description, std::string_view proposed_solution) {
    constexpr std::string_view kTask = "[TASK_DESCRIPTION]";
    constexpr std::string_view kSolution = "[PROPOSED_SOLUTION]";
    const std::string_view tmpl = judge_prompt_template(c);
    std::string out;
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto next = tmpl.find('[', pos);
        if (next == std::string_view::npos) {
            out.append(tmpl.substr(pos));
            break;
        }
        out.append(tmpl.substr(pos, next - pos));
        const auto rest = tmpl.substr(next);
        if (rest.starts_with(kTask)) {
            out.append(task_description);
            pos = next + kTask.size();
        } else if (rest.starts_with(kSolution)) {
            out.append(proposed_solution);
            pos = next + kSolution.size();
        } else {
            out.push_back('[');
            pos = next + 1;
        }
    }
    return out;
}

ParsedScore parse_judge_score(std::string_view reply) {
    constexpr std::string_view kKey = "SCORE:";
    std::size_t line_start = 0;
    while (line_start <= reply.size()) {
        std::size_t line_end = reply.find('\n', line_start);
        if (line_end == std::string_view::npos) {
            line_end = reply.size();
        }
        std::string_view line = reply.substr(line_start, line_end - line_start);
        while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) {
            line.remove_prefix(1);
        }
        if (line.starts_with(kKey)) {
            line.remove_prefix(kKey.size());
            while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) {
                line.remove_prefix(1);
            }
            double value = 0.0;
            auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), value);
            if (ec != std::errc() || ptr == line.data() || !std::isfinite(value)) {
                return {0.0, "unparseable SCORE value"};
            }
            if (value < 0.0 || value > 1.0) {
                return {std::clamp(value, 0.0, 1.0), "SCORE value outside [0, 1] clamped"};
            }
            return {value, {}};
        }
        line_start = line_end + 1;
    }
    return {0.0, "reply has no SCORE line"};
}

JudgeResult judge_score(const Backend& judge, const QueryContext& ctx, const OutputSequence& y) {
    JudgeResult result;
    std::array<double, kCriteria.size()> values{};
    for (std::size_t i = 0; i < kCriteria.size(); ++i) {
        const auto parsed = parse_judge_score(judge.judge_text(render_judge_prompt(kCriteria[i], ctx.text, y.text)));
        values[i] = parsed.value;
        if (!parsed.warning.empty()) {
            result.warnings.push_back(std::string(criterion_name(kCriteria[i])) + ": " + parsed.warning);
        }
    }
    result.breakdown = RewardBreakdown{values[0], values[1], values[2], values[3], values[4]};
    return result;
}

double JudgeScorer::quality(const QueryContext& ctx, const OutputSequence& y) const {
    return aggregate(judge_score(judge_, ctx, y).breakdown);
}

std::vector<QueryContext> synthetic_modular_tasks(std::size_t count, std::uint64_t seed) {
    std::vector<QueryContext> tasks;
    tasks.reserve(count);
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const auto a = static_cast<int>(rng.below(10));
        const auto b = static_cast<int>(rng.below(10));
        const bool multiply = rng.below(2) == 1;
        const int result = (multiply ? a * b : a + b) % 10;
        std::string text = std::to_string(a) + (multiply ? "*" : "+") + std::to_string(b) + "=";
        tasks.emplace_back(std::move(text), "mod-" + std::to_string(i), std::to_string(result),
                           std::string(kModularGrammar));
    }
    return tasks;
}

}  // namespace lev
