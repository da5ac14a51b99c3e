#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lev/backend.hpp"

namespace lev {

/// Five criterion scores in [0, 1]: final-answer correctness, comprehension,
/// calculation validity, format conformity, clarity.
struct RewardBreakdown {
    double s_ans = 0.0;
    double s_comp = 0.0;
    double s_calc = 0.0;
    double s_form = 0.0;
    double s_clar = 0.0;

    friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

/// Q = (s_ans + s_comp + s_calc + 2 s_form + 2 s_clar) / 7.
double aggregate(const RewardBreakdown& b);

/// Deterministic task description for the rule scorer.
///
///  - answer: capture group 1 of format_grammar when the whole output matches
///    it, otherwise the last maximal run of decimal digits (may be empty);
///  - s_ans: answer == target;
///  - s_form: the whole output matches format_grammar;
///  - s_comp: an answer could be extracted at all;
///  - s_calc: 1 - |answer - target| / calc_scale clipped to [0, 1] when both
///    are integers, otherwise equal to s_ans;
///  - s_clar: the output contains exactly one run of digits.
struct TaskSpec {
    std::string target;
    std::string format_grammar;
    double calc_scale = 10.0;

    /// Builds the spec from the query's rule fields. Throws ConfigError when
    /// they are missing or the grammar does not compile.
    static TaskSpec from_context(const QueryContext& ctx);
};

RewardBreakdown rule_score(const TaskSpec& task, const OutputSequence& y);

/// Quality function Q(y) used by the refinement loop.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual double quality(const QueryContext& ctx, const OutputSequence& y) const = 0;
};

/// Rule scorer driven by each query's rule_target/format_grammar.
class RuleScorer final : public Scorer {
public:
    double quality(const QueryContext& ctx, const OutputSequence& y) const override;
    RewardBreakdown breakdown(const QueryContext& ctx, const OutputSequence& y) const;
};

class ConstantScorer final : public Scorer {
public:
    explicit ConstantScorer(double value) : value_(value) {}
    double quality(const QueryContext&, const OutputSequence&) const override { return value_; }

private:
    double value_;
};

class FunctionScorer final : public Scorer {
public:
    using Fn = std::function<double(const QueryContext&, const OutputSequence&)>;
    explicit FunctionScorer(Fn fn) : fn_(std::move(fn)) {}
    double quality(const QueryContext& ctx, const OutputSequence& y) const override { return fn_(ctx, y); }

private:
    Fn fn_;
};

enum class Criterion : std::uint8_t { Answer, Comprehension, Calculation, Format, Clarity };

inline constexpr std::array<Criterion, 5> kCriteria = {Criterion::Answer, Criterion::Comprehension,
                                                       Criterion::Calculation, Criterion::Format, Criterion::Clarity};

std::string_view criterion_name(Criterion c);

/// Judge prompt template for one criterion, with the [TASK_DESCRIPTION] and
/// [PROPOSED_SOLUTION] placeholders.
std::string_view judge_prompt_template(Criterion c);

std::string render_judge_prompt(Criterion c, std::string_view task_description, std::string_view proposed_solution);

struct ParsedScore {
    double value = 0.0;
    /// Empty when the reply held a well-formed in-range score.
    std::string warning;
};

/// Reads the first "SCORE:" line. Missing or unparseable -> 0 with a warning;
/// outside [0, 1] -> clamped with a warning.
ParsedScore parse_judge_score(std::string_view reply);

struct JudgeResult {
    RewardBreakdown breakdown;
    std::vector<std::string> warnings;
};

/// Issues the five criterion prompts as independent judge calls.
JudgeResult judge_score(const Backend& judge, const QueryContext& ctx, const OutputSequence& y);

class JudgeScorer final : public Scorer {
public:
    explicit JudgeScorer(const Backend& judge) : judge_(judge) {}
    double quality(const QueryContext& ctx, const OutputSequence& y) const override;

private:
    const Backend& judge_;
};

/// Modular-arithmetic prompts over the toy vocabulary: "a+b=" or "a*b=",
/// single-digit answer (result mod 10), output grammar "[d]".
std::vector<QueryContext> synthetic_modular_tasks(std::size_t count, std::uint64_t seed);

inline constexpr std::string_view kModularGrammar = R"(^\[(\d)\]$)";

}  // namespace lev
