#include "lev/backend.hpp"

#include "lev/errors.hpp"

namespace lev {

QueryContext::QueryContext(std::string t, std::string id, std::optional<std::string> target,
                           std::optional<std::string> grammar)
    : text(std::move(t)), task_id(std::move(id)), rule_target(std::move(target)), format_grammar(std::move(grammar)) {}

std::vector<OutputSequence> Backend::enumerate_outputs(const QueryContext&, const LatentSequence&) const {
    throw CapacityError("backend does not support exact enumeration");
}

std::string Backend::judge_text(const std::string&) const {
    throw DomainError("backend does not support text judging");
}

}  // namespace lev
