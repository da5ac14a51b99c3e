#include "lev/objective.hpp"

#include <cmath>

#include "lev/errors.hpp"

namespace lev {

namespace {

void require_enumerable(const Backend& backend) {
    if (!backend.descriptor().supports_exact_enumeration) {
        throw CapacityError("backend does not support exact enumeration");
    }
}

}  // namespace

ExactObjective enumerate_expectation(const Backend& backend, const QueryContext& ctx, const LatentSequence& z,
                                     const Scorer& scorer) {
    require_enumerable(backend);
    const auto outputs = backend.enumerate_outputs(ctx, z);
    ExactObjective result{0.0, Matrix(z.rows(), z.cols())};
    for (const auto& y : outputs) {
        const double q = scorer.quality(ctx, y);
        if (q == 0.0) {
            continue;
        }
        const double p = std::exp(y.log_prob);
        result.value += p * q;
        result.gradient.add_scaled(backend.grad_log_prob(ctx, z, y), q * p);
    }
    return result;
}

double exact_objective(const Backend& backend, const QueryContext& ctx, const LatentSequence& z, const Scorer& scorer) {
    require_enumerable(backend);
    double value = 0.0;
    for (const auto& y : backend.enumerate_outputs(ctx, z)) {
        value += std::exp(y.log_prob) * scorer.quality(ctx, y);
    }
    return value;
}

}  // namespace lev
