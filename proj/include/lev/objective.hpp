#pragma once

#include "lev/backend.hpp"
#include "lev/reward.hpp"

namespace lev {

/// J(z) = sum_y p(y | c, z) Q(y) and its exact gradient
/// sum_y Q(y) p(y | c, z) grad_z ln p(y | c, z), by full enumeration.
struct ExactObjective {
    double value = 0.0;
    Matrix gradient;
};

/// Requires descriptor().supports_exact_enumeration; the backend raises
/// CapacityError when its enumeration bound is exceeded.
ExactObjective enumerate_expectation(const Backend& backend, const QueryContext& ctx, const LatentSequence& z,
                                     const Scorer& scorer);

/// J(z) alone; skips the gradient passes.
double exact_objective(const Backend& backend, const QueryContext& ctx, const LatentSequence& z, const Scorer& scorer);

}  // namespace lev
