#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "lev/backend.hpp"
#include "lev/config.hpp"
#include "lev/episodic_buffer.hpp"
#include "lev/reward.hpp"
#include "lev/weaver.hpp"

namespace lev {

enum class StopReason : std::uint8_t { MaxIters, Patience, Degenerate };

std::string_view stop_reason_name(StopReason r);

/// FNV-1a over the f32 bit patterns; identifies an iterate in traces.
std::uint64_t latent_digest(const LatentSequence& z);

struct IterationRecord {
    std::uint64_t z_digest = 0;
    double mean_reward = 0.0;
    std::vector<double> rewards;
    double grad_norm = 0.0;
};

struct RefinementTrace {
    std::vector<IterationRecord> iterations;
    StopReason stop_reason = StopReason::MaxIters;
    /// Mean reward of the last recorded iteration.
    double final_mean_reward = 0.0;
    /// Index into iterations of the returned iterate.
    std::size_t best_iteration = 0;
};

struct GradientEstimate {
    Matrix grad;
    double mean_reward = 0.0;
    std::vector<OutputSequence> samples;
    std::vector<double> rewards;
};

/// Monte-Carlo policy gradient of E[Q] at z:
///   (1/M) sum_m (Q(y_m) - b) grad_z ln p(y_m | c, z),   y_m ~ p(. | c, z)
/// with b = 0, or b = mean reward when `baseline` is set.
GradientEstimate estimate_gradient(const Backend& backend, const QueryContext& ctx, const LatentSequence& z,
                                   std::size_t m_samples, const Scorer& scorer, std::uint64_t seed,
                                   double temperature = 1.0, bool baseline = false);

struct RefineResult {
    LatentSequence z_star;
    RefinementTrace trace;
};

/// Gradient ascent z_{k+1} = z_k + eta * g_k for at most K evaluated
/// iterates. Stops once the mean reward fails to beat the best so far three
/// times in a row, or on a non-finite gradient. Returns the iterate with the
/// highest mean reward.
RefineResult refine(const Backend& backend, const QueryContext& ctx, const LatentSequence& z_0,
                    const EvolveConfig& cfg, const Scorer& scorer, std::uint64_t seed);

struct DaytimeResult {
    LatentSequence z_star;
    OutputSequence final_output;
    RefinementTrace trace;
    bool archived = false;
    double confidence = 0.0;

    // Intermediate quantities, for metrics and tests.
    ContextEmbedding embedding;
    LatentSequence z_base;
    LatentSequence z_weaved;
    LatentSequence z_init;
    bool short_decode = false;
    std::size_t neighbors = 0;
    std::uint64_t weaver_version = 0;
};

/// One daytime step: embed, greedy base latent, weaver transform (when a
/// trained weaver is given), top-k retrieval, momentum transfer, refinement,
/// greedy final generation under z*, and archival of (e, z_base, z*) when the
/// confidence reaches tau and the base decode was not short.
DaytimeResult process_query(const Backend& backend, const WeaverModel* weaver, EpisodicBuffer& buffer,
                            const QueryContext& ctx, const EvolveConfig& cfg, const Scorer& scorer,
                            std::uint64_t seed);

}  // namespace lev
