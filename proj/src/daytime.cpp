#include "lev/daytime.hpp"

#include <bit>
#include <cmath>
#include <map>
#include <optional>

#include "lev/errors.hpp"
#include "lev/rng.hpp"

namespace lev {

namespace {

constexpr std::uint64_t kFinalDecodeStream = 0xF1A1;
constexpr std::size_t kPatience = 3;

double checked_quality(const Scorer& scorer, const QueryContext& ctx, const OutputSequence& y) {
    const double q = scorer.quality(ctx, y);
    if (!(q >= 0.0 && q <= 1.0)) {
        throw DomainError("scorer returned " + std::to_string(q) + ", outside [0, 1]");
    }
    return q;
}

}  // namespace

std::string_view stop_reason_name(StopReason r) {
    switch (r) {
        case StopReason::MaxIters: return "max_iters";
        case StopReason::Patience: return "patience";
        case StopReason::Degenerate: return "degenerate";
    }
    return "?";
}

std::uint64_t latent_digest(const LatentSequence& z) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 0x100000001b3ULL;
        }
    };
    feed(z.rows(), 4);
    feed(z.cols(), 4);
    for (float v : z.values()) {
        feed(std::bit_cast<std::uint32_t>(v), 4);
    }
    return h;
}

GradientEstimate estimate_gradient(const Backend& backend, const QueryContext& ctx, const LatentSequence& z,
                                   std::size_t m_samples, const Scorer& scorer, std::uint64_t seed,
                                   double temperature, bool baseline) {
    if (m_samples == 0) {
        throw PreconditionError("estimate_gradient needs at least one sample");
    }
    GradientEstimate est;
    est.samples = backend.sample_outputs(ctx, z, m_samples, temperature, seed);
    if (est.samples.size() != m_samples) {
        throw ProtocolError("backend returned " + std::to_string(est.samples.size()) + " samples, expected " +
                            std::to_string(m_samples));
    }

    // Repeated sequences share one reward and one gradient evaluation.
    struct Cached {
        double reward;
        std::optional<Matrix> grad;
    };
    std::map<std::vector<std::uint32_t>, Cached> cache;
    est.rewards.reserve(m_samples);
    double total = 0.0;
    for (const auto& y : est.samples) {
        auto it = cache.find(y.tokens);
        if (it == cache.end()) {
            it = cache.emplace(y.tokens, Cached{checked_quality(scorer, ctx, y), std::nullopt}).first;
        }
        est.rewards.push_back(it->second.reward);
        total += it->second.reward;
    }
    const double inv_m = 1.0 / static_cast<double>(m_samples);
    est.mean_reward = total * inv_m;
    const double b = baseline ? est.mean_reward : 0.0;

    est.grad = Matrix(z.rows(), z.cols());
    for (std::size_t m = 0; m < m_samples; ++m) {
        const double weight = est.rewards[m] - b;
        if (weight == 0.0) {
            continue;
        }
        auto& cached = cache.at(est.samples[m].tokens);
        if (!cached.grad) {
            cached.grad = backend.grad_log_prob(ctx, z, est.samples[m]);
            if (cached.grad->rows != z.rows() || cached.grad->cols != z.cols()) {
                throw ShapeError("backend gradient shape does not match the latent");
            }
        }
        est.grad.add_scaled(*cached.grad, weight * inv_m);
    }
    return est;
}

RefineResult refine(const Backend& backend, const QueryContext& ctx, const LatentSequence& z_0,
                    const EvolveConfig& cfg, const Scorer& scorer, std::uint64_t seed) {
    if (cfg.K == 0 || !(cfg.eta > 0.0) || cfg.M_samples == 0) {
        throw PreconditionError("refine needs K >= 1, eta > 0 and M_samples >= 1");
    }
    RefinementTrace trace;
    LatentSequence z = z_0;
    LatentSequence best = z_0;
    double best_reward = -1.0;
    std::size_t stale = 0;

    for (std::size_t k = 0; k < cfg.K; ++k) {
        const auto est = estimate_gradient(backend, ctx, z, cfg.M_samples, scorer, derive_seed(seed, k),
                                           cfg.rollout_temperature, cfg.reward_baseline);
        IterationRecord rec;
        rec.z_digest = latent_digest(z);
        rec.mean_reward = est.mean_reward;
        rec.rewards = est.rewards;
        rec.grad_norm = est.grad.frobenius_norm();
        trace.iterations.push_back(std::move(rec));
        trace.final_mean_reward = est.mean_reward;

        if (est.mean_reward > best_reward) {
            best_reward = est.mean_reward;
            best = z;
            trace.best_iteration = k;
            stale = 0;
        } else {
            ++stale;
        }

        if (!est.grad.all_finite()) {
            trace.stop_reason = StopReason::Degenerate;
            return {best, std::move(trace)};
        }
        if (stale >= kPatience) {
            trace.stop_reason = StopReason::Patience;
            return {best, std::move(trace)};
        }
        if (k + 1 == cfg.K) {
            break;
        }

        std::vector<float> next(z.size());
        const auto zv = z.values();
        bool finite = true;
        for (std::size_t i = 0; i < next.size(); ++i) {
            next[i] = static_cast<float>(static_cast<double>(zv[i]) + cfg.eta * est.grad.data[i]);
            finite = finite && std::isfinite(next[i]);
        }
        if (!finite) {
            trace.stop_reason = StopReason::Degenerate;
            return {best, std::move(trace)};
        }
        z = LatentSequence(z.rows(), z.cols(), std::move(next));
    }
    trace.stop_reason = StopReason::MaxIters;
    return {best, std::move(trace)};
}

DaytimeResult process_query(const Backend& backend, const WeaverModel* weaver, EpisodicBuffer& buffer,
                            const QueryContext& ctx, const EvolveConfig& cfg, const Scorer& scorer,
                            std::uint64_t seed) {
    ContextEmbedding e = backend.embed_context(ctx);
    BaseLatent base = backend.base_latent(ctx, cfg.l_prime);
    if (base.latent.rows() != cfg.l_prime || base.latent.cols() != buffer.dims().latent_cols) {
        throw ShapeError("backend base latent shape does not match the configured latent shape");
    }

    LatentSequence z_weaved = base.latent;
    std::uint64_t weaver_version = 0;
    if (weaver != nullptr && weaver->trained()) {
        z_weaved = weaver->forward(e, base.latent);
        weaver_version = weaver->version();
    }

    const Neighborhood nbhd = buffer.retrieve_topk(e, cfg.k_retrieval);
    LatentSequence z_init = momentum_transfer(z_weaved, nbhd);

    RefineResult refined = refine(backend, ctx, z_init, cfg, scorer, seed);
    const double confidence = refined.trace.iterations[refined.trace.best_iteration].mean_reward;

    auto finals = backend.sample_outputs(ctx, refined.z_star, 1, 0.0, derive_seed(seed, kFinalDecodeStream));
    if (finals.size() != 1) {
        throw ProtocolError("backend returned " + std::to_string(finals.size()) + " final outputs, expected 1");
    }

    bool archived = false;
    if (base.short_decode) {
        buffer.note_rejection();
    } else if (confidence >= cfg.tau) {
        archived = buffer.archive(
            ExperienceTriplet(e, base.latent, refined.z_star, static_cast<float>(confidence)), cfg.tau);
    } else {
        buffer.note_rejection();
    }

    return DaytimeResult{std::move(refined.z_star),
                         std::move(finals.front()),
                         std::move(refined.trace),
                         archived,
                         confidence,
                         std::move(e),
                         std::move(base.latent),
                         std::move(z_weaved),
                         std::move(z_init),
                         base.short_decode,
                         nbhd.size(),
                         weaver_version};
}

}  // namespace lev
