#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lev/latent.hpp"
#include "lev/matrix.hpp"

namespace lev {

/// A prompt c plus the optional rule-scorer task fields carried by the query stream.
struct QueryContext {
    std::string text;
    std::string task_id;
    std::optional<std::string> rule_target;
    std::optional<std::string> format_grammar;

    QueryContext() = default;
    QueryContext(std::string t, std::string id, std::optional<std::string> target = std::nullopt,
                 std::optional<std::string> grammar = std::nullopt);

    friend bool operator==(const QueryContext&, const QueryContext&) = default;
};

/// One generated output. log_prob is ln p(y | c, z) under the temperature-1
/// model distribution, whatever temperature produced the sample.
struct OutputSequence {
    std::vector<std::uint32_t> tokens;
    std::string text;
    double log_prob = 0.0;

    friend bool operator==(const OutputSequence&, const OutputSequence&) = default;
};

struct BackendDescriptor {
    std::uint32_t d = 0;
    std::uint32_t d_e = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t max_output_length = 0;
    bool supports_exact_enumeration = false;
    bool supports_judge = false;

    friend bool operator==(const BackendDescriptor&, const BackendDescriptor&) = default;
};

struct BaseLatent {
    LatentSequence latent;
    /// Greedy decoding hit end-of-sequence before l_prime tokens; the
    /// missing rows are zero.
    bool short_decode = false;
    std::size_t decoded_tokens = 0;
};

/// Contract for a frozen generation model steered by a soft-prefix latent.
/// Implementations must be safe to call concurrently from several threads.
class Backend {
public:
    virtual ~Backend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;

    /// Final-layer hidden state at the last prompt position.
    virtual ContextEmbedding embed_context(const QueryContext& ctx) const = 0;

    /// Greedy decode without a latent prefix; final hidden states of the first
    /// l_prime generated positions.
    virtual BaseLatent base_latent(const QueryContext& ctx, std::size_t l_prime) const = 0;

    /// n independent samples with z prepended as soft input embeddings.
    /// temperature 0 is greedy decoding.
    virtual std::vector<OutputSequence> sample_outputs(const QueryContext& ctx, const LatentSequence& z, std::size_t n,
                                                       double temperature, std::uint64_t seed) const = 0;

    /// Exact gradient of ln p(y | c, z) with respect to every entry of z.
    virtual Matrix grad_log_prob(const QueryContext& ctx, const LatentSequence& z, const OutputSequence& y) const = 0;

    /// Every output sequence with its log-probability. Only for backends whose
    /// descriptor sets supports_exact_enumeration.
    virtual std::vector<OutputSequence> enumerate_outputs(const QueryContext& ctx, const LatentSequence& z) const;

    /// Deterministic (temperature 0) text completion used by the judge scorer.
    virtual std::string judge_text(const std::string& prompt) const;
};

}  // namespace lev
