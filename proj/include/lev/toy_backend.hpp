#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lev/backend.hpp"

namespace lev {

struct ToyConfig {
    std::uint32_t vocab_size = 16;  // last id is end-of-sequence
    std::uint32_t d = 16;
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t ffn = 64;
    std::uint32_t max_output_length = 6;
    std::uint32_t max_positions = 64;
    std::uint64_t seed = 20240611;
    /// Scale of the output projection; larger values give peakier next-token distributions.
    double logit_scale = 2.0;
    /// enumerate_outputs refuses when vocab^max_output_length exceeds this.
    std::uint64_t enumeration_bound = 1ULL << 16;
};

/// Frozen weights of the toy causal transformer. All matrices row-major,
/// applied as x * W (input dimension first).
struct ToyWeights {
    struct Layer {
        std::vector<double> ln1_gain, ln1_bias;
        std::vector<double> wq, wk, wv, wo;  // d x d
        std::vector<double> ln2_gain, ln2_bias;
        std::vector<double> w1, b1;  // d x ffn, ffn
        std::vector<double> w2, b2;  // ffn x d, d
    };
    std::vector<double> token_embedding;     // vocab x d
    std::vector<double> position_embedding;  // max_positions x d
    std::vector<Layer> layers;
    std::vector<double> lnf_gain, lnf_bias;
    std::vector<double> w_out, b_out;  // d x vocab, vocab
};

/// Built-in tiny autoregressive model: pre-norm causal self-attention blocks
/// with GELU MLPs, a final layer norm, and an untied output projection.
/// The latent prefix is added to position embeddings like any other input
/// embedding. All-zero latent rows are padding and are dropped from the
/// input, so they receive zero gradient.
///
/// Vocabulary: the first vocab_size-1 characters of "0123456789+*=[]",
/// then end-of-sequence (decodes to nothing).
class ToyBackend final : public Backend {
public:
    static constexpr std::string_view kAlphabet = "0123456789+*=[]";

    explicit ToyBackend(ToyConfig config = {});

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    ContextEmbedding embed_context(const QueryContext& ctx) const override;
    BaseLatent base_latent(const QueryContext& ctx, std::size_t l_prime) const override;
    std::vector<OutputSequence> sample_outputs(const QueryContext& ctx, const LatentSequence& z, std::size_t n,
                                               double temperature, std::uint64_t seed) const override;
    Matrix grad_log_prob(const QueryContext& ctx, const LatentSequence& z, const OutputSequence& y) const override;
    std::vector<OutputSequence> enumerate_outputs(const QueryContext& ctx, const LatentSequence& z) const override;

    /// ln p(tokens | c, z) without the gradient.
    double log_prob(const QueryContext& ctx, const LatentSequence& z, const std::vector<std::uint32_t>& tokens) const;

    std::vector<std::uint32_t> encode(const std::string& text) const;
    std::string decode(const std::vector<std::uint32_t>& tokens) const;
    std::uint32_t eos() const noexcept { return config_.vocab_size - 1; }

    const ToyConfig& config() const noexcept { return config_; }
    const ToyWeights& weights() const noexcept { return weights_; }

private:
    struct Input;
    struct Trace;

    Input build_input(const QueryContext& ctx, const LatentSequence* z, const std::vector<std::uint32_t>& generated) const;
    Trace forward(const Input& input) const;
    std::vector<double> backward(const Trace& trace, const std::vector<double>& d_logits) const;
    void validate_latent(const LatentSequence& z) const;
    void validate_output(const std::vector<std::uint32_t>& tokens) const;

    ToyConfig config_;
    BackendDescriptor descriptor_;
    ToyWeights weights_;
};

}  // namespace lev
