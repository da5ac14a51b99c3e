#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lev/config.hpp"
#include "lev/episodic_buffer.hpp"
#include "lev/latent.hpp"

namespace lev {

struct WeaverDims {
    std::uint32_t embedding_width = 0;  // d_e
    std::uint32_t latent_cols = 0;      // d
    std::uint32_t latent_rows = 0;      // L'
    std::uint32_t hidden = 0;           // h

    friend bool operator==(const WeaverDims&, const WeaverDims&) = default;
};

/// Offsets of each parameter block inside the flat parameter vector. This is
/// also the order in which the blocks are stored on disk.
///
///   proj_w  h x (d_e + d)     proj_b  h
///   t1_w    h x h             t1_b    h
///   t2_w    h x h             t2_b    h
///   head_w  L' x d x h        head_b  L' x d
///   gate    L'
struct WeaverLayout {
    std::size_t proj_w, proj_b, t1_w, t1_b, t2_w, t2_b, head_w, head_b, gate, total;

    explicit WeaverLayout(const WeaverDims& dims);

    friend bool operator==(const WeaverLayout&, const WeaverLayout&) = default;
};

/// Residual per-row regressor from (e, z_base) to a refined latent:
///
///   a0 = tanh(proj_w [e ; z_r] + proj_b)
///   a1 = tanh(t1_w a0 + t1_b)
///   a2 = tanh(t2_w a1 + t2_b)
///   out_r = z_r + gate_r * (head_w[r] a2 + head_b[r])
///
/// A fresh model has a zero head and unit gates. It is trained once
/// version() > 0; before that forward() returns z_base untouched.
///
/// File layout (little-endian):
///   "LEVWVR01" | version u64 | d_e u32 | d u32 | L' u32 | h u32 |
///   parameters f32 in WeaverLayout order | CRC32C u32
class WeaverModel {
public:
    WeaverModel(WeaverDims dims, std::uint64_t seed);
    WeaverModel(WeaverDims dims, std::vector<float> parameters, std::uint64_t version);

    const WeaverDims& dims() const noexcept { return dims_; }
    const WeaverLayout& layout() const noexcept { return layout_; }
    std::span<const float> parameters() const noexcept { return params_; }
    std::uint64_t version() const noexcept { return version_; }
    bool trained() const noexcept { return version_ > 0; }

    LatentSequence forward(const ContextEmbedding& e, const LatentSequence& z_base) const;

    /// Mean over triplets of ||W(e, z_base) - z*||^2 / (L' d). The residual
    /// path is evaluated even when the model is untrained.
    double loss(std::span<const TripletRef> triplets) const;

    std::vector<std::uint8_t> serialize() const;
    static WeaverModel deserialize(std::vector<std::uint8_t> bytes, const std::string& source_name = "weaver");
    void save(const std::filesystem::path& destination) const;
    static WeaverModel load(const std::filesystem::path& source);

    friend bool operator==(const WeaverModel&, const WeaverModel&) = default;

private:
    friend class WeaverTrainer;

    LatentSequence apply(const ContextEmbedding& e, const LatentSequence& z_base) const;
    void check_shapes(const ContextEmbedding& e, const LatentSequence& z_base) const;

    WeaverDims dims_;
    WeaverLayout layout_;
    std::vector<float> params_;
    std::uint64_t version_ = 0;
};

struct ConsolidationReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t epochs_run = 0;
    std::size_t triplets_used = 0;
    bool succeeded = false;
    std::string message;
};

/// Fits the weaver to the triplets by Adam on mini-batches, keeping the
/// parameters of the epoch with the lowest full-set loss (so final_loss <=
/// initial_loss). Stops early after `patience` epochs improving by less than
/// min_delta. On success the version is incremented. A non-finite loss
/// restores the parameters held on entry and reports failure.
///
/// only_since, when set, restricts training to triplets with created_at >=
/// that sequence number. Throws PreconditionError when no triplet qualifies.
ConsolidationReport consolidate(WeaverModel& weaver, const EpisodicBuffer& buffer, const WeaverTrainConfig& cfg,
                                std::uint64_t seed, std::optional<std::uint64_t> only_since = std::nullopt);

/// Same, on an explicit triplet list.
ConsolidationReport consolidate(WeaverModel& weaver, std::span<const TripletRef> triplets,
                                const WeaverTrainConfig& cfg, std::uint64_t seed);

}  // namespace lev
