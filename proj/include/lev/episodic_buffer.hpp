#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <vector>

#include "lev/latent.hpp"

namespace lev {

struct BufferDims {
    std::uint32_t embedding_width = 0;  // d_e
    std::uint32_t latent_rows = 0;      // L'
    std::uint32_t latent_cols = 0;      // d

    friend bool operator==(const BufferDims&, const BufferDims&) = default;
};

/// Append-only archive of admitted experiences with exact top-k cosine
/// retrieval. One writer, many readers: retrieval observes either the state
/// before or after a concurrent archive(), never a partial entry.
///
/// File layout (all integers little-endian):
///   "LEVBUF01" | format u32 | d_e u32 | L' u32 | d u32 | count u64
///   count x { created_at u64 | confidence f32 | embedding d_e x f32 |
///             z_base L'*d x f32 | z_star L'*d x f32 }
///   admitted u64 | rejected u64 | next_seq u64 | capacity u64 (0 = none)
///   CRC32C of all preceding bytes (u32)
class EpisodicBuffer {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    explicit EpisodicBuffer(BufferDims dims, std::optional<std::size_t> capacity = std::nullopt);
    EpisodicBuffer(const EpisodicBuffer& other);
    EpisodicBuffer& operator=(const EpisodicBuffer& other);

    /// Admits t iff t.confidence >= tau. Assigns the next sequence number;
    /// evicts the oldest entry first when at capacity.
    bool archive(const ExperienceTriplet& t, double tau);

    /// Counts a rejection decided upstream (short decode, or a double-precision
    /// confidence below tau) without presenting a triplet.
    void note_rejection();

    Neighborhood retrieve_topk(const ContextEmbedding& query, std::size_t k) const;

    std::vector<TripletRef> snapshot() const;
    std::size_t size() const;
    bool empty() const { return size() == 0; }

    const BufferDims& dims() const noexcept { return dims_; }
    std::optional<std::size_t> capacity() const noexcept { return capacity_; }
    std::uint64_t admitted_count() const;
    std::uint64_t rejected_count() const;
    std::uint64_t next_sequence() const;

    std::vector<std::uint8_t> serialize() const;
    static EpisodicBuffer deserialize(std::vector<std::uint8_t> bytes, const std::string& source_name = "buffer");

    void save(const std::filesystem::path& destination) const;
    static EpisodicBuffer load(const std::filesystem::path& source);

private:
    BufferDims dims_;
    std::optional<std::size_t> capacity_;
    mutable std::shared_mutex mutex_;
    std::deque<TripletRef> entries_;
    std::uint64_t admitted_ = 0;
    std::uint64_t rejected_ = 0;
    std::uint64_t next_seq_ = 0;
};

}  // namespace lev
