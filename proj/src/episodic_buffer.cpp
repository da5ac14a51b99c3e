#include "lev/episodic_buffer.hpp"

#include <algorithm>
#include <mutex>
#include <string>

#include "lev/binary_io.hpp"
#include "lev/errors.hpp"

namespace lev {

namespace {

constexpr std::string_view kMagic = "LEVBUF01";

bool ranks_before(const NeighborEntry& a, const NeighborEntry& b) {
    if (a.similarity != b.similarity) {
        return a.similarity > b.similarity;
    }
    return a.triplet->created_at < b.triplet->created_at;
}

}  // namespace

EpisodicBuffer::EpisodicBuffer(BufferDims dims, std::optional<std::size_t> capacity)
    : dims_(dims), capacity_(capacity) {
    if (dims_.embedding_width == 0 || dims_.latent_rows == 0 || dims_.latent_cols == 0) {
        throw ShapeError("episodic buffer dimensions must be positive");
    }
    if (capacity_ && *capacity_ == 0) {
        throw ConfigError("episodic buffer capacity must be at least 1");
    }
}

EpisodicBuffer::EpisodicBuffer(const EpisodicBuffer& other) : dims_(other.dims_), capacity_(other.capacity_) {
    std::shared_lock lock(other.mutex_);
    entries_ = other.entries_;
    admitted_ = other.admitted_;
    rejected_ = other.rejected_;
    next_seq_ = other.next_seq_;
}

EpisodicBuffer& EpisodicBuffer::operator=(const EpisodicBuffer& other) {
    if (this == &other) {
        return *this;
    }
    std::unique_lock mine(mutex_, std::defer_lock);
    std::shared_lock theirs(other.mutex_, std::defer_lock);
    std::lock(mine, theirs);
    dims_ = other.dims_;
    capacity_ = other.capacity_;
    entries_ = other.entries_;
    admitted_ = other.admitted_;
    rejected_ = other.rejected_;
    next_seq_ = other.next_seq_;
    return *this;
}

bool EpisodicBuffer::archive(const ExperienceTriplet& t, double tau) {
    if (t.embedding.width() != dims_.embedding_width || t.z_base.rows() != dims_.latent_rows ||
        t.z_base.cols() != dims_.latent_cols || !t.z_base.same_shape(t.z_star)) {
        throw ShapeError("triplet shape does not match the buffer dimensions");
    }
    const bool admit = static_cast<double>(t.confidence) >= tau;

    std::unique_lock lock(mutex_);
    if (!admit) {
        ++rejected_;
        return false;
    }
    auto stored = std::make_shared<ExperienceTriplet>(t);
    stored->created_at = next_seq_++;
    if (capacity_ && entries_.size() >= *capacity_) {
        entries_.pop_front();
    }
    entries_.push_back(std::move(stored));
    ++admitted_;
    return true;
}

void EpisodicBuffer::note_rejection() {
    std::unique_lock lock(mutex_);
    ++rejected_;
}

Neighborhood EpisodicBuffer::retrieve_topk(const ContextEmbedding& query, std::size_t k) const {
    if (query.width() != dims_.embedding_width) {
        throw ShapeError("query embedding width " + std::to_string(query.width()) + " does not match buffer width " +
                         std::to_string(dims_.embedding_width));
    }
    std::vector<NeighborEntry> scored;
    {
        std::shared_lock lock(mutex_);
        scored.reserve(entries_.size());
        for (const auto& e : entries_) {
            scored.push_back({e, cosine_similarity(query, e->embedding)});
        }
    }
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), ranks_before);
    scored.resize(take);
    return Neighborhood(std::move(scored));
}

std::vector<TripletRef> EpisodicBuffer::snapshot() const {
    std::shared_lock lock(mutex_);
    return {entries_.begin(), entries_.end()};
}

std::size_t EpisodicBuffer::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

std::uint64_t EpisodicBuffer::admitted_count() const {
    std::shared_lock lock(mutex_);
    return admitted_;
}

std::uint64_t EpisodicBuffer::rejected_count() const {
    std::shared_lock lock(mutex_);
    return rejected_;
}

std::uint64_t EpisodicBuffer::next_sequence() const {
    std::shared_lock lock(mutex_);
    return next_seq_;
}

std::vector<std::uint8_t> EpisodicBuffer::serialize() const {
    std::shared_lock lock(mutex_);
    io::ByteWriter w;
    w.put_bytes(kMagic);
    w.put_u32(kFormatVersion);
    w.put_u32(dims_.embedding_width);
    w.put_u32(dims_.latent_rows);
    w.put_u32(dims_.latent_cols);
    w.put_u64(entries_.size());
    for (const auto& e : entries_) {
        w.put_u64(e->created_at);
        w.put_f32(e->confidence);
        w.put_f32s(e->embedding.values());
        w.put_f32s(e->z_base.values());
        w.put_f32s(e->z_star.values());
    }
    w.put_u64(admitted_);
    w.put_u64(rejected_);
    w.put_u64(next_seq_);
    w.put_u64(capacity_.value_or(0));
    w.seal();
    return w.bytes();
}

EpisodicBuffer EpisodicBuffer::deserialize(std::vector<std::uint8_t> bytes, const std::string& source_name) {
    constexpr std::size_t kHeader = 8 + 4 + 3 * 4 + 8;
    if (bytes.size() < kHeader) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": truncated header");
    }
    io::ByteReader r(std::move(bytes), source_name);
    if (r.get_bytes(kMagic.size()) != kMagic) {
        throw LoadError(LoadError::Kind::BadMagic, source_name + ": not an episodic buffer file");
    }
    const std::uint32_t version = r.get_u32();
    if (version != kFormatVersion) {
        throw LoadError(LoadError::Kind::VersionMismatch,
                        source_name + ": unsupported buffer format version " + std::to_string(version));
    }
    BufferDims dims;
    dims.embedding_width = r.get_u32();
    dims.latent_rows = r.get_u32();
    dims.latent_cols = r.get_u32();
    const std::uint64_t count = r.get_u64();

    const std::uint64_t latent = std::uint64_t{dims.latent_rows} * dims.latent_cols;
    const std::uint64_t entry_bytes = 8 + 4 + 4 * (dims.embedding_width + 2 * latent);
    const std::uint64_t expected = kHeader + count * entry_bytes + 4 * 8 + 4;
    if (entry_bytes != 0 && count > (r.total_size() / entry_bytes) + 1) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": entry count exceeds file size");
    }
    if (r.total_size() < expected) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": file is truncated");
    }
    if (r.total_size() > expected) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": trailing bytes after buffer payload");
    }
    r.verify_checksum();

    std::vector<ExperienceTriplet> triplets;
    triplets.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t created = r.get_u64();
        const float confidence = r.get_f32();
        auto e = r.get_f32s(dims.embedding_width);
        auto base = r.get_f32s(latent);
        auto star = r.get_f32s(latent);
        try {
            triplets.emplace_back(ContextEmbedding(std::move(e)),
                                  LatentSequence(dims.latent_rows, dims.latent_cols, std::move(base)),
                                  LatentSequence(dims.latent_rows, dims.latent_cols, std::move(star)), confidence,
                                  created);
        } catch (const Error& err) {
            throw LoadError(LoadError::Kind::Malformed, source_name + ": entry " + std::to_string(i) + ": " + err.what());
        }
    }
    const std::uint64_t admitted = r.get_u64();
    const std::uint64_t rejected = r.get_u64();
    const std::uint64_t next_seq = r.get_u64();
    const std::uint64_t capacity = r.get_u64();

    std::optional<std::size_t> cap;
    if (capacity != 0) {
        cap = static_cast<std::size_t>(capacity);
    }
    EpisodicBuffer buf(dims, cap);
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        if (i > 0 && triplets[i].created_at <= triplets[i - 1].created_at) {
            throw LoadError(LoadError::Kind::Malformed, source_name + ": sequence numbers not increasing");
        }
        buf.entries_.push_back(std::make_shared<ExperienceTriplet>(std::move(triplets[i])));
    }
    if (!buf.entries_.empty() && buf.entries_.back()->created_at >= next_seq) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": next sequence number behind stored entries");
    }
    if (cap && buf.entries_.size() > *cap) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": entry count exceeds capacity");
    }
    buf.admitted_ = admitted;
    buf.rejected_ = rejected;
    buf.next_seq_ = next_seq;
    return buf;
}

void EpisodicBuffer::save(const std::filesystem::path& destination) const {
    const auto bytes = serialize();
    io::write_file_atomic(destination, bytes);
}

EpisodicBuffer EpisodicBuffer::load(const std::filesystem::path& source) {
    return deserialize(io::read_file(source), source.string());
}

}  // namespace lev
