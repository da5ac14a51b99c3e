#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace lev {

/// Row-major L' x d block of f32 values; the steering prefix fed to the model.
/// Every entry is finite; construction rejects anything else.
class LatentSequence {
public:
    LatentSequence(std::size_t rows, std::size_t cols);  // zero-filled
    LatentSequence(std::size_t rows, std::size_t cols, std::vector<float> data);

    static LatentSequence filled(std::size_t rows, std::size_t cols, float value);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> values() const noexcept { return data_; }
    const std::vector<float>& data() const noexcept { return data_; }

    bool same_shape(const LatentSequence& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool row_is_zero(std::size_t r) const;

    friend bool operator==(const LatentSequence&, const LatentSequence&) = default;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<float> data_;
};

/// Final-hidden-state embedding of a query. Finite with nonzero norm.
class ContextEmbedding {
public:
    explicit ContextEmbedding(std::vector<float> values);

    std::size_t width() const noexcept { return values_.size(); }
    std::span<const float> values() const noexcept { return values_; }
    double norm() const noexcept { return norm_; }

    friend bool operator==(const ContextEmbedding& a, const ContextEmbedding& b) { return a.values_ == b.values_; }

private:
    std::vector<float> values_;
    double norm_;
};

/// z* - z_base for one archived experience.
class MomentumDelta {
public:
    MomentumDelta(std::size_t rows, std::size_t cols, std::vector<float> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::span<const float> values() const noexcept { return data_; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<float> data_;
};

/// One episodic-buffer entry. z_base is the pre-weaver, pre-momentum base latent.
struct ExperienceTriplet {
    ContextEmbedding embedding;
    LatentSequence z_base;
    LatentSequence z_star;
    float confidence = 0.0F;
    std::uint64_t created_at = 0;

    ExperienceTriplet(ContextEmbedding e, LatentSequence base, LatentSequence star, float conf, std::uint64_t seq = 0);
};

using TripletRef = std::shared_ptr<const ExperienceTriplet>;

struct NeighborEntry {
    TripletRef triplet;
    double similarity = 0.0;
};

/// Top-k retrieval result: sorted by similarity (non-increasing), ties by
/// older created_at first, no duplicates.
class Neighborhood {
public:
    Neighborhood() = default;
    explicit Neighborhood(std::vector<NeighborEntry> entries);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::vector<NeighborEntry>& entries() const noexcept { return entries_; }
    std::vector<double> similarities() const;

private:
    std::vector<NeighborEntry> entries_;
};

double cosine_similarity(const ContextEmbedding& a, const ContextEmbedding& b);

MomentumDelta momentum_delta(const ExperienceTriplet& triplet);

/// Softmax with max subtraction. Empty in, empty out.
std::vector<double> momentum_weights(std::span<const double> similarities);

/// z_start + sum_j alpha_j * delta_j over the neighborhood. Returns z_start
/// unchanged (bit-exact) for an empty neighborhood.
LatentSequence momentum_transfer(const LatentSequence& z_start, const Neighborhood& neighborhood);

}  // namespace lev
