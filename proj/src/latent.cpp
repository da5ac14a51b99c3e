#include "lev/latent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "lev/errors.hpp"

namespace lev {

namespace {

void require_finite(std::span<const float> values, const char* what) {
    for (float v : values) {
        if (!std::isfinite(v)) {
            throw DomainError(std::string(what) + " contains a non-finite entry");
        }
    }
}

}  // namespace

LatentSequence::LatentSequence(std::size_t rows, std::size_t cols)
    : LatentSequence(rows, cols, std::vector<float>(rows * cols, 0.0F)) {}

LatentSequence::LatentSequence(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows_ == 0 || cols_ == 0) {
        throw ShapeError("latent sequence needs at least one row and one column");
    }
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("latent data size " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    require_finite(data_, "latent sequence");
}

LatentSequence LatentSequence::filled(std::size_t rows, std::size_t cols, float value) {
    return LatentSequence(rows, cols, std::vector<float>(rows * cols, value));
}

bool LatentSequence::row_is_zero(std::size_t r) const {
    const auto values = row(r);
    return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0F; });
}

ContextEmbedding::ContextEmbedding(std::vector<float> values) : values_(std::move(values)), norm_(0.0) {
    if (values_.empty()) {
        throw ShapeError("context embedding must have positive width");
    }
    require_finite(values_, "context embedding");
    double sq = 0.0;
    for (float v : values_) {
        sq += static_cast<double>(v) * v;
    }
    norm_ = std::sqrt(sq);
    if (!(norm_ > 0.0)) {
        throw DomainError("context embedding has zero norm");
    }
}

MomentumDelta::MomentumDelta(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("momentum delta size does not match its shape");
    }
    require_finite(data_, "momentum delta");
}

ExperienceTriplet::ExperienceTriplet(ContextEmbedding e, LatentSequence base, LatentSequence star, float conf,
                                     std::uint64_t seq)
    : embedding(std::move(e)), z_base(std::move(base)), z_star(std::move(star)), confidence(conf), created_at(seq) {
    if (!z_base.same_shape(z_star)) {
        throw ShapeError("triplet z_base and z_star shapes differ");
    }
    if (!(confidence >= 0.0F && confidence <= 1.0F)) {
        throw DomainError("triplet confidence must lie in [0, 1]");
    }
}

Neighborhood::Neighborhood(std::vector<NeighborEntry> entries) : entries_(std::move(entries)) {
    std::set<const ExperienceTriplet*> seen;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (!entries_[i].triplet) {
            throw DomainError("neighborhood entry without a triplet");
        }
        if (!seen.insert(entries_[i].triplet.get()).second) {
            throw DomainError("neighborhood contains a duplicate triplet");
        }
        if (i > 0 && entries_[i].similarity > entries_[i - 1].similarity) {
            throw DomainError("neighborhood is not sorted by similarity");
        }
    }
}

std::vector<double> Neighborhood::similarities() const {
    std::vector<double> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.push_back(e.similarity);
    }
    return out;
}

double cosine_similarity(const ContextEmbedding& a, const ContextEmbedding& b) {
    if (a.width() != b.width()) {
        throw ShapeError("cosine similarity of embeddings with widths " + std::to_string(a.width()) + " and " +
                         std::to_string(b.width()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    double dot = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        dot += static_cast<double>(av[i]) * bv[i];
    }
    return std::clamp(dot / (a.norm() * b.norm()), -1.0, 1.0);
}

MomentumDelta momentum_delta(const ExperienceTriplet& triplet) {
    const auto& base = triplet.z_base;
    const auto& star = triplet.z_star;
    if (!base.same_shape(star)) {
        throw ShapeError("momentum delta of mismatched latents");
    }
    std::vector<float> out(base.size());
    const auto bv = base.values();
    const auto sv = star.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = sv[i] - bv[i];
    }
    return MomentumDelta(base.rows(), base.cols(), std::move(out));
}

std::vector<double> momentum_weights(std::span<const double> similarities) {
    if (similarities.empty()) {
        return {};
    }
    for (double s : similarities) {
        if (std::isnan(s)) {
            throw DomainError("momentum weights: NaN similarity");
        }
        if (!std::isfinite(s)) {
            throw DomainError("momentum weights: non-finite similarity");
        }
    }
    const double peak = *std::max_element(similarities.begin(), similarities.end());
    std::vector<double> w(similarities.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp(similarities[i] - peak);
        total += w[i];
    }
    for (double& v : w) {
        v /= total;
    }
    return w;
}

LatentSequence momentum_transfer(const LatentSequence& z_start, const Neighborhood& neighborhood) {
    if (neighborhood.empty()) {
        return z_start;
    }
    const auto sims = neighborhood.similarities();
    const auto alpha = momentum_weights(sims);

    std::vector<double> step(z_start.size(), 0.0);
    for (std::size_t j = 0; j < alpha.size(); ++j) {
        const MomentumDelta delta = momentum_delta(*neighborhood.entries()[j].triplet);
        if (delta.rows() != z_start.rows() || delta.cols() != z_start.cols()) {
            throw ShapeError("neighbor momentum shape does not match the starting latent");
        }
        const auto dv = delta.values();
        for (std::size_t i = 0; i < step.size(); ++i) {
            step[i] += alpha[j] * static_cast<double>(dv[i]);
        }
    }

    std::vector<float> out(z_start.size());
    const auto zv = z_start.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(zv[i]) + step[i]);
    }
    return LatentSequence(z_start.rows(), z_start.cols(), std::move(out));
}

}  // namespace lev
