#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lev/episodic_buffer.hpp"
#include "lev/errors.hpp"
#include "lev/latent.hpp"
#include "oracle.hpp"

namespace lev {
namespace {

using testing::normals;
using testing::random_latent;

TEST(LatentSequence, RejectsNonFiniteAndBadShape) {
    EXPECT_THROW(LatentSequence(1, 2, {1.0F, std::numeric_limits<float>::quiet_NaN()}), DomainError);
    EXPECT_THROW(LatentSequence(1, 2, {1.0F, std::numeric_limits<float>::infinity()}), DomainError);
    EXPECT_THROW(LatentSequence(2, 2, {1.0F, 2.0F}), ShapeError);
    EXPECT_THROW(LatentSequence(0, 2), ShapeError);
}

TEST(LatentSequence, ZeroRowsAreDetected) {
    const LatentSequence z(2, 2, {0.0F, 0.0F, 0.0F, 1.0F});
    EXPECT_TRUE(z.row_is_zero(0));
    EXPECT_FALSE(z.row_is_zero(1));
}

TEST(ContextEmbedding, RejectsZeroVector) {
    EXPECT_THROW(ContextEmbedding({0.0F, 0.0F}), DomainError);
    EXPECT_THROW(ContextEmbedding(std::vector<float>{}), ShapeError);
    EXPECT_NEAR(ContextEmbedding({3.0F, 4.0F}).norm(), 5.0, 1e-12);
}

TEST(ExperienceTriplet, ValidatesShapesAndConfidence) {
    const ContextEmbedding e({1.0F});
    EXPECT_THROW(ExperienceTriplet(e, LatentSequence(1, 2), LatentSequence(2, 2), 0.5F), ShapeError);
    EXPECT_THROW(ExperienceTriplet(e, LatentSequence(1, 2), LatentSequence(1, 2), 1.5F), DomainError);
    EXPECT_THROW(ExperienceTriplet(e, LatentSequence(1, 2), LatentSequence(1, 2), -0.1F), DomainError);
}

TEST(Cosine, KnownValues) {
    EXPECT_DOUBLE_EQ(cosine_similarity(ContextEmbedding({1.0F, 0.0F}), ContextEmbedding({0.0F, 2.0F})), 0.0);
    EXPECT_NEAR(cosine_similarity(ContextEmbedding({1.0F, 1.0F}), ContextEmbedding({2.0F, 2.0F})), 1.0, 1e-15);
    EXPECT_NEAR(cosine_similarity(ContextEmbedding({1.0F, 0.0F}), ContextEmbedding({-1.0F, 0.0F})), -1.0, 1e-15);
    EXPECT_THROW(cosine_similarity(ContextEmbedding({1.0F}), ContextEmbedding({1.0F, 0.0F})), ShapeError);
}

TEST(MomentumWeights, EmptyInEmptyOut) { EXPECT_TRUE(momentum_weights({}).empty()); }

TEST(MomentumWeights, EqualSimilaritiesGiveUniformWeights) {
    const std::vector<double> s(5, 0.3);
    for (double w : momentum_weights(s)) {
        EXPECT_DOUBLE_EQ(w, 0.2);
    }
}

TEST(MomentumWeights, RejectsNonFinite) {
    const std::vector<double> s = {0.1, std::numeric_limits<double>::quiet_NaN()};
    EXPECT_THROW(momentum_weights(s), DomainError);
}

TEST(MomentumWeights, PropertyMatchesReferenceSoftmax) {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> s(1 + rng.below(20));
        for (auto& x : s) {
            x = 2.0 * rng.uniform() - 1.0;
        }
        const auto w = momentum_weights(s);
        const auto ref = oracle::reference_softmax(s);
        double total = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            EXPECT_NEAR(w[i], ref[i], 1e-15);
            EXPECT_GT(w[i], 0.0);
            total += w[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        // Larger similarity never receives a smaller weight.
        for (std::size_t i = 1; i < s.size(); ++i) {
            EXPECT_EQ(s[i] > s[0], w[i] > w[0]);
        }
    }
}

TEST(MomentumTransfer, EmptyNeighbourhoodIsBitExactIdentity) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto z = random_latent(rng, 3, 5, 100.0);
        EXPECT_EQ(momentum_transfer(z, Neighborhood{}), z);
    }
}

TEST(MomentumTransfer, SingleNeighbourAddsItsDelta) {
    EpisodicBuffer buf(BufferDims{2, 1, 2});
    buf.archive(ExperienceTriplet(ContextEmbedding({1.0F, 0.0F}), LatentSequence(1, 2, {1.0F, 1.0F}),
                                  LatentSequence(1, 2, {1.5F, 0.0F}), 1.0F),
                0.5);
    const auto hood = buf.retrieve_topk(ContextEmbedding({1.0F, 1.0F}), 4);
    const auto z0 = momentum_transfer(LatentSequence(1, 2, {10.0F, 20.0F}), hood);
    EXPECT_EQ(z0, LatentSequence(1, 2, {10.5F, 19.0F}));
}

TEST(MomentumTransfer, MatchesHandComputedConvexCombination) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        EpisodicBuffer buf(BufferDims{3, 2, 4});
        const std::size_t n = 1 + rng.below(6);
        for (std::size_t j = 0; j < n; ++j) {
            buf.archive(testing::random_triplet(rng, 3, 2, 4), 0.5);
        }
        const auto hood = buf.retrieve_topk(testing::random_embedding(rng, 3), n);
        const auto z = random_latent(rng, 2, 4);
        const auto w = oracle::reference_softmax(hood.similarities());
        const auto got = momentum_transfer(z, hood);
        for (std::size_t i = 0; i < z.size(); ++i) {
            double want = z.values()[i];
            for (std::size_t j = 0; j < hood.size(); ++j) {
                const auto& t = *hood.entries()[j].triplet;
                want += w[j] * (static_cast<double>(t.z_star.values()[i]) - t.z_base.values()[i]);
            }
            EXPECT_NEAR(got.values()[i], want, 1e-5 * (1.0 + std::abs(want)));
        }
    }
}

TEST(Neighborhood, RejectsUnsortedAndDuplicateEntries) {
    Rng rng(14);
    auto a = std::make_shared<const ExperienceTriplet>(testing::random_triplet(rng, 2, 1, 2));
    auto b = std::make_shared<const ExperienceTriplet>(testing::random_triplet(rng, 2, 1, 2));
    EXPECT_THROW(Neighborhood({{a, 0.1}, {b, 0.2}}), DomainError);
    EXPECT_THROW(Neighborhood({{a, 0.3}, {a, 0.2}}), DomainError);
    EXPECT_NO_THROW(Neighborhood({{a, 0.3}, {b, 0.3}}));
}

}  // namespace
}  // namespace lev
