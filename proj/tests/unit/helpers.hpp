#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "lev/latent.hpp"
#include "lev/rng.hpp"

namespace lev::testing {

inline std::vector<float> normals(Rng& rng, std::size_t n, double sd = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(rng.normal() * sd);
    }
    return v;
}

inline LatentSequence random_latent(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
    return LatentSequence(rows, cols, normals(rng, rows * cols, sd));
}

inline ContextEmbedding random_embedding(Rng& rng, std::size_t width) { return ContextEmbedding(normals(rng, width)); }

inline ExperienceTriplet random_triplet(Rng& rng, std::size_t de, std::size_t rows, std::size_t cols, float conf = 0.9F) {
    return ExperienceTriplet(random_embedding(rng, de), random_latent(rng, rows, cols), random_latent(rng, rows, cols),
                             conf);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("lev-test-" + std::to_string(::getpid()) + "-" + tag + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace lev::testing
