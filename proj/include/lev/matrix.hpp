#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace lev {

/// Dense row-major double matrix. Used for gradients with respect to a
/// latent sequence, where entries may legitimately be non-finite on a
/// degenerate backend and must be inspected before use.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void add_scaled(const Matrix& other, double scale) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] += scale * other.data[i];
        }
    }

    void scale(double s) {
        for (double& v : data) {
            v *= s;
        }
    }

    double frobenius_norm() const {
        double sq = 0.0;
        for (double v : data) {
            sq += v * v;
        }
        return std::sqrt(sq);
    }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace lev
