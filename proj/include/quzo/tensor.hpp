#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "quzo/errors.hpp"

namespace quzo {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major matrix of doubles. Activations, gradients and
/// dequantized weights all travel in this form.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) {
            throw InputError("matrix data size does not match its shape");
        }
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// C = A * B^T, with A (m x k) and B (n x k).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw InputError("matmul_nt: inner dimensions differ");
    }
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.data.data() + j * b.cols;
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                acc += ar[k] * br[k];
            }
            c(i, j) = acc;
        }
    }
    return c;
}

/// C = A * B, with A (m x k) and B (k x n).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw InputError("matmul: inner dimensions differ");
    }
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* br = b.data.data() + k * b.cols;
            double* cr = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                cr[j] += aik * br[j];
            }
        }
    }
    return c;
}

/// C = A^T * B, with A (k x m) and B (k x n).
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw InputError("matmul_tn: inner dimensions differ");
    }
    Matrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* ar = a.data.data() + k * a.cols;
        const double* br = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = ar[i];
            if (aki == 0.0) {
                continue;
            }
            double* cr = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                cr[j] += aki * br[j];
            }
        }
    }
    return c;
}

} // namespace quzo
