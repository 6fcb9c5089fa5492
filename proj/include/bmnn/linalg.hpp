#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "bmnn/tensor.hpp"

namespace bmnn {

/// Solve A X = B for square A by Gaussian elimination with partial pivoting.
/// A pivot below 1e-12 relative to the largest entry of A raises
/// SingularSystemError.
inline Tensor solve_linear(const Tensor& a, const Tensor& b) {
    a.require_rank(2, "solve_linear lhs");
    b.require_rank(2, "solve_linear rhs");
    const std::size_t n = a.rows();
    if (a.cols() != n) throw ShapeError("solve_linear needs a square system");
    if (b.rows() != n) {
        throw ShapeError("solve_linear rhs rows " + std::to_string(b.rows()) +
                         " do not match system size " + std::to_string(n));
    }
    const std::size_t k = b.cols();

    Tensor lhs = a;
    Tensor rhs = b;
    double scale = 0.0;
    for (std::size_t i = 0; i < lhs.size(); ++i) scale = std::max(scale, std::abs(lhs[i]));
    if (scale == 0.0) throw SingularSystemError("solve_linear: all-zero system matrix");
    const double tol = 1e-12 * scale;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(lhs.at(r, col)) > std::abs(lhs.at(pivot, col))) pivot = r;
        }
        if (std::abs(lhs.at(pivot, col)) < tol) {
            throw SingularSystemError("solve_linear: pivot " + std::to_string(col) +
                                      " below relative threshold");
        }
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(lhs.at(col, j), lhs.at(pivot, j));
            for (std::size_t j = 0; j < k; ++j) std::swap(rhs.at(col, j), rhs.at(pivot, j));
        }
        const double inv = 1.0 / lhs.at(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lhs.at(r, col) * inv;
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) lhs.at(r, j) -= f * lhs.at(col, j);
            for (std::size_t j = 0; j < k; ++j) rhs.at(r, j) -= f * rhs.at(col, j);
        }
    }
    // back substitution
    Tensor x({n, k});
    for (std::size_t ri = n; ri-- > 0;) {
        for (std::size_t j = 0; j < k; ++j) {
            double s = rhs.at(ri, j);
            for (std::size_t c = ri + 1; c < n; ++c) s -= lhs.at(ri, c) * x.at(c, j);
            x.at(ri, j) = s / lhs.at(ri, ri);
        }
    }
    return x;
}

/// Minimize ||A X - B||_F^2 + ridge * ||X||_F^2 via the normal equations
/// (A^T A + ridge I) X = A^T B with a direct dense solve.
inline Tensor solve_least_squares(const Tensor& a, const Tensor& b, double ridge = 0.0) {
    a.require_rank(2, "solve_least_squares design");
    b.require_rank(2, "solve_least_squares target");
    if (a.rows() != b.rows()) {
        throw ShapeError("solve_least_squares: design has " + std::to_string(a.rows()) +
                         " rows, target has " + std::to_string(b.rows()));
    }
    if (ridge < 0.0) throw NumericError("solve_least_squares: negative ridge");
    Tensor at = transposed(a);
    Tensor gram = matmul(at, a);
    for (std::size_t i = 0; i < gram.rows(); ++i) gram.at(i, i) += ridge;
    Tensor rhs = matmul(at, b);
    return solve_linear(gram, rhs);
}

/// (1/batch) * A A^T for A of shape (dim, batch). Exactly symmetric: only the
/// upper triangle is computed, the lower is mirrored.
inline Tensor mean_outer(const Tensor& a) {
    a.require_rank(2, "mean_outer");
    const std::size_t dim = a.rows();
    const std::size_t batch = a.cols();
    Tensor m({dim, dim});
    const double inv = 1.0 / static_cast<double>(batch);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = i; j < dim; ++j) {
            double s = 0.0;
            const double* ri = a.data() + i * batch;
            const double* rj = a.data() + j * batch;
            for (std::size_t x = 0; x < batch; ++x) s += ri[x] * rj[x];
            m.at(i, j) = s * inv;
            m.at(j, i) = m.at(i, j);
        }
    }
    return m;
}

/// Output extent of a 1-d convolution; errors when the geometry does not
/// produce an integer extent.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
    if (stride == 0) throw ShapeError("stride must be positive");
    const std::size_t padded = in + 2 * padding;
    if (padded < kernel) {
        throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(padded));
    }
    if ((padded - kernel) % stride != 0) {
        throw ShapeError("non-integer convolution output extent for input " + std::to_string(in) +
                         ", kernel " + std::to_string(kernel) + ", stride " +
                         std::to_string(stride) + ", padding " + std::to_string(padding));
    }
    return (padded - kernel) / stride + 1;
}

namespace detail {

/// Patch-matrix row r of one (channels, h, w) sample goes to
/// dest[r * dest_stride + dest_offset + u] for u in [0, q1*q2); lets batched
/// callers write every sample straight into one wide matrix.
inline void im2col_into(const double* input, std::size_t channels, std::size_t h, std::size_t w,
                        std::size_t k1, std::size_t k2, std::size_t stride, std::size_t padding,
                        std::size_t q1, std::size_t q2, double* dest, std::size_t dest_stride,
                        std::size_t dest_offset) {
    const long pad = static_cast<long>(padding);
    const long s = static_cast<long>(stride);
    for (std::size_t j = 0; j < channels; ++j) {
        const double* chan = input + j * h * w;
        for (std::size_t v1 = 0; v1 < k1; ++v1) {
            for (std::size_t v2 = 0; v2 < k2; ++v2) {
                double* orow = dest + ((j * k1 + v1) * k2 + v2) * dest_stride + dest_offset;
                // in-bounds column range: 0 <= u2*s + v2 - pad < w
                const long shift = static_cast<long>(v2) - pad;
                long lo = shift < 0 ? (-shift + s - 1) / s : 0;
                long hi = (static_cast<long>(w) - 1 - shift) / s + 1;
                lo = std::min<long>(std::max<long>(lo, 0), static_cast<long>(q2));
                hi = std::min<long>(std::max<long>(hi, lo), static_cast<long>(q2));
                for (std::size_t u1 = 0; u1 < q1; ++u1) {
                    double* line = orow + u1 * q2;
                    const long r = static_cast<long>(u1 * stride + v1) - pad;
                    if (r < 0 || r >= static_cast<long>(h)) {
                        std::fill(line, line + q2, 0.0);
                        continue;
                    }
                    const double* src = chan + static_cast<std::size_t>(r) * w + shift;
                    std::fill(line, line + lo, 0.0);
                    if (stride == 1) {
                        std::copy(src + lo, src + hi, line + lo);
                    } else {
                        for (long u2 = lo; u2 < hi; ++u2) line[u2] = src[u2 * s];
                    }
                    std::fill(line + hi, line + q2, 0.0);
                }
            }
        }
    }
}

} // namespace detail

/// Rearrange one sample (channels, H, W) into a patch matrix of shape
/// (channels*k1*k2, q1*q2): column (u1,u2) holds exactly the input elements
/// that produce output location (u1,u2). Padded positions contribute zero.
inline Tensor im2col(const Tensor& input, std::size_t k1, std::size_t k2, std::size_t stride,
                     std::size_t padding) {
    input.require_rank(3, "im2col");
    const std::size_t channels = input.dim(0);
    const std::size_t h = input.dim(1);
    const std::size_t w = input.dim(2);
    const std::size_t q1 = conv_output_extent(h, k1, stride, padding);
    const std::size_t q2 = conv_output_extent(w, k2, stride, padding);
    Tensor out({channels * k1 * k2, q1 * q2});
    detail::im2col_into(input.data(), channels, h, w, k1, k2, stride, padding, q1, q2, out.data(),
                        q1 * q2, 0);
    return out;
}

/// Scatter-add adjoint of im2col: every input position accumulates the
/// contributions of all patches containing it.
inline Tensor col2im(const Tensor& cols, const std::vector<std::size_t>& input_shape,
                     std::size_t k1, std::size_t k2, std::size_t stride, std::size_t padding) {
    cols.require_rank(2, "col2im");
    if (input_shape.size() != 3) {
        throw ShapeError("col2im input shape must be rank 3, got " + shape_string(input_shape));
    }
    const std::size_t channels = input_shape[0];
    const std::size_t h = input_shape[1];
    const std::size_t w = input_shape[2];
    const std::size_t q1 = conv_output_extent(h, k1, stride, padding);
    const std::size_t q2 = conv_output_extent(w, k2, stride, padding);
    if (cols.rows() != channels * k1 * k2 || cols.cols() != q1 * q2) {
        throw ShapeError("col2im: patch matrix " + shape_string(cols.shape()) +
                         " does not match geometry for input " + shape_string(input_shape));
    }

    Tensor out(input_shape);
    const long pad = static_cast<long>(padding);
    for (std::size_t j = 0; j < channels; ++j) {
        double* chan = out.data() + j * h * w;
        for (std::size_t v1 = 0; v1 < k1; ++v1) {
            for (std::size_t v2 = 0; v2 < k2; ++v2) {
                const double* crow = cols.data() + ((j * k1 + v1) * k2 + v2) * (q1 * q2);
                for (std::size_t u1 = 0; u1 < q1; ++u1) {
                    const long r = static_cast<long>(u1 * stride + v1) - pad;
                    if (r < 0 || r >= static_cast<long>(h)) continue;
                    for (std::size_t u2 = 0; u2 < q2; ++u2) {
                        const long c = static_cast<long>(u2 * stride + v2) - pad;
                        if (c < 0 || c >= static_cast<long>(w)) continue;
                        chan[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] +=
                            crow[u1 * q2 + u2];
                    }
                }
            }
        }
    }
    return out;
}

} // namespace bmnn
