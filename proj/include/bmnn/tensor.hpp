#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bmnn/errors.hpp"

#ifdef BMNN_HAS_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace bmnn {

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

/// Dense row-major tensor of doubles: the single value carrier for
/// activations, weights and gradients. Rank-2 tensors double as matrices.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // rank-2 accessors
    std::size_t rows() const {
        require_rank(2, "rows()");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank(2, "cols()");
        return shape_[1];
    }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    /// Same data, new shape; element count must match.
    Tensor reshaped(std::vector<std::size_t> new_shape) const {
        if (checked_size(new_shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                             shape_string(new_shape));
        }
        return Tensor(std::move(new_shape), data_);
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void require_rank(std::size_t r, const char* what) const {
        if (shape_.size() != r) {
            throw ShapeError(std::string(what) + " needs rank-" + std::to_string(r) +
                             " tensor, got shape " + shape_string(shape_));
        }
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline Tensor identity(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

namespace detail {

inline void matmul_loops(const double* a, const double* b, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

#ifdef BMNN_HAS_CBLAS
inline void pin_blas_threads() {
    // single-threaded GEMM keeps training runs bit-reproducible
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}
#endif

} // namespace detail

/// result[i][j] = sum_k a[i][k] * b[k][j]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    a.require_rank(2, "matmul lhs");
    b.require_rank(2, "matmul rhs");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul dimension mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    Tensor out({a.rows(), b.cols()});
#ifdef BMNN_HAS_CBLAS
    detail::pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(a.rows()),
                static_cast<int>(b.cols()), static_cast<int>(a.cols()), 1.0, a.data(),
                static_cast<int>(a.cols()), b.data(), static_cast<int>(b.cols()), 0.0, out.data(),
                static_cast<int>(b.cols()));
#else
    detail::matmul_loops(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
#endif
    return out;
}

inline Tensor transposed(const Tensor& m) {
    m.require_rank(2, "transpose");
    Tensor out({m.cols(), m.rows()});
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
    }
    return out;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    a.require_rank(2, "matmul_nt lhs");
    b.require_rank(2, "matmul_nt rhs");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt dimension mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
    }
    Tensor out({a.rows(), b.rows()});
#ifdef BMNN_HAS_CBLAS
    detail::pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(a.rows()),
                static_cast<int>(b.rows()), static_cast<int>(a.cols()), 1.0, a.data(),
                static_cast<int>(a.cols()), b.data(), static_cast<int>(b.cols()), 0.0, out.data(),
                static_cast<int>(b.rows()));
#else
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.data() + i * a.cols();
        double* orow = out.data() + i * b.rows();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = b.data() + j * b.cols();
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
            orow[j] = s;
        }
    }
#endif
    return out;
}

/// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    a.require_rank(2, "matmul_tn lhs");
    b.require_rank(2, "matmul_tn rhs");
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn dimension mismatch: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
    }
    Tensor out({a.cols(), b.cols()});
#ifdef BMNN_HAS_CBLAS
    detail::pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(a.cols()),
                static_cast<int>(b.cols()), static_cast<int>(a.rows()), 1.0, a.data(),
                static_cast<int>(a.cols()), b.data(), static_cast<int>(b.cols()), 0.0, out.data(),
                static_cast<int>(b.cols()));
#else
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* arow = a.data() + k * a.cols();
        const double* brow = b.data() + k * b.cols();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = arow[i];
            double* orow = out.data() + i * b.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
        }
    }
#endif
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("dot shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
}

inline Tensor scaled(const Tensor& t, double factor) {
    Tensor out = t;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
    return out;
}

/// y += alpha * x
inline void axpy(double alpha, const Tensor& x, Tensor& y) {
    if (!x.same_shape(y)) {
        throw ShapeError("axpy shape mismatch: " + shape_string(x.shape()) + " vs " +
                         shape_string(y.shape()));
    }
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline double max_abs_difference(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("difference shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// ||a - b||_F / max(||a||_F, ||b||_F), 0 when both are zero.
inline double relative_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("relative_error shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        diff += d * d;
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(std::max(na, nb));
    if (denom == 0.0) return 0.0;
    return std::sqrt(diff) / denom;
}

} // namespace bmnn
