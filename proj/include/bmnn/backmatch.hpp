#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bmnn/linalg.hpp"
#include "bmnn/network.hpp"

namespace bmnn {

/// Mean squared row norm: (1/rows) * sum_i w_i^T w_i. Zero only for an
/// all-zero matrix; callers must guard before dividing.
inline double row_mean_sq_norm(const Tensor& w) {
    w.require_rank(2, "row_mean_sq_norm");
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * w[i];
    return s / static_cast<double>(w.rows());
}

/// Convolution weights (n, m, k1, k2) stretched to (m, n*k1*k2): one row per
/// input feature, gathering every weight component that touches it.
inline Tensor conv_col_matrix(const Tensor& weights) {
    weights.require_rank(4, "conv_col_matrix");
    const std::size_t n = weights.dim(0);
    const std::size_t m = weights.dim(1);
    const std::size_t k1 = weights.dim(2);
    const std::size_t k2 = weights.dim(3);
    Tensor out({m, n * k1 * k2});
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t v = 0; v < k1 * k2; ++v) {
                out.at(j, k * k1 * k2 + v) = weights[(k * m + j) * k1 * k2 + v];
            }
        }
    }
    return out;
}

/// Running backward factor of the scaling walk. Starts at 1 at the output
/// layer and accumulates per-layer ratios toward the input.
struct FactorState {
    double value = 1.0;

    void reset() { value = 1.0; }

    void accumulate(double ratio) {
        if (!(ratio > 0.0) || !std::isfinite(ratio)) {
            throw NumericError("backward factor ratio must be positive and finite, got " +
                               std::to_string(ratio));
        }
        value *= ratio;
        if (!(value > 0.0) || !std::isfinite(value)) {
            throw NumericError("backward factor left the positive range");
        }
    }
};

/// Per-layer factors of the scaling walk: sharing factor s, ratio r of BP to
/// back-matched input values, and the accumulated factor at the layer's
/// output (before its own ratio is applied).
struct LayerFactorInfo {
    std::size_t layer_index = 0;
    std::string name;
    std::string type;
    double sharing = 1.0;
    double ratio = 1.0;
    double m_before = 1.0;
    std::vector<std::pair<std::string, double>> norms;
};

namespace detail {

inline double guarded_norm(double value, const std::string& who) {
    if (!(value > 0.0)) throw NumericError("degenerate weight: " + who + " has zero norm");
    return value;
}

/// Pooling area of the MaxPool directly downstream of layer `index`
/// (batch norm and ReLU are transparent); 1 when none.
inline double following_pool_area(const Network& net, std::size_t index) {
    for (std::size_t j = index + 1; j < net.layer_count(); ++j) {
        const Layer& l = net.named(j).layer;
        if (std::holds_alternative<BatchNorm>(l) || std::holds_alternative<ReLU>(l)) continue;
        if (const auto* mp = std::get_if<MaxPool2d>(&l)) {
            return static_cast<double>(mp->window * mp->window);
        }
        break;
    }
    return 1.0;
}

/// Mean squared row norm of the nearest parametric layer below `index`, in
/// row form; 0 when there is no parametric producer.
inline double producer_row_norm(const Network& net, std::size_t index, std::string& who) {
    for (std::size_t j = index; j-- > 0;) {
        const NamedLayer& nl = net.named(j);
        if (const auto* fc = std::get_if<FullyConnected>(&nl.layer)) {
            who = nl.name;
            return row_mean_sq_norm(fc->weights);
        }
        if (const auto* cv = std::get_if<Conv2d>(&nl.layer)) {
            who = nl.name;
            return row_mean_sq_norm(cv->row_matrix());
        }
    }
    who.clear();
    return -1.0;
}

} // namespace detail

/// One factor walk from the output layer toward the input: fills s, r and the
/// accumulated backward factor for every layer at the current weights.
inline std::vector<LayerFactorInfo> compute_layer_factors(const Network& net) {
    std::vector<LayerFactorInfo> infos(net.layer_count());
    FactorState m;
    for (std::size_t i = net.layer_count(); i-- > 0;) {
        const NamedLayer& nl = net.named(i);
        LayerFactorInfo& info = infos[i];
        info.layer_index = i;
        info.name = nl.name;
        info.type = layer_type_name(nl.layer);
        info.m_before = m.value;

        if (const auto* fc = std::get_if<FullyConnected>(&nl.layer)) {
            const double n = detail::guarded_norm(row_mean_sq_norm(transposed(fc->weights)),
                                                  nl.name + " transpose");
            info.ratio = n;
            info.norms.emplace_back("transpose_row_mean_sq", n);
        } else if (const auto* cv = std::get_if<Conv2d>(&nl.layer)) {
            const double col_norm = detail::guarded_norm(
                row_mean_sq_norm(conv_col_matrix(cv->weights)), nl.name + " column form");
            const auto& in_shape = net.input_sample_shape(i);
            const auto& out_shape = net.output_sample_shape(i);
            const double in_spatial = static_cast<double>(in_shape[1] * in_shape[2]);
            const double out_spatial = static_cast<double>(out_shape[1] * out_shape[2]);
            const double pool_area = detail::following_pool_area(net, i);
            const double post_pool_spatial = out_spatial / pool_area;
            const double c = in_spatial / post_pool_spatial;
            info.sharing = out_spatial / pool_area;
            info.ratio = col_norm / c;
            info.norms.emplace_back("col_form_row_mean_sq", col_norm);
            info.norms.emplace_back("pool_factor_c", c);
        } else if (std::holds_alternative<BatchNorm>(nl.layer)) {
            std::string producer;
            const double n = detail::producer_row_norm(net, i, producer);
            if (n < 0.0) {
                info.ratio = 1.0; // no parametric producer below this batch norm
            } else {
                info.ratio = 1.0 / detail::guarded_norm(n, producer);
                info.norms.emplace_back("producer_row_mean_sq", n);
            }
        }
        // relu, max pool and flatten keep ratio 1 and stay transparent

        m.accumulate(info.ratio);
    }
    return infos;
}

/// Rescale raw BP weight gradients in place: each parametric layer's gradient
/// becomes grad / (m * s) with the factor accumulated above the layer.
inline void apply_backmatch_scaling(const std::vector<LayerFactorInfo>& infos, const Network& net,
                                    BackwardBundle& bundle) {
    const auto params = net.parametric_indices();
    if (bundle.grad_weights.size() != params.size()) {
        throw ShapeError("gradient bundle does not match the network's parametric layers");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        const LayerFactorInfo& info = infos.at(params[p]);
        const double divisor = info.m_before * info.sharing;
        if (!(divisor > 0.0) || !std::isfinite(divisor)) {
            throw NumericError("corrupted factor state at layer '" + info.name + "'");
        }
        Tensor& g = bundle.grad_weights[p];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] /= divisor;
    }
}

inline void apply_backmatch_scaling(const Network& net, BackwardBundle& bundle) {
    apply_backmatch_scaling(compute_layer_factors(net), net, bundle);
}

// ---------------------------------------------------------------------------
// exact least-squares oracles

/// Exact back-matched values and the residuals of the two least-squares
/// problems they solve.
struct ExactBackmatchResult {
    Tensor delta_prime_w;
    Tensor delta_prime_a;
    double weight_residual = 0.0; // E_x ||db - d'W a||^2
    double input_residual = 0.0;  // E_x sum_j ||db - w_j d'a_j||^2
};

/// Fully connected oracle. The input side divides each BP delta row by the
/// squared norm of the matching weight column; the weight side solves
/// (E a a^T + ridge I) X = E[a db^T] through the normal equations.
inline ExactBackmatchResult exact_backmatch_fc(const Tensor& weights, const Tensor& a_batch,
                                               const Tensor& delta_b_batch, double ridge = 0.0) {
    weights.require_rank(2, "exact_backmatch_fc weights");
    a_batch.require_rank(2, "exact_backmatch_fc input batch");
    delta_b_batch.require_rank(2, "exact_backmatch_fc guiding signal");
    const std::size_t out_dim = weights.rows();
    const std::size_t in_dim = weights.cols();
    const std::size_t batch = a_batch.cols();
    if (a_batch.rows() != in_dim || delta_b_batch.rows() != out_dim ||
        delta_b_batch.cols() != batch) {
        throw ShapeError("exact_backmatch_fc: inconsistent shapes W" +
                         shape_string(weights.shape()) + ", a" + shape_string(a_batch.shape()) +
                         ", db" + shape_string(delta_b_batch.shape()));
    }

    ExactBackmatchResult result;

    // input side
    Tensor bp_delta_a = matmul(transposed(weights), delta_b_batch);
    std::vector<double> column_sq(in_dim, 0.0);
    for (std::size_t k = 0; k < out_dim; ++k) {
        for (std::size_t j = 0; j < in_dim; ++j) {
            column_sq[j] += weights.at(k, j) * weights.at(k, j);
        }
    }
    result.delta_prime_a = Tensor({in_dim, batch});
    for (std::size_t j = 0; j < in_dim; ++j) {
        if (column_sq[j] == 0.0) {
            throw NumericError("exact_backmatch_fc: weight column of neuron " +
                               std::to_string(j) + " is zero");
        }
        for (std::size_t x = 0; x < batch; ++x) {
            result.delta_prime_a.at(j, x) = bp_delta_a.at(j, x) / column_sq[j];
        }
    }

    // weight side: scale by 1/sqrt(batch) so the normal equations read
    // (E a a^T + ridge I) X = E[a db^T]
    const double scale = 1.0 / std::sqrt(static_cast<double>(batch));
    Tensor design = scaled(transposed(a_batch), scale);
    Tensor target = scaled(transposed(delta_b_batch), scale);
    result.delta_prime_w = transposed(solve_least_squares(design, target, ridge));

    // residuals
    Tensor fit = matmul(result.delta_prime_w, a_batch);
    for (std::size_t i = 0; i < fit.size(); ++i) {
        const double d = delta_b_batch[i] - fit[i];
        result.weight_residual += d * d;
    }
    result.weight_residual /= static_cast<double>(batch);
    for (std::size_t j = 0; j < in_dim; ++j) {
        for (std::size_t x = 0; x < batch; ++x) {
            for (std::size_t k = 0; k < out_dim; ++k) {
                const double d =
                    delta_b_batch.at(k, x) - weights.at(k, j) * result.delta_prime_a.at(j, x);
                result.input_residual += d * d;
            }
        }
    }
    result.input_residual /= static_cast<double>(batch);
    return result;
}

/// Convolutional oracle on the im2col system. Guarded to small geometries:
/// the normal equations are (m*k1*k2)^2.
inline ExactBackmatchResult exact_backmatch_conv(const Conv2d& conv, const Tensor& a_batch,
                                                 const Tensor& delta_b_batch, double ridge = 0.0) {
    a_batch.require_rank(4, "exact_backmatch_conv input batch");
    delta_b_batch.require_rank(4, "exact_backmatch_conv guiding signal");
    const std::size_t rows = conv.patch_rows();
    if (rows > 512) {
        throw ConfigError("exact_backmatch_conv: geometry too large for the oracle (m*k1*k2 = " +
                          std::to_string(rows) + " > 512)");
    }
    const std::size_t batch = a_batch.dim(0);
    const std::size_t m = conv.in_features();
    const std::size_t n = conv.out_features();
    const std::size_t h = a_batch.dim(2);
    const std::size_t w = a_batch.dim(3);
    const std::size_t q1 = conv_output_extent(h, conv.kernel_h(), conv.stride, conv.padding);
    const std::size_t q2 = conv_output_extent(w, conv.kernel_w(), conv.stride, conv.padding);
    const std::size_t q = q1 * q2;
    if (a_batch.dim(1) != m || delta_b_batch.dim(0) != batch || delta_b_batch.dim(1) != n ||
        delta_b_batch.dim(2) != q1 || delta_b_batch.dim(3) != q2) {
        throw ShapeError("exact_backmatch_conv: inconsistent shapes a" +
                         shape_string(a_batch.shape()) + ", db" +
                         shape_string(delta_b_batch.shape()));
    }

    ExactBackmatchResult result;

    // weight side
    Tensor patches({rows, batch * q});
    Tensor cols_delta({n, batch * q});
    Tensor one({m, h, w});
    const std::size_t sample = m * h * w;
    for (std::size_t b = 0; b < batch; ++b) {
        std::memcpy(one.data(), a_batch.data() + b * sample, sample * sizeof(double));
        Tensor cols = im2col(one, conv.kernel_h(), conv.kernel_w(), conv.stride, conv.padding);
        for (std::size_t r = 0; r < rows; ++r) {
            std::memcpy(patches.data() + r * (batch * q) + b * q, cols.data() + r * q,
                        q * sizeof(double));
        }
        for (std::size_t k = 0; k < n; ++k) {
            std::memcpy(cols_delta.data() + k * (batch * q) + b * q,
                        delta_b_batch.data() + (b * n + k) * q, q * sizeof(double));
        }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(batch));
    Tensor design = scaled(transposed(patches), scale);
    Tensor target = scaled(transposed(cols_delta), scale);
    Tensor w_row = transposed(solve_least_squares(design, target, ridge));
    result.delta_prime_w =
        w_row.reshaped({n, m, conv.kernel_h(), conv.kernel_w()});

    Tensor fit = matmul(w_row, patches);
    for (std::size_t i = 0; i < fit.size(); ++i) {
        const double d = cols_delta[i] - fit[i];
        result.weight_residual += d * d;
    }
    result.weight_residual /= static_cast<double>(batch);

    // input side: each location divides the BP value by the squared norm of
    // its interaction vector (all weight components touching that location)
    const long pad = static_cast<long>(conv.padding);
    const long s = static_cast<long>(conv.stride);
    result.delta_prime_a = Tensor(a_batch.shape());
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t u1 = 0; u1 < h; ++u1) {
            for (std::size_t u2 = 0; u2 < w; ++u2) {
                double denom = 0.0;
                // gather (k, o1, o2, v1, v2) pairs interacting with (j, u1, u2)
                std::vector<std::array<std::size_t, 3>> taps; // weight idx, o1, o2
                for (std::size_t v1 = 0; v1 < conv.kernel_h(); ++v1) {
                    const long t1 = static_cast<long>(u1) + pad - static_cast<long>(v1);
                    if (t1 < 0 || t1 % s != 0 || t1 / s >= static_cast<long>(q1)) continue;
                    for (std::size_t v2 = 0; v2 < conv.kernel_w(); ++v2) {
                        const long t2 = static_cast<long>(u2) + pad - static_cast<long>(v2);
                        if (t2 < 0 || t2 % s != 0 || t2 / s >= static_cast<long>(q2)) continue;
                        for (std::size_t k = 0; k < n; ++k) {
                            const std::size_t widx =
                                ((k * m + j) * conv.kernel_h() + v1) * conv.kernel_w() + v2;
                            denom += conv.weights[widx] * conv.weights[widx];
                            taps.push_back({widx, static_cast<std::size_t>(t1 / s),
                                            static_cast<std::size_t>(t2 / s)});
                        }
                    }
                }
                if (denom == 0.0) {
                    throw NumericError("exact_backmatch_conv: interaction vector of input (" +
                                       std::to_string(j) + ", " + std::to_string(u1) + ", " +
                                       std::to_string(u2) + ") is zero");
                }
                for (std::size_t b = 0; b < batch; ++b) {
                    double numer = 0.0;
                    for (const auto& tap : taps) {
                        const std::size_t k = tap[0] / (m * conv.kernel_h() * conv.kernel_w());
                        numer += conv.weights[tap[0]] *
                                 delta_b_batch[((b * n + k) * q1 + tap[1]) * q2 + tap[2]];
                    }
                    const double dpa = numer / denom;
                    result.delta_prime_a[((b * m + j) * h + u1) * w + u2] = dpa;
                    for (const auto& tap : taps) {
                        const std::size_t k = tap[0] / (m * conv.kernel_h() * conv.kernel_w());
                        const double d =
                            delta_b_batch[((b * n + k) * q1 + tap[1]) * q2 + tap[2]] -
                            conv.weights[tap[0]] * dpa;
                        result.input_residual += d * d;
                    }
                }
            }
        }
    }
    result.input_residual /= static_cast<double>(batch);
    return result;
}

/// Batch with E[a a^T] equal to the identity: orthonormalized rows scaled by
/// sqrt(batch). Needs batch >= dim.
inline Tensor whitened_batch(std::size_t dim, std::size_t batch, RngStream& rng) {
    if (batch < dim) {
        throw ShapeError("whitened batch needs at least as many samples as dimensions");
    }
    Tensor a({dim, batch});
    for (std::size_t i = 0; i < dim; ++i) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            for (std::size_t x = 0; x < batch; ++x) a.at(i, x) = rng.normal();
            // modified Gram-Schmidt against the previous rows
            for (std::size_t p = 0; p < i; ++p) {
                double proj = 0.0;
                for (std::size_t x = 0; x < batch; ++x) proj += a.at(i, x) * a.at(p, x);
                for (std::size_t x = 0; x < batch; ++x) a.at(i, x) -= proj * a.at(p, x);
            }
            double norm = 0.0;
            for (std::size_t x = 0; x < batch; ++x) norm += a.at(i, x) * a.at(i, x);
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (std::size_t x = 0; x < batch; ++x) a.at(i, x) /= norm;
                break;
            }
        }
    }
    const double root = std::sqrt(static_cast<double>(batch));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= root;
    return a;
}

/// Closed-form scaling coefficients of the five parametric layers of the
/// canonical 32x32 lenet presets, written out as products of the layer norms.
/// Shown by the factor-verification command next to the walk's values.
inline std::vector<std::pair<std::string, double>> lenet_appendix_coefficients(
    const Network& net) {
    const auto find = [&](const std::string& name) -> const Layer& {
        for (std::size_t i = 0; i < net.layer_count(); ++i) {
            if (net.named(i).name == name) return net.named(i).layer;
        }
        throw ConfigError("closed-form coefficients need the lenet layer '" + name + "'");
    };
    const auto& cv1 = std::get<Conv2d>(find("cv1"));
    const auto& cv2 = std::get<Conv2d>(find("cv2"));
    const auto& fc1 = std::get<FullyConnected>(find("fc1"));
    const auto& fc2 = std::get<FullyConnected>(find("fc2"));
    const auto& fc3 = std::get<FullyConnected>(find("fc3"));

    const double fc3t = row_mean_sq_norm(transposed(fc3.weights));
    const double fc2r = row_mean_sq_norm(fc2.weights);
    const double fc2t = row_mean_sq_norm(transposed(fc2.weights));
    const double fc1r = row_mean_sq_norm(fc1.weights);
    const double fc1t = row_mean_sq_norm(transposed(fc1.weights));
    const double cv2row = row_mean_sq_norm(cv2.row_matrix());
    const double cv2col = row_mean_sq_norm(conv_col_matrix(cv2.weights));
    const double cv1row = row_mean_sq_norm(cv1.row_matrix());

    return {
        {"fc3", 1.0},
        {"fc2", fc2r / fc3t},
        {"fc1", (fc2r * fc1r) / (fc3t * fc2t)},
        {"cv2", (fc2r * fc1r * cv2row) / (25.0 * fc3t * fc2t * fc1t)},
        {"cv1", (fc2r * fc1r * cv2row * cv1row) / (25.0 * fc3t * fc2t * fc1t * cv2col)},
    };
}

} // namespace bmnn
