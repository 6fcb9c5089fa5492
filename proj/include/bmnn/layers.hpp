#pragma once

#include <cstring>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "bmnn/linalg.hpp"
#include "bmnn/rng.hpp"
#include "bmnn/tensor.hpp"

namespace bmnn {

struct BackwardResult {
    Tensor grad_input;
    std::optional<Tensor> grad_weights;
};

/// Fully connected layer b = W a with no bias term. Activations are
/// (features, batch) matrices.
struct FullyConnected {
    Tensor weights; // (out_dim, in_dim)

    FullyConnected(std::size_t out_dim, std::size_t in_dim) : weights({out_dim, in_dim}) {}

    std::size_t out_dim() const { return weights.dim(0); }
    std::size_t in_dim() const { return weights.dim(1); }

    Tensor forward(const Tensor& input, bool training) {
        input.require_rank(2, "fully connected input");
        if (input.rows() != in_dim()) {
            throw ShapeError("fully connected expects " + std::to_string(in_dim()) +
                             " input features, got " + std::to_string(input.rows()));
        }
        if (training) {
            input_cache_ = input;
            has_cache_ = true;
        }
        return matmul(weights, input);
    }

    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("fully connected backward before training forward");
        grad_output.require_rank(2, "fully connected grad");
        if (grad_output.rows() != out_dim() || grad_output.cols() != input_cache_.cols()) {
            throw ShapeError("fully connected grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached batch");
        }
        Tensor grad_input = matmul_tn(weights, grad_output);
        Tensor grad_w = matmul_nt(grad_output, input_cache_);
        return {std::move(grad_input), std::move(grad_w)};
    }

    Tensor input_cache_;
    bool has_cache_ = false;
};

/// 2-d convolution without bias, computed as one matrix multiply per batch via
/// im2col. Activations are (batch, channels, H, W) tensors.
struct Conv2d {
    Tensor weights; // (out_features, in_features, k1, k2)
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2d(std::size_t out_features, std::size_t in_features, std::size_t k1, std::size_t k2,
           std::size_t stride_in = 1, std::size_t padding_in = 0)
        : weights({out_features, in_features, k1, k2}), stride(stride_in), padding(padding_in) {}

    std::size_t out_features() const { return weights.dim(0); }
    std::size_t in_features() const { return weights.dim(1); }
    std::size_t kernel_h() const { return weights.dim(2); }
    std::size_t kernel_w() const { return weights.dim(3); }
    std::size_t patch_rows() const { return in_features() * kernel_h() * kernel_w(); }

    /// Weights flattened to (out_features, in_features*k1*k2): one row per
    /// output feature.
    Tensor row_matrix() const { return weights.reshaped({out_features(), patch_rows()}); }

    Tensor forward(const Tensor& input, bool training) {
        input.require_rank(4, "conv input");
        if (input.dim(1) != in_features()) {
            throw ShapeError("conv expects " + std::to_string(in_features()) +
                             " input features, got " + std::to_string(input.dim(1)));
        }
        const std::size_t batch = input.dim(0);
        const std::size_t h = input.dim(2);
        const std::size_t w = input.dim(3);
        const std::size_t q1 = conv_output_extent(h, kernel_h(), stride, padding);
        const std::size_t q2 = conv_output_extent(w, kernel_w(), stride, padding);
        const std::size_t q = q1 * q2;
        const std::size_t rows = patch_rows();
        const std::size_t sample = in_features() * h * w;

        Tensor i2c({rows, batch * q});
        for (std::size_t b = 0; b < batch; ++b) {
            detail::im2col_into(input.data() + b * sample, in_features(), h, w, kernel_h(),
                                kernel_w(), stride, padding, q1, q2, i2c.data(), batch * q,
                                b * q);
        }

        Tensor out_cols = matmul(row_matrix(), i2c); // (n, batch*q)
        Tensor out({batch, out_features(), q1, q2});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < out_features(); ++k) {
                std::memcpy(out.data() + (b * out_features() + k) * q,
                            out_cols.data() + k * (batch * q) + b * q, q * sizeof(double));
            }
        }

        if (training) {
            input_cache_ = input;
            i2c_cache_ = std::move(i2c);
            q1_ = q1;
            q2_ = q2;
            has_cache_ = true;
        }
        return out;
    }

    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("conv backward before training forward");
        grad_output.require_rank(4, "conv grad");
        const std::size_t batch = input_cache_.dim(0);
        const std::size_t q = q1_ * q2_;
        if (grad_output.dim(0) != batch || grad_output.dim(1) != out_features() ||
            grad_output.dim(2) != q1_ || grad_output.dim(3) != q2_) {
            throw ShapeError("conv grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached forward");
        }

        Tensor delta_cols({out_features(), batch * q});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < out_features(); ++k) {
                std::memcpy(delta_cols.data() + k * (batch * q) + b * q,
                            grad_output.data() + (b * out_features() + k) * q, q * sizeof(double));
            }
        }

        Tensor grad_w_row = matmul_nt(delta_cols, i2c_cache_); // (n, m*k1*k2)
        Tensor grad_w = grad_w_row.reshaped(
            {out_features(), in_features(), kernel_h(), kernel_w()});

        Tensor delta_patches = matmul_tn(row_matrix(), delta_cols); // (rows, batch*q)
        const std::size_t h = input_cache_.dim(2);
        const std::size_t w = input_cache_.dim(3);
        const std::size_t rows = patch_rows();
        const std::size_t sample = in_features() * h * w;
        Tensor grad_input({batch, in_features(), h, w});
        Tensor block({rows, q});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t r = 0; r < rows; ++r) {
                std::memcpy(block.data() + r * q, delta_patches.data() + r * (batch * q) + b * q,
                            q * sizeof(double));
            }
            Tensor one = col2im(block, {in_features(), h, w}, kernel_h(), kernel_w(), stride,
                                padding);
            std::memcpy(grad_input.data() + b * sample, one.data(), sample * sizeof(double));
        }
        return {std::move(grad_input), std::move(grad_w)};
    }

    Tensor input_cache_;  // (batch, m, H, W)
    Tensor i2c_cache_;    // (m*k1*k2, batch*q1*q2)
    std::size_t q1_ = 0, q2_ = 0;
    bool has_cache_ = false;
};

/// Parameter-free batch normalization (affine transform fixed to identity),
/// normalizing per channel over the batch (and spatial positions for rank-4
/// inputs). Evaluation mode uses running statistics.
struct BatchNorm {
    double eps = 1e-5;
    double momentum = 0.1;

    static void channel_dims(const Tensor& x, std::size_t& outer, std::size_t& channels,
                             std::size_t& inner) {
        if (x.rank() == 2) {
            outer = 1;
            channels = x.dim(0);
            inner = x.dim(1);
        } else if (x.rank() == 4) {
            outer = x.dim(0);
            channels = x.dim(1);
            inner = x.dim(2) * x.dim(3);
        } else {
            throw ShapeError("batch norm expects rank-2 or rank-4 input, got " +
                             shape_string(x.shape()));
        }
    }

    Tensor forward(const Tensor& input, bool training) {
        std::size_t outer, channels, inner;
        channel_dims(input, outer, channels, inner);
        ensure_running(channels);

        Tensor out(input.shape());
        if (training) {
            const std::size_t samples = input.rank() == 2 ? inner : outer;
            if (samples < 2) {
                throw ShapeError("batch norm training needs a batch of at least 2, got " +
                                 std::to_string(samples));
            }
            const std::size_t n = outer * inner;
            batch_mean_.assign(channels, 0.0);
            batch_var_.assign(channels, 0.0);
            inv_std_.assign(channels, 0.0);
            for (std::size_t c = 0; c < channels; ++c) {
                double sum = 0.0;
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* p = input.data() + (o * channels + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) sum += p[i];
                }
                const double mean = sum / static_cast<double>(n);
                double var = 0.0;
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* p = input.data() + (o * channels + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        const double d = p[i] - mean;
                        var += d * d;
                    }
                }
                var /= static_cast<double>(n);
                batch_mean_[c] = mean;
                batch_var_[c] = var;
                inv_std_[c] = 1.0 / std::sqrt(var + eps);
                running_mean_[c] = (1.0 - momentum) * running_mean_[c] + momentum * mean;
                running_var_[c] = (1.0 - momentum) * running_var_[c] + momentum * var;
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* p = input.data() + (o * channels + c) * inner;
                    double* q = out.data() + (o * channels + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) q[i] = (p[i] - mean) * inv_std_[c];
                }
            }
            normalized_cache_ = out;
            has_cache_ = true;
        } else {
            for (std::size_t c = 0; c < channels; ++c) {
                const double mean = running_mean_[c];
                const double scale = 1.0 / std::sqrt(running_var_[c] + eps);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* p = input.data() + (o * channels + c) * inner;
                    double* q = out.data() + (o * channels + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) q[i] = (p[i] - mean) * scale;
                }
            }
        }
        return out;
    }

    /// Exact gradient including the mean and variance paths:
    /// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) per channel.
    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("batch norm backward before training forward");
        if (!grad_output.same_shape(normalized_cache_)) {
            throw ShapeError("batch norm grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached forward");
        }
        std::size_t outer, channels, inner;
        channel_dims(grad_output, outer, channels, inner);
        const double n = static_cast<double>(outer * inner);

        Tensor grad_input(grad_output.shape());
        for (std::size_t c = 0; c < channels; ++c) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t base = (o * channels + c) * inner;
                const double* g = grad_output.data() + base;
                const double* xh = normalized_cache_.data() + base;
                for (std::size_t i = 0; i < inner; ++i) {
                    s1 += g[i];
                    s2 += g[i] * xh[i];
                }
            }
            const double m1 = s1 / n;
            const double m2 = s2 / n;
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t base = (o * channels + c) * inner;
                const double* g = grad_output.data() + base;
                const double* xh = normalized_cache_.data() + base;
                double* out = grad_input.data() + base;
                for (std::size_t i = 0; i < inner; ++i) {
                    out[i] = inv_std_[c] * (g[i] - m1 - xh[i] * m2);
                }
            }
        }
        return {std::move(grad_input), std::nullopt};
    }

    void ensure_running(std::size_t channels) {
        if (running_mean_.size() != channels) {
            running_mean_.assign(channels, 0.0);
            running_var_.assign(channels, 1.0);
        }
    }

    std::vector<double> running_mean_, running_var_;
    std::vector<double> batch_mean_, batch_var_, inv_std_;
    Tensor normalized_cache_;
    bool has_cache_ = false;
};

struct ReLU {
    Tensor forward(const Tensor& input, bool training) {
        Tensor out(input.shape());
        Tensor mask(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) {
            const bool on = input[i] >= 0.0;
            mask[i] = on ? 1.0 : 0.0;
            out[i] = on ? input[i] : 0.0;
        }
        if (training) {
            mask_ = std::move(mask);
            has_cache_ = true;
        }
        return out;
    }

    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("relu backward before training forward");
        if (!grad_output.same_shape(mask_)) {
            throw ShapeError("relu grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached forward");
        }
        Tensor grad_input(grad_output.shape());
        for (std::size_t i = 0; i < grad_input.size(); ++i) {
            grad_input[i] = grad_output[i] * mask_[i];
        }
        return {std::move(grad_input), std::nullopt};
    }

    Tensor mask_;
    bool has_cache_ = false;
};

/// Square max pooling with stride equal to the window. Ties break toward the
/// first position in row-major scan order.
struct MaxPool2d {
    std::size_t window = 2;

    explicit MaxPool2d(std::size_t window_in = 2) : window(window_in) {}

    Tensor forward(const Tensor& input, bool training) {
        input.require_rank(4, "max pool input");
        const std::size_t batch = input.dim(0);
        const std::size_t channels = input.dim(1);
        const std::size_t h = input.dim(2);
        const std::size_t w = input.dim(3);
        if (window == 0 || h % window != 0 || w % window != 0) {
            throw ShapeError("pool window " + std::to_string(window) +
                             " does not divide spatial extent " + std::to_string(h) + "x" +
                             std::to_string(w));
        }
        const std::size_t oh = h / window;
        const std::size_t ow = w / window;
        Tensor out({batch, channels, oh, ow});
        std::vector<std::size_t> argmax(out.size());
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t plane = (b * channels + c) * h * w;
                for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                        std::size_t best = plane + (i * window) * w + j * window;
                        double bestv = input[best];
                        for (std::size_t di = 0; di < window; ++di) {
                            for (std::size_t dj = 0; dj < window; ++dj) {
                                const std::size_t idx =
                                    plane + (i * window + di) * w + (j * window + dj);
                                if (input[idx] > bestv) {
                                    bestv = input[idx];
                                    best = idx;
                                }
                            }
                        }
                        const std::size_t oidx = ((b * channels + c) * oh + i) * ow + j;
                        out[oidx] = bestv;
                        argmax[oidx] = best;
                    }
                }
            }
        }
        if (training) {
            argmax_ = std::move(argmax);
            in_shape_ = input.shape();
            has_cache_ = true;
        }
        return out;
    }

    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("max pool backward before training forward");
        if (grad_output.size() != argmax_.size()) {
            throw ShapeError("max pool grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached forward");
        }
        Tensor grad_input(in_shape_);
        for (std::size_t i = 0; i < grad_output.size(); ++i) {
            grad_input[argmax_[i]] += grad_output[i];
        }
        return {std::move(grad_input), std::nullopt};
    }

    std::vector<std::size_t> argmax_;
    std::vector<std::size_t> in_shape_;
    bool has_cache_ = false;
};

/// (batch, c, h, w) -> (c*h*w, batch) transition between convolutional and
/// fully connected stages.
struct Flatten {
    Tensor forward(const Tensor& input, bool training) {
        if (input.rank() < 3) {
            throw ShapeError("flatten expects a sample-first tensor of rank >= 3, got " +
                             shape_string(input.shape()));
        }
        const std::size_t batch = input.dim(0);
        const std::size_t features = input.size() / batch;
        Tensor out({features, batch});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t f = 0; f < features; ++f) {
                out[f * batch + b] = input[b * features + f];
            }
        }
        if (training) {
            in_shape_ = input.shape();
            has_cache_ = true;
        }
        return out;
    }

    BackwardResult backward(const Tensor& grad_output) {
        if (!has_cache_) throw CacheError("flatten backward before training forward");
        grad_output.require_rank(2, "flatten grad");
        Tensor grad_input(in_shape_);
        const std::size_t batch = in_shape_[0];
        const std::size_t features = grad_input.size() / batch;
        if (grad_output.rows() != features || grad_output.cols() != batch) {
            throw ShapeError("flatten grad shape " + shape_string(grad_output.shape()) +
                             " does not match cached forward");
        }
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t f = 0; f < features; ++f) {
                grad_input[b * features + f] = grad_output[f * batch + b];
            }
        }
        return {std::move(grad_input), std::nullopt};
    }

    std::vector<std::size_t> in_shape_;
    bool has_cache_ = false;
};

using Layer = std::variant<FullyConnected, Conv2d, BatchNorm, ReLU, MaxPool2d, Flatten>;

inline Tensor forward(Layer& layer, const Tensor& input, bool training) {
    return std::visit([&](auto& l) { return l.forward(input, training); }, layer);
}

inline BackwardResult backward(Layer& layer, const Tensor& grad_output) {
    return std::visit([&](auto& l) { return l.backward(grad_output); }, layer);
}

inline bool is_parametric(const Layer& layer) {
    return std::holds_alternative<FullyConnected>(layer) || std::holds_alternative<Conv2d>(layer);
}

inline const char* layer_type_name(const Layer& layer) {
    if (std::holds_alternative<FullyConnected>(layer)) return "fc";
    if (std::holds_alternative<Conv2d>(layer)) return "conv";
    if (std::holds_alternative<BatchNorm>(layer)) return "batchnorm";
    if (std::holds_alternative<ReLU>(layer)) return "relu";
    if (std::holds_alternative<MaxPool2d>(layer)) return "maxpool";
    return "flatten";
}

inline Tensor* layer_weights(Layer& layer) {
    if (auto* fc = std::get_if<FullyConnected>(&layer)) return &fc->weights;
    if (auto* cv = std::get_if<Conv2d>(&layer)) return &cv->weights;
    return nullptr;
}

inline const Tensor* layer_weights(const Layer& layer) {
    if (const auto* fc = std::get_if<FullyConnected>(&layer)) return &fc->weights;
    if (const auto* cv = std::get_if<Conv2d>(&layer)) return &cv->weights;
    return nullptr;
}

/// Shape of one sample after the layer; rank-1 shapes stand for (features,
/// batch) matrices at run time, higher ranks for sample-first tensors.
inline std::vector<std::size_t> layer_output_shape(const Layer& layer,
                                                   const std::vector<std::size_t>& in) {
    if (const auto* fc = std::get_if<FullyConnected>(&layer)) {
        if (in.size() != 1 || in[0] != fc->in_dim()) {
            throw ShapeError("fully connected expects sample shape (" +
                             std::to_string(fc->in_dim()) + "), got " + shape_string(in));
        }
        return {fc->out_dim()};
    }
    if (const auto* cv = std::get_if<Conv2d>(&layer)) {
        if (in.size() != 3 || in[0] != cv->in_features()) {
            throw ShapeError("conv expects sample shape (" + std::to_string(cv->in_features()) +
                             ", H, W), got " + shape_string(in));
        }
        return {cv->out_features(),
                conv_output_extent(in[1], cv->kernel_h(), cv->stride, cv->padding),
                conv_output_extent(in[2], cv->kernel_w(), cv->stride, cv->padding)};
    }
    if (const auto* mp = std::get_if<MaxPool2d>(&layer)) {
        if (in.size() != 3 || in[1] % mp->window != 0 || in[2] % mp->window != 0) {
            throw ShapeError("pool window " + std::to_string(mp->window) +
                             " incompatible with sample shape " + shape_string(in));
        }
        return {in[0], in[1] / mp->window, in[2] / mp->window};
    }
    if (std::holds_alternative<Flatten>(layer)) {
        if (in.size() < 2) {
            throw ShapeError("flatten expects sample rank >= 2, got " + shape_string(in));
        }
        std::size_t f = 1;
        for (std::size_t d : in) f *= d;
        return {f};
    }
    // batch norm and relu are shape preserving
    return in;
}

/// Softmax cross-entropy over (classes, batch) logits; returns the mean loss
/// and its gradient (softmax - onehot) / batch.
struct SoftmaxCrossEntropy {
    std::pair<double, Tensor> forward_backward(const Tensor& logits,
                                               const std::vector<int>& labels) {
        logits.require_rank(2, "loss logits");
        const std::size_t classes = logits.rows();
        const std::size_t batch = logits.cols();
        if (labels.size() != batch) {
            throw ShapeError("loss got " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(batch));
        }
        probabilities_ = Tensor({classes, batch});
        Tensor grad({classes, batch});
        double loss = 0.0;
        for (std::size_t x = 0; x < batch; ++x) {
            const int label = labels[x];
            if (label < 0 || static_cast<std::size_t>(label) >= classes) {
                throw ShapeError("label " + std::to_string(label) + " out of range [0, " +
                                 std::to_string(classes) + ")");
            }
            double maxv = logits.at(0, x);
            for (std::size_t c = 1; c < classes; ++c) maxv = std::max(maxv, logits.at(c, x));
            double denom = 0.0;
            for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits.at(c, x) - maxv);
            const double log_denom = std::log(denom);
            for (std::size_t c = 0; c < classes; ++c) {
                const double p = std::exp(logits.at(c, x) - maxv) / denom;
                probabilities_.at(c, x) = p;
                grad.at(c, x) = p / static_cast<double>(batch);
            }
            grad.at(static_cast<std::size_t>(label), x) -= 1.0 / static_cast<double>(batch);
            loss -= logits.at(static_cast<std::size_t>(label), x) - maxv - log_denom;
        }
        return {loss / static_cast<double>(batch), std::move(grad)};
    }

    Tensor probabilities_; // (classes, batch) from the last call
};

/// Gaussian fan-in initialization: entries i.i.d. normal with standard
/// deviation sqrt(2 / fan_in), which keeps row norms near unit length.
inline void init_he_normal(Tensor& weights, std::size_t fan_in, RngStream& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = rng.normal(0.0, stddev);
}

} // namespace bmnn
