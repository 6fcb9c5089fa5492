#pragma once

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "bmnn/layers.hpp"

namespace bmnn {

struct NamedLayer {
    std::string name;
    Layer layer;
};

/// Raw BP gradients of one mini-batch: one weight gradient per parametric
/// layer (forward order), the loss, and optional per-layer input-gradient
/// snapshots for diagnostics.
struct BackwardBundle {
    double loss = 0.0;
    std::vector<Tensor> grad_weights;
    std::vector<Tensor> delta_inputs;
};

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::size_t count = 0;
};

/// Sequential model: an ordered list of layers feeding a softmax
/// cross-entropy head. Junction shapes are checked as layers are added.
class Network {
public:
    Network(std::vector<std::size_t> input_sample_shape, std::size_t classes)
        : input_shape_(std::move(input_sample_shape)), classes_(classes) {
        if (classes_ < 2) throw ConfigError("network needs at least 2 classes");
        if (input_shape_.empty()) throw ConfigError("network needs a non-empty input shape");
    }

    void add(std::string name, Layer layer) {
        const std::vector<std::size_t>& in =
            layers_.empty() ? input_shape_ : out_shapes_.back();
        std::vector<std::size_t> out;
        try {
            out = layer_output_shape(layer, in);
        } catch (const ShapeError& e) {
            throw ShapeError("layer '" + name + "': " + e.what());
        }
        in_shapes_.push_back(in);
        out_shapes_.push_back(std::move(out));
        layers_.push_back({std::move(name), std::move(layer)});
    }

    /// Whole-network invariants: the head sees exactly `classes` features and
    /// every batch norm sits between a parametric layer and its ReLU.
    void validate() const {
        if (layers_.empty()) throw ConfigError("network has no layers");
        const auto& final_shape = out_shapes_.back();
        if (final_shape.size() != 1 || final_shape[0] != classes_) {
            throw ConfigError("network output shape " + shape_string(final_shape) +
                              " does not match " + std::to_string(classes_) + " classes");
        }
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (!std::holds_alternative<BatchNorm>(layers_[i].layer)) continue;
            const bool after_parametric = i > 0 && is_parametric(layers_[i - 1].layer);
            const bool before_relu =
                i + 1 < layers_.size() && std::holds_alternative<ReLU>(layers_[i + 1].layer);
            if (!after_parametric || !before_relu) {
                throw ConfigError("layer '" + layers_[i].name +
                                  "': batch norm must sit between a parametric layer and its "
                                  "activation");
            }
        }
    }

    std::size_t layer_count() const { return layers_.size(); }
    NamedLayer& named(std::size_t i) { return layers_.at(i); }
    const NamedLayer& named(std::size_t i) const { return layers_.at(i); }
    const std::vector<std::size_t>& input_sample_shape(std::size_t i) const {
        return in_shapes_.at(i);
    }
    const std::vector<std::size_t>& output_sample_shape(std::size_t i) const {
        return out_shapes_.at(i);
    }
    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    std::size_t classes() const { return classes_; }

    std::vector<std::size_t> parametric_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (is_parametric(layers_[i].layer)) out.push_back(i);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& nl : layers_) {
            if (const Tensor* w = layer_weights(nl.layer)) n += w->size();
        }
        return n;
    }

    void initialize_weights(std::uint64_t seed) {
        RngStream rng(seed, "init");
        for (auto& nl : layers_) {
            if (auto* fc = std::get_if<FullyConnected>(&nl.layer)) {
                init_he_normal(fc->weights, fc->in_dim(), rng);
            } else if (auto* cv = std::get_if<Conv2d>(&nl.layer)) {
                init_he_normal(cv->weights, cv->patch_rows(), rng);
            }
        }
    }

    Tensor forward(const Tensor& batch, bool training) {
        Tensor x = batch;
        for (auto& nl : layers_) x = bmnn::forward(nl.layer, x, training);
        return x;
    }

    BackwardBundle forward_backward(const Tensor& batch, const std::vector<int>& labels,
                                    bool capture_deltas = false) {
        Tensor logits = forward(batch, true);
        BackwardBundle bundle;
        auto [loss, grad] = loss_.forward_backward(logits, labels);
        bundle.loss = loss;
        if (capture_deltas) bundle.delta_inputs.resize(layers_.size());

        std::vector<Tensor> reversed;
        Tensor g = std::move(grad);
        for (std::size_t i = layers_.size(); i-- > 0;) {
            BackwardResult r = bmnn::backward(layers_[i].layer, g);
            if (r.grad_weights) reversed.push_back(std::move(*r.grad_weights));
            if (capture_deltas) bundle.delta_inputs[i] = r.grad_input;
            g = std::move(r.grad_input);
        }
        bundle.grad_weights.assign(reversed.rbegin(), reversed.rend());
        return bundle;
    }

    SoftmaxCrossEntropy& loss() { return loss_; }

private:
    std::vector<NamedLayer> layers_;
    std::vector<std::vector<std::size_t>> in_shapes_, out_shapes_;
    std::vector<std::size_t> input_shape_;
    std::size_t classes_;
    SoftmaxCrossEntropy loss_;
};

/// Gather samples (by index) from a sample-first tensor into the layout the
/// network consumes: (features, batch) for rank-2 sources, (batch, ...) for
/// higher ranks.
inline Tensor gather_batch(const Tensor& samples, const std::vector<std::size_t>& indices) {
    if (samples.rank() < 2) throw ShapeError("samples tensor must be at least rank 2");
    const std::size_t count = samples.dim(0);
    const std::size_t features = samples.size() / count;
    for (std::size_t idx : indices) {
        if (idx >= count) throw ShapeError("sample index out of range");
    }
    if (samples.rank() == 2) {
        Tensor out({features, indices.size()});
        for (std::size_t b = 0; b < indices.size(); ++b) {
            for (std::size_t f = 0; f < features; ++f) {
                out.at(f, b) = samples[indices[b] * features + f];
            }
        }
        return out;
    }
    std::vector<std::size_t> shape = samples.shape();
    shape[0] = indices.size();
    Tensor out(std::move(shape));
    for (std::size_t b = 0; b < indices.size(); ++b) {
        std::memcpy(out.data() + b * features, samples.data() + indices[b] * features,
                    features * sizeof(double));
    }
    return out;
}

/// Top-1 accuracy and mean loss over a sample-first tensor, in evaluation
/// mode (batch norm uses running statistics).
inline EvalResult evaluate(Network& net, const Tensor& samples, const std::vector<int>& labels,
                           std::size_t batch_size = 256) {
    const std::size_t count = samples.dim(0);
    if (count == 0 || labels.size() != count) {
        throw ShapeError("evaluate needs a non-empty dataset with matching labels");
    }
    if (batch_size == 0) batch_size = count;
    SoftmaxCrossEntropy loss;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < count; start += batch_size) {
        const std::size_t n = std::min(batch_size, count - start);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        Tensor x = gather_batch(samples, idx);
        Tensor logits = net.forward(x, false);
        std::vector<int> batch_labels(labels.begin() + static_cast<long>(start),
                                      labels.begin() + static_cast<long>(start + n));
        loss_sum += loss.forward_backward(logits, batch_labels).first * static_cast<double>(n);
        for (std::size_t b = 0; b < n; ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.rows(); ++c) {
                if (logits.at(c, b) > logits.at(best, b)) best = c;
            }
            if (static_cast<int>(best) == labels[start + b]) ++correct;
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(count),
            loss_sum / static_cast<double>(count), count};
}

// ---------------------------------------------------------------------------
// architecture construction

struct LayerSpec {
    std::string type;                // fc, conv, batchnorm, relu, maxpool, flatten
    std::vector<std::size_t> params; // fc: in out; conv: in out kernel stride pad; maxpool: window

    bool operator==(const LayerSpec&) const = default;
};

struct ArchSpec {
    std::string preset;              // lenet-bn, lenet-bn-mini, vgg11/13/16/19-bn; "" = custom
    std::vector<LayerSpec> layers;   // used when preset is empty
    std::vector<std::size_t> input_shape = {3, 32, 32};
    std::size_t classes = 10;

    bool operator==(const ArchSpec&) const = default;
};

namespace detail {

inline void append_conv_bn_relu(Network& net, std::size_t index, std::size_t out_features,
                                std::size_t in_features, std::size_t kernel, std::size_t stride,
                                std::size_t padding) {
    const std::string suffix = std::to_string(index);
    net.add("cv" + suffix, Conv2d(out_features, in_features, kernel, kernel, stride, padding));
    net.add("bn_cv" + suffix, BatchNorm{});
    net.add("relu_cv" + suffix, ReLU{});
}

inline void append_fc_bn_relu(Network& net, std::size_t index, std::size_t out_dim,
                              std::size_t in_dim) {
    const std::string suffix = std::to_string(index);
    net.add("fc" + suffix, FullyConnected(out_dim, in_dim));
    net.add("bn_fc" + suffix, BatchNorm{});
    net.add("relu_fc" + suffix, ReLU{});
}

inline Network build_lenet(const ArchSpec& spec, std::size_t features1, std::size_t features2,
                           std::size_t hidden) {
    if (spec.input_shape.size() != 3) {
        throw ConfigError("lenet presets need a (channels, H, W) input shape, got " +
                          shape_string(spec.input_shape));
    }
    Network net(spec.input_shape, spec.classes);
    append_conv_bn_relu(net, 1, features1, spec.input_shape[0], 5, 1, 0);
    net.add("pool1", MaxPool2d(2));
    append_conv_bn_relu(net, 2, features2, features1, 5, 1, 0);
    net.add("pool2", MaxPool2d(2));
    net.add("flatten", Flatten{});
    const auto& flat = net.output_sample_shape(net.layer_count() - 1);
    append_fc_bn_relu(net, 1, hidden, flat[0]);
    append_fc_bn_relu(net, 2, hidden, hidden);
    net.add("fc3", FullyConnected(spec.classes, hidden));
    return net;
}

inline Network build_vgg(const ArchSpec& spec, const std::vector<std::size_t>& config) {
    if (spec.input_shape.size() != 3) {
        throw ConfigError("vgg presets need a (channels, H, W) input shape, got " +
                          shape_string(spec.input_shape));
    }
    Network net(spec.input_shape, spec.classes);
    std::size_t in_features = spec.input_shape[0];
    std::size_t conv_index = 0, pool_index = 0;
    for (std::size_t entry : config) {
        if (entry == 0) {
            net.add("pool" + std::to_string(++pool_index), MaxPool2d(2));
        } else {
            append_conv_bn_relu(net, ++conv_index, entry, in_features, 3, 1, 1);
            in_features = entry;
        }
    }
    net.add("flatten", Flatten{});
    const auto& flat = net.output_sample_shape(net.layer_count() - 1);
    net.add("fc1", FullyConnected(spec.classes, flat[0]));
    return net;
}

inline Network build_custom(const ArchSpec& spec) {
    Network net(spec.input_shape, spec.classes);
    std::size_t fc = 0, cv = 0, bn = 0, relu = 0, pool = 0, flat = 0;
    for (const LayerSpec& ls : spec.layers) {
        if (ls.type == "fc") {
            if (ls.params.size() != 2) throw ConfigError("fc layer needs: fc <in> <out>");
            net.add("fc" + std::to_string(++fc), FullyConnected(ls.params[1], ls.params[0]));
        } else if (ls.type == "conv") {
            if (ls.params.size() != 5) {
                throw ConfigError("conv layer needs: conv <in> <out> <kernel> <stride> <pad>");
            }
            net.add("cv" + std::to_string(++cv),
                    Conv2d(ls.params[1], ls.params[0], ls.params[2], ls.params[2], ls.params[3],
                           ls.params[4]));
        } else if (ls.type == "batchnorm") {
            net.add("bn" + std::to_string(++bn), BatchNorm{});
        } else if (ls.type == "relu") {
            net.add("relu" + std::to_string(++relu), ReLU{});
        } else if (ls.type == "maxpool") {
            if (ls.params.size() != 1) throw ConfigError("maxpool layer needs: maxpool <window>");
            net.add("pool" + std::to_string(++pool), MaxPool2d(ls.params[0]));
        } else if (ls.type == "flatten") {
            net.add("flatten" + std::to_string(++flat), Flatten{});
        } else {
            throw ConfigError("unknown layer type '" + ls.type + "'");
        }
    }
    return net;
}

} // namespace detail

inline const std::vector<std::string>& known_presets() {
    static const std::vector<std::string> presets = {
        "lenet-bn", "lenet-bn-mini", "vgg11-bn", "vgg13-bn", "vgg16-bn", "vgg19-bn"};
    return presets;
}

/// Build, shape-check and initialize a network from a preset name or an
/// explicit layer list. No layer carries a bias; batch norm is parameter-free.
inline Network build_network(const ArchSpec& spec, std::uint64_t seed) {
    Network net = [&] {
        if (spec.preset.empty()) return detail::build_custom(spec);
        if (spec.preset == "lenet-bn") return detail::build_lenet(spec, 20, 50, 500);
        if (spec.preset == "lenet-bn-mini") return detail::build_lenet(spec, 8, 16, 64);
        if (spec.preset == "vgg11-bn") {
            return detail::build_vgg(spec, {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0});
        }
        if (spec.preset == "vgg13-bn") {
            return detail::build_vgg(
                spec, {64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0});
        }
        if (spec.preset == "vgg16-bn") {
            return detail::build_vgg(spec, {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512,
                                            512, 0, 512, 512, 512, 0});
        }
        if (spec.preset == "vgg19-bn") {
            return detail::build_vgg(spec, {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512,
                                            512, 512, 512, 0, 512, 512, 512, 512, 0});
        }
        throw ConfigError("unknown architecture preset '" + spec.preset + "'");
    }();
    net.validate();
    net.initialize_weights(seed);
    return net;
}

} // namespace bmnn
