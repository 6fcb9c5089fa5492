#pragma once

// Finite-difference oracle for layer backward passes. Test-only: independent
// of the analytic code paths it checks.

#include <cmath>
#include <string>
#include <vector>

#include "bmnn/layers.hpp"
#include "bmnn/rng.hpp"
#include "bmnn/tensor.hpp"

namespace bmnn::testing {

struct FdResult {
    std::string label;
    double input_error = 0.0;
    double weight_error = 0.0; // stays 0 for parameter-free layers
};

inline Tensor random_tensor(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

/// Central finite differences (default step 1e-5) of the scalar
/// sum(direction * forward(input)) against the layer's analytic backward.
template <class LayerT>
FdResult finite_difference_check(const LayerT& proto, const Tensor& input, RngStream& rng,
                                 std::string label, double step = 1e-5) {
    LayerT work = proto;
    Tensor out = work.forward(input, true);
    Tensor direction(out.shape());
    for (std::size_t i = 0; i < direction.size(); ++i) direction[i] = rng.normal();
    BackwardResult back = work.backward(direction);

    const auto value = [&](const LayerT& layer, const Tensor& x) {
        LayerT fresh = layer;
        return dot(direction, fresh.forward(x, true));
    };

    FdResult result;
    result.label = std::move(label);

    Tensor fd_input(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        Tensor plus = input;
        Tensor minus = input;
        plus[i] += step;
        minus[i] -= step;
        fd_input[i] = (value(proto, plus) - value(proto, minus)) / (2.0 * step);
    }
    result.input_error = relative_error(fd_input, back.grad_input);

    if constexpr (requires(LayerT& l) { l.weights; }) {
        Tensor fd_w(proto.weights.shape());
        for (std::size_t i = 0; i < fd_w.size(); ++i) {
            LayerT plus = proto;
            LayerT minus = proto;
            plus.weights[i] += step;
            minus.weights[i] -= step;
            fd_w[i] = (value(plus, input) - value(minus, input)) / (2.0 * step);
        }
        result.weight_error = relative_error(fd_w, *back.grad_weights);
    }
    return result;
}

/// Seeded sweep over random geometries for every layer type. Used by the unit
/// suite and by the acceptance gate.
inline std::vector<FdResult> layer_gradient_sweep(std::size_t geometries, std::uint64_t seed) {
    std::vector<FdResult> results;
    RngStream geo(seed, "fd-geometry");
    RngStream val(seed, "fd-values");

    for (std::size_t g = 0; g < geometries; ++g) {
        const std::string tag = "#" + std::to_string(g);
        {
            FullyConnected fc(1 + geo.index(6), 1 + geo.index(6));
            for (std::size_t i = 0; i < fc.weights.size(); ++i) fc.weights[i] = val.normal();
            Tensor x = random_tensor({fc.in_dim(), 1 + geo.index(5)}, val);
            results.push_back(finite_difference_check(fc, x, val, "fc " + tag));
        }
        {
            const std::size_t k = 1 + geo.index(3);
            const std::size_t stride = 1 + geo.index(2);
            const std::size_t padding = geo.index(2);
            const std::size_t q1 = 1 + geo.index(3);
            const std::size_t q2 = 1 + geo.index(3);
            const long h = static_cast<long>((q1 - 1) * stride + k) - 2 * static_cast<long>(padding);
            const long w = static_cast<long>((q2 - 1) * stride + k) - 2 * static_cast<long>(padding);
            if (h > 0 && w > 0) {
                Conv2d cv(1 + geo.index(3), 1 + geo.index(3), k, k, stride, padding);
                for (std::size_t i = 0; i < cv.weights.size(); ++i) cv.weights[i] = val.normal();
                Tensor x = random_tensor({1 + geo.index(3), cv.in_features(),
                                          static_cast<std::size_t>(h),
                                          static_cast<std::size_t>(w)},
                                         val);
                results.push_back(finite_difference_check(cv, x, val, "conv " + tag));
            }
        }
        {
            BatchNorm bn;
            if (g % 2 == 0) {
                Tensor x = random_tensor({1 + geo.index(4), 2 + geo.index(5)}, val);
                results.push_back(finite_difference_check(bn, x, val, "batchnorm2d " + tag));
            } else {
                Tensor x = random_tensor(
                    {2 + geo.index(3), 1 + geo.index(3), 2 + geo.index(2), 2 + geo.index(2)}, val);
                results.push_back(finite_difference_check(bn, x, val, "batchnorm4d " + tag));
            }
        }
        {
            ReLU relu;
            Tensor x = random_tensor({1 + geo.index(5), 1 + geo.index(5)}, val);
            results.push_back(finite_difference_check(relu, x, val, "relu " + tag));
        }
        {
            const std::size_t window = 1 + geo.index(2);
            MaxPool2d pool(window);
            Tensor x = random_tensor({1 + geo.index(3), 1 + geo.index(3),
                                      window * (1 + geo.index(3)), window * (1 + geo.index(3))},
                                     val);
            results.push_back(finite_difference_check(pool, x, val, "maxpool " + tag));
        }
        {
            Flatten flat;
            Tensor x = random_tensor({1 + geo.index(3), 1 + geo.index(3), 1 + geo.index(3),
                                      1 + geo.index(3)},
                                     val);
            results.push_back(finite_difference_check(flat, x, val, "flatten " + tag));
        }
    }
    return results;
}

} // namespace bmnn::testing
