#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bmnn/backmatch.hpp"
#include "bmnn/network.hpp"

namespace bmnn {

enum class Rule { SGD, BackMatch, LARS, LSALR };

inline const char* rule_name(Rule rule) {
    switch (rule) {
        case Rule::SGD: return "sgd";
        case Rule::BackMatch: return "backmatch";
        case Rule::LARS: return "lars";
        case Rule::LSALR: return "lsalr";
    }
    return "sgd";
}

inline Rule parse_rule(const std::string& name) {
    if (name == "sgd") return Rule::SGD;
    if (name == "backmatch") return Rule::BackMatch;
    if (name == "lars") return Rule::LARS;
    if (name == "lsalr") return Rule::LSALR;
    throw ConfigError("unknown optimizer rule '" + name +
                      "' (expected sgd, backmatch, lars or lsalr)");
}

/// Learning-rate schedule: multiplier applied from the trigger epoch onward.
struct Schedule {
    std::vector<std::pair<std::size_t, double>> entries;
};

struct OptimizerConfig {
    Rule rule = Rule::SGD;
    double learning_rate = 0.1;
    double momentum = 0.0;
    bool nesterov = false;
    double weight_decay = 0.0;
    Schedule schedule;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
        for (const auto& [epoch, mult] : schedule.entries) {
            if (!(mult > 0.0)) throw ConfigError("schedule multiplier must be positive");
        }
    }
};

/// Base rate times every multiplier whose trigger epoch has been reached.
inline double scheduled_rate(const OptimizerConfig& config, std::size_t epoch) {
    double rate = config.learning_rate;
    for (const auto& [trigger, mult] : config.schedule.entries) {
        if (trigger <= epoch) rate *= mult;
    }
    return rate;
}

/// Momentum buffers, one per parametric layer, zero initialized.
struct VelocityState {
    std::vector<Tensor> buffers;

    static VelocityState for_network(const Network& net) {
        VelocityState v;
        for (std::size_t i : net.parametric_indices()) {
            v.buffers.emplace_back(layer_weights(net.named(i).layer)->shape());
        }
        return v;
    }
};

/// Per-layer gradient modification. The raw gradient is expected to already
/// include weight decay; every rule returns a nonnegative multiple of it, so
/// the direction is preserved.
inline Tensor modified_gradient(Rule rule, const Tensor& raw_grad, const Tensor& weights,
                                const LayerFactorInfo* factor,
                                bool* zero_grad_warning = nullptr) {
    switch (rule) {
        case Rule::SGD:
            return raw_grad;
        case Rule::BackMatch: {
            if (factor == nullptr) {
                throw NumericError("back-matching rule needs the layer's factor info");
            }
            const double divisor = factor->m_before * factor->sharing;
            if (!(divisor > 0.0) || !std::isfinite(divisor)) {
                throw NumericError("corrupted factor state at layer '" + factor->name + "'");
            }
            return scaled(raw_grad, 1.0 / divisor);
        }
        case Rule::LARS: {
            const double grad_norm = frobenius_norm(raw_grad);
            if (grad_norm == 0.0) {
                if (zero_grad_warning) *zero_grad_warning = true;
                return raw_grad;
            }
            return scaled(raw_grad, frobenius_norm(weights) / grad_norm);
        }
        case Rule::LSALR: {
            const double grad_norm = frobenius_norm(raw_grad);
            if (grad_norm == 0.0) {
                if (zero_grad_warning) *zero_grad_warning = true;
                return raw_grad;
            }
            return scaled(raw_grad, 1.0 + std::log(1.0 + 1.0 / grad_norm));
        }
    }
    return raw_grad;
}

/// One update over all parametric layers:
///   g <- dW + lambda W;  g <- rule(g);  v <- mu v + g;
///   W <- W - eta (g + mu v)   (Nesterov)  or  W <- W - eta v.
inline void step(Network& net, const BackwardBundle& bundle, const OptimizerConfig& config,
                 VelocityState& velocity, std::size_t epoch,
                 bool* zero_grad_warning = nullptr) {
    const double rate = scheduled_rate(config, epoch);
    const auto params = net.parametric_indices();
    if (bundle.grad_weights.size() != params.size() ||
        velocity.buffers.size() != params.size()) {
        throw ShapeError("optimizer step: bundle/velocity do not match the network");
    }

    std::vector<LayerFactorInfo> infos;
    if (config.rule == Rule::BackMatch) infos = compute_layer_factors(net);

    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *layer_weights(net.named(params[p]).layer);
        Tensor g = bundle.grad_weights[p];
        if (config.weight_decay != 0.0) axpy(config.weight_decay, w, g);
        const LayerFactorInfo* factor = infos.empty() ? nullptr : &infos[params[p]];
        g = modified_gradient(config.rule, g, w, factor, zero_grad_warning);

        Tensor& v = velocity.buffers[p];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = config.momentum * v[i] + g[i];
        if (config.nesterov) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] -= rate * (g[i] + config.momentum * v[i]);
            }
        } else {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= rate * v[i];
        }
        if (!w.all_finite()) {
            throw DivergenceError("non-finite weights after update of layer '" +
                                  net.named(params[p]).name + "'");
        }
    }
}

} // namespace bmnn
