#include <gtest/gtest.h>

#include <cmath>

#include "bmnn/optim.hpp"
#include "support/gradient_check.hpp"

using bmnn::OptimizerConfig;
using bmnn::Rule;
using bmnn::Tensor;
using bmnn::testing::random_tensor;

namespace {

bmnn::Network fc_network(std::size_t in, std::size_t classes, std::uint64_t seed) {
    bmnn::ArchSpec spec;
    spec.layers = {{"fc", {in, classes}}};
    spec.input_shape = {in};
    spec.classes = classes;
    return bmnn::build_network(spec, seed);
}

bmnn::BackwardBundle bundle_with(Tensor grad) {
    bmnn::BackwardBundle b;
    b.grad_weights.push_back(std::move(grad));
    return b;
}

double cosine(const Tensor& a, const Tensor& b) {
    return dot(a, b) / (bmnn::frobenius_norm(a) * bmnn::frobenius_norm(b));
}

} // namespace

TEST(ModifiedGradient, SgdIsIdentity) {
    bmnn::RngStream rng(1, "sgd-id");
    Tensor g = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    Tensor out = bmnn::modified_gradient(Rule::SGD, g, w, nullptr);
    EXPECT_EQ(bmnn::max_abs_difference(out, g), 0.0);
}

TEST(ModifiedGradient, LarsDoublesWhenWeightNormIsTwiceGradNorm) {
    Tensor w({1, 1}, {2.0});
    Tensor g({1, 1}, {1.0});
    Tensor out = bmnn::modified_gradient(Rule::LARS, g, w, nullptr);
    EXPECT_EQ(out[0], 2.0);
}

TEST(ModifiedGradient, BackmatchDividesByMs) {
    bmnn::LayerFactorInfo info;
    info.m_before = 1.0;
    info.sharing = 25.0;
    Tensor g({2, 2}, {25.0, 50.0, 75.0, 100.0});
    Tensor w({2, 2});
    Tensor out = bmnn::modified_gradient(Rule::BackMatch, g, w, &info);
    EXPECT_EQ(out[0], 1.0);
    EXPECT_EQ(out[1], 2.0);
    EXPECT_EQ(out[2], 3.0);
    EXPECT_EQ(out[3], 4.0);
}

TEST(ModifiedGradient, LarsAndLsalrMatchClosedFormulas) {
    bmnn::RngStream rng(3, "closed-formulas");
    for (int trial = 0; trial < 10; ++trial) {
        Tensor g = random_tensor({4, 5}, rng);
        Tensor w = random_tensor({4, 5}, rng);
        const double gn = bmnn::frobenius_norm(g);
        const double wn = bmnn::frobenius_norm(w);

        Tensor lars = bmnn::modified_gradient(Rule::LARS, g, w, nullptr);
        Tensor lsalr = bmnn::modified_gradient(Rule::LSALR, g, w, nullptr);
        for (std::size_t i = 0; i < g.size(); ++i) {
            EXPECT_LT(std::abs(lars[i] - g[i] * (wn / gn)), 1e-12 * std::abs(lars[i]) + 1e-300);
            EXPECT_LT(std::abs(lsalr[i] - g[i] * (1.0 + std::log(1.0 + 1.0 / gn))),
                      1e-12 * std::abs(lsalr[i]) + 1e-300);
        }
    }
}

TEST(ModifiedGradient, ZeroGradientGuardReturnsRawAndWarns) {
    Tensor g({2, 2});
    Tensor w({2, 2}, {1, 2, 3, 4});
    for (Rule rule : {Rule::LARS, Rule::LSALR}) {
        bool warned = false;
        Tensor out = bmnn::modified_gradient(rule, g, w, nullptr, &warned);
        EXPECT_TRUE(warned);
        EXPECT_EQ(bmnn::max_abs_difference(out, g), 0.0);
    }
}

TEST(ModifiedGradient, DirectionPreservedByAllRules) {
    bmnn::RngStream rng(5, "direction");
    bmnn::LayerFactorInfo info;
    info.m_before = 0.37;
    info.sharing = 25.0;
    for (int trial = 0; trial < 5; ++trial) {
        Tensor g = random_tensor({3, 6}, rng);
        Tensor w = random_tensor({3, 6}, rng);
        for (Rule rule : {Rule::SGD, Rule::BackMatch, Rule::LARS, Rule::LSALR}) {
            Tensor out = bmnn::modified_gradient(rule, g, w, &info);
            EXPECT_GT(cosine(out, g), 1.0 - 1e-12);
        }
    }
}

TEST(Step, VanillaSgdUpdate) {
    bmnn::Network net = fc_network(3, 2, 7);
    Tensor before = *bmnn::layer_weights(net.named(0).layer);
    bmnn::RngStream rng(7, "vanilla");
    Tensor g = random_tensor({2, 3}, rng);

    OptimizerConfig config;
    config.learning_rate = 0.25;
    auto velocity = bmnn::VelocityState::for_network(net);
    bmnn::step(net, bundle_with(g), config, velocity, 0);

    const Tensor& after = *bmnn::layer_weights(net.named(0).layer);
    for (std::size_t i = 0; i < after.size(); ++i) {
        EXPECT_EQ(after[i], before[i] - 0.25 * g[i]);
    }
}

TEST(Step, PureDecayShrinksWeights) {
    bmnn::Network net = fc_network(3, 2, 9);
    Tensor before = *bmnn::layer_weights(net.named(0).layer);

    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.weight_decay = 0.5;
    auto velocity = bmnn::VelocityState::for_network(net);
    bmnn::step(net, bundle_with(Tensor({2, 3})), config, velocity, 0);

    const Tensor& after = *bmnn::layer_weights(net.named(0).layer);
    for (std::size_t i = 0; i < after.size(); ++i) {
        EXPECT_EQ(after[i], before[i] - 0.1 * (0.5 * before[i]));
    }
}

TEST(Step, DecayIsAppliedBeforeTheRuleModification) {
    // the scaled update must be (dW + lambda W) / (m s), not dW/(m s) + lambda W
    bmnn::ArchSpec spec;
    spec.preset = "lenet-bn-mini";
    bmnn::Network net = bmnn::build_network(spec, 11);
    bmnn::RngStream rng(11, "ordering");
    Tensor batch = random_tensor({4, 3, 32, 32}, rng);
    auto bundle = net.forward_backward(batch, {0, 1, 2, 3});

    const double lambda = 0.01;
    const auto infos = bmnn::compute_layer_factors(net);
    const auto params = net.parametric_indices();

    std::vector<Tensor> weights_before;
    for (std::size_t i : params) weights_before.push_back(*bmnn::layer_weights(net.named(i).layer));

    OptimizerConfig config;
    config.rule = Rule::BackMatch;
    config.learning_rate = 1.0;
    config.weight_decay = lambda;
    auto velocity = bmnn::VelocityState::for_network(net);
    bmnn::step(net, bundle, config, velocity, 0);

    bool saw_nontrivial_factor = false;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& info = infos[params[p]];
        const double ms = info.m_before * info.sharing;
        if (std::abs(ms - 1.0) > 0.1) saw_nontrivial_factor = true;

        Tensor update(weights_before[p].shape());
        const Tensor& after = *bmnn::layer_weights(net.named(params[p]).layer);
        for (std::size_t i = 0; i < update.size(); ++i) {
            update[i] = weights_before[p][i] - after[i]; // eta = 1
        }
        Tensor decay_first(update.shape());
        Tensor decay_after(update.shape());
        for (std::size_t i = 0; i < update.size(); ++i) {
            const double dw = bundle.grad_weights[p][i];
            const double w = weights_before[p][i];
            decay_first[i] = (dw + lambda * w) / ms;
            decay_after[i] = dw / ms + lambda * w;
        }
        EXPECT_LT(bmnn::relative_error(update, decay_first), 1e-12) << info.name;
        if (std::abs(ms - 1.0) > 0.1) {
            EXPECT_GT(bmnn::relative_error(update, decay_after), 1e-6) << info.name;
        }
    }
    EXPECT_TRUE(saw_nontrivial_factor);
}

TEST(Step, TwoStepsEqualOneDoubleStepOnLinearModel) {
    // constant gradient: two eta-steps land exactly where one 2-eta step
    // does; exact binary fractions keep the identity free of rounding
    Tensor g({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});

    bmnn::Network net_a = fc_network(3, 2, 13);
    bmnn::Network net_b = fc_network(3, 2, 13);
    *bmnn::layer_weights(net_a.named(0).layer) = Tensor({2, 3}, {8, 16, 24, 32, 40, 48});
    *bmnn::layer_weights(net_b.named(0).layer) = Tensor({2, 3}, {8, 16, 24, 32, 40, 48});

    OptimizerConfig small;
    small.learning_rate = 0.125;
    OptimizerConfig big;
    big.learning_rate = 0.25;

    auto va = bmnn::VelocityState::for_network(net_a);
    auto vb = bmnn::VelocityState::for_network(net_b);
    bmnn::step(net_a, bundle_with(g), small, va, 0);
    bmnn::step(net_a, bundle_with(g), small, va, 0);
    bmnn::step(net_b, bundle_with(g), big, vb, 0);

    EXPECT_EQ(bmnn::max_abs_difference(*bmnn::layer_weights(net_a.named(0).layer),
                                       *bmnn::layer_weights(net_b.named(0).layer)),
              0.0);
}

TEST(Step, ClosedFormIterateOnQuadratic) {
    // loss (w - 3)^2 on a single parameter: w <- w - eta * 2 (w - 3)
    bmnn::ArchSpec spec;
    spec.layers = {{"fc", {1, 2}}};
    spec.input_shape = {1};
    spec.classes = 2;
    bmnn::Network net = bmnn::build_network(spec, 15);
    Tensor& w = *bmnn::layer_weights(net.named(0).layer);
    w[0] = 0.0;
    w[1] = 0.0; // track only the first coordinate; keep the second at zero

    OptimizerConfig config;
    config.learning_rate = 0.2;
    auto velocity = bmnn::VelocityState::for_network(net);

    double expected = 0.0;
    for (int it = 0; it < 20; ++it) {
        Tensor g({2, 1}, {2.0 * (w[0] - 3.0), 0.0});
        const double gv = 2.0 * (expected - 3.0);
        bmnn::step(net, bundle_with(g), config, velocity, 0);
        expected = expected - 0.2 * gv;
        EXPECT_EQ(w[0], expected);
    }
    EXPECT_NEAR(w[0], 3.0, 1e-3);
}

TEST(Step, NesterovUsesEffectiveGradient) {
    bmnn::Network net = fc_network(2, 2, 17);
    Tensor before = *bmnn::layer_weights(net.named(0).layer);
    Tensor g({2, 2}, {1.0, 2.0, 3.0, 4.0});

    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.momentum = 0.9;
    config.nesterov = true;
    auto velocity = bmnn::VelocityState::for_network(net);
    bmnn::step(net, bundle_with(g), config, velocity, 0);
    // first step: v = g, update = eta (g + mu v) = eta (1 + mu) g
    const Tensor& after = *bmnn::layer_weights(net.named(0).layer);
    for (std::size_t i = 0; i < after.size(); ++i) {
        EXPECT_NEAR(after[i], before[i] - 0.1 * 1.9 * g[i], 1e-15);
    }
}

TEST(Step, VelocityStaysZeroWithoutGradients) {
    bmnn::Network net = fc_network(3, 2, 19);
    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.momentum = 0.9;
    auto velocity = bmnn::VelocityState::for_network(net);
    for (int it = 0; it < 3; ++it) {
        bmnn::step(net, bundle_with(Tensor({2, 3})), config, velocity, 0);
    }
    EXPECT_EQ(bmnn::frobenius_norm(velocity.buffers[0]), 0.0);
}

TEST(Step, NonFiniteUpdateRaisesDivergence) {
    bmnn::Network net = fc_network(2, 2, 21);
    Tensor g({2, 2});
    g.fill(std::numeric_limits<double>::infinity());
    OptimizerConfig config;
    auto velocity = bmnn::VelocityState::for_network(net);
    EXPECT_THROW(bmnn::step(net, bundle_with(g), config, velocity, 0), bmnn::DivergenceError);
}

TEST(Step, DeterministicTrajectories) {
    bmnn::ArchSpec spec;
    spec.layers = {{"fc", {4, 3}}, {"relu", {}}, {"fc", {3, 2}}};
    spec.input_shape = {4};
    spec.classes = 2;

    auto run = [&] {
        bmnn::Network net = bmnn::build_network(spec, 23);
        OptimizerConfig config;
        config.rule = Rule::LSALR;
        config.learning_rate = 0.05;
        config.momentum = 0.9;
        config.nesterov = true;
        auto velocity = bmnn::VelocityState::for_network(net);
        bmnn::RngStream rng(23, "traj");
        for (int it = 0; it < 5; ++it) {
            Tensor batch = random_tensor({4, 6}, rng);
            auto bundle = net.forward_backward(batch, {0, 1, 0, 1, 0, 1});
            bmnn::step(net, bundle, config, velocity, 0);
        }
        std::vector<double> flat;
        for (std::size_t i : net.parametric_indices()) {
            const Tensor& w = *bmnn::layer_weights(net.named(i).layer);
            flat.insert(flat.end(), w.data(), w.data() + w.size());
        }
        return flat;
    };
    EXPECT_EQ(run(), run());
}

TEST(ScheduledRate, TriggersMultiplyFromTheirEpoch) {
    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.schedule.entries = {{60, 0.2}, {120, 0.2}};
    EXPECT_EQ(bmnn::scheduled_rate(config, 0), 0.1);
    EXPECT_EQ(bmnn::scheduled_rate(config, 59), 0.1);
    EXPECT_NEAR(bmnn::scheduled_rate(config, 60), 0.02, 1e-15);
    EXPECT_NEAR(bmnn::scheduled_rate(config, 125), 0.004, 1e-15);
}

TEST(OptimizerConfig, ValidatesRanges) {
    OptimizerConfig config;
    config.learning_rate = 0.0;
    EXPECT_THROW(config.validate(), bmnn::ConfigError);
    config.learning_rate = 0.1;
    config.momentum = 1.0;
    EXPECT_THROW(config.validate(), bmnn::ConfigError);
    config.momentum = 0.9;
    config.weight_decay = -1.0;
    EXPECT_THROW(config.validate(), bmnn::ConfigError);
    config.weight_decay = 0.0;
    config.validate();
    EXPECT_EQ(bmnn::parse_rule("lars"), Rule::LARS);
    EXPECT_THROW(bmnn::parse_rule("adam"), bmnn::ConfigError);
}
