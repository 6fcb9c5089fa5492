#include <gtest/gtest.h>

#include <cmath>

#include "bmnn/network.hpp"
#include "support/gradient_check.hpp"

using bmnn::ArchSpec;
using bmnn::Network;
using bmnn::Tensor;
using bmnn::testing::random_tensor;

namespace {

ArchSpec toy_fc_arch(std::size_t in, std::size_t hidden, std::size_t classes) {
    ArchSpec spec;
    spec.layers = {{"fc", {in, hidden}}, {"relu", {}}, {"fc", {hidden, classes}}};
    spec.input_shape = {in};
    spec.classes = classes;
    return spec;
}

} // namespace

TEST(NetworkBuild, LenetShapeChainAndParameterCount) {
    ArchSpec spec;
    spec.preset = "lenet-bn";
    Network net = bmnn::build_network(spec, 1);
    // spatial chain on 32x32 input: 28 -> 14 -> 10 -> 5
    EXPECT_EQ(net.output_sample_shape(0), (std::vector<std::size_t>{20, 28, 28}));
    EXPECT_EQ(net.output_sample_shape(3), (std::vector<std::size_t>{20, 14, 14}));
    EXPECT_EQ(net.output_sample_shape(4), (std::vector<std::size_t>{50, 10, 10}));
    EXPECT_EQ(net.output_sample_shape(7), (std::vector<std::size_t>{50, 5, 5}));
    // closed-form parameter count: no biases anywhere
    const std::size_t expected = 20 * 3 * 5 * 5 + 50 * 20 * 5 * 5 + 500 * 1250 + 500 * 500 +
                                 10 * 500;
    EXPECT_EQ(net.parameter_count(), expected);
    EXPECT_EQ(net.parametric_indices().size(), 5u);
}

TEST(NetworkBuild, Vgg11FinalLayerAndParameterCount) {
    ArchSpec spec;
    spec.preset = "vgg11-bn";
    spec.classes = 100;
    Network net = bmnn::build_network(spec, 1);
    const auto params = net.parametric_indices();
    const auto& last = net.named(params.back());
    const auto* fc = std::get_if<bmnn::FullyConnected>(&last.layer);
    ASSERT_NE(fc, nullptr);
    EXPECT_EQ(fc->in_dim(), 512u);
    EXPECT_EQ(fc->out_dim(), 100u);
    // eight 3x3 convolutions plus the single mapping layer
    const std::size_t expected = 9 * (3 * 64 + 64 * 128 + 128 * 256 + 256 * 256 + 256 * 512 +
                                      3 * 512 * 512) +
                                 512 * 100;
    EXPECT_EQ(net.parameter_count(), expected);
}

TEST(NetworkBuild, SingleLayerCustomNetwork) {
    ArchSpec spec;
    spec.layers = {{"fc", {6, 3}}};
    spec.input_shape = {6};
    spec.classes = 3;
    Network net = bmnn::build_network(spec, 5);
    EXPECT_EQ(net.layer_count(), 1u);
    EXPECT_EQ(net.parameter_count(), 18u);
}

TEST(NetworkBuild, JunctionMismatchNamesTheLayer) {
    ArchSpec spec;
    spec.layers = {{"fc", {6, 3}}, {"fc", {4, 3}}};
    spec.input_shape = {6};
    spec.classes = 3;
    try {
        bmnn::build_network(spec, 1);
        FAIL() << "expected a shape error";
    } catch (const bmnn::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("fc2"), std::string::npos);
    }
}

TEST(NetworkBuild, MisplacedBatchNormRejected) {
    ArchSpec spec;
    spec.layers = {{"fc", {6, 3}}, {"relu", {}}, {"batchnorm", {}}, {"fc", {3, 3}}};
    spec.input_shape = {6};
    spec.classes = 3;
    EXPECT_THROW(bmnn::build_network(spec, 1), bmnn::ConfigError);
}

TEST(NetworkBuild, OutputMustMatchClassCount) {
    ArchSpec spec;
    spec.layers = {{"fc", {6, 4}}};
    spec.input_shape = {6};
    spec.classes = 3;
    EXPECT_THROW(bmnn::build_network(spec, 1), bmnn::ConfigError);
}

TEST(NetworkGradients, WholeNetworkFiniteDifferenceCheck) {
    Network net = bmnn::build_network(toy_fc_arch(5, 4, 3), 7);
    bmnn::RngStream rng(7, "net-fd");
    Tensor batch = random_tensor({5, 6}, rng);
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2};

    bmnn::BackwardBundle bundle = net.forward_backward(batch, labels);
    const auto params = net.parametric_indices();
    ASSERT_EQ(bundle.grad_weights.size(), params.size());

    const double step = 1e-5;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *bmnn::layer_weights(net.named(params[p]).layer);
        Tensor fd(w.shape());
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + step;
            const double fp = net.forward_backward(batch, labels).loss;
            w[i] = saved - step;
            const double fm = net.forward_backward(batch, labels).loss;
            w[i] = saved;
            fd[i] = (fp - fm) / (2.0 * step);
        }
        EXPECT_LT(bmnn::relative_error(fd, bundle.grad_weights[p]), 1e-5)
            << "parametric layer " << p;
    }
}

TEST(NetworkGradients, DuplicatedBatchLeavesMeanGradientUnchanged) {
    Network net = bmnn::build_network(toy_fc_arch(4, 5, 2), 9);
    bmnn::RngStream rng(9, "dup-batch");
    Tensor batch = random_tensor({4, 3}, rng);
    const std::vector<int> labels = {0, 1, 1};

    Tensor doubled({4, 6});
    for (std::size_t f = 0; f < 4; ++f) {
        for (std::size_t b = 0; b < 3; ++b) {
            doubled.at(f, b) = batch.at(f, b);
            doubled.at(f, b + 3) = batch.at(f, b);
        }
    }
    const std::vector<int> doubled_labels = {0, 1, 1, 0, 1, 1};

    auto single = net.forward_backward(batch, labels);
    auto twice = net.forward_backward(doubled, doubled_labels);
    EXPECT_NEAR(single.loss, twice.loss, 1e-12);
    for (std::size_t p = 0; p < single.grad_weights.size(); ++p) {
        EXPECT_LT(bmnn::relative_error(single.grad_weights[p], twice.grad_weights[p]), 1e-12);
    }
}

TEST(NetworkGradients, ZeroFinalLayerGivesUniformLoss) {
    ArchSpec spec = toy_fc_arch(4, 5, 3);
    Network net = bmnn::build_network(spec, 11);
    bmnn::Tensor& w = *bmnn::layer_weights(net.named(2).layer);
    w.fill(0.0);
    bmnn::RngStream rng(11, "zero-final");
    Tensor batch = random_tensor({4, 7}, rng);
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0};
    auto bundle = net.forward_backward(batch, labels);
    EXPECT_NEAR(bundle.loss, std::log(3.0), 1e-12);
}

TEST(NetworkGradients, CompositionMatchesManualLayerWalk) {
    ArchSpec spec = toy_fc_arch(4, 6, 3);
    Network net = bmnn::build_network(spec, 13);
    Network manual = bmnn::build_network(spec, 13);
    bmnn::RngStream rng(13, "composition");
    Tensor batch = random_tensor({4, 5}, rng);
    const std::vector<int> labels = {2, 1, 0, 2, 1};

    auto bundle = net.forward_backward(batch, labels);

    Tensor x = batch;
    for (std::size_t i = 0; i < manual.layer_count(); ++i) {
        x = bmnn::forward(manual.named(i).layer, x, true);
    }
    bmnn::SoftmaxCrossEntropy loss;
    auto [value, grad] = loss.forward_backward(x, labels);
    std::vector<Tensor> grads;
    Tensor g = std::move(grad);
    for (std::size_t i = manual.layer_count(); i-- > 0;) {
        auto r = bmnn::backward(manual.named(i).layer, g);
        if (r.grad_weights) grads.insert(grads.begin(), std::move(*r.grad_weights));
        g = std::move(r.grad_input);
    }

    ASSERT_EQ(value, bundle.loss);
    ASSERT_EQ(grads.size(), bundle.grad_weights.size());
    for (std::size_t p = 0; p < grads.size(); ++p) {
        EXPECT_EQ(bmnn::max_abs_difference(grads[p], bundle.grad_weights[p]), 0.0);
    }
}

TEST(NetworkEvaluate, PerfectSeparationGivesFullAccuracy) {
    ArchSpec spec;
    spec.layers = {{"fc", {3, 3}}};
    spec.input_shape = {3};
    spec.classes = 3;
    Network net = bmnn::build_network(spec, 1);
    *bmnn::layer_weights(net.named(0).layer) = bmnn::scaled(bmnn::identity(3), 10.0);

    Tensor samples({6, 3});
    std::vector<int> labels(6);
    for (std::size_t i = 0; i < 6; ++i) {
        samples.at(i, i % 3) = 1.0;
        labels[i] = static_cast<int>(i % 3);
    }
    auto result = bmnn::evaluate(net, samples, labels, 4);
    EXPECT_EQ(result.accuracy, 1.0);
    EXPECT_EQ(result.count, 6u);
}

TEST(NetworkEvaluate, UntrainedNetworkIsNearChance) {
    ArchSpec spec = toy_fc_arch(16, 12, 10);
    Network net = bmnn::build_network(spec, 31);
    bmnn::RngStream rng(31, "chance");
    Tensor samples = random_tensor({1000, 16}, rng);
    std::vector<int> labels(1000);
    for (auto& l : labels) l = static_cast<int>(rng.index(10));
    auto result = bmnn::evaluate(net, samples, labels);
    EXPECT_NEAR(result.accuracy, 0.1, 0.03);
}

TEST(NetworkEvaluate, DeterministicAcrossRepeats) {
    ArchSpec spec = toy_fc_arch(8, 6, 4);
    Network net = bmnn::build_network(spec, 17);
    bmnn::RngStream rng(17, "eval-repeat");
    Tensor samples = random_tensor({40, 8}, rng);
    std::vector<int> labels(40);
    for (auto& l : labels) l = static_cast<int>(rng.index(4));
    auto a = bmnn::evaluate(net, samples, labels, 7);
    auto b = bmnn::evaluate(net, samples, labels, 7);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.mean_loss, b.mean_loss);
}

TEST(NetworkEvaluate, EmptyDatasetRejected) {
    ArchSpec spec = toy_fc_arch(4, 3, 2);
    Network net = bmnn::build_network(spec, 3);
    Tensor samples({5, 4});
    std::vector<int> labels = {0, 1};
    EXPECT_THROW(bmnn::evaluate(net, samples, labels), bmnn::ShapeError);
}
