#pragma once

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bmnn/backmatch.hpp"
#include "bmnn/config.hpp"
#include "bmnn/data.hpp"
#include "bmnn/trainer.hpp"

namespace bmnn {

namespace cli_detail {

using nlohmann::json;

/// Shared flag plumbing: every value funnels through the same key/value
/// translation as the config file, so precedence is flags > file > defaults.
struct SettingsFlags {
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> options;
    std::string config_path;
    bool json_output = false;

    CLI::Option* add(CLI::App* cmd, const char* flag, const std::string& key, const char* help) {
        CLI::Option* opt = cmd->add_option(flag, values[key], help);
        options.emplace_back(key, opt);
        return opt;
    }

    void attach_common(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "configuration file of key = value lines");
        add(cmd, "--preset", "arch",
            "architecture preset: lenet-bn, lenet-bn-mini, vgg11-bn, vgg13-bn, vgg16-bn, "
            "vgg19-bn");
        add(cmd, "--classes", "classes", "number of classes");
        add(cmd, "--input", "input", "input sample shape, e.g. 3x32x32");
        add(cmd, "--seed", "seed", "seed for all random streams");
        cmd->add_flag("--json", json_output, "machine-readable output");
    }

    void attach_dataset(CLI::App* cmd) {
        add(cmd, "--dataset", "dataset", "synthetic, cifar10 or cifar100");
        add(cmd, "--data-dir", "data_dir", "dataset directory (default $BMNN_DATA_DIR)");
        add(cmd, "--train-count", "train_count", "training subset size (0 = whole split)");
        add(cmd, "--test-count", "test_count", "test subset size (0 = none)");
    }

    void attach_train(CLI::App* cmd) {
        add(cmd, "--rule", "rule", "update rule: sgd, backmatch, lars, lsalr");
        add(cmd, "--lr", "lr", "global learning rate");
        add(cmd, "--momentum", "momentum", "momentum coefficient in [0, 1)");
        add(cmd, "--nesterov", "nesterov", "true/false: Nesterov momentum form");
        add(cmd, "--weight-decay", "weight_decay", "weight decay coefficient");
        add(cmd, "--schedule", "schedule", "rate schedule, e.g. 60:0.2,120:0.2");
        add(cmd, "--epochs", "epochs", "number of training epochs");
        add(cmd, "--batch", "batch_size", "mini-batch size");
        add(cmd, "--shuffle", "shuffle", "true/false: reshuffle every epoch");
        add(cmd, "--flip-prob", "flip_prob", "horizontal flip probability per image");
        add(cmd, "--eval-every", "eval_every", "epochs between test evaluations (0 = never)");
        add(cmd, "--out-csv", "metrics_csv", "metrics CSV path");
        add(cmd, "--out-jsonl", "metrics_jsonl", "metrics JSON-lines path");
        add(cmd, "--checkpoint", "checkpoint", "weight checkpoint path");
        add(cmd, "--paired-rule", "paired_rule", "second rule: run an A/B pair from one init");
        add(cmd, "--paired-lr", "paired_lr", "learning rate of the paired run");
    }

    RunSettings build() const {
        RunSettings s;
        if (!config_path.empty()) {
            apply_config_document(s, ConfigDocument::parse_file(config_path));
        }
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) apply_config_entry(s, key, values.at(key));
        }
        finalize_settings(s);
        return s;
    }
};

struct DatasetPair {
    Dataset train;
    std::optional<Dataset> test;
};

inline DatasetPair resolve_datasets(RunSettings& s) {
    if (s.dataset == "synthetic") {
        const std::size_t train_count = s.train_count == 0 ? 5000 : s.train_count;
        Dataset full = synthetic_classification(s.train.arch.classes,
                                                train_count + s.test_count,
                                                s.train.arch.input_shape, s.train.seed);
        DatasetPair pair;
        pair.train = subset(full, 0, train_count);
        if (s.test_count > 0) pair.test = subset(full, train_count, s.test_count);
        return pair;
    }
    if (s.dataset == "cifar10" || s.dataset == "cifar100") {
        if (s.data_dir.empty()) {
            throw ConfigError("dataset '" + s.dataset +
                              "' needs a path: pass --data-dir or set BMNN_DATA_DIR");
        }
        const int variant = s.dataset == "cifar10" ? 10 : 100;
        s.train.arch.classes = static_cast<std::size_t>(variant);
        s.train.arch.input_shape = {3, 32, 32};
        DatasetPair pair;
        pair.train = load_cifar(s.data_dir, variant, Split::Train);
        Dataset test = load_cifar(s.data_dir, variant, Split::Test);
        const ChannelStats stats = compute_channel_stats(pair.train);
        standardize(pair.train, stats);
        standardize(test, stats);
        if (s.train_count > 0 && s.train_count < pair.train.count()) {
            pair.train = subset(pair.train, 0, s.train_count);
        }
        if (s.test_count > 0 && s.test_count < test.count()) {
            test = subset(test, 0, s.test_count);
        }
        pair.test = std::move(test);
        return pair;
    }
    throw ConfigError("unknown dataset '" + s.dataset +
                      "' (expected synthetic, cifar10 or cifar100)");
}

inline std::string with_label(const std::string& path, const std::string& label) {
    const auto slash = path.find_last_of('/');
    const auto dot = path.find_last_of('.');
    if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
        return path + "_" + label;
    }
    return path.substr(0, dot) + "_" + label + path.substr(dot);
}

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline json run_summary(const std::string& label, const TrainConfig& config,
                        const TrainResult& result) {
    const MetricsRow& first = result.rows.front();
    const MetricsRow& last = result.rows.back();
    json j;
    j["label"] = label;
    j["rule"] = rule_name(config.optim.rule);
    j["learning_rate"] = config.optim.learning_rate;
    j["momentum"] = config.optim.momentum;
    j["nesterov"] = config.optim.nesterov;
    j["weight_decay"] = config.optim.weight_decay;
    j["epochs"] = config.epochs;
    j["batch_size"] = config.plan.batch_size;
    j["seed"] = config.seed;
    j["steps"] = last.step;
    j["initial_train_loss"] = first.train_loss;
    j["final_train_loss"] = last.train_loss;
    j["final_test_loss"] = std::isnan(last.test_loss) ? json() : json(last.test_loss);
    j["final_test_accuracy"] =
        std::isnan(last.test_accuracy) ? json() : json(last.test_accuracy);
    j["batch_hash"] = hex64(result.batch_hash);
    j["metrics_csv"] = config.metrics_csv;
    j["metrics_jsonl"] = config.metrics_jsonl;
    j["checkpoint"] = config.checkpoint_path;
    return j;
}

inline void print_run(std::ostream& out, const std::string& label, const TrainConfig& config,
                      const TrainResult& result) {
    const MetricsRow& first = result.rows.front();
    const MetricsRow& last = result.rows.back();
    out << "run " << label << ": rule=" << rule_name(config.optim.rule)
        << " lr=" << config.optim.learning_rate << " momentum=" << config.optim.momentum
        << " epochs=" << config.epochs << " batch=" << config.plan.batch_size
        << " seed=" << config.seed << "\n";
    out << "  train loss " << first.train_loss << " -> " << last.train_loss;
    if (!std::isnan(last.test_accuracy)) {
        out << ", test loss " << last.test_loss << ", test accuracy " << last.test_accuracy;
    }
    out << "\n  metrics: " << config.metrics_csv;
    if (!config.checkpoint_path.empty()) out << ", checkpoint: " << config.checkpoint_path;
    out << "\n";
}

// ---------------------------------------------------------------------------
// subcommands

inline int cmd_train(RunSettings s, bool json_output, std::ostream& out) {
    if (s.train.metrics_csv.empty()) s.train.metrics_csv = "metrics.csv";
    if (s.train.checkpoint_path.empty()) s.train.checkpoint_path = "checkpoint.bmnn";
    DatasetPair data = resolve_datasets(s);
    const Dataset* test = data.test ? &*data.test : nullptr;

    json summary;
    summary["command"] = "train";
    summary["dataset"] = {{"name", s.dataset},
                          {"train_count", data.train.count()},
                          {"test_count", data.test ? data.test->count() : 0},
                          {"classes", s.train.arch.classes}};
    summary["paired"] = !s.paired_rule.empty();
    summary["runs"] = json::array();

    if (s.paired_rule.empty()) {
        TrainResult result = train(s.train, data.train, test);
        summary["runs"].push_back(run_summary("a", s.train, result));
        if (!json_output) print_run(out, "a", s.train, result);
    } else {
        TrainConfig config_a = s.train;
        TrainConfig config_b = s.train;
        config_b.optim.rule = parse_rule(s.paired_rule);
        if (s.paired_lr > 0.0) config_b.optim.learning_rate = s.paired_lr;
        for (std::string* path : {&config_a.metrics_csv, &config_a.metrics_jsonl,
                                  &config_a.checkpoint_path}) {
            if (!path->empty()) *path = with_label(*path, "a");
        }
        for (std::string* path : {&config_b.metrics_csv, &config_b.metrics_jsonl,
                                  &config_b.checkpoint_path}) {
            if (!path->empty()) *path = with_label(*path, "b");
        }
        auto [result_a, result_b] = paired_run(config_a, config_b, data.train, test);
        summary["runs"].push_back(run_summary("a", config_a, result_a));
        summary["runs"].push_back(run_summary("b", config_b, result_b));
        if (!json_output) {
            print_run(out, "a", config_a, result_a);
            print_run(out, "b", config_b, result_b);
            out << "paired batch streams verified identical ("
                << hex64(result_a.batch_hash) << ")\n";
        }
    }
    if (json_output) out << summary.dump(2) << "\n";
    return 0;
}

inline int cmd_eval(RunSettings s, const std::string& checkpoint, const std::string& split,
                    bool json_output, std::ostream& out) {
    DatasetPair data = resolve_datasets(s);
    const Dataset* target = nullptr;
    if (split == "train") {
        target = &data.train;
    } else if (split == "test") {
        if (!data.test) throw ConfigError("no test split available; pass --test-count");
        target = &*data.test;
    } else {
        throw ConfigError("unknown split '" + split + "' (expected train or test)");
    }

    Network net = build_network(s.train.arch, s.train.seed);
    load_checkpoint(net, checkpoint);
    const EvalResult result = evaluate(net, target->images, target->labels);
    if (json_output) {
        json j;
        j["command"] = "eval";
        j["checkpoint"] = checkpoint;
        j["split"] = split;
        j["count"] = result.count;
        j["accuracy"] = result.accuracy;
        j["mean_loss"] = result.mean_loss;
        out << j.dump(2) << "\n";
    } else {
        out << "evaluated " << result.count << " samples from '" << checkpoint
            << "': accuracy " << result.accuracy << ", mean loss " << result.mean_loss << "\n";
    }
    return 0;
}

inline int cmd_verify_factors(RunSettings s, std::size_t batch_size, bool json_output,
                              std::ostream& out) {
    if (s.train.arch.preset.empty() && s.train.arch.layers.empty()) {
        s.train.arch.preset = "lenet-bn";
    }
    Network net = build_network(s.train.arch, s.train.seed);
    Dataset probe = synthetic_classification(s.train.arch.classes, batch_size,
                                             s.train.arch.input_shape, s.train.seed);
    std::vector<std::size_t> indices(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) indices[i] = i;
    BackwardBundle bundle =
        net.forward_backward(gather_batch(probe.images, indices), probe.labels);
    const std::vector<Tensor> raw = bundle.grad_weights;
    const auto infos = compute_layer_factors(net);
    apply_backmatch_scaling(infos, net, bundle);

    std::map<std::string, double> closed_form;
    if (s.train.arch.preset.rfind("lenet-bn", 0) == 0) {
        for (const auto& [name, coef] : lenet_appendix_coefficients(net)) {
            closed_form[name] = coef;
        }
    }

    const auto params = net.parametric_indices();
    std::map<std::size_t, std::size_t> param_slot;
    for (std::size_t p = 0; p < params.size(); ++p) param_slot[params[p]] = p;

    json layers = json::array();
    std::ostringstream table;
    table << std::left << std::setw(10) << "layer" << std::setw(11) << "type" << std::right
          << std::setw(9) << "s" << std::setw(13) << "r" << std::setw(13) << "m"
          << std::setw(13) << "scale" << std::setw(13) << "measured" << std::setw(13)
          << "closed" << std::setw(11) << "rel.diff" << "\n";
    for (const auto& info : infos) {
        const bool parametric = param_slot.count(info.layer_index) > 0;
        const double scale = 1.0 / (info.m_before * info.sharing);
        double measured = std::numeric_limits<double>::quiet_NaN();
        if (parametric) {
            const std::size_t p = param_slot[info.layer_index];
            const double raw_norm = frobenius_norm(raw[p]);
            if (raw_norm > 0.0) measured = frobenius_norm(bundle.grad_weights[p]) / raw_norm;
        }
        const bool has_closed = parametric && closed_form.count(info.name) > 0;
        const double closed = has_closed ? closed_form[info.name]
                                         : std::numeric_limits<double>::quiet_NaN();
        const double rel_diff =
            has_closed ? std::abs(scale - closed) / closed
                       : std::numeric_limits<double>::quiet_NaN();

        json j;
        j["name"] = info.name;
        j["type"] = info.type;
        j["sharing"] = info.sharing;
        j["ratio"] = info.ratio;
        j["m_before"] = info.m_before;
        j["scale"] = parametric ? json(scale) : json();
        j["measured_ratio"] = std::isnan(measured) ? json() : json(measured);
        j["closed_form"] = has_closed ? json(closed) : json();
        j["closed_form_rel_diff"] = has_closed ? json(rel_diff) : json();
        json norms = json::object();
        for (const auto& [key, value] : info.norms) norms[key] = value;
        j["norms"] = norms;
        layers.push_back(j);

        const auto cell = [](double v) {
            if (std::isnan(v)) return std::string("-");
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.5g", v);
            return std::string(buf);
        };
        table << std::left << std::setw(10) << info.name << std::setw(11) << info.type
              << std::right << std::setw(9) << cell(info.sharing) << std::setw(13)
              << cell(info.ratio) << std::setw(13) << cell(info.m_before) << std::setw(13)
              << (parametric ? cell(scale) : "-") << std::setw(13) << cell(measured)
              << std::setw(13) << cell(closed) << std::setw(11) << cell(rel_diff) << "\n";
    }

    if (json_output) {
        json j;
        j["command"] = "verify-factors";
        j["arch"] = s.train.arch.preset.empty() ? "custom" : s.train.arch.preset;
        j["seed"] = s.train.seed;
        j["batch"] = batch_size;
        j["layers"] = layers;
        out << j.dump(2) << "\n";
    } else {
        out << table.str();
    }
    return 0;
}

inline int cmd_compare_oracle(std::size_t in_dim, std::size_t out_dim, std::size_t batch,
                              std::size_t spatial, std::uint64_t seed, bool json_output,
                              std::ostream& out) {
    if (batch < in_dim) {
        throw ConfigError("whitened construction needs --batch >= --in");
    }
    RngStream rng(seed, "compare-oracle");
    const auto random_matrix = [&](std::size_t r, std::size_t c) {
        Tensor t({r, c});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
        return t;
    };

    struct Case {
        std::string name;
        double delta_w_rel_error;
        double delta_a_rel_error;
    };
    std::vector<Case> cases;

    const auto fc_case = [&](const std::string& name, const Tensor& w, const Tensor& a) {
        Tensor db = random_matrix(out_dim, batch);
        auto exact = exact_backmatch_fc(w, a, db, 0.0);
        // Algorithm-style approximations for a single layer: the weight
        // gradient passes through unscaled, the input delta divides by the
        // mean squared column norm
        Tensor bp_w = scaled(matmul(db, transposed(a)), 1.0 / static_cast<double>(batch));
        Tensor approx_a = scaled(matmul(transposed(w), db),
                                 1.0 / row_mean_sq_norm(transposed(w)));
        cases.push_back({name, relative_error(bp_w, exact.delta_prime_w),
                         relative_error(approx_a, exact.delta_prime_a)});
    };

    fc_case("fc-whitened", random_matrix(out_dim, in_dim), whitened_batch(in_dim, batch, rng));
    fc_case("fc-random", random_matrix(out_dim, in_dim), random_matrix(in_dim, batch));
    {
        Tensor w = random_matrix(out_dim, in_dim);
        for (std::size_t j = 0; j < in_dim; ++j) {
            double norm = 0.0;
            for (std::size_t k = 0; k < out_dim; ++k) norm += w.at(k, j) * w.at(k, j);
            norm = std::sqrt(norm);
            for (std::size_t k = 0; k < out_dim; ++k) w.at(k, j) /= norm;
        }
        fc_case("fc-unit-columns", w, random_matrix(in_dim, batch));
    }
    {
        // pointwise convolution against its fully connected reduction
        Conv2d conv(out_dim, in_dim, 1, 1, 1, 0);
        for (std::size_t i = 0; i < conv.weights.size(); ++i) conv.weights[i] = rng.normal();
        const std::size_t pixels = spatial * spatial;
        Tensor a({batch, in_dim, spatial, spatial});
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
        Tensor db({batch, out_dim, spatial, spatial});
        for (std::size_t i = 0; i < db.size(); ++i) db[i] = rng.normal();
        auto conv_result = exact_backmatch_conv(conv, a, db, 0.0);

        Tensor a_fc({in_dim, batch * pixels});
        Tensor db_fc({out_dim, batch * pixels});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t u = 0; u < pixels; ++u) {
                for (std::size_t j = 0; j < in_dim; ++j) {
                    a_fc.at(j, b * pixels + u) = a[(b * in_dim + j) * pixels + u];
                }
                for (std::size_t k = 0; k < out_dim; ++k) {
                    db_fc.at(k, b * pixels + u) = db[(b * out_dim + k) * pixels + u];
                }
            }
        }
        auto fc_result = exact_backmatch_fc(conv.weights.reshaped({out_dim, in_dim}), a_fc,
                                            db_fc, 0.0);
        Tensor conv_a_flat({in_dim, batch * pixels});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t u = 0; u < pixels; ++u) {
                for (std::size_t j = 0; j < in_dim; ++j) {
                    conv_a_flat.at(j, b * pixels + u) =
                        conv_result.delta_prime_a[(b * in_dim + j) * pixels + u];
                }
            }
        }
        cases.push_back({"conv-1x1-reduction",
                         relative_error(conv_result.delta_prime_w.reshaped({out_dim, in_dim}),
                                        fc_result.delta_prime_w),
                         relative_error(conv_a_flat, fc_result.delta_prime_a)});
    }

    if (json_output) {
        json j;
        j["command"] = "compare-oracle";
        j["in"] = in_dim;
        j["out"] = out_dim;
        j["batch"] = batch;
        j["spatial"] = spatial;
        j["seed"] = seed;
        j["cases"] = json::array();
        for (const Case& c : cases) {
            j["cases"].push_back({{"name", c.name},
                                  {"delta_w_rel_error", c.delta_w_rel_error},
                                  {"delta_a_rel_error", c.delta_a_rel_error}});
        }
        out << j.dump(2) << "\n";
    } else {
        out << std::left << std::setw(22) << "case" << std::right << std::setw(18)
            << "d'W rel.err" << std::setw(18) << "d'a rel.err" << "\n";
        for (const Case& c : cases) {
            char wbuf[32], abuf[32];
            std::snprintf(wbuf, sizeof(wbuf), "%.3e", c.delta_w_rel_error);
            std::snprintf(abuf, sizeof(abuf), "%.3e", c.delta_a_rel_error);
            out << std::left << std::setw(22) << c.name << std::right << std::setw(18) << wbuf
                << std::setw(18) << abuf << "\n";
        }
    }
    return 0;
}

inline int cmd_make_synthetic(std::size_t classes, std::size_t count, const std::string& shape,
                              std::uint64_t seed, const std::string& out_path, bool json_output,
                              std::ostream& out) {
    const std::vector<std::size_t> sample_shape = parse_shape("--shape", shape);
    Dataset ds = synthetic_classification(classes, count, sample_shape, seed);
    write_cifar10(out_path, ds);
    if (json_output) {
        json j;
        j["command"] = "make-synthetic";
        j["path"] = out_path;
        j["count"] = count;
        j["classes"] = classes;
        j["seed"] = seed;
        out << j.dump(2) << "\n";
    } else {
        out << "wrote " << count << " samples (" << classes << " classes) to " << out_path
            << "\n";
    }
    return 0;
}

} // namespace cli_detail

/// Entry point shared by the binary and the tests. Exit codes: 0 success,
/// 1 divergence, 2 configuration error, 3 I/O error.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    using namespace cli_detail;

    CLI::App app{"feedforward network training with layer-wise adaptive learning rates"};
    app.require_subcommand(1);

    auto* train_cmd = app.add_subcommand("train", "train a network and write metrics");
    SettingsFlags train_flags;
    train_flags.attach_common(train_cmd);
    train_flags.attach_dataset(train_cmd);
    train_flags.attach_train(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    SettingsFlags eval_flags;
    eval_flags.attach_common(eval_cmd);
    eval_flags.attach_dataset(eval_cmd);
    std::string eval_checkpoint;
    std::string eval_split = "test";
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate")->required();
    eval_cmd->add_option("--split", eval_split, "train or test (default test)");

    auto* verify_cmd = app.add_subcommand(
        "verify-factors", "per-layer scaling factors next to their closed forms");
    SettingsFlags verify_flags;
    verify_flags.attach_common(verify_cmd);
    std::size_t verify_batch = 32;
    verify_cmd->add_option("--batch", verify_batch, "probe batch size");

    auto* oracle_cmd = app.add_subcommand(
        "compare-oracle", "approximate scaling against the exact least-squares solutions");
    std::size_t oracle_in = 16, oracle_out = 8, oracle_batch = 64, oracle_spatial = 2;
    std::uint64_t oracle_seed = 0;
    bool oracle_json = false;
    oracle_cmd->add_option("--in", oracle_in, "input dimension");
    oracle_cmd->add_option("--out", oracle_out, "output dimension");
    oracle_cmd->add_option("--batch", oracle_batch, "mini-batch size (>= --in)");
    oracle_cmd->add_option("--spatial", oracle_spatial, "spatial extent of the conv case");
    oracle_cmd->add_option("--seed", oracle_seed, "random seed");
    oracle_cmd->add_flag("--json", oracle_json, "machine-readable output");

    auto* synth_cmd =
        app.add_subcommand("make-synthetic", "write a synthetic dataset in the binary layout");
    std::size_t synth_classes = 10, synth_count = 1000;
    std::string synth_shape = "3x32x32", synth_out;
    std::uint64_t synth_seed = 0;
    bool synth_json = false;
    synth_cmd->add_option("--classes", synth_classes, "number of classes (<= 10)");
    synth_cmd->add_option("--count", synth_count, "number of samples");
    synth_cmd->add_option("--shape", synth_shape, "sample shape (3x32x32 for the binary layout)");
    synth_cmd->add_option("--seed", synth_seed, "random seed");
    synth_cmd->add_option("--out", synth_out, "output .bin path")->required();
    synth_cmd->add_flag("--json", synth_json, "machine-readable output");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(train_flags.build(), train_flags.json_output, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(eval_flags.build(), eval_checkpoint, eval_split,
                            eval_flags.json_output, out);
        }
        if (verify_cmd->parsed()) {
            return cmd_verify_factors(verify_flags.build(), verify_batch,
                                      verify_flags.json_output, out);
        }
        if (oracle_cmd->parsed()) {
            return cmd_compare_oracle(oracle_in, oracle_out, oracle_batch, oracle_spatial,
                                      oracle_seed, oracle_json, out);
        }
        if (synth_cmd->parsed()) {
            return cmd_make_synthetic(synth_classes, synth_count, synth_shape, synth_seed,
                                      synth_out, synth_json, out);
        }
        err << "no subcommand given\n";
        return 2;
    } catch (const TrainingDiverged& e) {
        err << "divergence: " << e.what() << "\n";
        if (!e.tail.empty()) {
            err << "last metric rows:\n" << kMetricsCsvHeader << "\n";
            for (const MetricsRow& r : e.tail) {
                err << r.epoch << ',' << r.step << ',' << r.learning_rate << ','
                    << r.train_loss << "\n";
            }
        }
        return 1;
    } catch (const DivergenceError& e) {
        err << "divergence: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace bmnn
