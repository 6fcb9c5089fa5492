#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bmnn/backmatch.hpp"
#include "bmnn/data.hpp"
#include "bmnn/network.hpp"
#include "bmnn/optim.hpp"

namespace bmnn {

struct TrainConfig {
    ArchSpec arch;
    OptimizerConfig optim;
    std::size_t epochs = 20;
    BatchPlan plan;
    std::size_t eval_every = 1; // epochs between test evaluations, 0 = never
    std::uint64_t seed = 0;
    std::string metrics_csv;
    std::string metrics_jsonl;
    std::string checkpoint_path;

    void validate() const {
        if (epochs < 1) throw ConfigError("training needs at least 1 epoch");
        optim.validate();
    }
};

/// One metrics record per epoch. The train loss excludes the weight-decay
/// term (decay only enters the gradients). Gradient norms come from the last
/// batch of the epoch; the m*s factors are recomputed from the weights the
/// epoch ends with, so they can be cross-checked against a checkpoint.
struct MetricsRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double learning_rate = 0.0;
    double train_loss = 0.0;
    double test_loss = std::numeric_limits<double>::quiet_NaN();
    double test_accuracy = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> grad_norms;
    std::vector<double> factors;
    double wall_seconds = 0.0;
};

/// Field-wise equality over everything except the wall clock.
inline bool rows_deterministically_equal(const MetricsRow& a, const MetricsRow& b) {
    const auto nan_eq = [](double x, double y) {
        return (std::isnan(x) && std::isnan(y)) || x == y;
    };
    return a.epoch == b.epoch && a.step == b.step && a.learning_rate == b.learning_rate &&
           a.train_loss == b.train_loss && nan_eq(a.test_loss, b.test_loss) &&
           nan_eq(a.test_accuracy, b.test_accuracy) && a.grad_norms == b.grad_norms &&
           a.factors == b.factors;
}

inline bool logs_deterministically_equal(const std::vector<MetricsRow>& a,
                                         const std::vector<MetricsRow>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!rows_deterministically_equal(a[i], b[i])) return false;
    }
    return true;
}

struct TrainingDiverged : DivergenceError {
    TrainingDiverged(const std::string& message, std::vector<MetricsRow> tail_rows)
        : DivergenceError(message), tail(std::move(tail_rows)) {}
    std::vector<MetricsRow> tail;
};

// ---------------------------------------------------------------------------
// metrics serialization

namespace detail {

inline std::string double_field(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string joined(const std::vector<double>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ';';
        out += double_field(values[i]);
    }
    return out;
}

inline std::string json_number(double v) {
    if (std::isnan(v)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string json_array(const std::vector<double>& values) {
    std::string out = "[";
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += json_number(values[i]);
    }
    return out + "]";
}

} // namespace detail

inline constexpr const char* kMetricsCsvHeader =
    "epoch,step,lr,train_loss,test_loss,test_accuracy,grad_norms,ms_factors,wall_seconds";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot create metrics file '" + path + "'");
    out << kMetricsCsvHeader << "\n";
    for (const MetricsRow& r : rows) {
        out << r.epoch << ',' << r.step << ',' << detail::double_field(r.learning_rate) << ','
            << detail::double_field(r.train_loss) << ',' << detail::double_field(r.test_loss)
            << ',' << detail::double_field(r.test_accuracy) << ',' << detail::joined(r.grad_norms)
            << ',' << detail::joined(r.factors) << ',' << detail::double_field(r.wall_seconds)
            << "\n";
    }
    if (!out) throw IoError("failed writing metrics file '" + path + "'");
}

inline void write_metrics_jsonl(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot create metrics file '" + path + "'");
    for (const MetricsRow& r : rows) {
        out << "{\"epoch\":" << r.epoch << ",\"step\":" << r.step
            << ",\"lr\":" << detail::json_number(r.learning_rate)
            << ",\"train_loss\":" << detail::json_number(r.train_loss)
            << ",\"test_loss\":" << detail::json_number(r.test_loss)
            << ",\"test_accuracy\":" << detail::json_number(r.test_accuracy)
            << ",\"grad_norms\":" << detail::json_array(r.grad_norms)
            << ",\"ms_factors\":" << detail::json_array(r.factors)
            << ",\"wall_seconds\":" << detail::json_number(r.wall_seconds) << "}\n";
    }
    if (!out) throw IoError("failed writing metrics file '" + path + "'");
}

// ---------------------------------------------------------------------------
// checkpoint container: magic, version, then named little-endian f64 records

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace detail {

template <class T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("checkpoint '" + path + "' is truncated");
    return v;
}

inline void write_record(std::ofstream& out, const std::string& name, const Tensor& t) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor vector_tensor(const std::vector<double>& v) {
    return Tensor({v.size()}, v);
}

} // namespace detail

inline constexpr char kCheckpointMagic[4] = {'B', 'M', 'N', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Weights plus batch-norm running statistics, self-describing records.
inline void save_checkpoint(const Network& net, const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> records;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        const NamedLayer& nl = net.named(i);
        if (const Tensor* w = layer_weights(nl.layer)) {
            records.emplace_back(nl.name + "/weights", *w);
        } else if (const auto* bn = std::get_if<BatchNorm>(&nl.layer)) {
            records.emplace_back(nl.name + "/running_mean",
                                 detail::vector_tensor(bn->running_mean_));
            records.emplace_back(nl.name + "/running_var",
                                 detail::vector_tensor(bn->running_var_));
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create checkpoint '" + path + "'");
    out.write(kCheckpointMagic, 4);
    detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(out, records.size());
    for (const auto& [name, tensor] : records) detail::write_record(out, name, tensor);
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline void load_checkpoint(Network& net, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    const auto version = detail::read_pod<std::uint32_t>(in, path);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint '" + path + "' has unsupported version " +
                      std::to_string(version));
    }
    const auto count = detail::read_pod<std::uint64_t>(in, path);
    std::map<std::string, Tensor> records;
    for (std::uint64_t r = 0; r < count; ++r) {
        const auto name_len = detail::read_pod<std::uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = detail::read_pod<std::uint32_t>(in, path);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(in, path));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw IoError("checkpoint '" + path + "' is truncated");
        records.emplace(std::move(name), std::move(t));
    }

    const auto take = [&](const std::string& name) -> Tensor {
        auto it = records.find(name);
        if (it == records.end()) {
            throw IoError("checkpoint '" + path + "' is missing record '" + name + "'");
        }
        Tensor t = std::move(it->second);
        records.erase(it);
        return t;
    };
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        NamedLayer& nl = net.named(i);
        if (Tensor* w = layer_weights(nl.layer)) {
            Tensor t = take(nl.name + "/weights");
            if (!t.same_shape(*w)) {
                throw IoError("checkpoint record '" + nl.name + "/weights' has shape " +
                              shape_string(t.shape()) + ", expected " + shape_string(w->shape()));
            }
            *w = std::move(t);
        } else if (auto* bn = std::get_if<BatchNorm>(&nl.layer)) {
            Tensor mean = take(nl.name + "/running_mean");
            Tensor var = take(nl.name + "/running_var");
            bn->running_mean_.assign(mean.data(), mean.data() + mean.size());
            bn->running_var_.assign(var.data(), var.data() + var.size());
        }
    }
    if (!records.empty()) {
        throw IoError("checkpoint '" + path + "' has unexpected record '" +
                      records.begin()->first + "'");
    }
}

// ---------------------------------------------------------------------------
// the experiment loop

struct TrainResult {
    std::vector<MetricsRow> rows;
    Network network;
    std::uint64_t batch_hash = kBatchHashSeed;
    bool zero_grad_warning = false;
};

inline constexpr double kDivergenceLossLimit = 1e4;

namespace detail {

inline std::vector<MetricsRow> tail_rows(const std::vector<MetricsRow>& rows) {
    const std::size_t keep = std::min<std::size_t>(rows.size(), 10);
    return {rows.end() - static_cast<long>(keep), rows.end()};
}

} // namespace detail

/// Full training loop: per batch, BP gradients -> weight decay -> rule
/// modification -> momentum step. Deterministic per seed. Divergence aborts
/// with the last metric rows attached.
inline TrainResult train(const TrainConfig& config, const Dataset& train_set,
                         const Dataset* test_set = nullptr) {
    config.validate();
    TrainResult result{.rows = {}, .network = build_network(config.arch, config.seed)};
    Network& net = result.network;
    VelocityState velocity = VelocityState::for_network(net);
    const auto params = net.parametric_indices();
    const auto start = std::chrono::steady_clock::now();

    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        BatchSequence sequence = batches(train_set, config.plan, epoch);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        std::vector<double> last_grad_norms(params.size(), 0.0);
        for (std::size_t i = 0; i < sequence.size(); ++i) {
            Batch batch = sequence.get(i);
            result.batch_hash = hash_batch(result.batch_hash, batch);
            BackwardBundle bundle = net.forward_backward(batch.input, batch.labels);
            if (!std::isfinite(bundle.loss) || bundle.loss > kDivergenceLossLimit) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                           ", step " + std::to_string(global_step) + ": loss " +
                                           std::to_string(bundle.loss),
                                       detail::tail_rows(result.rows));
            }
            try {
                step(net, bundle, config.optim, velocity, epoch, &result.zero_grad_warning);
            } catch (const DivergenceError& e) {
                throw TrainingDiverged(e.what(), detail::tail_rows(result.rows));
            }
            ++global_step;
            loss_sum += bundle.loss * static_cast<double>(batch.labels.size());
            seen += batch.labels.size();
            for (std::size_t p = 0; p < params.size(); ++p) {
                last_grad_norms[p] = frobenius_norm(bundle.grad_weights[p]);
            }
        }

        MetricsRow row;
        row.epoch = epoch;
        row.step = global_step;
        row.learning_rate = scheduled_rate(config.optim, epoch);
        row.train_loss = loss_sum / static_cast<double>(seen);
        row.grad_norms = last_grad_norms;
        const auto infos = compute_layer_factors(net);
        for (std::size_t p : params) {
            row.factors.push_back(infos[p].m_before * infos[p].sharing);
        }
        if (test_set != nullptr && config.eval_every > 0 &&
            (epoch + 1) % config.eval_every == 0) {
            const EvalResult eval = evaluate(net, test_set->images, test_set->labels);
            row.test_loss = eval.mean_loss;
            row.test_accuracy = eval.accuracy;
        }
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.rows.push_back(std::move(row));
    }

    if (!config.metrics_csv.empty()) write_metrics_csv(config.metrics_csv, result.rows);
    if (!config.metrics_jsonl.empty()) write_metrics_jsonl(config.metrics_jsonl, result.rows);
    if (!config.checkpoint_path.empty()) save_checkpoint(net, config.checkpoint_path);
    return result;
}

/// Two runs from bit-identical initial weights over bit-identical batch
/// streams; only the optimizer settings may differ. The consumed streams are
/// hash-checked.
inline std::pair<TrainResult, TrainResult> paired_run(const TrainConfig& config_a,
                                                      const TrainConfig& config_b,
                                                      const Dataset& train_set,
                                                      const Dataset* test_set = nullptr) {
    if (config_a.seed != config_b.seed) {
        throw ConfigError("paired runs must share the seed");
    }
    if (!(config_a.arch == config_b.arch)) {
        throw ConfigError("paired runs must share the architecture");
    }
    if (!(config_a.plan == config_b.plan)) {
        throw ConfigError("paired runs must share the batch plan");
    }
    if (config_a.epochs != config_b.epochs) {
        throw ConfigError("paired runs must share the epoch count");
    }
    TrainResult a = train(config_a, train_set, test_set);
    TrainResult b = train(config_b, train_set, test_set);
    if (a.batch_hash != b.batch_hash) {
        throw Error("paired runs consumed different batch streams");
    }
    return {std::move(a), std::move(b)};
}

} // namespace bmnn
