#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bmnn/optim.hpp"
#include "bmnn/trainer.hpp"

namespace bmnn {

// ---------------------------------------------------------------------------
// value parsing

inline std::string trimmed(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a number");
    }
    if (used != value.size()) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a number");
    }
    return v;
}

inline std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &used);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a non-negative integer");
    }
    if (used != value.size()) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a non-negative integer");
    }
    return static_cast<std::size_t>(v);
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("key '" + key + "': '" + value + "' is not a boolean");
}

/// "3x32x32" -> {3, 32, 32}
inline std::vector<std::size_t> parse_shape(const std::string& key, const std::string& value) {
    std::vector<std::size_t> shape;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, 'x')) shape.push_back(parse_size(key, trimmed(part)));
    if (shape.empty()) throw ConfigError("key '" + key + "': empty shape");
    return shape;
}

/// "60:0.2,120:0.2" -> schedule entries
inline Schedule parse_schedule(const std::string& key, const std::string& value) {
    Schedule schedule;
    if (trimmed(value).empty()) return schedule;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("key '" + key + "': schedule entries look like <epoch>:<factor>");
        }
        schedule.entries.emplace_back(parse_size(key, trimmed(part.substr(0, colon))),
                                      parse_double(key, trimmed(part.substr(colon + 1))));
    }
    return schedule;
}

/// "conv 3 20 5 1 0" -> one layer description
inline LayerSpec parse_layer_spec(const std::string& key, const std::string& value) {
    std::stringstream ss(value);
    LayerSpec spec;
    ss >> spec.type;
    std::string token;
    while (ss >> token) spec.params.push_back(parse_size(key, token));
    if (spec.type.empty()) throw ConfigError("key '" + key + "': empty layer description");
    return spec;
}

// ---------------------------------------------------------------------------
// configuration document

/// Flat `key = value` document; '#' starts a comment; unknown keys are
/// rejected when applied.
struct ConfigDocument {
    std::vector<std::pair<std::string, std::string>> entries;

    static ConfigDocument parse_string(const std::string& text) {
        ConfigDocument doc;
        std::stringstream ss(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(ss, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trimmed(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + line + "'");
            }
            doc.entries.emplace_back(trimmed(line.substr(0, eq)), trimmed(line.substr(eq + 1)));
        }
        return doc;
    }

    static ConfigDocument parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file '" + path + "'");
        std::stringstream buffer;
        buffer << in.rdbuf();
        return parse_string(buffer.str());
    }
};

/// Everything a command needs: the training configuration plus dataset
/// selection and paired-run settings.
struct RunSettings {
    TrainConfig train;
    std::string dataset = "synthetic"; // synthetic | cifar10 | cifar100
    std::string data_dir;              // falls back to $BMNN_DATA_DIR
    std::size_t train_count = 5000;    // 0 = whole split
    std::size_t test_count = 1000;
    std::string paired_rule;           // non-empty: run an A/B pair
    double paired_lr = 0.0;            // 0: reuse the primary rate

    RunSettings() {
        train.plan.batch_size = 128;
        train.epochs = 20;
        train.optim.learning_rate = 0.1;
        train.optim.momentum = 0.9;
        train.optim.nesterov = true;
    }
};

/// Apply one key to the settings; unknown keys are usage errors naming the
/// key. The `layer.N` family accumulates a custom architecture.
inline void apply_config_entry(RunSettings& s, const std::string& key, const std::string& value) {
    if (key.rfind("layer.", 0) == 0) {
        const std::size_t index = parse_size(key, key.substr(6));
        if (s.train.arch.layers.size() <= index) s.train.arch.layers.resize(index + 1);
        s.train.arch.layers[index] = parse_layer_spec(key, value);
        return;
    }
    if (key == "arch") {
        s.train.arch.preset = value == "custom" ? "" : value;
    } else if (key == "classes") {
        s.train.arch.classes = parse_size(key, value);
    } else if (key == "input") {
        s.train.arch.input_shape = parse_shape(key, value);
    } else if (key == "rule") {
        s.train.optim.rule = parse_rule(value);
    } else if (key == "lr") {
        s.train.optim.learning_rate = parse_double(key, value);
    } else if (key == "momentum") {
        s.train.optim.momentum = parse_double(key, value);
    } else if (key == "nesterov") {
        s.train.optim.nesterov = parse_bool(key, value);
    } else if (key == "weight_decay") {
        s.train.optim.weight_decay = parse_double(key, value);
    } else if (key == "schedule") {
        s.train.optim.schedule = parse_schedule(key, value);
    } else if (key == "epochs") {
        s.train.epochs = parse_size(key, value);
    } else if (key == "batch_size") {
        s.train.plan.batch_size = parse_size(key, value);
    } else if (key == "shuffle") {
        s.train.plan.shuffle = parse_bool(key, value);
    } else if (key == "flip_prob") {
        s.train.plan.flip_probability = parse_double(key, value);
    } else if (key == "seed") {
        s.train.seed = parse_size(key, value);
    } else if (key == "eval_every") {
        s.train.eval_every = parse_size(key, value);
    } else if (key == "metrics_csv") {
        s.train.metrics_csv = value;
    } else if (key == "metrics_jsonl") {
        s.train.metrics_jsonl = value;
    } else if (key == "checkpoint") {
        s.train.checkpoint_path = value;
    } else if (key == "dataset") {
        s.dataset = value;
    } else if (key == "data_dir") {
        s.data_dir = value;
    } else if (key == "train_count") {
        s.train_count = parse_size(key, value);
    } else if (key == "test_count") {
        s.test_count = parse_size(key, value);
    } else if (key == "paired_rule") {
        s.paired_rule = value;
    } else if (key == "paired_lr") {
        s.paired_lr = parse_double(key, value);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

inline void apply_config_document(RunSettings& s, const ConfigDocument& doc) {
    for (const auto& [key, value] : doc.entries) apply_config_entry(s, key, value);
}

/// Batch-plan seed follows the run seed unless the document set it. The plan
/// seed key is intentionally absent: paired fairness wants one seed.
inline void finalize_settings(RunSettings& s) {
    s.train.plan.seed = s.train.seed;
    if (s.data_dir.empty()) {
        if (const char* env = std::getenv("BMNN_DATA_DIR")) s.data_dir = env;
    }
}

} // namespace bmnn
