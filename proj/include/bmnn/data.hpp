#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bmnn/network.hpp"
#include "bmnn/rng.hpp"
#include "bmnn/tensor.hpp"

namespace bmnn {

struct ChannelStats {
    std::vector<double> mean, stddev;
};

/// Sample-first dataset: (count, channels, H, W) images or (count, dim)
/// feature vectors. `stats` records the standardization applied, empty while
/// the data is raw.
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::size_t classes = 0;
    ChannelStats stats;

    std::size_t count() const { return images.empty() ? 0 : images.dim(0); }
    bool standardized() const { return !stats.mean.empty(); }
};

inline ChannelStats compute_channel_stats(const Dataset& ds) {
    ds.images.require_rank(4, "channel statistics");
    const std::size_t count = ds.images.dim(0);
    const std::size_t channels = ds.images.dim(1);
    const std::size_t plane = ds.images.dim(2) * ds.images.dim(3);
    ChannelStats stats;
    stats.mean.assign(channels, 0.0);
    stats.stddev.assign(channels, 0.0);
    const double n = static_cast<double>(count * plane);
    for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double* p = ds.images.data() + (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) stats.mean[c] += p[i];
        }
    }
    for (std::size_t c = 0; c < channels; ++c) stats.mean[c] /= n;
    for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double* p = ds.images.data() + (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = p[i] - stats.mean[c];
                stats.stddev[c] += d * d;
            }
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
        stats.stddev[c] = std::sqrt(stats.stddev[c] / n);
        if (stats.stddev[c] == 0.0) stats.stddev[c] = 1.0;
    }
    return stats;
}

/// In-place per-channel standardization; the stats are kept on the dataset so
/// denormalization can reproduce the raw values.
inline void standardize(Dataset& ds, const ChannelStats& stats) {
    ds.images.require_rank(4, "standardize");
    const std::size_t channels = ds.images.dim(1);
    if (stats.mean.size() != channels || stats.stddev.size() != channels) {
        throw ShapeError("channel statistics do not match the dataset's channels");
    }
    const std::size_t count = ds.images.dim(0);
    const std::size_t plane = ds.images.dim(2) * ds.images.dim(3);
    for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            double* p = ds.images.data() + (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                p[i] = (p[i] - stats.mean[c]) / stats.stddev[c];
            }
        }
    }
    ds.stats = stats;
}

/// Undo the recorded standardization.
inline Tensor denormalized_images(const Dataset& ds) {
    if (!ds.standardized()) return ds.images;
    Tensor out = ds.images;
    const std::size_t count = out.dim(0);
    const std::size_t channels = out.dim(1);
    const std::size_t plane = out.dim(2) * out.dim(3);
    for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            double* p = out.data() + (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                p[i] = p[i] * ds.stats.stddev[c] + ds.stats.mean[c];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CIFAR binary format

enum class Split { Train, Test };

namespace detail {

inline void read_cifar_file(const std::string& file, int variant, Dataset& ds,
                            std::vector<unsigned char>& buffer) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file '" + file + "'");
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    const std::size_t record = variant == 10 ? 3073 : 3074;
    if (size <= 0 || static_cast<std::size_t>(size) % record != 0) {
        throw IoError("dataset file '" + file + "' is truncated: " + std::to_string(size) +
                      " bytes is not a multiple of the record size " + std::to_string(record));
    }
    buffer.resize(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(buffer.data()), size);
    if (!in) throw IoError("failed reading dataset file '" + file + "'");

    const std::size_t records = buffer.size() / record;
    const std::size_t label_offset = variant == 10 ? 0 : 1; // fine label of cifar-100
    for (std::size_t r = 0; r < records; ++r) {
        const unsigned char* rec = buffer.data() + r * record;
        const unsigned char label = rec[label_offset];
        if (label >= variant) {
            throw IoError("dataset file '" + file + "': label byte " + std::to_string(label) +
                          " out of range for " + std::to_string(variant) + " classes");
        }
        ds.labels.push_back(static_cast<int>(label));
        const unsigned char* pixels = rec + (variant == 10 ? 1 : 2);
        const std::size_t base = (ds.labels.size() - 1) * 3072;
        for (std::size_t i = 0; i < 3072; ++i) {
            ds.images[base + i] = static_cast<double>(pixels[i]) / 255.0;
        }
    }
}

inline std::size_t cifar_file_records(const std::string& file, int variant) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(file, ec);
    if (ec) throw IoError("cannot stat dataset file '" + file + "'");
    const std::size_t record = variant == 10 ? 3073 : 3074;
    return static_cast<std::size_t>(size) / record;
}

} // namespace detail

/// Load CIFAR-10/100 from the standard binary layout. `path` is either one
/// .bin file or a directory containing the standard file names. Pixels come
/// out in [0,1]; standardization is a separate step so test splits can reuse
/// the training statistics.
inline Dataset load_cifar(const std::string& path, int variant, Split split) {
    if (variant != 10 && variant != 100) {
        throw ConfigError("cifar variant must be 10 or 100, got " + std::to_string(variant));
    }
    std::vector<std::string> files;
    if (std::filesystem::is_directory(path)) {
        if (variant == 10) {
            if (split == Split::Train) {
                for (int i = 1; i <= 5; ++i) {
                    files.push_back(path + "/data_batch_" + std::to_string(i) + ".bin");
                }
            } else {
                files.push_back(path + "/test_batch.bin");
            }
        } else {
            files.push_back(path + (split == Split::Train ? "/train.bin" : "/test.bin"));
        }
    } else {
        files.push_back(path);
    }

    std::size_t total = 0;
    for (const auto& f : files) total += detail::cifar_file_records(f, variant);
    if (total == 0) throw IoError("dataset at '" + path + "' has no records");

    Dataset ds;
    ds.classes = static_cast<std::size_t>(variant);
    ds.images = Tensor({total, 3, 32, 32});
    ds.labels.reserve(total);
    std::vector<unsigned char> buffer;
    for (const auto& f : files) detail::read_cifar_file(f, variant, ds, buffer);
    return ds;
}

/// Write (3, 32, 32) images in the CIFAR-10 binary layout, affinely mapping
/// the value range onto bytes. Labels must fit the 10-class layout.
inline void write_cifar10(const std::string& file, const Dataset& ds) {
    ds.images.require_rank(4, "cifar writer");
    if (ds.images.dim(1) != 3 || ds.images.dim(2) != 32 || ds.images.dim(3) != 32) {
        throw ConfigError("cifar writer needs (3, 32, 32) images, got " +
                          shape_string(ds.images.shape()));
    }
    double lo = ds.images[0], hi = ds.images[0];
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        lo = std::min(lo, ds.images[i]);
        hi = std::max(hi, ds.images[i]);
    }
    const double span = hi > lo ? hi - lo : 1.0;

    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot create dataset file '" + file + "'");
    for (std::size_t r = 0; r < ds.count(); ++r) {
        if (ds.labels[r] < 0 || ds.labels[r] >= 10) {
            throw ConfigError("cifar-10 layout holds labels in [0, 10), got " +
                              std::to_string(ds.labels[r]));
        }
        unsigned char record[3073];
        record[0] = static_cast<unsigned char>(ds.labels[r]);
        for (std::size_t i = 0; i < 3072; ++i) {
            const double unit = (ds.images[r * 3072 + i] - lo) / span;
            record[1 + i] = static_cast<unsigned char>(std::lround(unit * 255.0));
        }
        out.write(reinterpret_cast<const char*>(record), sizeof(record));
    }
    if (!out) throw IoError("failed writing dataset file '" + file + "'");
}

// ---------------------------------------------------------------------------
// synthetic data

/// Gaussian blobs with unit within-class deviation and class means kept at
/// least four standard deviations apart, so the classes are linearly
/// separable by construction. Deterministic per seed.
inline Dataset synthetic_classification(std::size_t classes, std::size_t count,
                                        const std::vector<std::size_t>& sample_shape,
                                        std::uint64_t seed) {
    if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (count == 0) throw ConfigError("synthetic dataset needs at least 1 sample");
    std::size_t dim = 1;
    for (std::size_t d : sample_shape) dim *= d;
    if (sample_shape.empty() || dim == 0) {
        throw ConfigError("synthetic dataset needs a non-empty sample shape");
    }

    RngStream mean_rng(seed, "blob-means");
    std::vector<std::vector<double>> means;
    double scale = 4.0;
    int failures = 0;
    while (means.size() < classes) {
        std::vector<double> candidate(dim);
        for (double& v : candidate) v = scale * mean_rng.normal();
        bool accepted = true;
        for (const auto& existing : means) {
            double dist = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double d = candidate[i] - existing[i];
                dist += d * d;
            }
            if (std::sqrt(dist) < 4.0) {
                accepted = false;
                break;
            }
        }
        if (accepted) {
            means.push_back(std::move(candidate));
        } else if (++failures % 16 == 0) {
            scale *= 1.5;
        }
    }

    std::vector<std::size_t> shape = {count};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Dataset ds;
    ds.classes = classes;
    ds.images = Tensor(std::move(shape));
    ds.labels.resize(count);
    RngStream sample_rng(seed, "blob-samples");
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        ds.labels[i] = static_cast<int>(label);
        for (std::size_t d = 0; d < dim; ++d) {
            ds.images[i * dim + d] = means[label][d] + sample_rng.normal();
        }
    }
    return ds;
}

/// Contiguous slice [begin, begin + count) of a dataset; stats carry over.
inline Dataset subset(const Dataset& ds, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > ds.count()) {
        throw ConfigError("dataset subset [" + std::to_string(begin) + ", " +
                          std::to_string(begin + count) + ") out of range for " +
                          std::to_string(ds.count()) + " samples");
    }
    Dataset out;
    out.classes = ds.classes;
    out.stats = ds.stats;
    std::vector<std::size_t> shape = ds.images.shape();
    shape[0] = count;
    out.images = Tensor(std::move(shape));
    const std::size_t sample = ds.images.size() / ds.count();
    std::memcpy(out.images.data(), ds.images.data() + begin * sample,
                count * sample * sizeof(double));
    out.labels.assign(ds.labels.begin() + static_cast<long>(begin),
                      ds.labels.begin() + static_cast<long>(begin + count));
    return out;
}

// ---------------------------------------------------------------------------
// batching

struct BatchPlan {
    std::uint64_t seed = 0;
    std::size_t batch_size = 128;
    bool shuffle = true;
    double flip_probability = 0.0;

    bool operator==(const BatchPlan&) const = default;
};

struct Batch {
    Tensor input;
    std::vector<int> labels;
};

/// Reverse the width axis of one sample inside a (batch, c, h, w) tensor.
inline void flip_horizontal(Tensor& batch, std::size_t sample) {
    batch.require_rank(4, "horizontal flip");
    const std::size_t channels = batch.dim(1);
    const std::size_t h = batch.dim(2);
    const std::size_t w = batch.dim(3);
    double* base = batch.data() + sample * channels * h * w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t r = 0; r < h; ++r) {
            double* row = base + (c * h + r) * w;
            for (std::size_t i = 0; i < w / 2; ++i) std::swap(row[i], row[w - 1 - i]);
        }
    }
}

/// Deterministic batch iteration: the shuffle is keyed by (seed, epoch), the
/// per-image flip decision by (seed, epoch, dataset index). The final short
/// batch is included.
class BatchSequence {
public:
    BatchSequence(const Dataset& ds, const BatchPlan& plan, std::size_t epoch)
        : ds_(&ds), plan_(plan), epoch_(epoch), order_(ds.count()) {
        if (plan_.batch_size == 0) throw ConfigError("batch size must be at least 1");
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        if (plan_.shuffle) {
            RngStream rng(plan_.seed, "shuffle:" + std::to_string(epoch_));
            rng.shuffle(order_);
        }
    }

    std::size_t size() const {
        return (order_.size() + plan_.batch_size - 1) / plan_.batch_size;
    }

    Batch get(std::size_t index) const {
        const std::size_t begin = index * plan_.batch_size;
        const std::size_t end = std::min(order_.size(), begin + plan_.batch_size);
        if (begin >= end) throw ShapeError("batch index out of range");
        const std::vector<std::size_t> indices(order_.begin() + static_cast<long>(begin),
                                               order_.begin() + static_cast<long>(end));
        Batch batch;
        batch.input = gather_batch(ds_->images, indices);
        batch.labels.reserve(indices.size());
        for (std::size_t idx : indices) batch.labels.push_back(ds_->labels[idx]);
        if (plan_.flip_probability > 0.0 && batch.input.rank() == 4) {
            const std::string tag = "augment:" + std::to_string(epoch_);
            for (std::size_t b = 0; b < indices.size(); ++b) {
                if (hashed_uniform(plan_.seed, tag, indices[b]) < plan_.flip_probability) {
                    flip_horizontal(batch.input, b);
                }
            }
        }
        return batch;
    }

    const std::vector<std::size_t>& order() const { return order_; }

private:
    const Dataset* ds_;
    BatchPlan plan_;
    std::size_t epoch_;
    std::vector<std::size_t> order_;
};

inline BatchSequence batches(const Dataset& ds, const BatchPlan& plan, std::size_t epoch) {
    return BatchSequence(ds, plan, epoch);
}

inline constexpr std::uint64_t kBatchHashSeed = 0xcbf29ce484222325ULL;

/// FNV-1a over the batch payload, chained; used to prove two runs consumed
/// identical byte streams.
inline std::uint64_t hash_batch(std::uint64_t h, const Batch& batch) {
    const auto mix_bytes = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    mix_bytes(reinterpret_cast<const unsigned char*>(batch.input.data()),
              batch.input.size() * sizeof(double));
    mix_bytes(reinterpret_cast<const unsigned char*>(batch.labels.data()),
              batch.labels.size() * sizeof(int));
    return h;
}

} // namespace bmnn
